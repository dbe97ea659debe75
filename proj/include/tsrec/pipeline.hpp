#pragma once

#include "json.hpp"
#include "tsrec/catalog.hpp"
#include "tsrec/config.hpp"
#include "tsrec/corpus.hpp"
#include "tsrec/decode_eval.hpp"
#include "tsrec/extractor.hpp"
#include "tsrec/init.hpp"
#include "tsrec/model.hpp"
#include "tsrec/quantizer.hpp"
#include "tsrec/sidspace.hpp"
#include "tsrec/synth.hpp"

namespace tsrec {

namespace fs = std::filesystem;

struct StageDirs {
  fs::path quantize, mint, extract, init, corpus, train, eval, probe;

  static StageDirs under(const fs::path& w) {
    return {w / "quantize", w / "mint", w / "extract", w / "init", w / "corpus", w / "train", w / "eval", w / "probe"};
  }
};

inline std::string file_hash(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError("input file not found: " + p.string());
  return hex64(fnv1a(read_file(p)));
}

// Per-stage config hash chained through upstream stages, stored next to the
// stage outputs in meta.json and checked before any consumer runs.
class Pipeline {
 public:
  Pipeline(Config cfg, fs::path base_dir) : cfg_(std::move(cfg)), base_(std::move(base_dir)) {
    dirs_ = StageDirs::under(path("paths.workdir"));
  }

  const Config& config() const { return cfg_; }
  Config& config() { return cfg_; }
  StageDirs& dirs() { return dirs_; }
  const StageDirs& dirs() const { return dirs_; }

  fs::path path(const std::string& key) const {
    fs::path p(cfg_.str(key));
    return p.is_absolute() ? p : base_ / p;
  }

  std::uint64_t seed() const { return cfg_.u64("seed"); }

  // ---------------------------------------------------------------------------
  // Hashes
  // ---------------------------------------------------------------------------

  std::string stage_hash(const std::string& stage) const {
    auto h = [&](const std::string& s) { return hex64(fnv1a(s)); };
    const std::string seed_line = "seed=" + cfg_.str("seed") + "\n";
    if (stage == "quantize")
      return h("quantize\n" + seed_line + cfg_.canonical({"catalog", "quantizer"}) + file_hash(path("paths.catalog")) +
               file_hash(path("paths.interactions")) + file_hash(path("paths.embeddings")));
    if (stage == "mint") return h("mint\n" + stage_hash("quantize"));
    if (stage == "extract") {
      std::string keys;
      for (auto k : {"backend", "endpoint", "model", "chat_format", "sample_cap", "top_terms", "fallback_local"})
        keys += std::string(k) + "=" + cfg_.str(std::string("extractor.") + k) + "\n";
      return h("extract\n" + stage_hash("mint") + keys);
    }
    if (stage == "init")
      return h("init\n" + stage_hash("extract") + cfg_.canonical({"init"}) + file_hash(path("paths.word_table")));
    if (stage == "corpus") return h("corpus\n" + stage_hash("extract") + cfg_.canonical({"corpus"}));
    if (stage == "train") {
      std::string s = "train\n" + stage_hash("corpus") + stage_hash("init") + cfg_.canonical({"model", "train"});
      if (cfg_.flag("model.pretrained_words")) s += file_hash(path("paths.word_table"));
      return h(s);
    }
    if (stage == "eval")
      return h("eval\n" + stage_hash("train") +
               cfg_.canonical({"eval.beam_width", "eval.probe_width", "eval.probes", "eval.probe_items", "eval.max_users"}));
    if (stage == "probe")
      return h("probe\n" + stage_hash("train") + cfg_.canonical({"eval.probe_width", "eval.probe_items"}));
    throw ContractViolation("unknown stage " + stage);
  }

  const fs::path& dir_of(const std::string& stage) const {
    if (stage == "quantize") return dirs_.quantize;
    if (stage == "mint") return dirs_.mint;
    if (stage == "extract") return dirs_.extract;
    if (stage == "init") return dirs_.init;
    if (stage == "corpus") return dirs_.corpus;
    if (stage == "train") return dirs_.train;
    if (stage == "eval") return dirs_.eval;
    if (stage == "probe") return dirs_.probe;
    throw ContractViolation("unknown stage " + stage);
  }

  void require_stage(const std::string& stage) const {
    const auto meta = dir_of(stage) / "meta.json";
    if (!fs::exists(meta))
      throw PrerequisiteError("missing artifacts from stage '" + stage + "' (" + dir_of(stage).string() +
                                  "); run `tsrec " + stage + "` first",
                              stage);
    std::string recorded;
    try {
      recorded = nlohmann::json::parse(read_file(meta)).at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw PrerequisiteError("unreadable " + meta.string() + "; rerun `tsrec " + stage + "`", stage);
    }
    const auto expected = stage_hash(stage);
    if (recorded != expected)
      throw PrerequisiteError("artifacts from stage '" + stage + "' were produced with a different configuration (" +
                                  recorded + " vs " + expected + "); rerun `tsrec " + stage + "`",
                              stage);
  }

  void write_meta(const std::string& stage, const std::vector<std::string>& upstream) const {
    nlohmann::ordered_json j;
    j["stage"] = stage;
    j["config_hash"] = stage_hash(stage);
    for (const auto& u : upstream) j["upstream"][u] = stage_hash(u);
    write_file_atomic(dir_of(stage) / "meta.json", j.dump(2) + "\n");
  }

  void begin_stage(const std::string& stage) const {
    fs::create_directories(dir_of(stage));
    fs::remove(dir_of(stage) / "meta.json");
    log_info("stage " + stage + " -> " + dir_of(stage).string());
  }

  // ---------------------------------------------------------------------------
  // Loaders for stage outputs
  // ---------------------------------------------------------------------------

  ItemCatalog load_filtered() const {
    auto c = load_catalog(dirs_.quantize / "catalog.jsonl");
    for (const auto& line : read_lines(dirs_.quantize / "sequences.tsv")) {
      if (line.empty()) continue;
      auto f = split(line, '\t');
      if (f.size() != 2) throw ParseError("malformed sequences.tsv line");
      c.sequences[f[0]] = split_ws(f[1]);
    }
    return c;
  }

  std::vector<std::size_t> codes_per_level() const {
    auto L = cfg_.size("quantizer.levels");
    auto k = cfg_.size_list("quantizer.codes");
    if (k.size() == 1) k.assign(L, k[0]);
    if (k.size() != L) throw ConfigError("quantizer.codes must list one size per level (or a single size)");
    return k;
  }

  SidMap load_sids() const { return parse_sid_map(read_file(dirs_.mint / "sid_map.tsv"), codes_per_level()); }

  Vocabulary load_vocab() const { return Vocabulary::parse(read_file(dirs_.corpus / "vocab.txt")); }

  // ---------------------------------------------------------------------------
  // Stages
  // ---------------------------------------------------------------------------

  void run_quantize() const {
    begin_stage("quantize");
    auto catalog = load_catalog(path("paths.catalog"));
    auto log = load_interactions(path("paths.interactions"));
    auto filtered = filter_and_sequence(log, catalog, cfg_.size("catalog.min_count"));
    if (filtered.items.empty()) throw DataError("no items survive the interaction filter");
    auto full = load_embeddings(path("paths.embeddings"), catalog);
    EmbeddingMatrix emb;
    emb.item_order = filtered.item_ids();
    emb.rows.resize(static_cast<Eigen::Index>(emb.item_order.size()), full.rows.cols());
    std::map<std::string, Eigen::Index> row_of;
    for (std::size_t i = 0; i < full.item_order.size(); ++i) row_of[full.item_order[i]] = static_cast<Eigen::Index>(i);
    for (std::size_t i = 0; i < emb.item_order.size(); ++i)
      emb.rows.row(static_cast<Eigen::Index>(i)) = full.rows.row(row_of.at(emb.item_order[i]));

    QuantizerConfig q;
    q.levels = cfg_.size("quantizer.levels");
    q.codes_per_level = codes_per_level();
    q.max_iters = cfg_.size("quantizer.max_iters");
    q.rel_tol = cfg_.real("quantizer.rel_tol");
    q.normalize = cfg_.flag("quantizer.normalize");
    q.pca_dim = cfg_.size("quantizer.pca_dim");
    q.seed = seed();
    q.validate();
    auto pre = preprocess(emb, q);
    auto fit = rq_fit_detailed(pre, q);

    write_file_atomic(dirs_.quantize / "catalog.jsonl", format_catalog(filtered));
    std::string seqs;
    for (const auto& [u, s] : filtered.sequences) seqs += u + "\t" + join(s, " ") + "\n";
    write_file_atomic(dirs_.quantize / "sequences.tsv", seqs);
    write_file_atomic(dirs_.quantize / "codebook.bin", format_codebook(fit.codebook));
    std::string codes;
    for (std::size_t i = 0; i < pre.item_order.size(); ++i) {
      std::vector<std::string> c;
      for (auto k : fit.encoded.codes[i]) c.push_back(std::to_string(k));
      codes += pre.item_order[i] + "\t" + join(c, " ") + "\n";
    }
    write_file_atomic(dirs_.quantize / "codes.tsv", codes);
    nlohmann::ordered_json rep;
    rep["items"] = filtered.items.size();
    rep["users"] = filtered.sequences.size();
    rep["residual_energy"] = fit.residual_energy;
    write_file_atomic(dirs_.quantize / "report.json", rep.dump(2) + "\n");
    write_meta("quantize", {});
    log_info("quantized " + std::to_string(filtered.items.size()) + " items, " +
             std::to_string(filtered.sequences.size()) + " users");
  }

  void run_mint() const {
    require_stage("quantize");
    begin_stage("mint");
    EncodeResult enc;
    std::vector<std::string> order;
    const auto cpl = codes_per_level();
    for (const auto& line : read_lines(dirs_.quantize / "codes.tsv")) {
      if (line.empty()) continue;
      auto f = split(line, '\t');
      if (f.size() != 2) throw ParseError("malformed codes.tsv line");
      order.push_back(f[0]);
      std::vector<std::uint32_t> c;
      for (const auto& s : split_ws(f[1])) c.push_back(static_cast<std::uint32_t>(std::stoul(s)));
      enc.codes.push_back(std::move(c));
    }
    auto res = assign_sids_detailed(enc, order, cpl, seed());
    write_file_atomic(dirs_.mint / "sid_map.tsv", format_sid_map(res.sids));
    std::string toks;
    for (const auto& t : mint_tokens(cpl)) toks += t + "\n";
    write_file_atomic(dirs_.mint / "sid_tokens.txt", toks);
    nlohmann::ordered_json rep;
    rep["items"] = res.sids.size();
    rep["reassigned"] = res.reassigned;
    write_file_atomic(dirs_.mint / "report.json", rep.dump(2) + "\n");
    write_meta("mint", {"quantize"});
    log_info("minted SIDs for " + std::to_string(res.sids.size()) + " items (" + std::to_string(res.reassigned) +
             " collision reassignments)");
  }

  ExtractorConfig extractor_config() const {
    ExtractorConfig e;
    const auto b = cfg_.str("extractor.backend");
    if (b == "local")
      e.backend = ExtractorBackend::local;
    else if (b == "remote")
      e.backend = ExtractorBackend::remote;
    else
      throw ConfigError("extractor.backend must be local or remote");
    e.endpoint = cfg_.str("extractor.endpoint");
    if (e.backend == ExtractorBackend::remote && e.endpoint.empty())
      throw ConfigError("extractor.endpoint is required for the remote backend");
    e.model = cfg_.str("extractor.model");
    e.api_key_env = cfg_.str("extractor.api_key_env");
    e.chat_format = cfg_.flag("extractor.chat_format");
    e.sample_cap = cfg_.size("extractor.sample_cap");
    if (e.sample_cap < 1) throw ConfigError("extractor.sample_cap must be >= 1");
    e.max_retries = cfg_.size("extractor.max_retries");
    e.backoff_ms = cfg_.size("extractor.backoff_ms");
    e.timeout_s = cfg_.size("extractor.timeout_s");
    e.max_in_flight = cfg_.size("extractor.max_in_flight");
    e.top_terms = cfg_.size("extractor.top_terms");
    e.fallback_local = cfg_.flag("extractor.fallback_local");
    e.seed = seed();
    e.cache_dir = cfg_.str("extractor.cache_dir").empty() ? dirs_.extract / "cache" : path("extractor.cache_dir");
    return e;
  }

  void run_extract() const {
    require_stage("mint");
    begin_stage("extract");
    auto catalog = load_filtered();
    auto sids = load_sids();
    auto vocab = Vocabulary::build({}, codes_per_level());
    auto clusters = build_token_clusters(sids, vocab);
    auto sems = extract_all(clusters, catalog, extractor_config());
    write_file_atomic(dirs_.extract / "semantics.jsonl", format_semantics_file(sems));
    write_meta("extract", {"mint"});
    log_info("extracted semantics for " + std::to_string(sems.size()) + " SID tokens");
  }

  std::vector<TokenSemantics> load_semantics() const {
    return parse_semantics_file(read_file(dirs_.extract / "semantics.jsonl"));
  }

  void run_init() const {
    require_stage("extract");
    begin_stage("init");
    auto table = load_embedding_table(path("paths.word_table"));
    auto vocab = Vocabulary::build({}, codes_per_level());
    auto plan = InitPlan::sa_depth(cfg_.size("init.depth"), vocab.levels(), derive_seed(seed(), "init"));
    auto res = build_init_matrix(load_semantics(), vocab, table, plan, cfg_.flag("init.full_covariance"));
    write_file_atomic(dirs_.init / "init_matrix.bin", format_init_matrix(res.matrix, vocab, plan.seed));
    write_file_atomic(dirs_.init / "init_report.json", res.report.to_json());
    write_meta("init", {"extract"});
    log_info("init: " + std::to_string(res.report.semantic_count) + " semantic, " +
             std::to_string(res.report.gaussian_count) + " gaussian rows; semantic norm mean " +
             fmt_fixed(res.report.semantic_norm_mean, 4) + ", table norm mean " + fmt_fixed(res.report.table_norm_mean, 4));
  }

  TaskWeights task_weights() const {
    TaskWeights w;
    for (const auto& t : task::all) {
      const auto v = cfg_.real("corpus.weight." + t);
      if (!(v > 0)) throw ConfigError("corpus.weight." + t + " must be positive");
      w[t] = v;
    }
    return w;
  }

  void run_corpus() const {
    require_stage("extract");
    begin_stage("corpus");
    auto catalog = load_filtered();
    auto sids = load_sids();
    auto sems = load_semantics();
    const auto tasks = cfg_.list("corpus.tasks");
    for (const auto& t : tasks)
      if (std::find(task::all.begin(), task::all.end(), t) == task::all.end())
        throw ConfigError("corpus.tasks: unknown task '" + t + "'");
    auto on = [&](std::string_view t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };
    if (!on(task::seq_rec)) throw ConfigError("corpus.tasks must include seq_rec");
    const auto max_hist = cfg_.size("corpus.max_hist");
    const bool sliding = cfg_.flag("corpus.sliding");
    auto split = split_leave_last_out(catalog);
    std::vector<std::vector<InstructionExample>> parts;
    parts.push_back(make_seq_rec_examples(split, sids, max_hist, sliding));
    if (on(task::title2sid) || on(task::sid2title)) {
      auto ia = make_item_alignment_examples(catalog, sids);
      std::erase_if(ia, [&](const InstructionExample& e) { return !on(e.task); });
      parts.push_back(std::move(ia));
    }
    if (on(task::asym1) || on(task::asym2)) {
      auto as = make_asymmetric_examples(split, catalog, sids, max_hist, sliding);
      std::erase_if(as, [&](const InstructionExample& e) { return !on(e.task); });
      parts.push_back(std::move(as));
    }
    if (on(task::tsalign_s2t) || on(task::tsalign_t2s)) {
      auto ts = make_tsalign_examples(sems);
      std::erase_if(ts, [&](const InstructionExample& e) { return !on(e.task); });
      parts.push_back(std::move(ts));
    }
    auto corpus = assemble_corpus(parts, task_weights(), seed(), codes_per_level(),
                                  make_eval_examples(split, sids, max_hist, false),
                                  make_eval_examples(split, sids, max_hist, true));

    // Vocabulary covers every text the pipeline can render, independent of
    // which tasks are enabled, so ablation variants share token ids.
    std::vector<std::string> texts;
    for (const auto& [id, it] : catalog.items) {
      texts.push_back(it.title);
      texts.push_back(it.description);
    }
    for (const auto& s : sems) texts.push_back(s.description);
    for (auto t : {tmpl::seq_rec, tmpl::title2sid, tmpl::sid2title, tmpl::asym1, tmpl::asym2, tmpl::tsalign_s2t,
                   tmpl::tsalign_t2s})
      texts.emplace_back(t);
    auto pre = collect_pre_tokens({&corpus.train, &corpus.valid, &corpus.test}, texts);
    std::erase_if(pre, [](const std::string& w) { return w == "{" || w == "}"; });
    auto vocab = Vocabulary::build(pre, codes_per_level());

    write_file_atomic(dirs_.corpus / "train.jsonl", format_examples(corpus.train));
    write_file_atomic(dirs_.corpus / "valid.jsonl", format_examples(corpus.valid));
    write_file_atomic(dirs_.corpus / "test.jsonl", format_examples(corpus.test));
    write_file_atomic(dirs_.corpus / "weights.json", format_weights(corpus.mix_weights, corpus.counts));
    write_file_atomic(dirs_.corpus / "vocab.txt", vocab.format());
    write_meta("corpus", {"extract"});
    std::string counts;
    for (const auto& [t, n] : corpus.counts) counts += " " + t + "=" + std::to_string(n);
    log_info("corpus: " + std::to_string(corpus.train.size()) + " train examples;" + counts + "; vocab " +
             std::to_string(vocab.size()));
  }

  ModelConfig model_config(std::size_t vocab_size) const {
    ModelConfig m;
    m.dim = cfg_.size("model.dim");
    m.layers = cfg_.size("model.layers");
    m.heads = cfg_.size("model.heads");
    m.ffn_mult = cfg_.real("model.ffn_mult");
    m.max_seq = cfg_.size("model.max_seq");
    m.tie_embeddings = cfg_.flag("model.tie_embeddings");
    m.dropout = cfg_.real("model.dropout");
    m.init_std = cfg_.real("model.init_std");
    m.vocab_size = vocab_size;
    m.seed = derive_seed(seed(), "model");
    try {
      m.validate();
    } catch (const ConfigError&) {
      throw;
    }
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.steps = cfg_.size("train.steps");
    t.batch_size = cfg_.size("train.batch_size");
    t.lr = cfg_.real("train.lr");
    t.weight_decay = cfg_.real("train.weight_decay");
    t.clip = cfg_.real("train.clip");
    t.warmup = cfg_.size("train.warmup");
    t.eval_every = cfg_.size("train.eval_every");
    t.patience = cfg_.size("train.patience");
    t.eval_examples = cfg_.size("train.eval_examples");
    t.threads = std::max<std::size_t>(1, cfg_.size("train.threads"));
    t.restore_best = cfg_.flag("train.restore_best");
    t.seed = derive_seed(seed(), "train");
    if (t.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    return t;
  }

  // Fresh parameters: word rows from the pretrained table when enabled, SID
  // rows from the init matrix.
  Model build_model(const Vocabulary& vocab) const {
    Model model(model_config(vocab.size()));
    model.init_parameters();
    if (cfg_.flag("model.pretrained_words")) {
      auto table = load_embedding_table(path("paths.word_table"));
      if (table.dim() != model.config().dim)
        throw ConfigError("word table dim " + std::to_string(table.dim()) + " differs from model.dim " +
                          std::to_string(model.config().dim));
      for (std::uint32_t id = 0; id < vocab.pre_size(); ++id)
        if (auto r = table.find(vocab.token(id))) model.set_token_embedding(id, table.matrix.row(static_cast<Eigen::Index>(*r)).transpose());
    }
    if (cfg_.size("model.pretrain_steps") > 0) {
      for (std::size_t i = 0; i < vocab.sid_size(); ++i)
        model.set_token_embedding(static_cast<std::uint32_t>(vocab.pre_size() + i), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.config().dim)));
      pretrain_backbone(model, vocab);
    }
    auto init = parse_init_matrix(read_file(dirs_.init / "init_matrix.bin"));
    if (static_cast<std::size_t>(init.rows()) != vocab.sid_size())
      throw DataError("init matrix rows do not match the SID vocabulary");
    if (static_cast<std::size_t>(init.cols()) != model.config().dim)
      throw ConfigError("init matrix dim " + std::to_string(init.cols()) + " differs from model.dim " +
                        std::to_string(model.config().dim));
    for (std::size_t i = 0; i < vocab.sid_size(); ++i)
      model.set_token_embedding(static_cast<std::uint32_t>(vocab.pre_size() + i), init.row(static_cast<Eigen::Index>(i)).transpose());
    return model;
  }

  // Language-model warm-up on item text before any SID row is set. SID rows
  // stay zero here, so every init variant starts SFT from the same backbone.
  void pretrain_backbone(Model& model, const Vocabulary& vocab) const {
    const auto catalog = load_filtered();
    std::vector<EncodedExample> text;
    for (const auto& [id, it] : catalog.items) {
      auto body = it.title + " . " + it.description;
      if (trim(body) != ".") text.push_back(encode_text(body, vocab, model.config().max_seq));
    }
    if (text.empty()) return;
    TrainConfig tc = train_config();
    tc.steps = cfg_.size("model.pretrain_steps");
    tc.lr = cfg_.real("model.pretrain_lr");
    tc.eval_every = 0;
    tc.seed = derive_seed(seed(), "pretrain");
    tc.frozen = {"wte"};
    if (!model.config().tie_embeddings) tc.frozen.push_back("w_out");
    const auto r = train(model, text, std::vector<double>(text.size(), 1.0), {}, tc);
    std::optional<double> first, last;
    for (const auto& row : r.rows)
      if (row.train_loss) {
        if (!first) first = row.train_loss;
        last = row.train_loss;
      }
    if (first) log_info("backbone warm-up: loss " + fmt_fixed(*first, 4) + " -> " + fmt_fixed(*last, 4));
  }

  void run_train() const {
    require_stage("corpus");
    require_stage("init");
    begin_stage("train");
    auto vocab = load_vocab();
    auto model = build_model(vocab);
    const auto max_seq = model.config().max_seq;
    auto train_ex = parse_examples(read_file(dirs_.corpus / "train.jsonl"));
    auto valid_ex = parse_examples(read_file(dirs_.corpus / "valid.jsonl"));
    auto weights = parse_weights(read_file(dirs_.corpus / "weights.json"));
    std::vector<EncodedExample> tr, va;
    const auto w = example_weights(train_ex, weights);
    for (const auto& e : train_ex) tr.push_back(encode_example(e, vocab, max_seq));
    for (const auto& e : valid_ex) va.push_back(encode_example(e, vocab, max_seq));

    const auto sids = load_sids();
    const auto trie = build_trie(sids);
    const auto catalog = load_filtered();
    auto queries = rank_queries(split_leave_last_out(catalog), false, cfg_.size("corpus.max_hist"));
    if (queries.size() > cfg_.size("train.hr_users")) queries.resize(cfg_.size("train.hr_users"));
    const auto hr_beam = cfg_.size("train.hr_beam");
    HitRateFn hr5;
    if (!queries.empty() && hr_beam > 0)
      hr5 = [&](const Model& m) { return full_rank_eval(m, vocab, sids, trie, queries, hr_beam, {5}).hr.at(5); };

    const auto tc = train_config();
    auto report = train(model, tr, w, va, tc, hr5);
    write_file_atomic(dirs_.train / "model.ckpt", format_checkpoint(model, {{"config_hash", stage_hash("train")}}));
    write_file_atomic(dirs_.train / "train_report.csv", report.to_csv());
    nlohmann::ordered_json s;
    s["steps_run"] = report.steps_run;
    s["best_step"] = report.best_step;
    s["best_eval_loss"] = report.best_eval_loss;
    s["early_stopped"] = report.early_stopped;
    s["early_eval_loss"] = early_eval_loss(report, tc.steps);
    s["parameters"] = model.num_params();
    write_file_atomic(dirs_.train / "summary.json", s.dump(2) + "\n");
    write_meta("train", {"corpus", "init"});
  }

  // Mean eval loss over evaluations in the first 10% of planned steps.
  static double early_eval_loss(const TrainReport& r, std::size_t planned_steps) {
    CompensatedSum s;
    std::size_t n = 0;
    for (const auto& [step, loss] : r.eval_curve())
      if (static_cast<double>(step) <= 0.1 * static_cast<double>(planned_steps)) {
        s.add(loss);
        ++n;
      }
    return n ? s.value() / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }

  Model load_model() const {
    nlohmann::json meta;
    auto m = parse_checkpoint(read_file(dirs_.train / "model.ckpt"), &meta);
    if (!meta.contains("config_hash") || meta["config_hash"].get<std::string>() != stage_hash("train"))
      throw PrerequisiteError("checkpoint config hash does not match; rerun `tsrec train`", "train");
    return m;
  }

  void run_eval() const {
    require_stage("train");
    begin_stage("eval");
    auto vocab = load_vocab();
    auto model = load_model();
    auto sids = load_sids();
    auto trie = build_trie(sids);
    auto catalog = load_filtered();
    auto queries = rank_queries(split_leave_last_out(catalog), true, cfg_.size("corpus.max_hist"));
    if (auto cap = cfg_.size("eval.max_users"); cap && queries.size() > cap) queries.resize(cap);
    const auto threads = std::max<std::size_t>(1, cfg_.size("eval.threads"));
    auto rank = full_rank_eval(model, vocab, sids, trie, queries, cfg_.size("eval.beam_width"), {3, 5, 10}, threads);
    std::optional<ComprehensionReport> comp;
    if (cfg_.flag("eval.probes"))
      comp = comprehension_eval(model, vocab, catalog, sids, trie, cfg_.size("eval.probe_width"),
                                cfg_.size("eval.probe_items"), threads);
    write_file_atomic(dirs_.eval / "report.json", format_eval_report(rank, comp));
    if (cfg_.flag("eval.per_user_csv")) write_file_atomic(dirs_.eval / "per_user.csv", format_per_user_csv(rank));
    write_meta("eval", {"train"});
    log_info("eval: HR@10 " + fmt_fixed(rank.hr.at(10), 4) + " NDCG@10 " + fmt_fixed(rank.ndcg.at(10), 4) +
             (comp ? " ACC1 " + fmt_fixed(comp->acc1, 4) + " ACC2 " + fmt_fixed(comp->acc2, 4) : std::string()));
  }

  void run_probe() const {
    require_stage("train");
    begin_stage("probe");
    auto vocab = load_vocab();
    auto model = load_model();
    auto sids = load_sids();
    auto trie = build_trie(sids);
    auto catalog = load_filtered();
    auto comp = comprehension_eval(model, vocab, catalog, sids, trie, cfg_.size("eval.probe_width"),
                                   cfg_.size("eval.probe_items"), std::max<std::size_t>(1, cfg_.size("eval.threads")));
    nlohmann::ordered_json j;
    j["acc1"] = comp.acc1;
    j["acc2"] = comp.acc2;
    j["items"] = comp.items;
    j["beam_width"] = comp.beam_width;
    write_file_atomic(dirs_.probe / "probe.json", j.dump(2) + "\n");
    write_meta("probe", {"train"});
    log_info("probe: ACC1 " + fmt_fixed(comp.acc1, 4) + " ACC2 " + fmt_fixed(comp.acc2, 4));
  }

  void run_all() const {
    run_quantize();
    run_mint();
    run_extract();
    run_init();
    run_corpus();
    run_train();
    run_eval();
  }

  // Init depth x TS-Align grid sharing the quantize/mint/extract artifacts.
  void run_ablate() const {
    require_stage("extract");
    const auto root = path("paths.workdir") / "ablate";
    fs::create_directories(root);
    std::string summary =
        "run,init,tsalign,hr3,hr5,hr10,ndcg3,ndcg5,ndcg10,acc1,acc2,early_eval_loss,best_eval_loss,steps_run\n";
    std::string curves = "run,step,eval_loss,hr5\n";
    const auto depths = cfg_.size_list("ablate.depths");
    const auto variants = cfg_.list("ablate.tsalign");
    const auto L = cfg_.size("quantizer.levels");
    for (const auto& v : variants)
      if (v != "with" && v != "without") throw ConfigError("ablate.tsalign entries must be 'with' or 'without'");
    for (auto d : depths)
      if (d > L) throw ConfigError("ablate.depths entries must be <= quantizer.levels");
    for (const auto& variant : variants) {
      for (auto depth : depths) {
        const std::string init_name = depth == 0 ? "random" : "sa" + std::to_string(depth);
        const std::string run = init_name + "_" + variant;
        Pipeline sub(*this);
        auto tasks = cfg_.list("corpus.tasks");
        if (variant == "without")
          std::erase_if(tasks, [](const std::string& t) { return starts_with(t, "tsalign"); });
        sub.cfg_.set("corpus.tasks", join(tasks, ","));
        sub.cfg_.set("init.depth", std::to_string(depth));
        sub.dirs_.corpus = root / ("corpus_" + variant);
        sub.dirs_.init = root / ("init_" + init_name);
        sub.dirs_.train = root / run / "train";
        sub.dirs_.eval = root / run / "eval";
        if (!stage_current(sub, "corpus")) sub.run_corpus();
        if (!stage_current(sub, "init")) sub.run_init();
        sub.run_train();
        sub.run_eval();
        auto rep = nlohmann::json::parse(read_file(sub.dirs_.eval / "report.json"));
        auto tsum = nlohmann::json::parse(read_file(sub.dirs_.train / "summary.json"));
        auto num = [](const nlohmann::json& j) { return j.is_null() ? std::string() : fmt_double(j.get<double>()); };
        summary += run + "," + init_name + "," + variant;
        for (auto k : {"3", "5", "10"}) summary += "," + num(rep["hr"][k]);
        for (auto k : {"3", "5", "10"}) summary += "," + num(rep["ndcg"][k]);
        summary += "," + num(rep["acc1"]) + "," + num(rep["acc2"]) + "," + num(tsum["early_eval_loss"]) + "," +
                   num(tsum["best_eval_loss"]) + "," + std::to_string(tsum["steps_run"].get<std::size_t>()) + "\n";
        for (const auto& line : read_lines(sub.dirs_.train / "train_report.csv")) {
          auto f = split(line, ',');
          if (f.size() == 4 && f[0] != "step" && !f[2].empty()) curves += run + "," + f[0] + "," + f[2] + "," + f[3] + "\n";
        }
      }
    }
    write_file_atomic(root / "summary.csv", summary);
    write_file_atomic(root / "curves.csv", curves);
    log_info("ablation summary written to " + (root / "summary.csv").string());
  }

 private:
  static bool stage_current(const Pipeline& p, const std::string& stage) {
    try {
      p.require_stage(stage);
      return true;
    } catch (const PrerequisiteError&) {
      return false;
    }
  }

  Config cfg_;
  fs::path base_;
  StageDirs dirs_;
};

// Files written by `tsrec synth`: the four inputs plus a desk-scale config.
inline void write_synthetic(const SynthConfig& sc, const fs::path& out) {
  auto d = generate_synthetic(sc);
  fs::create_directories(out);
  write_file_atomic(out / "catalog.jsonl", format_catalog(d.catalog));
  write_file_atomic(out / "interactions.jsonl", format_interactions(d.log));
  write_file_atomic(out / "embeddings.txt", format_embeddings_text(d.embeddings));
  write_file_atomic(out / "word_vectors.txt", d.word_table);
  std::string conf =
      "# desk-scale pipeline over the synthetic data in this directory\n"
      "seed = " + std::to_string(sc.seed) + "\n\n"
      "[paths]\n"
      "catalog = catalog.jsonl\n"
      "interactions = interactions.jsonl\n"
      "embeddings = embeddings.txt\n"
      "word_table = word_vectors.txt\n"
      "workdir = work\n\n"
      "[quantizer]\n"
      "levels = 3\n"
      "codes = 16,16,16\n\n"
      "[extractor]\n"
      "backend = local\n\n"
      "[model]\n"
      "dim = " + std::to_string(sc.word_dim) + "\n"
      "layers = 2\n"
      "heads = 4\n"
      "ffn_mult = 2\n"
      "max_seq = 128\n"
      "pretrain_steps = 300\n\n"
      "[train]\n"
      "steps = 1500\n"
      "batch_size = 16\n"
      "lr = 3e-4\n"
      "warmup = 150\n"
      "eval_every = 15\n"
      "eval_examples = 64\n"
      "hr_users = 32\n"
      "hr_beam = 10\n"
      "patience = 5\n\n"
      "[eval]\n"
      "beam_width = 20\n";
  write_file_atomic(out / "pipeline.conf", conf);
}

}  // namespace tsrec

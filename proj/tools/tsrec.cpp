// tsrec: staged command-line driver.
//
//   tsrec synth --out DIR
//   tsrec <stage> --config FILE [--set key=value ...] [--json-log]
//
// Exit codes: 0 success, 2 configuration error, 3 missing or stale upstream
// artifacts, 4 runtime failure.

#include <iostream>

#include "CLI11.hpp"
#include "tsrec/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPrereq = 3;
constexpr int kExitRuntime = 4;

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  bool json_log = false;
  bool quiet = false;
};

tsrec::Pipeline make_pipeline(const Options& o) {
  namespace fs = std::filesystem;
  tsrec::Config cfg = tsrec::Config::defaults();
  fs::path base = fs::current_path();
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw tsrec::ConfigError("config file not found: " + o.config);
    cfg = tsrec::Config::load(o.config);
    base = fs::absolute(o.config).parent_path();
  }
  for (const auto& kv : o.overrides) cfg.apply_override(kv);
  if (cfg.flag("log.json")) tsrec::log_settings().json = true;
  return tsrec::Pipeline(std::move(cfg), base);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-ID generative recommendation pipeline"};
  app.require_subcommand(1);
  Options opt;
  app.add_flag("--json-log", opt.json_log, "Emit structured JSON log lines on stderr");
  app.add_flag("-q,--quiet", opt.quiet, "Suppress informational logs");

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"quantize", "Filter interactions and fit the residual quantizer"},
      {"mint", "Assign collision-free SIDs to items"},
      {"extract", "Describe each SID token from its item cluster"},
      {"init", "Build SID token embeddings (semantic or Gaussian)"},
      {"corpus", "Render the instruction-tuning corpus and vocabulary"},
      {"train", "Train the recommender on the corpus"},
      {"eval", "Full-ranking evaluation and comprehension probes"},
      {"probe", "Comprehension probes only (Title2SID, SID2Title)"},
      {"ablate", "Run the init-depth x TS-Align grid and merge results"},
      {"all", "Run quantize through eval in order"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : stages) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("-c,--config", opt.config, "Pipeline config file");
    s->add_option("--set", opt.overrides, "Override a config key (key=value), repeatable")->take_all();
    subs[name] = s;
  }

  tsrec::SynthConfig sc;
  std::string out_dir = "synthetic";
  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic dataset and a desk-scale config");
  synth->add_option("-o,--out", out_dir, "Output directory");
  synth->add_option("--seed", sc.seed, "Generator seed");
  synth->add_option("--items", sc.n_items, "Number of items");
  synth->add_option("--users", sc.n_users, "Number of users");
  synth->add_option("--word-dim", sc.word_dim, "Word-vector dimension (also model.dim)");
  synth->add_option("--item-dim", sc.item_dim, "Item embedding dimension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  tsrec::log_settings().json = opt.json_log;
  tsrec::log_settings().quiet = opt.quiet;

  try {
    if (synth->parsed()) {
      tsrec::write_synthetic(sc, out_dir);
      tsrec::log_info("synthetic dataset written to " + out_dir);
      return 0;
    }
    auto p = make_pipeline(opt);
    if (opt.json_log) tsrec::log_settings().json = true;
    const auto name = app.get_subcommands().front()->get_name();
    if (name == "quantize") p.run_quantize();
    else if (name == "mint") p.run_mint();
    else if (name == "extract") p.run_extract();
    else if (name == "init") p.run_init();
    else if (name == "corpus") p.run_corpus();
    else if (name == "train") p.run_train();
    else if (name == "eval") p.run_eval();
    else if (name == "probe") p.run_probe();
    else if (name == "ablate") p.run_ablate();
    else if (name == "all") p.run_all();
    return 0;
  } catch (const tsrec::ConfigError& e) {
    tsrec::log_event("error", std::string("config: ") + e.what());
    return kExitConfig;
  } catch (const tsrec::PrerequisiteError& e) {
    tsrec::log_event("error", std::string("prerequisite: ") + e.what());
    return kExitPrereq;
  } catch (const std::exception& e) {
    tsrec::log_event("error", e.what());
    return kExitRuntime;
  }
}

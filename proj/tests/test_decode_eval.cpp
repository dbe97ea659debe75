#include "test_util.hpp"
#include "tsrec/decode_eval.hpp"

using namespace tsrec;

namespace {

SidMap full_space(std::uint32_t k, std::size_t levels = 3) {
  SidMap m;
  std::vector<std::uint32_t> c(levels, 0);
  for (;;) {
    std::string id = "item";
    for (auto v : c) id += "_" + std::to_string(v);
    m[id] = SidTuple{c};
    std::size_t l = levels;
    while (l > 0 && ++c[l - 1] == k) c[--l] = 0;
    if (l == 0) break;
  }
  return m;
}

Model random_model(std::size_t vocab, std::uint64_t seed, double init_std = 0.5) {
  ModelConfig c;
  c.dim = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn_mult = 2;
  c.max_seq = 64;
  c.vocab_size = vocab;
  c.init_std = init_std;
  c.seed = seed;
  Model m(c);
  m.init_parameters();
  return m;
}

// Scores every tuple by chained next-token log-probs and sorts with the
// declared tie rule.
std::vector<std::pair<double, SidTuple>> exhaustive(const Model& m, const std::vector<std::uint32_t>& prompt,
                                                    const SidMap& sids, const Vocabulary& v) {
  std::vector<std::pair<double, SidTuple>> out;
  for (const auto& [id, t] : sids) {
    auto seq = prompt;
    double s = 0;
    for (std::size_t l = 0; l < t.depth(); ++l) {
      const auto tok = v.sid_id(l, t.codes[l]);
      s += m.forward_logits(seq)(tok);
      seq.push_back(tok);
    }
    out.emplace_back(s, t);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  return out;
}

void check_oracle(std::uint32_t k) {
  auto sids = full_space(k);
  auto trie = build_trie(sids);
  auto vocab = Vocabulary::build({"recommend", "next", "item"}, {k, k, k});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = random_model(vocab.size(), seed);
    std::vector<std::uint32_t> prompt{3, 4, 5, vocab.sep()};
    auto hits = beam_search_constrained(m, prompt, trie, vocab, sids.size());
    auto oracle = exhaustive(m, prompt, sids, vocab);
    ASSERT_EQ(hits.size(), oracle.size());
    for (std::size_t i = 0; i < hits.size(); ++i) {
      EXPECT_EQ(hits[i].sid, oracle[i].second) << "seed " << seed << " rank " << i;
      EXPECT_NEAR(hits[i].log_prob, oracle[i].first, 1e-9);
      EXPECT_EQ(hits[i].item_id, *trie.find(hits[i].sid));
    }
  }
}

}  // namespace

TEST(Beam, SingleItemForcedPath) {
  SidMap sids{{"only", SidTuple{{2, 1, 3}}}};
  auto trie = build_trie(sids);
  auto vocab = Vocabulary::build({"x"}, {4, 4, 4});
  auto m = random_model(vocab.size(), 1);
  for (std::size_t w : {1u, 5u}) {
    auto hits = beam_search_constrained(m, {3, vocab.sep()}, trie, vocab, w);
    ASSERT_EQ(hits.size(), 1u);
    EXPECT_EQ(hits[0].item_id, "only");
  }
}

TEST(Beam, ExhaustiveOracleTwoCubed) { check_oracle(2); }

TEST(Beam, ExhaustiveOracleFourCubed) { check_oracle(4); }

TEST(Beam, NarrowBeamReturnsOnlyLeavesInScoreOrder) {
  auto sids = full_space(4);
  sids.erase("item_0_0_0");
  sids.erase("item_3_1_2");
  auto trie = build_trie(sids);
  auto vocab = Vocabulary::build({"x"}, {4, 4, 4});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = random_model(vocab.size(), seed);
    auto hits = beam_search_constrained(m, {3, vocab.sep()}, trie, vocab, 5);
    EXPECT_EQ(hits.size(), 5u);
    for (std::size_t i = 0; i < hits.size(); ++i) {
      EXPECT_TRUE(trie.find(hits[i].sid).has_value());
      if (i) {
        EXPECT_GE(hits[i - 1].log_prob, hits[i].log_prob);
      }
    }
  }
}

TEST(Beam, EmptyTrieViolatesContract) {
  auto vocab = Vocabulary::build({"x"}, {2});
  SidTrie empty;
  EXPECT_THROW(beam_search_constrained(random_model(vocab.size(), 0), {3}, empty, vocab, 3), ContractViolation);
}

TEST(Metrics, ClosedForms) {
  std::vector<std::string> r{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"};
  EXPECT_EQ(hit_ratio_at_k(r, "a", 3), 1.0);
  EXPECT_EQ(hit_ratio_at_k(r, "d", 3), 0.0);
  EXPECT_EQ(ndcg_at_k(r, "a", 10), 1.0);
  EXPECT_EQ(ndcg_at_k(r, "c", 3), 0.5);
  EXPECT_EQ(ndcg_at_k(r, "c", 10), 0.5);
  EXPECT_EQ(ndcg_at_k(r, "k", 10), 0.0);
  EXPECT_EQ(ndcg_at_k(r, "zz", 10), 0.0);
}

TEST(Metrics, MatchBruteForceRecount) {
  Rng rng(5);
  std::vector<std::string> pool;
  for (int i = 0; i < 30; ++i) pool.push_back("i" + std::to_string(i));
  for (std::size_t k : {3u, 5u, 10u}) {
    double hr = 0, nd = 0, bh = 0, bn = 0;
    const int n = 1000;
    for (int u = 0; u < n; ++u) {
      auto ranked = pool;
      rng.shuffle(ranked);
      ranked.resize(1 + rng.below(20));
      const auto& target = pool[rng.below(pool.size())];
      hr += hit_ratio_at_k(ranked, target, k);
      nd += ndcg_at_k(ranked, target, k);
      auto it = std::find(ranked.begin(), ranked.end(), target);
      const auto pos = static_cast<std::size_t>(it - ranked.begin());
      if (it != ranked.end() && pos < k) {
        bh += 1;
        bn += std::log(2.0) / std::log(static_cast<double>(pos) + 2.0);
      }
    }
    EXPECT_NEAR(hr / n, bh / n, 1e-12);
    EXPECT_NEAR(nd / n, bn / n, 1e-12);
  }
}

TEST(FullRank, MonotoneAndChanceLevel) {
  auto sids = full_space(4);
  auto trie = build_trie(sids);
  std::vector<std::string> words{"the", "user", "has", "interacted", "with", "items", "in", "chronological", "order",
                                 ".", "can", "you", "predict", "next", "possible", "item", "that", "may", "expect",
                                 "?", ","};
  auto vocab = Vocabulary::build(words, {4, 4, 4});
  std::vector<std::string> ids;
  for (const auto& [id, _] : sids) ids.push_back(id);
  Rng rng(6);
  double hits = 0;
  std::size_t total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = random_model(vocab.size(), seed, 0.05);
    std::vector<RankQuery> q;
    for (int u = 0; u < 50; ++u) q.push_back({"u" + std::to_string(u), {ids[rng.below(64)], ids[rng.below(64)]}, ids[rng.below(64)]});
    auto rep = full_rank_eval(m, vocab, sids, trie, q, 20);
    EXPECT_LE(rep.hr[3], rep.hr[5]);
    EXPECT_LE(rep.hr[5], rep.hr[10]);
    for (const auto& u : rep.users) {
      for (std::size_t k : {3u, 5u, 10u}) EXPECT_LE(ndcg_at_k(u.ranked, u.target, k), hit_ratio_at_k(u.ranked, u.target, k));
      std::set<std::string> uniq(u.ranked.begin(), u.ranked.end());
      EXPECT_EQ(uniq.size(), u.ranked.size());
      EXPECT_EQ(u.ranked.size(), 20u);
    }
    hits += rep.hr[10] * static_cast<double>(q.size());
    total += q.size();
  }
  // Targets are drawn independently of the model, so E[HR@10] = 10 / 64.
  const double p = 10.0 / 64.0, sd = std::sqrt(p * (1 - p) / static_cast<double>(total));
  EXPECT_NEAR(hits / static_cast<double>(total), p, 5 * sd);
}

TEST(Comprehension, UntrainedModelNearChance) {
  auto sids = full_space(10, 2);  // 100 items
  auto trie = build_trie(sids);
  ItemCatalog cat;
  std::vector<std::string> words{"which", "item", "has", "the", "title", ":", "?", "what", "is", "of", "\""};
  for (const auto& [id, _] : sids) {
    cat.items[id] = {id, "gadget " + id.substr(5), "", "", {}};
    words.push_back("gadget");
  }
  auto vocab = Vocabulary::build(words, {10, 10});
  double acc = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto r = comprehension_eval(random_model(vocab.size(), seed, 0.05), vocab, cat, sids, trie, 5);
    EXPECT_GE(r.acc1, 0.0);
    EXPECT_LE(r.acc1, 1.0);
    EXPECT_EQ(r.acc2, 0.0);
    acc += r.acc1 / 10;
  }
  EXPECT_LT(acc, 0.05);
}

TEST(Comprehension, MemorizedCatalogScoresOne) {
  SidMap sids{{"p1", SidTuple{{0, 1}}}, {"p2", SidTuple{{0, 2}}}, {"p3", SidTuple{{1, 0}}},
              {"p4", SidTuple{{2, 2}}}, {"p5", SidTuple{{3, 1}}}};
  ItemCatalog cat;
  const std::vector<std::string> titles{"Red Oak Guitar", "Blue Steel Kettle", "Compact Camp Tent",
                                        "Wireless Drill Kit", "Vintage Piano Lamp"};
  std::size_t i = 0;
  for (const auto& [id, _] : sids) cat.items[id] = {id, titles[i++], "", "", {}};
  auto align = make_item_alignment_examples(cat, sids);
  auto vocab = Vocabulary::build(collect_pre_tokens({&align}, {}), {4, 4});
  std::vector<EncodedExample> enc;
  for (const auto& ex : align) enc.push_back(encode_example(ex, vocab, 64));

  ModelConfig c;
  c.dim = 32;
  c.layers = 2;
  c.heads = 4;
  c.ffn_mult = 2;
  c.max_seq = 64;
  c.vocab_size = vocab.size();
  c.seed = 3;
  Model m(c);
  m.init_parameters();
  TrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 10;
  tc.lr = 3e-3;
  tc.eval_every = 0;
  tc.restore_best = false;
  train(m, enc, std::vector<double>(enc.size(), 1.0), {}, tc);
  ASSERT_LT(sft_loss(m, enc), 0.05);
  auto r = comprehension_eval(m, vocab, cat, sids, build_trie(sids), 5);
  EXPECT_EQ(r.acc1, 1.0);
  EXPECT_EQ(r.acc2, 1.0);
  EXPECT_EQ(r.items, 5u);
}

TEST(Report, JsonShape) {
  RankReport rep;
  rep.hr = {{3, 0.1}, {5, 0.2}, {10, 0.3}};
  rep.ndcg = {{3, 0.05}, {5, 0.1}, {10, 0.15}};
  rep.beam_width = 20;
  auto j = nlohmann::json::parse(format_eval_report(rep, ComprehensionReport{0.5, 0.25, 4, 5}));
  EXPECT_EQ(j.at("hr").at("10"), 0.3);
  EXPECT_EQ(j.at("acc1"), 0.5);
  EXPECT_EQ(j.at("beam_width"), 20);
  EXPECT_TRUE(nlohmann::json::parse(format_eval_report(rep, std::nullopt)).at("acc1").is_null());
}

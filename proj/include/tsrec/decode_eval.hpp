#pragma once

#include <atomic>
#include <thread>

#include "json.hpp"
#include "tsrec/corpus.hpp"
#include "tsrec/model.hpp"
#include "tsrec/sidspace.hpp"

namespace tsrec {

struct BeamHit {
  SidTuple sid;
  std::string item_id;
  double log_prob = 0.0;
};

// Higher score first; equal scores fall back to ascending tuple order.
inline bool beam_before(double sa, const std::vector<std::uint32_t>& ca, double sb, const std::vector<std::uint32_t>& cb) {
  if (sa != sb) return sa > sb;
  return ca < cb;
}

// Trie-constrained beam search over the L SID positions following `prompt`.
inline std::vector<BeamHit> beam_search_constrained(const Model& model, const std::vector<std::uint32_t>& prompt,
                                                    const SidTrie& trie, const Vocabulary& vocab, std::size_t width) {
  if (trie.empty()) throw ContractViolation("beam_search_constrained: empty trie");
  require(width >= 1, "beam_search_constrained: width must be >= 1");
  require(!prompt.empty(), "beam_search_constrained: empty prompt");
  require(prompt.size() + trie.depth() - 1 <= model.config().max_seq, "beam_search_constrained: prompt too long");

  struct Hyp {
    std::uint32_t node;
    std::vector<std::uint32_t> codes;
    double score;
    Model::KVCache cache;
    Model::RowVec hidden;
  };
  std::vector<Hyp> beam(1);
  beam[0].node = SidTrie::root();
  beam[0].score = 0.0;
  beam[0].cache = model.empty_cache();
  for (auto t : prompt) beam[0].hidden = model.step(beam[0].cache, t);

  const std::size_t L = trie.depth();
  for (std::size_t level = 0; level < L; ++level) {
    struct Cand {
      std::size_t parent;
      std::uint32_t code, node;
      double score;
      std::vector<std::uint32_t> codes;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beam.size(); ++b) {
      const auto lp = model.log_probs(beam[b].hidden);
      for (const auto& [code, child] : trie.node(beam[b].node).children) {
        Cand c{b, code, child, beam[b].score + lp(vocab.sid_id(level, code)), beam[b].codes};
        c.codes.push_back(code);
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(),
              [](const Cand& a, const Cand& b) { return beam_before(a.score, a.codes, b.score, b.codes); });
    if (cands.size() > width) cands.resize(width);
    std::vector<Hyp> next;
    next.reserve(cands.size());
    for (auto& c : cands) {
      Hyp h;
      h.node = c.node;
      h.codes = std::move(c.codes);
      h.score = c.score;
      if (level + 1 < L) {
        h.cache = beam[c.parent].cache;
        h.hidden = model.step(h.cache, vocab.sid_id(level, c.code));
      }
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }

  std::vector<BeamHit> out;
  for (auto& h : beam) {
    const auto& item = trie.node(h.node).item_id;
    require(!item.empty(), "beam_search_constrained: beam ended off a leaf");
    out.push_back({SidTuple{h.codes}, item, h.score});
  }
  return out;
}

// Free-running beam search until <eos>. Returns the best finished sequence
// (without <eos>); falls back to the best live hypothesis at max_new tokens.
inline std::vector<std::uint32_t> beam_search_free(const Model& model, const std::vector<std::uint32_t>& prompt,
                                                   const Vocabulary& vocab, std::size_t width, std::size_t max_new) {
  require(width >= 1 && !prompt.empty(), "beam_search_free: bad arguments");
  struct Hyp {
    std::vector<std::uint32_t> toks;
    double score = 0.0;
    Model::KVCache cache;
    Model::RowVec hidden;
  };
  require(prompt.size() <= model.config().max_seq, "beam_search_free: prompt too long");
  max_new = std::min(max_new, model.config().max_seq - prompt.size() + 1);
  std::vector<Hyp> alive(1);
  alive[0].cache = model.empty_cache();
  for (auto t : prompt) alive[0].hidden = model.step(alive[0].cache, t);
  std::vector<std::pair<double, std::vector<std::uint32_t>>> finished;
  std::vector<std::size_t> pending;

  for (std::size_t len = 0; len < max_new && !alive.empty(); ++len) {
    struct Cand {
      std::size_t parent;
      std::uint32_t tok;
      double score;
      std::vector<std::uint32_t> toks;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      const auto lp = model.log_probs(alive[b].hidden);
      std::vector<std::uint32_t> idx(static_cast<std::size_t>(lp.size()));
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i);
      const std::size_t k = std::min(width, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                        [&](std::uint32_t a, std::uint32_t c) { return lp(a) != lp(c) ? lp(a) > lp(c) : a < c; });
      for (std::size_t j = 0; j < k; ++j) {
        Cand c{b, idx[j], alive[b].score + lp(idx[j]), alive[b].toks};
        c.toks.push_back(idx[j]);
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(),
              [](const Cand& a, const Cand& b) { return beam_before(a.score, a.toks, b.score, b.toks); });
    std::vector<Hyp> next;
    for (auto& c : cands) {
      if (c.tok == vocab.eos()) {
        c.toks.pop_back();
        finished.emplace_back(c.score, std::move(c.toks));
        continue;
      }
      if (next.size() >= width) continue;
      Hyp h;
      h.toks = std::move(c.toks);
      h.score = c.score;
      next.push_back(std::move(h));
      pending.push_back(c.parent);
    }
    double best_finished = -std::numeric_limits<double>::infinity();
    for (const auto& f : finished) best_finished = std::max(best_finished, f.first);
    // Live scores only decrease, so once a finished hypothesis leads it stays on top.
    const bool done = next.empty() || best_finished >= next.front().score || len + 1 >= max_new;
    if (!done)
      for (std::size_t j = 0; j < next.size(); ++j) {
        next[j].cache = alive[pending[j]].cache;
        next[j].hidden = model.step(next[j].cache, next[j].toks.back());
      }
    pending.clear();
    alive = std::move(next);
    if (done) break;
  }
  if (finished.empty()) return alive.empty() ? std::vector<std::uint32_t>{} : alive.front().toks;
  std::sort(finished.begin(), finished.end(),
            [](const auto& a, const auto& b) { return beam_before(a.first, a.second, b.first, b.second); });
  return finished.front().second;
}

// -----------------------------------------------------------------------------
// Ranking metrics (single relevant item)
// -----------------------------------------------------------------------------

// 1-based rank of target, or 0 when absent.
inline std::size_t rank_of(const std::vector<std::string>& ranked, const std::string& target) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i] == target) return i + 1;
  return 0;
}

inline double hit_ratio_at_k(const std::vector<std::string>& ranked, const std::string& target, std::size_t k) {
  const auto r = rank_of(ranked, target);
  return (r != 0 && r <= k) ? 1.0 : 0.0;
}

inline double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target, std::size_t k) {
  const auto r = rank_of(ranked, target);
  if (r == 0 || r > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(r) + 1.0);
}

struct RankQuery {
  std::string user_id;
  std::vector<std::string> history;
  std::string target;
};

inline std::vector<RankQuery> rank_queries(const SplitResult& split, bool test, std::size_t max_hist) {
  std::vector<RankQuery> q;
  for (const auto& u : split.users)
    q.push_back({u.user_id, last_n(test ? u.test_history() : u.valid_history(), max_hist),
                 test ? u.test_target : u.valid_target});
  return q;
}

struct UserRanking {
  std::string user_id, target;
  std::vector<std::string> ranked;
  std::size_t rank = 0;
};

struct RankReport {
  std::vector<UserRanking> users;
  std::map<std::size_t, double> hr, ndcg;
  std::size_t beam_width = 0;
  std::size_t empty_beams = 0;
};

inline std::vector<std::string> dedupe(const std::vector<BeamHit>& hits) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& h : hits)
    if (seen.insert(h.item_id).second) out.push_back(h.item_id);
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex mu;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

inline RankReport full_rank_eval(const Model& model, const Vocabulary& vocab, const SidMap& sids, const SidTrie& trie,
                                 const std::vector<RankQuery>& queries, std::size_t width = 20,
                                 const std::vector<std::size_t>& ks = {3, 5, 10}, std::size_t threads = 1) {
  RankReport rep;
  rep.beam_width = width;
  rep.users.resize(queries.size());
  const std::size_t max_prompt = model.config().max_seq + 1 - trie.depth();
  std::atomic<std::size_t> empty{0};
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto& q = queries[i];
    auto prompt = encode_prompt(seq_rec_prompt(q.history, sids), vocab, max_prompt);
    auto& u = rep.users[i];
    u.user_id = q.user_id;
    u.target = q.target;
    u.ranked = dedupe(beam_search_constrained(model, prompt, trie, vocab, width));
    if (u.ranked.empty()) ++empty;
    u.rank = rank_of(u.ranked, q.target);
  });
  rep.empty_beams = empty.load();
  if (rep.empty_beams) log_warn(std::to_string(rep.empty_beams) + " users had no valid beam output");
  for (auto k : ks) {
    CompensatedSum h, n;
    for (const auto& u : rep.users) {
      h.add(hit_ratio_at_k(u.ranked, u.target, k));
      n.add(ndcg_at_k(u.ranked, u.target, k));
    }
    const double denom = std::max<std::size_t>(rep.users.size(), 1);
    rep.hr[k] = h.value() / denom;
    rep.ndcg[k] = n.value() / denom;
  }
  return rep;
}

struct ComprehensionReport {
  double acc1 = 0.0, acc2 = 0.0;
  std::size_t items = 0;
  std::size_t beam_width = 0;
};

// SID2Title comparison form: the title as the word-level model can emit it.
inline std::string title_surface(const std::string& title, const Vocabulary& vocab) {
  return normalize_text(detokenize(word_tokenize(title, vocab), vocab));
}

inline ComprehensionReport comprehension_eval(const Model& model, const Vocabulary& vocab, const ItemCatalog& catalog,
                                              const SidMap& sids, const SidTrie& trie, std::size_t width = 5,
                                              std::size_t max_items = 0, std::size_t threads = 1) {
  std::vector<std::string> items;
  for (const auto& [id, _] : sids) items.push_back(id);
  if (max_items && items.size() > max_items) items.resize(max_items);
  std::vector<std::uint8_t> hit1(items.size(), 0), hit2(items.size(), 0);
  const std::size_t max_prompt = model.config().max_seq + 1 - trie.depth();
  parallel_for(items.size(), threads, [&](std::size_t i) {
    const auto& id = items[i];
    const auto& sid = sids.at(id);
    const auto& title = catalog.item(id).title;
    auto p1 = encode_prompt(title2sid_prompt(title), vocab, max_prompt);
    auto hits = beam_search_constrained(model, p1, trie, vocab, width);
    hit1[i] = !hits.empty() && hits.front().sid == sid;
    auto p2 = encode_prompt(sid2title_prompt(sid), vocab, model.config().max_seq);
    const auto want = title_surface(title, vocab);
    const std::size_t max_new = word_tokenize(title, vocab).size() + 8;
    auto gen = beam_search_free(model, p2, vocab, width, max_new);
    hit2[i] = normalize_text(detokenize(gen, vocab)) == want;
  });
  ComprehensionReport r;
  r.items = items.size();
  r.beam_width = width;
  if (!items.empty()) {
    r.acc1 = static_cast<double>(std::count(hit1.begin(), hit1.end(), 1)) / static_cast<double>(items.size());
    r.acc2 = static_cast<double>(std::count(hit2.begin(), hit2.end(), 1)) / static_cast<double>(items.size());
  }
  return r;
}

inline std::string format_eval_report(const RankReport& rank, const std::optional<ComprehensionReport>& comp) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : rank.hr) j["hr"][std::to_string(k)] = v;
  for (const auto& [k, v] : rank.ndcg) j["ndcg"][std::to_string(k)] = v;
  j["acc1"] = comp ? nlohmann::ordered_json(comp->acc1) : nlohmann::ordered_json(nullptr);
  j["acc2"] = comp ? nlohmann::ordered_json(comp->acc2) : nlohmann::ordered_json(nullptr);
  j["users_evaluated"] = rank.users.size();
  j["beam_width"] = rank.beam_width;
  if (comp) j["probe_beam_width"] = comp->beam_width;
  return j.dump(2) + "\n";
}

inline std::string format_per_user_csv(const RankReport& rank, std::size_t top = 10) {
  std::string out = "user_id,target,rank,top\n";
  for (const auto& u : rank.users) {
    std::vector<std::string> head(u.ranked.begin(), u.ranked.begin() + static_cast<std::ptrdiff_t>(std::min(top, u.ranked.size())));
    out += u.user_id + "," + u.target + "," + std::to_string(u.rank) + "," + join(head, " ") + "\n";
  }
  return out;
}

}  // namespace tsrec

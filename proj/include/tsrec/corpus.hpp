#pragma once

#include <unordered_map>

#include "json.hpp"
#include "tsrec/catalog.hpp"
#include "tsrec/extractor.hpp"
#include "tsrec/sidspace.hpp"

namespace tsrec {

namespace task {
inline constexpr std::string_view seq_rec = "seq_rec";
inline constexpr std::string_view title2sid = "title2sid";
inline constexpr std::string_view sid2title = "sid2title";
inline constexpr std::string_view asym1 = "asym1";
inline constexpr std::string_view asym2 = "asym2";
inline constexpr std::string_view tsalign_s2t = "tsalign_s2t";
inline constexpr std::string_view tsalign_t2s = "tsalign_t2s";
inline const std::vector<std::string> all = {"seq_rec", "title2sid", "sid2title", "asym1",
                                             "asym2",   "tsalign_s2t", "tsalign_t2s"};
}  // namespace task

struct InstructionExample {
  std::string instruction;
  std::string response;
  std::string task;

  bool operator==(const InstructionExample&) const = default;
};

// Instruction templates; {history} is a ", "-joined list of SID strings.
namespace tmpl {
inline constexpr std::string_view seq_rec =
    "The user has interacted with items {history} in chronological order. Can you predict the next possible item "
    "that the user may expect?";
inline constexpr std::string_view title2sid = "Which item has the title: {title}?";
inline constexpr std::string_view sid2title = "What is the title of item \"{sid}\"?";
inline constexpr std::string_view asym1 =
    "The user has sequentially interacted with items {history}. Can you recommend the next item for him? Tell me the "
    "title of the item.";
inline constexpr std::string_view asym2 =
    "Please review the user's historical interactions: {history}, and describe what kind of item he still needs.";
inline constexpr std::string_view tsalign_s2t =
    "Identify the specific SID token shared by items that exhibit the following scope and characteristics: "
    "\"{description}\"";
inline constexpr std::string_view tsalign_t2s =
    "Describe the typical scope and shared features of items associated with the token: \"{token}\"";
}  // namespace tmpl

inline std::string fill(std::string_view t, std::string_view slot, std::string_view value) {
  return replace_all(std::string(t), slot, value);
}

inline std::string render_history(const std::vector<std::string>& items, const SidMap& sids) {
  std::vector<std::string> parts;
  parts.reserve(items.size());
  for (const auto& i : items) parts.push_back(format_sid(sids.at(i)));
  return join(parts, ", ");
}

inline std::string seq_rec_prompt(const std::vector<std::string>& history, const SidMap& sids) {
  return fill(tmpl::seq_rec, "{history}", render_history(history, sids));
}
inline std::string title2sid_prompt(const std::string& title) { return fill(tmpl::title2sid, "{title}", title); }
inline std::string sid2title_prompt(const SidTuple& sid) { return fill(tmpl::sid2title, "{sid}", format_sid(sid)); }

// -----------------------------------------------------------------------------
// Leave-last-out split
// -----------------------------------------------------------------------------

struct UserSplit {
  std::string user_id;
  std::vector<std::string> train_prefix;
  std::string valid_target;
  std::string test_target;

  std::vector<std::string> valid_history() const { return train_prefix; }
  std::vector<std::string> test_history() const {
    auto h = train_prefix;
    h.push_back(valid_target);
    return h;
  }
};

struct SplitResult {
  std::vector<UserSplit> users;  // user-id order
  std::size_t excluded = 0;
};

inline SplitResult split_leave_last_out(const ItemCatalog& catalog) {
  SplitResult r;
  for (const auto& [user, seq] : catalog.sequences) {
    if (seq.size() < 3) {
      ++r.excluded;
      continue;
    }
    UserSplit s;
    s.user_id = user;
    s.train_prefix.assign(seq.begin(), seq.end() - 2);
    s.valid_target = seq[seq.size() - 2];
    s.test_target = seq.back();
    r.users.push_back(std::move(s));
  }
  if (r.excluded) log_warn("excluded " + std::to_string(r.excluded) + " users with fewer than 3 interactions");
  return r;
}

inline std::vector<std::string> last_n(const std::vector<std::string>& v, std::size_t n) {
  if (v.size() <= n) return v;
  return {v.end() - static_cast<std::ptrdiff_t>(n), v.end()};
}

struct Window {
  std::vector<std::string> history;
  std::string target;
};

// Training windows over each prefix: every position t >= 1 predicts prefix[t]
// from the (truncated) items before it. Targets equal to the user's test item
// are dropped. Without sliding, only the last position is used.
inline std::vector<Window> training_windows(const UserSplit& u, std::size_t max_hist, bool sliding) {
  std::vector<Window> out;
  const auto& p = u.train_prefix;
  const std::size_t first = sliding ? 1 : (p.size() >= 2 ? p.size() - 1 : p.size());
  for (std::size_t t = first; t < p.size(); ++t) {
    if (p[t] == u.test_target) continue;
    std::vector<std::string> h(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(t));
    out.push_back({last_n(h, max_hist), p[t]});
  }
  return out;
}

inline std::vector<InstructionExample> make_seq_rec_examples(const SplitResult& split, const SidMap& sids,
                                                             std::size_t max_hist = 20, bool sliding = true) {
  std::vector<InstructionExample> out;
  for (const auto& u : split.users)
    for (const auto& w : training_windows(u, max_hist, sliding))
      out.push_back({seq_rec_prompt(w.history, sids), format_sid(sids.at(w.target)), std::string(task::seq_rec)});
  return out;
}

inline std::vector<InstructionExample> make_item_alignment_examples(const ItemCatalog& catalog, const SidMap& sids) {
  std::vector<InstructionExample> out;
  for (const auto& [id, sid] : sids) {
    const auto& item = catalog.item(id);
    out.push_back({title2sid_prompt(item.title), format_sid(sid), std::string(task::title2sid)});
    out.push_back({sid2title_prompt(sid), item.title, std::string(task::sid2title)});
  }
  return out;
}

inline std::vector<InstructionExample> make_asymmetric_examples(const SplitResult& split, const ItemCatalog& catalog,
                                                                const SidMap& sids, std::size_t max_hist = 20,
                                                                bool sliding = true) {
  std::vector<InstructionExample> out;
  for (const auto& u : split.users) {
    for (const auto& w : training_windows(u, max_hist, sliding)) {
      const auto hist = render_history(w.history, sids);
      const auto& target = catalog.item(w.target);
      out.push_back({fill(tmpl::asym1, "{history}", hist), target.title, std::string(task::asym1)});
      if (!trim(target.description).empty())
        out.push_back({fill(tmpl::asym2, "{history}", hist), target.description, std::string(task::asym2)});
    }
  }
  return out;
}

inline std::vector<InstructionExample> make_tsalign_examples(const std::vector<TokenSemantics>& semantics) {
  std::vector<InstructionExample> out;
  for (const auto& s : semantics) {
    if (trim(s.description).empty()) continue;
    out.push_back({fill(tmpl::tsalign_s2t, "{description}", s.description), s.token, std::string(task::tsalign_s2t)});
    out.push_back({fill(tmpl::tsalign_t2s, "{token}", s.token), s.description, std::string(task::tsalign_t2s)});
  }
  return out;
}

// Held-out seq_rec prompts. Valid uses the training prefix, test appends the
// valid item.
inline std::vector<InstructionExample> make_eval_examples(const SplitResult& split, const SidMap& sids,
                                                          std::size_t max_hist, bool test) {
  std::vector<InstructionExample> out;
  for (const auto& u : split.users) {
    auto hist = last_n(test ? u.test_history() : u.valid_history(), max_hist);
    const auto& target = test ? u.test_target : u.valid_target;
    out.push_back({seq_rec_prompt(hist, sids), format_sid(sids.at(target)), std::string(task::seq_rec)});
  }
  return out;
}

// -----------------------------------------------------------------------------
// Corpus assembly
// -----------------------------------------------------------------------------

using TaskWeights = std::map<std::string, double>;

inline TaskWeights default_task_weights() {
  TaskWeights w;
  for (const auto& t : task::all) w[t] = (t == task::seq_rec) ? 1.0 : 0.25;
  return w;
}

struct Corpus {
  std::vector<InstructionExample> train, valid, test;
  TaskWeights mix_weights;
  std::map<std::string, std::size_t> counts;  // train examples per task
};

// Every SID-looking substring must be a well-formed, in-range token; SID
// responses must parse completely.
inline void validate_example_sids(const InstructionExample& ex, const std::vector<std::size_t>& codes_per_level) {
  auto fail = [&](const std::string& why) {
    throw DataError("corpus: task " + ex.task + ": " + why + " in example '" + ex.instruction.substr(0, 80) + "'");
  };
  for (const auto* text : {&ex.instruction, &ex.response}) {
    for (std::size_t pos = text->find("<"); pos != std::string::npos; pos = text->find("<", pos + 1)) {
      std::size_t p = pos;
      auto tok = scan_sid_token(*text, p);
      if (!tok) continue;
      if (tok->level >= codes_per_level.size() || tok->code >= codes_per_level[tok->level])
        fail("SID token out of range");
    }
  }
  try {
    if (ex.task == task::seq_rec || ex.task == task::title2sid) parse_sid(ex.response, codes_per_level);
    if (ex.task == task::sid2title) {
      auto open = ex.instruction.find('"');
      auto close = ex.instruction.rfind('"');
      if (open == std::string::npos || close <= open) fail("missing quoted SID");
      parse_sid(std::string_view(ex.instruction).substr(open + 1, close - open - 1), codes_per_level);
    }
    if (ex.task == task::tsalign_s2t) {
      auto tok = parse_sid_token(ex.response);
      if (!tok) fail("response is not a single SID token");
    }
  } catch (const ParseError& e) {
    fail(std::string("unparseable SID (") + e.what() + ")");
  }
  if (trim(ex.instruction).empty() || trim(ex.response).empty()) fail("empty text");
}

inline Corpus assemble_corpus(const std::vector<std::vector<InstructionExample>>& parts, const TaskWeights& weights,
                              std::uint64_t seed, const std::vector<std::size_t>& codes_per_level,
                              std::vector<InstructionExample> valid = {}, std::vector<InstructionExample> test = {}) {
  Corpus c;
  c.mix_weights = weights;
  for (const auto& part : parts)
    for (const auto& ex : part) {
      auto w = weights.find(ex.task);
      if (w == weights.end() || !(w->second > 0.0))
        throw ConfigError("corpus: task " + ex.task + " needs a positive mix weight");
      validate_example_sids(ex, codes_per_level);
      c.train.push_back(ex);
      ++c.counts[ex.task];
    }
  for (const auto* set : {&valid, &test})
    for (const auto& ex : *set) validate_example_sids(ex, codes_per_level);
  Rng rng(derive_seed(seed, "corpus-shuffle"));
  rng.shuffle(c.train);
  c.valid = std::move(valid);
  c.test = std::move(test);
  return c;
}

// Task-level mixture: a task is drawn with probability proportional to its
// weight among the tasks present, then one of its examples uniformly. Returns
// the equivalent per-example weights.
inline std::vector<double> example_weights(const std::vector<InstructionExample>& examples, const TaskWeights& weights) {
  std::map<std::string, std::size_t> per_task;
  for (const auto& ex : examples) ++per_task[ex.task];
  std::vector<double> w;
  w.reserve(examples.size());
  for (const auto& ex : examples) {
    auto it = weights.find(ex.task);
    if (it == weights.end()) throw ConfigError("no mix weight for task '" + ex.task + "'");
    w.push_back(it->second / static_cast<double>(per_task[ex.task]));
  }
  return w;
}

class WeightedSampler {
 public:
  WeightedSampler(const std::vector<InstructionExample>& examples, const TaskWeights& weights) {
    require(!examples.empty(), "WeightedSampler: empty example list");
    double acc = 0.0;
    cumulative_.reserve(examples.size());
    for (double w : example_weights(examples, weights)) {
      acc += w;
      cumulative_.push_back(acc);
    }
  }

  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
  }

 private:
  std::vector<double> cumulative_;
};

inline std::string example_to_json(const InstructionExample& ex) {
  nlohmann::ordered_json j;
  j["instruction"] = ex.instruction;
  j["response"] = ex.response;
  j["task"] = ex.task;
  return j.dump();
}

inline std::string format_examples(const std::vector<InstructionExample>& v) {
  std::string out;
  for (const auto& ex : v) out += example_to_json(ex) + "\n";
  return out;
}

inline std::vector<InstructionExample> parse_examples(std::string_view data) {
  std::vector<InstructionExample> out;
  std::size_t lineno = 0;
  for (const auto& line : split(data, '\n')) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("instruction").get<std::string>(), j.at("response").get<std::string>(),
                     j.at("task").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed corpus record: ") + e.what(), lineno);
    }
  }
  return out;
}

inline std::string format_weights(const TaskWeights& w, const std::map<std::string, std::size_t>& counts) {
  nlohmann::ordered_json j;
  for (const auto& [t, v] : w) j["weights"][t] = v;
  for (const auto& [t, n] : counts) j["counts"][t] = n;
  return j.dump(2) + "\n";
}

inline TaskWeights parse_weights(std::string_view data) {
  auto j = nlohmann::json::parse(data);
  TaskWeights w;
  for (const auto& [t, v] : j.at("weights").items()) w[t] = v.get<double>();
  return w;
}

}  // namespace tsrec

#pragma once

#include <compare>
#include <map>
#include <optional>
#include <set>
#include <unordered_map>

#include "tsrec/catalog.hpp"
#include "tsrec/common.hpp"
#include "tsrec/quantizer.hpp"

namespace tsrec {

// One code per level; position l is the level-(l+1) code.
struct SidTuple {
  std::vector<std::uint32_t> codes;

  std::size_t depth() const { return codes.size(); }
  auto operator<=>(const SidTuple&) const = default;
  bool operator==(const SidTuple&) const = default;
};

using SidMap = std::map<std::string, SidTuple>;

inline char level_letter(std::size_t level) { return static_cast<char>('a' + level); }

inline std::string sid_token(std::size_t level, std::uint32_t code) {
  return std::string("<") + level_letter(level) + "_" + std::to_string(code) + ">";
}

// Emits "<a_k>" for level 1, "<b_k>" for level 2, ..., k in [0, K_l).
inline std::vector<std::string> mint_tokens(const std::vector<std::size_t>& codes_per_level) {
  require(!codes_per_level.empty() && codes_per_level.size() <= 26, "mint_tokens: need 1..26 levels");
  std::vector<std::string> out;
  for (std::size_t l = 0; l < codes_per_level.size(); ++l)
    for (std::size_t k = 0; k < codes_per_level[l]; ++k) out.push_back(sid_token(l, static_cast<std::uint32_t>(k)));
  return out;
}

inline std::vector<std::string> mint_tokens(const QuantizerConfig& cfg) { return mint_tokens(cfg.codes_per_level); }

inline std::string format_sid(const SidTuple& t) {
  std::string out;
  for (std::size_t l = 0; l < t.codes.size(); ++l) out += sid_token(l, t.codes[l]);
  return out;
}

struct SidToken {
  std::size_t level;
  std::uint32_t code;
};

// Parses one "<x_k>" token starting at pos; advances pos past it.
inline std::optional<SidToken> scan_sid_token(std::string_view text, std::size_t& pos) {
  std::size_t p = pos;
  if (p + 4 > text.size() || text[p] != '<') return std::nullopt;
  const char letter = text[p + 1];
  if (letter < 'a' || letter > 'z' || text[p + 2] != '_') return std::nullopt;
  p += 3;
  const std::size_t digits_begin = p;
  while (p < text.size() && std::isdigit(static_cast<unsigned char>(text[p]))) ++p;
  const std::size_t n_digits = p - digits_begin;
  if (n_digits == 0 || n_digits > 9 || p >= text.size() || text[p] != '>') return std::nullopt;
  if (n_digits > 1 && text[digits_begin] == '0') return std::nullopt;
  const auto code = static_cast<std::uint32_t>(std::stoul(std::string(text.substr(digits_begin, n_digits))));
  pos = p + 1;
  return SidToken{static_cast<std::size_t>(letter - 'a'), code};
}

inline std::optional<SidToken> parse_sid_token(std::string_view text) {
  std::size_t pos = 0;
  auto tok = scan_sid_token(text, pos);
  if (!tok || pos != text.size()) return std::nullopt;
  return tok;
}

// Parses "<a_i><b_j><c_k>" (no separators) against the per-level code counts.
inline SidTuple parse_sid(std::string_view text, const std::vector<std::size_t>& codes_per_level) {
  SidTuple t;
  std::size_t pos = 0;
  for (std::size_t l = 0; l < codes_per_level.size(); ++l) {
    const std::size_t at = pos;
    auto tok = scan_sid_token(text, pos);
    if (!tok) throw ParseError("expected SID token at offset " + std::to_string(at) + " in '" + std::string(text) + "'");
    if (tok->level != l)
      throw ParseError("SID level out of order in '" + std::string(text) + "': expected '" +
                       std::string(1, level_letter(l)) + "'");
    if (tok->code >= codes_per_level[l])
      throw ParseError("SID code " + std::to_string(tok->code) + " out of range at level " + std::to_string(l + 1));
    t.codes.push_back(tok->code);
  }
  if (pos != text.size()) throw ParseError("trailing characters after SID in '" + std::string(text) + "'");
  return t;
}

// -----------------------------------------------------------------------------
// Collision resolution
// -----------------------------------------------------------------------------

struct SidAssignment {
  SidMap sids;
  std::size_t reassigned = 0;
};

// Items sharing a full code tuple keep levels 1..L-1; within each group the
// first item in catalog order keeps its last code and the rest draw a random
// last code not used by any other item under the same prefix.
inline SidAssignment assign_sids_detailed(const EncodeResult& encode, const std::vector<std::string>& item_order,
                                          const std::vector<std::size_t>& codes_per_level, std::uint64_t seed) {
  require(encode.codes.size() == item_order.size(), "assign_sids: codes must cover every item");
  require(!codes_per_level.empty(), "assign_sids: no levels");
  const std::size_t L = codes_per_level.size();
  const std::size_t K_last = codes_per_level.back();

  std::vector<std::size_t> order(item_order.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return item_order[a] < item_order[b]; });

  using Prefix = std::vector<std::uint32_t>;
  std::map<Prefix, std::set<std::uint32_t>> used;
  std::map<std::vector<std::uint32_t>, std::vector<std::size_t>> groups;
  for (auto i : order) {
    const auto& c = encode.codes[i];
    require(c.size() == L, "assign_sids: code depth differs from level count");
    used[Prefix(c.begin(), c.end() - 1)].insert(c.back());
    groups[c].push_back(i);
  }

  Rng rng(derive_seed(seed, "sid-collisions"));
  SidAssignment out;
  for (const auto& [codes, members] : groups) {
    out.sids[item_order[members[0]]] = SidTuple{codes};
    if (members.size() == 1) continue;
    Prefix prefix(codes.begin(), codes.end() - 1);
    auto& taken = used[prefix];
    for (std::size_t m = 1; m < members.size(); ++m) {
      std::vector<std::uint32_t> free;
      for (std::uint32_t k = 0; k < K_last; ++k)
        if (!taken.count(k)) free.push_back(k);
      if (free.empty())
        throw CapacityError("collision group of " + std::to_string(members.size()) + " items under prefix " +
                            format_sid(SidTuple{prefix}) + " exceeds the " + std::to_string(K_last) +
                            " last-level codes");
      const auto pick = free[rng.below(free.size())];
      taken.insert(pick);
      auto reassigned = codes;
      reassigned.back() = pick;
      out.sids[item_order[members[m]]] = SidTuple{std::move(reassigned)};
      ++out.reassigned;
    }
  }
  return out;
}

inline SidMap assign_sids(const EncodeResult& encode, const ItemCatalog& catalog,
                          const std::vector<std::size_t>& codes_per_level, std::uint64_t seed) {
  return assign_sids_detailed(encode, catalog.item_ids(), codes_per_level, seed).sids;
}

inline std::string format_sid_map(const SidMap& sids) {
  std::string out;
  for (const auto& [id, t] : sids) out += id + "\t" + format_sid(t) + "\n";
  return out;
}

inline SidMap parse_sid_map(std::string_view data, const std::vector<std::size_t>& codes_per_level) {
  SidMap out;
  std::size_t lineno = 0;
  for (const auto& line : split(data, '\n')) {
    ++lineno;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected 'item_id<TAB>sid'", lineno);
    auto id = line.substr(0, tab);
    if (!out.emplace(id, parse_sid(std::string_view(line).substr(tab + 1), codes_per_level)).second)
      throw ConflictError("duplicate item " + id + " in SID map");
  }
  return out;
}

// -----------------------------------------------------------------------------
// Vocabulary
// -----------------------------------------------------------------------------

inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kSep = "<sep>";

// Pretrained (word-level) tokens first, then the minted SID tokens level by
// level. Ids are contiguous.
class Vocabulary {
 public:
  Vocabulary() = default;

  // pre_tokens must not contain SID-shaped strings; specials are prepended
  // when absent.
  static Vocabulary build(const std::vector<std::string>& pre_tokens, const std::vector<std::size_t>& codes_per_level) {
    Vocabulary v;
    for (auto s : {kUnk, kEos, kSep}) v.add(std::string(s));
    for (const auto& t : pre_tokens) {
      if (parse_sid_token(t)) throw ConflictError("pretrained token '" + t + "' collides with the SID namespace");
      if (!v.id_of_.count(t)) v.add(t);
    }
    v.n_pre_ = v.tokens_.size();
    v.codes_per_level_ = codes_per_level;
    for (std::size_t l = 0; l < codes_per_level.size(); ++l) {
      v.level_offset_.push_back(static_cast<std::uint32_t>(v.tokens_.size()));
      for (std::size_t k = 0; k < codes_per_level[l]; ++k) v.add(sid_token(l, static_cast<std::uint32_t>(k)));
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t pre_size() const { return n_pre_; }
  std::size_t sid_size() const { return tokens_.size() - n_pre_; }
  std::size_t levels() const { return codes_per_level_.size(); }
  const std::vector<std::size_t>& codes_per_level() const { return codes_per_level_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }

  std::optional<std::uint32_t> find(std::string_view t) const {
    auto it = id_of_.find(std::string(t));
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
  }
  std::uint32_t id_or_unk(std::string_view t) const { return find(t).value_or(unk()); }

  std::uint32_t unk() const { return 0; }
  std::uint32_t eos() const { return 1; }
  std::uint32_t sep() const { return 2; }

  std::uint32_t sid_id(std::size_t level, std::uint32_t code) const {
    require(level < codes_per_level_.size() && code < codes_per_level_[level], "sid_id: out of range");
    return level_offset_[level] + code;
  }
  bool is_sid(std::uint32_t id) const { return id >= n_pre_ && id < tokens_.size(); }
  SidToken sid_of(std::uint32_t id) const {
    require(is_sid(id), "sid_of: not a SID token");
    std::size_t l = codes_per_level_.size() - 1;
    while (level_offset_[l] > id) --l;
    return {l, id - level_offset_[l]};
  }

  std::string format() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  static Vocabulary parse(std::string_view data) {
    std::vector<std::string> pre;
    std::vector<std::size_t> counts;
    std::size_t lineno = 0;
    bool in_sid = false;
    for (const auto& line : split(data, '\n')) {
      ++lineno;
      if (line.empty()) continue;
      if (auto tok = parse_sid_token(line)) {
        in_sid = true;
        if (tok->level == counts.size()) counts.push_back(0);
        if (tok->level + 1 != counts.size() || tok->code != counts.back())
          throw ParseError("SID tokens must be level-major and contiguous", lineno);
        ++counts.back();
      } else {
        if (in_sid) throw ParseError("pretrained token after SID tokens", lineno);
        pre.push_back(line);
      }
    }
    auto v = build(pre, counts);
    if (v.tokens_.size() != pre.size() + v.sid_size()) throw ParseError("vocabulary must start with <unk> <eos> <sep>");
    for (std::size_t i = 0; i < pre.size(); ++i)
      if (v.tokens_[i] != pre[i]) throw ParseError("vocabulary must start with <unk> <eos> <sep>");
    return v;
  }

 private:
  void add(std::string t) {
    id_of_.emplace(t, static_cast<std::uint32_t>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> id_of_;
  std::size_t n_pre_ = 0;
  std::vector<std::size_t> codes_per_level_;
  std::vector<std::uint32_t> level_offset_;
};

// Splits text into SID tokens (kept verbatim), lowercased alphanumeric runs,
// and single punctuation characters.
inline std::vector<std::string> text_pieces(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (c == '<') {
      std::size_t p = i;
      if (scan_sid_token(text, p)) {
        out.emplace_back(text.substr(i, p - i));
        i = p;
        continue;
      }
    }
    if (std::isalnum(c) || c >= 0x80) {
      std::size_t j = i;
      while (j < text.size()) {
        const auto cj = static_cast<unsigned char>(text[j]);
        if (!(std::isalnum(cj) || cj >= 0x80)) break;
        ++j;
      }
      out.push_back(to_lower(text.substr(i, j - i)));
      i = j;
      continue;
    }
    out.emplace_back(1, static_cast<char>(c));
    ++i;
  }
  return out;
}

// -----------------------------------------------------------------------------
// Prefix trie over assigned tuples
// -----------------------------------------------------------------------------

class SidTrie {
 public:
  struct Node {
    std::map<std::uint32_t, std::uint32_t> children;  // code -> node index
    std::string item_id;                              // set on leaves
  };

  static SidTrie build(const SidMap& sids) {
    SidTrie t;
    t.nodes_.emplace_back();
    for (const auto& [item, tuple] : sids) {
      if (t.depth_ == 0) t.depth_ = tuple.depth();
      require(tuple.depth() == t.depth_ && t.depth_ > 0, "build_trie: tuples must share one non-zero depth");
      std::uint32_t node = 0;
      for (auto code : tuple.codes) {
        auto it = t.nodes_[node].children.find(code);
        if (it == t.nodes_[node].children.end()) {
          const auto child = static_cast<std::uint32_t>(t.nodes_.size());
          t.nodes_[node].children.emplace(code, child);
          t.nodes_.emplace_back();
          node = child;
        } else {
          node = it->second;
        }
      }
      if (!t.nodes_[node].item_id.empty()) throw ContractViolation("build_trie: duplicate SID tuple " + format_sid(tuple));
      t.nodes_[node].item_id = item;
      ++t.leaves_;
    }
    return t;
  }

  std::size_t depth() const { return depth_; }
  std::size_t leaf_count() const { return leaves_; }
  bool empty() const { return leaves_ == 0; }
  const Node& node(std::uint32_t i) const { return nodes_.at(i); }
  static constexpr std::uint32_t root() { return 0; }

  std::optional<std::string> find(const SidTuple& t) const {
    if (t.depth() != depth_) return std::nullopt;
    std::uint32_t node = 0;
    for (auto code : t.codes) {
      auto it = nodes_[node].children.find(code);
      if (it == nodes_[node].children.end()) return std::nullopt;
      node = it->second;
    }
    return nodes_[node].item_id;
  }

  // All (tuple, item) pairs in lexicographic tuple order.
  std::vector<std::pair<SidTuple, std::string>> enumerate() const {
    std::vector<std::pair<SidTuple, std::string>> out;
    if (empty()) return out;
    SidTuple prefix;
    walk(0, prefix, out);
    return out;
  }

 private:
  void walk(std::uint32_t n, SidTuple& prefix, std::vector<std::pair<SidTuple, std::string>>& out) const {
    if (prefix.depth() == depth_) {
      out.emplace_back(prefix, nodes_[n].item_id);
      return;
    }
    for (const auto& [code, child] : nodes_[n].children) {
      prefix.codes.push_back(code);
      walk(child, prefix, out);
      prefix.codes.pop_back();
    }
  }

  std::vector<Node> nodes_;
  std::size_t depth_ = 0;
  std::size_t leaves_ = 0;
};

inline SidTrie build_trie(const SidMap& sids) { return SidTrie::build(sids); }

}  // namespace tsrec

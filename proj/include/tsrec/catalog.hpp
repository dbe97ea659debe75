#pragma once

#include <Eigen/Dense>
#include <map>
#include <set>
#include <unordered_map>

#include "json.hpp"
#include "tsrec/common.hpp"

namespace tsrec {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Item {
  std::string item_id;
  std::string title;
  std::string description;
  // Optional metadata; rendered into extraction prompts when present.
  std::string brand;
  std::vector<std::string> categories;
};

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> events;
};

// Items keyed by id (lexicographic order is the canonical catalog order) plus
// per-user chronological item sequences.
struct ItemCatalog {
  std::map<std::string, Item> items;
  std::map<std::string, std::vector<std::string>> sequences;

  const Item& item(const std::string& id) const {
    auto it = items.find(id);
    if (it == items.end()) throw CoverageError("unknown item " + id);
    return it->second;
  }

  bool contains(const std::string& id) const { return items.count(id) != 0; }

  std::vector<std::string> item_ids() const {
    std::vector<std::string> ids;
    ids.reserve(items.size());
    for (const auto& [id, _] : items) ids.push_back(id);
    return ids;
  }
};

// Dense item embeddings; row i belongs to item_order[i].
struct EmbeddingMatrix {
  std::vector<std::string> item_order;
  RowMatrix rows;

  std::size_t n_items() const { return item_order.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(rows.cols()); }
};

// -----------------------------------------------------------------------------
// Loading
// -----------------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_json_line(const std::string& line, std::size_t lineno) {
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw ParseError("expected a JSON object", lineno);
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
  }
}

inline std::string required_string(const nlohmann::json& j, const char* key, std::size_t lineno) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string())
    throw ParseError(std::string("missing string field '") + key + "'", lineno);
  return it->get<std::string>();
}

}  // namespace detail

inline ItemCatalog parse_catalog(std::istream& in) {
  ItemCatalog cat;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto j = detail::parse_json_line(line, lineno);
    Item item;
    item.item_id = detail::required_string(j, "item_id", lineno);
    item.title = detail::required_string(j, "title", lineno);
    if (auto it = j.find("description"); it != j.end() && !it->is_null()) {
      if (!it->is_string()) throw ParseError("field 'description' must be a string", lineno);
      item.description = it->get<std::string>();
    }
    if (auto it = j.find("brand"); it != j.end() && it->is_string()) item.brand = it->get<std::string>();
    if (auto it = j.find("categories"); it != j.end()) {
      if (it->is_string())
        item.categories.push_back(it->get<std::string>());
      else if (it->is_array())
        for (const auto& c : *it)
          if (c.is_string()) item.categories.push_back(c.get<std::string>());
    }
    if (trim(item.title).empty()) throw ParseError("empty title for item " + item.item_id, lineno);
    auto id = item.item_id;
    if (!cat.items.emplace(id, std::move(item)).second)
      throw ConflictError("duplicate item_id '" + id + "' at line " + std::to_string(lineno));
  }
  return cat;
}

inline ItemCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open catalog " + path.string());
  return parse_catalog(in);
}

inline InteractionLog parse_interactions(std::istream& in) {
  InteractionLog log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto j = detail::parse_json_line(line, lineno);
    Interaction ev;
    ev.user_id = detail::required_string(j, "user_id", lineno);
    ev.item_id = detail::required_string(j, "item_id", lineno);
    auto ts = j.find("timestamp");
    if (ts == j.end() || !ts->is_number_integer())
      throw ParseError("missing integer field 'timestamp'", lineno);
    ev.timestamp = ts->get<std::int64_t>();
    log.events.push_back(std::move(ev));
  }
  return log;
}

inline InteractionLog load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open interactions " + path.string());
  return parse_interactions(in);
}

// 16-byte header of the binary embedding variant: 8-byte magic, u32 n_items, u32 dim.
inline constexpr std::string_view kEmbeddingMagic = "TSRECEMB";

namespace detail {

inline EmbeddingMatrix align_embeddings(std::vector<std::string> ids, RowMatrix rows,
                                        const ItemCatalog& catalog) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!row_of.emplace(ids[i], i).second)
      throw ConflictError("duplicate embedding row for item " + ids[i]);
  }
  std::vector<std::string> missing;
  for (const auto& [id, _] : catalog.items)
    if (!row_of.count(id)) missing.push_back(id);
  if (!missing.empty()) throw CoverageError("embeddings missing for items: " + join(missing, ", "));

  EmbeddingMatrix m;
  m.rows.resize(static_cast<Eigen::Index>(catalog.items.size()), rows.cols());
  Eigen::Index r = 0;
  for (const auto& [id, _] : catalog.items) {
    m.rows.row(r++) = rows.row(static_cast<Eigen::Index>(row_of.at(id)));
    m.item_order.push_back(id);
  }
  return m;
}

}  // namespace detail

// Text format: "n_items dim" header, then "item_id v1 ... v_dim" per line.
inline EmbeddingMatrix parse_embeddings_text(std::istream& in, const ItemCatalog& catalog) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line) && trim(line).empty()) ++lineno;
  ++lineno;
  auto header = split_ws(line);
  if (header.size() != 2) throw ParseError("embedding header must be 'n_items dim'", lineno);
  std::size_t n = 0, dim = 0;
  try {
    n = std::stoul(header[0]);
    dim = std::stoul(header[1]);
  } catch (const std::exception&) {
    throw ParseError("embedding header must be 'n_items dim'", lineno);
  }
  if (dim == 0) throw ParseError("embedding dim must be positive", lineno);

  std::vector<std::string> ids;
  RowMatrix rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  std::size_t r = 0;
  while (r < n && std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_ws(line);
    if (fields.size() != dim + 1)
      throw ParseError("expected item_id and " + std::to_string(dim) + " values", lineno);
    ids.push_back(fields[0]);
    for (std::size_t c = 0; c < dim; ++c) {
      char* end = nullptr;
      const double v = std::strtod(fields[c + 1].c_str(), &end);
      if (end == fields[c + 1].c_str() || *end != '\0') throw ParseError("bad number '" + fields[c + 1] + "'", lineno);
      if (!std::isfinite(v)) throw DataError("non-finite value in embedding row " + std::to_string(r));
      rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
    }
    ++r;
  }
  if (r != n) throw ParseError("expected " + std::to_string(n) + " embedding rows, found " + std::to_string(r));
  return detail::align_embeddings(std::move(ids), std::move(rows), catalog);
}

// Binary rows follow the catalog's canonical (lexicographic item_id) order.
inline EmbeddingMatrix parse_embeddings_binary(std::string_view data, const ItemCatalog& catalog) {
  ByteReader rd(data);
  if (rd.bytes(8) != kEmbeddingMagic) throw ParseError("bad embedding magic");
  const std::size_t n = rd.u32();
  const std::size_t dim = rd.u32();
  if (dim == 0) throw ParseError("embedding dim must be positive");
  if (n != catalog.items.size())
    throw CoverageError("binary embeddings hold " + std::to_string(n) + " rows for a catalog of " +
                        std::to_string(catalog.items.size()) + " items");
  RowMatrix rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < dim; ++c) {
      const float v = rd.f32();
      if (!std::isfinite(v)) throw DataError("non-finite value in embedding row " + std::to_string(r));
      rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
    }
  if (rd.remaining() != 0) throw ParseError("trailing bytes after embedding payload");
  return detail::align_embeddings(catalog.item_ids(), std::move(rows), catalog);
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path, const ItemCatalog& catalog) {
  auto data = read_file(path);
  if (starts_with(data, kEmbeddingMagic)) return parse_embeddings_binary(data, catalog);
  std::istringstream in(data);
  return parse_embeddings_text(in, catalog);
}

inline std::string format_embeddings_text(const EmbeddingMatrix& m) {
  std::string out = std::to_string(m.n_items()) + " " + std::to_string(m.dim()) + "\n";
  for (std::size_t i = 0; i < m.n_items(); ++i) {
    out += m.item_order[i];
    for (std::size_t c = 0; c < m.dim(); ++c) {
      out += ' ';
      out += fmt_double(m.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
    }
    out += '\n';
  }
  return out;
}

inline std::string format_embeddings_binary(const EmbeddingMatrix& m) {
  std::string out(kEmbeddingMagic);
  put_u32(out, static_cast<std::uint32_t>(m.n_items()));
  put_u32(out, static_cast<std::uint32_t>(m.dim()));
  for (Eigen::Index r = 0; r < m.rows.rows(); ++r)
    for (Eigen::Index c = 0; c < m.rows.cols(); ++c) put_f32(out, static_cast<float>(m.rows(r, c)));
  return out;
}

// -----------------------------------------------------------------------------
// Filtering
// -----------------------------------------------------------------------------

// Iterated k-core: drop users and items with fewer than min_count interactions
// until nothing changes, then build per-user sequences ordered by timestamp
// (ties keep input order).
inline ItemCatalog filter_and_sequence(const InteractionLog& log, const ItemCatalog& catalog,
                                       std::size_t min_count = 5) {
  require(min_count >= 1, "filter_and_sequence: min_count must be >= 1");
  for (const auto& ev : log.events)
    if (!catalog.contains(ev.item_id))
      throw CoverageError("interaction references unknown item " + ev.item_id);

  std::vector<bool> alive(log.events.size(), true);
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, std::size_t> user_count, item_count;
    for (std::size_t e = 0; e < log.events.size(); ++e) {
      if (!alive[e]) continue;
      ++user_count[log.events[e].user_id];
      ++item_count[log.events[e].item_id];
    }
    for (std::size_t e = 0; e < log.events.size(); ++e) {
      if (!alive[e]) continue;
      if (user_count[log.events[e].user_id] < min_count || item_count[log.events[e].item_id] < min_count) {
        alive[e] = false;
        changed = true;
      }
    }
  }

  std::map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t e = 0; e < log.events.size(); ++e)
    if (alive[e]) by_user[log.events[e].user_id].push_back(e);

  ItemCatalog out;
  for (auto& [user, idx] : by_user) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return log.events[a].timestamp < log.events[b].timestamp;
    });
    auto& seq = out.sequences[user];
    for (auto e : idx) {
      seq.push_back(log.events[e].item_id);
      if (!out.items.count(log.events[e].item_id))
        out.items.emplace(log.events[e].item_id, catalog.item(log.events[e].item_id));
    }
  }
  return out;
}

}  // namespace tsrec

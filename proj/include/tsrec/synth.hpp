#pragma once

#include "json.hpp"
#include "tsrec/catalog.hpp"
#include "tsrec/corpus.hpp"

namespace tsrec {

// Seeded synthetic catalog with three nested item attributes: category (in
// sibling pairs sharing a group), style and material. Embedding offsets shrink
// from attribute to attribute so successive quantizer levels pick them up in
// turn. Users prefer one value of each attribute. In the word-vector table,
// each attribute value and its associated words sit near one concept vector,
// so keyword means for SID tokens carry signal.
struct SynthConfig {
  std::size_t n_items = 200;
  std::size_t n_users = 500;
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  std::size_t item_dim = 32;
  std::size_t word_dim = 64;
  double p_category = 0.6;
  double p_sibling = 0.25;
  double p_style = 0.6;
  double p_material = 0.6;
  double word_scale = 0.05;
  std::uint64_t seed = 7;
};

struct SynthData {
  ItemCatalog catalog;
  InteractionLog log;
  EmbeddingMatrix embeddings;
  std::string word_table;  // text format
  std::map<std::string, std::size_t> item_category;
};

namespace synth_detail {

struct AttributeDef {
  const char* name;
  const char* group;  // categories only
  const char* words[3];
};

inline const std::vector<AttributeDef>& categories() {
  static const std::vector<AttributeDef> c = {
      {"guitar", "music", {"strings", "fretboard", "chord"}},
      {"piano", "music", {"keys", "pedal", "sonata"}},
      {"tent", "outdoor", {"canopy", "stakes", "campsite"}},
      {"backpack", "outdoor", {"straps", "hiking", "daypack"}},
      {"kettle", "kitchen", {"boil", "spout", "teapot"}},
      {"skillet", "kitchen", {"sear", "nonstick", "frying"}},
      {"drill", "workshop", {"bits", "torque", "chuck"}},
      {"sander", "workshop", {"grit", "orbital", "sanding"}},
  };
  return c;
}

inline const std::vector<AttributeDef>& styles() {
  static const std::vector<AttributeDef> s = {
      {"vintage", "", {"retro", "heritage", "antique"}},  {"compact", "", {"portable", "small", "foldable"}},
      {"premium", "", {"luxury", "deluxe", "flagship"}},  {"rugged", "", {"tough", "heavy", "armored"}},
      {"wireless", "", {"cordless", "bluetooth", "battery"}}, {"classic", "", {"timeless", "traditional", "standard"}},
  };
  return s;
}

inline const std::vector<AttributeDef>& materials() {
  static const std::vector<AttributeDef> m = {
      {"steel", "", {"stainless", "metal", "brushed"}}, {"oak", "", {"wooden", "grain", "walnut"}},
      {"carbon", "", {"fiber", "lightweight", "composite"}}, {"leather", "", {"stitched", "suede", "hide"}},
      {"ceramic", "", {"glazed", "enamel", "porcelain"}}, {"aluminum", "", {"anodized", "alloy", "matte"}},
  };
  return m;
}

inline const std::vector<std::string>& brands() {
  static const std::vector<std::string> b = {"Acme", "Norvo", "Helix", "Quarry", "Lumen", "Vanta"};
  return b;
}

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

inline Eigen::VectorXd gaussian(Rng& rng, std::size_t d, double sd) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = sd * rng.normal();
  return v;
}

// Two distinct associated words of an attribute value.
inline std::pair<std::string, std::string> two_words(const AttributeDef& a, Rng& rng) {
  const std::size_t i = rng.below(3), j = (i + 1 + rng.below(2)) % 3;
  return {a.words[i], a.words[j]};
}

}  // namespace synth_detail

inline SynthData generate_synthetic(const SynthConfig& cfg) {
  using namespace synth_detail;
  require(cfg.n_items >= categories().size() && cfg.n_users >= 1, "synth: need at least one item per category");
  require(cfg.min_len >= 1 && cfg.max_len >= cfg.min_len, "synth: bad sequence length range");
  const auto& cats = categories();
  const auto& sty = styles();
  const auto& mat = materials();
  const std::size_t C = cats.size(), S = sty.size(), M = mat.size();
  SynthData out;

  // Item side: embeddings = group + category + style + material offsets + noise.
  Rng erng(derive_seed(cfg.seed, "synth-embeddings"));
  std::map<std::string, Eigen::VectorXd> group_c;
  std::vector<Eigen::VectorXd> cat_c, style_c, mat_c;
  for (const auto& c : cats)
    if (!group_c.count(c.group)) group_c[c.group] = gaussian(erng, cfg.item_dim, 2.0);
  for (std::size_t c = 0; c < C; ++c) cat_c.push_back(group_c[cats[c].group] + gaussian(erng, cfg.item_dim, 2.0));
  for (std::size_t s = 0; s < S; ++s) style_c.push_back(gaussian(erng, cfg.item_dim, 1.0));
  for (std::size_t m = 0; m < M; ++m) mat_c.push_back(gaussian(erng, cfg.item_dim, 0.5));

  Rng irng(derive_seed(cfg.seed, "synth-items"));
  std::vector<std::size_t> item_cat(cfg.n_items), item_style(cfg.n_items), item_mat(cfg.n_items);
  std::vector<std::string> ids(cfg.n_items);
  RowMatrix emb(static_cast<Eigen::Index>(cfg.n_items), static_cast<Eigen::Index>(cfg.item_dim));
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "I%04zu", i);
    ids[i] = buf;
    const std::size_t c = i % C, s = irng.below(S), m = irng.below(M);
    item_cat[i] = c;
    item_style[i] = s;
    item_mat[i] = m;
    const auto& cd = cats[c];
    const auto [cw1, cw2] = two_words(cd, irng);
    const auto [sw1, sw2] = two_words(sty[s], irng);
    const auto [mw1, mw2] = two_words(mat[m], irng);
    Item it;
    it.item_id = ids[i];
    it.title = capitalize(sty[s].name) + " " + mat[m].name + " " + cd.name + " with " + cw1 + ", model m" +
               std::to_string(100 + i);
    it.description = "A " + sw1 + " " + cd.name + " for " + cd.group + " use, made of " + mw1 + " " + mat[m].name +
                     ". Known for " + cw1 + " and " + cw2 + ", with a " + sw2 + " " + mw2 + " finish.";
    it.brand = brands()[irng.below(brands().size())];
    it.categories = {capitalize(cd.group), capitalize(cd.name)};
    out.catalog.items.emplace(it.item_id, it);
    out.item_category[it.item_id] = c;
    emb.row(static_cast<Eigen::Index>(i)) =
        (cat_c[c] + style_c[s] + mat_c[m] + gaussian(irng, cfg.item_dim, 0.1)).transpose();
  }
  std::vector<std::string> order;
  for (const auto& [id, _] : out.catalog.items) order.push_back(id);
  out.embeddings.item_order = order;
  out.embeddings.rows.resize(emb.rows(), emb.cols());
  for (std::size_t r = 0; r < order.size(); ++r)
    out.embeddings.rows.row(static_cast<Eigen::Index>(r)) =
        emb.row(static_cast<Eigen::Index>(std::stoul(order[r].substr(1))));

  // Users: each draw picks a category, then prefers the user's style and
  // material among that category's unused items.
  Rng urng(derive_seed(cfg.seed, "synth-users"));
  std::vector<std::vector<std::size_t>> by_c(C);
  for (std::size_t i = 0; i < cfg.n_items; ++i) by_c[item_cat[i]].push_back(i);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "U%04zu", u);
    const std::size_t pc = urng.below(C), ps = urng.below(S), pm = urng.below(M);
    const std::size_t sibling = pc ^ 1;  // categories are listed in sibling pairs
    const std::size_t len = cfg.min_len + urng.below(cfg.max_len - cfg.min_len + 1);
    std::set<std::size_t> used;
    std::int64_t ts = 1600000000 + static_cast<std::int64_t>(urng.below(1000000));
    for (std::size_t t = 0; t < len; ++t) {
      const double r = urng.uniform();
      const std::size_t c = r < cfg.p_category ? pc : (r < cfg.p_category + cfg.p_sibling ? sibling : urng.below(C));
      const bool want_s = urng.uniform() < cfg.p_style, want_m = urng.uniform() < cfg.p_material;
      std::vector<std::size_t> pool;
      for (int relax = 0; relax < 3 && pool.empty(); ++relax)
        for (auto i : by_c[c]) {
          if (used.count(i)) continue;
          if (relax < 2 && want_s && item_style[i] != ps) continue;
          if (relax < 1 && want_m && item_mat[i] != pm) continue;
          pool.push_back(i);
        }
      if (pool.empty()) continue;
      const auto item = pool[urng.below(pool.size())];
      used.insert(item);
      ts += 60 + static_cast<std::int64_t>(urng.below(86400));
      out.log.events.push_back({buf, ids[item], ts});
    }
  }

  // Word vectors.
  Rng wrng(derive_seed(cfg.seed, "synth-words"));
  const double sd = cfg.word_scale;
  std::map<std::string, Eigen::VectorXd> words;
  std::map<std::string, Eigen::VectorXd> group_w;
  for (const auto& c : cats)
    if (!group_w.count(c.group)) group_w[c.group] = gaussian(wrng, cfg.word_dim, sd * std::sqrt(0.5));
  auto place = [&](const AttributeDef& a, const Eigen::VectorXd& concept_vec) {
    words[a.name] = concept_vec + gaussian(wrng, cfg.word_dim, sd * 0.2);
    for (auto w : a.words) words[w] = concept_vec + gaussian(wrng, cfg.word_dim, sd * 0.3);
  };
  for (const auto& c : cats) place(c, group_w[c.group] + gaussian(wrng, cfg.word_dim, sd * std::sqrt(0.5)));
  for (const auto& [g, v] : group_w) words[g] = v + gaussian(wrng, cfg.word_dim, sd * 0.2);
  for (const auto& s : sty) place(s, gaussian(wrng, cfg.word_dim, sd));
  for (const auto& m : mat) place(m, gaussian(wrng, cfg.word_dim, sd));
  std::set<std::string> other;
  for (const auto& [id, it] : out.catalog.items)
    for (const auto& t : {it.title, it.description})
      for (auto& p : text_pieces(t)) other.insert(p);
  for (auto t : {tmpl::seq_rec, tmpl::title2sid, tmpl::sid2title, tmpl::asym1, tmpl::asym2, tmpl::tsalign_s2t,
                 tmpl::tsalign_t2s, std::string_view("Items in this group share: .")})
    for (auto& p : text_pieces(t)) other.insert(p);
  for (const auto& w : other)
    if (!words.count(w) && !parse_sid_token(w) && w.find('{') == std::string::npos && w.find('}') == std::string::npos)
      words[w] = gaussian(wrng, cfg.word_dim, sd);
  std::string table;
  for (const auto& [w, v] : words) {
    table += w;
    for (Eigen::Index j = 0; j < v.size(); ++j) table += " " + fmt_double(static_cast<float>(v(j)));
    table += "\n";
  }
  out.word_table = std::to_string(words.size()) + " " + std::to_string(cfg.word_dim) + "\n" + table;
  return out;
}

inline std::string format_catalog(const ItemCatalog& c) {
  std::string out;
  for (const auto& [id, it] : c.items) {
    nlohmann::ordered_json j;
    j["item_id"] = it.item_id;
    j["title"] = it.title;
    j["description"] = it.description;
    if (!it.brand.empty()) j["brand"] = it.brand;
    if (!it.categories.empty()) j["categories"] = it.categories;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string format_interactions(const InteractionLog& log) {
  std::string out;
  for (const auto& e : log.events) {
    nlohmann::ordered_json j;
    j["user_id"] = e.user_id;
    j["item_id"] = e.item_id;
    j["timestamp"] = e.timestamp;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace tsrec

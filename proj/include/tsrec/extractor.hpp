#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <memory>
#include <thread>

#include <Eigen/Dense>

#include "json.hpp"
#include "tsrec/catalog.hpp"
#include "tsrec/common.hpp"
#include "tsrec/sidspace.hpp"
// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include "httplib.h"

namespace tsrec {

struct TokenCluster {
  std::string token;
  std::vector<std::string> members;  // sorted item ids
  std::vector<std::string> sample;
};

struct TokenSemantics {
  std::string token;
  std::string description;
  std::vector<std::string> keywords;

  bool operator==(const TokenSemantics&) const = default;
};

enum class ExtractorBackend { local, remote };

struct ExtractorConfig {
  ExtractorBackend backend = ExtractorBackend::local;
  std::string endpoint;
  std::string model = "deepseek-chat";
  std::string api_key_env = "TSREC_API_KEY";
  bool chat_format = false;  // send {model, messages} instead of {model, prompt}
  std::size_t sample_cap = 32;
  std::uint64_t seed = 0;
  std::size_t max_retries = 3;
  std::size_t backoff_ms = 500;
  std::size_t timeout_s = 60;
  std::size_t max_in_flight = 4;
  std::size_t top_terms = 15;
  bool fallback_local = true;
  std::filesystem::path cache_dir;
};

// I_s = { i : s in e_i } for every SID token in the vocabulary, in vocabulary
// order. Unused tokens keep an empty member list.
inline std::vector<TokenCluster> build_token_clusters(const SidMap& sids, const Vocabulary& vocab) {
  std::vector<TokenCluster> clusters;
  std::vector<std::size_t> level_base;
  for (std::size_t l = 0; l < vocab.levels(); ++l) {
    level_base.push_back(clusters.size());
    for (std::size_t k = 0; k < vocab.codes_per_level()[l]; ++k)
      clusters.push_back(TokenCluster{sid_token(l, static_cast<std::uint32_t>(k)), {}, {}});
  }
  for (const auto& [item, tuple] : sids) {
    require(tuple.depth() == vocab.levels(), "build_token_clusters: SID depth differs from vocabulary");
    for (std::size_t l = 0; l < tuple.depth(); ++l) {
      require(tuple.codes[l] < vocab.codes_per_level()[l], "build_token_clusters: code out of range");
      clusters[level_base[l] + tuple.codes[l]].members.push_back(item);
    }
  }
  // SidMap iterates in key order, so member lists are already sorted.
  return clusters;
}

// Seeded uniform sample without replacement of min(cap, |I_s|) members.
inline std::vector<std::string> sample_cluster(const TokenCluster& cluster, std::size_t cap, std::uint64_t seed) {
  require(cap >= 1, "sample_cluster: cap must be >= 1");
  std::vector<std::string> pool = cluster.members;
  const std::size_t m = std::min(cap, pool.size());
  Rng rng(derive_seed(seed, "sample:" + cluster.token));
  for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(m);
  return pool;
}

// -----------------------------------------------------------------------------
// Prompt
// -----------------------------------------------------------------------------

inline constexpr std::string_view kExtractionPromptTemplate = R"(# Role:
You are a Senior Product Content Analyst and Catalog Specialist with expertise in {category} product classification and summarization.

# Task:
Analyze a provided list of diverse product items and synthesize their shared characteristics into a single, cohesive "Product Family Description," then produce a related keyword list.

##Input Format: Each item provides:
- Title: product name
- Description: detailed text about features, functions, and specifications
- Brand: brand name
- Categories: classification field(s)

## Core Objective:
- Identify Commonalities: Determine the underlying functional, design, usage, or performance traits that ALL listed items share.
- Filter Fluff: Exclude brand-specific marketing slogans, proprietary technology names, or promotional phrases (e.g., "award-winning," "exclusive edition").
- Abstract Specifications: Replace exact measurements, quantities, or configurations with generalized terms (e.g., "various sizes," "multiple capacity options," "bulk packaging").
- Synthesize: Produce a high-level overview that describes the product family as a category, rather than a list of individual items.
- Extract Keywords: Identify 10-20 domain-relevant, semantically meaningful keywords derived from the description.

## Style & Tone:
- Professional, neutral, and domain-agnostic.
- Objective third-person, suitable for product catalogs and technical documentation.
- One paragraph of 3–5 sentences that flows naturally.
- Clear, concise, and focused on function, durability, applicability, or end-user benefits.

## Constraints:
- No brand names in the output.
- No bullet points; provide a cohesive, continuous paragraph.
- Ensure the description is broad enough to encompass all items in the list but specific enough to convey meaningful shared traits.
- Avoid overly promotional adjectives; emphasize factual, verifiable characteristics.

# Input:

Items:

{items})";

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

// Brand and Categories lines appear only for items that carry them.
inline std::string render_items_block(const std::vector<std::string>& sample, const ItemCatalog& catalog) {
  std::string out;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto& item = catalog.item(sample[i]);
    if (i) out += "\n";
    out += "Item " + std::to_string(i + 1) + ":\n";
    out += "Title: " + item.title + "\n";
    out += "Description: " + item.description + "\n";
    if (!item.brand.empty()) out += "Brand: " + item.brand + "\n";
    if (!item.categories.empty()) out += "Categories: " + join(item.categories, ", ") + "\n";
  }
  return out;
}

// Most frequent top-level category among the sampled items.
inline std::string prompt_category(const std::vector<std::string>& sample, const ItemCatalog& catalog) {
  std::map<std::string, std::size_t> freq;
  for (const auto& id : sample) {
    const auto& item = catalog.item(id);
    if (!item.categories.empty()) ++freq[item.categories.front()];
  }
  std::string best = "general";
  std::size_t best_n = 0;
  for (const auto& [c, n] : freq)
    if (n > best_n) {
      best = c;
      best_n = n;
    }
  return best;
}

inline std::string render_extraction_prompt(const std::vector<std::string>& sample, const ItemCatalog& catalog) {
  auto s = replace_all(std::string(kExtractionPromptTemplate), "{category}", prompt_category(sample, catalog));
  return replace_all(std::move(s), "{items}", render_items_block(sample, catalog));
}

// Lowercase, trim, drop empties and duplicates (first occurrence wins).
inline std::vector<std::string> normalize_keywords(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& k : raw) {
    auto n = normalize_text(k);
    if (n.empty() || !seen.insert(n).second) continue;
    out.push_back(std::move(n));
  }
  return out;
}

// -----------------------------------------------------------------------------
// Local TF-IDF backend
// -----------------------------------------------------------------------------

inline std::vector<std::string> alnum_terms(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && !std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && std::isalnum(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(to_lower(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

inline bool is_stopword(const std::string& t) {
  static const std::set<std::string> kStop = {
      "a",    "an",   "and",  "are", "as",   "at",   "be",   "by",   "for",  "from", "has",  "in",
      "is",   "it",   "its",  "of",  "on",   "or",   "that", "the",  "this", "to",   "with", "was",
      "were", "will", "can",  "your", "you", "our",  "we",   "not",  "but",  "all",  "any",  "into"};
  return kStop.count(t) != 0;
}

// Document frequencies over the whole catalog; a document is title + description.
class TfIdfIndex {
 public:
  explicit TfIdfIndex(const ItemCatalog& catalog) : n_docs_(catalog.items.size()) {
    for (const auto& [id, item] : catalog.items) {
      auto terms = doc_terms(item);
      std::set<std::string> uniq(terms.begin(), terms.end());
      for (const auto& t : uniq) ++df_[t];
    }
  }

  static std::vector<std::string> doc_terms(const Item& item) {
    auto terms = alnum_terms(item.title + " " + item.description);
    std::erase_if(terms, [](const std::string& t) { return is_stopword(t); });
    return terms;
  }

  double idf(const std::string& term) const {
    auto it = df_.find(term);
    if (it == df_.end() || it->second == 0) return 0.0;
    return std::log(static_cast<double>(n_docs_) / static_cast<double>(it->second));
  }

  // Top-m terms by tf * idf over the member texts; ties break alphabetically.
  // Terms present in every document score zero and are used only when nothing
  // else remains.
  std::vector<std::string> top_terms(const std::vector<std::string>& members, const ItemCatalog& catalog,
                                     std::size_t m) const {
    std::map<std::string, std::size_t> tf;
    for (const auto& id : members)
      for (const auto& t : doc_terms(catalog.item(id))) ++tf[t];
    std::vector<std::pair<double, std::string>> scored;
    for (const auto& [t, count] : tf) scored.emplace_back(static_cast<double>(count) * idf(t), t);
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      if (tf.at(a.second) != tf.at(b.second)) return tf.at(a.second) > tf.at(b.second);
      return a.second < b.second;
    });
    std::vector<std::string> out;
    for (const auto& [score, t] : scored) {
      if (out.size() == m) break;
      if (score > 0.0 || out.empty() || scored.front().first <= 0.0) out.push_back(t);
    }
    return out;
  }

 private:
  std::size_t n_docs_;
  std::map<std::string, std::size_t> df_;
};

inline std::string local_description(const std::vector<std::string>& keywords) {
  return "Items in this group share: " + join(keywords, ", ") + ".";
}

// -----------------------------------------------------------------------------
// Pluggable extractors
// -----------------------------------------------------------------------------

class SemanticExtractor {
 public:
  virtual ~SemanticExtractor() = default;
  virtual std::string backend_name() const = 0;
  // Identifies every setting that changes the output; part of the cache key.
  virtual std::string cache_tag() const { return backend_name(); }
  virtual TokenSemantics extract(const TokenCluster& cluster, const ItemCatalog& catalog) = 0;
};

class LocalExtractor : public SemanticExtractor {
 public:
  LocalExtractor(const ItemCatalog& catalog, std::size_t top_terms) : index_(catalog), top_terms_(top_terms) {}

  std::string backend_name() const override { return "local"; }
  std::string cache_tag() const override { return "local:" + std::to_string(top_terms_); }

  TokenSemantics extract(const TokenCluster& cluster, const ItemCatalog& catalog) override {
    TokenSemantics s;
    s.token = cluster.token;
    s.keywords = normalize_keywords(index_.top_terms(cluster.members, catalog, top_terms_));
    s.description = local_description(s.keywords);
    return s;
  }

 private:
  TfIdfIndex index_;
  std::size_t top_terms_;
};

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("extractor.endpoint must be an http(s) URL: " + url);
  auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

// Accepts either {description, keywords} directly or a chat-completion
// envelope whose first message content holds that object (optionally fenced).
inline TokenSemantics parse_extraction_response(const std::string& body, const std::string& token) {
  auto j = nlohmann::json::parse(body);
  if (j.contains("choices")) {
    std::string content = j.at("choices").at(0).at("message").at("content").get<std::string>();
    auto open = content.find('{');
    auto close = content.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open)
      throw nlohmann::json::other_error::create(501, "no JSON object in message content", nullptr);
    j = nlohmann::json::parse(content.substr(open, close - open + 1));
  }
  TokenSemantics s;
  s.token = token;
  s.description = trim(j.at("description").get<std::string>());
  std::vector<std::string> kws;
  for (const auto& k : j.at("keywords")) kws.push_back(k.get<std::string>());
  s.keywords = normalize_keywords(kws);
  if (s.description.empty()) throw nlohmann::json::other_error::create(502, "empty description", nullptr);
  return s;
}

class RemoteExtractor : public SemanticExtractor {
 public:
  explicit RemoteExtractor(ExtractorConfig cfg) : cfg_(std::move(cfg)) {}

  std::string backend_name() const override { return "remote"; }
  std::string cache_tag() const override {
    return "remote:" + cfg_.endpoint + ":" + cfg_.model + ":" + std::to_string(cfg_.sample_cap) + ":" +
           std::to_string(cfg_.seed) + (cfg_.chat_format ? ":chat" : "");
  }

  TokenSemantics extract(const TokenCluster& cluster, const ItemCatalog& catalog) override {
    const auto prompt = render_extraction_prompt(cluster.sample.empty() ? cluster.members : cluster.sample, catalog);
    nlohmann::json req;
    req["model"] = cfg_.model;
    if (cfg_.chat_format)
      req["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
    else
      req["prompt"] = prompt;
    const auto ep = split_endpoint(cfg_.endpoint);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);

    std::string last_error;
    for (std::size_t attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0 && cfg_.backoff_ms > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.backoff_ms << std::min<std::size_t>(attempt - 1, 6)));
      ++calls_;
      httplib::Client cli(ep.scheme_host_port);
      cli.set_connection_timeout(static_cast<time_t>(cfg_.timeout_s));
      cli.set_read_timeout(static_cast<time_t>(cfg_.timeout_s));
      auto res = cli.Post(ep.path, headers, req.dump(), "application/json");
      if (!res) {
        last_error = "HTTP error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP status " + std::to_string(res->status);
        continue;
      }
      try {
        return parse_extraction_response(res->body, cluster.token);
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    }
    throw ExtractionError("extraction for " + cluster.token + " failed after " + std::to_string(cfg_.max_retries + 1) +
                          " attempts: " + last_error);
  }

  std::size_t calls() const { return calls_.load(); }

 private:
  ExtractorConfig cfg_;
  std::atomic<std::size_t> calls_{0};
};

// -----------------------------------------------------------------------------
// On-disk cache keyed by (token, member-set hash, backend)
// -----------------------------------------------------------------------------

inline std::string semantics_to_json(const TokenSemantics& s) {
  nlohmann::ordered_json j;
  j["token"] = s.token;
  j["description"] = s.description;
  j["keywords"] = s.keywords;
  return j.dump();
}

inline TokenSemantics semantics_from_json(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  TokenSemantics s;
  s.token = j.at("token").get<std::string>();
  s.description = j.at("description").get<std::string>();
  s.keywords = j.at("keywords").get<std::vector<std::string>>();
  return s;
}

inline std::string member_set_hash(const std::vector<std::string>& members) {
  std::uint64_t h = fnv1a("members");
  for (const auto& m : members) {
    h = fnv1a(m, h);
    h = fnv1a("\n", h);
  }
  return hex64(h);
}

inline std::filesystem::path cache_path(const std::filesystem::path& dir, const TokenCluster& cluster,
                                        const std::string& tag) {
  const auto key = fnv1a(cluster.token + "|" + member_set_hash(cluster.members) + "|" + tag);
  return dir / (hex64(key) + ".json");
}

// Returns the cached semantics when present; otherwise asks the extractor and
// stores the result.
inline TokenSemantics extract_semantics(const TokenCluster& cluster, const ItemCatalog& catalog,
                                        SemanticExtractor& extractor, const std::filesystem::path& cache_dir) {
  require(!cluster.members.empty(), "extract_semantics: empty cluster");
  std::filesystem::path path;
  if (!cache_dir.empty()) {
    path = cache_path(cache_dir, cluster, extractor.cache_tag());
    if (std::filesystem::exists(path)) return semantics_from_json(read_file(path));
  }
  auto s = extractor.extract(cluster, catalog);
  if (!path.empty()) write_file_atomic(path, semantics_to_json(s));
  return s;
}

// Extracts every non-empty cluster (empty ones are skipped with a warning).
// The remote backend runs up to max_in_flight requests concurrently and falls
// back to the local backend per cluster when configured to.
inline std::vector<TokenSemantics> extract_all(std::vector<TokenCluster> clusters, const ItemCatalog& catalog,
                                               const ExtractorConfig& cfg,
                                               SemanticExtractor* remote_override = nullptr) {
  require(cfg.sample_cap >= 1, "extractor: sample_cap must be >= 1");
  std::size_t empty = 0;
  std::vector<TokenCluster> work;
  for (auto& c : clusters) {
    if (c.members.empty()) {
      ++empty;
      continue;
    }
    c.sample = sample_cluster(c, cfg.sample_cap, cfg.seed);
    work.push_back(std::move(c));
  }
  if (empty) log_warn("skipping " + std::to_string(empty) + " SID tokens with empty clusters");

  LocalExtractor local(catalog, cfg.top_terms);
  std::unique_ptr<RemoteExtractor> owned_remote;
  SemanticExtractor* remote = remote_override;
  if (cfg.backend == ExtractorBackend::remote && !remote) {
    owned_remote = std::make_unique<RemoteExtractor>(cfg);
    remote = owned_remote.get();
  }

  std::vector<TokenSemantics> out(work.size());
  if (cfg.backend == ExtractorBackend::local) {
    for (std::size_t i = 0; i < work.size(); ++i) out[i] = extract_semantics(work[i], catalog, local, cfg.cache_dir);
    return out;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(work.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < work.size(); i = next++) {
      try {
        out[i] = extract_semantics(work[i], catalog, *remote, cfg.cache_dir);
      } catch (const ExtractionError& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n_threads = std::clamp<std::size_t>(cfg.max_in_flight, 1, std::max<std::size_t>(work.size(), 1));
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (std::size_t i = 0; i < work.size(); ++i) {
    if (errors[i].empty()) continue;
    if (!cfg.fallback_local) throw ExtractionError(errors[i]);
    log_warn(errors[i] + "; falling back to local backend");
    out[i] = extract_semantics(work[i], catalog, local, cfg.cache_dir);
  }
  return out;
}

inline std::string format_semantics_file(const std::vector<TokenSemantics>& sems) {
  std::string out;
  for (const auto& s : sems) out += semantics_to_json(s) + "\n";
  return out;
}

inline std::vector<TokenSemantics> parse_semantics_file(std::string_view data) {
  std::vector<TokenSemantics> out;
  std::size_t lineno = 0;
  for (const auto& line : split(data, '\n')) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(semantics_from_json(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed semantics record: ") + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace tsrec

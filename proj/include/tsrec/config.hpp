#pragma once

#include <map>

#include "tsrec/common.hpp"

namespace tsrec {

// Flat "section.key = value" configuration. Lines starting with '#' are
// comments; a "[section]" line prefixes the keys that follow it.
class Config {
 public:
  static Config defaults();

  static Config parse(std::string_view text) {
    Config c = defaults();
    std::string section;
    std::size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
      ++lineno;
      auto line = trim(raw);
      if (line.empty() || line[0] == '#') continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      auto key = trim(line.substr(0, eq));
      if (!section.empty()) key = section + "." + key;
      c.set(key, trim(line.substr(eq + 1)), lineno);
    }
    return c;
  }

  static Config load(const std::filesystem::path& p) {
    try {
      return parse(read_file(p));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }

  void set(const std::string& key, const std::string& value, std::size_t lineno = 0) {
    if (!values_.count(key) && !is_dynamic(key))
      throw ConfigError((lineno ? "line " + std::to_string(lineno) + ": " : std::string()) + "unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "key=value" from the command line.
  void apply_override(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' must look like key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      auto v = std::stoull(s, &used);
      if (used != s.size()) throw std::invalid_argument("junk");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' must be a non-negative integer, got '" + s + "'");
    }
  }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      auto v = std::stod(s, &used);
      if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument("junk");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' must be a number, got '" + s + "'");
    }
  }

  bool flag(const std::string& key) const {
    const auto s = to_lower(str(key));
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "' must be true or false, got '" + str(key) + "'");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    for (auto& p : split(str(key), ','))
      if (auto t = trim(p); !t.empty()) out.push_back(t);
    return out;
  }

  std::vector<std::size_t> size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& p : list(key)) {
      Config tmp;
      tmp.values_["v"] = p;
      try {
        out.push_back(tmp.size("v"));
      } catch (const ConfigError&) {
        throw ConfigError("config key '" + key + "' must be a comma-separated list of integers");
      }
    }
    return out;
  }

  // Canonical "key=value" lines for every key with one of the prefixes.
  std::string canonical(const std::vector<std::string>& prefixes) const {
    std::string out;
    for (const auto& [k, v] : values_)
      for (const auto& p : prefixes)
        if (k == p || starts_with(k, p + ".")) {
          out += k + "=" + v + "\n";
          break;
        }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static bool is_dynamic(const std::string& key) { return starts_with(key, "corpus.weight."); }
  std::map<std::string, std::string> values_;
};

inline Config Config::defaults() {
  Config c;
  auto& v = c.values_;
  v["seed"] = "0";
  v["paths.catalog"] = "catalog.jsonl";
  v["paths.interactions"] = "interactions.jsonl";
  v["paths.embeddings"] = "embeddings.txt";
  v["paths.word_table"] = "word_vectors.txt";
  v["paths.workdir"] = "work";
  v["catalog.min_count"] = "5";
  v["quantizer.levels"] = "3";
  v["quantizer.codes"] = "256,256,256";
  v["quantizer.max_iters"] = "100";
  v["quantizer.rel_tol"] = "1e-6";
  v["quantizer.normalize"] = "false";
  v["quantizer.pca_dim"] = "0";
  v["extractor.backend"] = "local";
  v["extractor.endpoint"] = "";
  v["extractor.model"] = "deepseek-chat";
  v["extractor.api_key_env"] = "TSREC_API_KEY";
  v["extractor.chat_format"] = "false";
  v["extractor.sample_cap"] = "32";
  v["extractor.max_retries"] = "3";
  v["extractor.backoff_ms"] = "500";
  v["extractor.timeout_s"] = "60";
  v["extractor.max_in_flight"] = "4";
  v["extractor.top_terms"] = "15";
  v["extractor.fallback_local"] = "true";
  v["extractor.cache_dir"] = "";
  v["init.depth"] = "3";
  v["init.full_covariance"] = "false";
  v["corpus.max_hist"] = "20";
  v["corpus.sliding"] = "true";
  v["corpus.tasks"] = "seq_rec,title2sid,sid2title,asym1,asym2,tsalign_s2t,tsalign_t2s";
  v["corpus.weight.seq_rec"] = "1.0";
  for (auto t : {"title2sid", "sid2title", "asym1", "asym2", "tsalign_s2t", "tsalign_t2s"})
    v[std::string("corpus.weight.") + t] = "0.25";
  v["model.dim"] = "128";
  v["model.layers"] = "4";
  v["model.heads"] = "4";
  v["model.ffn_mult"] = "4";
  v["model.max_seq"] = "256";
  v["model.tie_embeddings"] = "true";
  v["model.dropout"] = "0";
  v["model.init_std"] = "0.02";
  v["model.pretrained_words"] = "true";
  v["model.pretrain_steps"] = "0";
  v["model.pretrain_lr"] = "1e-3";
  v["train.steps"] = "1000";
  v["train.batch_size"] = "16";
  v["train.lr"] = "3e-4";
  v["train.weight_decay"] = "0";
  v["train.clip"] = "1.0";
  v["train.warmup"] = "0";
  v["train.eval_every"] = "50";
  v["train.patience"] = "3";
  v["train.eval_examples"] = "128";
  v["train.hr_users"] = "64";
  v["train.hr_beam"] = "20";
  v["train.restore_best"] = "true";
  v["train.threads"] = "1";
  v["eval.beam_width"] = "20";
  v["eval.probe_width"] = "5";
  v["eval.probes"] = "true";
  v["eval.probe_items"] = "0";
  v["eval.max_users"] = "0";
  v["eval.threads"] = "1";
  v["eval.per_user_csv"] = "true";
  v["ablate.depths"] = "0,1,2,3";
  v["ablate.tsalign"] = "with,without";
  v["log.json"] = "false";
  return c;
}

}  // namespace tsrec

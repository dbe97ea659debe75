#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <unordered_map>

#include "json.hpp"
#include "tsrec/catalog.hpp"
#include "tsrec/extractor.hpp"
#include "tsrec/quantizer.hpp"
#include "tsrec/sidspace.hpp"

namespace tsrec {

// Pretrained word vectors E.
struct EmbeddingTable {
  std::unordered_map<std::string, std::size_t> vocab_words;
  RowMatrix matrix;

  std::size_t rows() const { return static_cast<std::size_t>(matrix.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(matrix.cols()); }
  std::optional<std::size_t> find(const std::string& w) const {
    auto it = vocab_words.find(w);
    if (it == vocab_words.end()) return std::nullopt;
    return it->second;
  }
};

// "word v1 ... v_dim" per line. A leading "count dim" line (the common
// word2vec header) is recognized and skipped.
inline EmbeddingTable parse_embedding_table(std::istream& in) {
  std::vector<std::string> words;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto f = split_ws(line);
    if (f.empty()) continue;
    if (lineno == 1 && f.size() == 2 && std::all_of(f[0].begin(), f[0].end(), ::isdigit) &&
        std::all_of(f[1].begin(), f[1].end(), ::isdigit))
      continue;
    if (f.size() < 2) throw ParseError("word vector line needs a word and values", lineno);
    if (dim == 0) dim = f.size() - 1;
    if (f.size() - 1 != dim) throw ParseError("inconsistent vector dimension", lineno);
    std::vector<double> v(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      try {
        std::size_t used = 0;
        v[j] = std::stod(f[j + 1], &used);
        if (used != f[j + 1].size()) throw std::invalid_argument("junk");
      } catch (const std::exception&) {
        throw ParseError("bad number '" + f[j + 1] + "'", lineno);
      }
      if (!std::isfinite(v[j])) throw DataError("non-finite value in word vector at line " + std::to_string(lineno));
    }
    words.push_back(to_lower(f[0]));
    rows.push_back(std::move(v));
  }
  EmbeddingTable t;
  t.matrix.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!t.vocab_words.emplace(words[i], i).second) throw ConflictError("duplicate word '" + words[i] + "' in table");
    for (std::size_t j = 0; j < dim; ++j) t.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return t;
}

inline EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embedding table " + path.string());
  return parse_embedding_table(in);
}

inline std::string format_embedding_table(const EmbeddingTable& t) {
  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& [w, i] : t.vocab_words) order.emplace_back(i, w);
  std::sort(order.begin(), order.end());
  std::string out;
  for (const auto& [i, w] : order) {
    out += w;
    for (std::size_t j = 0; j < t.dim(); ++j)
      out += " " + fmt_double(t.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    out += "\n";
  }
  return out;
}

// T_s: concatenated keywords, lowercased, whitespace split, unknown words dropped.
inline std::vector<std::size_t> tokenize_keywords(const std::vector<std::string>& keywords, const EmbeddingTable& table) {
  std::vector<std::size_t> out;
  for (const auto& w : split_ws(to_lower(join(keywords, " "))))
    if (auto r = table.find(w)) out.push_back(*r);
  return out;
}

// Mean of the selected rows. Indices are visited in sorted order with
// compensated summation, so any permutation of the list gives the same bits.
inline Eigen::VectorXd sa_init_embedding(std::vector<std::size_t> subtokens, const EmbeddingTable& table) {
  if (subtokens.empty()) throw ContractViolation("sa_init_embedding: empty sub-token list");
  std::sort(subtokens.begin(), subtokens.end());
  const auto d = static_cast<Eigen::Index>(table.dim());
  Eigen::VectorXd e(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    CompensatedSum s;
    for (auto r : subtokens) {
      require(r < table.rows(), "sa_init_embedding: row index out of range");
      s.add(table.matrix(static_cast<Eigen::Index>(r), j));
    }
    e(j) = s.value() / static_cast<double>(subtokens.size());
  }
  return e;
}

struct GaussianInitParams {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  bool diagonal = true;
  Eigen::MatrixXd factor;  // A with A A^T = covariance (full mode only)

  Eigen::VectorXd sample(Rng& rng) const {
    const auto d = mean.size();
    Eigen::VectorXd z(d);
    for (Eigen::Index j = 0; j < d; ++j) z(j) = rng.normal();
    if (diagonal) return mean + covariance.diagonal().cwiseSqrt().cwiseProduct(z);
    return mean + factor * z;
  }
};

// Population moments of the table rows.
inline GaussianInitParams fit_gaussian(const EmbeddingTable& table, bool full_covariance = false) {
  if (table.rows() < 2) throw DegenerateInputError("fit_gaussian: need at least 2 table rows");
  const auto& E = table.matrix;
  GaussianInitParams g;
  g.diagonal = !full_covariance;
  g.mean = E.colwise().mean().transpose();
  const Eigen::MatrixXd centered = E.rowwise() - g.mean.transpose();
  const double n = static_cast<double>(E.rows());
  if (g.diagonal) {
    g.covariance = Eigen::MatrixXd::Zero(E.cols(), E.cols());
    g.covariance.diagonal() = centered.colwise().squaredNorm().transpose() / n;
    return g;
  }
  g.covariance = (centered.transpose() * centered) / n;
  Eigen::LLT<Eigen::MatrixXd> llt(g.covariance);
  if (llt.info() == Eigen::Success) {
    g.factor = llt.matrixL();
  } else {
    // Singular covariance: factor through the clipped eigendecomposition.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.covariance);
    g.factor = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  }
  return g;
}

enum class InitStrategy { semantic, gaussian };

struct InitPlan {
  std::vector<InitStrategy> levels;
  std::uint64_t seed = 0;

  // depth 0 is the random baseline; depth d applies SA-Init to the first d levels.
  static InitPlan sa_depth(std::size_t depth, std::size_t L, std::uint64_t seed) {
    require(depth <= L, "InitPlan: depth exceeds level count");
    InitPlan p;
    p.seed = seed;
    for (std::size_t l = 0; l < L; ++l) p.levels.push_back(l < depth ? InitStrategy::semantic : InitStrategy::gaussian);
    return p;
  }
};

struct InitReport {
  std::size_t semantic_count = 0;
  std::size_t gaussian_count = 0;
  std::size_t table_lookups = 0;
  std::vector<std::string> fallback_tokens;  // semantic level but no usable keywords
  double semantic_norm_min = 0.0, semantic_norm_mean = 0.0, semantic_norm_max = 0.0;
  double table_norm_mean = 0.0;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["semantic_count"] = semantic_count;
    j["gaussian_count"] = gaussian_count;
    j["fallback_tokens"] = fallback_tokens;
    j["semantic_norm"] = {{"min", semantic_norm_min}, {"mean", semantic_norm_mean}, {"max", semantic_norm_max}};
    j["table_norm_mean"] = table_norm_mean;
    return j.dump(2) + "\n";
  }
};

struct InitResult {
  RowMatrix matrix;  // |V_SID| x dim, vocabulary order
  InitReport report;
};

inline InitResult build_init_matrix(const std::vector<TokenSemantics>& semantics, const Vocabulary& vocab,
                                    const EmbeddingTable& table, const InitPlan& plan, bool full_covariance = false) {
  if (plan.levels.size() != vocab.levels())
    throw ContractViolation("build_init_matrix: plan has " + std::to_string(plan.levels.size()) +
                            " entries, vocabulary has " + std::to_string(vocab.levels()) + " levels");
  std::unordered_map<std::string, const TokenSemantics*> by_token;
  for (const auto& s : semantics) by_token[s.token] = &s;
  const auto gauss = fit_gaussian(table, full_covariance);

  InitResult res;
  res.matrix.resize(static_cast<Eigen::Index>(vocab.sid_size()), static_cast<Eigen::Index>(table.dim()));
  std::vector<double> norms;
  Eigen::Index row = 0;
  for (std::size_t l = 0; l < vocab.levels(); ++l) {
    for (std::size_t k = 0; k < vocab.codes_per_level()[l]; ++k, ++row) {
      const auto token = sid_token(l, static_cast<std::uint32_t>(k));
      if (plan.levels[l] == InitStrategy::semantic) {
        auto it = by_token.find(token);
        std::vector<std::size_t> sub;
        if (it != by_token.end()) {
          sub = tokenize_keywords(it->second->keywords, table);
          res.report.table_lookups += sub.size();
        }
        if (!sub.empty()) {
          res.matrix.row(row) = sa_init_embedding(std::move(sub), table).transpose();
          norms.push_back(res.matrix.row(row).norm());
          ++res.report.semantic_count;
          continue;
        }
        res.report.fallback_tokens.push_back(token);
      }
      Rng rng(derive_seed(plan.seed, "gaussian-init:" + token));
      res.matrix.row(row) = gauss.sample(rng).transpose();
      ++res.report.gaussian_count;
    }
  }
  if (!norms.empty()) {
    res.report.semantic_norm_min = *std::min_element(norms.begin(), norms.end());
    res.report.semantic_norm_max = *std::max_element(norms.begin(), norms.end());
    CompensatedSum s;
    for (double v : norms) s.add(v);
    res.report.semantic_norm_mean = s.value() / static_cast<double>(norms.size());
  }
  res.report.table_norm_mean = table.matrix.rowwise().norm().mean();
  return res;
}

// Init matrix file = codebook layout with level l holding the K_l token rows.
inline std::string format_init_matrix(const RowMatrix& m, const Vocabulary& vocab, std::uint64_t seed) {
  Codebook cb;
  cb.seed = seed;
  Eigen::Index row = 0;
  for (std::size_t l = 0; l < vocab.levels(); ++l) {
    const auto K = static_cast<Eigen::Index>(vocab.codes_per_level()[l]);
    cb.levels.push_back(m.middleRows(row, K));
    row += K;
  }
  return format_codebook(cb);
}

inline RowMatrix parse_init_matrix(std::string_view data) {
  auto cb = parse_codebook(data);
  Eigen::Index rows = 0;
  for (const auto& l : cb.levels) rows += l.rows();
  RowMatrix m(rows, static_cast<Eigen::Index>(cb.dim()));
  Eigen::Index r = 0;
  for (const auto& l : cb.levels) {
    m.middleRows(r, l.rows()) = l;
    r += l.rows();
  }
  return m;
}

}  // namespace tsrec

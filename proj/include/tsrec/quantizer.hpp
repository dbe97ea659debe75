#pragma once

#include <Eigen/Eigenvalues>
#include <numeric>

#include "tsrec/catalog.hpp"
#include "tsrec/common.hpp"

namespace tsrec {

struct QuantizerConfig {
  std::size_t levels = 3;
  std::vector<std::size_t> codes_per_level{256, 256, 256};
  std::size_t max_iters = 100;
  double rel_tol = 1e-6;
  std::uint64_t seed = 0;
  // Preprocessing, both off by default.
  bool normalize = false;
  std::size_t pca_dim = 0;

  void validate() const {
    if (levels < 1) throw ConfigError("quantizer.levels must be >= 1");
    if (codes_per_level.size() != levels)
      throw ConfigError("quantizer.codes_per_level must list one size per level");
    for (auto k : codes_per_level)
      if (k < 1) throw ConfigError("quantizer.codes_per_level entries must be >= 1");
    if (!(rel_tol >= 0.0)) throw ConfigError("quantizer.rel_tol must be >= 0");
  }
};

struct KMeansResult {
  RowMatrix centroids;
  std::vector<std::uint32_t> assignments;
  double wcss = 0.0;
  // WCSS after every assignment step, in iteration order.
  std::vector<double> wcss_history;
};

struct Codebook {
  std::vector<RowMatrix> levels;
  std::uint64_t seed = 0;

  std::size_t depth() const { return levels.size(); }
  std::size_t dim() const { return levels.empty() ? 0 : static_cast<std::size_t>(levels[0].cols()); }
  std::size_t codes(std::size_t level) const { return static_cast<std::size_t>(levels[level].rows()); }
};

struct EncodeResult {
  std::vector<std::vector<std::uint32_t>> codes;  // n_items x L
  RowMatrix final_residuals;                      // n_items x d
};

inline double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// argmin_k ||point - c_k||, lowest index on ties.
inline std::size_t assign_nearest(std::span<const double> point, const RowMatrix& centroids,
                                  double* best_d2 = nullptr) {
  require(centroids.rows() > 0, "assign_nearest: empty centroid set");
  require(static_cast<std::size_t>(centroids.cols()) == point.size(), "assign_nearest: dimension mismatch");
  const std::size_t d = point.size();
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double dist = squared_distance(point.data(), centroids.row(k).data(), d);
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<std::size_t>(k);
    }
  }
  if (best_d2) *best_d2 = best_dist;
  return best;
}

inline std::span<const double> row_span(const RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::size_t count_distinct_rows(const RowMatrix& points) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(points.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto d = points.cols();
  auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < d; ++c) {
      if (points(a, c) < points(b, c)) return true;
      if (points(a, c) > points(b, c)) return false;
    }
    return false;
  };
  std::sort(idx.begin(), idx.end(), less);
  std::size_t distinct = idx.empty() ? 0 : 1;
  for (std::size_t i = 1; i < idx.size(); ++i)
    if (less(idx[i - 1], idx[i])) ++distinct;
  return distinct;
}

namespace detail {

inline RowMatrix kmeanspp_init(const RowMatrix& points, std::size_t k, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  const auto d = static_cast<std::size_t>(points.cols());
  RowMatrix centers(static_cast<Eigen::Index>(k), points.cols());
  centers.row(0) = points.row(static_cast<Eigen::Index>(rng.below(n)));

  std::vector<double> best(n);
  for (std::size_t i = 0; i < n; ++i)
    best[i] = squared_distance(points.row(static_cast<Eigen::Index>(i)).data(), centers.row(0).data(), d);

  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double b : best) total += b;
    std::size_t pick = n - 1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (best[i] <= 0.0) continue;
        cum += best[i];
        if (r < cum) {
          pick = i;
          break;
        }
      }
      // Rounding can leave r beyond the last cumulative sum.
      while (best[pick] <= 0.0 && pick > 0) --pick;
    } else {
      pick = rng.below(n);
    }
    centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i)
      best[i] = std::min(best[i], squared_distance(points.row(static_cast<Eigen::Index>(i)).data(),
                                                   centers.row(static_cast<Eigen::Index>(c)).data(), d));
  }
  return centers;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Stops once the relative WCSS
// improvement drops to rel_tol or after max_iters assignment steps. Clusters
// that lose all points are re-seeded at the points farthest from their
// current centroid.
inline KMeansResult kmeans_fit(const RowMatrix& points, std::size_t k, const QuantizerConfig& cfg) {
  require(points.rows() > 0 && points.cols() > 0, "kmeans_fit: points must be non-empty");
  require(k >= 1, "kmeans_fit: k must be >= 1");
  require(points.allFinite(), "kmeans_fit: points must be finite");
  const std::size_t distinct = count_distinct_rows(points);
  if (k > distinct)
    throw DegenerateInputError("k-means with k=" + std::to_string(k) + " on only " + std::to_string(distinct) +
                               " distinct points");

  const auto n = static_cast<std::size_t>(points.rows());
  Rng rng(cfg.seed);

  KMeansResult res;
  res.centroids = detail::kmeanspp_init(points, k, rng);
  res.assignments.assign(n, 0);
  std::vector<double> dist2(n);
  const std::size_t max_iters = std::max<std::size_t>(cfg.max_iters, 1);

  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      res.assignments[i] =
          static_cast<std::uint32_t>(assign_nearest(row_span(points, static_cast<Eigen::Index>(i)), res.centroids, &dist2[i]));
      wcss += dist2[i];
    }
    res.wcss = wcss;
    res.wcss_history.push_back(wcss);
    if (wcss == 0.0) break;
    if (res.wcss_history.size() >= 2) {
      const double prev = res.wcss_history[res.wcss_history.size() - 2];
      if (prev - wcss <= cfg.rel_tol * prev) break;
    }
    if (iter + 1 == max_iters) break;

    // Update step.
    RowMatrix sums = RowMatrix::Zero(static_cast<Eigen::Index>(k), points.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(res.assignments[i]) += points.row(static_cast<Eigen::Index>(i));
      ++counts[res.assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i)
          if (dist2[i] > far_d) {
            far_d = dist2[i];
            far = i;
          }
        res.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(far));
        dist2[far] = 0.0;
      } else {
        res.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
      }
    }
  }
  return res;
}

inline RowMatrix round_to_f32(const RowMatrix& m) {
  RowMatrix out = m;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(out.data()[i]);
  return out;
}

inline double squared_norm_sum(const RowMatrix& m) { return m.squaredNorm(); }

struct RqFitResult {
  Codebook codebook;
  EncodeResult encoded;
  // residual_energy[l] = sum_i ||R_i^(l+1)||^2, with entry 0 the raw embeddings.
  std::vector<double> residual_energy;
  std::vector<std::vector<double>> wcss_history;
};

// Residual K-means: level 1 fits the raw embeddings, every later level fits
// what the previous level's nearest centroid left behind. Centroids are stored
// at f32 precision and codes are the nearest stored centroid, so encoding with
// a codebook read back from disk reproduces the fit-time codes.
inline RqFitResult rq_fit_detailed(const EmbeddingMatrix& embeddings, const QuantizerConfig& cfg) {
  cfg.validate();
  const std::size_t n = embeddings.n_items();
  const std::size_t max_k = *std::max_element(cfg.codes_per_level.begin(), cfg.codes_per_level.end());
  if (n < max_k)
    throw DegenerateInputError("rq_fit needs at least " + std::to_string(max_k) + " items, got " + std::to_string(n));

  RqFitResult out;
  out.codebook.seed = cfg.seed;
  out.encoded.codes.assign(n, std::vector<std::uint32_t>(cfg.levels, 0));
  RowMatrix residual = embeddings.rows;
  out.residual_energy.push_back(squared_norm_sum(residual));

  for (std::size_t l = 0; l < cfg.levels; ++l) {
    QuantizerConfig level_cfg = cfg;
    level_cfg.seed = derive_seed(cfg.seed, "rq-level-" + std::to_string(l));
    KMeansResult km;
    try {
      km = kmeans_fit(residual, cfg.codes_per_level[l], level_cfg);
    } catch (const DegenerateInputError& e) {
      throw DegenerateInputError("level " + std::to_string(l + 1) + ": " + e.what());
    }
    RowMatrix centroids = round_to_f32(km.centroids);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const auto code = assign_nearest(row_span(residual, r), centroids);
      out.encoded.codes[i][l] = static_cast<std::uint32_t>(code);
      residual.row(r) -= centroids.row(static_cast<Eigen::Index>(code));
    }
    out.residual_energy.push_back(squared_norm_sum(residual));
    out.wcss_history.push_back(std::move(km.wcss_history));
    out.codebook.levels.push_back(std::move(centroids));
  }
  out.encoded.final_residuals = std::move(residual);
  return out;
}

inline Codebook rq_fit(const EmbeddingMatrix& embeddings, const QuantizerConfig& cfg) {
  return rq_fit_detailed(embeddings, cfg).codebook;
}

// Greedy per-level nearest-centroid encoding with residual update.
inline EncodeResult rq_encode(const EmbeddingMatrix& embeddings, const Codebook& codebook) {
  require(codebook.depth() > 0, "rq_encode: empty codebook");
  require(embeddings.dim() == codebook.dim(), "rq_encode: embedding dim differs from codebook dim");
  EncodeResult out;
  const std::size_t n = embeddings.n_items();
  out.codes.assign(n, std::vector<std::uint32_t>(codebook.depth(), 0));
  out.final_residuals = embeddings.rows;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t l = 0; l < codebook.depth(); ++l) {
      const auto code = assign_nearest(row_span(out.final_residuals, r), codebook.levels[l]);
      out.codes[i][l] = static_cast<std::uint32_t>(code);
      out.final_residuals.row(r) -= codebook.levels[l].row(static_cast<Eigen::Index>(code));
    }
  }
  return out;
}

// -----------------------------------------------------------------------------
// Preprocessing
// -----------------------------------------------------------------------------

inline void normalize_rows(RowMatrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double norm = m.row(r).norm();
    if (norm > 0.0) m.row(r) /= norm;
  }
}

// Projects centred rows onto the top-k principal axes. Each axis is signed so
// its largest-magnitude component is positive.
inline RowMatrix pca_project(const RowMatrix& m, std::size_t k) {
  require(k >= 1 && k <= static_cast<std::size_t>(m.cols()), "pca_project: k out of range");
  require(m.rows() >= 2, "pca_project: need at least two rows");
  const Eigen::RowVectorXd mean = m.colwise().mean();
  const Eigen::MatrixXd centred = m.rowwise() - mean;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(m.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::MatrixXd axes(m.cols(), static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < k; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(m.cols() - 1 - static_cast<Eigen::Index>(j));
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(static_cast<Eigen::Index>(j)) = v;
  }
  return centred * axes;
}

inline EmbeddingMatrix preprocess(EmbeddingMatrix m, const QuantizerConfig& cfg) {
  if (cfg.normalize) normalize_rows(m.rows);
  if (cfg.pca_dim > 0 && cfg.pca_dim < m.dim()) m.rows = pca_project(m.rows, cfg.pca_dim);
  return m;
}

// -----------------------------------------------------------------------------
// Codebook file: "L d K_1 ... K_L seed\n" then f32 LE centroids, level-major.
// -----------------------------------------------------------------------------

inline std::string format_codebook(const Codebook& cb) {
  std::string out = std::to_string(cb.depth()) + " " + std::to_string(cb.dim());
  for (std::size_t l = 0; l < cb.depth(); ++l) out += " " + std::to_string(cb.codes(l));
  out += " " + std::to_string(cb.seed) + "\n";
  for (const auto& level : cb.levels)
    for (Eigen::Index i = 0; i < level.size(); ++i) put_f32(out, static_cast<float>(level.data()[i]));
  return out;
}

inline Codebook parse_codebook(std::string_view data) {
  ByteReader rd(data);
  auto header = split_ws(rd.line());
  if (header.size() < 3) throw ParseError("codebook header too short");
  std::vector<std::uint64_t> nums;
  try {
    for (const auto& h : header) nums.push_back(std::stoull(h));
  } catch (const std::exception&) {
    throw ParseError("codebook header must be integers");
  }
  const std::size_t L = nums[0];
  const std::size_t d = nums[1];
  if (L < 1 || d < 1 || header.size() != L + 3) throw ParseError("inconsistent codebook header");
  Codebook cb;
  cb.seed = nums[L + 2];
  for (std::size_t l = 0; l < L; ++l) {
    RowMatrix level(static_cast<Eigen::Index>(nums[2 + l]), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < level.size(); ++i) level.data()[i] = rd.f32();
    if (!level.allFinite()) throw DataError("non-finite centroid in level " + std::to_string(l + 1));
    cb.levels.push_back(std::move(level));
  }
  if (rd.remaining() != 0) throw ParseError("trailing bytes after codebook payload");
  return cb;
}

}  // namespace tsrec

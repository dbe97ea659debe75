#include "test_util.hpp"
#include "tsrec/init.hpp"

using namespace tsrec;

namespace {

EmbeddingTable table_of(const std::string& text) {
  std::istringstream in(text);
  return parse_embedding_table(in);
}

EmbeddingTable random_table(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable t;
  t.matrix.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < t.matrix.size(); ++i) t.matrix.data()[i] = rng.normal() * 3.0 + 1.0;
  for (std::size_t r = 0; r < rows; ++r) t.vocab_words["w" + std::to_string(r)] = r;
  return t;
}

// Independent reference: long double accumulation in list order.
Eigen::VectorXd reference_mean(const std::vector<std::size_t>& rows, const EmbeddingTable& t) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(t.dim()));
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    long double s = 0;
    for (auto r : rows) s += t.matrix(static_cast<Eigen::Index>(r), j);
    out(j) = static_cast<double>(s / static_cast<long double>(rows.size()));
  }
  return out;
}

}  // namespace

TEST(EmbeddingTable, ParsesHeaderAndRows) {
  auto t = table_of("3 2\nred 1 0\nblue 0 1\ngreen 1 1\n");
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t.dim(), 2u);
  EXPECT_EQ(*t.find("blue"), 1u);
  EXPECT_THROW(table_of("red 1 0\nblue 0\n"), ParseError);
}

TEST(TokenizeKeywords, LookupAndDropRule) {
  auto t = table_of("red 1 0\nblue 0 1\n");
  EXPECT_EQ(tokenize_keywords({"red", "blue"}, t).size(), 2u);
  EXPECT_EQ(tokenize_keywords({"red", "zzzunknown"}, t), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(tokenize_keywords({}, t).empty());
  // Keywords are joined, lowercased, then split on whitespace.
  EXPECT_EQ(tokenize_keywords({"Red Blue"}, t), (std::vector<std::size_t>{0, 1}));
}

TEST(SaInit, BasisMeanAndSingleton) {
  auto t = table_of("red 1 0\nblue 0 1\n");
  auto e = sa_init_embedding({0, 1}, t);
  EXPECT_EQ(e(0), 0.5);
  EXPECT_EQ(e(1), 0.5);
  auto one = sa_init_embedding({1}, t);
  EXPECT_EQ(one, t.matrix.row(1).transpose());
  EXPECT_THROW(sa_init_embedding({}, t), ContractViolation);
}

TEST(SaInit, MatchesCompensatedReference) {
  auto t = random_table(50, 16, 3);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> rows;
    for (int i = 0; i < 5; ++i) rows.push_back(rng.below(50));
    EXPECT_LE((sa_init_embedding(rows, t) - reference_mean(rows, t)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SaInit, ConvexCombinationBound) {
  auto t = random_table(30, 8, 5);
  std::vector<std::size_t> rows{3, 7, 7, 12};
  double bound = 0;
  for (auto r : rows) bound = std::max(bound, t.matrix.row(static_cast<Eigen::Index>(r)).cwiseAbs().maxCoeff());
  EXPECT_LE(sa_init_embedding(rows, t).cwiseAbs().maxCoeff(), bound);
}

TEST(Gaussian, TwoPointMomentsAndZeroTable) {
  auto t = table_of("a 0 0\nb 2 2\n");
  auto g = fit_gaussian(t);
  EXPECT_EQ(g.mean, Eigen::Vector2d(1, 1));
  EXPECT_EQ(g.covariance.diagonal(), Eigen::Vector2d(1, 1));
  auto z = fit_gaussian(table_of("a 0 0 0\nb 0 0 0\n"));
  Rng rng(1);
  EXPECT_EQ(z.sample(rng), Eigen::Vector3d::Zero());
  EXPECT_THROW(fit_gaussian(table_of("a 1 2\n")), DegenerateInputError);
}

TEST(Gaussian, MonteCarloMean) {
  for (bool full : {false, true}) {
    auto t = random_table(200, 6, 8);
    auto g = fit_gaussian(t, full);
    Rng rng(9);
    const int n = 1000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(6);
    for (int i = 0; i < n; ++i) sum += g.sample(rng);
    Eigen::VectorXd mean = sum / n;
    for (Eigen::Index j = 0; j < 6; ++j)
      EXPECT_LT(std::abs(mean(j) - g.mean(j)), 5 * std::sqrt(g.covariance(j, j)) / std::sqrt(n)) << "full=" << full;
  }
}

TEST(Gaussian, FullCovarianceFactorReproducesSigma) {
  auto g = fit_gaussian(random_table(100, 4, 10), true);
  EXPECT_LE((g.factor * g.factor.transpose() - g.covariance).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(InitPlan, DepthLevels) {
  auto p = InitPlan::sa_depth(1, 3, 0);
  EXPECT_EQ(p.levels, (std::vector<InitStrategy>{InitStrategy::semantic, InitStrategy::gaussian, InitStrategy::gaussian}));
  EXPECT_THROW(InitPlan::sa_depth(4, 3, 0), ContractViolation);
}

class InitMatrixTest : public ::testing::Test {
 protected:
  void SetUp() override {
    table = table_of("red 1 0\nblue 0 1\ngreen 2 2\nsteel -1 3\n");
    vocab = Vocabulary::build({"red"}, {3, 2, 2});
    for (std::size_t l = 0; l < 3; ++l)
      for (std::uint32_t k = 0; k < vocab.codes_per_level()[l]; ++k)
        sems.push_back({sid_token(l, k), "d", {"red", "blue", l == 0 && k == 2 ? "zzz" : "green"}});
    sems[2].keywords = {"zzz"};  // <a_2>: nothing usable
  }
  EmbeddingTable table;
  Vocabulary vocab;
  std::vector<TokenSemantics> sems;
};

TEST_F(InitMatrixTest, AllGaussianSkipsLookups) {
  auto r = build_init_matrix(sems, vocab, table, InitPlan::sa_depth(0, 3, 5));
  EXPECT_EQ(r.report.table_lookups, 0u);
  EXPECT_EQ(r.report.semantic_count, 0u);
  EXPECT_EQ(r.report.gaussian_count, vocab.sid_size());
  EXPECT_EQ(r.report.fallback_tokens.size(), 0u);
}

TEST_F(InitMatrixTest, DepthOneTouchesOnlyFirstLevel) {
  auto r0 = build_init_matrix(sems, vocab, table, InitPlan::sa_depth(0, 3, 5));
  auto r1 = build_init_matrix(sems, vocab, table, InitPlan::sa_depth(1, 3, 5));
  const Eigen::RowVector2d mean_rbg(1.0, 1.0);  // (red + blue + green) / 3
  EXPECT_LE((r1.matrix.row(0) - mean_rbg).norm(), 1e-15);
  EXPECT_LE((r1.matrix.row(1) - mean_rbg).norm(), 1e-15);
  // <a_2> falls back; later levels equal the random baseline row for row.
  EXPECT_EQ(r1.report.fallback_tokens, (std::vector<std::string>{"<a_2>"}));
  EXPECT_EQ(r1.report.semantic_count, 2u);
  for (Eigen::Index row = 2; row < r1.matrix.rows(); ++row) EXPECT_EQ(r1.matrix.row(row), r0.matrix.row(row));
}

TEST_F(InitMatrixTest, WrongPlanLength) {
  EXPECT_THROW(build_init_matrix(sems, vocab, table, InitPlan::sa_depth(1, 2, 5)), ContractViolation);
}

TEST_F(InitMatrixTest, BitwiseReproducibleAndFileRoundTrip) {
  auto a = build_init_matrix(sems, vocab, table, InitPlan::sa_depth(3, 3, 11));
  auto b = build_init_matrix(sems, vocab, table, InitPlan::sa_depth(3, 3, 11));
  EXPECT_EQ(a.matrix, b.matrix);
  auto back = parse_init_matrix(format_init_matrix(a.matrix, vocab, 11));
  EXPECT_EQ(back, round_to_f32(a.matrix));
  EXPECT_NE(a.report.to_json().find("\"fallback_tokens\""), std::string::npos);
}

TEST(SaInitAcceptance, HundredRandomTokensExactAndPermutationInvariant) {
  auto t = random_table(400, 32, 21);
  Rng rng(22);
  for (int tok = 0; tok < 100; ++tok) {
    std::vector<std::size_t> rows;
    const auto n = 1 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i) rows.push_back(rng.below(400));
    const auto e = sa_init_embedding(rows, t);
    EXPECT_LE((e - reference_mean(rows, t)).cwiseAbs().maxCoeff(), 1e-6);
    auto perm = rows;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const auto ep = sa_init_embedding(perm, t);
    EXPECT_EQ(std::memcmp(e.data(), ep.data(), sizeof(double) * static_cast<std::size_t>(e.size())), 0);
  }
}

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "v3fusion/cka.hpp"

using namespace v3fusion;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

oracle::Mat to_mat(const Eigen::MatrixXd& m) {
  oracle::Mat out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

Eigen::MatrixXd random_orthogonal(Eigen::Index d, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(d, d, rng));
  return qr.householderQ();
}

}  // namespace

TEST(Gram, Examples) {
  EXPECT_TRUE(gram(Eigen::MatrixXd::Identity(2, 2)).isApprox(Eigen::MatrixXd::Identity(2, 2)));
  Eigen::MatrixXd x(2, 2);
  x << 1, 0, 1, 0;
  EXPECT_TRUE(gram(x).isApprox(Eigen::MatrixXd::Ones(2, 2)));
}

TEST(Gram, MatchesDoubleLoop) {
  std::mt19937_64 rng(5);
  const auto x = random_matrix(5, 3, rng);
  const auto k = gram(x);
  const auto ref = oracle::gram(to_mat(x));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(k(i, j), ref[i][j], 1e-12);
}

TEST(Hsic, ConstantsAnnihilated) {
  EXPECT_NEAR(hsic(Eigen::MatrixXd::Ones(4, 4), Eigen::MatrixXd::Ones(4, 4)), 0.0, 1e-15);
}

TEST(Hsic, TwoByTwoMatchesExplicitCentering) {
  const Eigen::MatrixXd k = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::MatrixXd l = 2.0 * Eigen::MatrixXd::Identity(2, 2);
  const double ref = oracle::hsic(to_mat(k), to_mat(l));
  EXPECT_NEAR(hsic(k, l), ref, 1e-15);
  EXPECT_NEAR(ref, 2.0, 1e-15);  // HKH = [[.5,-.5],[-.5,.5]], HLH = 2x that; sum = 4 * .5, n - 1 = 1
}

TEST(Hsic, SymmetricAndSizeChecked) {
  std::mt19937_64 rng(9);
  const auto k = gram(random_matrix(7, 3, rng));
  const auto l = gram(random_matrix(7, 5, rng));
  EXPECT_NEAR(hsic(k, l), hsic(l, k), 1e-12);
  EXPECT_NEAR(hsic(k, l), oracle::hsic(to_mat(k), to_mat(l)), 1e-9);
  EXPECT_THROW(hsic(k, Eigen::MatrixXd::Identity(3, 3)), ValidationError);
}

TEST(Cka, SelfInvarianceAndOracle) {
  std::mt19937_64 rng(11);
  const auto x = random_matrix(6, 4, rng);
  const auto y = random_matrix(6, 7, rng);
  EXPECT_NEAR(cka(x, x), 1.0, 1e-9);
  EXPECT_NEAR(cka(x, x * random_orthogonal(4, rng)), 1.0, 1e-8);
  EXPECT_NEAR(cka(x, 1e3 * x), 1.0, 1e-8);
  EXPECT_NEAR(cka(x, y), oracle::cka(to_mat(x), to_mat(y)), 1e-10);
  EXPECT_NEAR(cka(x, y), cka(y, x), 1e-12);
  const double v = cka(x, y);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
}

TEST(Cka, DegenerateEmbeddingRejected) {
  std::mt19937_64 rng(1);
  Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(5, 3, 2.0);
  try {
    cka(constant, random_matrix(5, 3, rng));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_STREQ(e.what(), "degenerate embedding");
  }
}

TEST(CkaMatrix, IdenticalModelsAndPairwiseOracle) {
  std::mt19937_64 rng(21);
  EmbeddingSet set;
  const auto shared = random_matrix(20, 4, rng);
  set.per_model = {shared, shared, random_matrix(20, 6, rng)};
  const auto s = cka_matrix(set, {});
  EXPECT_NEAR(s.values(0, 1), 1.0, 1e-9);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(s.values(i, i), 1.0);
    for (int j = 0; j < 3; ++j) {
      if (i != j) {
        EXPECT_NEAR(s.values(i, j), cka(set.per_model[i], set.per_model[j]), 1e-10);
      }
      EXPECT_DOUBLE_EQ(s.values(i, j), s.values(j, i));
    }
  }
}

TEST(CkaMatrix, SubsetMatchesPairwiseAndMinimumEnforced) {
  std::mt19937_64 rng(22);
  EmbeddingSet set;
  for (int i = 0; i < 3; ++i) set.per_model.push_back(random_matrix(30, 5, rng));
  const std::vector<std::size_t> rows = {1, 4, 5, 8, 9, 11, 15, 20, 21, 29, 3};
  const auto s = cka_matrix(set, rows);
  const auto sub = set.subset(rows);
  EXPECT_NEAR(s.values(0, 2), cka(sub.per_model[0], sub.per_model[2]), 1e-10);
  const std::vector<std::size_t> tiny = {0, 1, 2, 3, 4};
  EXPECT_THROW(cka_matrix(set, tiny, 10), ValidationError);
}

namespace {

// Five models, independent random embeddings; failures hand-placed.
struct FocalFixture {
  EmbeddingSet set;
  FailureMatrix flags;

  explicit FocalFixture(std::size_t episodes = 200) {
    std::mt19937_64 rng(77);
    for (int i = 0; i < 4; ++i) set.per_model.push_back(random_matrix(static_cast<Eigen::Index>(episodes), 6, rng));
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < episodes; ++k) ids.push_back("e" + std::to_string(k));
    flags = FailureMatrix(ids, 4);
    std::bernoulli_distribution coin(0.4);
    for (std::size_t k = 0; k < episodes; ++k)
      for (std::size_t i = 0; i < 4; ++i)
        if (coin(rng)) flags.set_failed(k, i);
  }
};

}  // namespace

TEST(FocalCka, IndependentEmbeddingsMatchNegativeSubsetOracle) {
  FocalFixture fx;
  const TeamMask team = 0b1011;  // models 0, 1, 3
  const auto score = focal_cka(team, fx.set, fx.flags);
  double total = 0.0;
  const std::vector<std::size_t> members = {0, 1, 3};
  for (auto i : members) {
    const auto sub = fx.set.subset(fx.flags.failures_of(i));
    double kappa = 0.0;
    for (auto j : members)
      if (j != i) kappa += oracle::cka(to_mat(sub.per_model[i]), to_mat(sub.per_model[j]));
    total += kappa / 2.0;
  }
  EXPECT_NEAR(score.value, 1.0 - total / 3.0, 1e-9);
  EXPECT_GT(score.value, 0.7);
  EXPECT_TRUE(score.warnings.empty());
}

TEST(FocalCka, CopiesScoreZeroAndOrderDoesNotMatter) {
  FocalFixture fx;
  fx.set.per_model[1] = fx.set.per_model[0];
  EXPECT_NEAR(focal_cka(0b0011, fx.set, fx.flags).value, 0.0, 1e-9);
  // Bitmask teams have no order; check the same members scored via precomputed rows agree.
  const auto rows = focal_similarity(fx.set, fx.flags);
  EXPECT_NEAR(focal_cka(0b1101, rows).value, focal_cka(0b1101, fx.set, fx.flags).value, 1e-12);
}

TEST(FocalCka, FallbackAndStrictMode) {
  FocalFixture fx(60);
  // Model 2 fails only 3 times.
  std::vector<std::string> ids = fx.flags.episode_ids();
  FailureMatrix sparse(ids, 4);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    for (std::size_t i : {0, 1, 3})
      if (fx.flags.failed(k, i)) sparse.set_failed(k, i);
    if (k < 3) sparse.set_failed(k, 2);
  }
  const auto score = focal_cka(0b0111, fx.set, sparse);
  ASSERT_FALSE(score.warnings.empty());
  const auto global = cka_matrix(fx.set, {});
  const auto rows = focal_similarity(fx.set, sparse);
  EXPECT_TRUE(rows.fell_back[2]);
  EXPECT_NEAR(rows.rows(2, 0), global.values(2, 0), 1e-12);
  CkaOptions strict;
  strict.strict = true;
  EXPECT_THROW(focal_cka(0b0111, fx.set, sparse, strict), ValidationError);
}

TEST(FocalCka, GlobalScopeUsesAllEpisodes) {
  FocalFixture fx;
  CkaOptions global;
  global.scope = CkaScope::Global;
  const auto rows = focal_similarity(fx.set, fx.flags, global);
  EXPECT_NEAR(rows.rows(0, 3), cka(fx.set.per_model[0], fx.set.per_model[3]), 1e-10);
  EXPECT_EQ(parse_cka_scope("negative"), CkaScope::Negative);
  EXPECT_THROW(parse_cka_scope("local"), ValidationError);
}

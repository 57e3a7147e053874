#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <omnilite/lcmr.hpp>
#include <omnilite/testing/oracles.hpp>

using namespace omnilite;
using namespace omnilite::lcmr;

namespace {

Matrix gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix m(r, c);
  for (double& x : m.data()) x = n01(rng);
  return m;
}

Vector flatten(const Matrix& a, const Matrix& b) {
  Vector v = a.data();
  v.insert(v.end(), b.data().begin(), b.data().end());
  return v;
}

}  // namespace

TEST(Dist, SingleTranscriptTokenGivesZeroColumn) {
  std::mt19937_64 rng(1);
  const Matrix d = dist_matrix(gaussian(5, 3, rng), gaussian(1, 3, rng), 0.7);
  for (double x : d.data()) EXPECT_EQ(x, 0.0);
}

TEST(Dist, WorkedRow) {
  // speech row [2, 0] against unit transcript rows gives similarities [2, 0].
  const Matrix d = dist_matrix(Matrix{{2, 0}}, Matrix{{1, 0}, {0, 1}}, 1.0);
  EXPECT_NEAR(d(0, 0), 0.1269, 1e-4);
  EXPECT_NEAR(d(0, 1), 2.1269, 1e-4);
}

TEST(Dist, RowsAreNegLogProbabilities) {
  std::mt19937_64 rng(2);
  const Matrix d = dist_matrix(gaussian(6, 4, rng), gaussian(5, 4, rng), 0.5);
  for (std::size_t l = 0; l < d.rows(); ++l) {
    double s = 0.0;
    for (std::size_t j = 0; j < d.cols(); ++j) {
      EXPECT_GE(d(l, j), 0.0);
      s += std::exp(-d(l, j));
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Dist, DoublingTauHalvesLogits) {
  std::mt19937_64 rng(3);
  const Matrix xs = gaussian(4, 3, rng);
  const Matrix xt = gaussian(3, 3, rng);
  const Matrix a = dist_matrix(xs, xt, 2.0);
  const Matrix b = dist_matrix(scale(xs, 0.5), xt, 1.0);
  EXPECT_LE(max_rel_error(a.data(), b.data()), 1e-12);
}

TEST(Dist, Errors) {
  EXPECT_THROW(dist_matrix(Matrix{{1, 0}}, Matrix{{1, 0}}, 0.0), ParameterError);
  EXPECT_THROW(dist_matrix(Matrix{{1, 0}}, Matrix{{1, 0, 0}}, 1.0), ShapeError);
}

TEST(Dtw, SingleCell) {
  const auto ac = dtw_accumulate(Matrix{{2.5}});
  EXPECT_EQ(ac.D, (Matrix{{2.5}}));
  EXPECT_EQ(ac.path, (std::vector<Step>{{0, 0}}));
}

TEST(Dtw, TwoByTwo) {
  const Matrix dist{{1, 3}, {2, 1}};
  const auto ac = dtw_accumulate(dist);
  EXPECT_EQ(ac.total(), 2.0);
  EXPECT_EQ(ac.path, (std::vector<Step>{{0, 0}, {1, 1}}));
  EXPECT_EQ(oracle::all_path_costs(dist), (std::vector<double>{2, 4, 5}));
  EXPECT_DOUBLE_EQ(lcmr_loss_from_cost(ac), 0.5);
}

TEST(Dtw, EmptyIsInputError) { EXPECT_THROW(dtw_accumulate(Matrix(0, 3)), InputError); }

TEST(Dtw, TieOrderPrefersDiagonalThenUp) {
  // All predecessors of (1,1) cost the same; the diagonal wins.
  const auto flat = dtw_accumulate(Matrix{{0, 0}, {0, 0}});
  EXPECT_EQ(flat.path, (std::vector<Step>{{0, 0}, {1, 1}}));
  // At (2,1) the diagonal (1,0) costs 1 and up (1,1) costs 0; the up move is taken,
  // and at (1,1) diagonal and up tie at 0 so the diagonal wins.
  const auto ac = dtw_accumulate(Matrix{{0, 0}, {1, 0}, {1, 0}});
  EXPECT_EQ(ac.path, (std::vector<Step>{{0, 0}, {1, 1}, {2, 1}}));
}

TEST(Dtw, MatchesEnumerationOracle) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    Matrix dist(1 + rng() % 6, 1 + rng() % 6);
    for (double& x : dist.data()) x = u(rng);
    const auto ac = dtw_accumulate(dist);
    EXPECT_LE(std::abs(ac.total() - oracle::min_path_cost(dist)), 1e-12 * ac.total());
    // Path is monotone with unit steps and its cost equals the accumulated total.
    ASSERT_EQ(ac.path.front(), (Step{0, 0}));
    ASSERT_EQ(ac.path.back(), (Step{dist.rows() - 1, dist.cols() - 1}));
    double along = dist(0, 0);
    for (std::size_t k = 1; k < ac.path.size(); ++k) {
      const auto [l0, s0] = ac.path[k - 1];
      const auto [l1, s1] = ac.path[k];
      EXPECT_TRUE(l1 - l0 <= 1 && s1 - s0 <= 1 && (l1 + s1) > (l0 + s0));
      along += dist(l1, s1);
      // D grows along the path.
      EXPECT_GE(ac.D(l1, s1), ac.D(l0, s0));
    }
    EXPECT_NEAR(along, ac.total(), 1e-12);
  }
}

TEST(Dtw, RandomFourByThreeIsExact) {
  std::mt19937_64 rng(5);
  const Matrix dist = dist_matrix(gaussian(4, 5, rng), gaussian(3, 5, rng), 1.0);
  EXPECT_EQ(oracle::all_path_costs(dist).size(), 25u);
  EXPECT_EQ(dtw_accumulate(dist).total(), oracle::min_path_cost(dist));
}

TEST(Loss, SingleTokensGiveZero) {
  std::mt19937_64 rng(6);
  EXPECT_EQ(lcmr_loss(gaussian(1, 4, rng), gaussian(1, 4, rng), {}), 0.0);
}

TEST(Loss, NonNegativeAndZeroForSingleTranscript) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    const std::size_t d = 1 + rng() % 6;
    EXPECT_GE(lcmr_loss(gaussian(1 + rng() % 6, d, rng), gaussian(1 + rng() % 6, d, rng), {}), 0.0);
    EXPECT_EQ(lcmr_loss(gaussian(1 + rng() % 6, d, rng), gaussian(1, d, rng), {}), 0.0);
  }
}

TEST(Loss, TemperatureAbsorbsIntoSpeech) {
  std::mt19937_64 rng(8);
  for (double tau : {0.3, 1.7, 4.0}) {
    const Matrix xs = gaussian(5, 4, rng);
    const Matrix xt = gaussian(3, 4, rng);
    EXPECT_NEAR(lcmr_loss(xs, xt, {tau, 0.1}), lcmr_loss(scale(xs, 1.0 / tau), xt, {1.0, 0.1}), 1e-12);
  }
  EXPECT_THROW(lcmr_loss(Matrix{{1.0}}, Matrix{{1.0}}, {-1.0, 0.1}), ParameterError);
}

TEST(Grad, SingleTokensGiveExactZero) {
  std::mt19937_64 rng(9);
  const auto g = lcmr_grad(gaussian(1, 3, rng), gaussian(1, 3, rng), {});
  for (double x : g.speech.data()) EXPECT_EQ(x, 0.0);
  for (double x : g.stt.data()) EXPECT_EQ(x, 0.0);
}

TEST(Grad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  int checked = 0;
  while (checked < 40) {
    const std::size_t L = 1 + rng() % 5, S = 1 + rng() % 5, d = 1 + rng() % 8;
    const LcmrConfig cfg{0.5 + static_cast<double>(rng() % 4) * 0.5, 0.1};
    const Matrix xs = gaussian(L, d, rng);
    const Matrix xt = gaussian(S, d, rng);
    if (oracle::path_tie_gap(dist_matrix(xs, xt, cfg.tau)) < 1e-6) continue;
    auto f = [&](const Vector& p) {
      Matrix a(L, d, Vector(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(L * d)));
      Matrix b(S, d, Vector(p.begin() + static_cast<std::ptrdiff_t>(L * d), p.end()));
      return lcmr_loss(a, b, cfg);
    };
    const auto g = lcmr_grad(xs, xt, cfg);
    EXPECT_LE(max_rel_error(flatten(g.speech, g.stt), finite_diff_grad(f, flatten(xs, xt), 1e-5)), 1e-4)
        << "L=" << L << " S=" << S << " d=" << d;
    ++checked;
  }
}

TEST(Grad, ThreeByTwoExample) {
  std::mt19937_64 rng(11);
  const Matrix xs = gaussian(3, 4, rng);
  const Matrix xt = gaussian(2, 4, rng);
  ASSERT_GE(oracle::path_tie_gap(dist_matrix(xs, xt, 1.0)), 1e-6);
  auto f = [&](const Vector& p) {
    return lcmr_loss(Matrix(3, 4, Vector(p.begin(), p.begin() + 12)), Matrix(2, 4, Vector(p.begin() + 12, p.end())), {});
  };
  const auto g = lcmr_grad(xs, xt, {});
  EXPECT_LE(max_rel_error(flatten(g.speech, g.stt), finite_diff_grad(f, flatten(xs, xt), 1e-5)), 1e-4);
}

TEST(Total, Arithmetic) {
  EXPECT_DOUBLE_EQ(total_loss(1.0, 0.5, 0.2), 1.1);
  EXPECT_EQ(total_loss(2.5, 7.0, 0.0), 2.5);
  EXPECT_EQ(total_loss(0.0, 3.25, 1.0), 3.25);
  EXPECT_THROW(total_loss(1.0, 1.0, -0.1), ParameterError);
}

TEST(Total, ZeroLambdaGradientIsCeGradient) {
  std::mt19937_64 rng(12);
  const Matrix ce = gaussian(4, 3, rng);
  const auto g = lcmr_grad(gaussian(4, 3, rng), gaussian(2, 3, rng), {});
  EXPECT_EQ(total_grad(ce, g.speech, 0.0), ce);
  const Matrix mixed = total_grad(ce, g.speech, 0.5);
  for (std::size_t i = 0; i < ce.data().size(); ++i)
    EXPECT_DOUBLE_EQ(mixed.data()[i], ce.data()[i] + 0.5 * g.speech.data()[i]);
}

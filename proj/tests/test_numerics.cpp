#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "subdim/numerics.hpp"

using namespace subdim;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::io;
}

}  // namespace

TEST(SmoothL1, Examples) {
  EXPECT_EQ(smooth_l1(vec({1, 2, 3}), vec({1, 2, 3})), 0.0);
  EXPECT_DOUBLE_EQ(smooth_l1(vec({0.0}), vec({0.5})), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(vec({0.0}), vec({2.0})), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(vec({0.0, 0.0}), vec({-0.5, -2.0})), 0.125 + 1.5);
}

TEST(SmoothL1, Errors) {
  EXPECT_EQ(code_of([] { smooth_l1(vec({1, 2}), vec({1})); }), Errc::length_mismatch);
  EXPECT_EQ(code_of([] { smooth_l1(vec({NAN}), vec({1})); }), Errc::non_finite);
}

TEST(Pearson, PerfectRelations) {
  EXPECT_NEAR(pearson(vec({1, 2, 3}), vec({2, 4, 6})).r, 1.0, 1e-15);
  EXPECT_NEAR(pearson(vec({1, 2, 3}), vec({3, 2, 1})).r, -1.0, 1e-15);
}

TEST(Pearson, HandComputedCovarianceRatio) {
  // x mean 2.5, y mean 2.5; deviations (-1.5,-0.5,0.5,1.5) and (-1.5,0.5,-0.5,1.5).
  const double sxy = 2.25 - 0.25 - 0.25 + 2.25;
  const double sxx = 2.25 + 0.25 + 0.25 + 2.25;
  const auto st = pearson(vec({1, 2, 3, 4}), vec({1, 3, 2, 4}));
  EXPECT_NEAR(st.r, sxy / sxx, 1e-15);
  EXPECT_EQ(st.n, 4u);
  // t = r sqrt(2 / (1 - r^2)) = 0.8 * sqrt(2 / 0.36); two-sided with 2 dof.
  const double t = 0.8 * std::sqrt(2.0 / 0.36);
  const double p_two = 1.0 - t / std::sqrt(2.0 + t * t);  // closed form for 2 dof
  EXPECT_NEAR(st.p, p_two, 1e-12);
}

TEST(Pearson, SymmetryAndScaleInvariance) {
  const Matrix m = random_matrix(50, 2, 3);
  const Vector x = m.col(0), y = m.col(1);
  EXPECT_EQ(pearson(x, y).r, pearson(y, x).r);
  const Vector xs = (-3.0 * x).array() + 7.0;
  EXPECT_NEAR(pearson(xs, y).r, -pearson(x, y).r, 1e-12);
}

TEST(Pearson, Errors) {
  EXPECT_EQ(code_of([] { pearson(vec({1, 1, 1}), vec({1, 2, 3})); }), Errc::degenerate_input);
  EXPECT_EQ(code_of([] { pearson(vec({1, 2, 3}), vec({1, 2})); }), Errc::length_mismatch);
}

TEST(Poc, Examples) {
  EXPECT_DOUBLE_EQ(pairwise_order_consistency(vec({1, 2, 3, 4}), vec({1, 2, 3, 4})), 1.0);
  EXPECT_DOUBLE_EQ(pairwise_order_consistency(vec({4, 3, 2, 1}), vec({1, 2, 3, 4})), 0.0);
  EXPECT_DOUBLE_EQ(pairwise_order_consistency(vec({1, 2, 3}), vec({1, 3, 2})), 2.0 / 3.0);
}

TEST(Poc, TiesSkippedAndDegenerate) {
  // Pair (0,1) is tied in rating and skipped; (0,2) agrees, (1,2) does not.
  EXPECT_DOUBLE_EQ(pairwise_order_consistency(vec({1, 5, 3}), vec({1, 1, 2})), 0.5);
  EXPECT_EQ(code_of([] { pairwise_order_consistency(vec({1, 2}), vec({3, 3})); }), Errc::degenerate_input);
}

TEST(Poc, MonotoneTransformInvariantAndSampled) {
  const Matrix m = random_matrix(300, 2, 5);
  const Vector s = m.col(0), r = m.col(1);
  const Vector t = s.array().exp() * 3.0 + 1.0;
  EXPECT_EQ(pairwise_order_consistency(s, r), pairwise_order_consistency(t, r));
  // Sampling path: deterministic per seed and close to the exhaustive value.
  const double exact = pairwise_order_consistency(s, r);
  const double a = pairwise_order_consistency(s, r, 20000, 9);
  EXPECT_EQ(a, pairwise_order_consistency(s, r, 20000, 9));
  EXPECT_NEAR(a, exact, 0.02);
}

TEST(Jacobi, MatchesKnownSpectrum) {
  Matrix a(3, 3);
  a << 2, 1, 0, 1, 2, 0, 0, 0, 5;
  const auto e = jacobi_eigen(a);
  EXPECT_NEAR(e.values[0], 5.0, 1e-12);
  EXPECT_NEAR(e.values[1], 3.0, 1e-12);
  EXPECT_NEAR(e.values[2], 1.0, 1e-12);
  const Matrix recon = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
  EXPECT_LT((recon - a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pca, AxisAlignedVariances) {
  // Columns with sample variances 4 and 1, uncorrelated by construction.
  Matrix data(4, 2);
  data << 2, 0, -2, 0, 0, 1, 0, -1;
  data.col(0) *= std::sqrt(3.0 / 2.0);
  data.col(1) *= std::sqrt(3.0 / 2.0) / 2.0 * 2.0;
  const Matrix cov = (data.transpose() * data) / 3.0;
  ASSERT_NEAR(cov(0, 0), 4.0, 1e-12);
  ASSERT_NEAR(cov(1, 1), 1.0, 1e-12);
  const auto model = pca_fit(data, 0.8);
  ASSERT_EQ(model.size(), 1);
  EXPECT_NEAR(std::abs(model.components(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(model.components(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(model.explained_ratio[0], 0.8, 1e-12);
}

TEST(Pca, CompleteBasisReconstructs) {
  const Matrix data = random_matrix(30, 6, 11);
  const auto model = pca_fit(data, 1.0);
  ASSERT_EQ(model.size(), 6);
  const Matrix scores = pca_transform(model, data);
  const Matrix back = (scores * model.components).rowwise() + model.mean.transpose();
  EXPECT_LT((back - data).cwiseAbs().maxCoeff(), 1e-8);
  const Matrix cct = model.components * model.components.transpose();
  EXPECT_LT((cct - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-8);
  for (Eigen::Index i = 1; i < model.size(); ++i)
    EXPECT_GE(model.explained_variance[i - 1], model.explained_variance[i]);
}

TEST(Pca, FewerRowsThanColumnsCapsAtRank) {
  const Matrix data = random_matrix(5, 8, 12);
  EXPECT_EQ(pca_fit(data, 1.0).size(), 4);
}

TEST(Pca, DuplicatedColumnsShareOneComponent) {
  Matrix data = random_matrix(40, 3, 13);
  data.col(2) = data.col(0);
  const auto model = pca_fit(data, 1.0);
  ASSERT_EQ(model.size(), 2);  // rank 2
  // Brute force: covariance eigenvalues, compared to the ones Jacobi kept.
  const Matrix centred = data.rowwise() - data.colwise().mean();
  const Matrix cov = centred.transpose() * centred / 39.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  EXPECT_NEAR(es.eigenvalues()[2], model.explained_variance[0], 1e-10);
  EXPECT_NEAR(es.eigenvalues()[0], 0.0, 1e-10);
  // The duplicated pair loads equally on whichever component carries it.
  for (Eigen::Index k = 0; k < model.size(); ++k)
    EXPECT_NEAR(model.components(k, 0), model.components(k, 2), 1e-10);
}

TEST(Pca, TransformDecorrelatesAndCentres) {
  const Matrix data = random_matrix(100, 5, 14) * random_matrix(5, 5, 15);
  const auto model = pca_fit(data, 1.0);
  const Matrix s = pca_transform(model, data);
  for (Eigen::Index i = 0; i < s.cols(); ++i)
    for (Eigen::Index j = i + 1; j < s.cols(); ++j)
      EXPECT_LE(std::abs(correlation_or_zero(s.col(i), s.col(j))), 1e-6);
  const Matrix mean_row = model.mean.transpose();
  EXPECT_LT(pca_transform(model, mean_row).cwiseAbs().maxCoeff(), 1e-12);
  // Single point against hand-rolled dot products.
  const Matrix point = data.row(3);
  const Matrix got = pca_transform(model, point);
  for (Eigen::Index k = 0; k < model.size(); ++k) {
    double dot = 0.0;
    for (Eigen::Index j = 0; j < 5; ++j) dot += (point(0, j) - model.mean[j]) * model.components(k, j);
    EXPECT_NEAR(got(0, k), dot, 1e-12);
  }
}

TEST(Pca, Errors) {
  Matrix same(3, 2);
  same << 1, 2, 1, 2, 1, 2;
  EXPECT_EQ(code_of([&] { pca_fit(same, 0.8); }), Errc::degenerate_input);
  const auto model = pca_fit(random_matrix(10, 3, 1), 1.0);
  EXPECT_EQ(code_of([&] { pca_transform(model, random_matrix(2, 4, 1)); }), Errc::shape_mismatch);
}

TEST(Ridge, Examples) {
  const Matrix y = random_matrix(4, 2, 21);
  EXPECT_LT((ridge_solve(Matrix::Identity(4, 4), y, 0.0) - y).cwiseAbs().maxCoeff(), 1e-15);

  Matrix x(2, 1), t(2, 1);
  x << 1, 1;
  t << 1, 1;
  EXPECT_NEAR(ridge_solve(x, t, 1.0)(0, 0), 2.0 / 3.0, 1e-15);

  const Matrix d = random_matrix(20, 3, 22), tt = random_matrix(20, 1, 23);
  const Matrix w = ridge_solve(d, tt, 1e12);
  EXPECT_LE(w.norm(), 1e-6 * (d.transpose() * tt).norm());
}

TEST(Ridge, NormalEquations) {
  const Matrix d = random_matrix(40, 6, 31), y = random_matrix(40, 3, 32);
  for (double lambda : {0.0, 0.5, 10.0}) {
    const Matrix w = ridge_solve(d, y, lambda);
    const Matrix lhs = (d.transpose() * d + lambda * Matrix::Identity(6, 6)) * w;
    const Matrix rhs = d.transpose() * y;
    EXPECT_LE((lhs - rhs).norm(), 1e-8 * rhs.norm());
  }
}

TEST(Ridge, ColumnsSolvedIndependently) {
  const Matrix d = random_matrix(30, 4, 33), y = random_matrix(30, 3, 34);
  const Matrix all = ridge_solve(d, y, 2.0);
  for (Eigen::Index c = 0; c < 3; ++c) {
    const Matrix one = ridge_solve(d, Matrix(y.col(c)), 2.0);
    for (Eigen::Index i = 0; i < 4; ++i) EXPECT_EQ(one(i, 0), all(i, c));
  }
}

TEST(Ridge, Errors) {
  Matrix d(3, 2);
  d << 1, 1, 2, 2, 3, 3;
  EXPECT_EQ(code_of([&] { ridge_solve(d, random_matrix(3, 1, 1), 0.0); }), Errc::singular_system);
  EXPECT_NO_THROW(ridge_solve(d, random_matrix(3, 1, 1), 1.0));
  Matrix y = random_matrix(3, 1, 2);
  y(0, 0) = INFINITY;
  EXPECT_EQ(code_of([&] { ridge_solve(d, y, 1.0); }), Errc::non_finite);
}

TEST(Adam, ZeroGradientLeavesParams) {
  Vector p = vec({1.0, -2.0});
  AdamState s;
  adam_step(p, Vector::Zero(2), s);
  EXPECT_EQ(p, vec({1.0, -2.0}));
}

TEST(Adam, FirstStepMovesByLr) {
  for (double g : {0.1, 0.5, -42.0}) {
    Vector p = vec({0.25});
    AdamState s;
    adam_step(p, vec({g}), s);
    EXPECT_NEAR(std::abs(p[0] - 0.25), s.lr, 1e-9);
  }
}

TEST(Adam, Deterministic) {
  auto run = [] {
    Vector p = vec({1, 2, 3});
    AdamState s;
    for (int i = 0; i < 10; ++i) adam_step(p, p * 0.3 - vec({1, 0, 1}), s);
    return std::make_pair(p, s.second_moment);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, Errors) {
  Vector p = vec({1, 2});
  AdamState s;
  EXPECT_EQ(code_of([&] { adam_step(p, vec({1}), s); }), Errc::length_mismatch);
  EXPECT_EQ(code_of([&] { adam_step(p, vec({1, NAN}), s); }), Errc::non_finite);
}

TEST(FiniteDiff, Examples) {
  EXPECT_NEAR(finite_diff_grad([](const Vector& x) { return x[0] * x[0]; }, vec({3.0}))[0], 6.0, 1e-6);
  EXPECT_EQ(finite_diff_grad([](const Vector&) { return 4.0; }, vec({1, 2, 3})), Vector::Zero(3));
  const Vector g = finite_diff_grad([](const Vector& x) { return x[0] * x[1]; }, vec({2, 5}));
  EXPECT_NEAR(g[0], 5.0, 1e-8);
  EXPECT_NEAR(g[1], 2.0, 1e-8);
  EXPECT_EQ(code_of([] { finite_diff_grad([](const Vector& x) { return std::log(x[0]); }, vec({0.0})); }),
            Errc::non_finite);
}

TEST(TTest, Examples) {
  const auto r = one_sample_ttest(vec({1, 2, 3}), 0.0);
  EXPECT_NEAR(r.t, 2.0 * std::sqrt(3.0), 1e-12);
  // Upper tail of t with 2 dof has the closed form 0.5 (1 - t / sqrt(2 + t^2)).
  EXPECT_NEAR(r.p_upper, 0.5 * (1.0 - r.t / std::sqrt(2.0 + r.t * r.t)), 1e-12);
  EXPECT_NEAR(one_sample_ttest(vec({-1, 1, -2, 2}), 0.0).p_upper, 0.5, 1e-12);
  EXPECT_EQ(code_of([] { one_sample_ttest(vec({2, 2, 2}), 2.0); }), Errc::degenerate_input);
}

TEST(KsUniform, GridPassesSkewFails) {
  std::vector<double> grid, skew;
  for (int i = 0; i < 500; ++i) {
    grid.push_back((i + 0.5) / 500.0);
    skew.push_back(std::pow((i + 0.5) / 500.0, 2.0));
  }
  const auto g = ks_uniform_test(grid);
  EXPECT_NEAR(g.statistic, 0.001, 1e-12);
  EXPECT_GT(g.p, 0.99);
  EXPECT_LT(ks_uniform_test(skew).p, 1e-6);
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> draws(1000);
  for (auto& d : draws) d = u(rng);
  EXPECT_GT(ks_uniform_test(draws).p, 0.01);
}

#pragma once

// Deterministic numerical kernels shared by every stage: correlation
// statistics, Jacobi PCA, ridge solves, Adam, and the finite-difference
// gradient oracle. All reductions run in a fixed index order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <boost/math/distributions/students_t.hpp>

#include "subdim/error.hpp"

namespace subdim {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using VectorCRef = Eigen::Ref<const Vector>;

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; used to derive independent stream seeds from a
/// master seed and a stream tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j))) return false;
  return true;
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const std::string& what) {
  if (!all_finite(m)) throw Error(Errc::non_finite, what + " contains a non-finite entry");
}

inline void require_same_length(Eigen::Index a, Eigen::Index b, const std::string& what) {
  if (a != b)
    throw Error(Errc::length_mismatch,
                what + ": " + std::to_string(a) + " vs " + std::to_string(b));
}

// ---------------------------------------------------------------------------
// Losses and statistics

inline double smooth_l1_value(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

/// d/d(d) of smooth_l1_value.
inline double smooth_l1_slope(double d) {
  if (std::abs(d) < 1.0) return d;
  return d > 0.0 ? 1.0 : -1.0;
}

/// Sum of the Huber-style smooth L1 over target - pred.
inline double smooth_l1(const VectorCRef& pred, const VectorCRef& target) {
  require_same_length(pred.size(), target.size(), "smooth_l1");
  if (pred.size() == 0) throw Error(Errc::length_mismatch, "smooth_l1: empty input");
  require_finite(pred, "smooth_l1 pred");
  require_finite(target, "smooth_l1 target");
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) total += smooth_l1_value(target[i] - pred[i]);
  return total;
}

/// Upper-tail probability P(T > t) for Student-t with `dof` degrees of freedom.
inline double student_t_sf(double t, double dof) {
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (t == std::numeric_limits<double>::infinity()) return 0.0;
  if (t == -std::numeric_limits<double>::infinity()) return 1.0;
  boost::math::students_t_distribution<double> dist(dof);
  return boost::math::cdf(boost::math::complement(dist, t));
}

struct CorrStats {
  double r = 0.0;
  double p = 1.0;
  std::size_t n = 0;
};

/// Pearson r with an analytic two-sided p (Student-t, n - 2 dof).
inline CorrStats pearson(const VectorCRef& x, const VectorCRef& y) {
  require_same_length(x.size(), y.size(), "pearson");
  const auto n = x.size();
  if (n < 3) throw Error(Errc::length_mismatch, "pearson needs at least 3 samples");
  require_finite(x, "pearson x");
  require_finite(y, "pearson y");
  double mx = 0.0, my = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0)
    throw Error(Errc::degenerate_input, "pearson: constant vector");
  CorrStats out;
  out.n = static_cast<std::size_t>(n);
  out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  if (std::abs(out.r) >= 1.0) {
    out.p = 0.0;
  } else {
    const double dof = static_cast<double>(n - 2);
    const double t = std::abs(out.r) * std::sqrt(dof / (1.0 - out.r * out.r));
    out.p = std::min(1.0, 2.0 * student_t_sf(t, dof));
  }
  return out;
}

/// Pearson r that maps degenerate (constant) inputs to 0 instead of throwing;
/// used when scoring predictions inside cross-validation loops.
inline double correlation_or_zero(const VectorCRef& x, const VectorCRef& y) {
  require_same_length(x.size(), y.size(), "correlation");
  const auto n = x.size();
  if (n < 2) return 0.0;
  double mx = 0.0, my = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline constexpr std::size_t kDefaultPocMaxPairs = 200000;

/// Pairwise order consistency: fraction of pairs with distinct ratings whose
/// score ordering agrees with the rating ordering. Score ties count as
/// disagreements. Exhaustive up to `max_pairs` pairs, seeded sampling above.
inline double pairwise_order_consistency(const VectorCRef& score, const VectorCRef& rating,
                                         std::size_t max_pairs = kDefaultPocMaxPairs,
                                         std::uint64_t seed = 0) {
  require_same_length(score.size(), rating.size(), "pairwise_order_consistency");
  const auto n = static_cast<std::size_t>(score.size());
  if (n < 2) throw Error(Errc::length_mismatch, "pairwise_order_consistency needs 2 samples");
  if (rating.maxCoeff() == rating.minCoeff())
    throw Error(Errc::degenerate_input, "pairwise_order_consistency: all ratings equal");

  auto sign = [](double v) { return (v > 0.0) - (v < 0.0); };
  std::uint64_t concordant = 0, counted = 0;
  auto visit = [&](std::size_t i, std::size_t j) {
    const int rs = sign(rating[i] - rating[j]);
    if (rs == 0) return;
    ++counted;
    if (sign(score[i] - score[j]) == rs) ++concordant;
  };

  const std::uint64_t total_pairs = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  if (total_pairs <= max_pairs) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) visit(i, j);
  } else {
    Rng rng(mix_seed(seed, 0x90c));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t s = 0; s < max_pairs; ++s) {
      std::size_t i = pick(rng), j = pick(rng);
      while (j == i) j = pick(rng);
      visit(i, j);
    }
    // Sampling can miss the few untied pairs of a nearly constant rating.
    if (counted == 0)
      for (std::size_t i = 0; i < n && counted == 0; ++i)
        for (std::size_t j = i + 1; j < n; ++j) visit(i, j);
  }
  return static_cast<double>(concordant) / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition and PCA

struct SymmetricEigen {
  Vector values;   // descending
  Matrix vectors;  // column i pairs with values[i]
};

/// Cyclic Jacobi rotations on a symmetric matrix. Eigenvalues are returned in
/// decreasing order; each eigenvector's largest-magnitude entry is positive.
inline SymmetricEigen jacobi_eigen(const Matrix& symmetric, int max_sweeps = 100) {
  const Eigen::Index d = symmetric.rows();
  if (symmetric.cols() != d) throw Error(Errc::shape_mismatch, "jacobi_eigen: matrix not square");
  require_finite(symmetric, "jacobi_eigen input");
  Matrix a = 0.5 * (symmetric + symmetric.transpose());
  Matrix v = Matrix::Identity(d, d);

  const double scale = a.squaredNorm();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < d; ++p)
      for (Eigen::Index q = p + 1; q < d; ++q) off += a(p, q) * a(p, q);
    if (off <= 1e-30 * scale || off == 0.0) break;

    for (Eigen::Index p = 0; p < d; ++p) {
      for (Eigen::Index q = p + 1; q < d; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < d; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

  SymmetricEigen out;
  out.values.resize(d);
  out.vectors.resize(d, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    const Eigen::Index src = order[static_cast<std::size_t>(c)];
    out.values[c] = a(src, src);
    Eigen::Index pivot = 0;
    for (Eigen::Index k = 1; k < d; ++k)
      if (std::abs(v(k, src)) > std::abs(v(pivot, src))) pivot = k;
    const double flip = v(pivot, src) < 0.0 ? -1.0 : 1.0;
    for (Eigen::Index k = 0; k < d; ++k) out.vectors(k, c) = flip * v(k, src);
  }
  return out;
}

struct PcaModel {
  Vector mean;               // length d
  Matrix components;         // k x d, orthonormal rows
  Vector explained_variance; // length k, non-increasing
  Vector explained_ratio;    // length k

  Eigen::Index dimension() const { return mean.size(); }
  Eigen::Index size() const { return components.rows(); }
};

/// Fits PCA by Jacobi on the centred covariance. Keeps the smallest k whose
/// cumulative explained ratio reaches `ratio_threshold`, capped at the
/// numerical rank and at `max_components`.
inline PcaModel pca_fit(const Matrix& data, double ratio_threshold,
                        std::size_t max_components = std::numeric_limits<std::size_t>::max()) {
  if (data.rows() < 2) throw Error(Errc::shape_mismatch, "pca_fit needs at least 2 rows");
  if (data.cols() < 1) throw Error(Errc::shape_mismatch, "pca_fit needs at least 1 column");
  if (!(ratio_threshold > 0.0 && ratio_threshold <= 1.0))
    throw Error(Errc::validation, "pca_fit ratio_threshold must lie in (0, 1]");
  if (max_components == 0) throw Error(Errc::validation, "pca_fit max_components must be >= 1");
  require_finite(data, "pca_fit data");

  PcaModel model;
  model.mean = data.colwise().mean().transpose();
  const Matrix centred = data.rowwise() - model.mean.transpose();
  const Matrix cov = (centred.transpose() * centred) / static_cast<double>(data.rows() - 1);
  const SymmetricEigen eig = jacobi_eigen(cov);

  const Eigen::Index d = data.cols();
  Vector values = eig.values.cwiseMax(0.0);
  const double total = values.sum();
  const double top = values.size() > 0 ? values[0] : 0.0;
  if (!(total > 0.0) || !(top > 1e-300))
    throw Error(Errc::degenerate_input, "pca_fit: data has rank 0 (all rows identical)");

  Eigen::Index rank = 0;
  while (rank < d && values[rank] > 1e-10 * top) ++rank;

  Eigen::Index k = 0;
  double cumulative = 0.0;
  while (k < rank) {
    cumulative += values[k] / total;
    ++k;
    if (cumulative >= ratio_threshold - 1e-10) break;
  }
  k = std::min<Eigen::Index>(k, static_cast<Eigen::Index>(std::min<std::size_t>(max_components, d)));
  k = std::max<Eigen::Index>(k, 1);

  model.components = eig.vectors.leftCols(k).transpose();
  model.explained_variance = values.head(k);
  model.explained_ratio = values.head(k) / total;
  return model;
}

inline Matrix pca_transform(const PcaModel& model, const Matrix& data) {
  if (data.cols() != model.dimension())
    throw Error(Errc::shape_mismatch, "pca_transform: data has " + std::to_string(data.cols()) +
                                          " columns, model expects " +
                                          std::to_string(model.dimension()));
  const Matrix centred = data.rowwise() - model.mean.transpose();
  return centred * model.components.transpose();
}

// ---------------------------------------------------------------------------
// Ridge regression

/// Caches X^T X for one design so several penalties can be solved cheaply.
/// Each target column is solved independently, so results for a column never
/// depend on which other columns are solved alongside it.
class RidgeSystem {
 public:
  explicit RidgeSystem(const Matrix& design) : design_t_(design.transpose()) {
    require_finite(design, "ridge design");
    gram_ = design_t_ * design_t_.transpose();
    diag_scale_ = gram_.diagonal().cwiseAbs().maxCoeff();
  }

  Eigen::Index rows() const { return design_t_.cols(); }
  Eigen::Index features() const { return design_t_.rows(); }

  Matrix solve(const Matrix& targets, double lambda) const {
    if (targets.rows() != rows())
      throw Error(Errc::shape_mismatch, "ridge_solve: design has " + std::to_string(rows()) +
                                            " rows, targets " + std::to_string(targets.rows()));
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw Error(Errc::validation, "ridge_solve: lambda must be finite and >= 0");
    require_finite(targets, "ridge targets");

    const Eigen::Index p = features();
    Matrix system = gram_;
    system.diagonal().array() += lambda;
    Eigen::LLT<Eigen::MatrixXd> llt(system);
    bool singular = llt.info() != Eigen::Success;
    if (!singular) {
      const Eigen::MatrixXd l = llt.matrixL();
      const double min_pivot = (l.diagonal().array().square()).minCoeff();
      singular = !(min_pivot > 1e-13 * std::max(diag_scale_ + lambda, 1e-300));
    }
    if (singular)
      throw Error(Errc::singular_system,
                  "ridge_solve: X^T X + lambda I is not positive definite (lambda = " +
                      std::to_string(lambda) + ")");

    Matrix weights(p, targets.cols());
    Vector rhs(p), y(targets.rows());
    for (Eigen::Index c = 0; c < targets.cols(); ++c) {
      y = targets.col(c);
      rhs.noalias() = design_t_ * y;
      weights.col(c) = llt.solve(rhs);
    }
    return weights;
  }

 private:
  Matrix design_t_;
  Matrix gram_;
  double diag_scale_ = 0.0;
};

/// w = (X^T X + lambda I)^{-1} X^T Y. Intercepts are the caller's job
/// (append a constant column or centre).
inline Matrix ridge_solve(const Matrix& design, const Matrix& targets, double lambda) {
  return RidgeSystem(design).solve(targets, lambda);
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamState {
  std::size_t step = 0;
  Vector first_moment;
  Vector second_moment;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(Eigen::Ref<Vector> params, const VectorCRef& grads, AdamState& state) {
  require_same_length(params.size(), grads.size(), "adam_step params/grads");
  if (!(state.beta1 > 0.0 && state.beta1 < 1.0 && state.beta2 > 0.0 && state.beta2 < 1.0))
    throw Error(Errc::validation, "adam_step: betas must lie in (0, 1)");
  require_finite(grads, "adam_step gradient");
  if (state.first_moment.size() == 0) {
    state.first_moment = Vector::Zero(params.size());
    state.second_moment = Vector::Zero(params.size());
  }
  require_same_length(state.first_moment.size(), params.size(), "adam_step state");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
    state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.first_moment[i] / c1;
    const double v_hat = state.second_moment[i] / c2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

// ---------------------------------------------------------------------------
// Gradient oracle and tests

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <typename F>
Vector finite_diff_grad(F&& f, const Vector& point, double h = 1e-5) {
  Vector grad(point.size());
  Vector x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(static_cast<const Vector&>(x));
    x[i] = orig - h;
    const double down = f(static_cast<const Vector&>(x));
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw Error(Errc::non_finite, "finite_diff_grad: f is non-finite near coordinate " +
                                        std::to_string(i));
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

struct TTestResult {
  double t = 0.0;
  double p_upper = 1.0;  // one-tailed, H1: mean > mu0
};

inline TTestResult one_sample_ttest(const VectorCRef& values, double mu0) {
  const auto n = values.size();
  if (n < 2) throw Error(Errc::length_mismatch, "one_sample_ttest needs at least 2 values");
  require_finite(values, "one_sample_ttest values");
  double mean = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) mean += values[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) ss += (values[i] - mean) * (values[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw Error(Errc::degenerate_input, "one_sample_ttest: zero variance");
  TTestResult out;
  out.t = (mean - mu0) / (sd / std::sqrt(static_cast<double>(n)));
  out.p_upper = student_t_sf(out.t, static_cast<double>(n - 1));
  return out;
}

struct KsResult {
  double statistic = 0.0;
  double p = 1.0;
};

/// One-sample Kolmogorov-Smirnov test against Uniform(0, 1). The p-value
/// uses the asymptotic Kolmogorov series with Stephens' small-n correction.
inline KsResult ks_uniform_test(std::vector<double> values) {
  if (values.empty()) throw Error(Errc::length_mismatch, "ks_uniform_test needs at least 1 value");
  for (double v : values)
    if (!std::isfinite(v)) throw Error(Errc::non_finite, "ks_uniform_test: non-finite value");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double d = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = std::clamp(values[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - x, x - static_cast<double>(i) / n});
  }
  KsResult out;
  out.statistic = d;
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  if (lambda < 1e-3) {
    out.p = 1.0;
    return out;
  }
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  out.p = std::clamp(2.0 * sum, 0.0, 1.0);
  return out;
}

}  // namespace subdim

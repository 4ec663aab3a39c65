#pragma once

// Voxel-wise encoding models: HRF-convolved word features, ridge regression
// with nuisance regressors and nested contiguous-block cross-validation,
// Monte Carlo null p-values, group-level t maps, sign correction and
// per-voxel subdimension assignment.

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "subdim/data_io.hpp"
#include "subdim/error.hpp"
#include "subdim/numerics.hpp"
#include "subdim/subspace.hpp"

namespace subdim {

// ---------------------------------------------------------------------------
// HRF

struct HrfSpec {
  double peak_delay = 6.0;
  double undershoot_delay = 16.0;
  double peak_dispersion = 1.0;
  double undershoot_dispersion = 1.0;
  double undershoot_ratio = 1.0 / 6.0;
  double duration = 32.0;
};

inline void validate_hrf(const HrfSpec& s) {
  if (!(s.peak_delay > 0 && s.undershoot_delay > 0 && s.peak_dispersion > 0 && s.undershoot_dispersion > 0 &&
        s.duration > 0 && s.undershoot_ratio >= 0))
    throw Error(Errc::invalid_config, "HRF parameters must be positive");
}

namespace detail {

/// Gamma density with shape `delay / dispersion` and scale `dispersion`.
inline double gamma_pdf(double t, double delay, double dispersion) {
  if (t <= 0.0) return 0.0;
  const double shape = delay / dispersion;
  return std::exp((shape - 1.0) * std::log(t) - t / dispersion - std::lgamma(shape) -
                  shape * std::log(dispersion));
}

inline double double_gamma(double t, const HrfSpec& s) {
  return gamma_pdf(t, s.peak_delay, s.peak_dispersion) -
         s.undershoot_ratio * gamma_pdf(t, s.undershoot_delay, s.undershoot_dispersion);
}

}  // namespace detail

/// Difference of gammas scaled so its maximum is exactly 1.
class Hrf {
 public:
  explicit Hrf(const HrfSpec& spec = {}) : spec_(spec) {
    validate_hrf(spec_);
    // Coarse scan, then golden-section refinement of the peak.
    double best_t = 0.0, best = -1.0;
    for (int k = 1; k <= 3200; ++k) {
      const double t = spec_.duration * k / 3200.0;
      const double v = detail::double_gamma(t, spec_);
      if (v > best) {
        best = v;
        best_t = t;
      }
    }
    const double step = spec_.duration / 3200.0;
    double lo = std::max(best_t - step, 0.0), hi = std::min(best_t + step, spec_.duration);
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int it = 0; it < 100; ++it) {
      const double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
      if (detail::double_gamma(a, spec_) < detail::double_gamma(b, spec_)) lo = a;
      else hi = b;
    }
    peak_time_ = 0.5 * (lo + hi);
    scale_ = detail::double_gamma(peak_time_, spec_);
    if (!(scale_ > 0.0)) throw Error(Errc::invalid_config, "HRF has no positive peak");
  }

  double operator()(double t) const {
    if (!(t > 0.0) || t > spec_.duration) return 0.0;
    return detail::double_gamma(t, spec_) / scale_;
  }

  double peak_time() const { return peak_time_; }
  const HrfSpec& spec() const { return spec_; }

 private:
  HrfSpec spec_;
  double peak_time_ = 0.0;
  double scale_ = 1.0;
};

inline double canonical_hrf(double t, const HrfSpec& spec = {}) { return Hrf(spec)(t); }

// ---------------------------------------------------------------------------
// Features

struct FeatureMatrix {
  Matrix values;                        // n_volumes x f
  std::vector<std::size_t> zero_variance;  // columns left at zero
};

/// Sum over words of score * hrf(t_k - onset) at volume midpoints
/// t_k = (k + 0.5) * tr, before any normalisation.
inline Matrix convolve_features(const StimulusRun& run, const Matrix& word_scores, const Hrf& hrf) {
  const auto m = static_cast<std::size_t>(word_scores.rows());
  Matrix out = Matrix::Zero(run.n_volumes, word_scores.cols());
  for (std::size_t w = 0; w < run.words.size(); ++w) {
    const auto& ev = run.words[w];
    if (ev.word_id >= m)
      throw Error(Errc::validation, "timeline event " + std::to_string(w) + ": word_id " +
                                        std::to_string(ev.word_id) + " >= " + std::to_string(m) + " scored words");
    const auto first = static_cast<Eigen::Index>(std::max(0.0, std::floor(ev.onset / run.tr - 0.5)));
    const double last_t = ev.onset + hrf.spec().duration;
    for (Eigen::Index k = first; k < run.n_volumes; ++k) {
      const double t = (static_cast<double>(k) + 0.5) * run.tr;
      if (t > last_t) break;
      const double h = hrf(t - ev.onset);
      if (h == 0.0) continue;
      out.row(k) += h * word_scores.row(static_cast<Eigen::Index>(ev.word_id));
    }
  }
  return out;
}

/// Z-scores each column over time (population sd). Columns with no variance
/// are set to zero and reported.
inline FeatureMatrix zscore_columns(Matrix values) {
  FeatureMatrix out;
  const double n = static_cast<double>(values.rows());
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < values.rows(); ++i) mean += values(i, c);
    mean /= n;
    double ss = 0.0, peak = 0.0;
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
      ss += (values(i, c) - mean) * (values(i, c) - mean);
      peak = std::max(peak, std::abs(values(i, c)));
    }
    const double sd = std::sqrt(ss / n);
    if (!(sd > 1e-12 * std::max(peak, 1e-300))) {
      values.col(c).setZero();
      out.zero_variance.push_back(static_cast<std::size_t>(c));
      continue;
    }
    for (Eigen::Index i = 0; i < values.rows(); ++i) values(i, c) = (values(i, c) - mean) / sd;
  }
  out.values = std::move(values);
  return out;
}

inline FeatureMatrix build_features(const StimulusRun& run, const Matrix& word_scores, const Hrf& hrf = Hrf()) {
  return zscore_columns(convolve_features(run, word_scores, hrf));
}

// ---------------------------------------------------------------------------
// Null distribution

namespace detail {

struct NullCache {
  std::mutex mutex;
  std::map<std::tuple<std::size_t, std::size_t, std::uint64_t>, std::shared_ptr<const std::vector<double>>> tables;
};

inline NullCache& null_cache() {
  static NullCache cache;
  return cache;
}

}  // namespace detail

/// Sorted |r| of `n_samples` correlations between independent standard
/// Gaussian vectors of length T. Built once per (T, n_samples, seed).
inline std::shared_ptr<const std::vector<double>> null_table(std::size_t t, std::size_t n_samples, std::uint64_t seed) {
  if (t < 4) throw Error(Errc::validation, "null_pvalue: T must be >= 4");
  if (n_samples < 1000) throw Error(Errc::validation, "null_pvalue: n_samples must be >= 1000");
  auto& cache = detail::null_cache();
  const auto key = std::make_tuple(t, n_samples, seed);
  {
    std::lock_guard<std::mutex> lock(cache.mutex);
    const auto it = cache.tables.find(key);
    if (it != cache.tables.end()) return it->second;
  }
  Rng rng(mix_seed(seed, t));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto table = std::make_shared<std::vector<double>>(n_samples);
  Vector a(static_cast<Eigen::Index>(t)), b(static_cast<Eigen::Index>(t));
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = normal(rng);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = normal(rng);
    (*table)[s] = std::abs(correlation_or_zero(a, b));
  }
  std::sort(table->begin(), table->end());
  std::lock_guard<std::mutex> lock(cache.mutex);
  return cache.tables.emplace(key, std::move(table)).first->second;
}

/// Fraction of null |r| at least as large as |r|.
inline double null_pvalue(double r, std::size_t t, std::size_t n_samples = 10000, std::uint64_t seed = 0) {
  const auto table = null_table(t, n_samples, seed);
  const auto below = std::lower_bound(table->begin(), table->end(), std::abs(r));
  return static_cast<double>(table->end() - below) / static_cast<double>(table->size());
}

/// Two-sided Student-t p-value for a correlation, for cross-checking.
inline double analytic_pvalue(double r, std::size_t t) {
  const double dof = static_cast<double>(t) - 2.0;
  if (std::abs(r) >= 1.0) return 0.0;
  const double stat = std::abs(r) * std::sqrt(dof / (1.0 - r * r));
  return std::min(1.0, 2.0 * student_t_sf(stat, dof));
}

// ---------------------------------------------------------------------------
// Voxel-wise ridge with nested cross-validation

struct EncodingConfig {
  std::size_t folds = 5;
  std::size_t inner_folds = 5;
  std::vector<double> lambda_grid = {1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7};
  std::size_t null_samples = 10000;
  std::uint64_t null_seed = 0;
  std::size_t workers = 1;
};

inline void validate_encoding_config(const EncodingConfig& c) {
  if (c.folds < 2) throw Error(Errc::invalid_config, "encoding folds must be >= 2");
  if (c.inner_folds < 2) throw Error(Errc::invalid_config, "encoding inner_folds must be >= 2");
  if (c.lambda_grid.empty()) throw Error(Errc::invalid_config, "lambda_grid must not be empty");
  for (double l : c.lambda_grid)
    if (!(l >= 0.0) || !std::isfinite(l)) throw Error(Errc::invalid_config, "lambda_grid entries must be finite and >= 0");
  if (c.null_samples < 1000) throw Error(Errc::invalid_config, "null_samples must be >= 1000");
  if (c.workers < 1) throw Error(Errc::invalid_config, "workers must be >= 1");
}

struct Split {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> test;
};

/// K contiguous blocks over `rows`; block k is the test set of split k.
inline std::vector<Split> contiguous_folds(const std::vector<Eigen::Index>& rows, std::size_t k) {
  const std::size_t n = rows.size();
  if (k < 2 || k > n) throw Error(Errc::validation, "cannot cut " + std::to_string(n) + " samples into " + std::to_string(k) + " folds");
  std::vector<Split> out(k);
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t lo = f * n / k, hi = (f + 1) * n / k;
    for (std::size_t i = 0; i < n; ++i) (i >= lo && i < hi ? out[f].test : out[f].train).push_back(rows[i]);
  }
  return out;
}

inline std::vector<Split> contiguous_folds(Eigen::Index t, std::size_t k) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(t));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  return contiguous_folds(rows, k);
}

struct EncodingResult {
  Vector r;                 // per voxel, out-of-fold prediction vs BOLD
  Vector p;                 // Monte Carlo null
  Vector p_analytic;        // Student-t cross-check
  Matrix weights;           // f x G, mean over folds of semantic rows
  Vector lambda;            // per voxel, most frequent choice over folds
  Matrix fold_lambda;       // folds x G
  std::vector<Matrix> fold_weights;  // per fold, (f + 14 + 1) x G
  Matrix predictions;       // T x G, out of fold
  std::vector<std::size_t> zero_variance_features;

  Eigen::Index voxels() const { return r.size(); }
};

namespace detail {

/// Prediction from the semantic rows only: out(i, g) = sum_c f(i, c) w(c, g).
inline void predict_semantic(const Matrix& features, const std::vector<Eigen::Index>& rows,
                             const Matrix& weights, Eigen::Index f, Eigen::Index g0, Eigen::Index g1,
                             Matrix& out) {
  for (const auto i : rows)
    for (Eigen::Index g = g0; g < g1; ++g) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < f; ++c) s += features(i, c) * weights(c, g - g0);
      out(i, g) = s;
    }
}

inline double column_correlation(const Matrix& a, const Matrix& b, const std::vector<Eigen::Index>& rows, Eigen::Index ca,
                                 Eigen::Index cb) {
  Vector x(static_cast<Eigen::Index>(rows.size())), y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x[static_cast<Eigen::Index>(i)] = a(rows[i], ca);
    y[static_cast<Eigen::Index>(i)] = b(rows[i], cb);
  }
  return correlation_or_zero(x, y);
}

}  // namespace detail

/// Encoding fit over explicit outer splits. Each voxel is solved on its own,
/// so results do not depend on how voxels are distributed over workers.
inline EncodingResult fit_voxelwise_splits(const Matrix& features, const Matrix& nuisance, const Matrix& bold,
                                           const std::vector<Split>& outer, const EncodingConfig& cfg) {
  validate_encoding_config(cfg);
  const Eigen::Index t = features.rows(), f = features.cols(), g_count = bold.cols();
  if (nuisance.rows() != t || bold.rows() != t)
    throw Error(Errc::shape_mismatch, "fit_voxelwise: features, nuisance and bold need the same number of rows");
  if (nuisance.cols() != kNuisanceColumns)
    throw Error(Errc::shape_mismatch, "fit_voxelwise: nuisance has " + std::to_string(nuisance.cols()) + " columns, expected 14");
  if (f < 1 || g_count < 1) throw Error(Errc::shape_mismatch, "fit_voxelwise: need at least one feature and one voxel");
  require_finite(features, "features");
  require_finite(nuisance, "nuisance");
  require_finite(bold, "bold");
  const Eigen::Index p = f + kNuisanceColumns + 1;
  for (std::size_t k = 0; k < outer.size(); ++k)
    if (static_cast<Eigen::Index>(outer[k].test.size()) < p || static_cast<Eigen::Index>(outer[k].train.size()) < p)
      throw Error(Errc::validation, "fold " + std::to_string(k) + " is shorter than f + 15 = " + std::to_string(p) + " samples");

  Matrix design(t, p);
  design.leftCols(f) = features;
  design.middleCols(f, kNuisanceColumns) = nuisance;
  design.col(p - 1).setOnes();

  EncodingResult res;
  res.r = Vector::Zero(g_count);
  res.p = Vector::Ones(g_count);
  res.p_analytic = Vector::Ones(g_count);
  res.weights = Matrix::Zero(f, g_count);
  res.lambda = Vector::Zero(g_count);
  res.fold_lambda = Matrix::Zero(static_cast<Eigen::Index>(outer.size()), g_count);
  res.fold_weights.assign(outer.size(), Matrix::Zero(p, g_count));
  res.predictions = Matrix::Zero(t, g_count);
  for (Eigen::Index c = 0; c < f; ++c)
    if (features.col(c).cwiseAbs().maxCoeff() == 0.0) res.zero_variance_features.push_back(static_cast<std::size_t>(c));

  const auto& grid = cfg.lambda_grid;

  auto run_range = [&](Eigen::Index g0, Eigen::Index g1) {
    const Eigen::Index width = g1 - g0;
    for (std::size_t k = 0; k < outer.size(); ++k) {
      const auto& split = outer[k];
      std::vector<std::size_t> choice(static_cast<std::size_t>(width), 0);
      if (grid.size() > 1) {
        Matrix score = Matrix::Zero(static_cast<Eigen::Index>(grid.size()), width);
        const auto inner = contiguous_folds(split.train, cfg.inner_folds);
        Matrix inner_pred = Matrix::Zero(t, g_count);
        for (const auto& in : inner) {
          const RidgeSystem sys(gather_rows(design, in.train));
          const Matrix y = gather_rows(bold, in.train).middleCols(g0, width);
          for (std::size_t li = 0; li < grid.size(); ++li) {
            const Matrix w = sys.solve(y, grid[li]);
            detail::predict_semantic(design, in.test, w, f, g0, g1, inner_pred);
            for (Eigen::Index g = g0; g < g1; ++g)
              score(static_cast<Eigen::Index>(li), g - g0) += detail::column_correlation(inner_pred, bold, in.test, g, g);
          }
        }
        for (Eigen::Index g = 0; g < width; ++g) {
          std::size_t best = 0;
          for (std::size_t li = 1; li < grid.size(); ++li)
            if (score(static_cast<Eigen::Index>(li), g) > score(static_cast<Eigen::Index>(best), g)) best = li;
          choice[static_cast<std::size_t>(g)] = best;
        }
      }
      const RidgeSystem sys(gather_rows(design, split.train));
      const Matrix y = gather_rows(bold, split.train);
      for (std::size_t li = 0; li < grid.size(); ++li) {
        std::vector<Eigen::Index> cols;
        for (Eigen::Index g = 0; g < width; ++g)
          if (choice[static_cast<std::size_t>(g)] == li) cols.push_back(g0 + g);
        if (cols.empty()) continue;
        const Matrix w = sys.solve(gather_cols(y, cols), grid[li]);
        for (std::size_t j = 0; j < cols.size(); ++j) {
          const Eigen::Index g = cols[j];
          res.fold_weights[k].col(g) = w.col(static_cast<Eigen::Index>(j));
          res.fold_lambda(static_cast<Eigen::Index>(k), g) = grid[li];
        }
      }
      detail::predict_semantic(design, split.test, res.fold_weights[k].middleCols(g0, width), f, g0, g1, res.predictions);
    }
  };

  const std::size_t workers = std::min<std::size_t>(cfg.workers, static_cast<std::size_t>(g_count));
  if (workers <= 1) {
    run_range(0, g_count);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      const auto g0 = static_cast<Eigen::Index>(w * static_cast<std::size_t>(g_count) / workers);
      const auto g1 = static_cast<Eigen::Index>((w + 1) * static_cast<std::size_t>(g_count) / workers);
      pool.emplace_back([&, w, g0, g1] {
        try {
          run_range(g0, g1);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<Eigen::Index> scored;
  for (const auto& s : outer) scored.insert(scored.end(), s.test.begin(), s.test.end());
  std::sort(scored.begin(), scored.end());
  const double inv = 1.0 / static_cast<double>(outer.size());
  for (Eigen::Index g = 0; g < g_count; ++g) {
    res.r[g] = detail::column_correlation(res.predictions, bold, scored, g, g);
    res.p[g] = null_pvalue(res.r[g], scored.size(), cfg.null_samples, cfg.null_seed);
    res.p_analytic[g] = analytic_pvalue(res.r[g], scored.size());
    for (std::size_t k = 0; k < outer.size(); ++k)
      for (Eigen::Index c = 0; c < f; ++c) res.weights(c, g) += res.fold_weights[k](c, g);
    for (Eigen::Index c = 0; c < f; ++c) res.weights(c, g) *= inv;
    // Most frequent lambda over folds; ties go to the smaller value.
    std::size_t best_count = 0;
    for (std::size_t li = 0; li < grid.size(); ++li) {
      std::size_t count = 0;
      for (std::size_t k = 0; k < outer.size(); ++k)
        if (res.fold_lambda(static_cast<Eigen::Index>(k), g) == grid[li]) ++count;
      if (count > best_count || (count == best_count && count > 0 && grid[li] < res.lambda[g])) {
        best_count = count;
        res.lambda[g] = grid[li];
      }
    }
  }
  return res;
}

/// Contiguous-block outer folds over the time axis.
inline EncodingResult fit_voxelwise(const Matrix& features, const Matrix& nuisance, const Matrix& bold,
                                    const EncodingConfig& cfg = {}) {
  validate_encoding_config(cfg);
  if (static_cast<Eigen::Index>(cfg.folds) * (features.cols() + kNuisanceColumns + 1) > features.rows())
    throw Error(Errc::validation, "fit_voxelwise: T = " + std::to_string(features.rows()) + " is below folds * (f + 15)");
  return fit_voxelwise_splits(features, nuisance, bold, contiguous_folds(features.rows(), cfg.folds), cfg);
}

// ---------------------------------------------------------------------------
// Group level

struct GroupMap {
  Vector t;
  Vector neg_log10_p;
  std::vector<bool> significant;
  std::vector<std::size_t> zero_variance;  // voxels masked out for lack of spread
  double threshold = 0.001;

  std::size_t count() const { return static_cast<std::size_t>(std::count(significant.begin(), significant.end(), true)); }
};

/// Per voxel: Fisher z of subject correlations, upper-tailed one-sample t
/// against zero, significant where p < threshold.
inline GroupMap group_level_map(const Matrix& per_subject_r, double threshold = 0.001) {
  if (per_subject_r.rows() < 2) throw Error(Errc::validation, "group_level_map needs at least 2 subjects");
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(Errc::invalid_config, "group threshold must lie in (0, 1)");
  require_finite(per_subject_r, "per-subject r");
  const Eigen::Index g_count = per_subject_r.cols();
  GroupMap out;
  out.threshold = threshold;
  out.t = Vector::Zero(g_count);
  out.neg_log10_p = Vector::Zero(g_count);
  out.significant.assign(static_cast<std::size_t>(g_count), false);
  for (Eigen::Index g = 0; g < g_count; ++g) {
    Vector z(per_subject_r.rows());
    for (Eigen::Index s = 0; s < z.size(); ++s)
      z[s] = std::atanh(std::clamp(per_subject_r(s, g), -1.0 + 1e-15, 1.0 - 1e-15));
    try {
      const auto tt = one_sample_ttest(z, 0.0);
      out.t[g] = tt.t;
      out.neg_log10_p[g] = -std::log10(std::max(tt.p_upper, 1e-300));
      out.significant[static_cast<std::size_t>(g)] = tt.p_upper < threshold;
    } catch (const Error& e) {
      if (e.code() != Errc::degenerate_input) throw;
      out.zero_variance.push_back(static_cast<std::size_t>(g));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sign correction and assignment

inline Matrix sign_correct(const Matrix& weights, const std::vector<int>& signs) {
  if (static_cast<Eigen::Index>(signs.size()) != weights.rows())
    throw Error(Errc::length_mismatch, "sign_correct: " + std::to_string(signs.size()) + " signs for " +
                                           std::to_string(weights.rows()) + " weight rows");
  Matrix out = weights;
  for (Eigen::Index c = 0; c < out.rows(); ++c)
    if (signs[static_cast<std::size_t>(c)] < 0) out.row(c) = -out.row(c);
  return out;
}

/// Component rows in subspace order: every component of subspace 0, then 1, ...
struct FeatureRow {
  std::string label;  // "<attribute>_pc<k>"
  bool others = false;
  int sign = 1;
  std::size_t subspace = 0;
  std::size_t component = 0;
};

inline std::vector<FeatureRow> feature_rows(const std::vector<TransformedSubspace>& subspaces) {
  std::vector<FeatureRow> rows;
  for (std::size_t s = 0; s < subspaces.size(); ++s)
    for (std::size_t c = 0; c < subspaces[s].size(); ++c) {
      const auto& st = subspaces[s].components[c];
      rows.push_back({subspaces[s].attribute + "_pc" + std::to_string(c), st.status == ComponentStatus::others,
                      st.sign, s, c});
    }
  return rows;
}

inline Matrix sign_correct(const Matrix& weights, const std::vector<TransformedSubspace>& subspaces) {
  std::vector<int> signs;
  for (const auto& r : feature_rows(subspaces)) signs.push_back(r.sign);
  return sign_correct(weights, signs);
}

/// Word-by-feature score matrix: all subspace scores side by side.
inline Matrix stack_scores(const std::vector<TransformedSubspace>& subspaces) {
  Eigen::Index cols = 0, rows = -1;
  for (const auto& s : subspaces) {
    cols += s.scores.cols();
    if (rows >= 0 && s.scores.rows() != rows) throw Error(Errc::shape_mismatch, "subspace score row counts differ");
    rows = s.scores.rows();
  }
  Matrix out(std::max<Eigen::Index>(rows, 0), cols);
  Eigen::Index at = 0;
  for (const auto& s : subspaces) {
    out.middleCols(at, s.scores.cols()) = s.scores;
    at += s.scores.cols();
  }
  return out;
}

inline constexpr int kLabelOthers = -1;
inline constexpr int kLabelNotSignificant = -2;

struct VoxelAssignment {
  std::vector<int> label;    // feature row index, kLabelOthers or kLabelNotSignificant
  std::vector<double> weight;  // winning weight (0 where not significant)
  std::map<std::string, std::size_t> counts;

  std::string name(std::size_t voxel, const std::vector<FeatureRow>& rows) const {
    const int l = label[voxel];
    if (l == kLabelNotSignificant) return "not_significant";
    if (l == kLabelOthers) return "Others";
    return rows[static_cast<std::size_t>(l)].label;
  }
};

/// Significant voxels take the row with the largest (sign-corrected) weight;
/// the earliest row wins ties. A winning "others" row becomes Others.
inline VoxelAssignment assign_voxels(const Matrix& corrected_weights, const std::vector<FeatureRow>& rows,
                                     const std::vector<bool>& significant) {
  if (static_cast<Eigen::Index>(rows.size()) != corrected_weights.rows())
    throw Error(Errc::length_mismatch, "assign_voxels: row labels do not match weight rows");
  if (static_cast<Eigen::Index>(significant.size()) != corrected_weights.cols())
    throw Error(Errc::length_mismatch, "assign_voxels: mask length differs from voxel count");
  VoxelAssignment out;
  const auto g_count = static_cast<std::size_t>(corrected_weights.cols());
  out.label.assign(g_count, kLabelNotSignificant);
  out.weight.assign(g_count, 0.0);
  for (std::size_t g = 0; g < g_count; ++g) {
    if (significant[g] && corrected_weights.rows() > 0) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < corrected_weights.rows(); ++c)
        if (corrected_weights(c, static_cast<Eigen::Index>(g)) > corrected_weights(best, static_cast<Eigen::Index>(g))) best = c;
      out.label[g] = rows[static_cast<std::size_t>(best)].others ? kLabelOthers : static_cast<int>(best);
      out.weight[g] = corrected_weights(best, static_cast<Eigen::Index>(g));
    }
    ++out.counts[out.name(g, rows)];
  }
  return out;
}

/// voxel_id, label, weight, r, p
inline std::string assignment_tsv(const VoxelAssignment& a, const std::vector<FeatureRow>& rows, const Vector& r,
                                  const Vector& p) {
  std::string out = "voxel_id\tlabel\tweight\tr\tp\n";
  for (std::size_t g = 0; g < a.label.size(); ++g)
    out += std::to_string(g) + "\t" + a.name(g, rows) + "\t" + format_double(a.weight[g]) + "\t" +
           format_double(r[static_cast<Eigen::Index>(g)]) + "\t" + format_double(p[static_cast<Eigen::Index>(g)]) + "\n";
  return out;
}

}  // namespace subdim

#pragma once

// Disentangled continuous semantic representation model.
//
// A projection W maps embeddings V to X = V W. For every attribute b a
// multiplicative Gaussian noise with per-dimension variance alpha_b is applied
// to X, and three per-attribute heads (rating regression, contrastive,
// reconstruction) consume that noised view. Three parameter-only terms
// (orthogonality, KL sparsity, dropout alignment) complete the objective.
// All gradients are analytic; the noise is sampled once per batch and held
// fixed during differentiation.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "subdim/data_io.hpp"
#include "subdim/error.hpp"
#include "subdim/numerics.hpp"

namespace subdim {

inline constexpr double kLogAlphaMin = -10.0;
inline constexpr double kLogAlphaMax = 4.0;
inline constexpr double kDisEpsilon = 1e-6;
inline constexpr double kKlK1 = 0.63576;
inline constexpr double kKlK2 = 1.87320;
inline constexpr double kKlK3 = 1.48695;
inline constexpr double kDefaultDropoutThreshold = 0.4;

inline constexpr std::array<std::string_view, 6> kLossNames = {"ort", "sl", "ce", "rec", "kl", "dis"};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// ---------------------------------------------------------------------------
// Parameters

struct DcsrmParams {
  Matrix W;               // h x h
  Matrix log_alpha;       // N x h
  Matrix u;               // N x h, regression weights
  Vector c;               // N, regression intercepts
  std::vector<Matrix> A;  // N blocks of h x h, reconstruction maps
  Matrix d;               // N x h, reconstruction offsets

  Eigen::Index dim() const { return W.rows(); }
  Eigen::Index attributes() const { return log_alpha.rows(); }

  /// Same shapes, every entry zero; doubles as the gradient container.
  static DcsrmParams zeros(Eigen::Index h, Eigen::Index n) {
    DcsrmParams p;
    p.W = Matrix::Zero(h, h);
    p.log_alpha = Matrix::Zero(n, h);
    p.u = Matrix::Zero(n, h);
    p.c = Vector::Zero(n);
    p.A.assign(static_cast<std::size_t>(n), Matrix::Zero(h, h));
    p.d = Matrix::Zero(n, h);
    return p;
  }

  Eigen::Index parameter_count() const {
    const auto h = dim(), n = attributes();
    return h * h + 3 * n * h + n + n * h * h;
  }

  Matrix dropout_rates() const { return log_alpha.unaryExpr([](double l) { return sigmoid(l); }); }
};

inline void validate_params(const DcsrmParams& p) {
  const auto h = p.W.rows(), n = p.log_alpha.rows();
  if (h < 1 || p.W.cols() != h || p.log_alpha.cols() != h || p.u.rows() != n || p.u.cols() != h ||
      p.c.size() != n || static_cast<Eigen::Index>(p.A.size()) != n || p.d.rows() != n ||
      p.d.cols() != h)
    throw Error(Errc::shape_mismatch, "dcsrm params have inconsistent shapes");
  for (const auto& a : p.A)
    if (a.rows() != h || a.cols() != h)
      throw Error(Errc::shape_mismatch, "dcsrm reconstruction map is not h x h");
  require_finite(p.W, "W");
  require_finite(p.log_alpha, "log_alpha");
  require_finite(p.u, "u");
  require_finite(p.c, "c");
  for (const auto& a : p.A) require_finite(a, "A");
  require_finite(p.d, "d");
}

/// Flat order: W, log_alpha, u, c, A_0 .. A_{N-1}, d (each row-major).
inline Vector flatten(const DcsrmParams& p) {
  Vector out(p.parameter_count());
  Eigen::Index o = 0;
  auto put = [&](const auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[o++] = m(i, j);
  };
  put(p.W);
  put(p.log_alpha);
  put(p.u);
  put(p.c);
  for (const auto& a : p.A) put(a);
  put(p.d);
  return out;
}

/// Inverse of flatten; `p` supplies the shapes and receives the values.
inline void unflatten(const VectorCRef& flat, DcsrmParams& p) {
  require_same_length(flat.size(), p.parameter_count(), "unflatten");
  Eigen::Index o = 0;
  auto get = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = flat[o++];
  };
  get(p.W);
  get(p.log_alpha);
  get(p.u);
  get(p.c);
  for (auto& a : p.A) get(a);
  get(p.d);
}

inline void clamp_log_alpha(DcsrmParams& p) {
  p.log_alpha = p.log_alpha.cwiseMax(kLogAlphaMin).cwiseMin(kLogAlphaMax);
}

/// W = I + N(0, 0.01^2); log_alpha = 0; u, c, A ~ N(0, 1/h); d = 0.
inline DcsrmParams init_params(Eigen::Index h, Eigen::Index n, std::uint64_t seed) {
  if (h < 2) throw Error(Errc::validation, "init_params: h must be >= 2");
  if (n < 1) throw Error(Errc::validation, "init_params: N must be >= 1");
  Rng rng(mix_seed(seed, 0xd0));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double head_sd = 1.0 / std::sqrt(static_cast<double>(h));
  DcsrmParams p = DcsrmParams::zeros(h, n);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < h; ++j) p.W(i, j) = (i == j ? 1.0 : 0.0) + 0.01 * normal(rng);
  for (Eigen::Index b = 0; b < n; ++b)
    for (Eigen::Index j = 0; j < h; ++j) p.u(b, j) = head_sd * normal(rng);
  for (Eigen::Index b = 0; b < n; ++b) p.c[b] = head_sd * normal(rng);
  for (auto& a : p.A)
    for (Eigen::Index i = 0; i < h; ++i)
      for (Eigen::Index j = 0; j < h; ++j) a(i, j) = head_sd * normal(rng);
  return p;
}

// ---------------------------------------------------------------------------
// Configuration

struct LossWeights {
  double ort = 1.0;
  double sl = 1.0;
  double ce = 0.1;
  double rec = 0.01;
  double kl = 1.0;
  double dis = 1.0;

  double& operator[](std::string_view name) {
    if (name == "ort") return ort;
    if (name == "sl") return sl;
    if (name == "ce") return ce;
    if (name == "rec") return rec;
    if (name == "kl") return kl;
    if (name == "dis") return dis;
    throw Error(Errc::unknown_name, "unknown loss '" + std::string(name) + "' (expected ort, sl, ce, rec, kl, dis)");
  }
  double operator[](std::string_view name) const { return const_cast<LossWeights&>(*this)[name]; }

  static LossWeights all(double w) { return {w, w, w, w, w, w}; }
};

struct TrainConfig {
  LossWeights weights;
  double tau = 0.1;
  double positive_threshold = 4.0;
  double beta = 1.0;
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  std::uint64_t seed = 1;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool intercept_from_mean = true;  // start c_b at the mean rating
  bool ce_include_self = true;      // anchor appears in its own softmax
};

inline void validate_train_config(const TrainConfig& c) {
  for (auto name : kLossNames) {
    const double w = c.weights[name];
    if (!std::isfinite(w) || w < 0.0)
      throw Error(Errc::invalid_config, "loss weight '" + std::string(name) + "' must be finite and >= 0");
  }
  if (!(c.tau > 0.0)) throw Error(Errc::invalid_config, "tau must be > 0");
  if (!(c.positive_threshold > 1.0 && c.positive_threshold < 7.0))
    throw Error(Errc::invalid_config, "positive_threshold must lie in (1, 7)");
  if (!std::isfinite(c.beta)) throw Error(Errc::invalid_config, "beta must be finite");
  if (c.batch_size < 4) throw Error(Errc::invalid_config, "batch_size must be >= 4");
  if (c.epochs < 1) throw Error(Errc::invalid_config, "epochs must be >= 1");
  if (!(c.lr > 0.0)) throw Error(Errc::invalid_config, "lr must be > 0");
  if (!(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0))
    throw Error(Errc::invalid_config, "Adam betas must lie in (0, 1)");
  if (!(c.eps > 0.0)) throw Error(Errc::invalid_config, "Adam eps must be > 0");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json w;
  for (auto name : kLossNames) w[std::string(name)] = c.weights[name];
  return {{"loss_weights", w},
          {"tau", c.tau},
          {"positive_threshold", c.positive_threshold},
          {"beta", c.beta},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"intercept_from_mean", c.intercept_from_mean},
          {"ce_include_self", c.ce_include_self}};
}

/// Overlays `j` onto `base`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw Error(Errc::invalid_config, "train config must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "loss_weights") {
        if (!value.is_object()) throw Error(Errc::invalid_config, "loss_weights must be an object");
        for (const auto& [name, w] : value.items()) base.weights[name] = w.get<double>();
      } else if (key == "tau") base.tau = value.get<double>();
      else if (key == "positive_threshold") base.positive_threshold = value.get<double>();
      else if (key == "beta") base.beta = value.get<double>();
      else if (key == "epochs") base.epochs = value.get<std::size_t>();
      else if (key == "batch_size") base.batch_size = value.get<std::size_t>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "lr") base.lr = value.get<double>();
      else if (key == "beta1") base.beta1 = value.get<double>();
      else if (key == "beta2") base.beta2 = value.get<double>();
      else if (key == "eps") base.eps = value.get<double>();
      else if (key == "intercept_from_mean") base.intercept_from_mean = value.get<bool>();
      else if (key == "ce_include_self") base.ce_include_self = value.get<bool>();
      else throw Error(Errc::invalid_config, "unknown train config key '" + key + "'");
    }
  } catch (const Error& e) {
    if (e.code() == Errc::unknown_name) throw Error(Errc::invalid_config, e.what());
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_config, std::string("train config: ") + e.what());
  }
  validate_train_config(base);
  return base;
}

// ---------------------------------------------------------------------------
// Noise

/// Per-batch randomness, drawn once and then held fixed: one standard normal
/// matrix per attribute, and for every positive anchor the batch row of its
/// contrastive partner.
struct NoiseSample {
  std::vector<Matrix> eps;
  std::vector<std::vector<Eigen::Index>> partners;
};

inline std::vector<Eigen::Index> positive_rows(const VectorCRef& ratings, double threshold) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < ratings.size(); ++i)
    if (ratings[i] > threshold) rows.push_back(i);
  return rows;
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

/// Each positive gets a different positive, uniformly at random.
inline std::vector<Eigen::Index> sample_partners(const std::vector<Eigen::Index>& positives, Rng& rng) {
  std::vector<Eigen::Index> partners;
  if (positives.size() < 2) return partners;
  std::uniform_int_distribution<std::size_t> pick(0, positives.size() - 2);
  partners.reserve(positives.size());
  for (std::size_t a = 0; a < positives.size(); ++a) {
    std::size_t k = pick(rng);
    if (k >= a) ++k;
    partners.push_back(positives[k]);
  }
  return partners;
}

inline NoiseSample sample_noise(const Matrix& ratings, Eigen::Index h, double positive_threshold, Rng& rng) {
  NoiseSample s;
  for (Eigen::Index b = 0; b < ratings.cols(); ++b) {
    s.eps.push_back(standard_normal(ratings.rows(), h, rng));
    s.partners.push_back(sample_partners(positive_rows(ratings.col(b), positive_threshold), rng));
  }
  return s;
}

inline void check_attribute(const DcsrmParams& p, Eigen::Index b) {
  if (b < 0 || b >= p.attributes())
    throw Error(Errc::unknown_name, "attribute index " + std::to_string(b) + " out of range [0, " +
                                        std::to_string(p.attributes()) + ")");
}

/// X = V W scaled elementwise by 1 + sqrt(alpha_b[j]) * eps[i, j].
inline Matrix noised_view(const DcsrmParams& p, const Matrix& v_batch, Eigen::Index b, const Matrix& eps) {
  check_attribute(p, b);
  if (v_batch.cols() != p.dim())
    throw Error(Errc::shape_mismatch, "noised_view: batch has " + std::to_string(v_batch.cols()) +
                                          " columns, model has h = " + std::to_string(p.dim()));
  if (eps.rows() != v_batch.rows() || eps.cols() != p.dim())
    throw Error(Errc::shape_mismatch, "noised_view: noise shape differs from batch");
  Matrix x = v_batch * p.W;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double sd = std::sqrt(std::exp(p.log_alpha(b, j)));
    for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) *= 1.0 + sd * eps(i, j);
  }
  return x;
}

inline Matrix noised_view(const DcsrmParams& p, const Matrix& v_batch, Eigen::Index b, Rng& rng) {
  return noised_view(p, v_batch, b, standard_normal(v_batch.rows(), p.dim(), rng));
}

// ---------------------------------------------------------------------------
// Loss terms. Each returns the value; when `grad` is non-null it accumulates
// `weight` times the gradient into it.

inline double loss_ort(const DcsrmParams& p, DcsrmParams* grad = nullptr, double weight = 1.0) {
  const Matrix e = p.W.transpose() * p.W - Matrix::Identity(p.dim(), p.dim());
  const double norm = e.norm();
  if (grad && norm > 0.0) grad->W += (weight * 2.0 / norm) * (p.W * e);
  return norm;
}

/// Mean smooth-L1 between ratings and u.x + c over the batch.
inline double loss_sl(const Matrix& xn, const VectorCRef& u, double c, const VectorCRef& y,
                      Matrix* grad_x = nullptr, Vector* grad_u = nullptr, double* grad_c = nullptr,
                      double weight = 1.0) {
  require_same_length(xn.rows(), y.size(), "loss_sl batch/ratings");
  const auto n = xn.rows();
  const Vector pred = (xn * u).array() + c;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) total += smooth_l1_value(y[i] - pred[i]);
  const double scale = 1.0 / static_cast<double>(n);
  if (grad_x) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double g = -weight * scale * smooth_l1_slope(y[i] - pred[i]);
      grad_x->row(i) += g * u.transpose();
      if (grad_u) *grad_u += g * xn.row(i).transpose();
      if (grad_c) *grad_c += g;
    }
  }
  return total * scale;
}

struct CeValue {
  double value = 0.0;
  bool skipped = false;  // fewer than two positives in the batch
};

/// Contrastive cross-entropy over L2-normalised rows. Anchors are the rows in
/// `positives`; partners[a] is the batch row paired with positives[a]. The
/// softmax runs over the whole batch, the anchor itself included unless
/// `include_self` is false.
inline CeValue loss_ce(const Matrix& xn, const std::vector<Eigen::Index>& positives,
                       const std::vector<Eigen::Index>& partners, double tau,
                       Matrix* grad_x = nullptr, double weight = 1.0, bool include_self = true) {
  CeValue out;
  if (positives.size() < 2) {
    out.skipped = true;
    return out;
  }
  if (partners.size() != positives.size())
    throw Error(Errc::length_mismatch, "loss_ce: one partner per positive required");
  const auto n = xn.rows();
  Vector norms(n);
  Matrix z(n, xn.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    norms[i] = xn.row(i).norm();
    z.row(i) = norms[i] > 0.0 ? Matrix(xn.row(i) / norms[i]) : Matrix::Zero(1, xn.cols());
  }
  const auto m = static_cast<Eigen::Index>(positives.size());
  Matrix anchors(m, xn.cols());
  for (Eigen::Index a = 0; a < m; ++a) anchors.row(a) = z.row(positives[static_cast<std::size_t>(a)]);
  Matrix logits = (anchors * z.transpose()) / tau;  // m x n
  if (!include_self)
    for (Eigen::Index a = 0; a < m; ++a)
      logits(a, positives[static_cast<std::size_t>(a)]) = -std::numeric_limits<double>::infinity();

  Matrix probs(m, n);
  double total = 0.0;
  for (Eigen::Index a = 0; a < m; ++a) {
    const double mx = logits.row(a).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) sum += std::exp(logits(a, j) - mx);
    const double lse = mx + std::log(sum);
    total -= logits(a, partners[static_cast<std::size_t>(a)]) - lse;
    for (Eigen::Index j = 0; j < n; ++j) probs(a, j) = std::exp(logits(a, j) - lse);
  }
  out.value = total / static_cast<double>(m);

  if (grad_x) {
    Matrix dlogits = probs;
    for (Eigen::Index a = 0; a < m; ++a) dlogits(a, partners[static_cast<std::size_t>(a)]) -= 1.0;
    dlogits *= weight / (static_cast<double>(m) * tau);
    Matrix dz = dlogits.transpose() * anchors;  // targets
    const Matrix danchor = dlogits * z;
    for (Eigen::Index a = 0; a < m; ++a) dz.row(positives[static_cast<std::size_t>(a)]) += danchor.row(a);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(norms[i] > 0.0)) continue;
      const double along = z.row(i).dot(dz.row(i));
      grad_x->row(i) += (dz.row(i) - along * z.row(i)) / norms[i];
    }
  }
  return out;
}

struct RecValue {
  double value = 0.0;
  bool empty = false;  // no positives; contributes zero
};

/// Mean over positive rows of ||v - (A x + d)||^2.
inline RecValue loss_rec(const Matrix& xn, const Matrix& v_batch, const std::vector<Eigen::Index>& positives,
                         const Matrix& a_map, const VectorCRef& offset, Matrix* grad_x = nullptr,
                         Matrix* grad_a = nullptr, Vector* grad_d = nullptr, double weight = 1.0) {
  RecValue out;
  if (positives.empty()) {
    out.empty = true;
    return out;
  }
  const double scale = 1.0 / static_cast<double>(positives.size());
  double total = 0.0;
  for (const auto i : positives) {
    const Vector r = a_map * xn.row(i).transpose() + offset - v_batch.row(i).transpose();
    total += r.squaredNorm();
    if (grad_x) {
      const Vector g = (2.0 * weight * scale) * r;
      grad_x->row(i) += (a_map.transpose() * g).transpose();
      if (grad_a) *grad_a += g * xn.row(i);
      if (grad_d) *grad_d += g;
    }
  }
  out.value = total * scale;
  return out;
}

/// Variational-dropout KL approximation for one log alpha.
inline double kl_value(double l) {
  return kKlK1 - kKlK1 * sigmoid(kKlK2 + kKlK3 * l) + 0.5 * softplus(-l);
}

inline double kl_slope(double l) {
  const double s = sigmoid(kKlK2 + kKlK3 * l);
  return -kKlK1 * kKlK3 * s * (1.0 - s) - 0.5 * sigmoid(-l);
}

inline double loss_kl(const DcsrmParams& p, DcsrmParams* grad = nullptr, double weight = 1.0) {
  const double count = static_cast<double>(p.log_alpha.size());
  double total = 0.0;
  for (Eigen::Index b = 0; b < p.log_alpha.rows(); ++b)
    for (Eigen::Index j = 0; j < p.log_alpha.cols(); ++j) {
      const double l = p.log_alpha(b, j);
      total += kl_value(l);
      if (grad) grad->log_alpha(b, j) += weight * kl_slope(l) / count;
    }
  return total / count;
}

/// Keep probabilities P_b[j] = 1 - sigmoid(log_alpha[b, j]). Per dimension:
/// sum_b log max(P_b, eps) + beta (sum_b P_b - 1)^2; averaged over dimensions.
inline double loss_dis(const DcsrmParams& p, double beta, DcsrmParams* grad = nullptr, double weight = 1.0) {
  const auto n = p.log_alpha.rows(), h = p.log_alpha.cols();
  double total = 0.0;
  for (Eigen::Index j = 0; j < h; ++j) {
    double sum_p = 0.0, logs = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) {
      const double keep = sigmoid(-p.log_alpha(b, j));
      sum_p += keep;
      logs += std::log(std::max(keep, kDisEpsilon));
    }
    total += logs + beta * (sum_p - 1.0) * (sum_p - 1.0);
    if (grad) {
      for (Eigen::Index b = 0; b < n; ++b) {
        const double keep = sigmoid(-p.log_alpha(b, j));
        const double dkeep = -keep * (1.0 - keep);
        double dval = 2.0 * beta * (sum_p - 1.0);
        if (keep > kDisEpsilon) dval += 1.0 / keep;
        grad->log_alpha(b, j) += weight * dval * dkeep / static_cast<double>(h);
      }
    }
  }
  return total / static_cast<double>(h);
}

// ---------------------------------------------------------------------------
// Objective

struct LossTerms {
  double ort = 0.0, sl = 0.0, ce = 0.0, rec = 0.0, kl = 0.0, dis = 0.0;
  double total = 0.0;
  std::size_t ce_skipped = 0;  // attributes whose contrastive term was skipped
  std::size_t rec_empty = 0;   // attributes with no positives for reconstruction

  double& operator[](std::string_view name) {
    if (name == "ort") return ort;
    if (name == "sl") return sl;
    if (name == "ce") return ce;
    if (name == "rec") return rec;
    if (name == "kl") return kl;
    if (name == "dis") return dis;
    if (name == "total") return total;
    throw Error(Errc::unknown_name, "unknown loss term '" + std::string(name) + "'");
  }
  double operator[](std::string_view name) const { return const_cast<LossTerms&>(*this)[name]; }
};

struct LossAndGrad {
  LossTerms terms;
  DcsrmParams grad;
};

/// Deterministic objective for a fixed noise sample. sl, ce and rec are
/// summed over attributes; every attribute reads its own noised view.
inline LossTerms evaluate_objective(const DcsrmParams& p, const Matrix& v_batch, const Matrix& ratings,
                                    const TrainConfig& config, const NoiseSample& noise,
                                    DcsrmParams* grad = nullptr) {
  const auto h = p.dim(), n = p.attributes();
  if (v_batch.rows() < 1) throw Error(Errc::validation, "objective: empty batch");
  if (v_batch.cols() != h) throw Error(Errc::shape_mismatch, "objective: batch width differs from h");
  if (ratings.rows() != v_batch.rows() || ratings.cols() != n)
    throw Error(Errc::shape_mismatch, "objective: ratings shape differs from batch x N");
  if (static_cast<Eigen::Index>(noise.eps.size()) != n || static_cast<Eigen::Index>(noise.partners.size()) != n)
    throw Error(Errc::shape_mismatch, "objective: noise sample has wrong attribute count");
  const LossWeights& w = config.weights;

  LossTerms t;
  t.ort = loss_ort(p, grad, w.ort);
  t.kl = loss_kl(p, grad, w.kl);
  t.dis = loss_dis(p, config.beta, grad, w.dis);

  const Matrix x = v_batch * p.W;
  Matrix gx;
  if (grad) gx.resize(x.rows(), x.cols());
  for (Eigen::Index b = 0; b < n; ++b) {
    const Matrix& eps = noise.eps[static_cast<std::size_t>(b)];
    const Matrix xn = noised_view(p, v_batch, b, eps);
    const auto positives = positive_rows(ratings.col(b), config.positive_threshold);
    if (grad) gx.setZero();
    Matrix* gx_ptr = grad ? &gx : nullptr;

    Vector gu = Vector::Zero(h);
    double gc = 0.0;
    t.sl += loss_sl(xn, p.u.row(b).transpose(), p.c[b], ratings.col(b), gx_ptr, grad ? &gu : nullptr,
                    grad ? &gc : nullptr, w.sl);

    const CeValue ce = loss_ce(xn, positives, noise.partners[static_cast<std::size_t>(b)], config.tau, gx_ptr, w.ce,
                                config.ce_include_self);
    t.ce += ce.value;
    if (ce.skipped) ++t.ce_skipped;

    Vector gd = Vector::Zero(h);
    const RecValue rec = loss_rec(xn, v_batch, positives, p.A[static_cast<std::size_t>(b)], p.d.row(b).transpose(),
                                  gx_ptr, grad ? &grad->A[static_cast<std::size_t>(b)] : nullptr, grad ? &gd : nullptr, w.rec);
    t.rec += rec.value;
    if (rec.empty) ++t.rec_empty;

    if (grad) {
      grad->u.row(b) += gu.transpose();
      grad->c[b] += gc;
      grad->d.row(b) += gd.transpose();
      // Back through x * (1 + sqrt(alpha) eps).
      Matrix gx_clean(x.rows(), x.cols());
      for (Eigen::Index j = 0; j < h; ++j) {
        const double sd = std::sqrt(std::exp(p.log_alpha(b, j)));
        double dl = 0.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          gx_clean(i, j) = gx(i, j) * (1.0 + sd * eps(i, j));
          dl += gx(i, j) * x(i, j) * eps(i, j);
        }
        grad->log_alpha(b, j) += 0.5 * sd * dl;
      }
      grad->W.noalias() += v_batch.transpose() * gx_clean;
    }
  }

  t.total = w.ort * t.ort + w.sl * t.sl + w.ce * t.ce + w.rec * t.rec + w.kl * t.kl + w.dis * t.dis;
  for (auto name : kLossNames)
    if (!std::isfinite(t[name]))
      throw Error(Errc::divergence, "loss term '" + std::string(name) + "' is non-finite");
  return t;
}

/// Draws one noise sample from `rng`, then evaluates loss and gradient.
inline LossAndGrad total_loss_and_grad(const DcsrmParams& p, const Matrix& v_batch, const Matrix& ratings,
                                       const TrainConfig& config, Rng& rng) {
  const NoiseSample noise = sample_noise(ratings, p.dim(), config.positive_threshold, rng);
  LossAndGrad out{{}, DcsrmParams::zeros(p.dim(), p.attributes())};
  out.terms = evaluate_objective(p, v_batch, ratings, config, noise, &out.grad);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  LossTerms mean;  // per-batch average of every term
  std::size_t batches = 0;
};

struct TrainResult {
  DcsrmParams params;
  std::vector<EpochLog> log;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j = {{"epoch", e.epoch}, {"batches", e.batches}};
  for (auto name : kLossNames) j[std::string(name)] = e.mean[name];
  j["total"] = e.mean.total;
  j["ce_skipped"] = e.mean.ce_skipped;
  j["rec_empty"] = e.mean.rec_empty;
  return j;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

inline Matrix gather_cols(const Matrix& m, const std::vector<Eigen::Index>& cols) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
  return out;
}

/// Seeded-shuffle mini-batch Adam over the full objective. log_alpha is
/// clamped after every step. Deterministic for a given config.
inline TrainResult train(const CorpusBundle& bundle, const TrainConfig& config) {
  validate_corpus(bundle);
  validate_train_config(config);
  const auto m = bundle.words(), h = bundle.dim(), n = bundle.attributes();
  if (h < n) throw Error(Errc::validation, "train: embedding dim h must be >= attribute count N");

  TrainResult result;
  result.params = init_params(h, n, config.seed);
  if (config.intercept_from_mean) result.params.c = bundle.ratings.colwise().mean().transpose();

  Rng rng(mix_seed(config.seed, 0x7a));
  AdamState adam;
  adam.lr = config.lr;
  adam.beta1 = config.beta1;
  adam.beta2 = config.beta2;
  adam.eps = config.eps;
  Vector flat = flatten(result.params);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::vector<Eigen::Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));
      const Matrix vb = gather_rows(bundle.embeddings, rows);
      const Matrix yb = gather_rows(bundle.ratings, rows);
      LossAndGrad lg;
      try {
        lg = total_loss_and_grad(result.params, vb, yb, config, rng);
      } catch (const Error& e) {
        if (e.code() != Errc::divergence) throw;
        throw Error(Errc::divergence, "epoch " + std::to_string(epoch) + ", batch " +
                                          std::to_string(log.batches) + ": " + e.what());
      }
      const Vector g = flatten(lg.grad);
      if (!all_finite(g))
        throw Error(Errc::divergence, "epoch " + std::to_string(epoch) + ", batch " +
                                          std::to_string(log.batches) + ": non-finite gradient");
      adam_step(flat, g, adam);
      unflatten(flat, result.params);
      clamp_log_alpha(result.params);
      flat = flatten(result.params);

      for (auto name : kLossNames) log.mean[name] += lg.terms[name];
      log.mean.total += lg.terms.total;
      log.mean.ce_skipped += lg.terms.ce_skipped;
      log.mean.rec_empty += lg.terms.rec_empty;
      ++log.batches;
    }
    const double inv = 1.0 / static_cast<double>(log.batches);
    for (auto name : kLossNames) log.mean[name] *= inv;
    log.mean.total *= inv;
    result.log.push_back(log);
  }
  return result;
}

/// X = V W with the noise switched off.
inline Matrix project(const DcsrmParams& p, const Matrix& v) {
  if (v.cols() != p.dim()) throw Error(Errc::shape_mismatch, "project: width differs from h");
  return v * p.W;
}

// ---------------------------------------------------------------------------
// Partition

struct SubspacePartition {
  std::vector<std::vector<Eigen::Index>> dims;  // per attribute, ascending
  std::vector<Eigen::Index> unseen;             // in no attribute's set
  Matrix dropout_rates;                         // N x h
  double threshold = kDefaultDropoutThreshold;
  std::vector<std::size_t> empty_attributes;    // attributes with no dimensions
  std::size_t overlap = 0;                      // dimensions shared by 2+ attributes

  bool any_empty() const { return !empty_attributes.empty(); }
};

inline SubspacePartition extract_partition(const Matrix& log_alpha, double threshold = kDefaultDropoutThreshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw Error(Errc::validation, "extract_partition: threshold must lie in (0, 1)");
  SubspacePartition part;
  part.threshold = threshold;
  part.dropout_rates = log_alpha.unaryExpr([](double l) { return sigmoid(l); });
  const auto n = log_alpha.rows(), h = log_alpha.cols();
  part.dims.resize(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < h; ++j) {
    int members = 0;
    for (Eigen::Index b = 0; b < n; ++b)
      if (part.dropout_rates(b, j) < threshold) {
        part.dims[static_cast<std::size_t>(b)].push_back(j);
        ++members;
      }
    if (members == 0) part.unseen.push_back(j);
    if (members > 1) ++part.overlap;
  }
  for (std::size_t b = 0; b < part.dims.size(); ++b)
    if (part.dims[b].empty()) part.empty_attributes.push_back(b);
  return part;
}

inline SubspacePartition extract_partition(const DcsrmParams& p, double threshold = kDefaultDropoutThreshold) {
  return extract_partition(p.log_alpha, threshold);
}

inline nlohmann::json to_json(const SubspacePartition& part, const std::vector<std::string>& names) {
  nlohmann::json attrs = nlohmann::json::array();
  for (std::size_t b = 0; b < part.dims.size(); ++b)
    attrs.push_back({{"attribute", b < names.size() ? names[b] : std::to_string(b)},
                     {"dims", part.dims[b]},
                     {"empty", part.dims[b].empty()}});
  return {{"threshold", part.threshold},
          {"attributes", attrs},
          {"unseen", part.unseen},
          {"overlap", part.overlap},
          {"empty_attributes", part.empty_attributes}};
}

inline SubspacePartition partition_from_json(const nlohmann::json& j, const Matrix& dropout_rates) {
  SubspacePartition part;
  try {
    part.threshold = j.at("threshold").get<double>();
    for (const auto& a : j.at("attributes")) part.dims.push_back(a.at("dims").get<std::vector<Eigen::Index>>());
    part.unseen = j.at("unseen").get<std::vector<Eigen::Index>>();
    part.overlap = j.at("overlap").get<std::size_t>();
    part.empty_attributes = j.at("empty_attributes").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, std::string("partition JSON: ") + e.what());
  }
  part.dropout_rates = dropout_rates;
  return part;
}

// ---------------------------------------------------------------------------
// Persistence: a directory of SDM1 matrices plus model.json.

inline void save_params(const DcsrmParams& p, const fs::path& dir, const TrainConfig& config,
                        const std::vector<EpochLog>& log) {
  validate_params(p);
  fs::create_directories(dir);
  write_matrix(dir / "W.sdm", p.W);
  write_matrix(dir / "log_alpha.sdm", p.log_alpha);
  write_matrix(dir / "u.sdm", p.u);
  write_matrix(dir / "c.sdm", Matrix(p.c));
  for (std::size_t b = 0; b < p.A.size(); ++b) write_matrix(dir / ("A_" + std::to_string(b) + ".sdm"), p.A[b]);
  write_matrix(dir / "d.sdm", p.d);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : log) entries.push_back(to_json(e));
  write_json(dir / "model.json", {{"h", p.dim()},
                                  {"attributes", p.attributes()},
                                  {"seed", config.seed},
                                  {"config", to_json(config)},
                                  {"loss_log", entries}});
}

inline DcsrmParams load_params(const fs::path& dir) {
  if (!fs::exists(dir / "model.json"))
    throw Error(Errc::dependency_missing, "trained model not found: " + (dir / "model.json").string());
  const auto meta = read_json(dir / "model.json");
  DcsrmParams p;
  p.W = read_matrix(dir / "W.sdm");
  p.log_alpha = read_matrix(dir / "log_alpha.sdm");
  p.u = read_matrix(dir / "u.sdm");
  const Matrix c = read_matrix(dir / "c.sdm");
  p.c = Eigen::Map<const Vector>(c.data(), c.size());
  const auto n = meta.at("attributes").get<std::size_t>();
  for (std::size_t b = 0; b < n; ++b) p.A.push_back(read_matrix(dir / ("A_" + std::to_string(b) + ".sdm")));
  p.d = read_matrix(dir / "d.sdm");
  validate_params(p);
  return p;
}

}  // namespace subdim

#pragma once

// Finite-difference checks of the objective on small random instances.

#include <algorithm>
#include <cmath>
#include <string>

#include "subdim/dcsrm.hpp"

namespace subdim::testing {

struct GradInstance {
  DcsrmParams params;
  Matrix v;
  Matrix ratings;
  NoiseSample noise;
  TrainConfig config;
};

/// Random parameters, embeddings, ratings in [1, 7] and one fixed noise draw.
inline GradInstance make_grad_instance(std::uint64_t seed, Eigen::Index m = 12, Eigen::Index h = 8,
                                       Eigen::Index n = 3) {
  GradInstance g;
  Rng rng(mix_seed(seed, 0x61));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  g.params = init_params(h, n, seed);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < h; ++j) g.params.W(i, j) += 0.3 * normal(rng);
  for (Eigen::Index b = 0; b < n; ++b)
    for (Eigen::Index j = 0; j < h; ++j) {
      g.params.log_alpha(b, j) = -3.0 + 4.0 * unit(rng);
      g.params.d(b, j) = 0.2 * normal(rng);
    }
  g.params.c = (Vector::Ones(n) * 4.0).eval();
  g.v.resize(m, h);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < h; ++j) g.v(i, j) = normal(rng);
  g.ratings.resize(m, n);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index b = 0; b < n; ++b) g.ratings(i, b) = 1.0 + 6.0 * unit(rng);
  g.config.weights = LossWeights::all(1.0);
  g.noise = sample_noise(g.ratings, h, g.config.positive_threshold, rng);
  return g;
}

/// Weights that isolate one loss term, or all ones for "total".
inline LossWeights isolate(const std::string& term) {
  if (term == "total") return LossWeights::all(1.0);
  LossWeights w = LossWeights::all(0.0);
  w[term] = 1.0;
  return w;
}

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double max_relative_error(const Vector& analytic, const Vector& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

inline double gradient_error(const GradInstance& g, const std::string& term, double step = 1e-5) {
  TrainConfig config = g.config;
  config.weights = isolate(term);
  DcsrmParams grad = DcsrmParams::zeros(g.params.dim(), g.params.attributes());
  evaluate_objective(g.params, g.v, g.ratings, config, g.noise, &grad);
  DcsrmParams probe = g.params;
  const Vector numeric = finite_diff_grad(
      [&](const Vector& flat) {
        unflatten(flat, probe);
        return evaluate_objective(probe, g.v, g.ratings, config, g.noise).total;
      },
      flatten(g.params), step);
  return max_relative_error(flatten(grad), numeric);
}

}  // namespace subdim::testing

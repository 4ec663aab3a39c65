#pragma once

// Synthetic datasets with planted ground truth, the rating-prediction
// evaluation protocols (disentanglement, ablation and original-vs-projected
// tables), planted-block recovery scoring, and report emission.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/QR>
#include <json.hpp>

#include "subdim/data_io.hpp"
#include "subdim/dcsrm.hpp"
#include "subdim/encoding.hpp"
#include "subdim/error.hpp"
#include "subdim/manifest.hpp"
#include "subdim/numerics.hpp"
#include "subdim/subspace.hpp"

namespace subdim {

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  Eigen::Index M = 2000;
  Eigen::Index h = 48;
  Eigen::Index N = 3;
  Eigen::Index block_size = 8;
  double block_coherence = 0.5;  // share of each block latent carried by a common factor
  double rating_noise_sd = 0.2;
  double embed_noise_sd = 0.1;
  double bold_noise_sd = 1.0;    // signal columns have unit variance, so SNR = 1 / sd^2
  double nuisance_sd = 0.2;      // per-voxel sd of the nuisance contribution
  double noise_voxel_fraction = 0.4;
  double word_rate = 2.0;        // mean words per second
  std::size_t n_runs = 2;
  Eigen::Index n_volumes = 300;
  double tr = 2.0;
  Eigen::Index n_voxels = 50;
  std::size_t n_subjects = 6;
  std::uint64_t seed = 7;
};

inline void validate_spec(const SyntheticSpec& s) {
  auto fail = [](const std::string& what) { throw Error(Errc::invalid_config, "synthetic spec: " + what); };
  if (s.M < 8 || s.h < 1 || s.N < 1 || s.block_size < 1) fail("M >= 8 and h, N, block_size >= 1 required");
  if (s.N * s.block_size > s.h) fail("N * block_size must not exceed h");
  if (!(s.block_coherence >= 0.0 && s.block_coherence < 1.0)) fail("block_coherence must lie in [0, 1)");
  if (!(s.rating_noise_sd >= 0.0) || !(s.embed_noise_sd >= 0.0) || !(s.bold_noise_sd >= 0.0) || !(s.nuisance_sd >= 0.0))
    fail("noise sds must be >= 0");
  if (!(s.noise_voxel_fraction >= 0.0 && s.noise_voxel_fraction <= 1.0)) fail("noise_voxel_fraction must lie in [0, 1]");
  if (!(s.word_rate > 0.0)) fail("word_rate must be > 0");
  if (s.n_runs < 1 || s.n_volumes < 1 || s.n_voxels < 1 || s.n_subjects < 1) fail("run, volume, voxel and subject counts must be >= 1");
  if (!(s.tr > 0.0)) fail("tr must be > 0");
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"M", s.M},
          {"h", s.h},
          {"N", s.N},
          {"block_size", s.block_size},
          {"block_coherence", s.block_coherence},
          {"rating_noise_sd", s.rating_noise_sd},
          {"embed_noise_sd", s.embed_noise_sd},
          {"bold_noise_sd", s.bold_noise_sd},
          {"nuisance_sd", s.nuisance_sd},
          {"noise_voxel_fraction", s.noise_voxel_fraction},
          {"word_rate", s.word_rate},
          {"n_runs", s.n_runs},
          {"n_volumes", s.n_volumes},
          {"tr", s.tr},
          {"n_voxels", s.n_voxels},
          {"n_subjects", s.n_subjects},
          {"seed", s.seed}};
}

inline SyntheticSpec spec_from_json(const nlohmann::json& j, SyntheticSpec s = {}) {
  if (!j.is_object()) throw Error(Errc::invalid_config, "synthetic spec must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "M") s.M = v.get<Eigen::Index>();
      else if (key == "h") s.h = v.get<Eigen::Index>();
      else if (key == "N") s.N = v.get<Eigen::Index>();
      else if (key == "block_size") s.block_size = v.get<Eigen::Index>();
      else if (key == "block_coherence") s.block_coherence = v.get<double>();
      else if (key == "rating_noise_sd") s.rating_noise_sd = v.get<double>();
      else if (key == "embed_noise_sd") s.embed_noise_sd = v.get<double>();
      else if (key == "bold_noise_sd") s.bold_noise_sd = v.get<double>();
      else if (key == "nuisance_sd") s.nuisance_sd = v.get<double>();
      else if (key == "noise_voxel_fraction") s.noise_voxel_fraction = v.get<double>();
      else if (key == "word_rate") s.word_rate = v.get<double>();
      else if (key == "n_runs") s.n_runs = v.get<std::size_t>();
      else if (key == "n_volumes") s.n_volumes = v.get<Eigen::Index>();
      else if (key == "tr") s.tr = v.get<double>();
      else if (key == "n_voxels") s.n_voxels = v.get<Eigen::Index>();
      else if (key == "n_subjects") s.n_subjects = v.get<std::size_t>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else throw Error(Errc::invalid_config, "unknown synthetic spec key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_config, std::string("synthetic spec: ") + e.what());
  }
  validate_spec(s);
  return s;
}

inline constexpr int kNoiseVoxel = -1;

struct GroundTruth {
  Matrix true_mixing;                               // h x h orthogonal, V = Z Q + noise
  std::vector<std::vector<Eigen::Index>> planted_dims;  // per attribute, latent indices
  Matrix latent;                                    // Z, M x h
  Matrix word_scores;                               // M x N, planted subdimension per attribute
  std::vector<int> voxel_source;                    // attribute index or kNoiseVoxel
  std::size_t clipped = 0;                          // rating cells clipped into [1, 7]
  double clip_fraction = 0.0;
};

struct SyntheticDataset {
  CorpusBundle corpus;
  std::vector<std::vector<StimulusRun>> subjects;  // [subject][run]
  GroundTruth truth;
};

inline std::string attribute_name(std::size_t b) {
  static const std::array<const char*, 6> names = {"vision", "action", "social", "emotion", "time", "space"};
  return b < names.size() ? names[b] : "attr" + std::to_string(b);
}

namespace detail {

inline Matrix gaussian_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

inline Vector zscore(const VectorCRef& v) {
  const double mean = v.mean();
  const double sd = std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size()));
  if (!(sd > 0.0)) return Vector::Zero(v.size());
  return (v.array() - mean) / sd;
}

/// 14 slow drifts: each a sum of three low-frequency sinusoids, z-scored.
inline Matrix smooth_nuisance(Eigen::Index t, double tr, Rng& rng) {
  std::uniform_real_distribution<double> freq(0.002, 0.03), phase(0.0, 2.0 * std::numbers::pi);
  Matrix out(t, kNuisanceColumns);
  for (Eigen::Index c = 0; c < kNuisanceColumns; ++c) {
    Vector col = Vector::Zero(t);
    for (int k = 0; k < 3; ++k) {
      const double f = freq(rng), ph = phase(rng);
      for (Eigen::Index i = 0; i < t; ++i) col[i] += std::sin(2.0 * std::numbers::pi * f * (static_cast<double>(i) + 0.5) * tr + ph);
    }
    out.col(c) = zscore(col);
  }
  return out;
}

inline std::vector<WordEvent> random_timeline(const SyntheticSpec& s, Rng& rng) {
  std::uniform_int_distribution<std::size_t> word(0, static_cast<std::size_t>(s.M) - 1);
  std::exponential_distribution<double> gap(s.word_rate);
  const double duration = 0.3, end = s.tr * static_cast<double>(s.n_volumes);
  std::vector<WordEvent> events;
  double t = 0.5;
  while (t + duration <= end) {
    events.push_back({word(rng), t, duration});
    t += 1e-3 + gap(rng);
  }
  return events;
}

}  // namespace detail

/// Deterministic per spec. Independent random streams per component so that
/// changing one voxel or run count does not reshuffle the corpus.
inline SyntheticDataset synth_dataset(const SyntheticSpec& s) {
  validate_spec(s);
  SyntheticDataset out;
  auto& truth = out.truth;
  const Eigen::Index m = s.M, h = s.h, n = s.N, bs = s.block_size;

  Rng latent_rng(mix_seed(s.seed, 1));
  truth.latent = detail::gaussian_matrix(m, h, latent_rng);
  const double shared = std::sqrt(s.block_coherence), own = std::sqrt(1.0 - s.block_coherence);
  for (Eigen::Index b = 0; b < n; ++b) {
    const Matrix factor = detail::gaussian_matrix(m, 1, latent_rng);
    truth.planted_dims.emplace_back();
    for (Eigen::Index k = 0; k < bs; ++k) {
      const Eigen::Index col = b * bs + k;
      truth.latent.col(col) = shared * factor.col(0) + own * truth.latent.col(col);
      truth.planted_dims.back().push_back(col);
    }
  }

  Rng rating_rng(mix_seed(s.seed, 2));
  std::normal_distribution<double> rating_noise(0.0, 1.0);
  auto& corpus = out.corpus;
  corpus.ratings.resize(m, n);
  truth.word_scores.resize(m, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const Vector mean = truth.latent.middleCols(b * bs, bs).rowwise().mean();
    truth.word_scores.col(b) = detail::zscore(mean);
    const double lo = mean.minCoeff(), hi = mean.maxCoeff();
    for (Eigen::Index i = 0; i < m; ++i) {
      const double raw = kRatingMin + (kRatingMax - kRatingMin) * (mean[i] - lo) / (hi - lo) +
                         s.rating_noise_sd * rating_noise(rating_rng);
      const double clipped = std::clamp(raw, kRatingMin, kRatingMax);
      if (clipped != raw) ++truth.clipped;
      corpus.ratings(i, b) = clipped;
    }
    corpus.attribute_names.push_back(attribute_name(static_cast<std::size_t>(b)));
  }
  truth.clip_fraction = static_cast<double>(truth.clipped) / static_cast<double>(m * n);

  Rng mixing_rng(mix_seed(s.seed, 3));
  const Matrix g = detail::gaussian_matrix(h, h, mixing_rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(g)};
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < h; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);  // unique Haar-distributed factor
  truth.true_mixing = q;

  Rng embed_rng(mix_seed(s.seed, 4));
  corpus.embeddings = truth.latent * truth.true_mixing + s.embed_noise_sd * detail::gaussian_matrix(m, h, embed_rng);
  const int width = static_cast<int>(std::to_string(m - 1).size());
  for (Eigen::Index i = 0; i < m; ++i) {
    std::string id = std::to_string(i);
    corpus.vocabulary.push_back("w" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id);
  }

  Rng voxel_rng(mix_seed(s.seed, 5));
  const auto noise_voxels = static_cast<Eigen::Index>(std::llround(s.noise_voxel_fraction * static_cast<double>(s.n_voxels)));
  for (Eigen::Index v = 0; v < s.n_voxels; ++v)
    truth.voxel_source.push_back(v < s.n_voxels - noise_voxels ? static_cast<int>(v % n) : kNoiseVoxel);
  std::shuffle(truth.voxel_source.begin(), truth.voxel_source.end(), voxel_rng);

  // Stories are shared across subjects; drifts and noise are not.
  Rng story_rng(mix_seed(s.seed, 6));
  std::vector<std::vector<WordEvent>> stories;
  for (std::size_t r = 0; r < s.n_runs; ++r) stories.push_back(detail::random_timeline(s, story_rng));

  const Hrf hrf;
  std::vector<Matrix> story_features;
  for (const auto& story : stories) {
    StimulusRun shell;
    shell.words = story;
    shell.tr = s.tr;
    shell.n_volumes = s.n_volumes;
    story_features.push_back(build_features(shell, truth.word_scores, hrf).values);
  }

  for (std::size_t subj = 0; subj < s.n_subjects; ++subj) {
    Rng rng(mix_seed(s.seed, 100 + subj));
    std::vector<StimulusRun> runs;
    for (std::size_t r = 0; r < s.n_runs; ++r) {
      StimulusRun run;
      run.words = stories[r];
      run.tr = s.tr;
      run.n_volumes = s.n_volumes;
      run.nuisance = detail::smooth_nuisance(s.n_volumes, s.tr, rng);
      Matrix nuisance_w = detail::gaussian_matrix(kNuisanceColumns, s.n_voxels, rng);
      for (Eigen::Index v = 0; v < s.n_voxels; ++v) {
        const double sd = std::sqrt((run.nuisance * nuisance_w.col(v)).squaredNorm() / static_cast<double>(s.n_volumes));
        if (sd > 0.0) nuisance_w.col(v) *= s.nuisance_sd / sd;
      }
      run.bold = run.nuisance * nuisance_w + s.bold_noise_sd * detail::gaussian_matrix(s.n_volumes, s.n_voxels, rng);
      for (Eigen::Index v = 0; v < s.n_voxels; ++v) {
        const int src = truth.voxel_source[static_cast<std::size_t>(v)];
        if (src != kNoiseVoxel) run.bold.col(v) += story_features[r].col(src);
      }
      validate_run(run, "synthetic subject " + std::to_string(subj) + " run " + std::to_string(r));
      runs.push_back(std::move(run));
    }
    out.subjects.push_back(std::move(runs));
  }
  validate_corpus(corpus);
  return out;
}

inline nlohmann::json to_json(const GroundTruth& t, const std::vector<std::string>& names) {
  nlohmann::json planted = nlohmann::json::array();
  for (std::size_t b = 0; b < t.planted_dims.size(); ++b)
    planted.push_back({{"attribute", names.at(b)}, {"latent_dims", t.planted_dims[b]}});
  return {{"planted", planted}, {"voxel_source", t.voxel_source}, {"clipped", t.clipped}, {"clip_fraction", t.clip_fraction}};
}

inline void save_truth(const GroundTruth& t, const std::vector<std::string>& names, const fs::path& dir) {
  fs::create_directories(dir);
  write_matrix(dir / "mixing.sdm", t.true_mixing);
  write_matrix(dir / "latent.sdm", t.latent);
  write_matrix(dir / "word_scores.sdm", t.word_scores);
  write_json(dir / "truth.json", to_json(t, names));
}

inline GroundTruth load_truth(const fs::path& dir) {
  if (!fs::exists(dir / "truth.json"))
    throw Error(Errc::dependency_missing, "ground truth not found: " + (dir / "truth.json").string());
  GroundTruth t;
  const auto j = read_json(dir / "truth.json");
  try {
    for (const auto& p : j.at("planted")) t.planted_dims.push_back(p.at("latent_dims").get<std::vector<Eigen::Index>>());
    t.voxel_source = j.at("voxel_source").get<std::vector<int>>();
    t.clipped = j.at("clipped").get<std::size_t>();
    t.clip_fraction = j.at("clip_fraction").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, (dir / "truth.json").string() + ": " + e.what());
  }
  t.true_mixing = read_matrix(dir / "mixing.sdm");
  t.latent = read_matrix(dir / "latent.sdm");
  t.word_scores = read_matrix(dir / "word_scores.sdm");
  return t;
}

// ---------------------------------------------------------------------------
// Nested cross-validated ridge for rating prediction

struct CvConfig {
  std::size_t folds = 5;
  std::vector<double> lambda_grid = {1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4};
  std::uint64_t seed = 0;
};

inline void validate_cv(const CvConfig& c) {
  if (c.folds < 2) throw Error(Errc::invalid_config, "evaluation folds must be >= 2");
  if (c.lambda_grid.empty()) throw Error(Errc::invalid_config, "evaluation lambda_grid must not be empty");
  for (double l : c.lambda_grid)
    if (!(l > 0.0) || !std::isfinite(l)) throw Error(Errc::invalid_config, "evaluation lambda_grid entries must be finite and > 0");
}

namespace detail {

/// Shuffled (seeded) K-fold split of the positions in `rows`.
inline std::vector<Split> shuffled_folds(const std::vector<Eigen::Index>& rows, std::size_t k, Rng& rng) {
  if (rows.size() < k) throw Error(Errc::validation, "cannot cut " + std::to_string(rows.size()) + " samples into " + std::to_string(k) + " folds");
  std::vector<Eigen::Index> order = rows;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Split> out(k);
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) (i % k == f ? out[f].test : out[f].train).push_back(order[i]);
  for (auto& s : out) {
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
  }
  return out;
}

/// Ridge with an unpenalised intercept: features and targets are centred on
/// the training rows. Returns predictions for `test` rows, one column per
/// target, each target with its own lambda index from `choice`.
inline Matrix centred_ridge_predict(const Matrix& x, const Matrix& y, const std::vector<Eigen::Index>& train,
                                    const std::vector<Eigen::Index>& test, const std::vector<double>& lambdas) {
  Matrix xt = gather_rows(x, train);
  Matrix yt = gather_rows(y, train);
  const Eigen::RowVectorXd xm = xt.colwise().mean(), ym = yt.colwise().mean();
  xt.rowwise() -= xm;
  yt.rowwise() -= ym;
  const RidgeSystem sys(xt);
  Matrix xs = gather_rows(x, test);
  xs.rowwise() -= xm;
  Matrix out(static_cast<Eigen::Index>(test.size()), y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const Matrix w = sys.solve(yt.col(c), lambdas[static_cast<std::size_t>(c)]);
    out.col(c) = (xs * w).col(0).array() + ym[c];
  }
  return out;
}

}  // namespace detail

/// Out-of-fold predictions of every column of `y` from `x`. Lambda is chosen
/// per target and outer fold by mean inner-fold correlation.
inline Matrix nested_cv_predictions(const Matrix& x, const Matrix& y, const CvConfig& cfg) {
  validate_cv(cfg);
  require_same_length(x.rows(), y.rows(), "nested_cv rows");
  if (x.cols() < 1) throw Error(Errc::validation, "nested_cv: no feature columns");
  std::vector<Eigen::Index> all(static_cast<std::size_t>(x.rows()));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  Rng rng(mix_seed(cfg.seed, 0xcf));
  const auto outer = detail::shuffled_folds(all, cfg.folds, rng);
  Matrix pred = Matrix::Zero(y.rows(), y.cols());
  const auto grid_n = cfg.lambda_grid.size();
  for (const auto& split : outer) {
    std::vector<double> chosen(static_cast<std::size_t>(y.cols()), cfg.lambda_grid.front());
    if (grid_n > 1) {
      const auto inner = detail::shuffled_folds(split.train, cfg.folds, rng);
      Matrix score = Matrix::Zero(static_cast<Eigen::Index>(grid_n), y.cols());
      for (const auto& in : inner)
        for (std::size_t li = 0; li < grid_n; ++li) {
          const Matrix p = detail::centred_ridge_predict(
              x, y, in.train, in.test, std::vector<double>(static_cast<std::size_t>(y.cols()), cfg.lambda_grid[li]));
          const Matrix yt = gather_rows(y, in.test);
          for (Eigen::Index c = 0; c < y.cols(); ++c)
            score(static_cast<Eigen::Index>(li), c) += correlation_or_zero(p.col(c), yt.col(c));
        }
      for (Eigen::Index c = 0; c < y.cols(); ++c) {
        std::size_t best = 0;
        for (std::size_t li = 1; li < grid_n; ++li)
          if (score(static_cast<Eigen::Index>(li), c) > score(static_cast<Eigen::Index>(best), c)) best = li;
        chosen[static_cast<std::size_t>(c)] = cfg.lambda_grid[best];
      }
    }
    const Matrix p = detail::centred_ridge_predict(x, y, split.train, split.test, chosen);
    for (std::size_t i = 0; i < split.test.size(); ++i) pred.row(split.test[i]) = p.row(static_cast<Eigen::Index>(i));
  }
  return pred;
}

/// Per target: correlation of out-of-fold predictions with the target.
inline Vector nested_cv_r(const Matrix& x, const Matrix& y, const CvConfig& cfg) {
  const Matrix pred = nested_cv_predictions(x, y, cfg);
  Vector r(y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) r[c] = correlation_or_zero(pred.col(c), y.col(c));
  return r;
}

// ---------------------------------------------------------------------------
// Disentanglement tables

struct AttributeRow {
  std::string attribute;
  bool present = false;       // false when the sub-embedding is empty
  double target_r = 0.0;
  double non_target_r = 0.0;  // mean over the other attributes
  std::vector<double> r;      // prediction r for every attribute's ratings
};

struct DisentanglementTable {
  std::vector<AttributeRow> rows;
  double average_target = 0.0;      // over present rows
  double average_non_target = 0.0;

  std::size_t present() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.present; }));
  }
};

inline void finish_table(DisentanglementTable& t) {
  const double n = static_cast<double>(t.present());
  t.average_target = t.average_non_target = 0.0;
  if (n == 0.0) return;
  for (const auto& r : t.rows)
    if (r.present) {
      t.average_target += r.target_r / n;
      t.average_non_target += r.non_target_r / n;
    }
}

/// For each attribute's columns of `x`: predict every attribute's ratings.
inline DisentanglementTable semantic_prediction_eval(const Matrix& x, const Matrix& ratings,
                                                     const std::vector<std::vector<Eigen::Index>>& dims,
                                                     const std::vector<std::string>& names, const CvConfig& cfg = {}) {
  validate_cv(cfg);
  require_same_length(x.rows(), ratings.rows(), "semantic_prediction_eval rows");
  if (static_cast<Eigen::Index>(dims.size()) != ratings.cols() || names.size() != dims.size())
    throw Error(Errc::shape_mismatch, "semantic_prediction_eval: need one column set and one name per attribute");
  DisentanglementTable t;
  const auto n = static_cast<std::size_t>(ratings.cols());
  for (std::size_t b = 0; b < n; ++b) {
    AttributeRow row;
    row.attribute = names[b];
    if (!dims[b].empty()) {
      const Vector r = nested_cv_r(gather_cols(x, dims[b]), ratings, cfg);
      row.present = true;
      row.r.assign(r.data(), r.data() + r.size());
      row.target_r = r[static_cast<Eigen::Index>(b)];
      for (std::size_t o = 0; o < n; ++o)
        if (o != b) row.non_target_r += r[static_cast<Eigen::Index>(o)] / static_cast<double>(n - 1);
    }
    t.rows.push_back(std::move(row));
  }
  finish_table(t);
  return t;
}

inline nlohmann::json to_json(const DisentanglementTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"attribute", r.attribute}, {"present", r.present}, {"target_r", r.target_r},
                    {"non_target_r", r.non_target_r}, {"r", r.r}});
  return {{"rows", rows}, {"average_target", t.average_target}, {"average_non_target", t.average_non_target}};
}

inline DisentanglementTable table_from_json(const nlohmann::json& j) {
  DisentanglementTable t;
  try {
    for (const auto& r : j.at("rows"))
      t.rows.push_back({r.at("attribute").get<std::string>(), r.at("present").get<bool>(), r.at("target_r").get<double>(),
                        r.at("non_target_r").get<double>(), r.at("r").get<std::vector<double>>()});
    t.average_target = j.at("average_target").get<double>();
    t.average_non_target = j.at("average_non_target").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, std::string("disentanglement table JSON: ") + e.what());
  }
  return t;
}

struct OriginRow {
  std::string attribute;
  double r_origin = 0.0;
  double r_disentangled = 0.0;
};

/// Rating prediction from all of V versus all of X = V W.
inline std::vector<OriginRow> origin_vs_disentangled(const CorpusBundle& bundle, const DcsrmParams& params,
                                                     const CvConfig& cfg = {}) {
  const Vector ro = nested_cv_r(bundle.embeddings, bundle.ratings, cfg);
  const Vector rd = nested_cv_r(project(params, bundle.embeddings), bundle.ratings, cfg);
  std::vector<OriginRow> rows;
  for (Eigen::Index b = 0; b < bundle.attributes(); ++b)
    rows.push_back({bundle.attribute_names[static_cast<std::size_t>(b)], ro[b], rd[b]});
  return rows;
}

inline nlohmann::json to_json(const std::vector<OriginRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"attribute", r.attribute}, {"r_origin", r.r_origin}, {"r_disentangled", r.r_disentangled}});
  return out;
}

inline std::vector<OriginRow> origin_rows_from_json(const nlohmann::json& j) {
  std::vector<OriginRow> rows;
  try {
    for (const auto& r : j)
      rows.push_back({r.at("attribute").get<std::string>(), r.at("r_origin").get<double>(), r.at("r_disentangled").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, std::string("origin table JSON: ") + e.what());
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Planted-block recovery

struct RecoveryScore {
  std::vector<std::vector<Eigen::Index>> matched;  // per attribute, latent indices
  std::vector<double> precision, recall, f1;
  double micro_f1 = 0.0;
};

/// Learned column j of X stands for latent k when |corr(X_j, Z_k)| >= corr_threshold;
/// an attribute's predicted latent set is the union over its partition dims.
inline RecoveryScore recovery_f1(const Matrix& x, const GroundTruth& truth, const SubspacePartition& part,
                                 double corr_threshold = 0.5) {
  require_same_length(x.rows(), truth.latent.rows(), "recovery_f1 rows");
  if (part.dims.size() != truth.planted_dims.size())
    throw Error(Errc::shape_mismatch, "recovery_f1: partition and ground truth attribute counts differ");
  RecoveryScore s;
  std::size_t tp_all = 0, fp_all = 0, fn_all = 0;
  for (std::size_t b = 0; b < part.dims.size(); ++b) {
    std::set<Eigen::Index> got;
    for (const auto j : part.dims[b])
      for (Eigen::Index k = 0; k < truth.latent.cols(); ++k)
        if (std::abs(correlation_or_zero(x.col(j), truth.latent.col(k))) >= corr_threshold) got.insert(k);
    const std::set<Eigen::Index> want(truth.planted_dims[b].begin(), truth.planted_dims[b].end());
    std::size_t tp = 0;
    for (const auto k : got) tp += want.count(k);
    const std::size_t fp = got.size() - tp, fn = want.size() - tp;
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
    const double p = got.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(got.size());
    const double r = want.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(want.size());
    s.matched.emplace_back(got.begin(), got.end());
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0);
  }
  const double denom = 2.0 * static_cast<double>(tp_all) + static_cast<double>(fp_all + fn_all);
  s.micro_f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp_all) / denom : 0.0;
  return s;
}

inline nlohmann::json to_json(const RecoveryScore& s) {
  return {{"matched", s.matched}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"micro_f1", s.micro_f1}};
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationEntry {
  std::string name;     // "full" or "without_<loss>"
  std::string dropped;  // empty for the full model
  SubspacePartition partition;
  DisentanglementTable table;
};

/// Full model plus one retraining per dropped loss, all with the same seed.
/// Retrainings are independent and run on up to `workers` threads.
inline std::vector<AblationEntry> ablation_suite(const CorpusBundle& bundle, const TrainConfig& config,
                                                 const std::vector<std::string>& drop, double threshold = kDefaultDropoutThreshold,
                                                 const CvConfig& cv = {}, std::size_t workers = 1) {
  std::vector<AblationEntry> entries(drop.size() + 1);
  std::vector<TrainConfig> configs(drop.size() + 1, config);
  entries[0].name = "full";
  for (std::size_t i = 0; i < drop.size(); ++i) {
    configs[i + 1].weights[drop[i]] = 0.0;  // throws unknown_name before any training
    entries[i + 1].name = "without_" + drop[i];
    entries[i + 1].dropped = drop[i];
  }
  validate_cv(cv);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(entries.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      try {
        const auto res = train(bundle, configs[i]);
        entries[i].partition = extract_partition(res.params, threshold);
        entries[i].table = semantic_prediction_eval(project(res.params, bundle.embeddings), bundle.ratings,
                                                    entries[i].partition.dims, bundle.attribute_names, cv);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(workers, 1, entries.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return entries;
}

// ---------------------------------------------------------------------------
// Report

struct ReportInputs {
  std::vector<std::string> attributes;
  std::optional<DisentanglementTable> table1;
  std::vector<std::pair<std::string, DisentanglementTable>> table2;
  std::vector<OriginRow> table_a1;
  std::vector<TransformedSubspace> subspaces;        // r / POC alignment per component
  std::optional<std::string> voxel_assignment_tsv;   // voxel_id, label, weight, r, p
  std::optional<GroupMap> group_map;
  nlohmann::json summary = nlohmann::json::object();  // extra fields merged into summary.json
};

namespace detail {

inline std::string csv_value(const AttributeRow& r, bool target) {
  if (!r.present) return "NA";
  return format_double(target ? r.target_r : r.non_target_r);
}

inline std::string table_header(const std::vector<std::string>& attributes) {
  std::string h = "model";
  for (const auto& a : attributes) h += "," + a + "_target," + a + "_non_target";
  return h + ",average_target,average_non_target\n";
}

inline std::string table_line(const std::string& model, const DisentanglementTable& t) {
  std::string line = model;
  for (const auto& r : t.rows) line += "," + csv_value(r, true) + "," + csv_value(r, false);
  if (t.present() == 0) return line + ",NA,NA\n";
  return line + "," + format_double(t.average_target) + "," + format_double(t.average_non_target) + "\n";
}

}  // namespace detail

/// Writes the report files into `out_dir` and returns their paths (sorted).
/// Output depends only on the inputs, so identical inputs give identical bytes.
inline std::vector<fs::path> emit_report(const ReportInputs& in, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw Error(Errc::io, "report: cannot create output directory " + out_dir.string());
  std::vector<fs::path> files;
  auto put = [&](const std::string& name, const std::string& bytes) {
    write_file_bytes(out_dir / name, bytes);
    files.push_back(out_dir / name);
  };
  nlohmann::json summary = {{"attributes", in.attributes}};

  if (in.table1) {
    put("table1.csv", detail::table_header(in.attributes) + detail::table_line("dcsrm", *in.table1));
    summary["table1"] = to_json(*in.table1);
  }
  if (!in.table2.empty()) {
    std::string csv = detail::table_header(in.attributes);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [name, t] : in.table2) {
      csv += detail::table_line(name, t);
      j.push_back({{"model", name}, {"table", to_json(t)}});
    }
    put("table2.csv", csv);
    summary["table2"] = j;
  }
  if (!in.table_a1.empty()) {
    std::string csv = "attribute,origin,disentangled\n";
    double ao = 0.0, ad = 0.0;
    for (const auto& r : in.table_a1) {
      csv += r.attribute + "," + format_double(r.r_origin) + "," + format_double(r.r_disentangled) + "\n";
      ao += r.r_origin / static_cast<double>(in.table_a1.size());
      ad += r.r_disentangled / static_cast<double>(in.table_a1.size());
    }
    csv += "average," + format_double(ao) + "," + format_double(ad) + "\n";
    put("table_a1.csv", csv);
    summary["table_a1"] = to_json(in.table_a1);
  }
  if (!in.subspaces.empty()) {
    std::string tsv = "attribute\tcomponent\tr\tp\tpoc\tstatus\tsign\texplained_variance\n";
    for (const auto& s : in.subspaces)
      for (std::size_t c = 0; c < s.size(); ++c) {
        const auto& st = s.components[c];
        tsv += s.attribute + "\t" + std::to_string(c) + "\t" + format_double(st.corr.r) + "\t" + format_double(st.corr.p) +
               "\t" + format_double(st.poc) + "\t" + std::string(to_string(st.status)) + "\t" + std::to_string(st.sign) +
               "\t" + format_double(s.pca.explained_variance[static_cast<Eigen::Index>(c)]) + "\n";
      }
    put("figure_a2_alignment.tsv", tsv);
    const auto screening = summarize_screening(in.subspaces);
    summary["screening"] = {{"components", screening.components},
                            {"excluded", screening.excluded},
                            {"excluded_fraction", screening.excluded_fraction()}};
  }
  if (in.voxel_assignment_tsv) put("voxel_map_assignment.tsv", *in.voxel_assignment_tsv);
  if (in.group_map) {
    const auto& g = *in.group_map;
    std::string tsv = "voxel_id\tt\tneg_log10_p\tsignificant\n";
    for (Eigen::Index v = 0; v < g.t.size(); ++v)
      tsv += std::to_string(v) + "\t" + format_double(g.t[v]) + "\t" + format_double(g.neg_log10_p[v]) + "\t" +
             (g.significant[static_cast<std::size_t>(v)] ? "1" : "0") + "\n";
    put("voxel_map_group.tsv", tsv);
    summary["group"] = {{"threshold", g.threshold}, {"significant", g.count()}, {"zero_variance", g.zero_variance}};
  }
  for (const auto& [k, v] : in.summary.items()) summary[k] = v;
  put("summary.json", summary.dump(2) + "\n");
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace subdim

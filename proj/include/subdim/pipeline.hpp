#pragma once

// Staged pipeline over an output directory: synth, reduce, train, partition,
// analyze, encode, evaluate, ablate, report. Every stage reads the artifacts
// of earlier stages, writes into its own subdirectory and leaves a manifest
// with input hashes, output hashes and the full configuration.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "subdim/data_io.hpp"
#include "subdim/dcsrm.hpp"
#include "subdim/encoding.hpp"
#include "subdim/error.hpp"
#include "subdim/harness.hpp"
#include "subdim/manifest.hpp"
#include "subdim/subspace.hpp"

namespace subdim {

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  std::string corpus_dir;  // empty: use the synth stage output
  std::string runs_dir;    // empty: use the synth stage output
  std::string out_dir = "out";
  double tr = 2.0;         // TR of external runs, seconds

  std::uint64_t data_seed = 7;
  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 0;
  std::uint64_t null_seed = 0;
  std::uint64_t poc_seed = 0;

  SyntheticSpec synthetic;
  TrainConfig train;
  double dropout_threshold = kDefaultDropoutThreshold;
  double screen_p = 0.05;
  double screen_r = 0.1;
  double group_p = 0.001;
  bool reduce = true;
  double variance_ratio = 0.8;
  std::size_t max_components = 10;
  HrfSpec hrf;
  EncodingConfig encoding;
  CvConfig evaluation;
  std::size_t top_k = 20;
  std::vector<std::string> ablation_drop = {"ort", "sl", "ce", "rec", "kl", "dis"};

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s = synthetic;
    s.seed = data_seed;
    return s;
  }
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = train_seed;
    return t;
  }
  ScreeningConfig screening() const {
    ScreeningConfig s;
    s.p_threshold = screen_p;
    s.r_threshold = screen_r;
    s.max_components = max_components;
    s.poc_seed = poc_seed;
    return s;
  }
  EncodingConfig encoding_config(std::size_t workers) const {
    EncodingConfig e = encoding;
    e.null_seed = null_seed;
    e.workers = workers;
    return e;
  }
  CvConfig cv() const {
    CvConfig c = evaluation;
    c.seed = eval_seed;
    return c;
  }
};

inline nlohmann::json to_json(const HrfSpec& s) {
  return {{"peak_delay", s.peak_delay},         {"undershoot_delay", s.undershoot_delay},
          {"peak_dispersion", s.peak_dispersion}, {"undershoot_dispersion", s.undershoot_dispersion},
          {"undershoot_ratio", s.undershoot_ratio}, {"duration", s.duration}};
}

/// Configuration echo. The output directory is left out: it does not
/// influence any artifact, and runs into different directories must match.
inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json synthetic = to_json(c.synthetic);
  synthetic.erase("seed");
  nlohmann::json train = to_json(c.train);
  train.erase("seed");
  return {{"paths", {{"corpus", c.corpus_dir}, {"runs", c.runs_dir}}},
          {"tr", c.tr},
          {"seeds", {{"data", c.data_seed}, {"train", c.train_seed}, {"eval", c.eval_seed}, {"null", c.null_seed}, {"poc", c.poc_seed}}},
          {"synthetic", synthetic},
          {"train", train},
          {"thresholds", {{"dropout", c.dropout_threshold}, {"screen_p", c.screen_p}, {"screen_r", c.screen_r}, {"group_p", c.group_p}}},
          {"pca", {{"reduce", c.reduce}, {"variance_ratio", c.variance_ratio}, {"max_components", c.max_components}}},
          {"hrf", to_json(c.hrf)},
          {"encoding",
           {{"folds", c.encoding.folds},
            {"inner_folds", c.encoding.inner_folds},
            {"lambda_grid", c.encoding.lambda_grid},
            {"null_samples", c.encoding.null_samples}}},
          {"evaluation", {{"folds", c.evaluation.folds}, {"lambda_grid", c.evaluation.lambda_grid}, {"top_k", c.top_k}}},
          {"ablation", {{"drop", c.ablation_drop}}}};
}

namespace detail {

template <typename F>
void each_key(const nlohmann::json& j, const std::string& section, F&& f) {
  if (!j.is_object()) throw Error(Errc::invalid_config, "config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!f(key, value)) throw Error(Errc::invalid_config, "unknown config key '" + section + "." + key + "'");
  }
}

inline void check_range(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::invalid_config, what);
}

}  // namespace detail

inline void validate_pipeline_config(const PipelineConfig& c) {
  using detail::check_range;
  validate_spec(c.synthetic_spec());
  validate_train_config(c.train_config());
  validate_screening(c.screening());
  validate_encoding_config(c.encoding_config(1));
  validate_cv(c.cv());
  validate_hrf(c.hrf);
  check_range(c.dropout_threshold > 0.0 && c.dropout_threshold < 1.0, "thresholds.dropout must lie in (0, 1)");
  check_range(c.group_p > 0.0 && c.group_p < 1.0, "thresholds.group_p must lie in (0, 1)");
  check_range(c.variance_ratio > 0.0 && c.variance_ratio <= 1.0, "pca.variance_ratio must lie in (0, 1]");
  check_range(c.tr > 0.0 && std::isfinite(c.tr), "tr must be > 0");
  check_range(c.top_k >= 1, "evaluation.top_k must be >= 1");
  check_range(!c.out_dir.empty(), "paths.out_dir must not be empty");
  for (const auto& name : c.ablation_drop) {
    LossWeights w;
    try {
      w[name];
    } catch (const Error& e) {
      throw Error(Errc::invalid_config, std::string("ablation.drop: ") + e.what());
    }
  }
  const std::vector<std::string> paths = {c.corpus_dir, c.runs_dir, c.out_dir};
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t k = i + 1; k < paths.size(); ++k)
      if (!paths[i].empty() && !paths[k].empty() && fs::weakly_canonical(paths[i]) == fs::weakly_canonical(paths[k]))
        throw Error(Errc::invalid_config, "paths must be distinct: '" + paths[i] + "' is used twice");
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    detail::each_key(j, "config", [&](const std::string& key, const nlohmann::json& v) {
      if (key == "paths") {
        detail::each_key(v, "paths", [&](const std::string& k, const nlohmann::json& p) {
          if (k == "corpus") c.corpus_dir = p.get<std::string>();
          else if (k == "runs") c.runs_dir = p.get<std::string>();
          else if (k == "out_dir") c.out_dir = p.get<std::string>();
          else return false;
          return true;
        });
      } else if (key == "tr") {
        c.tr = v.get<double>();
      } else if (key == "seeds") {
        detail::each_key(v, "seeds", [&](const std::string& k, const nlohmann::json& s) {
          if (k == "data") c.data_seed = s.get<std::uint64_t>();
          else if (k == "train") c.train_seed = s.get<std::uint64_t>();
          else if (k == "eval") c.eval_seed = s.get<std::uint64_t>();
          else if (k == "null") c.null_seed = s.get<std::uint64_t>();
          else if (k == "poc") c.poc_seed = s.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (key == "synthetic") {
        if (v.contains("seed")) throw Error(Errc::invalid_config, "synthetic.seed is not a config key; use seeds.data");
        c.synthetic = spec_from_json(v, c.synthetic);
      } else if (key == "train") {
        if (v.contains("seed")) throw Error(Errc::invalid_config, "train.seed is not a config key; use seeds.train");
        c.train = train_config_from_json(v, c.train);
      } else if (key == "thresholds") {
        detail::each_key(v, "thresholds", [&](const std::string& k, const nlohmann::json& t) {
          if (k == "dropout") c.dropout_threshold = t.get<double>();
          else if (k == "screen_p") c.screen_p = t.get<double>();
          else if (k == "screen_r") c.screen_r = t.get<double>();
          else if (k == "group_p") c.group_p = t.get<double>();
          else return false;
          return true;
        });
      } else if (key == "pca") {
        detail::each_key(v, "pca", [&](const std::string& k, const nlohmann::json& t) {
          if (k == "reduce") c.reduce = t.get<bool>();
          else if (k == "variance_ratio") c.variance_ratio = t.get<double>();
          else if (k == "max_components") c.max_components = t.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (key == "hrf") {
        detail::each_key(v, "hrf", [&](const std::string& k, const nlohmann::json& t) {
          if (k == "peak_delay") c.hrf.peak_delay = t.get<double>();
          else if (k == "undershoot_delay") c.hrf.undershoot_delay = t.get<double>();
          else if (k == "peak_dispersion") c.hrf.peak_dispersion = t.get<double>();
          else if (k == "undershoot_dispersion") c.hrf.undershoot_dispersion = t.get<double>();
          else if (k == "undershoot_ratio") c.hrf.undershoot_ratio = t.get<double>();
          else if (k == "duration") c.hrf.duration = t.get<double>();
          else return false;
          return true;
        });
      } else if (key == "encoding") {
        detail::each_key(v, "encoding", [&](const std::string& k, const nlohmann::json& t) {
          if (k == "folds") c.encoding.folds = t.get<std::size_t>();
          else if (k == "inner_folds") c.encoding.inner_folds = t.get<std::size_t>();
          else if (k == "lambda_grid") c.encoding.lambda_grid = t.get<std::vector<double>>();
          else if (k == "null_samples") c.encoding.null_samples = t.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (key == "evaluation") {
        detail::each_key(v, "evaluation", [&](const std::string& k, const nlohmann::json& t) {
          if (k == "folds") c.evaluation.folds = t.get<std::size_t>();
          else if (k == "lambda_grid") c.evaluation.lambda_grid = t.get<std::vector<double>>();
          else if (k == "top_k") c.top_k = t.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (key == "ablation") {
        detail::each_key(v, "ablation", [&](const std::string& k, const nlohmann::json& t) {
          if (k == "drop") c.ablation_drop = t.get<std::vector<std::string>>();
          else return false;
          return true;
        });
      } else {
        return false;
      }
      return true;
    });
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_config, std::string("config: ") + e.what());
  }
  validate_pipeline_config(c);
  return c;
}

/// Applies `key=value` where key is a dotted path; value is read as JSON
/// when it parses, otherwise as a string.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(Errc::invalid_config, "--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(Errc::invalid_config, "--set: malformed key '" + key + "'");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Stage plumbing

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"synth",    "reduce",   "train",  "partition", "analyze",
                                                 "encode",   "evaluate", "ablate", "report"};
  return names;
}

struct StageContext {
  PipelineConfig config;
  std::size_t workers = 1;
  std::ostream* log = &std::cerr;

  fs::path out() const { return config.out_dir; }
  fs::path dir(const std::string& stage) const { return out() / stage; }
};

class Stage {
 public:
  Stage(const StageContext& ctx, std::string name) : ctx_(ctx), name_(std::move(name)), dir_(ctx.dir(name_)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }

  /// Marks `path` as consumed; it must exist or the stage cannot run.
  const fs::path& input(const fs::path& path, const std::string& producer = {}) {
    if (!fs::exists(path)) {
      std::string msg = "missing artifact " + path.string();
      if (!producer.empty()) msg += " (run '" + producer + "' first)";
      throw Error(Errc::dependency_missing, msg);
    }
    if (fs::is_directory(path)) {
      for (const auto& entry : fs::recursive_directory_iterator(path))
        if (entry.is_regular_file()) inputs_.push_back(entry.path());
    } else {
      inputs_.push_back(path);
    }
    return path;
  }

  void finish(const nlohmann::json& extra = nlohmann::json::object()) {
    std::sort(inputs_.begin(), inputs_.end());
    inputs_.erase(std::unique(inputs_.begin(), inputs_.end()), inputs_.end());
    nlohmann::json in = nlohmann::json::array();
    for (const auto& p : inputs_) in.push_back({{"path", display(p)}, {"sha256", sha256_file(p)}});
    nlohmann::json m = {{"stage", name_},
                        {"seeds", to_json(ctx_.config).at("seeds")},
                        {"config", to_json(ctx_.config)},
                        {"inputs", in},
                        {"outputs", directory_manifest(dir_, {"manifest.json"})}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    write_json(dir_ / "manifest.json", m);
    *ctx_.log << "[" << name_ << "] done: " << m.at("outputs").size() << " files\n";
  }

 private:
  std::string display(const fs::path& p) const {
    const auto rel = fs::relative(p, ctx_.out());
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.generic_string();
  }

  const StageContext& ctx_;
  std::string name_;
  fs::path dir_;
  std::vector<fs::path> inputs_;
};

struct CorpusPaths {
  fs::path vocabulary, embeddings, ratings;
};

inline CorpusPaths corpus_paths(const fs::path& dir) {
  return {dir / "vocabulary.txt", dir / "embeddings.sdm", dir / "ratings.tsv"};
}

inline CorpusBundle load_corpus_dir(Stage& st, const fs::path& dir, const std::string& producer) {
  const auto p = corpus_paths(dir);
  st.input(p.vocabulary, producer);
  st.input(p.embeddings, producer);
  st.input(p.ratings, producer);
  return load_corpus(p.vocabulary, p.embeddings, p.ratings);
}

inline void save_corpus_dir(const CorpusBundle& c, const fs::path& dir) {
  const auto p = corpus_paths(dir);
  save_corpus(c, p.vocabulary, p.embeddings, p.ratings);
}

inline std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string index_name(const std::string& prefix, std::size_t i) {
  std::string n = std::to_string(i);
  return prefix + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

/// Raw corpus: external directory or the synth stage output.
inline CorpusBundle stage_raw_corpus(const StageContext& ctx, Stage& st) {
  if (!ctx.config.corpus_dir.empty()) return load_corpus_dir(st, ctx.config.corpus_dir, {});
  return load_corpus_dir(st, ctx.dir("synth") / "corpus", "synth");
}

inline CorpusBundle stage_reduced_corpus(const StageContext& ctx, Stage& st) {
  return load_corpus_dir(st, ctx.dir("reduce") / "corpus", "reduce");
}

/// Subjects -> runs, read from `runs/<subject>/<run>/`.
inline std::vector<std::vector<StimulusRun>> stage_runs(const StageContext& ctx, Stage& st) {
  fs::path root;
  double tr = ctx.config.tr;
  if (!ctx.config.runs_dir.empty()) {
    root = ctx.config.runs_dir;
  } else {
    root = ctx.dir("synth") / "runs";
    tr = ctx.config.synthetic.tr;
  }
  st.input(root, ctx.config.runs_dir.empty() ? "synth" : "");
  std::vector<std::vector<StimulusRun>> subjects;
  for (const auto& sdir : sorted_subdirs(root)) {
    std::vector<StimulusRun> runs;
    for (const auto& rdir : sorted_subdirs(sdir))
      runs.push_back(load_run(rdir / "timeline.tsv", rdir / "nuisance.sdm", rdir / "bold.sdm", tr));
    if (runs.empty()) throw Error(Errc::validation, "subject directory " + sdir.string() + " has no runs");
    subjects.push_back(std::move(runs));
  }
  if (subjects.empty()) throw Error(Errc::validation, "runs directory " + root.string() + " has no subjects");
  return subjects;
}

inline std::optional<GroundTruth> stage_truth(const StageContext& ctx, Stage& st) {
  if (!ctx.config.corpus_dir.empty()) return std::nullopt;
  const auto dir = ctx.dir("synth") / "truth";
  st.input(dir, "synth");
  return load_truth(dir);
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_synth(const StageContext& ctx) {
  Stage st(ctx, "synth");
  const auto data = synth_dataset(ctx.config.synthetic_spec());
  save_corpus_dir(data.corpus, st.dir() / "corpus");
  save_truth(data.truth, data.corpus.attribute_names, st.dir() / "truth");
  std::vector<StimulusRun> all_runs;
  for (std::size_t s = 0; s < data.subjects.size(); ++s)
    for (std::size_t r = 0; r < data.subjects[s].size(); ++r) {
      save_run(data.subjects[s][r], st.dir() / "runs" / index_name("sub-", s) / index_name("run-", r));
      all_runs.push_back(data.subjects[s][r]);
    }
  write_json(st.dir() / "dataset_report.json", validate_dataset(data.corpus, all_runs).to_json());
  st.finish({{"clip_fraction", data.truth.clip_fraction}});
}

inline void stage_reduce(const StageContext& ctx) {
  Stage st(ctx, "reduce");
  CorpusBundle corpus = stage_raw_corpus(ctx, st);
  nlohmann::json extra = {{"input_dim", corpus.dim()}};
  if (ctx.config.reduce) {
    auto reduced = reduce_embeddings(corpus, ctx.config.variance_ratio);
    write_pca(st.dir(), reduced.pca);
    corpus = std::move(reduced.bundle);
  }
  save_corpus_dir(corpus, st.dir() / "corpus");
  extra["output_dim"] = corpus.dim();
  st.finish(extra);
}

inline void stage_train(const StageContext& ctx) {
  Stage st(ctx, "train");
  const auto corpus = stage_reduced_corpus(ctx, st);
  const auto cfg = ctx.config.train_config();
  const auto res = train(corpus, cfg);
  save_params(res.params, st.dir() / "model", cfg, res.log);
  const auto& last = res.log.back();
  st.finish({{"final_epoch", to_json(last)}});
}

inline DcsrmParams stage_model(const StageContext& ctx, Stage& st) {
  const auto dir = ctx.dir("train") / "model";
  st.input(dir, "train");
  return load_params(dir);
}

inline void stage_partition(const StageContext& ctx) {
  Stage st(ctx, "partition");
  const auto params = stage_model(ctx, st);
  const auto corpus = stage_reduced_corpus(ctx, st);
  const auto part = extract_partition(params, ctx.config.dropout_threshold);
  write_json(st.dir() / "partition.json", to_json(part, corpus.attribute_names));
  write_matrix(st.dir() / "dropout_rates.sdm", part.dropout_rates);
  nlohmann::json warnings = nlohmann::json::array();
  for (const auto b : part.empty_attributes)
    warnings.push_back("attribute '" + corpus.attribute_names[b] + "': no valid sub-embedding");
  st.finish({{"warnings", warnings}});
}

inline SubspacePartition stage_partition_of(const StageContext& ctx, Stage& st) {
  const auto dir = ctx.dir("partition");
  st.input(dir / "partition.json", "partition");
  st.input(dir / "dropout_rates.sdm", "partition");
  return partition_from_json(read_json(dir / "partition.json"), read_matrix(dir / "dropout_rates.sdm"));
}

inline void stage_analyze(const StageContext& ctx) {
  Stage st(ctx, "analyze");
  const auto params = stage_model(ctx, st);
  const auto corpus = stage_reduced_corpus(ctx, st);
  const auto part = stage_partition_of(ctx, st);
  const Matrix x = project(params, corpus.embeddings);
  std::vector<TransformedSubspace> subspaces;
  nlohmann::json names = nlohmann::json::array(), warnings = nlohmann::json::array();
  for (std::size_t b = 0; b < part.dims.size(); ++b) {
    const auto& name = corpus.attribute_names[b];
    if (part.dims[b].empty()) {
      warnings.push_back("attribute '" + name + "': no valid sub-embedding, skipped");
      continue;
    }
    subspaces.push_back(transform_subspace(x, part, b, corpus.ratings.col(static_cast<Eigen::Index>(b)), name,
                                           ctx.config.screening()));
    save_subspace(subspaces.back(), st.dir() / "subspaces" / name);
    names.push_back(name);
  }
  const auto k = std::min<std::size_t>(ctx.config.top_k, static_cast<std::size_t>(corpus.words()) / 2);
  const auto bundle = emit_label_prompts(subspaces, k, corpus.vocabulary, st.dir() / "prompts");
  for (const auto& w : bundle.warnings) warnings.push_back(w);
  const auto summary = summarize_screening(subspaces);
  write_json(st.dir() / "subspaces.json", {{"subspaces", names},
                                           {"components", summary.components},
                                           {"excluded", summary.excluded},
                                           {"excluded_fraction", summary.excluded_fraction()}});
  st.finish({{"warnings", warnings}});
}

inline std::vector<TransformedSubspace> stage_subspaces(const StageContext& ctx, Stage& st) {
  const auto dir = ctx.dir("analyze");
  st.input(dir / "subspaces.json", "analyze");
  std::vector<TransformedSubspace> out;
  const auto index = read_json(dir / "subspaces.json");
  for (const auto& name : index.at("subspaces")) {
    const auto sdir = dir / "subspaces" / name.get<std::string>();
    st.input(sdir, "analyze");
    out.push_back(load_subspace(sdir));
  }
  return out;
}

struct EncodingSummary {
  Matrix r;        // subjects x G
  Matrix p;        // subjects x G
  Matrix weights;  // sign-corrected, subject-averaged U
  GroupMap group;
  VoxelAssignment assignment;
  std::vector<FeatureRow> rows;
};

/// Per-subject fits, group map (or per-voxel p for one subject), sign
/// correction of the subject-averaged weights, and voxel assignment.
inline EncodingSummary encode_subjects(const std::vector<std::vector<StimulusRun>>& subjects,
                                       const std::vector<TransformedSubspace>& subspaces, const HrfSpec& hrf_spec,
                                       const EncodingConfig& cfg, double group_p) {
  if (subspaces.empty()) throw Error(Errc::validation, "no subspaces to encode (every sub-embedding is empty)");
  const Matrix scores = stack_scores(subspaces);
  const Hrf hrf(hrf_spec);
  EncodingSummary out;
  out.rows = feature_rows(subspaces);
  const auto n_subjects = static_cast<Eigen::Index>(subjects.size());
  Eigen::Index g_count = -1;
  for (Eigen::Index s = 0; s < n_subjects; ++s) {
    const auto& runs = subjects[static_cast<std::size_t>(s)];
    Eigen::Index t = 0;
    for (const auto& r : runs) t += r.n_volumes;
    const Eigen::Index g = runs.front().bold.cols();
    if (g_count < 0) {
      g_count = g;
      out.r.resize(n_subjects, g);
      out.p.resize(n_subjects, g);
      out.weights = Matrix::Zero(scores.cols(), g);
    }
    if (g != g_count) throw Error(Errc::shape_mismatch, "subjects differ in voxel count");
    Matrix features(t, scores.cols()), nuisance(t, kNuisanceColumns), bold(t, g);
    Eigen::Index at = 0;
    for (const auto& r : runs) {
      if (r.bold.cols() != g) throw Error(Errc::shape_mismatch, "runs differ in voxel count");
      features.middleRows(at, r.n_volumes) = build_features(r, scores, hrf).values;
      nuisance.middleRows(at, r.n_volumes) = r.nuisance;
      bold.middleRows(at, r.n_volumes) = r.bold;
      at += r.n_volumes;
    }
    const auto res = fit_voxelwise(features, nuisance, bold, cfg);
    out.r.row(s) = res.r.transpose();
    out.p.row(s) = res.p.transpose();
    out.weights += res.weights / static_cast<double>(n_subjects);
  }
  if (n_subjects >= 2) {
    out.group = group_level_map(out.r, group_p);
  } else {
    out.group.threshold = group_p;
    out.group.t = Vector::Zero(g_count);
    out.group.neg_log10_p = Vector::Zero(g_count);
    out.group.significant.assign(static_cast<std::size_t>(g_count), false);
    for (Eigen::Index v = 0; v < g_count; ++v) {
      out.group.neg_log10_p[v] = -std::log10(std::max(out.p(0, v), 1e-300));
      out.group.significant[static_cast<std::size_t>(v)] = out.p(0, v) < group_p;
    }
  }
  out.weights = sign_correct(out.weights, subspaces);
  out.assignment = assign_voxels(out.weights, out.rows, out.group.significant);
  return out;
}

/// Fraction of significant voxels whose label belongs to their source attribute.
inline std::optional<double> assignment_accuracy(const VoxelAssignment& a, const std::vector<FeatureRow>& rows,
                                                 const std::vector<TransformedSubspace>& subspaces,
                                                 const std::vector<int>& voxel_source) {
  std::size_t hit = 0, total = 0;
  for (std::size_t v = 0; v < a.label.size() && v < voxel_source.size(); ++v) {
    if (a.label[v] == kLabelNotSignificant || voxel_source[v] == kNoiseVoxel) continue;
    ++total;
    if (a.label[v] >= 0 &&
        subspaces[rows[static_cast<std::size_t>(a.label[v])].subspace].attribute_index == static_cast<std::size_t>(voxel_source[v]))
      ++hit;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(total);
}

inline nlohmann::json to_json(const GroupMap& g) {
  std::vector<int> sig(g.significant.begin(), g.significant.end());
  return {{"threshold", g.threshold},
          {"t", std::vector<double>(g.t.data(), g.t.data() + g.t.size())},
          {"neg_log10_p", std::vector<double>(g.neg_log10_p.data(), g.neg_log10_p.data() + g.neg_log10_p.size())},
          {"significant", sig},
          {"zero_variance", g.zero_variance}};
}

inline GroupMap group_map_from_json(const nlohmann::json& j) {
  GroupMap g;
  try {
    g.threshold = j.at("threshold").get<double>();
    const auto t = j.at("t").get<std::vector<double>>(), nl = j.at("neg_log10_p").get<std::vector<double>>();
    g.t = Eigen::Map<const Vector>(t.data(), static_cast<Eigen::Index>(t.size()));
    g.neg_log10_p = Eigen::Map<const Vector>(nl.data(), static_cast<Eigen::Index>(nl.size()));
    for (int s : j.at("significant").get<std::vector<int>>()) g.significant.push_back(s != 0);
    g.zero_variance = j.at("zero_variance").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, std::string("group map JSON: ") + e.what());
  }
  return g;
}

inline void stage_encode(const StageContext& ctx) {
  Stage st(ctx, "encode");
  const auto subspaces = stage_subspaces(ctx, st);
  const auto subjects = stage_runs(ctx, st);
  const auto truth = stage_truth(ctx, st);
  if (subspaces.empty()) {
    const std::string warning = "no subspaces to encode; voxel maps skipped";
    *ctx.log << "[encode] warning: " << warning << "\n";
    write_json(st.dir() / "assignment_summary.json", {{"warnings", {warning}}, {"features", 0}});
    st.finish({{"warnings", {warning}}});
    return;
  }
  const auto enc = encode_subjects(subjects, subspaces, ctx.config.hrf, ctx.config.encoding_config(ctx.workers),
                                   ctx.config.group_p);
  write_matrix(st.dir() / "r.sdm", enc.r);
  write_matrix(st.dir() / "p.sdm", enc.p);
  write_matrix(st.dir() / "weights.sdm", enc.weights);
  write_json(st.dir() / "group.json", to_json(enc.group));

  const Eigen::Index g = enc.r.cols();
  Vector mean_r = enc.r.colwise().mean().transpose(), p(g);
  for (Eigen::Index v = 0; v < g; ++v)
    p[v] = enc.r.rows() >= 2 ? std::pow(10.0, -enc.group.neg_log10_p[v]) : enc.p(0, v);
  write_file_bytes(st.dir() / "assignment.tsv", assignment_tsv(enc.assignment, enc.rows, mean_r, p));
  nlohmann::json summary = {{"counts", enc.assignment.counts},
                            {"significant", enc.group.count()},
                            {"voxels", g},
                            {"subjects", enc.r.rows()},
                            {"features", enc.weights.rows()}};
  if (truth) {
    const auto acc = assignment_accuracy(enc.assignment, enc.rows, subspaces, truth->voxel_source);
    summary["assignment_accuracy"] = acc ? nlohmann::json(*acc) : nlohmann::json(nullptr);
  }
  write_json(st.dir() / "assignment_summary.json", summary);
  st.finish();
}

inline void stage_evaluate(const StageContext& ctx) {
  Stage st(ctx, "evaluate");
  const auto params = stage_model(ctx, st);
  const auto corpus = stage_reduced_corpus(ctx, st);
  const auto part = stage_partition_of(ctx, st);
  const auto truth = stage_truth(ctx, st);
  const Matrix x = project(params, corpus.embeddings);
  const auto cv = ctx.config.cv();
  write_json(st.dir() / "table1.json", to_json(semantic_prediction_eval(x, corpus.ratings, part.dims, corpus.attribute_names, cv)));
  write_json(st.dir() / "table_a1.json", to_json(origin_vs_disentangled(corpus, params, cv)));
  const Eigen::Index h = params.dim();
  nlohmann::json structure = {
      {"orthogonality", (params.W.transpose() * params.W - Matrix::Identity(h, h)).norm()},
      {"gram_relative_deviation", (x * x.transpose() - corpus.embeddings * corpus.embeddings.transpose()).cwiseAbs().maxCoeff() /
                                      (corpus.embeddings * corpus.embeddings.transpose()).cwiseAbs().maxCoeff()}};
  write_json(st.dir() / "structure.json", structure);
  if (truth) {
    // Recovery is scored in the raw latent space, so it needs the embedding
    // the model saw: reduced V. Correlations are unaffected by the rotation.
    write_json(st.dir() / "recovery.json", to_json(recovery_f1(x, *truth, part)));
  }
  st.finish();
}

inline void stage_ablate(const StageContext& ctx) {
  Stage st(ctx, "ablate");
  const auto corpus = stage_reduced_corpus(ctx, st);
  const auto entries = ablation_suite(corpus, ctx.config.train_config(), ctx.config.ablation_drop, ctx.config.dropout_threshold,
                                      ctx.config.cv(), ctx.workers);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : entries)
    out.push_back({{"model", e.name},
                   {"dropped", e.dropped},
                   {"partition", to_json(e.partition, corpus.attribute_names)},
                   {"table", to_json(e.table)}});
  write_json(st.dir() / "ablation.json", out);
  st.finish();
}

inline void stage_report(const StageContext& ctx) {
  Stage st(ctx, "report");
  ReportInputs in;
  const auto eval_dir = ctx.dir("evaluate");
  in.table1 = table_from_json(read_json(st.input(eval_dir / "table1.json", "evaluate")));
  in.table_a1 = origin_rows_from_json(read_json(st.input(eval_dir / "table_a1.json", "evaluate")));
  for (const auto& row : in.table1->rows) in.attributes.push_back(row.attribute);
  in.summary["structure"] = read_json(st.input(eval_dir / "structure.json", "evaluate"));
  if (fs::exists(eval_dir / "recovery.json")) in.summary["recovery"] = read_json(st.input(eval_dir / "recovery.json"));
  in.subspaces = stage_subspaces(ctx, st);
  if (fs::exists(ctx.dir("ablate") / "ablation.json")) {
    for (const auto& e : read_json(st.input(ctx.dir("ablate") / "ablation.json")))
      in.table2.emplace_back(e.at("model").get<std::string>(), table_from_json(e.at("table")));
  }
  const auto enc_dir = ctx.dir("encode");
  if (fs::exists(enc_dir / "assignment.tsv")) {
    in.voxel_assignment_tsv = read_file_bytes(st.input(enc_dir / "assignment.tsv"));
    in.group_map = group_map_from_json(read_json(st.input(enc_dir / "group.json")));
  }
  if (fs::exists(enc_dir / "assignment_summary.json"))
    in.summary["encoding"] = read_json(st.input(enc_dir / "assignment_summary.json"));
  emit_report(in, st.dir());
  // Manifest of the whole output tree, stage manifests included.
  write_json(st.dir() / "tree_manifest.json", directory_manifest(ctx.out(), {"report/tree_manifest.json", "report/manifest.json"}));
  st.finish();
}

inline void run_stage(const StageContext& ctx, const std::string& name) {
  try {
    if (name == "synth") stage_synth(ctx);
    else if (name == "reduce") stage_reduce(ctx);
    else if (name == "train") stage_train(ctx);
    else if (name == "partition") stage_partition(ctx);
    else if (name == "analyze") stage_analyze(ctx);
    else if (name == "encode") stage_encode(ctx);
    else if (name == "evaluate") stage_evaluate(ctx);
    else if (name == "ablate") stage_ablate(ctx);
    else if (name == "report") stage_report(ctx);
    else throw Error(Errc::unknown_name, "unknown stage '" + name + "'");
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + name + "': " + e.what());
  } catch (const fs::filesystem_error& e) {
    throw Error(Errc::io, "stage '" + name + "': " + e.what());
  }
}

/// Every stage in order. synth is skipped for an external corpus, encode
/// when no runs are available.
inline void run_all(const StageContext& ctx) {
  const bool external = !ctx.config.corpus_dir.empty();
  for (const auto& name : stage_names()) {
    if (name == "synth" && external) continue;
    if (name == "encode" && external && ctx.config.runs_dir.empty()) continue;
    run_stage(ctx, name);
  }
}

// ---------------------------------------------------------------------------
// Command line

/// Returns the process exit status. Typed errors print one line to `err`.
inline int run_command(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Disentangle word embeddings into attribute subspaces and map them onto voxel time series."};
  app.name("subdim");
  std::string config_path, out_dir;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "pipeline configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "output directory (overrides paths.out_dir)");
  app.add_option("--workers", workers, "worker threads for voxel fits and ablation retrainings")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "set every seed in the seeds section");
  app.add_option("--set", overrides, "override one config value, key=value with a dotted key")->take_all();
  app.require_subcommand(1, 1);
  app.fallthrough();
  std::vector<CLI::App*> subs;
  for (const auto& name : stage_names()) subs.push_back(app.add_subcommand(name, "run the " + name + " stage"));
  subs.push_back(app.add_subcommand("all", "run every stage in order"));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, std::cout, err);
  }

  try {
    nlohmann::json raw = nlohmann::json::object();
    if (!config_path.empty()) {
      raw = nlohmann::json::parse(read_file_bytes(config_path), nullptr, false);
      if (raw.is_discarded()) throw Error(Errc::invalid_config, config_path + ": not valid JSON");
    }
    for (const auto& o : overrides) apply_override(raw, o);
    if (!out_dir.empty()) raw["paths"]["out_dir"] = out_dir;
    if (seed)
      for (const char* k : {"data", "train", "eval", "null", "poc"}) raw["seeds"][k] = *seed;
    StageContext ctx;
    ctx.config = pipeline_config_from_json(raw);
    ctx.workers = workers;
    ctx.log = &err;
    for (auto* sub : subs) {
      if (!sub->parsed()) continue;
      if (sub->get_name() == "all") run_all(ctx);
      else run_stage(ctx, sub->get_name());
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace subdim

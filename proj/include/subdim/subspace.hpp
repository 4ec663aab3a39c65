#pragma once

// Per-attribute subspace analysis: PCA over the attribute's learned
// dimensions, correlation and order-consistency screening against the
// attribute's ratings, top-loading words, and labeling prompt bundles.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "subdim/data_io.hpp"
#include "subdim/dcsrm.hpp"
#include "subdim/error.hpp"
#include "subdim/numerics.hpp"

namespace subdim {

struct ScreeningConfig {
  double p_threshold = 0.05;   // retained needs p < this
  double r_threshold = 0.1;    // ... and |r| >= this
  std::size_t max_components = 10;
  std::size_t poc_max_pairs = kDefaultPocMaxPairs;
  std::uint64_t poc_seed = 0;
};

enum class ComponentStatus { retained, others };

inline std::string_view to_string(ComponentStatus s) {
  return s == ComponentStatus::retained ? "retained" : "others";
}

struct ComponentStats {
  CorrStats corr;
  double poc = 0.0;
  ComponentStatus status = ComponentStatus::others;
  int sign = 1;  // sign of r, +1 on ties
};

struct TransformedSubspace {
  std::string attribute;
  std::size_t attribute_index = 0;
  std::vector<Eigen::Index> dims;  // columns of X this subspace was fit on
  PcaModel pca;
  Matrix scores;  // M x k
  std::vector<ComponentStats> components;

  std::size_t size() const { return components.size(); }
  std::size_t retained() const {
    return static_cast<std::size_t>(std::count_if(components.begin(), components.end(), [](const auto& c) {
      return c.status == ComponentStatus::retained;
    }));
  }
};

inline ComponentStatus screen(const CorrStats& c, const ScreeningConfig& cfg) {
  return (c.p < cfg.p_threshold && std::abs(c.r) >= cfg.r_threshold) ? ComponentStatus::retained
                                                                      : ComponentStatus::others;
}

inline void validate_screening(const ScreeningConfig& cfg) {
  if (!(cfg.p_threshold > 0.0 && cfg.p_threshold <= 1.0))
    throw Error(Errc::invalid_config, "screen p threshold must lie in (0, 1]");
  if (!(cfg.r_threshold >= 0.0 && cfg.r_threshold <= 1.0))
    throw Error(Errc::invalid_config, "screen r threshold must lie in [0, 1]");
  if (cfg.max_components < 1) throw Error(Errc::invalid_config, "max_components must be >= 1");
  if (cfg.poc_max_pairs < 1) throw Error(Errc::invalid_config, "poc_max_pairs must be >= 1");
}

/// Statistics for one component's scores against the ratings.
inline ComponentStats score_component(const VectorCRef& scores, const VectorCRef& ratings,
                                      const ScreeningConfig& cfg) {
  ComponentStats s;
  s.corr = pearson(scores, ratings);
  s.poc = pairwise_order_consistency(scores, ratings, cfg.poc_max_pairs, cfg.poc_seed);
  s.status = screen(s.corr, cfg);
  s.sign = s.corr.r < 0.0 ? -1 : 1;
  return s;
}

/// PCA over the attribute's partition columns of X, keeping every component
/// up to rank (capped), then screening each against the attribute's ratings.
inline TransformedSubspace transform_subspace(const Matrix& x, const SubspacePartition& partition,
                                              std::size_t attribute, const VectorCRef& ratings,
                                              const std::string& name = {}, const ScreeningConfig& cfg = {}) {
  validate_screening(cfg);
  if (attribute >= partition.dims.size())
    throw Error(Errc::unknown_name, "attribute index " + std::to_string(attribute) + " not in partition");
  const auto& dims = partition.dims[attribute];
  const std::string label = name.empty() ? std::to_string(attribute) : name;
  if (dims.empty())
    throw Error(Errc::validation, "attribute '" + label + "': no valid sub-embedding (no dimension passed the dropout threshold)");
  require_same_length(x.rows(), ratings.size(), "transform_subspace rows/ratings");
  for (const auto j : dims)
    if (j < 0 || j >= x.cols()) throw Error(Errc::shape_mismatch, "partition index outside X");

  TransformedSubspace out;
  out.attribute = label;
  out.attribute_index = attribute;
  out.dims = dims;
  out.pca = pca_fit(gather_cols(x, dims), 1.0, cfg.max_components);
  out.scores = pca_transform(out.pca, gather_cols(x, dims));
  for (Eigen::Index k = 0; k < out.scores.cols(); ++k)
    out.components.push_back(score_component(out.scores.col(k), ratings, cfg));
  return out;
}

struct ScreeningSummary {
  std::size_t components = 0;
  std::size_t excluded = 0;
  double excluded_fraction() const {
    return components == 0 ? 0.0 : static_cast<double>(excluded) / static_cast<double>(components);
  }
};

inline ScreeningSummary summarize_screening(const std::vector<TransformedSubspace>& subspaces) {
  ScreeningSummary s;
  for (const auto& sub : subspaces) {
    s.components += sub.size();
    s.excluded += sub.size() - sub.retained();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Top-loading words and prompts

struct TopWords {
  std::vector<std::string> high;
  std::vector<std::string> low;
};

/// Extremes of one component's scores; equal scores order by word index.
inline TopWords top_loading_words(const TransformedSubspace& sub, std::size_t component, std::size_t k,
                                  const std::vector<std::string>& vocabulary) {
  if (component >= sub.size())
    throw Error(Errc::unknown_name, "component " + std::to_string(component) + " out of range for '" +
                                        sub.attribute + "' (" + std::to_string(sub.size()) + " components)");
  const auto m = static_cast<std::size_t>(sub.scores.rows());
  if (vocabulary.size() != m) throw Error(Errc::length_mismatch, "top_loading_words: vocabulary size differs from score rows");
  if (k < 1 || 2 * k > m) throw Error(Errc::validation, "top_loading_words: k must lie in [1, M/2]");
  const auto col = sub.scores.col(static_cast<Eigen::Index>(component));
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto by_desc = [&](std::size_t a, std::size_t b) {
    const double sa = col[static_cast<Eigen::Index>(a)], sb = col[static_cast<Eigen::Index>(b)];
    return sa != sb ? sa > sb : a < b;
  };
  auto by_asc = [&](std::size_t a, std::size_t b) {
    const double sa = col[static_cast<Eigen::Index>(a)], sb = col[static_cast<Eigen::Index>(b)];
    return sa != sb ? sa < sb : a < b;
  };
  TopWords out;
  std::vector<std::size_t> order = idx;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_desc);
  for (std::size_t i = 0; i < k; ++i) out.high.push_back(vocabulary[order[i]]);
  order = idx;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_asc);
  for (std::size_t i = 0; i < k; ++i) out.low.push_back(vocabulary[order[i]]);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? ", " : "") + words[i];
  return out;
}

inline std::string label_instruction(const std::string& attribute, const TopWords& words) {
  return "Act as a linguist. One principal component of the '" + attribute +
         "' semantic sub-embedding orders words along a single axis. Words at the high end: " +
         join_words(words.high) + ". Words at the low end: " + join_words(words.low) +
         ". Propose a short label (one to three words) naming the semantic subdimension this axis "
         "captures within '" + attribute + "', and justify it in one sentence.";
}

struct LabelBundle {
  std::vector<fs::path> files;
  std::vector<nlohmann::json> entries;
  std::vector<std::string> warnings;
};

/// One JSON file per retained component, named prompt_<attribute>_pc<k>.json.
inline LabelBundle emit_label_prompts(const std::vector<TransformedSubspace>& subspaces, std::size_t k,
                                      const std::vector<std::string>& vocabulary, const fs::path& out_dir) {
  LabelBundle bundle;
  fs::create_directories(out_dir);
  for (const auto& sub : subspaces) {
    for (std::size_t c = 0; c < sub.size(); ++c) {
      const auto& stats = sub.components[c];
      if (stats.status != ComponentStatus::retained) continue;
      const TopWords words = top_loading_words(sub, c, k, vocabulary);
      nlohmann::json j = {{"attribute", sub.attribute},
                          {"component", c},
                          {"r", stats.corr.r},
                          {"p", stats.corr.p},
                          {"poc", stats.poc},
                          {"top_high", words.high},
                          {"top_low", words.low},
                          {"instruction", label_instruction(sub.attribute, words)}};
      const fs::path file = out_dir / ("prompt_" + sub.attribute + "_pc" + std::to_string(c) + ".json");
      write_json(file, j);
      bundle.files.push_back(file);
      bundle.entries.push_back(std::move(j));
    }
  }
  if (bundle.files.empty()) bundle.warnings.push_back("no retained components; label bundle is empty");
  return bundle;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const TransformedSubspace& s) {
  nlohmann::json comps = nlohmann::json::array();
  for (std::size_t c = 0; c < s.size(); ++c) {
    const auto& st = s.components[c];
    comps.push_back({{"component", c},
                     {"r", st.corr.r},
                     {"p", st.corr.p},
                     {"n", st.corr.n},
                     {"poc", st.poc},
                     {"status", std::string(to_string(st.status))},
                     {"sign", st.sign},
                     {"explained_variance", s.pca.explained_variance[static_cast<Eigen::Index>(c)]}});
  }
  return {{"attribute", s.attribute},
          {"attribute_index", s.attribute_index},
          {"dims", s.dims},
          {"components", comps}};
}

inline void save_subspace(const TransformedSubspace& s, const fs::path& dir) {
  fs::create_directories(dir);
  write_json(dir / "subspace.json", to_json(s));
  write_pca(dir, s.pca);
  write_matrix(dir / "scores.sdm", s.scores);
}

inline TransformedSubspace load_subspace(const fs::path& dir) {
  if (!fs::exists(dir / "subspace.json"))
    throw Error(Errc::dependency_missing, "subspace not found: " + (dir / "subspace.json").string());
  const auto j = read_json(dir / "subspace.json");
  TransformedSubspace s;
  try {
    s.attribute = j.at("attribute").get<std::string>();
    s.attribute_index = j.at("attribute_index").get<std::size_t>();
    s.dims = j.at("dims").get<std::vector<Eigen::Index>>();
    for (const auto& c : j.at("components")) {
      ComponentStats st;
      st.corr.r = c.at("r").get<double>();
      st.corr.p = c.at("p").get<double>();
      st.corr.n = c.at("n").get<std::size_t>();
      st.poc = c.at("poc").get<double>();
      st.status = c.at("status").get<std::string>() == "retained" ? ComponentStatus::retained : ComponentStatus::others;
      st.sign = c.at("sign").get<int>();
      s.components.push_back(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, (dir / "subspace.json").string() + ": " + e.what());
  }
  s.pca = read_pca(dir);
  s.scores = read_matrix(dir / "scores.sdm");
  return s;
}

}  // namespace subdim

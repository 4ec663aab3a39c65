#include <gtest/gtest.h>

#include <random>
#include <set>

#include "subdim/subspace.hpp"

using namespace subdim;

namespace {

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

SubspacePartition partition_of(std::vector<std::vector<Eigen::Index>> dims, Eigen::Index h) {
  SubspacePartition p;
  p.dims = std::move(dims);
  p.dropout_rates = Matrix::Constant(static_cast<Eigen::Index>(p.dims.size()), h, 0.5);
  return p;
}

struct Planted {
  Matrix x;
  Vector ratings;
};

/// Columns 0..2 of X: a rating-driven column (variance 9), a weakly related
/// column (variance 4), and an independent noise column (variance 1).
Planted planted(std::uint64_t seed, Eigen::Index m = 500) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Planted p;
  p.x.resize(m, 4);
  p.ratings.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double latent = n(rng);
    p.ratings[i] = std::clamp(4.0 + latent, 1.0, 7.0);
    p.x(i, 0) = 3.0 * (latent + 0.01 * n(rng));
    p.x(i, 1) = 2.0 * n(rng);
    p.x(i, 2) = n(rng);
    p.x(i, 3) = 5.0 * n(rng);  // outside the partition
  }
  return p;
}

std::vector<std::string> words(Eigen::Index m) {
  std::vector<std::string> v;
  for (Eigen::Index i = 0; i < m; ++i) v.push_back("w" + std::to_string(i));
  return v;
}

}  // namespace

TEST(Transform, DecorrelatedScoresAndScreening) {
  const auto d = planted(1);
  const auto part = partition_of({{0, 1, 2}}, 4);
  const auto s = transform_subspace(d.x, part, 0, d.ratings, "vision");
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.attribute, "vision");
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = i + 1; j < 3; ++j)
      EXPECT_LE(std::abs(correlation_or_zero(s.scores.col(i), s.scores.col(j))), 1e-6);
  // First component carries the rating-driven column.
  EXPECT_GE(std::abs(s.components[0].corr.r), 0.99);
  EXPECT_EQ(s.components[0].status, ComponentStatus::retained);
  for (const auto& c : s.components) EXPECT_GE(c.sign * c.corr.r, 0.0);
  // Repeated calls agree bitwise.
  const auto again = transform_subspace(d.x, part, 0, d.ratings, "vision");
  EXPECT_EQ(again.scores, s.scores);
  EXPECT_EQ(again.components[2].poc, s.components[2].poc);
}

TEST(Transform, WeakCorrelationIsOthers) {
  CorrStats weak{0.09, 1e-9, 100000};
  EXPECT_EQ(screen(weak, {}), ComponentStatus::others);
  CorrStats insignificant{0.3, 0.06, 20};
  EXPECT_EQ(screen(insignificant, {}), ComponentStatus::others);
  CorrStats good{-0.3, 0.001, 200};
  EXPECT_EQ(screen(good, {}), ComponentStatus::retained);
}

TEST(Transform, ScreeningMonotoneInCutoff) {
  const auto d = planted(2);
  const auto part = partition_of({{0, 1, 2}}, 4);
  ScreeningConfig lo, hi;
  lo.r_threshold = 0.05;
  hi.r_threshold = 0.5;
  const auto a = transform_subspace(d.x, part, 0, d.ratings, "a", lo);
  const auto b = transform_subspace(d.x, part, 0, d.ratings, "a", hi);
  for (std::size_t c = 0; c < a.size(); ++c) {
    if (a.components[c].status == ComponentStatus::others) {
      EXPECT_EQ(b.components[c].status, ComponentStatus::others);
    }
  }
}

TEST(Transform, ComponentEqualToRatingsIsRetained) {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector ratings(200), scores(200);
  for (Eigen::Index i = 0; i < 200; ++i) {
    ratings[i] = 1.0 + 6.0 * static_cast<double>(i) / 199.0;
    scores[i] = ratings[i] + 1e-3 * n(rng);
  }
  const auto st = score_component(scores, ratings, {});
  EXPECT_GE(st.corr.r, 0.99);
  EXPECT_EQ(st.status, ComponentStatus::retained);
  EXPECT_EQ(st.sign, 1);
}

TEST(Transform, CapsComponents) {
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix x(100, 14);
  for (Eigen::Index i = 0; i < 100; ++i)
    for (Eigen::Index j = 0; j < 14; ++j) x(i, j) = n(rng);
  Vector ratings = (x.col(0).array() + 4.0).cwiseMax(1.0).cwiseMin(7.0);
  std::vector<Eigen::Index> all(14);
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  const auto s = transform_subspace(x, partition_of({all}, 14), 0, ratings);
  EXPECT_EQ(s.size(), 10u);
}

TEST(Transform, EmptyDimsIsTypedError) {
  const auto d = planted(5);
  const auto part = partition_of({{}, {0}}, 4);
  EXPECT_EQ(code_of([&] { transform_subspace(d.x, part, 0, d.ratings); }), Errc::validation);
  EXPECT_EQ(code_of([&] { transform_subspace(d.x, part, 7, d.ratings); }), Errc::unknown_name);
}

TEST(Transform, ExcludedFractionReported) {
  const auto d = planted(6);
  const auto part = partition_of({{0, 1, 2}}, 4);
  const auto s = transform_subspace(d.x, part, 0, d.ratings);
  const auto summary = summarize_screening({s});
  EXPECT_EQ(summary.components, 3u);
  EXPECT_EQ(summary.excluded, 3u - s.retained());
  EXPECT_NEAR(summary.excluded_fraction(), static_cast<double>(summary.excluded) / 3.0, 1e-15);
}

TEST(TopWords, SortedExtremesAndTieBreak) {
  TransformedSubspace s;
  s.attribute = "time";
  s.scores.resize(10, 2);
  for (Eigen::Index i = 0; i < 10; ++i) {
    s.scores(i, 0) = static_cast<double>(i);
    s.scores(i, 1) = i < 5 ? 1.0 : 0.0;  // ties
  }
  s.components.resize(2);
  const auto vocab = words(10);
  const auto t = top_loading_words(s, 0, 3, vocab);
  EXPECT_EQ(t.high, (std::vector<std::string>{"w9", "w8", "w7"}));
  EXPECT_EQ(t.low, (std::vector<std::string>{"w0", "w1", "w2"}));
  const auto ties = top_loading_words(s, 1, 2, vocab);
  EXPECT_EQ(ties.high, (std::vector<std::string>{"w0", "w1"}));
  EXPECT_EQ(ties.low, (std::vector<std::string>{"w5", "w6"}));

  TransformedSubspace flipped = s;
  flipped.scores = -s.scores;
  for (std::size_t c = 0; c < 2; ++c) {
    const auto a = top_loading_words(s, c, 4, vocab);
    const auto b = top_loading_words(flipped, c, 4, vocab);
    EXPECT_EQ(a.high, b.low);
    EXPECT_EQ(a.low, b.high);
  }
  EXPECT_EQ(code_of([&] { top_loading_words(s, 2, 3, vocab); }), Errc::unknown_name);
  EXPECT_EQ(code_of([&] { top_loading_words(s, 0, 6, vocab); }), Errc::validation);
}

TEST(Prompts, EmitsSchemaAndRoundTrips) {
  const auto d = planted(7, 60);
  const auto part = partition_of({{0, 1, 2}}, 4);
  const auto s = transform_subspace(d.x, part, 0, d.ratings, "emotion");
  ASSERT_GE(s.retained(), 1u);
  const fs::path dir = fs::temp_directory_path() / ("subdim_prompts_" + std::to_string(::getpid()));
  const auto bundle = emit_label_prompts({s}, 20, words(60), dir);
  ASSERT_EQ(bundle.files.size(), s.retained());
  EXPECT_TRUE(bundle.warnings.empty());
  const auto j = nlohmann::json::parse(read_file_bytes(bundle.files[0]));
  for (const char* key : {"attribute", "component", "r", "p", "poc", "top_high", "top_low", "instruction"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("top_high").size(), 20u);
  EXPECT_EQ(j.at("top_low").size(), 20u);
  const auto instruction = j.at("instruction").get<std::string>();
  EXPECT_NE(instruction.find("emotion"), std::string::npos);
  for (const auto& w : j.at("top_high")) EXPECT_NE(instruction.find(w.get<std::string>()), std::string::npos);
  for (const auto& w : j.at("top_low")) EXPECT_NE(instruction.find(w.get<std::string>()), std::string::npos);
  std::set<std::string> hi(j.at("top_high").begin(), j.at("top_high").end());
  for (const auto& w : j.at("top_low")) EXPECT_EQ(hi.count(w.get<std::string>()), 0u);
  EXPECT_EQ(j, bundle.entries[0]);
  fs::remove_all(dir);
}

TEST(Prompts, EmptyBundleWarns) {
  TransformedSubspace s;
  s.attribute = "space";
  s.scores = Matrix::Zero(4, 1);
  s.components.resize(1);  // others by default
  const fs::path dir = fs::temp_directory_path() / ("subdim_prompts_empty_" + std::to_string(::getpid()));
  const auto bundle = emit_label_prompts({s}, 2, words(4), dir);
  EXPECT_TRUE(bundle.files.empty());
  EXPECT_EQ(bundle.warnings.size(), 1u);
  fs::remove_all(dir);
}

TEST(Persistence, SubspaceRoundTrip) {
  const auto d = planted(8);
  const auto s = transform_subspace(d.x, partition_of({{0, 2}}, 4), 0, d.ratings, "social");
  const fs::path dir = fs::temp_directory_path() / ("subdim_sub_" + std::to_string(::getpid()));
  save_subspace(s, dir);
  const auto back = load_subspace(dir);
  EXPECT_EQ(back.scores, s.scores);
  EXPECT_EQ(to_json(back), to_json(s));
  fs::remove_all(dir);
}

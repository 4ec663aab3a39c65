#include <gtest/gtest.h>

#include <unistd.h>

#include "subdim/harness.hpp"

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

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.M = 300;
  s.h = 12;
  s.N = 2;
  s.block_size = 4;
  s.n_volumes = 80;
  s.n_voxels = 10;
  s.n_subjects = 2;
  s.seed = 11;
  return s;
}

fs::path temp_dir(const std::string& tag) {
  return fs::temp_directory_path() / ("subdim_" + tag + "_" + std::to_string(::getpid()));
}

}  // namespace

TEST(Synth, InvariantsAndDeterminism) {
  const auto spec = small_spec();
  const auto a = synth_dataset(spec);
  const auto b = synth_dataset(spec);
  const auto h = spec.h;
  const Matrix q = a.truth.true_mixing;
  EXPECT_LE((q.transpose() * q - Matrix::Identity(h, h)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GE(a.corpus.ratings.minCoeff(), 1.0);
  EXPECT_LE(a.corpus.ratings.maxCoeff(), 7.0);
  EXPECT_EQ(a.truth.planted_dims.size(), 2u);
  EXPECT_EQ(a.truth.planted_dims[1], (std::vector<Eigen::Index>{4, 5, 6, 7}));
  EXPECT_EQ(a.corpus.embeddings, b.corpus.embeddings);
  EXPECT_EQ(a.corpus.ratings, b.corpus.ratings);
  EXPECT_EQ(a.subjects[1][1].bold, b.subjects[1][1].bold);
  EXPECT_EQ(a.truth.voxel_source, b.truth.voxel_source);
  EXPECT_EQ(a.subjects.size(), 2u);
  EXPECT_EQ(a.subjects[0].size(), 2u);
  EXPECT_EQ(a.subjects[0][0].words.size(), a.subjects[1][0].words.size());
  EXPECT_NE(a.subjects[0][0].bold, a.subjects[1][0].bold);
  EXPECT_EQ(std::count(a.truth.voxel_source.begin(), a.truth.voxel_source.end(), kNoiseVoxel), 4);
  EXPECT_TRUE(validate_dataset(a.corpus, a.subjects[0]).clean());

  // Files written twice are byte-identical.
  const auto d1 = temp_dir("synth_a"), d2 = temp_dir("synth_b");
  for (const auto& dir : {d1, d2}) {
    const auto again = synth_dataset(spec);
    save_corpus(again.corpus, dir / "vocabulary.txt", dir / "embeddings.sdm", dir / "ratings.tsv");
    save_truth(again.truth, again.corpus.attribute_names, dir / "truth");
  }
  EXPECT_EQ(directory_manifest(d1), directory_manifest(d2));
  const auto back = load_truth(d1 / "truth");
  EXPECT_EQ(back.true_mixing, a.truth.true_mixing);
  EXPECT_EQ(back.voxel_source, a.truth.voxel_source);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Synth, NoiselessRatingsAreAffineInBlockMeans) {
  auto spec = small_spec();
  spec.rating_noise_sd = 0.0;
  const auto d = synth_dataset(spec);
  EXPECT_EQ(d.truth.clipped, 0u);
  for (Eigen::Index b = 0; b < 2; ++b) {
    const Vector mean = d.truth.latent.middleCols(b * 4, 4).rowwise().mean();
    EXPECT_NEAR(correlation_or_zero(mean, d.corpus.ratings.col(b)), 1.0, 1e-12);
    EXPECT_NEAR(d.corpus.ratings.col(b).minCoeff(), 1.0, 1e-12);
    EXPECT_NEAR(d.corpus.ratings.col(b).maxCoeff(), 7.0, 1e-12);
  }
}

TEST(Synth, SpecValidation) {
  auto spec = small_spec();
  spec.block_size = 7;  // 2 * 7 > 12
  EXPECT_EQ(code_of([&] { synth_dataset(spec); }), Errc::invalid_config);
  EXPECT_EQ(code_of([&] { spec_from_json(nlohmann::json::parse(R"({"bogus": 1})")); }), Errc::invalid_config);
  const auto s = spec_from_json(to_json(small_spec()));
  EXPECT_EQ(to_json(s), to_json(small_spec()));
}

TEST(Eval, SelfPredictionCeiling) {
  const auto d = synth_dataset(small_spec());
  const auto t = semantic_prediction_eval(d.corpus.ratings, d.corpus.ratings, {{0}, {1}}, d.corpus.attribute_names);
  for (const auto& row : t.rows) EXPECT_GE(row.target_r, 0.999);
  EXPECT_GE(t.average_target, 0.999);
}

TEST(Eval, EmptySubEmbeddingIsAbsent) {
  const auto d = synth_dataset(small_spec());
  const auto t = semantic_prediction_eval(d.corpus.embeddings, d.corpus.ratings, {{}, {0, 1, 2}}, d.corpus.attribute_names);
  EXPECT_FALSE(t.rows[0].present);
  EXPECT_TRUE(t.rows[1].present);
  EXPECT_EQ(t.present(), 1u);
  EXPECT_DOUBLE_EQ(t.average_target, t.rows[1].target_r);
  const auto back = table_from_json(to_json(t));
  EXPECT_EQ(to_json(back), to_json(t));
}

TEST(Eval, OrthogonalProjectionIsIsometric) {
  const auto d = synth_dataset(small_spec());
  auto params = DcsrmParams::zeros(12, 2);
  params.W = d.truth.true_mixing.transpose();
  const auto rows = origin_vs_disentangled(d.corpus, params);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) EXPECT_NEAR(r.r_origin, r.r_disentangled, 1e-8);
  const CvConfig cfg;
  const Matrix po = nested_cv_predictions(d.corpus.embeddings, d.corpus.ratings, cfg);
  const Matrix pd = nested_cv_predictions(project(params, d.corpus.embeddings), d.corpus.ratings, cfg);
  EXPECT_LE((po - pd).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Eval, TargetAccuracyFallsWithRatingNoise) {
  double prev = 2.0;
  for (double sd : {0.0, 0.5, 1.5}) {
    auto spec = small_spec();
    spec.rating_noise_sd = sd;
    const auto d = synth_dataset(spec);
    std::vector<Eigen::Index> all(12);
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    const auto t = semantic_prediction_eval(d.corpus.embeddings, d.corpus.ratings, {all, all}, d.corpus.attribute_names);
    EXPECT_LE(t.average_target, prev + 0.05);
    prev = t.average_target;
  }
}

TEST(Eval, RecoveryScoring) {
  auto spec = small_spec();
  spec.block_coherence = 0.0;  // latents mutually uncorrelated
  const auto d = synth_dataset(spec);
  // Identity-aligned columns: X = Z recovers exactly the planted blocks.
  SubspacePartition part;
  part.dims = {{0, 1, 2, 3}, {4, 5, 6, 7}};
  const auto perfect = recovery_f1(d.truth.latent, d.truth, part);
  EXPECT_DOUBLE_EQ(perfect.micro_f1, 1.0);
  part.dims = {{0, 8}, {}};
  const auto partial = recovery_f1(d.truth.latent, d.truth, part);
  EXPECT_DOUBLE_EQ(partial.precision[0], 0.5);
  EXPECT_DOUBLE_EQ(partial.recall[0], 0.25);
  EXPECT_DOUBLE_EQ(partial.f1[1], 0.0);
  EXPECT_NEAR(partial.micro_f1, 2.0 / (2.0 + 1.0 + 7.0), 1e-15);
}

TEST(Ablation, UnknownNameAndDeterminism) {
  const auto d = synth_dataset(small_spec());
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 64;
  EXPECT_EQ(code_of([&] { ablation_suite(d.corpus, cfg, {"dis", "nope"}); }), Errc::unknown_name);
  const auto only_full = ablation_suite(d.corpus, cfg, {});
  ASSERT_EQ(only_full.size(), 1u);
  const auto with_drop = ablation_suite(d.corpus, cfg, {"dis"}, kDefaultDropoutThreshold, {}, 2);
  ASSERT_EQ(with_drop.size(), 2u);
  EXPECT_EQ(with_drop[1].name, "without_dis");
  EXPECT_EQ(to_json(with_drop[0].table).dump(), to_json(only_full[0].table).dump());
  EXPECT_EQ(with_drop[0].partition.dims, only_full[0].partition.dims);
}

TEST(Report, ShapesAndByteIdentity) {
  ReportInputs in;
  in.attributes = {"vision", "action"};
  DisentanglementTable t;
  t.rows = {{"vision", true, 0.9, 0.1, {0.9, 0.1}}, {"action", false, 0.0, 0.0, {}}};
  finish_table(t);
  in.table1 = t;
  in.table2 = {{"full", t}, {"without_dis", t}};
  in.table_a1 = {{"vision", 0.91, 0.905}, {"action", 0.8, 0.8}};
  in.voxel_assignment_tsv = "voxel_id\tlabel\tweight\tr\tp\n";
  GroupMap g;
  g.t = Vector::Constant(2, 1.5);
  g.neg_log10_p = Vector::Constant(2, 2.0);
  g.significant = {true, false};
  in.group_map = g;
  in.summary = {{"note", "x"}};
  const auto d1 = temp_dir("report_a"), d2 = temp_dir("report_b");
  const auto files = emit_report(in, d1);
  emit_report(in, d2);
  EXPECT_EQ(directory_manifest(d1), directory_manifest(d2));
  const auto lines = read_lines(d1 / "table1.csv");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "model,vision_target,vision_non_target,action_target,action_non_target,average_target,average_non_target");
  EXPECT_EQ(lines[1], "dcsrm,0.9,0.1,NA,NA,0.9,0.1");
  EXPECT_EQ(read_lines(d1 / "table2.csv").size(), 3u);
  EXPECT_EQ(read_lines(d1 / "table_a1.csv").back(), "average,0.855,0.8525");
  const auto summary = nlohmann::json::parse(read_file_bytes(d1 / "summary.json"));
  EXPECT_EQ(summary.at("note"), "x");
  EXPECT_EQ(summary.at("group").at("significant"), 1);
  EXPECT_EQ(files.size(), 6u);
  fs::remove_all(d1);
  fs::remove_all(d2);
  EXPECT_EQ(code_of([&] { emit_report(in, "/proc/subdim_cannot_write"); }), Errc::io);
}

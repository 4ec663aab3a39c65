#pragma once

// Dataset formats: SDM1 binary matrices, TSV tables, corpus and run loaders,
// dataset validation, and the explained-variance embedding reduction.
//
// SDM1 layout (little-endian):
//   bytes 0..3   "SDM1"
//   bytes 4..7   rows  (uint32)
//   bytes 8..11  cols  (uint32)
//   bytes 12..   rows*cols IEEE-754 doubles, row-major

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "subdim/error.hpp"
#include "subdim/numerics.hpp"

namespace subdim {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kMatrixMagic = {'S', 'D', 'M', '1'};
inline constexpr std::size_t kMatrixHeaderBytes = 12;
inline constexpr Eigen::Index kNuisanceColumns = 14;
inline constexpr double kRatingMin = 1.0;
inline constexpr double kRatingMax = 7.0;

// ---------------------------------------------------------------------------
// Small text helpers

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

inline double parse_double(std::string_view text, const std::string& where) {
  double value = 0.0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  if (!text.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || text.empty())
    throw Error(Errc::validation, where + ": cannot parse number '" + std::string(text) + "'");
  if (!std::isfinite(value)) throw Error(Errc::non_finite, where + ": non-finite number");
  return value;
}

inline std::size_t parse_index(std::string_view text, const std::string& where) {
  std::size_t value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty())
    throw Error(Errc::validation, where + ": cannot parse index '" + std::string(text) + "'");
  return value;
}

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw Error(Errc::io, "format_double failed");
  return std::string(buf.data(), ptr);
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.emplace_back(strip_cr(line));
  return lines;
}

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io, "short write to " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  write_file_bytes(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::validation, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// SDM1 matrices

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const std::string& in, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_matrix(const Matrix& m) {
  if (m.rows() > 0xffffffffLL || m.cols() > 0xffffffffLL)
    throw Error(Errc::validation, "matrix too large for SDM1");
  require_finite(m, "matrix to write");
  std::string out;
  out.reserve(kMatrixHeaderBytes + 8 * static_cast<std::size_t>(m.size()));
  out.append(kMatrixMagic.data(), kMatrixMagic.size());
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      detail::put_u64(out, std::bit_cast<std::uint64_t>(m(i, j)));
  return out;
}

inline Matrix decode_matrix(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < kMatrixHeaderBytes)
    throw Error(Errc::truncated, origin + ": shorter than the 12-byte header");
  if (!std::equal(kMatrixMagic.begin(), kMatrixMagic.end(), bytes.begin()))
    throw Error(Errc::bad_magic, origin + ": expected SDM1");
  const auto rows = detail::get_le(bytes, 4, 4);
  const auto cols = detail::get_le(bytes, 8, 4);
  const auto expected = kMatrixHeaderBytes + 8 * rows * cols;
  if (bytes.size() < expected)
    throw Error(Errc::truncated, origin + ": header declares " + std::to_string(rows) + "x" +
                                     std::to_string(cols) + " but payload is short");
  if (bytes.size() > expected)
    throw Error(Errc::validation, origin + ": " + std::to_string(bytes.size() - expected) +
                                      " trailing bytes after payload");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::size_t offset = kMatrixHeaderBytes;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j, offset += 8)
      m(i, j) = std::bit_cast<double>(detail::get_le(bytes, offset, 8));
  if (!all_finite(m)) throw Error(Errc::non_finite, origin + ": payload has non-finite entries");
  return m;
}

inline void write_matrix(const fs::path& path, const Matrix& m) {
  write_file_bytes(path, encode_matrix(m));
}

inline Matrix read_matrix(const fs::path& path) {
  return decode_matrix(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusBundle {
  std::vector<std::string> vocabulary;
  Matrix embeddings;  // M x h
  Matrix ratings;     // M x N, in [1, 7]
  std::vector<std::string> attribute_names;

  Eigen::Index words() const { return embeddings.rows(); }
  Eigen::Index dim() const { return embeddings.cols(); }
  Eigen::Index attributes() const { return ratings.cols(); }

  Eigen::Index attribute_index(std::string_view name) const {
    for (std::size_t b = 0; b < attribute_names.size(); ++b)
      if (attribute_names[b] == name) return static_cast<Eigen::Index>(b);
    throw Error(Errc::unknown_name, "unknown attribute '" + std::string(name) + "'");
  }
};

inline void validate_corpus(const CorpusBundle& c) {
  const auto m = static_cast<Eigen::Index>(c.vocabulary.size());
  if (m == 0) throw Error(Errc::validation, "corpus: empty vocabulary");
  if (c.embeddings.rows() != m || c.ratings.rows() != m)
    throw Error(Errc::validation, "corpus: row-count mismatch (vocabulary " + std::to_string(m) +
                                      ", embeddings " + std::to_string(c.embeddings.rows()) +
                                      ", ratings " + std::to_string(c.ratings.rows()) + ")");
  if (c.embeddings.cols() < 1) throw Error(Errc::validation, "corpus: embeddings have no columns");
  if (static_cast<std::size_t>(c.ratings.cols()) != c.attribute_names.size() || c.ratings.cols() < 1)
    throw Error(Errc::validation, "corpus: attribute names do not match rating columns");
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < c.vocabulary.size(); ++i) {
    if (c.vocabulary[i].empty())
      throw Error(Errc::validation, "corpus: empty word at line " + std::to_string(i + 1));
    if (!seen.insert(c.vocabulary[i]).second)
      throw Error(Errc::validation, "corpus: duplicate word '" + c.vocabulary[i] + "'");
  }
  require_finite(c.embeddings, "corpus embeddings");
  for (Eigen::Index i = 0; i < c.ratings.rows(); ++i)
    for (Eigen::Index b = 0; b < c.ratings.cols(); ++b) {
      const double r = c.ratings(i, b);
      if (!(r >= kRatingMin && r <= kRatingMax))
        throw Error(Errc::validation, "corpus: rating " + format_double(r) + " for word '" +
                                          c.vocabulary[static_cast<std::size_t>(i)] + "' (" +
                                          c.attribute_names[static_cast<std::size_t>(b)] +
                                          ") outside [1, 7]");
    }
}

struct RatingsTable {
  std::vector<std::string> words;
  std::vector<std::string> attribute_names;
  Matrix values;
};

/// TSV with header `word<TAB>attr_1<TAB>...<TAB>attr_N`.
inline RatingsTable read_ratings_tsv(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw Error(Errc::validation, path.string() + ": empty ratings file");
  const auto header = split_tabs(lines[0]);
  if (header.size() < 2 || header[0] != "word")
    throw Error(Errc::validation, path.string() + ": header must be 'word<TAB>attribute...'");
  RatingsTable t;
  for (std::size_t i = 1; i < header.size(); ++i) t.attribute_names.emplace_back(header[i]);
  std::vector<std::vector<double>> rows;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const auto fields = split_tabs(lines[ln]);
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    if (fields.size() != header.size())
      throw Error(Errc::validation, where + ": expected " + std::to_string(header.size()) +
                                        " fields, got " + std::to_string(fields.size()));
    t.words.emplace_back(fields[0]);
    std::vector<double> row;
    for (std::size_t i = 1; i < fields.size(); ++i) row.push_back(parse_double(fields[i], where));
    rows.push_back(std::move(row));
  }
  t.values.resize(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(t.attribute_names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t b = 0; b < rows[i].size(); ++b)
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) = rows[i][b];
  return t;
}

inline void write_ratings_tsv(const fs::path& path, const std::vector<std::string>& words,
                              const std::vector<std::string>& attributes, const Matrix& values) {
  std::string out = "word";
  for (const auto& a : attributes) out += "\t" + a;
  out += "\n";
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    out += words[static_cast<std::size_t>(i)];
    for (Eigen::Index b = 0; b < values.cols(); ++b) out += "\t" + format_double(values(i, b));
    out += "\n";
  }
  write_file_bytes(path, out);
}

inline std::vector<std::string> read_vocabulary(const fs::path& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

inline void write_vocabulary(const fs::path& path, const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += w + "\n";
  write_file_bytes(path, out);
}

inline CorpusBundle load_corpus(const fs::path& vocab_path, const fs::path& embeddings_path,
                                const fs::path& ratings_path) {
  CorpusBundle c;
  c.vocabulary = read_vocabulary(vocab_path);
  c.embeddings = read_matrix(embeddings_path);
  RatingsTable table = read_ratings_tsv(ratings_path);
  if (table.words.size() != c.vocabulary.size())
    throw Error(Errc::validation, "corpus: row-count mismatch (vocabulary " +
                                      std::to_string(c.vocabulary.size()) + ", ratings " +
                                      std::to_string(table.words.size()) + ")");
  for (std::size_t i = 0; i < table.words.size(); ++i)
    if (table.words[i] != c.vocabulary[i])
      throw Error(Errc::validation, "corpus: ratings row " + std::to_string(i + 1) + " is '" +
                                        table.words[i] + "', vocabulary has '" + c.vocabulary[i] +
                                        "'");
  c.ratings = std::move(table.values);
  c.attribute_names = std::move(table.attribute_names);
  validate_corpus(c);
  return c;
}

inline void save_corpus(const CorpusBundle& c, const fs::path& vocab_path,
                        const fs::path& embeddings_path, const fs::path& ratings_path) {
  validate_corpus(c);
  write_vocabulary(vocab_path, c.vocabulary);
  write_matrix(embeddings_path, c.embeddings);
  write_ratings_tsv(ratings_path, c.vocabulary, c.attribute_names, c.ratings);
}

struct ReducedCorpus {
  CorpusBundle bundle;
  PcaModel pca;
};

/// Replaces the embeddings with their PCA scores, keeping enough components
/// to explain `ratio` of the variance. Word order and ratings are untouched.
inline ReducedCorpus reduce_embeddings(const CorpusBundle& bundle, double ratio = 0.8) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw Error(Errc::validation, "reduce_embeddings: ratio must lie in (0, 1]");
  ReducedCorpus out;
  out.pca = pca_fit(bundle.embeddings, ratio);
  out.bundle = bundle;
  out.bundle.embeddings = pca_transform(out.pca, bundle.embeddings);
  return out;
}

inline void write_pca(const fs::path& dir, const PcaModel& pca) {
  write_matrix(dir / "pca_mean.sdm", Matrix(pca.mean.transpose()));
  write_matrix(dir / "pca_components.sdm", pca.components);
  Matrix var(2, pca.size());
  var.row(0) = pca.explained_variance.transpose();
  var.row(1) = pca.explained_ratio.transpose();
  write_matrix(dir / "pca_variance.sdm", var);
}

inline PcaModel read_pca(const fs::path& dir) {
  PcaModel pca;
  pca.mean = read_matrix(dir / "pca_mean.sdm").row(0).transpose();
  pca.components = read_matrix(dir / "pca_components.sdm");
  const Matrix var = read_matrix(dir / "pca_variance.sdm");
  pca.explained_variance = var.row(0).transpose();
  pca.explained_ratio = var.row(1).transpose();
  return pca;
}

// ---------------------------------------------------------------------------
// Stimulus runs

struct WordEvent {
  std::size_t word_id = 0;
  double onset = 0.0;     // seconds
  double duration = 0.0;  // seconds
};

struct StimulusRun {
  std::vector<WordEvent> words;
  double tr = 0.0;
  Eigen::Index n_volumes = 0;
  Matrix nuisance;  // n_volumes x 14
  Matrix bold;      // n_volumes x G

  double scan_length() const { return tr * static_cast<double>(n_volumes); }
};

inline void validate_run(const StimulusRun& run, const std::string& origin = "run") {
  if (!(run.tr > 0.0) || !std::isfinite(run.tr))
    throw Error(Errc::validation, origin + ": TR must be positive");
  if (run.n_volumes < 1) throw Error(Errc::validation, origin + ": no volumes");
  if (run.nuisance.cols() != kNuisanceColumns)
    throw Error(Errc::validation, origin + ": nuisance has " + std::to_string(run.nuisance.cols()) +
                                      " columns, expected 14");
  if (run.nuisance.rows() != run.n_volumes)
    throw Error(Errc::validation, origin + ": nuisance rows " + std::to_string(run.nuisance.rows()) +
                                      " != volumes " + std::to_string(run.n_volumes));
  if (run.bold.rows() != run.n_volumes)
    throw Error(Errc::validation, origin + ": bold rows " + std::to_string(run.bold.rows()) +
                                      " != volumes " + std::to_string(run.n_volumes));
  require_finite(run.nuisance, origin + " nuisance");
  require_finite(run.bold, origin + " bold");
  const double end = run.scan_length();
  for (std::size_t i = 0; i < run.words.size(); ++i) {
    const auto& w = run.words[i];
    const std::string where = origin + " timeline row " + std::to_string(i + 1);
    if (!std::isfinite(w.onset) || !std::isfinite(w.duration) || w.onset < 0.0 || w.duration < 0.0)
      throw Error(Errc::validation, where + ": onset/duration must be finite and >= 0");
    if (i > 0 && !(w.onset > run.words[i - 1].onset))
      throw Error(Errc::validation, where + ": onsets must be strictly increasing");
    if (w.onset + w.duration > end)
      throw Error(Errc::validation, where + ": event ends at " + format_double(w.onset + w.duration) +
                                        " s, after scan end " + format_double(end) + " s");
  }
}

/// TSV with header `word_id<TAB>onset<TAB>duration`.
inline std::vector<WordEvent> read_timeline_tsv(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw Error(Errc::validation, path.string() + ": empty timeline file");
  const auto header = split_tabs(lines[0]);
  if (header.size() != 3 || header[0] != "word_id" || header[1] != "onset" || header[2] != "duration")
    throw Error(Errc::validation, path.string() + ": header must be 'word_id<TAB>onset<TAB>duration'");
  std::vector<WordEvent> words;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const auto f = split_tabs(lines[ln]);
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    if (f.size() != 3) throw Error(Errc::validation, where + ": expected 3 columns");
    words.push_back({parse_index(f[0], where), parse_double(f[1], where), parse_double(f[2], where)});
  }
  return words;
}

inline void write_timeline_tsv(const fs::path& path, const std::vector<WordEvent>& words) {
  std::string out = "word_id\tonset\tduration\n";
  for (const auto& w : words)
    out += std::to_string(w.word_id) + "\t" + format_double(w.onset) + "\t" +
           format_double(w.duration) + "\n";
  write_file_bytes(path, out);
}

inline StimulusRun load_run(const fs::path& timeline_tsv, const fs::path& nuisance_path,
                            const fs::path& bold_path, double tr) {
  StimulusRun run;
  run.words = read_timeline_tsv(timeline_tsv);
  run.nuisance = read_matrix(nuisance_path);
  run.bold = read_matrix(bold_path);
  run.tr = tr;
  run.n_volumes = run.nuisance.rows();
  validate_run(run, timeline_tsv.parent_path().string());
  return run;
}

inline void save_run(const StimulusRun& run, const fs::path& dir) {
  write_timeline_tsv(dir / "timeline.tsv", run.words);
  write_matrix(dir / "nuisance.sdm", run.nuisance);
  write_matrix(dir / "bold.sdm", run.bold);
}

// ---------------------------------------------------------------------------
// Dataset report

struct DatasetReport {
  std::size_t tokens = 0;            // timeline events over all runs
  std::size_t distinct_words = 0;    // unique word ids used by the timelines
  std::size_t vocabulary_size = 0;   // M
  std::size_t embedding_dim = 0;     // h
  std::size_t attributes = 0;        // N
  std::size_t runs = 0;
  std::size_t volumes = 0;           // summed over runs
  std::size_t voxels = 0;            // G (max over runs)
  std::vector<std::string> violations;

  bool clean() const { return violations.empty(); }

  nlohmann::json to_json() const {
    return {{"tokens", tokens},         {"distinct_words", distinct_words},
            {"vocabulary_size", vocabulary_size}, {"embedding_dim", embedding_dim},
            {"attributes", attributes}, {"runs", runs},
            {"volumes", volumes},       {"voxels", voxels},
            {"violations", violations}};
  }
};

/// Never throws on bad data; every problem becomes a violation line.
inline DatasetReport validate_dataset(const CorpusBundle& bundle, const std::vector<StimulusRun>& runs) {
  DatasetReport rep;
  rep.vocabulary_size = bundle.vocabulary.size();
  rep.embedding_dim = static_cast<std::size_t>(bundle.embeddings.cols());
  rep.attributes = static_cast<std::size_t>(bundle.ratings.cols());
  rep.runs = runs.size();
  try {
    validate_corpus(bundle);
  } catch (const Error& e) {
    rep.violations.emplace_back(e.what());
  }
  std::set<std::size_t> distinct;
  std::optional<Eigen::Index> voxels;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& run = runs[r];
    const std::string origin = "run " + std::to_string(r);
    rep.tokens += run.words.size();
    rep.volumes += static_cast<std::size_t>(std::max<Eigen::Index>(run.n_volumes, 0));
    rep.voxels = std::max(rep.voxels, static_cast<std::size_t>(run.bold.cols()));
    if (voxels && *voxels != run.bold.cols())
      rep.violations.push_back(origin + ": voxel count " + std::to_string(run.bold.cols()) +
                               " differs from earlier runs (" + std::to_string(*voxels) + ")");
    voxels = run.bold.cols();
    try {
      validate_run(run, origin);
    } catch (const Error& e) {
      rep.violations.emplace_back(e.what());
    }
    for (std::size_t i = 0; i < run.words.size(); ++i) {
      const auto id = run.words[i].word_id;
      distinct.insert(id);
      if (id >= bundle.vocabulary.size())
        rep.violations.push_back(origin + " timeline row " + std::to_string(i + 1) + ": word_id " +
                                 std::to_string(id) + " >= vocabulary size " +
                                 std::to_string(bundle.vocabulary.size()));
    }
  }
  rep.distinct_words = distinct.size();
  return rep;
}

}  // namespace subdim

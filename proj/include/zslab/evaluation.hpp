#pragma once

#include "zslab/codec.hpp"
#include "zslab/training.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace zslab {

/// Average cosine distance along the DTW path, steps {(1,0),(0,1),(1,1)}.
/// The path minimizes the summed cost (ties to the shorter path) and the sum
/// is divided by its length. Rows are frames.
double dtw_cosine(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b);

/// 1 - cos(u, v); two zero vectors are at distance 0, a zero and a non-zero vector at 1.
double cosine_distance(const Eigen::Ref<const Eigen::RowVectorXd>& u, const Eigen::Ref<const Eigen::RowVectorXd>& v);

struct SegmentRef {
  std::string utt;
  Index start_frame = 0;
  Index end_frame = 0;  // exclusive
  std::string label;
  std::string speaker;
};

struct AbxTriple {
  SegmentRef a, b, x;
};

struct AbxTask {
  std::vector<AbxTriple> triples;
};

/// JSON Lines, one {"a": seg, "b": seg, "x": seg} per line.
AbxTask read_abx_task(const std::filesystem::path& path);
void write_abx_task(const std::filesystem::path& path, const AbxTask& task);

/// Whole-utterance representation lookup (frames x d); throws if unknown.
using RepresentationSource = std::function<const Eigen::MatrixXd&(const std::string& utt)>;

struct AbxResult {
  double error_rate = 0;
  std::size_t num_triples = 0;
  std::size_t num_cells = 0;
};

/// Per triple: 1 if d(A,X) > d(B,X), 0.5 on a tie, 0 otherwise. Scores are
/// averaged within (label A, label B, speaker A/B, speaker X) cells and the
/// cell means are macro-averaged.
AbxResult abx_error_rate(const AbxTask& task, const RepresentationSource& source);

/// Entropy rate in bits per second: (M / D) * H over the empirical symbol distribution.
struct SymbolStream {
  std::vector<std::int64_t> symbols;
  double duration = 0;  // seconds
};
double bitrate(const SymbolStream& stream);

/// Concatenates per-utterance sequences, summing their durations.
SymbolStream make_stream(const std::vector<SymbolSequence>& sequences);

// Symbol files: line 1 utterance id, line 2 space-separated ids; metadata in a
// "<file>.json" sidecar.
void write_symbol_file(const std::filesystem::path& path, const SymbolSequence& seq);
SymbolSequence read_symbol_file(const std::filesystem::path& path);

/// Symbol embedding per position repeated `frames_per_symbol` times, giving a
/// frame-rate matrix for latent-level ABX.
Eigen::MatrixXd latent_representation(const CodecModel& model, const SymbolSequence& seq);

struct ReportRow {
  std::string model;
  std::optional<double> abx_latent;
  std::optional<double> abx_output_spkr_cond;
  std::optional<double> abx_output_no_spkr_cond;
  double bitrate = 0;
  double codebook_utilization = 0;  // distinct symbols used / K
};

struct ReportOptions {
  std::string target_speaker;  // empty: the model's first training speaker
};

/// ABX on latent symbols and on decoder outputs (with target-speaker
/// conditioning, and from the unconditioned ablation model when given),
/// plus bitrate and codebook utilization over `test`.
ReportRow eval_report(CodecModel& model, CodecModel* ablation, const AbxTask& task,
                      const std::vector<ManifestEntry>& test, const ReportOptions& options = {},
                      const std::string& name = "model");

/// UTF-8 TSV with a header row; unavailable values print as "NA".
std::string report_tsv(const std::vector<ReportRow>& rows);

}  // namespace zslab

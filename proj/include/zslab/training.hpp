#pragma once

#include "zslab/codec.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace zslab {

/// One line of a JSON Lines manifest: {"id", "wav", "speaker"}.
struct ManifestEntry {
  std::string id;
  std::filesystem::path wav;  // resolved against the manifest's directory
  std::string speaker;
};

/// Throws FormatError with the line number for malformed lines.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct TrainingUtterance {
  std::string id;
  std::string speaker;
  RowMatrix<float> mfcc;   // T x 39, unnormalized
  RowMatrix<float> fbank;  // T x 45
};

struct TrainingCorpus {
  std::vector<TrainingUtterance> utterances;

  /// Distinct speakers in first-appearance order.
  std::vector<std::string> speakers() const;
};

/// Reads every wav and extracts both feature streams. Throws on an empty manifest.
TrainingCorpus load_corpus(const std::vector<ManifestEntry>& manifest, const FeatureConfig& cfg = {});

NormStats compute_norm_stats(const TrainingCorpus& corpus);

/// Fresh model with speakers and MFCC statistics taken from `corpus`.
CodecModel make_model(const CodecConfig& config, const TrainingCorpus& corpus);

/// Random time-aligned crops of `crop_frames` frames from utterances long enough to hold one.
Batch<float> sample_batch(const TrainingCorpus& corpus, const CodecModel& model, CounterRng& rng);

/// Model plus its optimizer; the unit that is checkpointed and resumed.
class Trainer {
 public:
  explicit Trainer(CodecModel model);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;
  Trainer(Trainer&&) = default;
  Trainer& operator=(Trainer&&) = default;

  /// Samples a batch with the model's generator and takes one train_step.
  LossReport step(const TrainingCorpus& corpus);

  CodecModel& model() { return model_; }
  const CodecModel& model() const { return model_; }
  Adam<float>& optimizer() { return optimizer_; }
  const Adam<float>& optimizer() const { return optimizer_; }

 private:
  CodecModel model_;
  Adam<float> optimizer_;
};

// Checkpoint: "ZSCKPT1", u32 version, config JSON blob, named tensors,
// optimizer state, rng state and step, normalization stats.
void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer);
Trainer load_checkpoint(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::int64_t checkpoint_every = 0;     // 0: only the final checkpoint
  std::function<void(std::int64_t step, const LossReport&)> on_step;
};

struct TrainingRun {
  std::vector<LossReport> losses;  // one per step taken in this call
  std::vector<std::filesystem::path> checkpoints;
};

/// Trains from the trainer's current step up to config.training.total_steps.
/// Checkpoints are named step_<000000>.zsckpt inside the checkpoint dir.
TrainingRun run_training(Trainer& trainer, const TrainingCorpus& corpus, const RunOptions& options = {});

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step);

}  // namespace zslab

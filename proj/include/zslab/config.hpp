#pragma once

#include "zslab/bottleneck.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace zslab {

enum class BottleneckKind { STE, VQVAE, CATVAE };

const char* to_string(BottleneckKind kind);
BottleneckKind parse_bottleneck_kind(const std::string& name);

struct TrainingOptions {
  double lr = 4e-4;
  int batch_size = 32;
  int crop_frames = 128;
  std::int64_t total_steps = 50000;
  std::int64_t checkpoint_every = 5000;
  std::uint64_t seed = 0;
};

/// Hyperparameters of the encoder / bottleneck / decoder stack.
struct CodecConfig {
  BottleneckKind bottleneck = BottleneckKind::VQVAE;
  int num_symbols = 512;  // K; STE uses log2(K) bits
  int downsample_factor = 4;
  int channels = 768;
  int embedding_dim = 64;      // VQ codebook row size
  int speaker_embed_dim = 128;  // 250 is the STE default
  bool speaker_conditioning = true;
  double sigma = 1e-6;
  double beta = 25.0;
  bool paper_literal_loss = false;
  AnnealSchedule anneal{1.0, 0.1, 40000};
  TrainingOptions training;

  static constexpr int kInputDim = 39;
  static constexpr int kOutputDim = 45;

  /// Defaults for a bottleneck kind, including its speaker embedding size.
  static CodecConfig defaults(BottleneckKind kind);

  int ste_bits() const;
  int num_downsample_layers() const;
  /// Channel count of h and z.
  int latent_dim() const;
  int effective_speaker_dim() const { return speaker_conditioning ? speaker_embed_dim : 0; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const CodecConfig& c);
/// Strict: unknown keys are rejected; missing keys keep `defaults(kind)` values.
void from_json(const nlohmann::json& j, CodecConfig& c);

/// Canonical serialization (sorted keys, no whitespace).
std::string canonical_json(const CodecConfig& c);

}  // namespace zslab

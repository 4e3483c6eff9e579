#pragma once

#include "zslab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zslab {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Waveform {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate = 16000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

enum class FeatureKind { MFCC39, FBANK45 };

inline Index feature_dim(FeatureKind kind) { return kind == FeatureKind::MFCC39 ? 39 : 45; }
const char* to_string(FeatureKind kind);
FeatureKind parse_feature_kind(const std::string& name);

/// Frames of one utterance, T x d, row-major.
struct FeatureSequence {
  RowMatrix<float> frames;
  FeatureKind kind = FeatureKind::MFCC39;
  double frame_shift = 0.01;
  std::string utterance_id;
  std::string speaker_id;

  Index num_frames() const { return frames.rows(); }
  Index dim() const { return frames.cols(); }
};

struct FeatureConfig {
  int sample_rate = 16000;
  int window = 400;  // 25 ms
  int hop = 160;     // 10 ms
  int fft_size = 1024;
  int mfcc_mel_bins = 40;
  int num_ceps = 13;
  int fbank_mel_bins = 45;
  double low_freq = 0.0;
  double high_freq = 8000.0;
  int delta_window = 2;
  double energy_floor = 1e-10;

  double frame_shift() const { return static_cast<double>(hop) / sample_rate; }
};

// WAV I/O (PCM16 mono).
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wave);

/// 1 + floor((S - window) / hop); throws when S < window.
Index num_frames(Index num_samples, const FeatureConfig& cfg);

/// Triangular Mel filters on the one-sided power spectrum, [bins, fft/2 + 1].
RowMatrix<double> mel_filterbank(int num_bins, const FeatureConfig& cfg);

/// Regression deltas with edge replication:
/// d_t = sum_{n=1..N} n (c_{t+n} - c_{t-n}) / (2 sum n^2).
RowMatrix<double> compute_deltas(const Eigen::Ref<const RowMatrix<double>>& feats, int window);

/// 13 cepstra (C0 replaced by log frame energy) plus deltas and double deltas.
FeatureSequence mfcc39(const Waveform& wave, const FeatureConfig& cfg = {});

/// 45 log-Mel energies, same framing as mfcc39.
FeatureSequence fbank45(const Waveform& wave, const FeatureConfig& cfg = {});

/// mu-law companding into `channels` codes with mu = channels - 1. Samples
/// outside [-1, 1] are clamped; the number clamped is returned through
/// `clamped` when provided.
std::vector<int> mulaw_encode(std::span<const float> samples, int channels = 256, std::size_t* clamped = nullptr);
std::vector<float> mulaw_decode(std::span<const int> codes, int channels = 256);

// Feature files: "ZSFEAT1", u32 T, u32 d, f32 frame_shift, T*d f32, little endian.
void write_features(const std::filesystem::path& path, const FeatureSequence& feats);
FeatureSequence read_features(const std::filesystem::path& path);

}  // namespace zslab

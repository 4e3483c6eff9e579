#include "zslab/features.hpp"

#include "binary_io.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <iostream>
#include <numbers>

namespace zslab {

const char* to_string(FeatureKind kind) { return kind == FeatureKind::MFCC39 ? "mfcc39" : "fbank45"; }

FeatureKind parse_feature_kind(const std::string& name) {
  if (name == "mfcc39") return FeatureKind::MFCC39;
  if (name == "fbank45") return FeatureKind::FBANK45;
  throw std::invalid_argument("unknown feature kind '" + name + "' (expected mfcc39 or fbank45)");
}

// ---------------------------------------------------------------------------
// WAV

Waveform read_wav(const std::filesystem::path& path) {
  io::Reader<FormatError> in(path);
  const auto where = path.string() + ": ";
  if (in.raw(4) != "RIFF") throw FormatError(where + "missing RIFF header");
  in.u32();
  if (in.raw(4) != "WAVE") throw FormatError(where + "not a WAVE file");

  bool have_fmt = false;
  Waveform wave;
  for (;;) {
    if (in.at_end()) throw FormatError(where + "no data chunk");
    const std::string id = in.raw(4);
    const std::uint32_t size = in.u32();
    if (id == "fmt ") {
      if (size < 16) throw FormatError(where + "fmt chunk too short");
      const auto format = in.pod<std::uint16_t>();
      const auto channels = in.pod<std::uint16_t>();
      const auto rate = in.u32();
      in.u32();  // byte rate
      in.pod<std::uint16_t>();  // block align
      const auto bits = in.pod<std::uint16_t>();
      in.raw(size - 16 + (size & 1));
      if (format != 1) throw FormatError(where + "unsupported encoding (format tag " + std::to_string(format) + "), expected PCM");
      if (channels != 1) throw FormatError(where + "expected mono, got " + std::to_string(channels) + " channels");
      if (bits != 16) throw FormatError(where + "expected 16-bit samples, got " + std::to_string(bits));
      if (rate == 0) throw FormatError(where + "zero sample rate");
      wave.sample_rate = static_cast<int>(rate);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(where + "data chunk before fmt chunk");
      if (size % 2) throw FormatError(where + "odd data chunk size for 16-bit samples");
      std::vector<std::int16_t> pcm(size / 2);
      in.bytes(pcm.data(), size);
      wave.samples.resize(pcm.size());
      for (std::size_t i = 0; i < pcm.size(); ++i) wave.samples[i] = static_cast<float>(pcm[i]) / 32768.0f;
      return wave;
    } else {
      in.raw(size + (size & 1));
    }
  }
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  io::Writer out(path);
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out.raw("RIFF");
  out.u32(36 + data_bytes);
  out.raw("WAVE");
  out.raw("fmt ");
  out.u32(16);
  out.pod<std::uint16_t>(1);
  out.pod<std::uint16_t>(1);
  out.u32(static_cast<std::uint32_t>(wave.sample_rate));
  out.u32(static_cast<std::uint32_t>(wave.sample_rate) * 2);
  out.pod<std::uint16_t>(2);
  out.pod<std::uint16_t>(16);
  out.raw("data");
  out.u32(data_bytes);
  for (float s : wave.samples) {
    const float scaled = std::round(s * 32768.0f);
    out.pod(static_cast<std::int16_t>(std::clamp(scaled, -32768.0f, 32767.0f)));
  }
  out.close();
}

// ---------------------------------------------------------------------------
// Framing and spectra

Index num_frames(Index num_samples, const FeatureConfig& cfg) {
  if (num_samples < cfg.window)
    throw std::invalid_argument("utterance of " + std::to_string(num_samples) + " samples is shorter than one " +
                                std::to_string(cfg.window) + "-sample window");
  return 1 + (num_samples - cfg.window) / cfg.hop;
}

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

struct Frames {
  RowMatrix<double> power;  // T x (fft/2 + 1)
  Eigen::VectorXd log_energy;
};

Frames power_spectra(const Waveform& wave, const FeatureConfig& cfg) {
  if (wave.sample_rate != cfg.sample_rate)
    throw std::invalid_argument("sample rate " + std::to_string(wave.sample_rate) + " Hz, expected " +
                                std::to_string(cfg.sample_rate) + " Hz");
  const Index t_count = num_frames(static_cast<Index>(wave.samples.size()), cfg);
  const Index bins = cfg.fft_size / 2 + 1;

  Eigen::ArrayXd window(cfg.window);
  for (int n = 0; n < cfg.window; ++n)
    window[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (cfg.window - 1));

  Frames out{RowMatrix<double>(t_count, bins), Eigen::VectorXd(t_count)};
  Eigen::FFT<double> fft;
  std::vector<double> buf(static_cast<std::size_t>(cfg.fft_size), 0.0);
  std::vector<std::complex<double>> spec;
  for (Index t = 0; t < t_count; ++t) {
    const float* src = wave.samples.data() + t * cfg.hop;
    double energy = 0;
    for (int n = 0; n < cfg.window; ++n) {
      energy += static_cast<double>(src[n]) * src[n];
      buf[static_cast<std::size_t>(n)] = src[n] * window[n];
    }
    out.log_energy[t] = std::log(std::max(energy, cfg.energy_floor));
    fft.fwd(spec, buf);
    for (Index k = 0; k < bins; ++k) out.power(t, k) = std::norm(spec[static_cast<std::size_t>(k)]);
  }
  return out;
}

RowMatrix<double> log_mel(const RowMatrix<double>& power, const RowMatrix<double>& filters, double floor) {
  RowMatrix<double> mel = power * filters.transpose();
  return mel.array().max(floor).log().matrix();
}

}  // namespace

RowMatrix<double> mel_filterbank(int num_bins, const FeatureConfig& cfg) {
  const Index bins = cfg.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.low_freq), mel_hi = hz_to_mel(cfg.high_freq);
  std::vector<double> edges(static_cast<std::size_t>(num_bins) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (num_bins + 1);

  RowMatrix<double> fb = RowMatrix<double>::Zero(num_bins, bins);
  for (int m = 0; m < num_bins; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    for (Index k = 0; k < bins; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * cfg.sample_rate / cfg.fft_size);
      const double w = std::min((mel - lo) / (center - lo), (hi - mel) / (hi - center));
      if (w > 0) fb(m, k) = w;
    }
  }
  return fb;
}

RowMatrix<double> compute_deltas(const Eigen::Ref<const RowMatrix<double>>& feats, int window) {
  const Index t_count = feats.rows();
  double denom = 0;
  for (int n = 1; n <= window; ++n) denom += 2.0 * n * n;
  RowMatrix<double> d = RowMatrix<double>::Zero(t_count, feats.cols());
  for (Index t = 0; t < t_count; ++t)
    for (int n = 1; n <= window; ++n) {
      const Index ahead = std::min<Index>(t + n, t_count - 1);
      const Index behind = std::max<Index>(t - n, 0);
      d.row(t) += n * (feats.row(ahead) - feats.row(behind));
    }
  return d / denom;
}

FeatureSequence mfcc39(const Waveform& wave, const FeatureConfig& cfg) {
  const Frames frames = power_spectra(wave, cfg);
  const RowMatrix<double> logmel = log_mel(frames.power, mel_filterbank(cfg.mfcc_mel_bins, cfg), cfg.energy_floor);

  // Orthonormal DCT-II.
  const int m = cfg.mfcc_mel_bins;
  RowMatrix<double> dct(cfg.num_ceps, m);
  for (int n = 0; n < cfg.num_ceps; ++n)
    for (int j = 0; j < m; ++j)
      dct(n, j) = std::sqrt((n == 0 ? 1.0 : 2.0) / m) * std::cos(std::numbers::pi * n * (j + 0.5) / m);
  RowMatrix<double> ceps = logmel * dct.transpose();
  ceps.col(0) = frames.log_energy;

  const RowMatrix<double> d1 = compute_deltas(ceps, cfg.delta_window);
  const RowMatrix<double> d2 = compute_deltas(d1, cfg.delta_window);
  FeatureSequence out;
  out.kind = FeatureKind::MFCC39;
  out.frame_shift = cfg.frame_shift();
  out.frames.resize(ceps.rows(), 3 * cfg.num_ceps);
  out.frames << ceps.cast<float>(), d1.cast<float>(), d2.cast<float>();
  return out;
}

FeatureSequence fbank45(const Waveform& wave, const FeatureConfig& cfg) {
  const Frames frames = power_spectra(wave, cfg);
  FeatureSequence out;
  out.kind = FeatureKind::FBANK45;
  out.frame_shift = cfg.frame_shift();
  out.frames = log_mel(frames.power, mel_filterbank(cfg.fbank_mel_bins, cfg), cfg.energy_floor).cast<float>();
  return out;
}

// ---------------------------------------------------------------------------
// mu-law

std::vector<int> mulaw_encode(std::span<const float> samples, int channels, std::size_t* clamped) {
  if (channels < 2) throw std::invalid_argument("mulaw_encode: need at least two channels");
  const double mu = channels - 1;
  const double log1p_mu = std::log1p(mu);
  std::size_t n_clamped = 0;
  std::vector<int> codes;
  codes.reserve(samples.size());
  for (float s : samples) {
    double x = s;
    if (!(std::abs(x) <= 1.0)) {
      ++n_clamped;
      x = std::isnan(x) ? 0.0 : std::clamp(x, -1.0, 1.0);
    }
    const double f = std::copysign(std::log1p(mu * std::abs(x)) / log1p_mu, x);
    codes.push_back(static_cast<int>(std::floor((f + 1.0) / 2.0 * mu + 0.5)));
  }
  if (n_clamped > 0) std::clog << "warning: mulaw_encode clamped " << n_clamped << " out-of-range samples\n";
  if (clamped) *clamped = n_clamped;
  return codes;
}

std::vector<float> mulaw_decode(std::span<const int> codes, int channels) {
  const double mu = channels - 1;
  std::vector<float> out;
  out.reserve(codes.size());
  for (int c : codes) {
    if (c < 0 || c >= channels) throw std::out_of_range("mulaw_decode: code " + std::to_string(c) + " out of range");
    const double f = 2.0 * c / mu - 1.0;
    out.push_back(static_cast<float>(std::copysign((std::pow(1.0 + mu, std::abs(f)) - 1.0) / mu, f)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files

namespace {
constexpr std::string_view kFeatMagic = "ZSFEAT1";
}

void write_features(const std::filesystem::path& path, const FeatureSequence& feats) {
  io::Writer out(path);
  out.raw(kFeatMagic);
  out.u32(static_cast<std::uint32_t>(feats.num_frames()));
  out.u32(static_cast<std::uint32_t>(feats.dim()));
  out.f32(static_cast<float>(feats.frame_shift));
  out.bytes(feats.frames.data(), static_cast<std::size_t>(feats.frames.size()) * sizeof(float));
  out.close();
}

FeatureSequence read_features(const std::filesystem::path& path) {
  io::Reader<FormatError> in(path);
  if (in.raw(kFeatMagic.size()) != kFeatMagic) throw FormatError(path.string() + ": bad magic, not a ZSFEAT1 file");
  const auto t_count = in.u32();
  const auto dim = in.u32();
  FeatureSequence out;
  out.frame_shift = in.f32();
  if (dim == 39)
    out.kind = FeatureKind::MFCC39;
  else if (dim == 45)
    out.kind = FeatureKind::FBANK45;
  else
    throw FormatError(path.string() + ": unsupported feature dimension " + std::to_string(dim));
  out.frames.resize(t_count, dim);
  in.bytes(out.frames.data(), static_cast<std::size_t>(t_count) * dim * sizeof(float));
  out.utterance_id = path.stem().string();
  return out;
}

}  // namespace zslab

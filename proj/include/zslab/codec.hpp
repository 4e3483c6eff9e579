#pragma once

#include "zslab/bottleneck.hpp"
#include "zslab/config.hpp"
#include "zslab/features.hpp"
#include "zslab/layers.hpp"
#include "zslab/optim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace zslab {

/// Per-dimension MFCC normalization statistics.
struct NormStats {
  Eigen::VectorXf mean = Eigen::VectorXf::Zero(CodecConfig::kInputDim);
  Eigen::VectorXf stddev = Eigen::VectorXf::Ones(CodecConfig::kInputDim);
};

/// Discrete unit sequence of one utterance at the downsampled rate.
struct SymbolSequence {
  std::string utterance_id;
  std::vector<std::int64_t> symbol_ids;
  int frames_per_symbol = 4;
  double frame_shift = 0.01;
  Index num_frames = 0;  // input frames before padding

  double duration() const { return static_cast<double>(num_frames) * frame_shift; }
};

struct LossReport {
  double recon = 0;  // sum over frames of ||y - yhat||^2
  double aux = 0;    // codebook + commitment (VQ-VAE), KL (CatVAE), 0 (STE)
  double total = 0;  // the optimized objective
};

/// Convolutional encoder, discretization bottleneck and speaker-conditioned
/// deconvolutional decoder. Parameter names under "encoder." and "codebook"
/// never depend on speaker identity; the speaker table lives in the decoder.
template <typename Scalar>
class BasicCodecModel {
 public:
  struct Forward {
    Tensor<Scalar> h;  // [B, d, N]
    BottleneckOutput<Scalar> bottleneck;  // z as [B, d, N]
    Tensor<Scalar> y_hat;  // [B, 45, N * downsample]
  };

  BasicCodecModel(CodecConfig config, std::vector<std::string> speakers, NormStats norm = {})
      : config_(std::move(config)), speakers_(std::move(speakers)), norm_(std::move(norm)) {
    config_.validate();
    if (config_.effective_speaker_dim() > 0 && speakers_.empty())
      throw std::invalid_argument("speaker-conditioned model needs at least one training speaker");
    CounterRng init = CounterRng(config_.training.seed).split(1);
    rng_ = CounterRng(config_.training.seed).split(2);

    const Index c = config_.channels, d = config_.latent_dim();
    enc_pre_ = Conv1d<Scalar>(CodecConfig::kInputDim, c, 3, 1, 1, init);
    for (int i = 0; i < config_.num_downsample_layers(); ++i) enc_down_.emplace_back(c, c, 4, 2, 1, init);
    for (auto& block : enc_res_) block = ResidualBlock<Scalar>(c, init);
    enc_proj_ = Conv1d<Scalar>(c, d, 1, 1, 0, init);

    if (config_.bottleneck == BottleneckKind::VQVAE) {
      const double bound = 1.0 / config_.num_symbols;
      codebook_ = uniform_parameter<Scalar>({config_.num_symbols, config_.embedding_dim}, bound, init);
    }

    const Index e = config_.effective_speaker_dim();
    if (e > 0) speaker_table_ = uniform_parameter<Scalar>({static_cast<Index>(speakers_.size()), e}, 1.0, init);
    dec_in_ = Conv1d<Scalar>(d + e, c, 3, 1, 1, init);
    for (auto& block : dec_res_) block = ResidualBlock<Scalar>(c, init);
    for (int i = 0; i < config_.num_downsample_layers(); ++i) dec_up_.emplace_back(c, c, 4, 2, 1, init);
    dec_out_ = Conv1d<Scalar>(c, CodecConfig::kOutputDim, 1, 1, 0, init);
  }

  const CodecConfig& config() const { return config_; }
  CodecConfig& mutable_config() { return config_; }
  const std::vector<std::string>& speakers() const { return speakers_; }
  const NormStats& norm() const { return norm_; }
  CounterRng& rng() { return rng_; }
  const CounterRng& rng() const { return rng_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }
  bool speaker_conditioned() const { return config_.effective_speaker_dim() > 0; }

  int speaker_index(const std::string& id) const {
    auto it = std::find(speakers_.begin(), speakers_.end(), id);
    if (it == speakers_.end()) {
      std::string known;
      for (const auto& s : speakers_) known += (known.empty() ? "" : ", ") + s;
      throw std::invalid_argument("unknown speaker '" + id + "'; known speakers: " + known);
    }
    return static_cast<int>(it - speakers_.begin());
  }

  NamedTensors<Scalar> encoder_parameters() const {
    NamedTensors<Scalar> p;
    enc_pre_.collect("encoder.pre", p);
    for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect("encoder.down" + std::to_string(i), p);
    for (std::size_t i = 0; i < enc_res_.size(); ++i) enc_res_[i].collect("encoder.res" + std::to_string(i), p);
    enc_proj_.collect("encoder.proj", p);
    if (codebook_.defined()) p.emplace_back("codebook", codebook_);
    return p;
  }

  NamedTensors<Scalar> parameters() const {
    NamedTensors<Scalar> p = encoder_parameters();
    if (speaker_table_.defined()) p.emplace_back("decoder.speaker_embedding", speaker_table_);
    dec_in_.collect("decoder.in", p);
    for (std::size_t i = 0; i < dec_res_.size(); ++i) dec_res_[i].collect("decoder.res" + std::to_string(i), p);
    for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect("decoder.up" + std::to_string(i), p);
    dec_out_.collect("decoder.out", p);
    return p;
  }

  NamedTensors<Scalar> buffers() const {
    NamedTensors<Scalar> b;
    for (std::size_t i = 0; i < enc_res_.size(); ++i) enc_res_[i].collect_buffers("encoder.res" + std::to_string(i), b);
    for (std::size_t i = 0; i < dec_res_.size(); ++i) dec_res_[i].collect_buffers("decoder.res" + std::to_string(i), b);
    return b;
  }

  std::vector<Tensor<Scalar>> parameter_tensors() const {
    std::vector<Tensor<Scalar>> out;
    for (auto& [_, t] : parameters()) out.push_back(t);
    return out;
  }

  /// x [B, 39, T] normalized MFCCs, T a multiple of the downsample factor.
  Tensor<Scalar> encode_continuous(const Tensor<Scalar>& x, bool training) {
    Tensor<Scalar> y = relu(enc_pre_(x));
    for (const auto& conv : enc_down_) y = relu(conv(y));
    for (auto& block : enc_res_) y = block(y, training);
    y = enc_proj_(y);
    return config_.bottleneck == BottleneckKind::STE ? zslab::tanh(y) : y;
  }

  /// Discretizes h [B, d, N]; z comes back as [B, d, N].
  BottleneckOutput<Scalar> discretize(const Tensor<Scalar>& h, Mode mode) {
    const Index batch = h.dim(0), d = h.dim(1), n = h.dim(2);
    const Tensor<Scalar> rows = reshape(swap_last_axes(h), {batch * n, d});
    BottleneckOutput<Scalar> out;
    switch (config_.bottleneck) {
      case BottleneckKind::STE: out = ste_binarize(rows, mode, rng_); break;
      case BottleneckKind::VQVAE: out = vq_quantize(rows, codebook_, static_cast<Scalar>(config_.beta)); break;
      case BottleneckKind::CATVAE:
        out = catvae_sample(rows, config_.anneal.tau(step_), mode, rng_);
        out.aux_loss = catvae_kl(rows);
        break;
    }
    out.z = swap_last_axes(reshape(out.z, {batch, n, d}));
    return out;
  }

  /// z [B, d, N] -> [B, 45, N * downsample]. `speakers` holds one table index
  /// per batch row and is ignored by an unconditioned model.
  Tensor<Scalar> decode_latent(const Tensor<Scalar>& z, std::span<const int> speakers, bool training) {
    Tensor<Scalar> y = z;
    if (speaker_conditioned()) {
      if (static_cast<Index>(speakers.size()) != z.dim(0))
        throw std::invalid_argument("decode: need one speaker per batch row");
      std::vector<std::int64_t> ids(speakers.begin(), speakers.end());
      for (auto id : ids)
        if (id < 0 || id >= static_cast<std::int64_t>(speakers_.size()))
          throw std::invalid_argument("decode: speaker index out of range");
      y = concat_channels(y, broadcast_time(gather_rows(speaker_table_, ids), z.dim(2)));
    }
    y = relu(dec_in_(y));
    for (auto& block : dec_res_) y = block(y, training);
    for (const auto& conv : dec_up_) y = relu(conv(y));
    return dec_out_(y);
  }

  Forward forward(const Tensor<Scalar>& x, std::span<const int> speakers, Mode mode) {
    const bool training = mode == Mode::Train;
    Forward f;
    f.h = encode_continuous(x, training);
    f.bottleneck = discretize(f.h, mode);
    f.y_hat = decode_latent(f.bottleneck.z, speakers, training);
    return f;
  }

  /// Latent vectors for given symbol ids: codebook rows (VQ-VAE), one-hot
  /// vectors (CatVAE) or ±1 sign patterns (STE). Returns [1, d, N].
  Tensor<Scalar> symbols_to_latent(std::span<const std::int64_t> ids) const {
    const Index n = static_cast<Index>(ids.size()), d = config_.latent_dim();
    RowMatrix<Scalar> rows = RowMatrix<Scalar>::Zero(n, d);
    for (Index i = 0; i < n; ++i) {
      const std::int64_t id = ids[static_cast<std::size_t>(i)];
      if (id < 0 || id >= config_.num_symbols)
        throw std::out_of_range("symbol id " + std::to_string(id) + " outside [0, " +
                                std::to_string(config_.num_symbols) + ")");
      switch (config_.bottleneck) {
        case BottleneckKind::STE:
          for (Index k = 0; k < d; ++k) rows(i, k) = (id >> k) & 1 ? Scalar(1) : Scalar(-1);
          break;
        case BottleneckKind::VQVAE: rows.row(i) = codebook_.matrix().row(id); break;
        case BottleneckKind::CATVAE: rows(i, id) = 1; break;
      }
    }
    RowMatrix<Scalar> t = rows.transpose();
    return Tensor<Scalar>({1, d, n}, Eigen::Map<const Array<Scalar>>(t.data(), t.size()));
  }

  /// Normalized [1, 39, T'] input with T' = ceil(T / downsample) * downsample.
  Tensor<Scalar> prepare_input(const RowMatrix<float>& mfcc) const {
    if (mfcc.cols() != CodecConfig::kInputDim)
      throw ShapeError("expected 39-dimensional MFCC input, got " + std::to_string(mfcc.cols()));
    const Index t = mfcc.rows(), ds = config_.downsample_factor;
    const Index padded = (t + ds - 1) / ds * ds;
    RowMatrix<Scalar> x = RowMatrix<Scalar>::Zero(CodecConfig::kInputDim, padded);
    x.leftCols(t) = normalize(mfcc).transpose();
    return Tensor<Scalar>({1, CodecConfig::kInputDim, padded}, Eigen::Map<const Array<Scalar>>(x.data(), x.size()));
  }

  RowMatrix<Scalar> normalize(const RowMatrix<float>& mfcc) const {
    return ((mfcc.rowwise() - norm_.mean.transpose()).array().rowwise() / norm_.stddev.transpose().array())
        .matrix()
        .template cast<Scalar>();
  }

  /// Combines reconstruction and auxiliary terms into the trained objective.
  /// Paper-literal: recon / (2 sigma^2) + aux. Default: the same objective
  /// multiplied by 2 sigma^2.
  Tensor<Scalar> objective(const Tensor<Scalar>& recon, const Tensor<Scalar>& aux) const {
    const double s2 = 2.0 * config_.sigma * config_.sigma;
    if (config_.paper_literal_loss) return add(scale(recon, static_cast<Scalar>(1.0 / s2)), aux);
    return add(recon, scale(aux, static_cast<Scalar>(s2)));
  }

 private:
  CodecConfig config_;
  std::vector<std::string> speakers_;
  NormStats norm_;
  CounterRng rng_;
  std::int64_t step_ = 0;

  Conv1d<Scalar> enc_pre_;
  std::vector<Conv1d<Scalar>> enc_down_;
  std::array<ResidualBlock<Scalar>, 2> enc_res_;
  Conv1d<Scalar> enc_proj_;
  Tensor<Scalar> codebook_;
  Tensor<Scalar> speaker_table_;
  Conv1d<Scalar> dec_in_;
  std::array<ResidualBlock<Scalar>, 2> dec_res_;
  std::vector<ConvTranspose1d<Scalar>> dec_up_;
  Conv1d<Scalar> dec_out_;
};

using CodecModel = BasicCodecModel<float>;

/// One aligned training batch: normalized MFCCs, raw FBANK targets.
template <typename Scalar>
struct Batch {
  Tensor<Scalar> mfcc;   // [B, 39, L]
  Tensor<Scalar> fbank;  // [B, 45, L]
  std::vector<int> speakers;
};

/// Forward in train mode, backward, one Adam step; advances the step counter
/// (and with it the temperature schedule). Throws NumericError on a
/// non-finite loss before touching the parameters.
template <typename Scalar>
LossReport train_step(BasicCodecModel<Scalar>& model, const Batch<Scalar>& batch, Adam<Scalar>& optimizer) {
  if (batch.mfcc.ndim() != 3 || batch.fbank.ndim() != 3 || batch.mfcc.dim(0) != batch.fbank.dim(0) ||
      batch.mfcc.dim(2) != batch.fbank.dim(2))
    throw ShapeError("train_step: misaligned crops " + to_string(batch.mfcc.shape()) + " vs " +
                     to_string(batch.fbank.shape()));
  if (batch.mfcc.dim(2) % model.config().downsample_factor != 0)
    throw ShapeError("train_step: crop length must be divisible by the downsample factor");

  auto f = model.forward(batch.mfcc, batch.speakers, Mode::Train);
  const Tensor<Scalar> recon = sum_squared_error(f.y_hat, batch.fbank);
  const Tensor<Scalar> total = model.objective(recon, f.bottleneck.aux_loss);
  LossReport report{static_cast<double>(recon.item()), static_cast<double>(f.bottleneck.aux_loss.item()),
                    static_cast<double>(total.item())};
  if (!std::isfinite(report.total)) throw NumericError("non-finite loss at step " + std::to_string(model.step()));

  optimizer.zero_grad();
  total.backward();
  optimizer.step();
  model.set_step(model.step() + 1);
  return report;
}

template <typename Scalar>
struct EncodeResult {
  Tensor<Scalar> h;  // [1, d, N]
  SymbolSequence symbols;
  Tensor<Scalar> z;  // [1, d, N]
};

/// Eval-mode encoding of one utterance. Takes no speaker argument.
template <typename Scalar>
EncodeResult<Scalar> encode(BasicCodecModel<Scalar>& model, const FeatureSequence& mfcc) {
  if (mfcc.kind != FeatureKind::MFCC39) throw std::invalid_argument("encode: expected MFCC39 features");
  const int ds = model.config().downsample_factor;
  if (mfcc.num_frames() < ds)
    throw std::invalid_argument("encode: " + std::to_string(mfcc.num_frames()) + " frames is fewer than the " +
                                "downsample factor " + std::to_string(ds));
  NoGradGuard guard;
  EncodeResult<Scalar> r;
  r.h = model.encode_continuous(model.prepare_input(mfcc.frames), false);
  auto b = model.discretize(r.h, Mode::Eval);
  r.z = b.z;
  r.symbols.utterance_id = mfcc.utterance_id;
  r.symbols.symbol_ids = std::move(b.symbol_ids);
  r.symbols.frames_per_symbol = ds;
  r.symbols.frame_shift = mfcc.frame_shift;
  r.symbols.num_frames = mfcc.num_frames();
  return r;
}

/// Eval-mode decoding of z [1, d, N] (or [d, N]) into N * downsample FBANK45
/// frames, conditioned on `speaker_id` when the model is speaker-conditioned.
template <typename Scalar>
FeatureSequence decode(BasicCodecModel<Scalar>& model, const Tensor<Scalar>& z, const std::string& speaker_id) {
  Tensor<Scalar> z3 = z.ndim() == 2 ? reshape(z, {1, z.dim(0), z.dim(1)}) : z;
  if (z3.ndim() != 3 || z3.dim(0) != 1 || z3.dim(1) != model.config().latent_dim())
    throw ShapeError("decode: expected latent of shape [1, " + std::to_string(model.config().latent_dim()) +
                     ", N], got " + to_string(z.shape()));
  std::vector<int> spk;
  if (model.speaker_conditioned()) spk.push_back(model.speaker_index(speaker_id));
  NoGradGuard guard;
  const Tensor<Scalar> y = model.decode_latent(z3, spk, false);
  FeatureSequence out;
  out.kind = FeatureKind::FBANK45;
  out.speaker_id = speaker_id;
  const Index t = y.dim(2);
  out.frames = Eigen::Map<const RowMatrix<Scalar>>(y.value().data(), CodecConfig::kOutputDim, t)
                   .transpose()
                   .template cast<float>();
  return out;
}

}  // namespace zslab

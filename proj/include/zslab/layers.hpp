#pragma once

#include "zslab/ops.hpp"
#include "zslab/rng.hpp"

#include <cmath>
#include <string>

namespace zslab {

/// Uniform(-bound, bound) leaf tensor that requires grad.
template <typename Scalar>
Tensor<Scalar> uniform_parameter(Shape shape, double bound, CounterRng& rng) {
  Array<Scalar> v(numel_of(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Tensor<Scalar>(std::move(shape), std::move(v), true);
}

template <typename Scalar>
struct Conv1d {
  Tensor<Scalar> weight;  // [C_out, C_in, K]
  Tensor<Scalar> bias;    // [C_out]
  Index stride = 1;
  Index padding = 0;

  Conv1d() = default;
  Conv1d(Index in, Index out, Index kernel, Index stride_, Index padding_, CounterRng& rng)
      : stride(stride_), padding(padding_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
    weight = uniform_parameter<Scalar>({out, in, kernel}, bound, rng);
    bias = uniform_parameter<Scalar>({out}, bound, rng);
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv1d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, NamedTensors<Scalar>& params) const {
    params.emplace_back(prefix + ".weight", weight);
    params.emplace_back(prefix + ".bias", bias);
  }
};

template <typename Scalar>
struct ConvTranspose1d {
  Tensor<Scalar> weight;  // [C_in, C_out, K]
  Tensor<Scalar> bias;
  Index stride = 1;
  Index padding = 0;

  ConvTranspose1d() = default;
  ConvTranspose1d(Index in, Index out, Index kernel, Index stride_, Index padding_, CounterRng& rng)
      : stride(stride_), padding(padding_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(out * kernel));
    weight = uniform_parameter<Scalar>({in, out, kernel}, bound, rng);
    bias = uniform_parameter<Scalar>({out}, bound, rng);
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return conv_transpose1d(x, weight, bias, stride, padding);
  }

  void collect(const std::string& prefix, NamedTensors<Scalar>& params) const {
    params.emplace_back(prefix + ".weight", weight);
    params.emplace_back(prefix + ".bias", bias);
  }
};

template <typename Scalar>
struct BatchNorm1d {
  Tensor<Scalar> gamma, beta;
  // Buffers, not trained.
  Tensor<Scalar> running_mean, running_var;

  BatchNorm1d() = default;
  explicit BatchNorm1d(Index channels)
      : gamma(Tensor<Scalar>::constant({channels}, 1, true)),
        beta(Tensor<Scalar>::zeros({channels}, true)),
        running_mean(Tensor<Scalar>::zeros({channels})),
        running_var(Tensor<Scalar>::constant({channels}, 1)) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  void collect(const std::string& prefix, NamedTensors<Scalar>& params) const {
    params.emplace_back(prefix + ".gamma", gamma);
    params.emplace_back(prefix + ".beta", beta);
  }
  void collect_buffers(const std::string& prefix, NamedTensors<Scalar>& buffers) const {
    buffers.emplace_back(prefix + ".running_mean", running_mean);
    buffers.emplace_back(prefix + ".running_var", running_var);
  }
};

/// relu(x + bn(conv(relu(bn(conv(x)))))), length-preserving k=3 convolutions.
template <typename Scalar>
struct ResidualBlock {
  Conv1d<Scalar> conv1, conv2;
  BatchNorm1d<Scalar> bn1, bn2;

  ResidualBlock() = default;
  ResidualBlock(Index channels, CounterRng& rng)
      : conv1(channels, channels, 3, 1, 1, rng), conv2(channels, channels, 3, 1, 1, rng), bn1(channels), bn2(channels) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) {
    Tensor<Scalar> y = relu(bn1(conv1(x), training));
    y = bn2(conv2(y), training);
    return relu(add(x, y));
  }

  void collect(const std::string& prefix, NamedTensors<Scalar>& params) const {
    conv1.collect(prefix + ".conv1", params);
    bn1.collect(prefix + ".bn1", params);
    conv2.collect(prefix + ".conv2", params);
    bn2.collect(prefix + ".bn2", params);
  }
  void collect_buffers(const std::string& prefix, NamedTensors<Scalar>& buffers) const {
    bn1.collect_buffers(prefix + ".bn1", buffers);
    bn2.collect_buffers(prefix + ".bn2", buffers);
  }
};

}  // namespace zslab

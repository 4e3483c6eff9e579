#pragma once

#include "zslab/tensor.hpp"

#include <cmath>
#include <span>

namespace zslab {

struct AdamHyper {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Array<Scalar>> m, v;

  void init(std::span<const Tensor<Scalar>> params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.push_back(Array<Scalar>::Zero(p.numel()));
      v.push_back(Array<Scalar>::Zero(p.numel()));
    }
  }
};

/// One bias-corrected Adam update over `params`, reading their accumulated
/// gradients. A parameter with no gradient is treated as having a zero one.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state, const AdamHyper& hp) {
  if (state.m.size() != params.size()) throw std::logic_error("adam_step: optimizer state not initialized");
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(hp.beta1), b2 = static_cast<Scalar>(hp.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(hp.beta1, static_cast<double>(state.step)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(hp.beta2, static_cast<double>(state.step)));
  const Scalar lr = static_cast<Scalar>(hp.lr), eps = static_cast<Scalar>(hp.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.numel()) throw ShapeError("adam_step: state size mismatch");
    if (!p.has_grad()) {
      state.m[i] *= b1;
      state.v[i] *= b2;
    } else {
      const auto& g = p.node()->grad;
      state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
      state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.square();
    }
    p.mutable_value() -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
  }
}

/// Adam bound to a fixed parameter list.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> params, AdamHyper hp) : params_(std::move(params)), hyper_(hp) {
    state_.init(params_);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void step() { adam_step<Scalar>(params_, state_, hyper_); }

  AdamHyper& hyper() { return hyper_; }
  const AdamState<Scalar>& state() const { return state_; }
  AdamState<Scalar>& state() { return state_; }
  const std::vector<Tensor<Scalar>>& params() const { return params_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamHyper hyper_;
  AdamState<Scalar> state_;
};

}  // namespace zslab

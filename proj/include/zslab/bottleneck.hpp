#pragma once

#include "zslab/ops.hpp"
#include "zslab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace zslab {

enum class Mode { Train, Eval };

template <typename Scalar>
struct BottleneckOutput {
  Tensor<Scalar> z;                     // [N, d], discretized latents
  std::vector<std::int64_t> symbol_ids;  // one per position
  Tensor<Scalar> aux_loss;              // scalar
};

/// Linear temperature anneal, clamped after `total_steps`.
struct AnnealSchedule {
  double tau_start = 1.0;
  double tau_end = 0.1;
  std::int64_t total_steps = 40000;

  double tau(std::int64_t step) const {
    if (total_steps <= 0 || step >= total_steps) return tau_end;
    const double frac = std::min(static_cast<double>(step) / static_cast<double>(total_steps), 1.0);
    return tau_start + (tau_end - tau_start) * frac;
  }
};

// ---------------------------------------------------------------------------
// Straight-through binarization

/// Symbol id of a ±1 vector: bit k is set when z_k > 0.
template <typename Derived>
std::int64_t sign_pattern_id(const Eigen::DenseBase<Derived>& z) {
  std::int64_t id = 0;
  for (Index k = 0; k < z.size(); ++k)
    if (z(k) > 0) id |= std::int64_t{1} << k;
  return id;
}

/// h [N, K_bits] in [-1, 1]. Train mode draws z_k = +1 with probability
/// (1 + h_k) / 2 (z = h + eps with zero-mean eps); eval mode takes sign(h)
/// with sign(0) = +1. Gradients pass to h unchanged.
template <typename Scalar>
BottleneckOutput<Scalar> ste_binarize(const Tensor<Scalar>& h, Mode mode, CounterRng& rng) {
  detail::require_ndim(h.shape(), 2, "ste_binarize");
  const auto& hv = h.value();
  if ((hv.abs() > Scalar(1)).any() || !hv.isFinite().all())
    throw std::domain_error("ste_binarize: inputs must lie in [-1, 1]");
  if (h.dim(1) > 62) throw ShapeError("ste_binarize: at most 62 bits per position");

  Array<Scalar> z(hv.size());
  if (mode == Mode::Train) {
    for (Index i = 0; i < hv.size(); ++i) z[i] = rng.uniform() < (1.0 + static_cast<double>(hv[i])) / 2.0 ? 1 : -1;
  } else {
    z = (hv >= Scalar(0)).select(Array<Scalar>::Ones(hv.size()), Scalar(-1));
  }

  const Index n = h.dim(0), bits = h.dim(1);
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = sign_pattern_id(z.segment(i * bits, bits));
  return {straight_through(h, std::move(z)), std::move(ids), Tensor<Scalar>::scalar(0)};
}

// ---------------------------------------------------------------------------
// Vector quantization

/// Index of the nearest codebook row to each row of `h`, ties to the lowest index.
template <typename Scalar>
std::vector<std::int64_t> nearest_codes(const Eigen::Ref<const RowMatrix<Scalar>>& h,
                                        const Eigen::Ref<const RowMatrix<Scalar>>& codebook) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(h.rows()));
  for (Index i = 0; i < h.rows(); ++i) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    std::int64_t arg = 0;
    for (Index k = 0; k < codebook.rows(); ++k) {
      const Scalar d = (h.row(i) - codebook.row(k)).squaredNorm();
      if (d < best) {
        best = d;
        arg = k;
      }
    }
    ids[static_cast<std::size_t>(i)] = arg;
  }
  return ids;
}

/// h [N, d], codebook [K, d]. z is the nearest codebook row with a
/// straight-through gradient to h; aux_loss is the codebook term
/// ||sg(h) - z||^2 plus beta times the commitment term ||h - sg(z)||^2,
/// both summed over positions.
template <typename Scalar>
BottleneckOutput<Scalar> vq_quantize(const Tensor<Scalar>& h, const Tensor<Scalar>& codebook, Scalar beta) {
  detail::require_ndim(h.shape(), 2, "vq_quantize");
  detail::require_ndim(codebook.shape(), 2, "vq_quantize");
  if (codebook.dim(0) == 0) throw std::invalid_argument("vq_quantize: empty codebook");
  if (codebook.dim(1) != h.dim(1))
    throw ShapeError("vq_quantize: latent dim " + std::to_string(h.dim(1)) + " vs codebook " +
                     to_string(codebook.shape()));
  auto ids = nearest_codes<Scalar>(h.matrix(), codebook.matrix());
  const Tensor<Scalar> selected = gather_rows(codebook, ids);
  const Tensor<Scalar> codebook_term = sum_squared_error(stop_gradient(h), selected);
  const Tensor<Scalar> commitment = sum_squared_error(h, stop_gradient(selected));
  Tensor<Scalar> aux = add(codebook_term, scale(commitment, beta));
  return {straight_through(h, selected.value()), std::move(ids), std::move(aux)};
}

/// Gaussian negative log-likelihood up to its constant plus the auxiliary
/// loss: sum_t ||y_t - yhat_t||^2 / (2 sigma^2) + aux.
template <typename Scalar>
Tensor<Scalar> vq_loss(const Tensor<Scalar>& y, const Tensor<Scalar>& y_hat, const Tensor<Scalar>& aux_loss,
                       double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("vq_loss: sigma must be positive");
  const Scalar weight = static_cast<Scalar>(1.0 / (2.0 * sigma * sigma));
  return add(scale(sum_squared_error(y, y_hat), weight), aux_loss);
}

// ---------------------------------------------------------------------------
// Categorical VAE

/// softmax((logits + noise) / tau) along the last axis.
template <typename Scalar>
Tensor<Scalar> gumbel_softmax(const Tensor<Scalar>& logits, const Array<Scalar>& noise, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_softmax: tau must be positive");
  if (noise.size() != logits.numel()) throw ShapeError("gumbel_softmax: noise size mismatch");
  const Tensor<Scalar> g(logits.shape(), noise);
  return softmax(scale(add(logits, g), static_cast<Scalar>(1.0 / tau)), -1);
}

/// logits [N, K] = log pi. Train mode returns the relaxed Gumbel-softmax
/// sample; eval mode the exact one-hot at argmax(logits).
template <typename Scalar>
BottleneckOutput<Scalar> catvae_sample(const Tensor<Scalar>& logits, double tau, Mode mode, CounterRng& rng) {
  detail::require_ndim(logits.shape(), 2, "catvae_sample");
  if (!(tau > 0)) throw std::invalid_argument("catvae_sample: tau must be positive");
  const Index n = logits.dim(0), k = logits.dim(1);
  Tensor<Scalar> z;
  if (mode == Mode::Train) {
    Array<Scalar> g(n * k);
    for (Index i = 0; i < g.size(); ++i) g[i] = static_cast<Scalar>(-std::log(-std::log(rng.uniform())));
    z = gumbel_softmax(logits, g, tau);
  } else {
    Array<Scalar> onehot = Array<Scalar>::Zero(n * k);
    for (Index i = 0; i < n; ++i) {
      Index arg;
      logits.matrix().row(i).maxCoeff(&arg);
      onehot[i * k + arg] = 1;
    }
    z = Tensor<Scalar>(logits.shape(), std::move(onehot));
  }
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index arg;
    z.matrix().row(i).maxCoeff(&arg);
    ids[static_cast<std::size_t>(i)] = arg;
  }
  return {std::move(z), std::move(ids), Tensor<Scalar>::scalar(0)};
}

/// Sum over positions of KL(softmax(logits) || uniform) = log K - H(pi).
template <typename Scalar>
Tensor<Scalar> catvae_kl(const Tensor<Scalar>& logits) {
  detail::require_ndim(logits.shape(), 2, "catvae_kl");
  const Index n = logits.dim(0), k = logits.dim(1);
  const auto x = logits.matrix();
  RowMatrix<Scalar> log_pi(n, k), pi(n, k);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar m = x.row(i).maxCoeff();
    const Scalar lse = m + std::log((x.row(i).array() - m).exp().sum());
    log_pi.row(i) = x.row(i).array() - lse;
    pi.row(i) = log_pi.row(i).array().exp();
    const Scalar kl = (pi.row(i).array() * log_pi.row(i).array()).sum() + std::log(static_cast<Scalar>(k));
    total += std::max(kl, Scalar(0));
  }
  return Tensor<Scalar>::make_result({}, Array<Scalar>::Constant(1, total), {logits.node()},
                                     [pi, log_pi](Node<Scalar>& self) {
                                       // dKL/dh_j = pi_j (log pi_j - sum_k pi_k log pi_k)
                                       const Array<Scalar> neg_entropy = (pi.array() * log_pi.array()).rowwise().sum();
                                       RowMatrix<Scalar> g = pi.array() * (log_pi.array().colwise() - neg_entropy);
                                       g *= self.grad[0];
                                       self.parents[0]->accumulate(Eigen::Map<const Array<Scalar>>(g.data(), g.size()));
                                     });
}

}  // namespace zslab

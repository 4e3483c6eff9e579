#pragma once

#include "zslab/tensor.hpp"

#include <cmath>
#include <limits>
#include <span>

namespace zslab {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_ndim(const Shape& s, std::size_t n, const char* op) {
  if (s.size() != n)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d input, got " + to_string(s));
}

struct AxisSplit {
  Index outer, length, inner;
};

inline AxisSplit split_axis(const Shape& s, int axis, const char* op) {
  const int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError(std::string(op) + ": axis out of range for " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  for (int i = axis + 1; i < nd; ++i) r.inner *= s[i];
  return r;
}

// Treats a 2-D [C, T] input as a batch of one.
template <typename Scalar>
Shape as_batched(const Tensor<Scalar>& x, const char* op) {
  if (x.ndim() == 2) return {1, x.dim(0), x.dim(1)};
  require_ndim(x.shape(), 3, op);
  return x.shape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  return Tensor<Scalar>::make_result(a.shape(), a.value() + b.value(), {a.node(), b.node()},
                                     [](Node<Scalar>& self) {
                                       self.parents[0]->accumulate(self.grad);
                                       self.parents[1]->accumulate(self.grad);
                                     });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  return Tensor<Scalar>::make_result(a.shape(), a.value() - b.value(), {a.node(), b.node()},
                                     [](Node<Scalar>& self) {
                                       self.parents[0]->accumulate(self.grad);
                                       self.parents[1]->accumulate(-self.grad);
                                     });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  return Tensor<Scalar>::make_result(a.shape(), a.value() * b.value(), {a.node(), b.node()},
                                     [](Node<Scalar>& self) {
                                       auto& pa = *self.parents[0];
                                       auto& pb = *self.parents[1];
                                       pa.accumulate(self.grad * pb.value);
                                       pb.accumulate(self.grad * pa.value);
                                     });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  return Tensor<Scalar>::make_result(a.shape(), a.value() * factor, {a.node()},
                                     [factor](Node<Scalar>& self) {
                                       self.parents[0]->accumulate(self.grad * factor);
                                     });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
  return Tensor<Scalar>::make_result(a.shape(), a.value() + c, {a.node()},
                                     [](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad); });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& a) {
  Array<Scalar> y = a.value().tanh();
  return Tensor<Scalar>::make_result(a.shape(), y, {a.node()}, [y](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad * (Scalar(1) - y.square()));
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::make_result(a.shape(), a.value().max(Scalar(0)), {a.node()},
                                     [](Node<Scalar>& self) {
                                       auto& p = *self.parents[0];
                                       p.accumulate((p.value > Scalar(0)).select(self.grad, Scalar(0)));
                                     });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::make_result({}, Array<Scalar>::Constant(1, a.value().sum()), {a.node()},
                                     [](Node<Scalar>& self) {
                                       auto& p = *self.parents[0];
                                       p.accumulate(Array<Scalar>::Constant(p.value.size(), self.grad[0]));
                                     });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.numel()));
}

/// Sum of squared differences, sum((a - b)^2).
template <typename Scalar>
Tensor<Scalar> sum_squared_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sum_squared_error");
  Array<Scalar> diff = a.value() - b.value();
  const Scalar total = diff.square().sum();
  return Tensor<Scalar>::make_result({}, Array<Scalar>::Constant(1, total), {a.node(), b.node()},
                                     [diff](Node<Scalar>& self) {
                                       const Scalar g = self.grad[0];
                                       self.parents[0]->accumulate(diff * (Scalar(2) * g));
                                       self.parents[1]->accumulate(diff * (Scalar(-2) * g));
                                     });
}

template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return scale(sum_squared_error(a, b), Scalar(1) / static_cast<Scalar>(a.numel()));
}

// ---------------------------------------------------------------------------
// Softmax family

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a, int axis = -1) {
  const auto sp = detail::split_axis(a.shape(), axis, "softmax");
  Array<Scalar> y(a.numel());
  const auto& x = a.value();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.length * sp.inner + in;
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < sp.length; ++k) m = std::max(m, x[base + k * sp.inner]);
      Scalar z = 0;
      for (Index k = 0; k < sp.length; ++k) z += (y[base + k * sp.inner] = std::exp(x[base + k * sp.inner] - m));
      for (Index k = 0; k < sp.length; ++k) y[base + k * sp.inner] /= z;
    }
  return Tensor<Scalar>::make_result(a.shape(), y, {a.node()}, [y, sp](Node<Scalar>& self) {
    Array<Scalar> gx(y.size());
    for (Index o = 0; o < sp.outer; ++o)
      for (Index in = 0; in < sp.inner; ++in) {
        const Index base = o * sp.length * sp.inner + in;
        Scalar dot = 0;
        for (Index k = 0; k < sp.length; ++k) dot += self.grad[base + k * sp.inner] * y[base + k * sp.inner];
        for (Index k = 0; k < sp.length; ++k) {
          const Index i = base + k * sp.inner;
          gx[i] = y[i] * (self.grad[i] - dot);
        }
      }
    self.parents[0]->accumulate(gx);
  });
}

template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& a, int axis = -1) {
  const auto sp = detail::split_axis(a.shape(), axis, "log_softmax");
  Array<Scalar> y(a.numel());
  const auto& x = a.value();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.length * sp.inner + in;
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < sp.length; ++k) m = std::max(m, x[base + k * sp.inner]);
      Scalar z = 0;
      for (Index k = 0; k < sp.length; ++k) z += std::exp(x[base + k * sp.inner] - m);
      const Scalar lse = m + std::log(z);
      for (Index k = 0; k < sp.length; ++k) y[base + k * sp.inner] = x[base + k * sp.inner] - lse;
    }
  return Tensor<Scalar>::make_result(a.shape(), y, {a.node()}, [y, sp](Node<Scalar>& self) {
    Array<Scalar> gx(y.size());
    for (Index o = 0; o < sp.outer; ++o)
      for (Index in = 0; in < sp.inner; ++in) {
        const Index base = o * sp.length * sp.inner + in;
        Scalar gsum = 0;
        for (Index k = 0; k < sp.length; ++k) gsum += self.grad[base + k * sp.inner];
        for (Index k = 0; k < sp.length; ++k) {
          const Index i = base + k * sp.inner;
          gx[i] = self.grad[i] - std::exp(y[i]) * gsum;
        }
      }
    self.parents[0]->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Gradient routing

template <typename Scalar>
Tensor<Scalar> stop_gradient(const Tensor<Scalar>& a) {
  return a.detach();
}

/// Forward value is `forward_value` verbatim; the incoming gradient is handed
/// to `source` unchanged. Used for the straight-through estimators.
template <typename Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& source, Array<Scalar> forward_value) {
  if (forward_value.size() != source.numel())
    throw ShapeError("straight_through: value size does not match " + to_string(source.shape()));
  return Tensor<Scalar>::make_result(source.shape(), std::move(forward_value), {source.node()},
                                     [](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  return Tensor<Scalar>::make_result(std::move(shape), a.value(), {a.node()},
                                     [](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad); });
}

/// [B, M, N] -> [B, N, M].
template <typename Scalar>
Tensor<Scalar> swap_last_axes(const Tensor<Scalar>& a) {
  detail::require_ndim(a.shape(), 3, "swap_last_axes");
  const Index b = a.dim(0), m = a.dim(1), n = a.dim(2);
  auto permute = [b, m, n](const Array<Scalar>& src, bool forward) {
    Array<Scalar> dst(src.size());
    for (Index i = 0; i < b; ++i) {
      using Map = Eigen::Map<const RowMatrix<Scalar>>;
      using MutMap = Eigen::Map<RowMatrix<Scalar>>;
      if (forward)
        MutMap(dst.data() + i * m * n, n, m) = Map(src.data() + i * m * n, m, n).transpose();
      else
        MutMap(dst.data() + i * m * n, m, n) = Map(src.data() + i * m * n, n, m).transpose();
    }
    return dst;
  };
  return Tensor<Scalar>::make_result({b, n, m}, permute(a.value(), true), {a.node()},
                                     [permute](Node<Scalar>& self) {
                                       self.parents[0]->accumulate(permute(self.grad, false));
                                     });
}

/// Concatenates [B, C1, T] and [B, C2, T] along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_ndim(a.shape(), 3, "concat_channels");
  detail::require_ndim(b.shape(), 3, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Index batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), t = a.dim(2);
  Array<Scalar> y(batch * (ca + cb) * t);
  for (Index i = 0; i < batch; ++i) {
    y.segment(i * (ca + cb) * t, ca * t) = a.value().segment(i * ca * t, ca * t);
    y.segment(i * (ca + cb) * t + ca * t, cb * t) = b.value().segment(i * cb * t, cb * t);
  }
  return Tensor<Scalar>::make_result({batch, ca + cb, t}, std::move(y), {a.node(), b.node()},
                                     [batch, ca, cb, t](Node<Scalar>& self) {
                                       Array<Scalar> ga(batch * ca * t), gb(batch * cb * t);
                                       for (Index i = 0; i < batch; ++i) {
                                         ga.segment(i * ca * t, ca * t) = self.grad.segment(i * (ca + cb) * t, ca * t);
                                         gb.segment(i * cb * t, cb * t) =
                                             self.grad.segment(i * (ca + cb) * t + ca * t, cb * t);
                                       }
                                       self.parents[0]->accumulate(ga);
                                       self.parents[1]->accumulate(gb);
                                     });
}

/// Repeats [B, C] along a new trailing time axis: [B, C, T].
template <typename Scalar>
Tensor<Scalar> broadcast_time(const Tensor<Scalar>& a, Index t) {
  detail::require_ndim(a.shape(), 2, "broadcast_time");
  const Index rows = a.numel();
  Array<Scalar> y(rows * t);
  for (Index r = 0; r < rows; ++r) y.segment(r * t, t).setConstant(a.value()[r]);
  return Tensor<Scalar>::make_result({a.dim(0), a.dim(1), t}, std::move(y), {a.node()},
                                     [rows, t](Node<Scalar>& self) {
                                       Array<Scalar> g(rows);
                                       for (Index r = 0; r < rows; ++r) g[r] = self.grad.segment(r * t, t).sum();
                                       self.parents[0]->accumulate(g);
                                     });
}

/// Selects rows of a [K, D] table: [ids.size(), D].
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const std::int64_t> ids) {
  detail::require_ndim(table.shape(), 2, "gather_rows");
  const Index k = table.dim(0), d = table.dim(1);
  const Index n = static_cast<Index>(ids.size());
  Array<Scalar> y(n * d);
  std::vector<std::int64_t> rows(ids.begin(), ids.end());
  for (Index i = 0; i < n; ++i) {
    if (rows[i] < 0 || rows[i] >= k) throw std::out_of_range("gather_rows: row id out of range");
    y.segment(i * d, d) = table.value().segment(rows[i] * d, d);
  }
  return Tensor<Scalar>::make_result({n, d}, std::move(y), {table.node()},
                                     [rows = std::move(rows), d](Node<Scalar>& self) {
                                       auto& p = *self.parents[0];
                                       Array<Scalar> g = Array<Scalar>::Zero(p.value.size());
                                       for (std::size_t i = 0; i < rows.size(); ++i)
                                         g.segment(rows[i] * d, d) += self.grad.segment(static_cast<Index>(i) * d, d);
                                       p.accumulate(g);
                                     });
}

// ---------------------------------------------------------------------------
// Dense layers

/// x [N, in], weight [out, in], bias [out] -> [N, out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  detail::require_ndim(x.shape(), 2, "linear");
  detail::require_ndim(weight.shape(), 2, "linear");
  if (weight.dim(1) != x.dim(1) || bias.numel() != weight.dim(0))
    throw ShapeError("linear: input " + to_string(x.shape()) + " weight " + to_string(weight.shape()) +
                     " bias " + to_string(bias.shape()));
  const Index n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Array<Scalar> y(n * out);
  Eigen::Map<RowMatrix<Scalar>> ym(y.data(), n, out);
  ym.noalias() = x.matrix() * weight.matrix().transpose();
  ym.rowwise() += bias.value().matrix().transpose();
  return Tensor<Scalar>::make_result({n, out}, std::move(y), {x.node(), weight.node(), bias.node()},
                                     [n, in, out](Node<Scalar>& self) {
                                       auto& px = *self.parents[0];
                                       auto& pw = *self.parents[1];
                                       auto& pb = *self.parents[2];
                                       Eigen::Map<const RowMatrix<Scalar>> gy(self.grad.data(), n, out);
                                       Eigen::Map<const RowMatrix<Scalar>> xm(px.value.data(), n, in);
                                       Eigen::Map<const RowMatrix<Scalar>> wm(pw.value.data(), out, in);
                                       if (px.requires_grad) {
                                         RowMatrix<Scalar> gx = gy * wm;
                                         px.accumulate(Eigen::Map<const Array<Scalar>>(gx.data(), gx.size()));
                                       }
                                       if (pw.requires_grad) {
                                         RowMatrix<Scalar> gw = gy.transpose() * xm;
                                         pw.accumulate(Eigen::Map<const Array<Scalar>>(gw.data(), gw.size()));
                                       }
                                       if (pb.requires_grad) pb.accumulate(gy.colwise().sum().transpose().array());
                                     });
}

namespace detail {

// cols(ci * K + k, t) = x(ci, t * stride + k - padding), zero outside.
template <typename Scalar>
void im2col(const Scalar* x, Index channels, Index length, Index kernel, Index stride, Index padding,
            Index out_length, Scalar* cols) {
  for (Index c = 0; c < channels; ++c)
    for (Index k = 0; k < kernel; ++k) {
      Scalar* row = cols + (c * kernel + k) * out_length;
      const Scalar* src = x + c * length;
      for (Index t = 0; t < out_length; ++t) {
        const Index s = t * stride + k - padding;
        row[t] = (s >= 0 && s < length) ? src[s] : Scalar(0);
      }
    }
}

// Adjoint of im2col: x(ci, t * stride + k - padding) += cols(ci * K + k, t).
template <typename Scalar>
void col2im(const Scalar* cols, Index channels, Index length, Index kernel, Index stride, Index padding,
            Index out_length, Scalar* x) {
  for (Index c = 0; c < channels; ++c)
    for (Index k = 0; k < kernel; ++k) {
      const Scalar* row = cols + (c * kernel + k) * out_length;
      Scalar* dst = x + c * length;
      for (Index t = 0; t < out_length; ++t) {
        const Index s = t * stride + k - padding;
        if (s >= 0 && s < length) dst[s] += row[t];
      }
    }
}

}  // namespace detail

inline Index conv1d_output_length(Index length, Index kernel, Index stride, Index padding) {
  return (length + 2 * padding - kernel) / stride + 1;
}

inline Index conv_transpose1d_output_length(Index length, Index kernel, Index stride, Index padding) {
  return (length - 1) * stride - 2 * padding + kernel;
}

/// input [B, C_in, T] (or [C_in, T]), weight [C_out, C_in, K], bias [C_out].
/// Returns [B, C_out, T'] with T' = floor((T + 2p - K) / stride) + 1.
template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      Index stride, Index padding) {
  const Shape in_shape = detail::as_batched(input, "conv1d");
  detail::require_ndim(weight.shape(), 3, "conv1d");
  const Index batch = in_shape[0], c_in = in_shape[1], length = in_shape[2];
  const Index c_out = weight.dim(0), kernel = weight.dim(2);
  if (weight.dim(1) != c_in || bias.numel() != c_out)
    throw ShapeError("conv1d: input " + to_string(input.shape()) + " weight " + to_string(weight.shape()) +
                     " bias " + to_string(bias.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv1d: stride must be >= 1 and padding >= 0");
  if (length + 2 * padding < kernel)
    throw ShapeError("conv1d: padded length " + std::to_string(length + 2 * padding) + " shorter than kernel " +
                     std::to_string(kernel));
  const Index out_length = conv1d_output_length(length, kernel, stride, padding);
  const Index rows = c_in * kernel;

  auto cols = std::make_shared<RowMatrix<Scalar>>(rows, batch * out_length);
  Array<Scalar> y(batch * c_out * out_length);
  Eigen::Map<const RowMatrix<Scalar>> wm(weight.value().data(), c_out, rows);
  RowMatrix<Scalar> col_b(rows, out_length);
  for (Index b = 0; b < batch; ++b) {
    detail::im2col(input.value().data() + b * c_in * length, c_in, length, kernel, stride, padding, out_length,
                   col_b.data());
    cols->middleCols(b * out_length, out_length) = col_b;
    Eigen::Map<RowMatrix<Scalar>> yb(y.data() + b * c_out * out_length, c_out, out_length);
    yb.noalias() = wm * col_b;
    yb.colwise() += bias.value().matrix();
  }

  Shape out_shape = input.ndim() == 2 ? Shape{c_out, out_length} : Shape{batch, c_out, out_length};
  return Tensor<Scalar>::make_result(
      std::move(out_shape), std::move(y), {input.node(), weight.node(), bias.node()},
      [=](Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        Eigen::Map<const RowMatrix<Scalar>> w(pw.value.data(), c_out, rows);
        RowMatrix<Scalar> gw = RowMatrix<Scalar>::Zero(c_out, rows);
        Array<Scalar> gbias = Array<Scalar>::Zero(c_out);
        Array<Scalar> gx = Array<Scalar>::Zero(batch * c_in * length);
        RowMatrix<Scalar> gcols(rows, out_length);
        for (Index b = 0; b < batch; ++b) {
          Eigen::Map<const RowMatrix<Scalar>> gy(self.grad.data() + b * c_out * out_length, c_out, out_length);
          if (pw.requires_grad) gw.noalias() += gy * cols->middleCols(b * out_length, out_length).transpose();
          if (pb.requires_grad) gbias += gy.rowwise().sum().array();
          if (px.requires_grad) {
            gcols.noalias() = w.transpose() * gy;
            detail::col2im(gcols.data(), c_in, length, kernel, stride, padding, out_length,
                           gx.data() + b * c_in * length);
          }
        }
        px.accumulate(gx);
        pw.accumulate(Eigen::Map<const Array<Scalar>>(gw.data(), gw.size()));
        pb.accumulate(gbias);
      });
}

/// input [B, C_in, T] (or [C_in, T]), weight [C_in, C_out, K], bias [C_out].
/// Returns [B, C_out, (T - 1) * stride - 2p + K]; the adjoint of conv1d with
/// the same weight tensor read as [C_out', C_in', K].
template <typename Scalar>
Tensor<Scalar> conv_transpose1d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias, Index stride, Index padding) {
  const Shape in_shape = detail::as_batched(input, "conv_transpose1d");
  detail::require_ndim(weight.shape(), 3, "conv_transpose1d");
  const Index batch = in_shape[0], c_in = in_shape[1], length = in_shape[2];
  const Index c_out = weight.dim(1), kernel = weight.dim(2);
  if (weight.dim(0) != c_in || bias.numel() != c_out)
    throw ShapeError("conv_transpose1d: input " + to_string(input.shape()) + " weight " +
                     to_string(weight.shape()) + " bias " + to_string(bias.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv_transpose1d: stride must be >= 1 and padding >= 0");
  const Index out_length = conv_transpose1d_output_length(length, kernel, stride, padding);
  if (out_length < 1) throw ShapeError("conv_transpose1d: empty output");
  const Index rows = c_out * kernel;

  Array<Scalar> y = Array<Scalar>::Zero(batch * c_out * out_length);
  Eigen::Map<const RowMatrix<Scalar>> wm(weight.value().data(), c_in, rows);
  RowMatrix<Scalar> cols(rows, length);
  for (Index b = 0; b < batch; ++b) {
    Eigen::Map<const RowMatrix<Scalar>> xb(input.value().data() + b * c_in * length, c_in, length);
    cols.noalias() = wm.transpose() * xb;
    Scalar* yb = y.data() + b * c_out * out_length;
    detail::col2im(cols.data(), c_out, out_length, kernel, stride, padding, length, yb);
    Eigen::Map<RowMatrix<Scalar>>(yb, c_out, out_length).colwise() += bias.value().matrix();
  }

  Shape out_shape = input.ndim() == 2 ? Shape{c_out, out_length} : Shape{batch, c_out, out_length};
  return Tensor<Scalar>::make_result(
      std::move(out_shape), std::move(y), {input.node(), weight.node(), bias.node()},
      [=](Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        Eigen::Map<const RowMatrix<Scalar>> w(pw.value.data(), c_in, rows);
        RowMatrix<Scalar> gw = RowMatrix<Scalar>::Zero(c_in, rows);
        Array<Scalar> gbias = Array<Scalar>::Zero(c_out);
        Array<Scalar> gx(batch * c_in * length);
        RowMatrix<Scalar> gcols(rows, length);
        for (Index b = 0; b < batch; ++b) {
          const Scalar* gy = self.grad.data() + b * c_out * out_length;
          detail::im2col(gy, c_out, out_length, kernel, stride, padding, length, gcols.data());
          Eigen::Map<const RowMatrix<Scalar>> xb(px.value.data() + b * c_in * length, c_in, length);
          Eigen::Map<RowMatrix<Scalar>> gxb(gx.data() + b * c_in * length, c_in, length);
          if (px.requires_grad) gxb.noalias() = w * gcols;
          if (pw.requires_grad) gw.noalias() += xb * gcols.transpose();
          if (pb.requires_grad)
            gbias += Eigen::Map<const RowMatrix<Scalar>>(gy, c_out, out_length).rowwise().sum().array();
        }
        px.accumulate(gx);
        pw.accumulate(Eigen::Map<const Array<Scalar>>(gw.data(), gw.size()));
        pb.accumulate(gbias);
      });
}

/// Per-channel normalization of [B, C, T] (or [N, C]). In training mode the
/// batch statistics are used and the running buffers are updated in place;
/// in eval mode the running buffers are used.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                          Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
  Shape s = input.shape();
  if (s.size() == 2) s.push_back(1);
  detail::require_ndim(s, 3, "batch_norm");
  const Index batch = s[0], channels = s[1], length = s[2];
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.numel() != channels ||
      running_var.numel() != channels)
    throw ShapeError("batch_norm: parameter size does not match channels of " + to_string(input.shape()));
  const Index count = batch * length;
  const auto& x = input.value();

  Array<Scalar> mu(channels), var(channels);
  if (training) {
    if (count < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");
    mu.setZero();
    var.setZero();
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c) mu[c] += x.segment((b * channels + c) * length, length).sum();
    mu /= static_cast<Scalar>(count);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c)
        var[c] += (x.segment((b * channels + c) * length, length) - mu[c]).square().sum();
    var /= static_cast<Scalar>(count);
    auto& rm = running_mean.mutable_value();
    auto& rv = running_var.mutable_value();
    rm = (Scalar(1) - momentum) * rm + momentum * mu;
    rv = (Scalar(1) - momentum) * rv + momentum * var * (static_cast<Scalar>(count) / static_cast<Scalar>(count - 1));
  } else {
    mu = running_mean.value();
    var = running_var.value();
  }
  const Array<Scalar> inv_std = (var + eps).rsqrt();

  Array<Scalar> xhat(x.size()), y(x.size());
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * length;
      xhat.segment(off, length) = (x.segment(off, length) - mu[c]) * inv_std[c];
      y.segment(off, length) = xhat.segment(off, length) * gamma.value()[c] + beta.value()[c];
    }

  return Tensor<Scalar>::make_result(
      input.shape(), std::move(y), {input.node(), gamma.node(), beta.node()},
      [=, xhat = std::move(xhat)](Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        Array<Scalar> ggamma = Array<Scalar>::Zero(channels), gbeta = Array<Scalar>::Zero(channels);
        Array<Scalar> sum_dxhat = Array<Scalar>::Zero(channels), sum_dxhat_xhat = Array<Scalar>::Zero(channels);
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < channels; ++c) {
            const Index off = (b * channels + c) * length;
            const auto g = self.grad.segment(off, length);
            const auto xh = xhat.segment(off, length);
            ggamma[c] += (g * xh).sum();
            gbeta[c] += g.sum();
          }
        pg.accumulate(ggamma);
        pb.accumulate(gbeta);
        if (!px.requires_grad) return;
        const auto& gam = pg.value;
        Array<Scalar> gx(self.grad.size());
        if (training) {
          sum_dxhat = gbeta * gam;
          sum_dxhat_xhat = ggamma * gam;
          const Scalar n = static_cast<Scalar>(count);
          for (Index b = 0; b < batch; ++b)
            for (Index c = 0; c < channels; ++c) {
              const Index off = (b * channels + c) * length;
              gx.segment(off, length) = (inv_std[c] / n) * (n * gam[c] * self.grad.segment(off, length) -
                                                           sum_dxhat[c] - xhat.segment(off, length) * sum_dxhat_xhat[c]);
            }
        } else {
          for (Index b = 0; b < batch; ++b)
            for (Index c = 0; c < channels; ++c) {
              const Index off = (b * channels + c) * length;
              gx.segment(off, length) = self.grad.segment(off, length) * (gam[c] * inv_std[c]);
            }
        }
        px.accumulate(gx);
      });
}

/// Pads [B, C, T] with zeros at the end of the time axis to `length`.
template <typename Scalar>
Tensor<Scalar> pad_time(const Tensor<Scalar>& a, Index length) {
  detail::require_ndim(a.shape(), 3, "pad_time");
  const Index rows = a.dim(0) * a.dim(1), t = a.dim(2);
  if (length < t) throw ShapeError("pad_time: target shorter than input");
  if (length == t) return a;
  Array<Scalar> y = Array<Scalar>::Zero(rows * length);
  for (Index r = 0; r < rows; ++r) y.segment(r * length, t) = a.value().segment(r * t, t);
  return Tensor<Scalar>::make_result({a.dim(0), a.dim(1), length}, std::move(y), {a.node()},
                                     [rows, t, length](Node<Scalar>& self) {
                                       Array<Scalar> g(rows * t);
                                       for (Index r = 0; r < rows; ++r) g.segment(r * t, t) = self.grad.segment(r * length, t);
                                       self.parents[0]->accumulate(g);
                                     });
}

}  // namespace zslab

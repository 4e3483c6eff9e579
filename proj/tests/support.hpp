#pragma once

#include "zslab/ops.hpp"
#include "zslab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace zslab::testing {

using TensorD = Tensor<double>;
using LossFn = std::function<TensorD(const std::vector<TensorD>&)>;

inline TensorD random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  Array<double> v(numel_of(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(v), grad);
}

/// Random projection so that sum(w * x) has a non-trivial gradient.
inline TensorD project(const TensorD& x, CounterRng& rng) {
  TensorD w = random_tensor(x.shape(), rng, -1.0, 1.0, false);
  return sum(mul(x, w));
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-2) over every
/// input entry, with central differences of step h.
inline double gradcheck(const LossFn& f, std::vector<TensorD> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  std::vector<Array<double>> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad());

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k].mutable_value();
    for (Index i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      double fp, fm;
      {
        NoGradGuard guard;
        x[i] = orig + h;
        fp = f(inputs).item();
        x[i] = orig - h;
        fm = f(inputs).item();
      }
      x[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-2});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("zslab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace zslab::testing

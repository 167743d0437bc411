// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <random>
#include <vector>

#include "voicespace/rng.hpp"
#include "voicespace/tensor.hpp"

namespace vs_test {

using voicespace::Rng;
using voicespace::Shape;
using voicespace::Tensor;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0,
                            double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(voicespace::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Backward through `loss(x)` against central differences; returns the
// violation ratio (<= 1 passes at 1e-4 relative / 1e-7 absolute).
inline double grad_check(const std::function<Tensor(const Tensor&)>& loss,
                         const Tensor& x0, double h = 1e-5) {
  Tensor x = x0.clone(true);
  Tensor l = loss(x);
  voicespace::backward(l);
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  if (analytic.empty()) analytic.assign(x.numel(), 0.0);
  auto numeric = voicespace::finite_diff_grad(
      [&](const Tensor& p) { return loss(p).item(); }, x0, h);
  return voicespace::grad_violation(analytic, numeric.data());
}

// Naive oracles kept independent of the library's kernels.
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b,
                                        std::size_t m, std::size_t k,
                                        std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

inline std::vector<double> naive_softmax(const std::vector<double>& row) {
  double mx = row[0];
  for (double x : row) mx = std::max(mx, x);
  std::vector<double> e(row.size());
  double z = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    e[i] = std::exp(row[i] - mx);
    z += e[i];
  }
  for (auto& x : e) x /= z;
  return e;
}

inline std::vector<double> to_vec(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace vs_test

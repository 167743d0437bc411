// SPDX-License-Identifier: Apache-2.0
#include "voicespace/params.hpp"

namespace voicespace {

Tensor gaussian_tensor(Rng& rng, Shape shape, double stddev,
                       bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * gaussian(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

void set_requires_grad(const ParamList& params, bool requires_grad) {
  for (const auto& p : params) *p.tensor = p.tensor->clone(requires_grad);
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

}  // namespace voicespace

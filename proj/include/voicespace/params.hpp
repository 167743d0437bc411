// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "voicespace/rng.hpp"
#include "voicespace/tensor.hpp"

namespace voicespace {

// Non-owning view used by the optimizer and checkpoint code to walk every
// learnable tensor of a model under a stable name.
struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};
using ParamList = std::vector<NamedTensor>;

// Gaussian N(0, stddev^2) leaf tensor.
Tensor gaussian_tensor(Rng& rng, Shape shape, double stddev,
                       bool requires_grad = true);

void set_requires_grad(const ParamList& params, bool requires_grad);
void zero_grads(const ParamList& params);

}  // namespace voicespace

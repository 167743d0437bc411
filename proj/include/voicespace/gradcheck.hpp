// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference audit of every training loss on small random problems.
// Each case draws its own sizes; the loss options (norm, symmetric InfoNCE,
// cosine similarity, loss weights) come from the run config.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voicespace/config.hpp"

namespace voicespace {

struct GradCheckRow {
  std::string loss;  // cfm_pretrain, cfm_mva, cfm_self_distill, infonce, intra, total
  std::size_t cases = 0;
  std::size_t coordinates = 0;  // perturbed coordinates summed over cases
  double max_rel_error = 0.0;   // |a - n| / max(|a|, |n|, 1e-6)
  double max_violation = 0.0;   // against max(1e-4 * max(|a|, |n|), 1e-7); <= 1 passes
};

std::vector<GradCheckRow> grad_check_suite(const RunConfig& cfg, std::size_t cases, std::uint64_t seed);

std::string grad_check_csv(const std::vector<GradCheckRow>& rows);

}  // namespace voicespace

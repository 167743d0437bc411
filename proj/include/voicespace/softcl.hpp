// SPDX-License-Identifier: Apache-2.0
//
// Soft contrastive alignment between aggregated modality embeddings v_m and
// reference speaker embeddings s_r (rows are paired by index):
//
//   inter: symmetric InfoNCE over sim(v_m^i, s_r^j) / tau with diagonal
//          positives.
//   intra: mean_i KL(p*_i(s_r, s_r) || p*_i(s_r, v_m)), where p_i is a row
//          softmax of similarities over the batch and p* renormalizes
//          exp(p_ij) over the off-diagonal entries only.
//
// Similarity is the raw dot product unless the cosine option is set.
#pragma once

#include "voicespace/tensor.hpp"

namespace voicespace {

inline constexpr double kTemperatureInit = 0.07;
inline constexpr double kTemperatureFloor = 0.01;

struct SimilarityOptions {
  bool cosine = false;
};

// [N x d], [M x d] -> [N x M] of sim(a_i, b_j) / tau.
Tensor similarity_logits(const Tensor& a, const Tensor& b, const Tensor& tau,
                         SimilarityOptions opts = {});

// Row-stochastic [N x N]; N must be at least 2.
Tensor self_similarity(const Tensor& embs, const Tensor& tau,
                       SimilarityOptions opts = {});

// [N x N] row-stochastic -> [N x (N-1)] row-stochastic.
Tensor neg_disentangle(const Tensor& p);

// Both views of one batch's soft labels.
struct SoftLabels {
  Tensor full;          // [N x N]
  Tensor disentangled;  // [N x (N-1)]
};
SoftLabels soft_labels(const Tensor& embs, const Tensor& tau,
                       SimilarityOptions opts = {});

// The teacher distribution built from s_r is treated as a constant: no
// gradient reaches s_r or tau through it.
Tensor intra_loss(const Tensor& s_r, const Tensor& v_m, const Tensor& tau,
                  SimilarityOptions opts = {});

// symmetric: average of the row (v -> s) and column (s -> v) cross-entropies;
// otherwise rows only.
Tensor infonce_loss(const Tensor& v_m, const Tensor& s_r, const Tensor& tau,
                    bool symmetric = true, SimilarityOptions opts = {});

Tensor total_loss(const Tensor& l_cfm, const Tensor& l_intra,
                  const Tensor& l_inter, double lambda1, double lambda2);

// Projects a learnable temperature back onto [kTemperatureFloor, inf).
void clamp_temperature(Tensor& tau);

}  // namespace voicespace

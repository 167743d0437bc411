// SPDX-License-Identifier: Apache-2.0
#include "voicespace/softcl.hpp"

#include <algorithm>

#include "voicespace/errors.hpp"

namespace voicespace {

namespace {

void check_tau(const Tensor& tau) {
  if (tau.numel() != 1 || !(tau.item() > 0.0)) {
    throw ContractError("temperature must be a positive scalar");
  }
}

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor similarity_logits(const Tensor& a, const Tensor& b, const Tensor& tau,
                         SimilarityOptions opts) {
  check_tau(tau);
  const Tensor lhs = opts.cosine ? l2_normalize_rows(a) : a;
  const Tensor rhs = opts.cosine ? l2_normalize_rows(b) : b;
  return div_scalar(matmul(lhs, transpose(rhs)), tau);
}

Tensor self_similarity(const Tensor& embs, const Tensor& tau,
                       SimilarityOptions opts) {
  if (embs.rank() != 2 || embs.rows() < 2) {
    throw ContractError("self_similarity needs at least 2 rows, got " +
                        shape_str(embs.shape()));
  }
  return softmax_rows(similarity_logits(embs, embs, tau, opts));
}

Tensor neg_disentangle(const Tensor& p) {
  return softmax_rows(drop_diagonal(p));
}

SoftLabels soft_labels(const Tensor& embs, const Tensor& tau,
                       SimilarityOptions opts) {
  Tensor full = self_similarity(embs, tau, opts);
  Tensor dis = neg_disentangle(full);
  return {std::move(full), std::move(dis)};
}

Tensor intra_loss(const Tensor& s_r, const Tensor& v_m, const Tensor& tau,
                  SimilarityOptions opts) {
  check_pair(s_r, v_m, "intra_loss");
  if (s_r.rows() < 2) {
    throw ContractError("intra_loss needs at least 2 rows, got " +
                        shape_str(s_r.shape()));
  }
  const Tensor teacher =
      soft_labels(s_r.detach(), tau.detach(), opts).disentangled;
  const Tensor cross = softmax_rows(similarity_logits(s_r, v_m, tau, opts));
  return kl_rows(teacher, neg_disentangle(cross));
}

Tensor infonce_loss(const Tensor& v_m, const Tensor& s_r, const Tensor& tau,
                    bool symmetric, SimilarityOptions opts) {
  check_pair(v_m, s_r, "infonce_loss");
  const Tensor logits = similarity_logits(v_m, s_r, tau, opts);
  const Tensor rows = scale(mean(diagonal(log_softmax_rows(logits))), -1.0);
  if (!symmetric) return rows;
  const Tensor cols =
      scale(mean(diagonal(log_softmax_rows(transpose(logits)))), -1.0);
  return scale(add(rows, cols), 0.5);
}

Tensor total_loss(const Tensor& l_cfm, const Tensor& l_intra,
                  const Tensor& l_inter, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw ContractError("loss weights must be nonnegative");
  }
  for (const Tensor* t : {&l_cfm, &l_intra, &l_inter}) {
    if (t->numel() != 1) {
      throw DimensionError("total_loss expects scalars, got " +
                           shape_str(t->shape()));
    }
  }
  return add(add(l_cfm, scale(l_intra, lambda1)), scale(l_inter, lambda2));
}

void clamp_temperature(Tensor& tau) {
  auto v = tau.mutable_data();
  v[0] = std::max(v[0], kTemperatureFloor);
}

}  // namespace voicespace

// SPDX-License-Identifier: Apache-2.0
//
// Optimal-transport conditional flow matching.
//
// Training pairs a prior draw x0 with a data point x1, picks t in [0, 1] and
// regresses the vector field at the straight-line point (1 - t) x0 + t x1
// onto the constant velocity x1 - x0. The field is a pointwise MLP over
//
//   [ x_t | time embedding | speaker condition | pooled tokens | prompt ]
//
// where the prompt (a masked copy of x1) is only populated in pretraining.
// Generation integrates the field from t = 0 to 1 with explicit Euler.
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "voicespace/params.hpp"
#include "voicespace/rng.hpp"
#include "voicespace/tensor.hpp"

namespace voicespace {

class World;
struct ModalityBatch;

inline constexpr std::size_t kTimeEmbedWidth = 8;

// [sin(w_k t), cos(w_k t)] for w_k = 2^k pi, k < width / 2.
std::vector<double> time_embedding(double t, std::size_t width = kTimeEmbedWidth);

enum class CfmMode { pretrain, mva, self_distill };
std::string cfm_mode_name(CfmMode mode);
CfmMode parse_cfm_mode(const std::string& name);

enum class LossNorm { l1, l2 };

struct FieldConfig {
  std::size_t data_dim = 8;    // D
  std::size_t time_dim = kTimeEmbedWidth;
  std::size_t cond_dim = 32;   // d
  std::size_t token_dim = 8;   // d_c, 0 for no tokens
  bool prompt = true;          // append a D-wide prompt slot
  std::vector<std::size_t> hidden{128, 128};

  std::size_t input_width() const;
  void validate() const;
};

struct FieldParams {
  FieldConfig config;
  std::vector<Tensor> weights;  // [in x out]
  std::vector<Tensor> biases;

  static FieldParams init(const FieldConfig& config, Rng& rng);
  void collect(ParamList& out, const std::string& prefix);
};

// x_t: [N x D], t: N values, cond: [N x d], tokens: [N x d_c] (pooled),
// prompt: [N x D]. A default-constructed Tensor marks an absent slot, which
// reads as zeros. Returns [N x D].
Tensor field_forward(const Tensor& x_t, const std::vector<double>& t,
                     const Tensor& cond, const Tensor& tokens,
                     const Tensor& prompt, const FieldParams& params);

// (1 - t) x0 + t x1; rows of a batch may carry their own t.
Tensor ot_path(const Tensor& x0, const Tensor& x1, double t);
Tensor ot_path(const Tensor& x0, const Tensor& x1, const std::vector<double>& t);
Tensor ot_target(const Tensor& x0, const Tensor& x1);

// One training example. tokens are [T_c x d_c] and get mean-pooled; prompt
// is only read in pretrain mode.
struct FlowSample {
  Tensor x0;      // [D]
  Tensor x1;      // [D]
  double t = 0.0;
  Tensor cond;    // [d]
  Tensor tokens;  // [T_c x d_c] or absent
  Tensor prompt;  // [D] or absent
};

// Row-stacked form of a set of FlowSamples; tokens already pooled.
struct FlowBatch {
  Tensor x0;      // [N x D]
  Tensor x1;      // [N x D]
  std::vector<double> t;
  Tensor cond;    // [N x d]
  Tensor tokens;  // [N x d_c] or absent
  Tensor prompt;  // [N x D] or absent

  std::size_t size() const { return t.size(); }
};

FlowBatch stack_samples(const std::vector<FlowSample>& samples);

// Mean over the batch of ||ot_target - field||_1 (or squared L2). In mva and
// self_distill modes the prompt slot is zero regardless of the batch.
Tensor cfm_loss(const FlowBatch& batch, const FieldParams& params, CfmMode mode,
                LossNorm norm = LossNorm::l1);
Tensor cfm_loss(const std::vector<FlowSample>& samples, const FieldParams& params,
                CfmMode mode, LossNorm norm = LossNorm::l1);

// Masked-prompt analog: each coordinate of x1 kept with probability keep.
Tensor mask_prompt(const Tensor& x1, double keep, Rng& rng);

using VelocityField = std::function<Tensor(const Tensor& x, double t)>;

inline constexpr std::size_t kDefaultOdeSteps = 10;

// Explicit Euler from t = 0 to 1 in `steps` equal steps.
Tensor sample_ode(const VelocityField& field, const Tensor& x0, std::size_t steps);
// Prompt-free generation; cond [N x d], tokens [N x d_c] or absent.
Tensor sample_ode(const FieldParams& params, const Tensor& cond,
                  const Tensor& tokens, const Tensor& x0,
                  std::size_t steps = kDefaultOdeSteps);

// ---- self-distillation ----------------------------------------------------
//
// The base field converts each source utterance to a different speaker
// (uniform over `candidates` minus the source), the conversion is
// re-tokenized, and the triple asks the field to recover the original data
// point from the source speaker embedding and the converted tokens.

struct DistillPair {
  Tensor tokens;   // C-bar, [T_c x d_c]
  Tensor speaker;  // source reference embedding, [d]
  Tensor x1;       // source data point, [D]
  std::size_t source = 0;
  std::size_t target = 0;
};

std::vector<DistillPair> self_distill_pairs(const World& world, const ModalityBatch& batch,
                                            const FieldParams& base, Rng& rng,
                                            const std::vector<std::size_t>& candidates,
                                            std::size_t steps = kDefaultOdeSteps);

}  // namespace voicespace

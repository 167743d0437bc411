// SPDX-License-Identifier: Apache-2.0
//
// Multimodal voice aggregator: per-modality projection heads and the
// KV-Former, a pre-norm Transformer block stack whose queries come from the
// input embedding and whose keys/values are projections of a learnable bank.
//
// Batched tensors are row-major with one sample per row, so a projection is
// written `x * W` with W stored [in x out].
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "voicespace/params.hpp"
#include "voicespace/rng.hpp"
#include "voicespace/tensor.hpp"

namespace voicespace {

enum class Modality { face, text, speech };

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

enum class ProjectorMode { pool, mlp };

// Maps a raw encoder embedding of any modality into the d-wide latent space.
// mlp: affine layers with SiLU between them (one layer is a plain linear map).
// pool: adaptive average pooling of the raw vector into `pool_bins` bins,
// then one affine layer; accepts any input width.
struct ModalityProjector {
  Modality modality = Modality::face;
  ProjectorMode mode = ProjectorMode::mlp;
  std::size_t input_width = 0;  // ignored in pool mode
  std::size_t pool_bins = 1;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static ModalityProjector mlp(Modality modality, std::size_t input_width,
                               const std::vector<std::size_t>& hidden,
                               std::size_t output_width, Rng& rng);
  static ModalityProjector pool(Modality modality, std::size_t bins,
                                std::size_t output_width, Rng& rng);

  std::size_t output_width() const;
  // raw: [N x W] (or [W]) -> [N x d]
  Tensor forward(const Tensor& raw) const;
  void collect(ParamList& out, const std::string& prefix);
};

struct SpeakerVector {
  Tensor values;  // [d]
  Modality source = Modality::speech;
};

SpeakerVector project_modality(const Tensor& raw, const ModalityProjector& proj);

// Pooling matrix [width x bins] implementing adaptive average pooling.
Tensor adaptive_pool_matrix(std::size_t width, std::size_t bins);

struct MvaConfig {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t bank_size = 64;
  std::size_t depth = 2;
  std::size_t ff_mult = 4;
  bool feed_forward = true;
  bool residual = true;
  bool norm = true;
  bool out_proj = true;
  // Scale logits by sqrt(dim / heads) instead of sqrt(dim).
  bool per_head_scale = false;

  // Bare cross-attention: one block, no norm, residual, or feed-forward.
  static MvaConfig attention_only(std::size_t dim, std::size_t heads,
                                  std::size_t bank_size);
  void validate() const;
};

struct MvaBlock {
  Tensor wq, wk, wv, wo;
  Tensor norm1_gain, norm1_bias, norm2_gain, norm2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct MvaParams {
  MvaConfig config;
  Tensor kv_bank;  // [K x d]
  std::vector<MvaBlock> blocks;

  static MvaParams init(const MvaConfig& config, Rng& rng);
  void collect(ParamList& out, const std::string& prefix);
};

// states: [N x d] -> [N x d]. When `attention` is given it receives, for
// every block, one [N x K] weight matrix per head (block-major order).
Tensor mva_forward_batch(const Tensor& states, const MvaParams& params,
                         std::vector<Tensor>* attention = nullptr);
SpeakerVector mva_forward(const SpeakerVector& state, const MvaParams& params);

// The "w/o MVA" replacement: one affine map d -> d.
struct LinearAggregator {
  Tensor weight;  // [d x d]
  Tensor bias;    // [d]

  static LinearAggregator init(std::size_t dim, Rng& rng);
  Tensor forward(const Tensor& states) const;
  void collect(ParamList& out, const std::string& prefix);
};

// Per entry, true when the MVA input should be the reference-speech
// embedding (probability p), false to keep the entry's own modality.
std::vector<bool> speech_anchor_select(std::size_t n, double p, Rng& rng);

}  // namespace voicespace

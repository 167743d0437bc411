// SPDX-License-Identifier: Apache-2.0
#include "voicespace/kvformer.hpp"

#include <cmath>

#include "voicespace/errors.hpp"

namespace voicespace {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::face:
      return "face";
    case Modality::text:
      return "text";
    case Modality::speech:
      return "speech";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  if (name == "face") return Modality::face;
  if (name == "text") return Modality::text;
  if (name == "speech") return Modality::speech;
  throw ContractError("unknown modality '" + std::string(name) +
                      "' (expected face, text, or speech)");
}

namespace {

Tensor as_matrix(const Tensor& t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 1) return reshape(t, {1, t.numel()});
  throw DimensionError("expected a vector or matrix, got " + shape_str(t.shape()));
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace

// ---- projectors -------------------------------------------------------------

ModalityProjector ModalityProjector::mlp(Modality modality,
                                         std::size_t input_width,
                                         const std::vector<std::size_t>& hidden,
                                         std::size_t output_width, Rng& rng) {
  ModalityProjector p;
  p.modality = modality;
  p.mode = ProjectorMode::mlp;
  p.input_width = input_width;
  std::size_t in = input_width;
  auto widths = hidden;
  widths.push_back(output_width);
  for (auto out : widths) {
    p.weights.push_back(gaussian_tensor(rng, {in, out}, 1.0 / std::sqrt(double(in))));
    p.biases.push_back(Tensor::zeros({out}, true));
    in = out;
  }
  return p;
}

ModalityProjector ModalityProjector::pool(Modality modality, std::size_t bins,
                                          std::size_t output_width, Rng& rng) {
  if (bins == 0) throw ContractError("pool projector needs at least one bin");
  ModalityProjector p;
  p.modality = modality;
  p.mode = ProjectorMode::pool;
  p.pool_bins = bins;
  p.weights.push_back(
      gaussian_tensor(rng, {bins, output_width}, 1.0 / std::sqrt(double(bins))));
  p.biases.push_back(Tensor::zeros({output_width}, true));
  return p;
}

std::size_t ModalityProjector::output_width() const {
  return weights.back().cols();
}

Tensor adaptive_pool_matrix(std::size_t width, std::size_t bins) {
  if (width == 0 || bins == 0 || bins > width) {
    throw DimensionError("adaptive pooling of width " + std::to_string(width) +
                         " into " + std::to_string(bins) + " bins");
  }
  std::vector<double> m(width * bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t start = (b * width) / bins;
    const std::size_t end = ((b + 1) * width + bins - 1) / bins;
    for (std::size_t i = start; i < end; ++i)
      m[i * bins + b] = 1.0 / static_cast<double>(end - start);
  }
  return Tensor::matrix(width, bins, std::move(m));
}

Tensor ModalityProjector::forward(const Tensor& raw) const {
  Tensor x = as_matrix(raw);
  if (mode == ProjectorMode::pool) {
    x = matmul(x, adaptive_pool_matrix(x.cols(), pool_bins));
    return affine(x, weights[0], biases[0]);
  }
  if (x.cols() != input_width) {
    throw DimensionError(std::string(modality_name(modality)) +
                         " projector expects width " +
                         std::to_string(input_width) + ", got " +
                         shape_str(raw.shape()));
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    x = affine(x, weights[l], biases[l]);
    if (l + 1 < weights.size()) x = silu(x);
  }
  return x;
}

void ModalityProjector::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back({prefix + ".w" + std::to_string(l), &weights[l]});
    out.push_back({prefix + ".b" + std::to_string(l), &biases[l]});
  }
}

SpeakerVector project_modality(const Tensor& raw, const ModalityProjector& proj) {
  Tensor out = proj.forward(raw);
  if (out.rows() != 1) {
    throw DimensionError("project_modality takes one embedding, got " +
                         shape_str(raw.shape()));
  }
  return {reshape(out, {out.cols()}), proj.modality};
}

// ---- KV-Former --------------------------------------------------------------

MvaConfig MvaConfig::attention_only(std::size_t dim, std::size_t heads,
                                    std::size_t bank_size) {
  MvaConfig c;
  c.dim = dim;
  c.heads = heads;
  c.bank_size = bank_size;
  c.depth = 1;
  c.feed_forward = false;
  c.residual = false;
  c.norm = false;
  return c;
}

void MvaConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ContractError("MVA width " + std::to_string(dim) +
                        " is not divisible by " + std::to_string(heads) +
                        " heads");
  }
  if (bank_size < 1) throw ContractError("MVA key-value bank is empty");
  if (depth < 1) throw ContractError("MVA needs at least one block");
}

MvaParams MvaParams::init(const MvaConfig& config, Rng& rng) {
  config.validate();
  MvaParams p;
  p.config = config;
  const std::size_t d = config.dim;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  p.kv_bank = gaussian_tensor(rng, {config.bank_size, d}, 1.0);
  for (std::size_t l = 0; l < config.depth; ++l) {
    MvaBlock b;
    b.wq = gaussian_tensor(rng, {d, d}, s);
    b.wk = gaussian_tensor(rng, {d, d}, s);
    b.wv = gaussian_tensor(rng, {d, d}, s);
    b.wo = gaussian_tensor(rng, {d, d}, s);
    b.norm1_gain = Tensor(Shape{d}, std::vector<double>(d, 1.0), true);
    b.norm1_bias = Tensor::zeros({d}, true);
    b.norm2_gain = Tensor(Shape{d}, std::vector<double>(d, 1.0), true);
    b.norm2_bias = Tensor::zeros({d}, true);
    const std::size_t h = config.ff_mult * d;
    b.ff_w1 = gaussian_tensor(rng, {d, h}, s);
    b.ff_b1 = Tensor::zeros({h}, true);
    b.ff_w2 = gaussian_tensor(rng, {h, d}, 1.0 / std::sqrt(static_cast<double>(h)));
    b.ff_b2 = Tensor::zeros({d}, true);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

void MvaParams::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".kv_bank", &kv_bank});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = prefix + ".block" + std::to_string(l);
    out.push_back({p + ".wq", &b.wq});
    out.push_back({p + ".wk", &b.wk});
    out.push_back({p + ".wv", &b.wv});
    if (config.out_proj) out.push_back({p + ".wo", &b.wo});
    if (config.norm) {
      out.push_back({p + ".norm1_gain", &b.norm1_gain});
      out.push_back({p + ".norm1_bias", &b.norm1_bias});
    }
    if (config.feed_forward) {
      if (config.norm) {
        out.push_back({p + ".norm2_gain", &b.norm2_gain});
        out.push_back({p + ".norm2_bias", &b.norm2_bias});
      }
      out.push_back({p + ".ff_w1", &b.ff_w1});
      out.push_back({p + ".ff_b1", &b.ff_b1});
      out.push_back({p + ".ff_w2", &b.ff_w2});
      out.push_back({p + ".ff_b2", &b.ff_b2});
    }
  }
}

namespace {

Tensor cross_attention(const Tensor& x, const Tensor& bank, const MvaBlock& b,
                       const MvaConfig& c, std::vector<Tensor>* attention) {
  const Tensor q = matmul(x, b.wq);
  const Tensor k = matmul(bank, b.wk);
  const Tensor v = matmul(bank, b.wv);
  const std::size_t hw = c.dim / c.heads;
  const double scale_by =
      1.0 / std::sqrt(static_cast<double>(c.per_head_scale ? hw : c.dim));
  std::vector<Tensor> heads;
  heads.reserve(c.heads);
  for (std::size_t h = 0; h < c.heads; ++h) {
    Tensor qh = c.heads == 1 ? q : slice_cols(q, h * hw, (h + 1) * hw);
    Tensor kh = c.heads == 1 ? k : slice_cols(k, h * hw, (h + 1) * hw);
    Tensor vh = c.heads == 1 ? v : slice_cols(v, h * hw, (h + 1) * hw);
    Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), scale_by));
    if (attention) attention->push_back(weights);
    heads.push_back(matmul(weights, vh));
  }
  Tensor out = c.heads == 1 ? heads[0] : concat_cols(heads);
  return c.out_proj ? matmul(out, b.wo) : out;
}

}  // namespace

Tensor mva_forward_batch(const Tensor& states, const MvaParams& params,
                         std::vector<Tensor>* attention) {
  const auto& c = params.config;
  Tensor x = as_matrix(states);
  if (x.cols() != c.dim) {
    throw DimensionError("MVA expects width " + std::to_string(c.dim) +
                         ", got " + shape_str(states.shape()));
  }
  for (const auto& b : params.blocks) {
    Tensor a_in = c.norm ? layer_norm_rows(x, b.norm1_gain, b.norm1_bias) : x;
    Tensor a = cross_attention(a_in, params.kv_bank, b, c, attention);
    x = c.residual ? add(x, a) : a;
    if (c.feed_forward) {
      Tensor f_in = c.norm ? layer_norm_rows(x, b.norm2_gain, b.norm2_bias) : x;
      Tensor f = add_bias(matmul(silu(add_bias(matmul(f_in, b.ff_w1), b.ff_b1)),
                                 b.ff_w2),
                          b.ff_b2);
      x = c.residual ? add(x, f) : f;
    }
  }
  return x;
}

SpeakerVector mva_forward(const SpeakerVector& state, const MvaParams& params) {
  Tensor out = mva_forward_batch(state.values, params);
  return {reshape(out, {out.cols()}), state.source};
}

LinearAggregator LinearAggregator::init(std::size_t dim, Rng& rng) {
  LinearAggregator a;
  a.weight = gaussian_tensor(rng, {dim, dim}, 1.0 / std::sqrt(double(dim)));
  a.bias = Tensor::zeros({dim}, true);
  return a;
}

Tensor LinearAggregator::forward(const Tensor& states) const {
  return affine(as_matrix(states), weight, bias);
}

void LinearAggregator::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

std::vector<bool> speech_anchor_select(std::size_t n, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ContractError("anchor probability must lie in [0, 1], got " +
                        std::to_string(p));
  }
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = uniform01(rng) < p;
  return out;
}

}  // namespace voicespace

// SPDX-License-Identifier: Apache-2.0
#include "voicespace/cfm.hpp"

#include <cmath>
#include <numbers>

#include "voicespace/errors.hpp"

namespace voicespace {

namespace {

void check_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ContractError("flow time must lie in [0, 1], got " + std::to_string(t));
  }
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
}

Tensor as_rows(const Tensor& t) {
  return t.rank() == 1 ? t.reshaped({1, t.numel()}) : t;
}

// Optional [N x w] slot: an absent tensor reads as zeros.
Tensor slot(const Tensor& t, std::size_t n, std::size_t w, const char* name) {
  if (t.rank() == 0) return Tensor::zeros({n, w});
  Tensor r = as_rows(t);
  if (r.rows() != n || r.cols() != w) {
    throw DimensionError(std::string("field_forward: ") + name + " shape " +
                         shape_str(t.shape()) + " does not match " +
                         shape_str({n, w}));
  }
  return r;
}

Tensor pool_tokens(const Tensor& tokens) {
  if (tokens.rank() == 0) return tokens;
  if (tokens.rank() == 1) return tokens;
  const std::size_t rows = tokens.rows(), w = tokens.cols();
  std::vector<double> out(w, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < w; ++j) out[j] += tokens.at(i, j);
  for (auto& v : out) v /= double(rows);
  return Tensor::vector(std::move(out));
}

}  // namespace

std::vector<double> time_embedding(double t, std::size_t width) {
  std::vector<double> out(width);
  for (std::size_t k = 0; 2 * k < width; ++k) {
    const double w = std::ldexp(std::numbers::pi, int(k));
    out[2 * k] = std::sin(w * t);
    if (2 * k + 1 < width) out[2 * k + 1] = std::cos(w * t);
  }
  return out;
}

std::string cfm_mode_name(CfmMode mode) {
  switch (mode) {
    case CfmMode::pretrain: return "pretrain";
    case CfmMode::mva: return "mva";
    case CfmMode::self_distill: return "self_distill";
  }
  return "?";
}

CfmMode parse_cfm_mode(const std::string& name) {
  if (name == "pretrain") return CfmMode::pretrain;
  if (name == "mva") return CfmMode::mva;
  if (name == "self_distill") return CfmMode::self_distill;
  throw ConfigError("unknown flow mode '" + name + "'");
}

std::size_t FieldConfig::input_width() const {
  return data_dim + time_dim + cond_dim + token_dim + (prompt ? data_dim : 0);
}

void FieldConfig::validate() const {
  if (data_dim == 0) throw ConfigError("field data_dim must be positive");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("field hidden widths must be positive");
  }
}

FieldParams FieldParams::init(const FieldConfig& config, Rng& rng) {
  config.validate();
  FieldParams p;
  p.config = config;
  std::size_t in = config.input_width();
  auto widths = config.hidden;
  widths.push_back(config.data_dim);
  for (auto out : widths) {
    p.weights.push_back(gaussian_tensor(rng, {in, out}, 1.0 / std::sqrt(double(in))));
    p.biases.push_back(Tensor::zeros({out}, true));
    in = out;
  }
  return p;
}

void FieldParams::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back({prefix + "w" + std::to_string(i), &weights[i]});
    out.push_back({prefix + "b" + std::to_string(i), &biases[i]});
  }
}

Tensor field_forward(const Tensor& x_t, const std::vector<double>& t,
                     const Tensor& cond, const Tensor& tokens,
                     const Tensor& prompt, const FieldParams& params) {
  const FieldConfig& cfg = params.config;
  const Tensor x = as_rows(x_t);
  const std::size_t n = x.rows();
  if (x.cols() != cfg.data_dim) {
    throw DimensionError("field_forward: x_t shape " + shape_str(x_t.shape()) +
                         " does not match data width " + std::to_string(cfg.data_dim));
  }
  if (t.size() != n) {
    throw DimensionError("field_forward: " + std::to_string(t.size()) +
                         " times for " + std::to_string(n) + " rows");
  }
  std::vector<Tensor> parts{x};
  if (cfg.time_dim > 0) {
    std::vector<double> emb;
    emb.reserve(n * cfg.time_dim);
    for (double ti : t) {
      auto e = time_embedding(ti, cfg.time_dim);
      emb.insert(emb.end(), e.begin(), e.end());
    }
    parts.push_back(Tensor({n, cfg.time_dim}, std::move(emb)));
  }
  if (cfg.cond_dim > 0) parts.push_back(slot(cond, n, cfg.cond_dim, "cond"));
  if (cfg.token_dim > 0) parts.push_back(slot(tokens, n, cfg.token_dim, "tokens"));
  if (cfg.prompt) parts.push_back(slot(prompt, n, cfg.data_dim, "prompt"));

  Tensor h = parts.size() == 1 ? x : concat_cols(parts);
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    h = add_bias(matmul(h, params.weights[i]), params.biases[i]);
    if (i + 1 < params.weights.size()) h = silu(h);
  }
  return h;
}

Tensor ot_path(const Tensor& x0, const Tensor& x1, double t) {
  check_t(t);
  check_same(x0, x1, "ot_path");
  return add(scale(x0, 1.0 - t), scale(x1, t));
}

Tensor ot_path(const Tensor& x0, const Tensor& x1, const std::vector<double>& t) {
  check_same(x0, x1, "ot_path");
  const Tensor a = as_rows(x0), b = as_rows(x1);
  if (t.size() != a.rows()) {
    throw DimensionError("ot_path: " + std::to_string(t.size()) + " times for " +
                         std::to_string(a.rows()) + " rows");
  }
  const std::size_t w = a.cols();
  std::vector<double> keep(a.numel()), move(a.numel());
  for (std::size_t i = 0; i < t.size(); ++i) {
    check_t(t[i]);
    for (std::size_t j = 0; j < w; ++j) {
      keep[i * w + j] = 1.0 - t[i];
      move[i * w + j] = t[i];
    }
  }
  return add(mul(a, Tensor(a.shape(), std::move(keep))),
             mul(b, Tensor(b.shape(), std::move(move))));
}

Tensor ot_target(const Tensor& x0, const Tensor& x1) {
  check_same(x0, x1, "ot_target");
  return sub(x1, x0);
}

FlowBatch stack_samples(const std::vector<FlowSample>& samples) {
  if (samples.empty()) throw ContractError("flow batch is empty");
  FlowBatch b;
  std::vector<Tensor> x0, x1, cond, tokens, prompt;
  const bool has_tokens = samples[0].tokens.rank() > 0;
  const bool has_prompt = samples[0].prompt.rank() > 0;
  const bool has_cond = samples[0].cond.rank() > 0;
  for (const auto& s : samples) {
    x0.push_back(as_rows(s.x0));
    x1.push_back(as_rows(s.x1));
    b.t.push_back(s.t);
    if (has_cond) cond.push_back(as_rows(s.cond));
    if (has_tokens) tokens.push_back(as_rows(pool_tokens(s.tokens)));
    if (has_prompt) prompt.push_back(as_rows(s.prompt));
  }
  b.x0 = concat_rows(x0);
  b.x1 = concat_rows(x1);
  b.cond = has_cond ? concat_rows(cond) : Tensor();
  b.tokens = has_tokens ? concat_rows(tokens) : Tensor();
  b.prompt = has_prompt ? concat_rows(prompt) : Tensor();
  return b;
}

Tensor cfm_loss(const FlowBatch& batch, const FieldParams& params, CfmMode mode,
                LossNorm norm) {
  if (batch.size() == 0) throw ContractError("flow batch is empty");
  const Tensor x_t = ot_path(batch.x0, batch.x1, batch.t);
  const Tensor target = ot_target(batch.x0, batch.x1);
  const Tensor prompt = mode == CfmMode::pretrain ? batch.prompt : Tensor();
  const Tensor pred = field_forward(x_t, batch.t, batch.cond, batch.tokens, prompt, params);
  const Tensor diff = sub(target, pred);
  const Tensor total = norm == LossNorm::l1 ? sum(abs(diff)) : sum(square(diff));
  return scale(total, 1.0 / double(batch.size()));
}

Tensor cfm_loss(const std::vector<FlowSample>& samples, const FieldParams& params,
                CfmMode mode, LossNorm norm) {
  return cfm_loss(stack_samples(samples), params, mode, norm);
}

Tensor mask_prompt(const Tensor& x1, double keep, Rng& rng) {
  std::vector<double> out(x1.data().begin(), x1.data().end());
  for (auto& v : out) {
    if (uniform01(rng) >= keep) v = 0.0;
  }
  return Tensor(x1.shape(), std::move(out));
}

Tensor sample_ode(const VelocityField& field, const Tensor& x0, std::size_t steps) {
  if (steps == 0) throw ContractError("sample_ode needs at least one step");
  const double dt = 1.0 / double(steps);
  Tensor x = x0.detach();
  for (std::size_t k = 0; k < steps; ++k) {
    const Tensor v = field(x, double(k) * dt);
    check_same(x, v, "sample_ode");
    std::vector<double> next(x.numel());
    for (std::size_t i = 0; i < next.size(); ++i) next[i] = x.at(i) + dt * v.at(i);
    x = Tensor(x.shape(), std::move(next));
  }
  return x;
}

Tensor sample_ode(const FieldParams& params, const Tensor& cond,
                  const Tensor& tokens, const Tensor& x0, std::size_t steps) {
  NoGradGuard no_grad;
  const Tensor c = cond.detach();
  const Tensor tok = tokens.detach();
  return sample_ode(
      [&](const Tensor& x, double t) {
        const Tensor rows = as_rows(x);
        std::vector<double> ts(rows.rows(), t);
        return field_forward(rows, ts, c, tok, Tensor(), params)
            .reshaped(x.shape());
      },
      x0, steps);
}

}  // namespace voicespace

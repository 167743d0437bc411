// SPDX-License-Identifier: Apache-2.0
#include "voicespace/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "voicespace/cfm.hpp"
#include "voicespace/errors.hpp"
#include "voicespace/params.hpp"
#include "voicespace/softcl.hpp"
#include "voicespace/trainer.hpp"

namespace voicespace {

namespace {

constexpr double kStep = 1e-5;

std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); }

Tensor noise(Rng& rng, Shape shape) { return gaussian_tensor(rng, std::move(shape), 1.0, false); }

// Backward once, then central differences on every coordinate of `params`,
// perturbing the tensors in place.
void audit(GradCheckRow& row, const std::function<Tensor()>& loss, const ParamList& params) {
  set_requires_grad(params, true);
  backward(loss());
  for (const auto& p : params) {
    std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    if (analytic.empty()) analytic.assign(p.tensor->numel(), 0.0);
    auto values = p.tensor->mutable_data();
    std::vector<double> numeric(values.size());
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + kStep;
      const double up = loss().item();
      values[i] = keep - kStep;
      const double down = loss().item();
      values[i] = keep;
      numeric[i] = (up - down) / (2.0 * kStep);
    }
    row.coordinates += values.size();
    row.max_rel_error = std::max(row.max_rel_error, max_relative_error(analytic, numeric, 1e-6));
    row.max_violation = std::max(row.max_violation, grad_violation(analytic, numeric));
  }
}

FlowBatch random_flow_batch(Rng& rng, std::size_t n, const FieldConfig& fc) {
  FlowBatch b;
  b.x0 = noise(rng, {n, fc.data_dim});
  b.x1 = noise(rng, {n, fc.data_dim});
  for (std::size_t i = 0; i < n; ++i) b.t.push_back(uniform01(rng));
  b.cond = noise(rng, {n, fc.cond_dim});
  b.tokens = noise(rng, {n, fc.token_dim});
  b.prompt = noise(rng, {n, fc.data_dim});
  return b;
}

// A few-speaker world and a narrow model, sized by the case's rng.
RunConfig small_align_config(const RunConfig& cfg, Rng& rng) {
  RunConfig c = cfg;
  c.stage = Stage::align;
  c.batch_size = between(rng, 3, 6);
  c.shared_tau = false;
  c.learn_tau = true;
  c.heads = 1;
  c.bank_size = between(rng, 2, 5);
  c.depth = 1;
  c.ff_mult = 1;
  c.projector_hidden = {between(rng, 2, 4)};
  c.pool_bins = 2;
  c.field_hidden = {between(rng, 2, 5)};
  c.world.num_speakers = 8;
  c.world.eval_speakers = 2;
  c.world.latent_dim = 2;
  c.world.speech_dim = between(rng, 3, 5);
  c.world.face_dim = 4;
  c.world.text_dim = 3;
  c.world.token_dim = 2;
  c.world.token_rows = 2;
  c.world.data_dim = 2;
  c.world.clusters = 0;
  return c;
}

}  // namespace

std::vector<GradCheckRow> grad_check_suite(const RunConfig& cfg, std::size_t cases, std::uint64_t seed) {
  if (cases == 0) throw ContractError("grad-check needs at least one case");
  const SimilarityOptions sim{cfg.cosine_similarity};
  std::vector<GradCheckRow> rows;
  for (const char* name : {"cfm_pretrain", "cfm_mva", "cfm_self_distill", "infonce", "intra", "total"})
    rows.push_back({name, cases, 0, 0.0, 0.0});

  for (std::size_t k = 0; k < cases; ++k) {
    Rng rng = substream(seed, "gradcheck", k);
    const std::size_t n = between(rng, 2, 5);

    FieldConfig fc;
    fc.data_dim = between(rng, 1, 3);
    fc.time_dim = 2;
    fc.cond_dim = between(rng, 1, 4);
    fc.token_dim = between(rng, 1, 3);
    fc.hidden = {between(rng, 2, 5)};
    const CfmMode modes[] = {CfmMode::pretrain, CfmMode::mva, CfmMode::self_distill};
    for (std::size_t m = 0; m < 3; ++m) {
      FieldParams field = FieldParams::init(fc, rng);
      FlowBatch batch = random_flow_batch(rng, n, fc);
      ParamList params;
      field.collect(params, "field.");
      params.push_back({"cond", &batch.cond});
      audit(rows[m], [&] { return cfm_loss(batch, field, modes[m], cfg.cfm_norm); }, params);
    }

    const std::size_t d = between(rng, 1, 4);
    Tensor v = noise(rng, {n, d});
    Tensor s = noise(rng, {n, d});
    Tensor tau = Tensor::scalar(0.3 + uniform01(rng));
    audit(rows[3], [&] { return infonce_loss(v, s, tau, cfg.symmetric_infonce, sim); }, {{"v", &v}, {"s", &s}, {"tau", &tau}});
    // The teacher side is a constant by design, so only the student input is
    // perturbed.
    audit(rows[4], [&] { return intra_loss(s, v, tau, sim); }, {{"v", &v}});

    const RunConfig ac = small_align_config(cfg, rng);
    const World world = World::generate(ac.world);
    Model model = Model::init(ac, seed + k);
    const auto speakers = alignment_speakers(world, ac.extra_data);
    const Rng draws = rng;
    ParamList params;
    for (const auto& p : model.aligner_params(ac))
      if (p.name != "tau_intra") params.push_back(p);
    audit(rows[5], [&] {
      Rng r = draws;
      return stage_loss(model, ac, world, Stage::align, speakers, r).total;
    }, params);
  }
  return rows;
}

std::string grad_check_csv(const std::vector<GradCheckRow>& rows) {
  std::string out = "loss,cases,coordinates,max_rel_error,max_violation\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.loss + "," + std::to_string(r.cases) + "," + std::to_string(r.coordinates) + ",";
    std::snprintf(buf, sizeof buf, "%.6e,%.6e\n", r.max_rel_error, r.max_violation);
    out += buf;
  }
  return out;
}

}  // namespace voicespace

// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "voicespace/cfm.hpp"
#include "voicespace/errors.hpp"

using namespace voicespace;
using vs_test::random_tensor;
using vs_test::to_vec;

namespace {

std::vector<vs_oracle::Layer> layers_of(const FieldParams& p) {
  std::vector<vs_oracle::Layer> out;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    out.push_back({to_vec(p.weights[i]), to_vec(p.biases[i]), p.weights[i].rows(),
                   p.weights[i].cols()});
  }
  return out;
}

vs_oracle::Vec row(const Tensor& m, std::size_t i) {
  vs_oracle::Vec out;
  if (m.rank() == 0) return out;
  for (std::size_t j = 0; j < m.cols(); ++j) out.push_back(m.at(i, j));
  return out;
}

FieldConfig small_config(std::size_t D = 3, std::size_t d = 4, std::size_t dc = 2) {
  FieldConfig cfg;
  cfg.data_dim = D;
  cfg.cond_dim = d;
  cfg.token_dim = dc;
  cfg.hidden = {5};
  return cfg;
}

FlowBatch random_batch(Rng& rng, const FieldConfig& cfg, std::size_t n) {
  FlowBatch b;
  b.x0 = random_tensor(rng, {n, cfg.data_dim}, -2, 2);
  b.x1 = random_tensor(rng, {n, cfg.data_dim}, -2, 2);
  for (std::size_t i = 0; i < n; ++i) b.t.push_back(uniform01(rng));
  b.cond = random_tensor(rng, {n, cfg.cond_dim});
  b.tokens = random_tensor(rng, {n, cfg.token_dim});
  b.prompt = mask_prompt(b.x1, 0.5, rng);
  return b;
}

double oracle_loss(const FlowBatch& b, const FieldParams& p, CfmMode mode, bool l1) {
  double total = 0.0;
  const auto layers = layers_of(p);
  for (std::size_t i = 0; i < b.size(); ++i) {
    vs_oracle::Vec prompt = mode == CfmMode::pretrain ? row(b.prompt, i)
                                                      : vs_oracle::Vec(p.config.data_dim, 0.0);
    total += vs_oracle::flow_residual(row(b.x0, i), row(b.x1, i), b.t[i], row(b.cond, i),
                                      row(b.tokens, i), prompt, p.config.time_dim, layers, l1);
  }
  return total / double(b.size());
}

}  // namespace

TEST_CASE("time embedding") {
  auto e0 = time_embedding(0.0);
  CHECK(e0.size() == 8);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(e0[2 * k] == 0.0);
    CHECK(e0[2 * k + 1] == 1.0);
  }
  auto e = time_embedding(0.25);
  CHECK(e[0] == doctest::Approx(0.7071067811865476).epsilon(1e-14));
  CHECK(e[2] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(e[4] == doctest::Approx(0.0));
}

TEST_CASE("ot_path and ot_target") {
  auto x0 = Tensor::vector({0, 0});
  auto x1 = Tensor::vector({2, 4});
  CHECK(to_vec(ot_path(x0, x1, 0.0)) == to_vec(x0));
  CHECK(to_vec(ot_path(x0, x1, 1.0)) == to_vec(x1));
  CHECK(to_vec(ot_path(x0, x1, 0.5)) == std::vector<double>{1, 2});
  CHECK_THROWS_AS(ot_path(x0, x1, 1.5), ContractError);
  CHECK_THROWS_AS(ot_path(x0, x1, -0.1), ContractError);
  CHECK_THROWS_AS(ot_path(x0, Tensor::vector({1, 2, 3}), 0.5), DimensionError);

  CHECK(to_vec(ot_target(x1, x1)) == std::vector<double>{0, 0});
  CHECK(to_vec(ot_target(Tensor::vector({1, 1}), Tensor::vector({3, 0}))) ==
        std::vector<double>{2, -1});

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_tensor(rng, {6}, -5, 5);
    auto b = random_tensor(rng, {6}, -5, 5);
    const double t = uniform01(rng);
    auto path = to_vec(ot_path(a, b, t));
    auto target = to_vec(ot_target(a, b));
    CHECK(path == vs_oracle::ot_path(to_vec(a), to_vec(b), t));
    CHECK(target == vs_oracle::ot_target(to_vec(a), to_vec(b)));
    // Walking the rest of the way along the target lands on x1.
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(std::fabs(path[i] + (1 - t) * target[i] - b.at(i)) <= 1e-14 * (1 + std::fabs(b.at(i))));
    }
  }
}

TEST_CASE("field_forward") {
  Rng rng(4);
  SUBCASE("zero weights give zero output") {
    auto p = FieldParams::init(small_config(), rng);
    for (auto& w : p.weights) w.assign(std::vector<double>(w.numel(), 0.0));
    auto out = field_forward(random_tensor(rng, {2, 3}), {0.3, 0.7}, random_tensor(rng, {2, 4}),
                             random_tensor(rng, {2, 2}), Tensor(), p);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("single affine layer without condition is x_t + b") {
    FieldConfig cfg;
    cfg.data_dim = 2;
    cfg.cond_dim = 0;
    cfg.token_dim = 0;
    cfg.prompt = false;
    cfg.hidden = {};
    auto p = FieldParams::init(cfg, rng);
    std::vector<double> w(10 * 2, 0.0);
    w[0] = 1;
    w[3] = 1;
    p.weights[0].assign(w);
    p.biases[0].assign(std::vector<double>{0.5, -1});
    auto out = field_forward(Tensor::matrix(1, 2, {3, 4}), {0.42}, Tensor(), Tensor(), Tensor(), p);
    CHECK(to_vec(out) == std::vector<double>{3.5, 3});
  }
  SUBCASE("matches the affine-chain oracle") {
    auto cfg = small_config();
    cfg.hidden = {6, 5};
    for (int trial = 0; trial < 20; ++trial) {
      auto p = FieldParams::init(cfg, rng);
      auto x = random_tensor(rng, {1, 3});
      auto c = random_tensor(rng, {1, 4});
      auto tok = random_tensor(rng, {1, 2});
      auto pr = random_tensor(rng, {1, 3});
      const double t = uniform01(rng);
      auto out = to_vec(field_forward(x, {t}, c, tok, pr, p));
      vs_oracle::Vec in = to_vec(x);
      for (double v : vs_oracle::time_features(t, 8)) in.push_back(v);
      for (const auto* part : {&c, &tok, &pr})
        for (double v : part->data()) in.push_back(v);
      auto expect = vs_oracle::mlp(in, layers_of(p));
      for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(out[i] - expect[i]) < 1e-12);
    }
  }
  SUBCASE("width mismatch") {
    auto p = FieldParams::init(small_config(), rng);
    CHECK_THROWS_AS(field_forward(random_tensor(rng, {1, 4}), {0.1}, Tensor(), Tensor(), Tensor(), p),
                    DimensionError);
    CHECK_THROWS_AS(field_forward(random_tensor(rng, {1, 3}), {0.1}, random_tensor(rng, {1, 5}),
                                  Tensor(), Tensor(), p),
                    DimensionError);
  }
}

TEST_CASE("cfm_loss examples") {
  Rng rng(5);
  SUBCASE("perfect field") {
    // x0 = 0 and the condition carries x1, so reading the condition is exact.
    FieldConfig cfg;
    cfg.data_dim = 2;
    cfg.cond_dim = 2;
    cfg.token_dim = 0;
    cfg.prompt = false;
    cfg.hidden = {};
    auto p = FieldParams::init(cfg, rng);
    std::vector<double> w(12 * 2, 0.0);
    w[10 * 2 + 0] = 1;
    w[11 * 2 + 1] = 1;
    p.weights[0].assign(w);
    FlowBatch b;
    b.x0 = Tensor::zeros({3, 2});
    b.x1 = random_tensor(rng, {3, 2});
    b.cond = b.x1;
    b.t = {0.1, 0.5, 0.9};
    for (auto mode : {CfmMode::pretrain, CfmMode::mva, CfmMode::self_distill})
      CHECK(cfm_loss(b, p, mode).item() == 0.0);
  }
  SUBCASE("zero field measures the target") {
    FieldConfig cfg;
    cfg.data_dim = 2;
    cfg.cond_dim = 0;
    cfg.token_dim = 0;
    cfg.hidden = {};
    auto p = FieldParams::init(cfg, rng);
    p.weights[0].assign(std::vector<double>(p.weights[0].numel(), 0.0));
    FlowSample s{Tensor::vector({0, 0}), Tensor::vector({1, 1}), 0.3, Tensor(), Tensor(), Tensor()};
    CHECK(cfm_loss(std::vector<FlowSample>{s}, p, CfmMode::pretrain).item() == 2.0);
    CHECK(cfm_loss(std::vector<FlowSample>{s}, p, CfmMode::pretrain, LossNorm::l2).item() == 2.0);
  }
  SUBCASE("empty batch") {
    auto p = FieldParams::init(small_config(), rng);
    CHECK_THROWS_AS(cfm_loss(std::vector<FlowSample>{}, p, CfmMode::mva), ContractError);
  }
}

TEST_CASE("cfm_loss matches the straight-line recomposition") {
  Rng rng(6);
  const auto cfg = small_config();
  for (int trial = 0; trial < 100; ++trial) {
    auto p = FieldParams::init(cfg, rng);
    auto b = random_batch(rng, cfg, 4);
    for (auto mode : {CfmMode::pretrain, CfmMode::mva, CfmMode::self_distill}) {
      const double got = cfm_loss(b, p, mode).item();
      CHECK(got >= 0.0);
      CHECK(std::fabs(got - oracle_loss(b, p, mode, true)) < 1e-10);
    }
    CHECK(std::fabs(cfm_loss(b, p, CfmMode::mva, LossNorm::l2).item() -
                    oracle_loss(b, p, CfmMode::mva, false)) < 1e-10);
  }
}

TEST_CASE("samples and batches agree") {
  Rng rng(7);
  const auto cfg = small_config();
  auto p = FieldParams::init(cfg, rng);
  std::vector<FlowSample> samples;
  for (int i = 0; i < 3; ++i) {
    samples.push_back({random_tensor(rng, {3}), random_tensor(rng, {3}), uniform01(rng),
                       random_tensor(rng, {4}), random_tensor(rng, {5, 2}), random_tensor(rng, {3})});
  }
  auto b = stack_samples(samples);
  CHECK(b.tokens.shape() == Shape{3, 2});
  CHECK(b.tokens.at(1, 0) == doctest::Approx(mean(slice_cols(samples[1].tokens, 0, 1)).item()));
  CHECK(cfm_loss(samples, p, CfmMode::pretrain).item() == cfm_loss(b, p, CfmMode::pretrain).item());
}

TEST_CASE("cfm_loss gradients") {
  Rng rng(8);
  const auto cfg = small_config();
  for (int trial = 0; trial < 5; ++trial) {
    auto p = FieldParams::init(cfg, rng);
    auto b = random_batch(rng, cfg, 3);
    for (auto mode : {CfmMode::pretrain, CfmMode::mva, CfmMode::self_distill}) {
      for (std::size_t k = 0; k < p.weights.size(); ++k) {
        auto f = [&](const Tensor& w) {
          FieldParams q = p;
          q.weights[k] = w;
          return cfm_loss(b, q, mode);
        };
        CHECK(vs_test::grad_check(f, p.weights[k]) <= 1.0);
        auto g = [&](const Tensor& bias) {
          FieldParams q = p;
          q.biases[k] = bias;
          return cfm_loss(b, q, mode);
        };
        CHECK(vs_test::grad_check(g, p.biases[k]) <= 1.0);
      }
    }
    // The condition carries gradient back to whatever produced it.
    auto c = [&](const Tensor& cond) {
      FlowBatch q = b;
      q.cond = cond;
      return cfm_loss(q, p, CfmMode::mva);
    };
    CHECK(vs_test::grad_check(c, b.cond) <= 1.0);
  }
}

TEST_CASE("sample_ode") {
  auto x0 = Tensor::matrix(2, 3, {1, -2, 0.5, 0, 3, -1});
  auto c = Tensor::matrix(2, 3, {0.3, 0.1, -2, 1, 1, 1});
  for (std::size_t steps : {1u, 3u, 10u, 64u}) {
    auto out = sample_ode([&](const Tensor&, double) { return c; }, x0, steps);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::fabs(out.at(i) - (x0.at(i) + c.at(i))) < 1e-9);
    auto still = sample_ode([&](const Tensor& x, double) { return Tensor::zeros(x.shape()); }, x0, steps);
    CHECK(to_vec(still) == to_vec(x0));
  }
  auto identity = [](const Tensor& x, double) { return x; };
  CHECK(sample_ode(identity, Tensor::vector({1}), 100).item() ==
        doctest::Approx(2.704813829421526).epsilon(1e-12));
  double prev = std::fabs(sample_ode(identity, Tensor::vector({1}), 10).item() - std::exp(1.0));
  for (std::size_t n : {20u, 40u, 80u}) {
    const double err = std::fabs(sample_ode(identity, Tensor::vector({1}), n).item() - std::exp(1.0));
    CHECK(prev / err == doctest::Approx(2.0).epsilon(0.2));
    prev = err;
  }
  CHECK_THROWS_AS(sample_ode(identity, x0, 0), ContractError);
}

TEST_CASE("sample_ode with field parameters") {
  Rng rng(9);
  auto cfg = small_config();
  auto p = FieldParams::init(cfg, rng);
  auto cond = random_tensor(rng, {4, 4});
  auto tok = random_tensor(rng, {4, 2});
  auto x0 = random_tensor(rng, {4, 3});
  auto a = sample_ode(p, cond, tok, x0);
  auto b = sample_ode(p, cond, tok, x0);
  CHECK(a.shape() == x0.shape());
  CHECK(to_vec(a) == to_vec(b));
  // Euler by hand with the prompt slot empty.
  Tensor x = x0;
  for (int k = 0; k < 10; ++k) {
    auto v = field_forward(x, std::vector<double>(4, k * 0.1), cond, tok, Tensor(), p);
    x = add(x, scale(v, 0.1)).detach();
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::fabs(a.at(i) - x.at(i)) < 1e-12);

  for (auto& w : p.weights) w.assign(std::vector<double>(w.numel(), 0.0));
  CHECK(to_vec(sample_ode(p, cond, tok, x0, 7)) == to_vec(x0));
}

TEST_CASE("mask_prompt") {
  Rng rng(10);
  auto x = random_tensor(rng, {50, 8}, 1, 2);
  CHECK(to_vec(mask_prompt(x, 1.0, rng)) == to_vec(x));
  for (double v : mask_prompt(x, 0.0, rng).data()) CHECK(v == 0.0);
  auto half = mask_prompt(x, 0.5, rng);
  std::size_t kept = 0;
  for (double v : half.data()) kept += v != 0.0;
  CHECK(kept > 160);
  CHECK(kept < 240);
}

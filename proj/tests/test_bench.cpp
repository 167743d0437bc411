// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "voicespace/bench.hpp"
#include "voicespace/errors.hpp"

using namespace voicespace;
using vs_test::random_tensor;

namespace {

double cos100(const double* a, const double* b, std::size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 100.0 * ab / std::sqrt(aa * bb);
}

// Random orthogonal matrix by Gram-Schmidt.
Tensor random_rotation(Rng& rng, std::size_t d) {
  std::vector<std::vector<double>> q;
  std::normal_distribution<double> g;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = g(rng);
    for (const auto& u : q) {
      double p = 0;
      for (std::size_t i = 0; i < d; ++i) p += u[i] * v[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= p * u[i];
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  std::vector<double> flat;
  for (const auto& r : q) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor({d, d}, flat);
}

Tensor rotate(const Tensor& x, const Tensor& r) {
  NoGradGuard g;
  return matmul(x, r);
}

RunConfig small_bench_config() {
  RunConfig cfg;
  cfg.seed = 5;
  cfg.steps = 10;
  cfg.batch_size = 8;
  cfg.warmup = 2;
  cfg.warmup_scale = 1.0;
  cfg.field_hidden = {16};
  cfg.bank_size = 8;
  cfg.depth = 1;
  cfg.ff_mult = 2;
  cfg.projector_hidden = {16};
  cfg.world.num_speakers = 16;
  cfg.world.eval_speakers = 4;
  cfg.descriptions = 3;
  cfg.probe_samples = 200;
  return cfg;
}

Checkpoint small_aligned(const RunConfig& cfg, const World& world) {
  const Checkpoint field = train_field(cfg, world);
  return train_aligned(cfg, world, field);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("metric boundary values") {
  const Tensor a({2, 3}, {1, 2, 3, -1, 0, 2});
  CHECK(sst(a, a) == doctest::Approx(100.0).epsilon(1e-15));
  const Tensor e1({1, 2}, {1, 0});
  const Tensor e2({1, 2}, {0, 3});
  CHECK(std::abs(sst(e1, e2)) < 1e-12);

  const Tensor same({3, 2}, {0.5, 2, 0.5, 2, 0.5, 2});
  CHECK(ssc({same, same}) == 100.0);
  CHECK(ssd({same, same, same}) == 100.0);

  const Tensor ortho({2, 2}, {1, 0, 0, 1});
  CHECK(std::abs(ssc({ortho})) < 1e-12);
  CHECK(std::abs(ssd({Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 4})})) < 1e-12);
}

TEST_CASE("metrics lie in [-100, 100]") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> groups;
    for (int g = 0; g < 3; ++g) groups.push_back(random_tensor(rng, {3, 4}));
    const double s = sst(groups[0], groups[1]);
    CHECK(std::abs(s) <= 100.0);
    CHECK(std::abs(ssc(groups)) <= 100.0);
    CHECK(std::abs(ssd(groups)) <= 100.0);
  }
}

TEST_CASE("metrics are invariant under a shared rotation") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor r = random_rotation(rng, 5);
    const Tensor gen = random_tensor(rng, {6, 5});
    const Tensor tgt = random_tensor(rng, {6, 5});
    CHECK(std::abs(sst(gen, tgt) - sst(rotate(gen, r), rotate(tgt, r))) < 1e-9);
    std::vector<Tensor> groups, turned;
    for (int g = 0; g < 4; ++g) {
      groups.push_back(random_tensor(rng, {3, 5}));
      turned.push_back(rotate(groups.back(), r));
    }
    CHECK(std::abs(ssc(groups) - ssc(turned)) < 1e-9);
    CHECK(std::abs(ssd(groups) - ssd(turned)) < 1e-9);
  }
}

TEST_CASE("ssd equals brute force over the six pairs of a 4-speaker set") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> groups;
    std::vector<std::vector<double>> means;
    for (int g = 0; g < 4; ++g) {
      groups.push_back(random_tensor(rng, {3, 4}));
      std::vector<double> m(4, 0.0);
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) m[j] += groups.back().data()[i * 4 + j] / 3.0;
      means.push_back(m);
    }
    double total = 0;
    int pairs = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j, ++pairs) total += cos100(means[i].data(), means[j].data(), 4);
    CHECK(pairs == 6);
    CHECK(std::abs(ssd(groups) - total / 6.0) < 1e-12);
  }
}

TEST_CASE("ssc matches pairwise enumeration and skips singletons") {
  Rng rng(14);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {2, 4});
  const Tensor lone = random_tensor(rng, {1, 4});
  const auto* pa = a.data().data();
  const auto* pb = b.data().data();
  const double sa = (cos100(pa, pa + 4, 4) + cos100(pa, pa + 8, 4) + cos100(pa + 4, pa + 8, 4)) / 3.0;
  const double sb = cos100(pb, pb + 4, 4);
  CHECK(std::abs(ssc({a, lone, b}) - (sa + sb) / 2.0) < 1e-12);
}

TEST_CASE("metric contract errors") {
  CHECK_THROWS_AS(sst(Tensor({0, 3}, {}), Tensor({0, 3}, {})), ContractError);
  CHECK_THROWS_AS(sst(Tensor({2, 3}, std::vector<double>(6, 1.0)), Tensor({3, 3}, std::vector<double>(9, 1.0))), ContractError);
  CHECK_THROWS_AS(ssc({Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 1})}), ContractError);
  CHECK_THROWS_AS(ssc({}), ContractError);
  CHECK_THROWS_AS(ssd({Tensor({2, 2}, {1, 0, 0, 1})}), ContractError);
  CHECK_THROWS_AS(sst(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {1, 0})), ContractError);
}

TEST_CASE("probe recovers a known affine map") {
  Rng rng(15);
  const Tensor x = random_tensor(rng, {200, 3});
  const Tensor w = random_tensor(rng, {3, 2});
  std::vector<double> y(200 * 2);
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = j == 0 ? 0.7 : -1.3;
      for (std::size_t k = 0; k < 3; ++k) s += x.data()[i * 3 + k] * w.data()[k * 2 + j];
      y[i * 2 + j] = s;
    }
  const Probe p = Probe::fit(x, Tensor({200, 2}, y), 1e-10);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(p.weight[k * 2 + j] - w.data()[k * 2 + j]) < 1e-7);
  CHECK(std::abs(p.weight[3 * 2 + 0] - 0.7) < 1e-7);
  CHECK(std::abs(p.weight[3 * 2 + 1] + 1.3) < 1e-7);
  const Tensor fitted = p.apply(x);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(fitted.data()[i] - y[i]) < 1e-6);
}

TEST_CASE("speaker probe maps clean data means close to speaker embeddings") {
  WorldConfig wc;
  wc.num_speakers = 32;
  wc.eval_speakers = 8;
  const World world = World::generate(wc);
  const Probe p = fit_speaker_probe(world, 2000, 1e-3, 0);
  std::vector<Tensor> means, targets;
  for (std::size_t s = 0; s < world.num_speakers(); ++s) {
    means.push_back(world.data_mean(s));
    targets.push_back(world.speaker_embedding(s));
  }
  std::vector<double> flat_m, flat_t;
  for (const auto& m : means) flat_m.insert(flat_m.end(), m.data().begin(), m.data().end());
  for (const auto& t : targets) flat_t.insert(flat_t.end(), t.data().begin(), t.data().end());
  const Tensor pm = p.apply(Tensor({means.size(), wc.data_dim}, flat_m));
  CHECK(sst(pm, Tensor({targets.size(), wc.speech_dim}, flat_t)) > 90.0);
}

TEST_CASE("evaluation refuses speakers seen in training") {
  const RunConfig cfg = small_bench_config();
  const World world = World::generate(cfg.world);
  CHECK_NOTHROW(check_disjoint(world, world.train_speakers()));
  std::vector<std::size_t> leaked = world.train_speakers();
  leaked.push_back(world.eval_speakers().front());
  CHECK_THROWS_AS(check_disjoint(world, leaked), ValidationError);
  const Model model = Model::init(cfg, 0);
  CHECK_THROWS_AS(run_benchmark(model, cfg, world, leaked, 0), ValidationError);
}

TEST_CASE("unknown tasks and unfinished checkpoints are rejected") {
  CHECK_THROWS_AS(find_task("ave"), ConfigError);
  RunConfig cfg = small_bench_config();
  const World world = World::generate(cfg.world);
  cfg.stage = Stage::pretrain;
  const Checkpoint pre = train(cfg, world, nullptr);
  CHECK_THROWS_AS(run_benchmark(pre, world, 0), StageError);
}

TEST_CASE("benchmark rows, determinism and persistence") {
  RunConfig cfg = small_bench_config();
  const World world = World::generate(cfg.world);
  cfg.tasks = {"face_tts", "text_vc"};
  const Checkpoint aligned = small_aligned(cfg, world);
  const std::string digest = params_digest(aligned.model.clone().all_params());
  const auto before = checkpoint_bytes(aligned);

  const BenchReport r1 = run_benchmark(aligned, world, 7);
  REQUIRE(r1.rows.size() == 2);
  CHECK(r1.rows[0].task == "face_tts");
  CHECK(r1.rows[1].task == "text_vc");
  CHECK(r1.rows[0].n_speakers == 4);
  CHECK(r1.rows[0].n_desc == 3);
  CHECK(r1.rows[0].seed == 7);
  CHECK(r1.rows[0].config_hash == config_hash(aligned.config()));
  CHECK(r1.generated[0].rows == 12);
  CHECK(r1.generated[0].width == cfg.world.speech_dim);

  SUBCASE("same checkpoint and seed give identical bytes") {
    CHECK(run_benchmark(aligned, world, 7).csv() == r1.csv());
  }
  SUBCASE("worker count does not change results") {
    RunConfig c = aligned.config();
    c.workers = 4;
    const BenchReport r4 = run_benchmark(aligned.model, c, world, aligned.train_speakers, 7);
    CHECK(r4.rows[0].sst == r1.rows[0].sst);
    CHECK(r4.rows[1].ssd == r1.rows[1].ssd);
    CHECK(r4.generated[1].values == r1.generated[1].values);
  }
  SUBCASE("checkpoint is untouched") {
    CHECK(params_digest(aligned.model.clone().all_params()) == digest);
    CHECK(checkpoint_bytes(aligned) == before);
  }
  SUBCASE("report files") {
    const auto dir = std::filesystem::temp_directory_path() / "vs_bench_report";
    std::filesystem::remove_all(dir);
    const auto written = write_report(r1, dir);
    CHECK(written.size() == 5);
    const std::string csv = read_file(dir / "report.csv");
    CHECK(csv == r1.csv());
    CHECK(csv.rfind("task,n_speakers,n_desc,sst,ssc,ssd,seed,config_hash\n", 0) == 0);
    const EmbeddingTable t = load_embeddings(dir / "text_vc.uemb", cfg.world.speech_dim);
    CHECK(t.values == r1.generated[1].values);
    CHECK(t.labels == r1.generated[1].labels);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("a conditioned model beats the same model with its condition cut") {
  RunConfig cfg = small_bench_config();
  cfg.steps = 400;
  cfg.batch_size = 32;
  cfg.warmup = 40;
  cfg.field_hidden = {32};
  cfg.world.face_noise = 0.0;
  cfg.world.text_noise = 0.0;
  cfg.world.speech_noise = 0.0;
  cfg.world.data_noise = 0.0;
  cfg.world.leakage = 0.0;
  cfg.self_distill_enabled = false;
  cfg.tasks = {"face_tts", "text_tts"};
  cfg.descriptions = 4;
  const World world = World::generate(cfg.world);
  const Checkpoint aligned = small_aligned(cfg, world);
  const double conditioned = run_benchmark(aligned, world, 1).mean_sst();

  Model cut = aligned.model.clone();
  const FieldConfig& fc = cut.field.config;
  Tensor& w0 = cut.field.weights[0];
  const std::size_t out = w0.shape()[1];
  for (std::size_t r = fc.data_dim + fc.time_dim; r < fc.data_dim + fc.time_dim + fc.cond_dim; ++r)
    for (std::size_t c = 0; c < out; ++c) w0.mutable_data()[r * out + c] = 0.0;
  const double unconditioned = run_benchmark(cut, aligned.config(), world, aligned.train_speakers, 1).mean_sst();
  CHECK(conditioned > unconditioned);
}

TEST_CASE("ablation configs and sweep validation") {
  const RunConfig base;
  CHECK_FALSE(ablation_config(base, "no_mva").mva_enabled);
  CHECK_FALSE(ablation_config(base, "no_softcl").softcl_enabled);
  CHECK_FALSE(ablation_config(base, "no_self_distill").self_distill_enabled);
  CHECK(config_hash(ablation_config(base, "full")) == config_hash(base));
  CHECK_THROWS_AS(ablation_config(base, "no_everything"), ConfigError);
  CHECK_THROWS_AS(data_scale_sweep(base, {}, {0}, 1), ConfigError);
  CHECK_THROWS_AS(data_scale_sweep(base, {0.5, 0.25}, {0}, 1), ConfigError);
  CHECK_THROWS_AS(data_scale_sweep(base, {0.5, 2.0}, {0}, 1), ConfigError);
}

TEST_CASE("grid and sweep are deterministic and worker independent") {
  RunConfig cfg = small_bench_config();
  cfg.tasks = {"face_tts"};
  const auto g1 = ablation_grid(cfg, {"full", "no_mva"}, {0, 1}, 1);
  const auto g2 = ablation_grid(cfg, {"full", "no_mva"}, {0, 1}, 2);
  CHECK(g1.size() == 4);
  CHECK(grid_csv(g1) == grid_csv(g2));
  CHECK(grid_csv(g1).rfind("variant,task,", 0) == 0);

  const auto s1 = data_scale_sweep(cfg, {0.5}, {0, 1}, 1);
  const auto s2 = data_scale_sweep(cfg, {0.5}, {0, 1}, 2);
  CHECK(s1.size() == 2);
  CHECK(sweep_csv(s1) == sweep_csv(s2));
  CHECK(sweep_csv(s1).rfind("scale,task,", 0) == 0);
}

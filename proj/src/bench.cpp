// SPDX-License-Identifier: Apache-2.0
#include "voicespace/bench.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <thread>

#include "voicespace/errors.hpp"

namespace voicespace {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> view(const Tensor& t) {
  return {t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())};
}

double cosine100(const double* a, const double* b, std::size_t n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw ContractError("cosine of a zero embedding is undefined");
  return 100.0 * (ab / std::sqrt(aa * bb));
}

std::vector<double> row_mean(const Tensor& g) {
  std::vector<double> m(g.cols(), 0.0);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) m[c] += g.at(r, c);
  for (double& v : m) v /= double(g.rows());
  return m;
}

// Runs jobs 0..n-1 on up to `workers` threads; rethrows the first failure
// by job index.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
  if (threads <= 1) {
    run();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  const std::size_t w = rows.front().numel();
  std::vector<double> data;
  data.reserve(rows.size() * w);
  for (const auto& r : rows) data.insert(data.end(), r.data().begin(), r.data().end());
  return Tensor::matrix(rows.size(), w, std::move(data));
}

Tensor rows_of(const Tensor& m, std::size_t begin, std::size_t end) {
  return Tensor::matrix(end - begin, m.cols(),
                        std::vector<double>(m.data().begin() + begin * m.cols(),
                                            m.data().begin() + end * m.cols()));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---- probe ------------------------------------------------------------------

Probe Probe::fit(const Tensor& x, const Tensor& y, double ridge) {
  if (x.rows() != y.rows() || x.rows() < 2) {
    throw DimensionError("probe needs paired rows, got " + shape_str(x.shape()) + " and " +
                         shape_str(y.shape()));
  }
  if (!(ridge >= 0.0)) throw ContractError("probe ridge must be nonnegative");
  const Eigen::Index n = Eigen::Index(x.rows()), in = Eigen::Index(x.cols());
  Eigen::MatrixXd a(n, in + 1);
  a.leftCols(in) = view(x);
  a.col(in).setOnes();
  Eigen::MatrixXd gram = a.transpose() * a;
  gram.diagonal().head(in).array() += ridge * double(n);
  Eigen::MatrixXd w = gram.ldlt().solve(a.transpose() * view(y));
  Probe p;
  p.in = x.cols();
  p.out = y.cols();
  p.weight.resize(w.size());
  Eigen::Map<RowMatrix>(p.weight.data(), w.rows(), w.cols()) = w;
  return p;
}

Tensor Probe::apply(const Tensor& x) const {
  if (x.cols() != in) {
    throw DimensionError("probe expects " + std::to_string(in) + " columns, got " +
                         std::to_string(x.cols()));
  }
  Eigen::Map<const RowMatrix> w(weight.data(), Eigen::Index(in + 1), Eigen::Index(out));
  RowMatrix y = view(x) * w.topRows(Eigen::Index(in));
  y.rowwise() += w.row(Eigen::Index(in));
  return Tensor::matrix(x.rows(), out, std::vector<double>(y.data(), y.data() + y.size()));
}

Probe fit_speaker_probe(const World& world, std::size_t samples, double ridge, std::uint64_t seed) {
  Rng rng = substream(seed, "probe");
  std::vector<Tensor> xs, ys;
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t s = uniform_index(rng, world.num_speakers());
    xs.push_back(world.data_point(s, world.draw_content(rng), rng));
    ys.push_back(world.speaker_embedding(s));
  }
  return Probe::fit(stack_rows(xs), stack_rows(ys), ridge);
}

// ---- metrics ----------------------------------------------------------------

double sst(const Tensor& generated, const Tensor& targets) {
  if (generated.rank() == 0 || generated.rows() == 0) throw ContractError("sst of an empty set");
  if (generated.shape() != targets.shape()) {
    throw DimensionError("sst pairs " + shape_str(generated.shape()) + " with " +
                         shape_str(targets.shape()));
  }
  const std::size_t d = generated.cols();
  double sum = 0.0;
  for (std::size_t r = 0; r < generated.rows(); ++r)
    sum += cosine100(generated.data().data() + r * d, targets.data().data() + r * d, d);
  return sum / double(generated.rows());
}

double ssc(const std::vector<Tensor>& groups) {
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& g : groups) {
    if (g.rank() == 0 || g.rows() < 2) continue;
    const std::size_t d = g.cols();
    double s = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = i + 1; j < g.rows(); ++j, ++pairs)
        s += cosine100(g.data().data() + i * d, g.data().data() + j * d, d);
    sum += s / double(pairs);
    ++counted;
  }
  if (counted == 0) throw ContractError("ssc needs a speaker with at least 2 generations");
  return sum / double(counted);
}

double ssd(const std::vector<Tensor>& groups) {
  if (groups.size() < 2) throw ContractError("ssd needs at least 2 speakers");
  std::vector<std::vector<double>> means;
  for (const auto& g : groups) {
    if (g.rank() == 0 || g.rows() == 0) throw ContractError("ssd got a speaker with no generations");
    means.push_back(row_mean(g));
    if (means.back().size() != means.front().size()) throw DimensionError("ssd groups differ in width");
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < means.size(); ++i)
    for (std::size_t j = i + 1; j < means.size(); ++j, ++pairs)
      sum += cosine100(means[i].data(), means[j].data(), means[i].size());
  return sum / double(pairs);
}

// ---- benchmark --------------------------------------------------------------

const std::vector<BenchTask>& bench_tasks() {
  static const std::vector<BenchTask> tasks{
      {"face_tts", Modality::face, false},
      {"face_vc", Modality::face, true},
      {"text_tts", Modality::text, false},
      {"text_vc", Modality::text, true},
  };
  return tasks;
}

BenchTask find_task(const std::string& name) {
  for (const auto& t : bench_tasks())
    if (t.name == name) return t;
  throw ConfigError("unknown task '" + name + "' (expected face_tts, face_vc, text_tts or text_vc)");
}

std::string report_header() { return "task,n_speakers,n_desc,sst,ssc,ssd,seed,config_hash"; }

std::string BenchReport::csv() const {
  std::string out = report_header() + "\n";
  for (const auto& r : rows) {
    out += r.task + "," + std::to_string(r.n_speakers) + "," + std::to_string(r.n_desc) + "," +
           fmt(r.sst) + "," + fmt(r.ssc) + "," + fmt(r.ssd) + "," + std::to_string(r.seed) + "," +
           r.config_hash + "\n";
  }
  return out;
}

namespace {

double mean_of(const std::vector<BenchRow>& rows, double BenchRow::*m) {
  if (rows.empty()) throw ContractError("empty report");
  double s = 0.0;
  for (const auto& r : rows) s += r.*m;
  return s / double(rows.size());
}

}  // namespace

double BenchReport::mean_sst() const { return mean_of(rows, &BenchRow::sst); }
double BenchReport::mean_ssc() const { return mean_of(rows, &BenchRow::ssc); }
double BenchReport::mean_ssd() const { return mean_of(rows, &BenchRow::ssd); }

void check_disjoint(const World& world, const std::vector<std::size_t>& seen) {
  const std::set<std::size_t> s(seen.begin(), seen.end());
  for (std::size_t e : world.eval_speakers()) {
    if (s.count(e)) {
      throw ValidationError("evaluation speaker " + std::to_string(e) + " was seen in training");
    }
  }
}

namespace {

std::size_t other_speaker(const std::vector<std::size_t>& pool, std::size_t self, Rng& rng) {
  std::size_t k = uniform_index(rng, pool.size() - 1);
  for (std::size_t c : pool) {
    if (c == self) continue;
    if (k-- == 0) return c;
  }
  return pool.front();
}

std::vector<Tensor> split_groups(const Tensor& gen, std::size_t groups, std::size_t per) {
  std::vector<Tensor> out;
  for (std::size_t g = 0; g < groups; ++g) out.push_back(rows_of(gen, g * per, (g + 1) * per));
  return out;
}

std::size_t task_index(const std::string& name) {
  const auto& all = bench_tasks();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].name == name) return i;
  return all.size();
}

}  // namespace

BenchReport run_benchmark(const Model& model, const RunConfig& cfg, const World& world,
                          const std::vector<std::size_t>& seen, std::uint64_t seed) {
  check_disjoint(world, seen);
  if (cfg.tasks.empty()) throw ConfigError("no evaluation tasks requested");
  std::vector<BenchTask> tasks;
  for (const auto& name : cfg.tasks) tasks.push_back(find_task(name));

  const Probe probe = fit_speaker_probe(world, cfg.probe_samples, cfg.probe_ridge, seed);
  const auto speakers = world.eval_speakers();
  const std::size_t per = cfg.descriptions;
  const std::string hash = config_hash(cfg);

  BenchReport report;
  report.rows.resize(tasks.size());
  report.generated.resize(tasks.size());
  parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) {
    NoGradGuard no_grad;
    const BenchTask& task = tasks[i];
    Rng rng = substream(seed, "eval", task_index(task.name));
    std::vector<Tensor> raw, tokens, targets;
    std::vector<Modality> modality;
    std::vector<std::int64_t> labels;
    for (std::size_t s : speakers) {
      for (std::size_t k = 0; k < per; ++k) {
        raw.push_back(world.observe(task.modality, s, rng));
        modality.push_back(task.modality);
        Tensor content = world.draw_content(rng);
        if (task.conversion) {
          const std::size_t src = other_speaker(speakers, s, rng);
          tokens.push_back(mean_rows(world.tokenize(world.data_point(src, content, rng), content)));
        } else {
          tokens.push_back(mean_rows(content));
        }
        targets.push_back(world.speaker_embedding(s));
        labels.push_back(std::int64_t(s));
      }
    }
    const Tensor cond = model.embed(raw, modality, cfg);
    const Tensor x0 = gaussian_tensor(rng, {raw.size(), world.config().data_dim}, 1.0, false);
    const Tensor x = sample_ode(model.field, cond, stack_rows(tokens), x0, cfg.ode_steps);
    const Tensor gen = probe.apply(x);
    const auto groups = split_groups(gen, speakers.size(), per);
    report.rows[i] = BenchRow{task.name, speakers.size(), per, sst(gen, stack_rows(targets)),
                              ssc(groups), ssd(groups), seed, hash};
    report.generated[i] = EmbeddingTable::from_tensor(gen, labels);
  });
  return report;
}

BenchReport run_benchmark(const Checkpoint& ckpt, const World& world, std::uint64_t seed) {
  if (ckpt.stage != Stage::align || !ckpt.complete) {
    throw StageError("evaluation needs a completed align checkpoint, got " +
                     std::string(ckpt.complete ? "" : "an unfinished ") + stage_name(ckpt.stage));
  }
  return run_benchmark(ckpt.model, ckpt.config(), world, ckpt.train_speakers, seed);
}

std::vector<std::filesystem::path> write_report(const BenchReport& report,
                                                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const auto csv_path = dir / "report.csv";
  std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv_path.string());
  out << report.csv();
  if (!out) throw IoError("failed writing " + csv_path.string());
  written.push_back(csv_path);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto p = dir / (report.rows[i].task + ".uemb");
    save_embeddings(p, report.generated[i]);
    written.push_back(p);
    written.push_back(p.string() + ".labels");
  }
  return written;
}

double conversion_sst(const FieldParams& field, const RunConfig& cfg, const World& world,
                      double leakage, std::uint64_t seed) {
  NoGradGuard no_grad;
  const Probe probe = fit_speaker_probe(world, cfg.probe_samples, cfg.probe_ridge, seed);
  const auto speakers = world.eval_speakers();
  Rng rng = substream(seed, "convert");
  std::vector<Tensor> cond, tokens, targets;
  for (std::size_t t : speakers) {
    for (std::size_t k = 0; k < cfg.descriptions; ++k) {
      const std::size_t src = other_speaker(speakers, t, rng);
      Tensor content = world.draw_content(rng);
      Tensor x_src = world.data_point(src, content, rng);
      tokens.push_back(mean_rows(world.tokenize(x_src, content, leakage)));
      cond.push_back(world.observe(Modality::speech, t, rng));
      targets.push_back(world.speaker_embedding(t));
    }
  }
  const Tensor x0 = gaussian_tensor(rng, {cond.size(), world.config().data_dim}, 1.0, false);
  const Tensor x = sample_ode(field, stack_rows(cond), stack_rows(tokens), x0, cfg.ode_steps);
  return sst(probe.apply(x), stack_rows(targets));
}

// ---- experiment drivers -----------------------------------------------------

Checkpoint train_field(const RunConfig& cfg, const World& world) {
  RunConfig c = cfg;
  c.stage = Stage::pretrain;
  Checkpoint pre = train(c, world, nullptr);
  if (!cfg.self_distill_enabled) return pre;
  c.stage = Stage::self_distill;
  return train(c, world, &pre);
}

Checkpoint train_aligned(const RunConfig& cfg, const World& world, const Checkpoint& field) {
  RunConfig c = cfg;
  c.stage = Stage::align;
  return train(c, world, &field);
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "no_mva", "no_softcl", "no_self_distill"};
  return v;
}

RunConfig ablation_config(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  if (variant == "full") {
  } else if (variant == "no_mva") {
    c.mva_enabled = false;
  } else if (variant == "no_softcl") {
    c.softcl_enabled = false;
  } else if (variant == "no_self_distill") {
    c.self_distill_enabled = false;
  } else {
    throw ConfigError("unknown ablation variant '" + variant +
                      "' (expected full, no_mva, no_softcl or no_self_distill)");
  }
  return c;
}

std::vector<GridResult> ablation_grid(const RunConfig& base, const std::vector<std::string>& variants,
                                      const std::vector<std::uint64_t>& seeds, std::size_t workers) {
  std::vector<RunConfig> configs;
  for (const auto& v : variants) configs.push_back(ablation_config(base, v));
  std::vector<GridResult> out(variants.size() * seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t si) {
    RunConfig seeded = base;
    seeded.seed = seeds[si];
    seeded.workers = 1;
    const World world = World::generate(seeded.world);
    // Fields depend only on whether self-distillation runs.
    std::optional<Checkpoint> fields[2];
    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
      RunConfig c = configs[vi];
      c.seed = seeds[si];
      c.workers = 1;
      auto& field = fields[c.self_distill_enabled ? 1 : 0];
      if (!field) field = train_field(c, world);
      Checkpoint aligned = train_aligned(c, world, *field);
      out[vi * seeds.size() + si] = {variants[vi], seeds[si], run_benchmark(aligned, world, c.seed)};
    }
  });
  return out;
}

std::vector<ScaleResult> data_scale_sweep(const RunConfig& base, const std::vector<double>& scales,
                                          const std::vector<std::uint64_t>& seeds, std::size_t workers) {
  if (scales.empty()) throw ConfigError("data-scale sweep needs at least one scale");
  if (!std::is_sorted(scales.begin(), scales.end())) throw ConfigError("data scales must be nondecreasing");
  for (double s : scales)
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("data scales must lie in [0, 1], got " + fmt(s));
  std::vector<ScaleResult> out(scales.size() * seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t si) {
    RunConfig c = base;
    c.seed = seeds[si];
    c.workers = 1;
    const World world = World::generate(c.world);
    const Checkpoint field = train_field(c, world);
    for (std::size_t k = 0; k < scales.size(); ++k) {
      c.extra_data = scales[k];
      Checkpoint aligned = train_aligned(c, world, field);
      out[k * seeds.size() + si] = {scales[k], seeds[si], run_benchmark(aligned, world, c.seed)};
    }
  });
  return out;
}

namespace {

std::string long_rows(const std::string& key, const BenchReport& r) {
  std::string out;
  for (const auto& row : r.rows) {
    out += key + "," + row.task + "," + std::to_string(row.n_speakers) + "," + std::to_string(row.n_desc) +
           "," + fmt(row.sst) + "," + fmt(row.ssc) + "," + fmt(row.ssd) + "," + std::to_string(row.seed) +
           "," + row.config_hash + "\n";
  }
  return out;
}

}  // namespace

std::string grid_csv(const std::vector<GridResult>& results) {
  std::string out = "variant," + report_header() + "\n";
  for (const auto& r : results) out += long_rows(r.variant, r.report);
  return out;
}

std::string sweep_csv(const std::vector<ScaleResult>& results) {
  std::string out = "scale," + report_header() + "\n";
  for (const auto& r : results) out += long_rows(fmt(r.scale), r.report);
  return out;
}

}  // namespace voicespace

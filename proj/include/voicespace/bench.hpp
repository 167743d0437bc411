// SPDX-License-Identifier: Apache-2.0
//
// Objective evaluation on held-out speakers. Generated data points are mapped
// to speaker-embedding space by a fixed ridge probe fit on world samples,
// then scored with three cosine metrics (x100):
//
//   SST  generation vs. the target speaker's embedding       (higher better)
//   SSC  pairwise within one speaker's generations            (higher better)
//   SSD  between different speakers' mean generations         (lower better)
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "voicespace/config.hpp"
#include "voicespace/synthdata.hpp"
#include "voicespace/trainer.hpp"

namespace voicespace {

// Affine map fit by ridge regression; the bias column is not penalized.
struct Probe {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;  // (in + 1) x out, last row is the bias

  static Probe fit(const Tensor& x, const Tensor& y, double ridge);
  Tensor apply(const Tensor& x) const;
};

// Regresses the clean speaker embedding on data points of every speaker.
Probe fit_speaker_probe(const World& world, std::size_t samples, double ridge, std::uint64_t seed);

// generated and targets are paired by row.
double sst(const Tensor& generated, const Tensor& targets);
// One [k x d] group per speaker; singleton groups are skipped.
double ssc(const std::vector<Tensor>& groups);
double ssd(const std::vector<Tensor>& groups);

struct BenchTask {
  std::string name;
  Modality modality = Modality::face;
  bool conversion = false;  // tokens from another speaker's utterance
};

const std::vector<BenchTask>& bench_tasks();
BenchTask find_task(const std::string& name);

struct BenchRow {
  std::string task;
  std::size_t n_speakers = 0;
  std::size_t n_desc = 0;
  double sst = 0.0;
  double ssc = 0.0;
  double ssd = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<EmbeddingTable> generated;  // per row, labeled by speaker

  std::string csv() const;
  double mean_sst() const;
  double mean_ssc() const;
  double mean_ssd() const;
};

std::string report_header();

// ValidationError when any evaluation speaker was seen in training.
void check_disjoint(const World& world, const std::vector<std::size_t>& seen);

BenchReport run_benchmark(const Model& model, const RunConfig& cfg, const World& world,
                          const std::vector<std::size_t>& seen, std::uint64_t seed);
// Requires a completed alignment checkpoint; evaluates with its own config.
BenchReport run_benchmark(const Checkpoint& ckpt, const World& world, std::uint64_t seed);

// report.csv plus one <task>.uemb dump per row.
std::vector<std::filesystem::path> write_report(const BenchReport& report,
                                                const std::filesystem::path& dir);

// SST of conversions: each held-out target's reference embedding conditions
// the field while the tokens come from another held-out speaker's utterance
// with the given token leakage.
double conversion_sst(const FieldParams& field, const RunConfig& cfg, const World& world,
                      double leakage, std::uint64_t seed);

// ---- experiment drivers -----------------------------------------------------

// pretrain, then self_distill when enabled.
Checkpoint train_field(const RunConfig& cfg, const World& world);
Checkpoint train_aligned(const RunConfig& cfg, const World& world, const Checkpoint& field);

// Named config edits: full, no_mva, no_softcl, no_self_distill.
RunConfig ablation_config(const RunConfig& base, const std::string& variant);
const std::vector<std::string>& ablation_variants();

struct GridResult {
  std::string variant;
  std::uint64_t seed = 0;
  BenchReport report;
};

// Trains every variant for every seed; fields are shared between variants of
// one seed where the config allows. Seeds run on up to `workers` threads.
std::vector<GridResult> ablation_grid(const RunConfig& base, const std::vector<std::string>& variants,
                                      const std::vector<std::uint64_t>& seeds, std::size_t workers);

struct ScaleResult {
  double scale = 0.0;
  std::uint64_t seed = 0;
  BenchReport report;
};

// One alignment run per extra-data scale on a shared field per seed.
std::vector<ScaleResult> data_scale_sweep(const RunConfig& base, const std::vector<double>& scales,
                                          const std::vector<std::uint64_t>& seeds, std::size_t workers);

// Long-form CSVs: one row per (variant or scale, seed, task).
std::string grid_csv(const std::vector<GridResult>& results);
std::string sweep_csv(const std::vector<ScaleResult>& results);

}  // namespace voicespace

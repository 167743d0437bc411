// SPDX-License-Identifier: Apache-2.0
//
// Staged training:
//
//   pretrain      field learns the flow on (reference embedding, tokens,
//                 masked prompt) conditioning
//   self_distill  field is fine-tuned to rebuild each utterance from its own
//                 speaker embedding and the tokens of a conversion to another
//                 speaker, made by the frozen pretrained field
//   align         field frozen; projectors, aggregator and temperature learn
//                 cfm(mva) + lambda1 * intra + lambda2 * inter
//
// Every stage starts from the checkpoint of the one before it and writes its
// own. Checkpoints carry optimizer moments and the training RNG so that a
// resumed run continues bit-identically.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "voicespace/cfm.hpp"
#include "voicespace/config.hpp"
#include "voicespace/kvformer.hpp"
#include "voicespace/params.hpp"
#include "voicespace/synthdata.hpp"

namespace voicespace {

// All learnable state of the system.
struct Model {
  FieldParams field;
  FieldParams base_field;  // frozen converter used during self-distillation
  ModalityProjector face, text, speech;
  MvaParams mva;
  LinearAggregator linear;
  Tensor tau_intra;  // unused when the temperature is shared
  Tensor tau_inter;

  static Model init(const RunConfig& cfg, std::uint64_t seed);
  // Fresh projectors, aggregators and temperature.
  void init_aligner(const RunConfig& cfg, std::uint64_t seed);
  // Deep copy: no storage shared with *this.
  Model clone() const;

  ParamList field_params();
  ParamList aligner_params(const RunConfig& cfg);
  ParamList all_params();

  const Tensor& intra_tau(const RunConfig& cfg) const { return cfg.shared_tau ? tau_inter : tau_intra; }
  const ModalityProjector& projector(Modality m) const;

  // Aggregated voice-space embeddings [n x d] for the given raw inputs.
  Tensor embed(const std::vector<Tensor>& raw, const std::vector<Modality>& modality,
               const RunConfig& cfg) const;
};

// Hash of a parameter list's names, shapes and values; equal hashes mean
// bit-identical parameters.
std::string params_digest(const ParamList& params);

// ---- optimizer --------------------------------------------------------------

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::uint64_t t = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One decoupled-weight-decay Adam update of every listed tensor from its
// accumulated gradient (absent gradients count as zero). Names for which
// `decays` returns false skip weight decay.
void adamw_step(const ParamList& params, AdamState& state, double lr, const AdamWOptions& opt,
                const std::function<bool(const std::string&)>& decays = {});

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

// Linear warmup to the effective peak, then constant or cosine decay.
double lr_at(std::size_t step, const RunConfig& cfg);

// ---- checkpoints ------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;  // resolved config echo
  Stage stage = Stage::pretrain;
  std::size_t step = 0;
  bool complete = false;
  Model model;
  AdamState adam;
  std::string rng_state;
  std::vector<std::size_t> train_speakers;

  RunConfig config() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Raw container access, used to inspect or forge files in tests.
std::vector<unsigned char> checkpoint_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::vector<unsigned char>& bytes, const std::string& origin);

// ---- traces -----------------------------------------------------------------

struct TraceRow {
  std::size_t step = 0;
  Stage stage = Stage::pretrain;
  double loss_total = 0.0;
  double loss_cfm = 0.0;
  double loss_intra = 0.0;
  double loss_inter = 0.0;
  double lr = 0.0;
  double tau = 0.0;
};

std::string trace_header();
std::string trace_line(const TraceRow& row);

// ---- stages -----------------------------------------------------------------

// Stage that `stage` builds on under this config, if any.
std::optional<Stage> prerequisite_stage(Stage stage, const RunConfig& cfg);

// Speakers the alignment stage may see: half of the training speakers plus
// the extra_data fraction of the other half.
std::vector<std::size_t> alignment_speakers(const World& world, double extra_data);

// Losses of one stage on one batch, for training and tracing.
struct StageLoss {
  Tensor total;
  Tensor cfm;
  Tensor intra;
  Tensor inter;
};

// Draws the step's batch from `rng` and evaluates the stage objective.
StageLoss stage_loss(const Model& model, const RunConfig& cfg, const World& world, Stage stage,
                     const std::vector<std::size_t>& speakers, Rng& rng);

// Fresh checkpoint at step 0 of cfg.stage. The prerequisite must be the
// completed checkpoint of prerequisite_stage(); StageError otherwise.
Checkpoint begin_stage(const RunConfig& cfg, const World& world, const Checkpoint* prerequisite);

struct StageHooks {
  std::function<void(const TraceRow&)> on_trace;
  std::function<void(const Checkpoint&)> on_checkpoint;  // every checkpoint_every steps
};

// Runs optimizer steps until ckpt.step == until (capped at cfg.steps) and
// returns the trace rows emitted. Marks the checkpoint complete at cfg.steps.
std::vector<TraceRow> run_stage(Checkpoint& ckpt, const RunConfig& cfg, const World& world,
                                std::size_t until, const StageHooks& hooks = {});

// begin_stage + run_stage to completion.
Checkpoint train(const RunConfig& cfg, const World& world, const Checkpoint* prerequisite,
                 std::vector<TraceRow>* trace = nullptr);

}  // namespace voicespace

// SPDX-License-Identifier: Apache-2.0
//
// Every knob of a run, grouped in INI-style sections. The key table below is
// the single source for parsing, the resolved-config echo, the hash that tags
// reports, and the CLI help text. Key names are unique across sections, so a
// bare `lambda1 = 0.05` resolves as well as `[loss] lambda1 = 0.05`.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voicespace/cfm.hpp"
#include "voicespace/kvformer.hpp"
#include "voicespace/synthdata.hpp"

namespace voicespace {

enum class Stage { pretrain, self_distill, align };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

enum class LrSchedule { constant, cosine };

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  Stage stage = Stage::pretrain;
  std::size_t steps = 3000;
  std::size_t batch_size = 64;
  std::size_t trace_every = 50;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t workers = 1;

  // [optim]
  double lr = 1e-5;
  double lr_scale = 100.0;
  std::size_t warmup = 10000;
  double warmup_scale = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  LrSchedule schedule = LrSchedule::constant;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  // [loss]
  double lambda1 = 0.05;  // intra-modal KL weight
  double lambda2 = 0.05;  // InfoNCE weight
  double tau_init = 0.07;
  bool learn_tau = true;
  bool shared_tau = true;
  bool symmetric_infonce = true;
  bool cosine_similarity = false;
  LossNorm cfm_norm = LossNorm::l1;

  // [align]
  double anchor_p = 0.5;
  bool mva_enabled = true;
  bool softcl_enabled = true;
  bool self_distill_enabled = true;
  double extra_data = 1.0;
  double face_weight = 1.0;
  double text_weight = 1.0;

  // [kvformer]
  std::size_t heads = 2;
  std::size_t bank_size = 64;
  std::size_t depth = 2;
  std::size_t ff_mult = 4;
  bool feed_forward = true;
  bool residual = true;
  bool norm = true;
  bool out_proj = true;
  bool per_head_scale = false;
  ProjectorMode face_projector = ProjectorMode::mlp;
  ProjectorMode text_projector = ProjectorMode::mlp;
  std::vector<std::size_t> projector_hidden{64};
  std::size_t pool_bins = 16;

  // [cfm]
  std::vector<std::size_t> field_hidden{128, 128};
  double prompt_keep = 0.5;
  double prompt_drop = 0.5;
  std::size_t ode_steps = kDefaultOdeSteps;

  // [world]
  WorldConfig world;

  // [eval]
  std::size_t descriptions = 20;
  std::vector<std::string> tasks{"face_tts", "face_vc", "text_tts", "text_vc"};
  std::size_t probe_samples = 2000;
  double probe_ridge = 1e-3;

  double effective_lr() const { return lr * lr_scale; }
  std::size_t effective_warmup() const;
  MvaConfig mva_config() const;
  FieldConfig field_config() const;
  void validate() const;
};

struct ConfigKey {
  std::string section;
  std::string name;
  std::string type;  // shown in help and type errors
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();

// Applies one assignment; `key` may be bare or "section.key".
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

// INI text: [section] headers, key = value lines, '#' or ';' comments.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);

// Canonical text of every key, one section at a time; re-parsing it yields
// the same config.
std::string config_echo(const RunConfig& cfg);
// Hex FNV-1a of the echo.
std::string config_hash(const RunConfig& cfg);

std::size_t edit_distance(const std::string& a, const std::string& b);

}  // namespace voicespace

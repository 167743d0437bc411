// SPDX-License-Identifier: Apache-2.0
#include "voicespace/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "voicespace/errors.hpp"

namespace voicespace {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void type_error(const std::string& key, const std::string& type,
                             const std::string& value) {
  throw ConfigError("config key '" + key + "' expects " + type + ", got '" + value + "'");
}

std::string fmt_real(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_real(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    type_error(key, "a real number", s);
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    type_error(key, "a nonnegative integer", s);
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  type_error(key, "a boolean (true/false)", s);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) out.push_back(std::size_t(parse_u64(key, item)));
  return out;
}

std::string fmt_sizes(const std::vector<std::size_t>& v) {
  std::vector<std::string> parts;
  for (auto x : v) parts.push_back(std::to_string(x));
  return join(parts);
}

std::string projector_name(ProjectorMode m) { return m == ProjectorMode::mlp ? "mlp" : "pool"; }

ProjectorMode parse_projector(const std::string& key, const std::string& s) {
  if (s == "mlp") return ProjectorMode::mlp;
  if (s == "pool") return ProjectorMode::pool;
  type_error(key, "one of mlp|pool", s);
}

// Table builders. Each takes a pointer-to-member so one line declares a key.
template <typename T>
using Member = T RunConfig::*;

ConfigKey size_key(std::string section, std::string name, Member<std::size_t> m,
                   std::string help) {
  auto n = name;
  return {std::move(section), std::move(name), "integer", std::move(help),
          [m](const RunConfig& c) { return std::to_string(c.*m); },
          [m, n](RunConfig& c, const std::string& v) { c.*m = std::size_t(parse_u64(n, v)); }};
}

ConfigKey real_key(std::string section, std::string name, Member<double> m, std::string help) {
  auto n = name;
  return {std::move(section), std::move(name), "real", std::move(help),
          [m](const RunConfig& c) { return fmt_real(c.*m); },
          [m, n](RunConfig& c, const std::string& v) { c.*m = parse_real(n, v); }};
}

ConfigKey bool_key(std::string section, std::string name, Member<bool> m, std::string help) {
  auto n = name;
  return {std::move(section), std::move(name), "bool", std::move(help),
          [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m, n](RunConfig& c, const std::string& v) { c.*m = parse_bool(n, v); }};
}

template <typename T>
ConfigKey world_key(std::string name, T WorldConfig::*m, std::string help) {
  auto n = name;
  if constexpr (std::is_same_v<T, double>) {
    return {"world", std::move(name), "real", std::move(help),
            [m](const RunConfig& c) { return fmt_real(c.world.*m); },
            [m, n](RunConfig& c, const std::string& v) { c.world.*m = parse_real(n, v); }};
  } else {
    return {"world", std::move(name), "integer", std::move(help),
            [m](const RunConfig& c) { return std::to_string(c.world.*m); },
            [m, n](RunConfig& c, const std::string& v) { c.world.*m = T(parse_u64(n, v)); }};
  }
}

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  k.push_back({"run", "seed", "integer", "root of every random substream",
               [](const RunConfig& c) { return std::to_string(c.seed); },
               [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }});
  k.push_back({"run", "stage", "pretrain|self_distill|align", "training stage",
               [](const RunConfig& c) { return stage_name(c.stage); },
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.stage = parse_stage(v);
                 } catch (const ConfigError&) {
                   type_error("stage", "one of pretrain|self_distill|align", v);
                 }
               }});
  k.push_back(size_key("run", "steps", &RunConfig::steps, "optimizer steps per stage"));
  k.push_back(size_key("run", "batch_size", &RunConfig::batch_size, "examples per step"));
  k.push_back(size_key("run", "trace_every", &RunConfig::trace_every, "trace row interval"));
  k.push_back(size_key("run", "checkpoint_every", &RunConfig::checkpoint_every,
                       "intermediate checkpoint interval, 0 for final only"));
  k.push_back(size_key("run", "workers", &RunConfig::workers, "parallel evaluation workers"));

  k.push_back(real_key("optim", "lr", &RunConfig::lr, "peak learning rate before lr_scale"));
  k.push_back(real_key("optim", "lr_scale", &RunConfig::lr_scale, "desk-scale multiplier on lr"));
  k.push_back(size_key("optim", "warmup", &RunConfig::warmup, "warmup steps before warmup_scale"));
  k.push_back(real_key("optim", "warmup_scale", &RunConfig::warmup_scale,
                       "desk-scale multiplier on warmup"));
  k.push_back(real_key("optim", "beta1", &RunConfig::beta1, "AdamW first-moment decay"));
  k.push_back(real_key("optim", "beta2", &RunConfig::beta2, "AdamW second-moment decay"));
  k.push_back(real_key("optim", "adam_eps", &RunConfig::adam_eps, "AdamW denominator epsilon"));
  k.push_back(real_key("optim", "weight_decay", &RunConfig::weight_decay, "decoupled weight decay"));
  k.push_back({"optim", "schedule", "constant|cosine", "learning rate after warmup",
               [](const RunConfig& c) {
                 return std::string(c.schedule == LrSchedule::constant ? "constant" : "cosine");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "constant") c.schedule = LrSchedule::constant;
                 else if (v == "cosine") c.schedule = LrSchedule::cosine;
                 else type_error("schedule", "one of constant|cosine", v);
               }});
  k.push_back(real_key("optim", "grad_clip", &RunConfig::grad_clip, "global gradient norm clip, 0 off"));

  k.push_back(real_key("loss", "lambda1", &RunConfig::lambda1, "intra-modal KL weight"));
  k.push_back(real_key("loss", "lambda2", &RunConfig::lambda2, "InfoNCE weight"));
  k.push_back(real_key("loss", "tau_init", &RunConfig::tau_init, "initial temperature"));
  k.push_back(bool_key("loss", "learn_tau", &RunConfig::learn_tau, "optimize the temperature"));
  k.push_back(bool_key("loss", "shared_tau", &RunConfig::shared_tau,
                       "one temperature for both contrastive terms"));
  k.push_back(bool_key("loss", "symmetric_infonce", &RunConfig::symmetric_infonce,
                       "average both InfoNCE directions"));
  k.push_back(bool_key("loss", "cosine_similarity", &RunConfig::cosine_similarity,
                       "normalize embeddings before similarity"));
  k.push_back({"loss", "cfm_norm", "l1|l2", "flow matching residual norm",
               [](const RunConfig& c) { return std::string(c.cfm_norm == LossNorm::l1 ? "l1" : "l2"); },
               [](RunConfig& c, const std::string& v) {
                 if (v == "l1") c.cfm_norm = LossNorm::l1;
                 else if (v == "l2") c.cfm_norm = LossNorm::l2;
                 else type_error("cfm_norm", "one of l1|l2", v);
               }});

  k.push_back(real_key("align", "anchor_p", &RunConfig::anchor_p,
                       "probability of feeding reference speech to the aggregator"));
  k.push_back(bool_key("align", "mva_enabled", &RunConfig::mva_enabled,
                       "KV-Former aggregator (false: one linear map)"));
  k.push_back(bool_key("align", "softcl_enabled", &RunConfig::softcl_enabled,
                       "contrastive terms (false: lambda1 = lambda2 = 0)"));
  k.push_back(bool_key("align", "self_distill_enabled", &RunConfig::self_distill_enabled,
                       "align on the self-distilled field"));
  k.push_back(real_key("align", "extra_data", &RunConfig::extra_data,
                       "fraction of the extra alignment speakers used"));
  k.push_back(real_key("align", "face_weight", &RunConfig::face_weight, "face share of the modality mix"));
  k.push_back(real_key("align", "text_weight", &RunConfig::text_weight, "text share of the modality mix"));

  k.push_back(size_key("kvformer", "heads", &RunConfig::heads, "attention heads"));
  k.push_back(size_key("kvformer", "bank_size", &RunConfig::bank_size, "learnable key-value rows"));
  k.push_back(size_key("kvformer", "depth", &RunConfig::depth, "stacked blocks"));
  k.push_back(size_key("kvformer", "ff_mult", &RunConfig::ff_mult, "feed-forward width multiplier"));
  k.push_back(bool_key("kvformer", "feed_forward", &RunConfig::feed_forward, "feed-forward sublayer"));
  k.push_back(bool_key("kvformer", "residual", &RunConfig::residual, "residual connections"));
  k.push_back(bool_key("kvformer", "norm", &RunConfig::norm, "pre-normalization"));
  k.push_back(bool_key("kvformer", "out_proj", &RunConfig::out_proj, "attention output projection"));
  k.push_back(bool_key("kvformer", "per_head_scale", &RunConfig::per_head_scale,
                       "scale logits by per-head width"));
  k.push_back({"kvformer", "face_projector", "mlp|pool", "face projection head",
               [](const RunConfig& c) { return projector_name(c.face_projector); },
               [](RunConfig& c, const std::string& v) { c.face_projector = parse_projector("face_projector", v); }});
  k.push_back({"kvformer", "text_projector", "mlp|pool", "text projection head",
               [](const RunConfig& c) { return projector_name(c.text_projector); },
               [](RunConfig& c, const std::string& v) { c.text_projector = parse_projector("text_projector", v); }});
  k.push_back({"kvformer", "projector_hidden", "integer list", "mlp projector hidden widths",
               [](const RunConfig& c) { return fmt_sizes(c.projector_hidden); },
               [](RunConfig& c, const std::string& v) { c.projector_hidden = parse_sizes("projector_hidden", v); }});
  k.push_back(size_key("kvformer", "pool_bins", &RunConfig::pool_bins, "pool projector bins"));

  k.push_back({"cfm", "field_hidden", "integer list", "vector field hidden widths",
               [](const RunConfig& c) { return fmt_sizes(c.field_hidden); },
               [](RunConfig& c, const std::string& v) { c.field_hidden = parse_sizes("field_hidden", v); }});
  k.push_back(real_key("cfm", "prompt_keep", &RunConfig::prompt_keep,
                       "per-coordinate keep probability of the masked prompt"));
  k.push_back(real_key("cfm", "prompt_drop", &RunConfig::prompt_drop,
                       "probability of an empty prompt in pretraining"));
  k.push_back(size_key("cfm", "ode_steps", &RunConfig::ode_steps, "Euler steps for generation"));

  k.push_back(world_key("world_seed", &WorldConfig::seed, "seed of the world's identities and maps"));
  k.push_back(world_key("num_speakers", &WorldConfig::num_speakers, "speakers in the world"));
  k.push_back(world_key("eval_speakers", &WorldConfig::eval_speakers, "held-out speakers"));
  k.push_back(world_key("latent_dim", &WorldConfig::latent_dim, "latent identity width"));
  k.push_back(world_key("speech_dim", &WorldConfig::speech_dim, "speaker embedding width d"));
  k.push_back(world_key("face_dim", &WorldConfig::face_dim, "face embedding width"));
  k.push_back(world_key("text_dim", &WorldConfig::text_dim, "text embedding width"));
  k.push_back(world_key("token_dim", &WorldConfig::token_dim, "content token width"));
  k.push_back(world_key("token_rows", &WorldConfig::token_rows, "content tokens per utterance"));
  k.push_back(world_key("data_dim", &WorldConfig::data_dim, "data point width D"));
  k.push_back(world_key("face_noise", &WorldConfig::face_noise, "face observation noise"));
  k.push_back(world_key("text_noise", &WorldConfig::text_noise, "text observation noise"));
  k.push_back(world_key("speech_noise", &WorldConfig::speech_noise, "speech observation noise"));
  k.push_back(world_key("data_noise", &WorldConfig::data_noise, "data point noise"));
  k.push_back(world_key("content_scale", &WorldConfig::content_scale, "content token scale"));
  k.push_back(world_key("leakage", &WorldConfig::leakage, "speaker leakage into tokens"));
  k.push_back(world_key("clusters", &WorldConfig::clusters, "identity clusters, 0 for none"));
  k.push_back(world_key("cluster_spread", &WorldConfig::cluster_spread, "identity spread around a cluster center"));

  k.push_back(size_key("eval", "descriptions", &RunConfig::descriptions,
                       "descriptions per held-out speaker"));
  k.push_back({"eval", "tasks", "task list", "benchmark tasks",
               [](const RunConfig& c) { return join(c.tasks); },
               [](RunConfig& c, const std::string& v) { c.tasks = split_list(v); }});
  k.push_back(size_key("eval", "probe_samples", &RunConfig::probe_samples,
                       "world samples for the speaker probe"));
  k.push_back(real_key("eval", "probe_ridge", &RunConfig::probe_ridge, "speaker probe ridge penalty"));
  return k;
}

const ConfigKey* find_key(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.name == key || k.section + "." + k.name == key) return &k;
  }
  return nullptr;
}

[[noreturn]] void unknown_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& k : config_keys()) {
    for (const auto& cand : {k.name, k.section + "." + k.name}) {
      const auto d = edit_distance(key, cand);
      if (d < best_d) best_d = d, best = cand;
    }
  }
  throw ConfigError("unknown config key '" + key + "' (nearest valid key: '" + best + "')");
}

}  // namespace

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::self_distill: return "self_distill";
    case Stage::align: return "align";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  if (name == "pretrain") return Stage::pretrain;
  if (name == "self_distill") return Stage::self_distill;
  if (name == "align") return Stage::align;
  throw ConfigError("unknown stage '" + name + "' (expected pretrain|self_distill|align)");
}

std::size_t RunConfig::effective_warmup() const {
  return std::size_t(std::llround(double(warmup) * warmup_scale));
}

MvaConfig RunConfig::mva_config() const {
  MvaConfig m;
  m.dim = world.speech_dim;
  m.heads = heads;
  m.bank_size = bank_size;
  m.depth = depth;
  m.ff_mult = ff_mult;
  m.feed_forward = feed_forward;
  m.residual = residual;
  m.norm = norm;
  m.out_proj = out_proj;
  m.per_head_scale = per_head_scale;
  return m;
}

FieldConfig RunConfig::field_config() const {
  FieldConfig f;
  f.data_dim = world.data_dim;
  f.cond_dim = world.speech_dim;
  f.token_dim = world.token_dim;
  f.prompt = true;
  f.hidden = field_hidden;
  return f;
}

void RunConfig::validate() const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (trace_every == 0) throw ConfigError("trace_every must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
  if (!(lr > 0.0) || !(lr_scale > 0.0)) throw ConfigError("lr and lr_scale must be positive");
  if (!(warmup_scale >= 0.0)) throw ConfigError("warmup_scale must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("AdamW betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be nonnegative");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("lambda1 and lambda2 must be nonnegative");
  if (!(tau_init > 0.0)) throw ConfigError("tau_init must be positive");
  if (!(anchor_p >= 0.0 && anchor_p <= 1.0)) throw ConfigError("anchor_p must lie in [0, 1]");
  if (!(extra_data >= 0.0 && extra_data <= 1.0)) throw ConfigError("extra_data must lie in [0, 1]");
  if (!(face_weight >= 0.0) || !(text_weight >= 0.0) || face_weight + text_weight <= 0.0)
    throw ConfigError("face_weight and text_weight must be nonnegative and not both zero");
  if (!(prompt_keep >= 0.0 && prompt_keep <= 1.0) || !(prompt_drop >= 0.0 && prompt_drop <= 1.0))
    throw ConfigError("prompt_keep and prompt_drop must lie in [0, 1]");
  if (ode_steps == 0) throw ConfigError("ode_steps must be positive");
  if (pool_bins == 0) throw ConfigError("pool_bins must be positive");
  if (descriptions < 2) throw ConfigError("descriptions must be at least 2");
  if (probe_samples < 2) throw ConfigError("probe_samples must be at least 2");
  if (!(probe_ridge >= 0.0)) throw ConfigError("probe_ridge must be nonnegative");
  if (world.eval_speakers < 2) throw ConfigError("eval_speakers must be at least 2");
  world.validate();
  mva_config().validate();
  field_config().validate();
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const ConfigKey* k = find_key(key);
  if (!k) unknown_key(key);
  k->set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  const ConfigKey* k = find_key(key);
  if (!k) unknown_key(key);
  return k->get(cfg);
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      const auto& keys = config_keys();
      if (std::none_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.section == section; }))
        throw ConfigError(where + "unknown config section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    const ConfigKey* k = find_key(key);
    try {
      if (!k) unknown_key(key);
      if (!section.empty() && key.find('.') == std::string::npos && k->section != section) {
        throw ConfigError("config key '" + key + "' belongs to [" + k->section + "], not [" +
                          section + "]");
      }
      k->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

std::string config_echo(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& k : config_keys()) {
    if (k.section != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + k.section + "]\n";
      section = k.section;
    }
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  // Worker count never changes results, so it stays out of the hash.
  RunConfig canon = cfg;
  canon.workers = 1;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config_echo(canon)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace voicespace

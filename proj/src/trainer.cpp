// SPDX-License-Identifier: Apache-2.0
#include "voicespace/trainer.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "voicespace/errors.hpp"
#include "voicespace/softcl.hpp"

namespace voicespace {

namespace {

constexpr char kCheckpointMagic[4] = {'V', 'S', 'C', 'K'};

enum class RecordKind : std::uint8_t { tensor = 0, text = 1, u64 = 2 };

std::uint64_t stage_index(Stage s) { return static_cast<std::uint64_t>(s); }

bool is_temperature(const std::string& name) { return name.rfind("tau", 0) == 0; }

Tensor rows_matrix(const std::vector<const Tensor*>& rows) {
  const std::size_t w = rows.front()->numel();
  std::vector<double> data;
  data.reserve(rows.size() * w);
  for (const Tensor* r : rows) {
    if (r->numel() != w) {
      throw DimensionError("ragged modality inputs: " + std::to_string(w) + " vs " +
                           std::to_string(r->numel()));
    }
    data.insert(data.end(), r->data().begin(), r->data().end());
  }
  return Tensor::matrix(rows.size(), w, std::move(data));
}

}  // namespace

// ---- model ------------------------------------------------------------------

Model Model::init(const RunConfig& cfg, std::uint64_t seed) {
  Model m;
  Rng rng = substream(seed, "init_field");
  m.field = FieldParams::init(cfg.field_config(), rng);
  m.init_aligner(cfg, seed);
  return m;
}

void Model::init_aligner(const RunConfig& cfg, std::uint64_t seed) {
  Rng rng = substream(seed, "init_align");
  const WorldConfig& w = cfg.world;
  const std::size_t d = w.speech_dim;
  auto make = [&](Modality mod, ProjectorMode mode, std::size_t width) {
    if (mode == ProjectorMode::pool) return ModalityProjector::pool(mod, cfg.pool_bins, d, rng);
    return ModalityProjector::mlp(mod, width, cfg.projector_hidden, d, rng);
  };
  face = make(Modality::face, cfg.face_projector, w.face_dim);
  text = make(Modality::text, cfg.text_projector, w.text_dim);
  speech = ModalityProjector::mlp(Modality::speech, d, {}, d, rng);
  mva = MvaParams::init(cfg.mva_config(), rng);
  linear = LinearAggregator::init(d, rng);
  tau_intra = Tensor::scalar(cfg.tau_init, cfg.learn_tau);
  tau_inter = Tensor::scalar(cfg.tau_init, cfg.learn_tau);
}

Model Model::clone() const {
  Model c = *this;
  for (const auto& p : c.all_params()) *p.tensor = p.tensor->clone(p.tensor->requires_grad());
  return c;
}

ParamList Model::field_params() {
  ParamList out;
  field.collect(out, "field.");
  return out;
}

ParamList Model::aligner_params(const RunConfig& cfg) {
  ParamList out;
  face.collect(out, "face");
  text.collect(out, "text");
  speech.collect(out, "speech");
  if (cfg.mva_enabled) {
    mva.collect(out, "mva");
  } else {
    linear.collect(out, "linear");
  }
  if (cfg.learn_tau) {
    if (!cfg.shared_tau) out.push_back({"tau_intra", &tau_intra});
    out.push_back({"tau_inter", &tau_inter});
  }
  return out;
}

ParamList Model::all_params() {
  ParamList out;
  field.collect(out, "field.");
  if (!base_field.weights.empty()) base_field.collect(out, "base_field.");
  face.collect(out, "face");
  text.collect(out, "text");
  speech.collect(out, "speech");
  mva.collect(out, "mva");
  linear.collect(out, "linear");
  out.push_back({"tau_intra", &tau_intra});
  out.push_back({"tau_inter", &tau_inter});
  return out;
}

const ModalityProjector& Model::projector(Modality m) const {
  switch (m) {
    case Modality::face: return face;
    case Modality::text: return text;
    case Modality::speech: return speech;
  }
  throw ContractError("unknown modality");
}

Tensor Model::embed(const std::vector<Tensor>& raw, const std::vector<Modality>& modality,
                    const RunConfig& cfg) const {
  if (raw.size() != modality.size() || raw.empty()) {
    throw DimensionError("embed needs one modality per input and at least one input");
  }
  std::vector<Tensor> parts;
  std::vector<std::size_t> position(raw.size());
  std::size_t offset = 0;
  for (Modality m : {Modality::face, Modality::text, Modality::speech}) {
    std::vector<const Tensor*> rows;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (modality[i] != m) continue;
      position[i] = offset + rows.size();
      rows.push_back(&raw[i]);
    }
    if (rows.empty()) continue;
    parts.push_back(projector(m).forward(rows_matrix(rows)));
    offset += rows.size();
  }
  Tensor states = gather_rows(parts.size() == 1 ? parts.front() : concat_rows(parts), position);
  return cfg.mva_enabled ? mva_forward_batch(states, mva) : linear.forward(states);
}

std::string params_digest(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params) {
    feed(p.name.data(), p.name.size());
    for (std::size_t d : p.tensor->shape()) {
      const std::uint64_t v = d;
      feed(&v, sizeof v);
    }
    feed(p.tensor->data().data(), p.tensor->numel() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- optimizer --------------------------------------------------------------

void adamw_step(const ParamList& params, AdamState& state, double lr, const AdamWOptions& opt,
                const std::function<bool(const std::string&)>& decays) {
  state.t += 1;
  const double t = double(state.t);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (const auto& p : params) {
    const std::size_t n = p.tensor->numel();
    auto grad = p.tensor->grad();
    if (!grad.empty() && grad.size() != n) {
      throw DimensionError("gradient of " + p.name + " has " + std::to_string(grad.size()) +
                           " entries, parameter has " + std::to_string(n));
    }
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    if (m.size() != n || v.size() != n) {
      throw DimensionError("optimizer moments of " + p.name + " do not match its shape " +
                           shape_str(p.tensor->shape()));
    }
    const double decay = (!decays || decays(p.name)) ? opt.weight_decay : 0.0;
    auto x = p.tensor->mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
      x[i] *= 1.0 - lr * decay;
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.eps);
    }
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor->grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      for (double& g : impl_of(*p.tensor).grad) g *= f;
    }
  }
  return norm;
}

double lr_at(std::size_t step, const RunConfig& cfg) {
  const double peak = cfg.effective_lr();
  const std::size_t warmup = cfg.effective_warmup();
  if (step < warmup) return peak * double(step) / double(warmup);
  if (cfg.schedule == LrSchedule::constant) return peak;
  const double span = cfg.steps > warmup ? double(cfg.steps - warmup) : 1.0;
  const double progress = std::min(1.0, double(step - warmup) / span);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- checkpoints ------------------------------------------------------------

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }

  void name(const std::string& n, RecordKind kind) {
    u32(static_cast<std::uint32_t>(n.size()));
    bytes(n);
    u8(static_cast<std::uint8_t>(kind));
  }
  void text(const std::string& n, const std::string& value) {
    name(n, RecordKind::text);
    u64(value.size());
    bytes(value);
  }
  void number(const std::string& n, std::uint64_t value) {
    name(n, RecordKind::u64);
    u64(value);
  }
  void tensor(const std::string& n, const Shape& shape, std::span<const double> values) {
    name(n, RecordKind::tensor);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) u64(d);
    for (double v : values) f64(v);
  }

  std::vector<unsigned char>& buffer() { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t size, std::string origin)
      : p_(data), end_(data + size), origin_(std::move(origin)) {}

  bool done() const { return p_ == end_; }
  std::uint8_t u8() { need(1); return *p_++; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(*p_++) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(*p_++) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), std::size_t(n));
    p_ += n;
    return s;
  }

 private:
  void need(std::uint64_t n) const {
    if (std::uint64_t(end_ - p_) < n) {
      throw FormatError(origin_ + ": checkpoint record runs past the end of the payload");
    }
  }
  const unsigned char* p_;
  const unsigned char* end_;
  std::string origin_;
};

struct Record {
  RecordKind kind = RecordKind::text;
  Shape shape;
  std::vector<double> values;
  std::string text;
  std::uint64_t number = 0;
};

std::uint32_t payload_crc(const unsigned char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large payloads.
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

std::vector<std::size_t> split_ids(const std::string& s) {
  std::vector<std::size_t> ids;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) ids.push_back(std::stoull(item));
  return ids;
}

}  // namespace

RunConfig Checkpoint::config() const {
  RunConfig cfg;
  apply_config_text(cfg, config_text, "checkpoint config");
  return cfg;
}

std::vector<unsigned char> checkpoint_bytes(const Checkpoint& ckpt) {
  Writer payload;
  payload.text("meta.stage", stage_name(ckpt.stage));
  payload.number("meta.step", ckpt.step);
  payload.number("meta.complete", ckpt.complete ? 1 : 0);
  payload.text("meta.config", ckpt.config_text);
  payload.text("meta.rng", ckpt.rng_state);
  payload.text("meta.speakers", join_ids(ckpt.train_speakers));
  Model model = ckpt.model;  // shallow: only walked for names and views
  for (const auto& p : model.all_params()) {
    payload.tensor("param." + p.name, p.tensor->shape(), p.tensor->data());
  }
  payload.number("adam.t", ckpt.adam.t);
  for (const auto& [name, m] : ckpt.adam.m) payload.tensor("adam.m." + name, {m.size()}, m);
  for (const auto& [name, v] : ckpt.adam.v) payload.tensor("adam.v." + name, {v.size()}, v);

  Writer file;
  file.bytes(std::string(kCheckpointMagic, 4));
  file.u32(ckpt.version);
  const auto& body = payload.buffer();
  file.u64(body.size());
  file.buffer().insert(file.buffer().end(), body.begin(), body.end());
  file.u32(payload_crc(body.data(), body.size()));
  return std::move(file.buffer());
}

Checkpoint checkpoint_from_bytes(const std::vector<unsigned char>& bytes, const std::string& origin) {
  constexpr std::size_t kHeader = 4 + 4 + 8;
  if (bytes.size() < kHeader + 4) {
    throw LengthError(origin + ": checkpoint too short: expected at least " +
                      std::to_string(kHeader + 4) + " bytes, actual " + std::to_string(bytes.size()));
  }
  if (!std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
    throw FormatError(origin + ": not a checkpoint file (bad magic)");
  }
  Reader head(bytes.data() + 4, kHeader - 4, origin);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(origin + ": unsupported checkpoint version " + std::to_string(version) +
                       " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t length = head.u64();
  const std::uint64_t expected = kHeader + length + 4;
  if (expected != bytes.size()) {
    throw LengthError(origin + ": checkpoint length mismatch: expected " + std::to_string(expected) +
                      " bytes, actual " + std::to_string(bytes.size()));
  }
  const unsigned char* body = bytes.data() + kHeader;
  Reader tail(body + length, 4, origin);
  const std::uint32_t stored = tail.u32();
  if (stored != payload_crc(body, std::size_t(length))) {
    throw IntegrityError(origin + ": checkpoint checksum mismatch, file is corrupt");
  }

  std::map<std::string, Record> records;
  Reader in(body, std::size_t(length), origin);
  while (!in.done()) {
    const std::string name = in.bytes(in.u32());
    Record r;
    const std::uint8_t kind = in.u8();
    switch (kind) {
      case std::uint8_t(RecordKind::tensor): {
        r.kind = RecordKind::tensor;
        const std::uint32_t rank = in.u32();
        std::uint64_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
          r.shape.push_back(std::size_t(in.u64()));
          n *= r.shape.back();
        }
        if (n > length / 8) throw FormatError(origin + ": record " + name + " is larger than the payload");
        r.values.resize(std::size_t(n));
        for (auto& v : r.values) v = in.f64();
        break;
      }
      case std::uint8_t(RecordKind::text):
        r.kind = RecordKind::text;
        r.text = in.bytes(in.u64());
        break;
      case std::uint8_t(RecordKind::u64):
        r.kind = RecordKind::u64;
        r.number = in.u64();
        break;
      default:
        throw FormatError(origin + ": record " + name + " has unknown kind " + std::to_string(kind));
    }
    records[name] = std::move(r);
  }

  auto take = [&](const std::string& name, RecordKind kind) -> Record& {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError(origin + ": checkpoint lacks record " + name);
    if (it->second.kind != kind) throw FormatError(origin + ": record " + name + " has the wrong kind");
    return it->second;
  };

  Checkpoint c;
  c.version = version;
  try {
    c.stage = parse_stage(take("meta.stage", RecordKind::text).text);
    c.config_text = take("meta.config", RecordKind::text).text;
    c.train_speakers = split_ids(take("meta.speakers", RecordKind::text).text);
  } catch (const ContractError& e) {
    throw FormatError(origin + ": bad checkpoint metadata: " + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(origin + ": bad checkpoint metadata: " + e.what());
  }
  c.step = std::size_t(take("meta.step", RecordKind::u64).number);
  c.complete = take("meta.complete", RecordKind::u64).number != 0;
  c.rng_state = take("meta.rng", RecordKind::text).text;

  RunConfig cfg;
  try {
    cfg = c.config();
  } catch (const ContractError& e) {
    throw FormatError(origin + ": checkpoint config does not parse: " + e.what());
  }
  c.model = Model::init(cfg, cfg.seed);
  if (records.count("param.base_field.w0")) c.model.base_field = c.model.field;
  for (const auto& p : c.model.all_params()) {
    Record& r = take("param." + p.name, RecordKind::tensor);
    if (r.shape != p.tensor->shape()) {
      throw FormatError(origin + ": parameter " + p.name + " has shape " + shape_str(r.shape) +
                        ", config implies " + shape_str(p.tensor->shape()));
    }
    *p.tensor = Tensor(r.shape, std::move(r.values), p.tensor->requires_grad());
  }
  c.adam.t = take("adam.t", RecordKind::u64).number;
  for (auto& [name, r] : records) {
    if (name.rfind("adam.m.", 0) == 0) c.adam.m[name.substr(7)] = std::move(r.values);
    if (name.rfind("adam.v.", 0) == 0) c.adam.v[name.substr(7)] = std::move(r.values);
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes, path.string());
}

// ---- traces -----------------------------------------------------------------

std::string trace_header() { return "step,stage,loss_total,loss_cfm,loss_intra,loss_inter,lr,tau"; }

std::string trace_line(const TraceRow& row) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", row.step,
                stage_name(row.stage).c_str(), row.loss_total, row.loss_cfm, row.loss_intra,
                row.loss_inter, row.lr, row.tau);
  return buf;
}

// ---- stages -----------------------------------------------------------------

std::optional<Stage> prerequisite_stage(Stage stage, const RunConfig& cfg) {
  switch (stage) {
    case Stage::pretrain: return std::nullopt;
    case Stage::self_distill: return Stage::pretrain;
    case Stage::align: return cfg.self_distill_enabled ? Stage::self_distill : Stage::pretrain;
  }
  return std::nullopt;
}

std::vector<std::size_t> alignment_speakers(const World& world, double extra_data) {
  if (!(extra_data >= 0.0 && extra_data <= 1.0)) {
    throw ConfigError("extra_data must lie in [0, 1], got " + std::to_string(extra_data));
  }
  const auto train = world.train_speakers();
  const std::size_t half = (train.size() + 1) / 2;
  const std::size_t extra = std::size_t(std::llround(extra_data * double(train.size() - half)));
  return {train.begin(), train.begin() + std::ptrdiff_t(half + extra)};
}

namespace {

FlowBatch flow_batch(const Tensor& x1, Rng& rng) {
  FlowBatch b;
  b.x1 = x1;
  b.x0 = gaussian_tensor(rng, x1.shape(), 1.0, false);
  b.t.resize(x1.rows());
  for (auto& t : b.t) t = uniform01(rng);
  return b;
}

}  // namespace

StageLoss stage_loss(const Model& model, const RunConfig& cfg, const World& world, Stage stage,
                     const std::vector<std::size_t>& speakers, Rng& rng) {
  StageLoss out;
  const Tensor zero = Tensor::scalar(0.0);
  out.intra = zero;
  out.inter = zero;
  switch (stage) {
    case Stage::pretrain: {
      ModalityBatch batch = gen_batch(world, cfg.batch_size, ModalityMix{}, rng, speakers);
      FlowBatch fb = flow_batch(batch.data_points(), rng);
      fb.cond = batch.references();
      fb.tokens = batch.pooled_tokens();
      std::vector<Tensor> prompts;
      for (const auto& e : batch.entries) {
        Tensor p = uniform01(rng) < cfg.prompt_drop ? Tensor::zeros(e.x1.shape())
                                                    : mask_prompt(e.x1, cfg.prompt_keep, rng);
        prompts.push_back(p.reshaped({1, p.numel()}));
      }
      fb.prompt = concat_rows(prompts);
      out.cfm = cfm_loss(fb, model.field, CfmMode::pretrain, cfg.cfm_norm);
      out.total = out.cfm;
      break;
    }
    case Stage::self_distill: {
      if (model.base_field.weights.empty()) throw StageError("self_distill needs a frozen base field");
      ModalityBatch batch = gen_batch(world, cfg.batch_size, ModalityMix{}, rng, speakers);
      auto pairs = self_distill_pairs(world, batch, model.base_field, rng, speakers, cfg.ode_steps);
      std::vector<FlowSample> samples;
      samples.reserve(pairs.size());
      for (auto& p : pairs) {
        FlowSample s;
        s.x1 = p.x1;
        s.x0 = gaussian_tensor(rng, p.x1.shape(), 1.0, false);
        s.t = uniform01(rng);
        s.cond = p.speaker;
        s.tokens = p.tokens;
        samples.push_back(std::move(s));
      }
      out.cfm = cfm_loss(samples, model.field, CfmMode::self_distill, cfg.cfm_norm);
      out.total = out.cfm;
      break;
    }
    case Stage::align: {
      ModalityMix mix{cfg.face_weight, cfg.text_weight, 0.0};
      ModalityBatch batch = gen_batch(world, cfg.batch_size, mix, rng, speakers);
      const auto anchor = speech_anchor_select(batch.size(), cfg.anchor_p, rng);
      std::vector<Tensor> raw;
      std::vector<Modality> modality;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& e = batch.entries[i];
        raw.push_back(anchor[i] ? e.reference : e.embedding);
        modality.push_back(anchor[i] ? Modality::speech : e.modality);
      }
      Tensor v = model.embed(raw, modality, cfg);
      Tensor s_r = batch.references();
      FlowBatch fb = flow_batch(batch.data_points(), rng);
      fb.cond = v;
      fb.tokens = batch.pooled_tokens();
      out.cfm = cfm_loss(fb, model.field, CfmMode::mva, cfg.cfm_norm);
      SimilarityOptions sim{cfg.cosine_similarity};
      out.intra = intra_loss(s_r, v, model.intra_tau(cfg), sim);
      out.inter = infonce_loss(v, s_r, model.tau_inter, cfg.symmetric_infonce, sim);
      const double l1 = cfg.softcl_enabled ? cfg.lambda1 : 0.0;
      const double l2 = cfg.softcl_enabled ? cfg.lambda2 : 0.0;
      out.total = total_loss(out.cfm, out.intra, out.inter, l1, l2);
      break;
    }
  }
  return out;
}

namespace {

void check_compatible(const RunConfig& cfg, const RunConfig& prior) {
  std::vector<std::string> keys{"field_hidden"};
  for (const auto& k : config_keys()) {
    if (k.section == "world") keys.push_back(k.name);
  }
  for (const auto& k : keys) {
    const auto a = get_config_value(cfg, k);
    const auto b = get_config_value(prior, k);
    if (a != b) {
      throw ValidationError("prerequisite checkpoint was trained with " + k + " = " + b +
                            ", this run has " + k + " = " + a);
    }
  }
}

ParamList trainable(Model& model, const RunConfig& cfg, Stage stage) {
  return stage == Stage::align ? model.aligner_params(cfg) : model.field_params();
}

}  // namespace

Checkpoint begin_stage(const RunConfig& cfg, const World& world, const Checkpoint* prerequisite) {
  cfg.validate();
  if (cfg.stage == Stage::self_distill && !cfg.self_distill_enabled) {
    throw StageError("self_distill stage requested but self_distill_enabled = false");
  }
  const WorldConfig& expect = cfg.world;
  const WorldConfig& have = world.config();
  if (have.seed != expect.seed || have.num_speakers != expect.num_speakers ||
      have.eval_speakers != expect.eval_speakers || have.data_dim != expect.data_dim ||
      have.speech_dim != expect.speech_dim) {
    throw ValidationError("world does not match the run config");
  }

  Checkpoint c;
  c.stage = cfg.stage;
  c.config_text = config_echo(cfg);
  const auto need = prerequisite_stage(cfg.stage, cfg);
  if (need) {
    const std::string want = stage_name(*need);
    if (!prerequisite) {
      throw StageError("stage " + stage_name(cfg.stage) + " requires a completed " + want +
                       " checkpoint");
    }
    if (prerequisite->stage != *need || !prerequisite->complete) {
      throw StageError("stage " + stage_name(cfg.stage) + " requires a completed " + want +
                       " checkpoint, got " + (prerequisite->complete ? "" : "an unfinished ") +
                       stage_name(prerequisite->stage));
    }
    check_compatible(cfg, prerequisite->config());
    c.model = prerequisite->model.clone();
  } else {
    c.model = Model::init(cfg, cfg.seed);
  }
  c.model.base_field = FieldParams{};
  if (cfg.stage == Stage::self_distill) {
    c.model.base_field = c.model.field;
    ParamList base;
    c.model.base_field.collect(base, "base_field.");
    set_requires_grad(base, false);
  }
  if (cfg.stage == Stage::align) c.model.init_aligner(cfg, cfg.seed);
  c.train_speakers = cfg.stage == Stage::align ? alignment_speakers(world, cfg.extra_data)
                                               : world.train_speakers();
  c.rng_state = rng_state(substream(cfg.seed, "train", stage_index(cfg.stage)));
  return c;
}

std::vector<TraceRow> run_stage(Checkpoint& ckpt, const RunConfig& cfg, const World& world,
                                std::size_t until, const StageHooks& hooks) {
  if (ckpt.stage != cfg.stage) {
    throw StageError("checkpoint is at stage " + stage_name(ckpt.stage) + ", config asks for " +
                     stage_name(cfg.stage));
  }
  until = std::min(until, cfg.steps);
  Model& model = ckpt.model;
  set_requires_grad(model.all_params(), false);
  ParamList params = trainable(model, cfg, cfg.stage);
  set_requires_grad(params, true);

  const AdamWOptions opt{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
  const auto decays = [](const std::string& name) { return !is_temperature(name); };
  Rng rng = rng_from_state(ckpt.rng_state);
  std::vector<TraceRow> trace;
  while (ckpt.step < until) {
    zero_grads(params);
    StageLoss loss = stage_loss(model, cfg, world, cfg.stage, ckpt.train_speakers, rng);
    backward(loss.total);
    if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
    const double lr = lr_at(ckpt.step + 1, cfg);
    adamw_step(params, ckpt.adam, lr, opt, decays);
    if (cfg.stage == Stage::align) {
      clamp_temperature(model.tau_intra);
      clamp_temperature(model.tau_inter);
    }
    ckpt.step += 1;
    ckpt.rng_state = rng_state(rng);
    if (ckpt.step == cfg.steps) ckpt.complete = true;

    if (ckpt.step % cfg.trace_every == 0 || ckpt.step == cfg.steps) {
      TraceRow row{ckpt.step, cfg.stage, loss.total.item(), loss.cfm.item(), loss.intra.item(),
                   loss.inter.item(), lr, model.tau_inter.item()};
      trace.push_back(row);
      if (hooks.on_trace) hooks.on_trace(row);
    }
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && ckpt.step % cfg.checkpoint_every == 0) {
      hooks.on_checkpoint(ckpt);
    }
  }
  zero_grads(params);
  return trace;
}

Checkpoint train(const RunConfig& cfg, const World& world, const Checkpoint* prerequisite,
                 std::vector<TraceRow>* trace) {
  Checkpoint c = begin_stage(cfg, world, prerequisite);
  auto rows = run_stage(c, cfg, world, cfg.steps);
  if (trace) trace->insert(trace->end(), rows.begin(), rows.end());
  return c;
}

}  // namespace voicespace

// SPDX-License-Identifier: Apache-2.0
#include "voicespace/cli.hpp"

#include <zlib.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "voicespace/bench.hpp"
#include "voicespace/errors.hpp"
#include "voicespace/gradcheck.hpp"
#include "voicespace/trainer.hpp"

namespace voicespace {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    cur.erase(0, cur.find_first_not_of(" \t"));
    cur.erase(cur.find_last_not_of(" \t") + 1);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& t : split_commas(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::logic_error&) {
      throw ConfigError("--seeds expects comma-separated integers, got '" + t + "'");
    }
  }
  if (out.empty()) throw ConfigError("--seeds is empty");
  return out;
}

std::vector<double> parse_scales(const std::string& s) {
  std::vector<double> out;
  for (const auto& t : split_commas(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::logic_error&) {
      throw ConfigError("--scales expects comma-separated numbers, got '" + t + "'");
    }
  }
  return out;
}

Tensor stack(const std::vector<Tensor>& rows) {
  std::vector<Tensor> parts;
  parts.reserve(rows.size());
  for (const auto& r : rows) parts.push_back(r.reshaped({1, r.numel()}));
  return concat_rows(parts);
}

void save_table(RunDir& dir, const std::string& name, const Tensor& t, std::vector<std::int64_t> labels) {
  const fs::path p = dir.path(name);
  save_embeddings(p, EmbeddingTable::from_tensor(t, std::move(labels)));
  dir.record(p);
  dir.record(p.string() + ".labels");
}

fs::path checkpoint_path(const RunDir& dir, Stage s) { return dir.path(stage_name(s) + ".ckpt"); }

// ---- verbs ------------------------------------------------------------------

struct Common {
  std::string config;
  std::vector<std::string> set;
  std::string out = "run";
  std::size_t workers = 1;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = parse_config(c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config), c.set);
  cfg.workers = c.workers;
  cfg.validate();
  return cfg;
}

void gen_data(const Common& c, std::size_t per_speaker, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const World world = World::generate(cfg.world);
  RunDir dir(c.out);
  dir.write("config.ini", config_echo(cfg));
  Rng rng = substream(cfg.seed, "data");
  std::vector<Tensor> speaker, face, text, speech, data, tokens;
  std::vector<std::int64_t> ids, obs_ids;
  std::string split = "speaker,split\n";
  const auto eval = world.eval_speakers();
  for (std::size_t s = 0; s < world.num_speakers(); ++s) {
    const bool held_out = std::find(eval.begin(), eval.end(), s) != eval.end();
    split += std::to_string(s) + (held_out ? ",eval\n" : ",train\n");
    speaker.push_back(world.speaker_embedding(s));
    ids.push_back(std::int64_t(s));
    for (std::size_t k = 0; k < per_speaker; ++k) {
      face.push_back(world.observe(Modality::face, s, rng));
      text.push_back(world.observe(Modality::text, s, rng));
      speech.push_back(world.observe(Modality::speech, s, rng));
      const Tensor content = world.draw_content(rng);
      const Tensor x = world.data_point(s, content, rng);
      data.push_back(x);
      tokens.push_back(mean_rows(world.tokenize(x, content)));
      obs_ids.push_back(std::int64_t(s));
    }
  }
  dir.write("split.csv", split);
  save_table(dir, "speakers.uemb", stack(speaker), ids);
  save_table(dir, "face.uemb", stack(face), obs_ids);
  save_table(dir, "text.uemb", stack(text), obs_ids);
  save_table(dir, "speech.uemb", stack(speech), obs_ids);
  save_table(dir, "data.uemb", stack(data), obs_ids);
  save_table(dir, "tokens.uemb", stack(tokens), obs_ids);
  dir.finish();
  out << "wrote " << world.num_speakers() << " speakers x " << per_speaker << " samples to "
      << dir.root().string() << "\n";
}

// Keeps the trace rows a resumed run has already produced.
std::string trace_prefix(const fs::path& p, std::size_t upto) {
  std::string kept = trace_header() + "\n";
  if (!fs::exists(p)) return kept;
  std::istringstream in(read_text(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= upto) kept += line + "\n";
  }
  return kept;
}

void train_verb(const Common& c, const std::string& stage_flag, const std::string& resume,
                const std::string& prereq_flag, std::size_t stop_at, std::ostream& out) {
  RunDir dir(c.out);
  Checkpoint ckpt;
  RunConfig cfg;
  if (!resume.empty()) {
    ckpt = load_checkpoint(resume);
    cfg = ckpt.config();
    cfg.workers = c.workers;
    if (!stage_flag.empty() && parse_stage(stage_flag) != ckpt.stage)
      throw StageError("--resume checkpoint is at stage " + stage_name(ckpt.stage) + ", not " + stage_flag);
    if (ckpt.complete) throw StageError("checkpoint " + resume + " is already complete");
  } else {
    cfg = resolve(c);
    if (!stage_flag.empty()) cfg.stage = parse_stage(stage_flag);
  }
  const World world = World::generate(cfg.world);
  const Stage stage = cfg.stage;
  const std::string name = stage_name(stage);
  if (resume.empty()) {
    const auto prereq = prerequisite_stage(stage, cfg);
    std::optional<Checkpoint> prior;
    if (prereq) {
      const fs::path p = prereq_flag.empty() ? checkpoint_path(dir, *prereq) : fs::path(prereq_flag);
      if (!fs::exists(p)) {
        throw StageError("stage " + name + " needs a completed " + stage_name(*prereq) +
                         " checkpoint, none found at " + p.string());
      }
      prior = load_checkpoint(p);
    }
    ckpt = begin_stage(cfg, world, prior ? &*prior : nullptr);
  }
  dir.write("config.ini", config_echo(cfg));

  const fs::path trace_path = dir.path(name + ".trace.csv");
  const std::string head = resume.empty() ? trace_header() + "\n" : trace_prefix(trace_path, ckpt.step);
  {
    std::ofstream t(trace_path, std::ios::binary | std::ios::trunc);
    if (!t) throw IoError("cannot write " + trace_path.string());
    t << head;
  }
  std::ofstream trace(trace_path, std::ios::binary | std::ios::app);
  StageHooks hooks;
  hooks.on_trace = [&](const TraceRow& r) { trace << trace_line(r) << "\n" << std::flush; };
  hooks.on_checkpoint = [&](const Checkpoint& k) { save_checkpoint(k, checkpoint_path(dir, stage)); };
  const std::size_t until = stop_at > 0 ? std::min(stop_at, cfg.steps) : cfg.steps;
  run_stage(ckpt, cfg, world, until, hooks);
  trace.close();
  if (!trace) throw IoError("failed writing " + trace_path.string());
  save_checkpoint(ckpt, checkpoint_path(dir, stage));
  dir.record(trace_path);
  dir.record(checkpoint_path(dir, stage));
  dir.finish();
  out << name << ": step " << ckpt.step << "/" << cfg.steps << (ckpt.complete ? " complete" : " partial")
      << ", checkpoint " << checkpoint_path(dir, stage).string() << "\n";
}

void eval_verb(const Common& c, const std::string& path, const std::string& tasks, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(path);
  RunConfig cfg = ckpt.config();
  cfg.workers = c.workers;
  if (!tasks.empty()) cfg.tasks = split_commas(tasks);
  if (const char* env = std::getenv(kSeedEnv)) set_config_value(cfg, "seed", env);
  for (const auto& t : cfg.tasks) find_task(t);
  if (ckpt.stage != Stage::align || !ckpt.complete)
    throw StageError("eval needs a completed align checkpoint, " + path + " holds " +
                     (ckpt.complete ? "" : "an unfinished ") + stage_name(ckpt.stage));
  const World world = World::generate(cfg.world);
  RunDir dir(c.out);
  dir.write("config.ini", config_echo(cfg));
  const BenchReport report = run_benchmark(ckpt.model, cfg, world, ckpt.train_speakers, cfg.seed);
  for (const auto& f : write_report(report, c.out)) dir.record(f);
  dir.finish();
  out << report.csv();
}

void sample_verb(const Common& c, const std::string& path, const std::string& modality_name_arg,
                 std::size_t steps, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(path);
  RunConfig cfg = ckpt.config();
  cfg.workers = c.workers;
  if (const char* env = std::getenv(kSeedEnv)) set_config_value(cfg, "seed", env);
  const Modality modality = parse_modality(modality_name_arg);
  if (steps == 0) throw ContractError("--steps must be positive");
  if (ckpt.stage != Stage::align && modality != Modality::speech)
    throw StageError(std::string(modality_name(modality)) + " conditioning needs an align checkpoint, " +
                     path + " holds " + stage_name(ckpt.stage));
  const World world = World::generate(cfg.world);
  RunDir dir(c.out);
  dir.write("config.ini", config_echo(cfg));

  NoGradGuard no_grad;
  Rng rng = substream(cfg.seed, "sample");
  std::vector<Tensor> raw, tokens;
  std::vector<std::int64_t> labels;
  for (std::size_t s : world.eval_speakers()) {
    for (std::size_t k = 0; k < cfg.descriptions; ++k) {
      raw.push_back(world.observe(modality, s, rng));
      tokens.push_back(mean_rows(world.draw_content(rng)));
      labels.push_back(std::int64_t(s));
    }
  }
  const Tensor cond = ckpt.stage == Stage::align
                          ? ckpt.model.embed(raw, std::vector<Modality>(raw.size(), modality), cfg)
                          : stack(raw);
  const Tensor x0 = gaussian_tensor(rng, {raw.size(), world.config().data_dim}, 1.0, false);
  const Tensor x = sample_ode(ckpt.model.field, cond, stack(tokens), x0, steps);
  save_table(dir, "samples.uemb", x, labels);
  dir.finish();
  out << "sampled " << x.rows() << " data points (" << steps << " Euler steps) to "
      << dir.path("samples.uemb").string() << "\n";
}

int grad_check_verb(const Common& c, std::size_t cases, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  RunDir dir(c.out);
  dir.write("config.ini", config_echo(cfg));
  const auto rows = grad_check_suite(cfg, cases, cfg.seed);
  const std::string csv = grad_check_csv(rows);
  dir.write("gradcheck.csv", csv);
  dir.finish();
  out << csv;
  for (const auto& r : rows) {
    if (r.max_rel_error >= 1e-3 || r.max_violation > 1.0) {
      throw ValidationError("gradient check failed for " + r.loss);
    }
  }
  return 0;
}

void ablate_verb(const Common& c, const std::string& grid, const std::string& seeds, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const auto variants = split_commas(grid);
  if (variants.empty()) throw ConfigError("--grid is empty");
  for (const auto& v : variants) ablation_config(cfg, v);
  RunDir dir(c.out);
  dir.write("config.ini", config_echo(cfg));
  const auto results = ablation_grid(cfg, variants, parse_seeds(seeds), cfg.workers);
  const std::string csv = grid_csv(results);
  dir.write("ablation.csv", csv);
  dir.finish();
  out << csv;
}

void sweep_verb(const Common& c, const std::string& scales, const std::string& seeds, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const auto s = parse_scales(scales);
  const auto sd = parse_seeds(seeds);
  RunDir dir(c.out);
  dir.write("config.ini", config_echo(cfg));
  const auto results = data_scale_sweep(cfg, s, sd, cfg.workers);
  const std::string csv = sweep_csv(results);
  dir.write("sweep.csv", csv);
  dir.finish();
  out << csv;
}

void add_common(CLI::App* app, Common& c, bool with_config) {
  if (with_config) {
    app->add_option("--config", c.config, "INI config file layered over the defaults");
    app->add_option("--set", c.set, "key=value override applied after the config file (repeatable)")
        ->default_str("");
  }
  app->add_option("--out", c.out, "output directory");
  app->add_option("--workers", c.workers, "parallel evaluation workers")->check(CLI::PositiveNumber);
}

}  // namespace

RunConfig parse_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (file) {
    if (!fs::exists(*file)) throw IoError("config file " + file->string() + " does not exist");
    apply_config_text(cfg, read_text(*file), file->string());
  }
  if (const char* env = std::getenv(kSeedEnv)) {
    try {
      set_config_value(cfg, "seed", env);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(kSeedEnv) + ": " + e.what());
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
  return cfg;
}

RunDir::RunDir(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw IoError("cannot create " + root_.string() + ": " + ec.message());
}

void RunDir::write(const std::string& name, const std::string& bytes) {
  const fs::path p = path(name);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << bytes;
  out.close();
  if (!out) throw IoError("failed writing " + p.string());
  record(p);
}

void RunDir::record(const fs::path& file) {
  const std::string rel = fs::relative(file, root_).generic_string();
  if (std::find(files_.begin(), files_.end(), rel) == files_.end()) files_.push_back(rel);
}

void RunDir::finish() {
  // Earlier runs into the same directory stay listed while their files exist.
  const fs::path manifest = root_ / "manifest.tsv";
  if (fs::exists(manifest)) {
    std::istringstream in(read_text(manifest));
    std::string line;
    while (std::getline(in, line)) {
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) continue;
      const std::string rel = line.substr(tab + 1);
      if (fs::exists(root_ / rel) && std::find(files_.begin(), files_.end(), rel) == files_.end())
        files_.push_back(rel);
    }
  }
  std::sort(files_.begin(), files_.end());
  std::string text;
  char buf[32];
  for (const auto& f : files_) {
    const fs::path p = root_ / f;
    std::snprintf(buf, sizeof buf, "%08x\t", file_crc32(p));
    text += buf + std::to_string(fs::file_size(p)) + "\t" + f + "\n";
  }
  std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + root_.string());
  out << text;
  if (!out) throw IoError("failed writing manifest in " + root_.string());
}

std::uint32_t file_crc32(const fs::path& file) {
  const std::string bytes = read_text(file);
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* data = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal voice-space toolkit on a synthetic world", "voicespace"};
  app.option_defaults()->always_capture_default();
  app.get_formatter()->column_width(36);
  app.require_subcommand(1);
  app.fallthrough(false);

  Common common;
  std::size_t per_speaker = 4;
  std::string stage, resume, prereq, checkpoint, tasks, modality = "speech";
  std::string grid = "full,no_mva,no_softcl,no_self_distill", seeds = "0,1,2,3,4";
  std::string scales = "0,0.25,0.5,1";
  std::string sweep_seeds = "0,1,2";
  std::size_t stop_at = 0, steps = kDefaultOdeSteps, cases = 20;

  auto* gen = app.add_subcommand("gen-data", "Dump observations, data points and the speaker split of the world");
  add_common(gen, common, true);
  gen->add_option("--per-speaker", per_speaker, "samples drawn per speaker")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Run one training stage");
  add_common(tr, common, true);
  tr->add_option("--stage", stage, "pretrain|self_distill|align (default: the config's stage)");
  tr->add_option("--resume", resume, "continue a partial checkpoint under its own config");
  tr->add_option("--prereq", prereq, "prerequisite checkpoint (default: <out>/<stage>.ckpt of the stage before)");
  tr->add_option("--stop-at", stop_at, "stop after this step and keep a partial checkpoint (0: run to the end)");

  auto* ev = app.add_subcommand("eval", "Benchmark a completed align checkpoint on held-out speakers");
  add_common(ev, common, false);
  ev->add_option("--checkpoint", checkpoint, "align checkpoint")->required();
  ev->add_option("--tasks", tasks, "comma-separated subset of face_tts,face_vc,text_tts,text_vc (default: the checkpoint's)");

  auto* sa = app.add_subcommand("sample", "Generate data points for held-out speakers");
  add_common(sa, common, false);
  sa->add_option("--checkpoint", checkpoint, "checkpoint; face and text need an align checkpoint")->required();
  sa->add_option("--modality", modality, "face|text|speech conditioning");
  sa->add_option("--steps", steps, "Euler steps");

  auto* gc = app.add_subcommand("grad-check", "Compare every loss gradient with central differences");
  add_common(gc, common, true);
  gc->add_option("--cases", cases, "random small problems per loss")->check(CLI::PositiveNumber);

  auto* ab = app.add_subcommand("ablate", "Train and benchmark ablation variants over seeds");
  add_common(ab, common, true);
  ab->add_option("--grid", grid, "comma-separated variants");
  ab->add_option("--seeds", seeds, "comma-separated training seeds");

  auto* sw = app.add_subcommand("sweep", "Alignment-data scale sweep over seeds");
  add_common(sw, common, true);
  sw->add_option("--scales", scales, "nondecreasing extra-data fractions in [0, 1]");
  sw->add_option("--seeds", sweep_seeds, "comma-separated training seeds");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    CLI::App* verb = args.empty() ? nullptr : app.get_subcommand_no_throw(args.front());
    err << (verb ? verb->help(app.get_name()) : app.help());
    return 1;
  }

  try {
    if (gen->parsed()) gen_data(common, per_speaker, out);
    else if (tr->parsed()) train_verb(common, stage, resume, prereq, stop_at, out);
    else if (ev->parsed()) eval_verb(common, checkpoint, tasks, out);
    else if (sa->parsed()) sample_verb(common, checkpoint, modality, steps, out);
    else if (gc->parsed()) return grad_check_verb(common, cases, out);
    else if (ab->parsed()) ablate_verb(common, grid, seeds, out);
    else if (sw->parsed()) sweep_verb(common, scales, sweep_seeds, out);
    return 0;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace voicespace

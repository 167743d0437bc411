// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "voicespace/cli.hpp"
#include "voicespace/errors.hpp"
#include "voicespace/synthdata.hpp"

using namespace voicespace;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vs_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Bitwise CRC-32 (reflected 0xEDB88320), independent of zlib.
std::uint32_t crc32_bitwise(const std::string& bytes) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (unsigned char b : bytes) {
    crc ^= b;
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

const char* kSmall = R"([run]
steps = 20
batch_size = 8
trace_every = 5
checkpoint_every = 10
[optim]
warmup = 5
warmup_scale = 1
[kvformer]
bank_size = 8
depth = 1
[cfm]
field_hidden = 16
[world]
num_speakers = 16
eval_speakers = 4
[eval]
descriptions = 3
probe_samples = 200
)";

struct SeedEnv {
  explicit SeedEnv(const char* v) { ::setenv(kSeedEnv, v, 1); }
  ~SeedEnv() { ::unsetenv(kSeedEnv); }
};

}  // namespace

TEST_CASE("config layering") {
  const fs::path dir = scratch("layers");
  ::unsetenv(kSeedEnv);
  spit(dir / "empty.ini", "");
  CHECK(config_echo(parse_config(dir / "empty.ini", {})) == config_echo(RunConfig{}));

  spit(dir / "lambda.ini", "[loss]\nlambda1 = 0.05\nseed = 3\n");
  CHECK_THROWS_AS(parse_config(dir / "lambda.ini", {}), ConfigError);  // seed is in [run]
  spit(dir / "lambda.ini", "lambda1 = 0.05\nseed = 3\n");
  CHECK(parse_config(dir / "lambda.ini", {}).lambda1 == 0.05);
  CHECK(parse_config(dir / "lambda.ini", {}).seed == 3);

  spit(dir / "bad.ini", "lambda1 = \"abc\"\n");
  try {
    parse_config(dir / "bad.ini", {});
    FAIL("expected a type error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lambda1") != std::string::npos);
    CHECK(std::string(e.what()).find("real number") != std::string::npos);
  }

  {
    SeedEnv env("11");
    CHECK(parse_config(dir / "lambda.ini", {}).seed == 11);
    CHECK(parse_config(dir / "lambda.ini", {"seed=12"}).seed == 12);
  }
  CHECK(parse_config(std::nullopt, {"lambda2=0.5", "world.leakage=0.25"}).world.leakage == 0.25);
  CHECK_THROWS_AS(parse_config(std::nullopt, {"lambda2"}), ConfigError);
  CHECK_THROWS_AS(parse_config(dir / "missing.ini", {}), IoError);
  {
    SeedEnv env("many");
    CHECK_THROWS_AS(parse_config(std::nullopt, {}), ConfigError);
  }
}

TEST_CASE("help text matches the snapshots") {
  const fs::path snaps = VS_SNAPSHOT_DIR;
  const Run top = cli({"--help"});
  CHECK(top.code == 0);
  CHECK(top.out == slurp(snaps / "help.txt"));
  for (const std::string verb : {"gen-data", "train", "eval", "sample", "grad-check", "ablate", "sweep"}) {
    const Run r = cli({verb, "--help"});
    CHECK_MESSAGE(r.code == 0, verb);
    CHECK_MESSAGE(r.out == slurp(snaps / ("help_" + verb + ".txt")), verb);
  }
}

TEST_CASE("usage errors exit nonzero with usage text") {
  const Run verb = cli({"convert"});
  CHECK(verb.code == 1);
  CHECK(verb.err.find("Usage: voicespace") != std::string::npos);
  const Run flag = cli({"train", "--steps", "5"});
  CHECK(flag.code == 1);
  CHECK(flag.err.find("--steps") != std::string::npos);
  CHECK(flag.err.find("Usage: voicespace train") != std::string::npos);
  CHECK(cli({}).code == 1);
  CHECK(cli({"eval"}).code == 1);  // --checkpoint is required
}

TEST_CASE("config errors exit 1, missing files exit 2") {
  const fs::path dir = scratch("errors");
  const Run typo = cli({"grad-check", "--set", "lamda1=0.1", "--out", dir.string()});
  CHECK(typo.code == 1);
  CHECK(typo.err.find("lambda1") != std::string::npos);
  const Run missing = cli({"train", "--config", (dir / "none.ini").string(), "--out", dir.string()});
  CHECK(missing.code == 2);
  CHECK(cli({"eval", "--checkpoint", (dir / "none.ckpt").string(), "--out", dir.string()}).code == 2);
}

TEST_CASE("grad-check verb") {
  const fs::path dir = scratch("gradcheck");
  const Run r = cli({"grad-check", "--out", dir.string()});
  REQUIRE(r.code == 0);
  std::istringstream csv(slurp(dir / "gradcheck.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "loss,cases,coordinates,max_rel_error,max_violation");
  std::map<std::string, double> worst;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    REQUIRE(f.size() == 5);
    worst[f[0]] = std::stod(f[3]);
    CHECK(std::stoul(f[1]) == 20);
  }
  CHECK(worst.size() == 6);
  for (const auto& [loss, err] : worst) CHECK_MESSAGE(err < 1e-3, loss);
  CHECK(fs::exists(dir / "config.ini"));
  CHECK(fs::exists(dir / "manifest.tsv"));
}

TEST_CASE("staged pipeline through the command line") {
  ::unsetenv(kSeedEnv);
  const fs::path dir = scratch("pipeline");
  spit(dir / "small.ini", kSmall);
  const std::string cfg = (dir / "small.ini").string();
  const fs::path run = dir / "run";
  const std::string out = run.string();

  const Run early = cli({"train", "--stage", "align", "--config", cfg, "--out", out});
  CHECK(early.code == 1);
  CHECK(early.err.find("self_distill") != std::string::npos);

  REQUIRE(cli({"train", "--stage", "pretrain", "--config", cfg, "--out", out}).code == 0);
  REQUIRE(cli({"train", "--stage", "self_distill", "--config", cfg, "--out", out}).code == 0);
  REQUIRE(cli({"train", "--stage", "align", "--config", cfg, "--out", out}).code == 0);
  const std::string ckpt_bytes = slurp(run / "align.ckpt");
  const std::string trace = slurp(run / "align.trace.csv");

  SUBCASE("resume reproduces the uninterrupted stage") {
    const fs::path other = dir / "resumed";
    fs::create_directories(other);
    fs::copy_file(run / "self_distill.ckpt", other / "self_distill.ckpt");
    REQUIRE(cli({"train", "--stage", "align", "--config", cfg, "--out", other.string(), "--stop-at", "10"}).code == 0);
    CHECK(slurp(other / "align.ckpt") != ckpt_bytes);
    REQUIRE(cli({"train", "--resume", (other / "align.ckpt").string(), "--out", other.string()}).code == 0);
    CHECK(slurp(other / "align.ckpt") == ckpt_bytes);
    CHECK(slurp(other / "align.trace.csv") == trace);
  }

  SUBCASE("eval artifacts, manifest and determinism") {
    const fs::path ev = dir / "eval";
    const Run r = cli({"eval", "--checkpoint", (run / "align.ckpt").string(), "--tasks", "face_tts,text_vc",
                       "--out", ev.string()});
    REQUIRE(r.code == 0);
    const std::string report = slurp(ev / "report.csv");
    CHECK(r.out == report);
    CHECK(report.rfind("task,n_speakers,n_desc,sst,ssc,ssd,seed,config_hash\n", 0) == 0);
    CHECK(std::count(report.begin(), report.end(), '\n') == 3);

    const Run again = cli({"eval", "--checkpoint", (run / "align.ckpt").string(), "--tasks", "face_tts,text_vc",
                           "--out", (dir / "eval2").string(), "--workers", "3"});
    REQUIRE(again.code == 0);
    CHECK(slurp(dir / "eval2" / "report.csv") == report);

    std::istringstream manifest(slurp(ev / "manifest.tsv"));
    std::set<std::string> listed;
    for (std::string line; std::getline(manifest, line);) {
      std::stringstream ls(line);
      std::string crc, size, name;
      std::getline(ls, crc, '\t');
      std::getline(ls, size, '\t');
      std::getline(ls, name, '\t');
      const std::string bytes = slurp(ev / name);
      CHECK(std::stoul(crc, nullptr, 16) == crc32_bitwise(bytes));
      CHECK(std::stoul(size) == bytes.size());
      listed.insert(name);
    }
    for (const auto& e : fs::directory_iterator(ev)) {
      const std::string name = e.path().filename().string();
      if (name != "manifest.tsv") CHECK_MESSAGE(listed.count(name) == 1, name);
    }
    CHECK(listed.count("config.ini") == 1);
  }

  SUBCASE("manifest of the training directory covers every stage") {
    const std::string manifest = slurp(run / "manifest.tsv");
    for (const char* f : {"pretrain.ckpt", "self_distill.ckpt", "align.ckpt", "pretrain.trace.csv",
                          "align.trace.csv", "config.ini"})
      CHECK_MESSAGE(manifest.find(f) != std::string::npos, f);
  }

  SUBCASE("corrupted checkpoints exit 2 with an integrity message") {
    std::string bad = ckpt_bytes;
    bad[bad.size() / 2] ^= 0x10;
    spit(dir / "bad.ckpt", bad);
    const Run r = cli({"eval", "--checkpoint", (dir / "bad.ckpt").string(), "--out", (dir / "e").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("checksum") != std::string::npos);
    spit(dir / "short.ckpt", ckpt_bytes.substr(0, 40));
    CHECK(cli({"eval", "--checkpoint", (dir / "short.ckpt").string(), "--out", (dir / "e").string()}).code == 2);
  }

  SUBCASE("eval refuses a pretrain checkpoint") {
    CHECK(cli({"eval", "--checkpoint", (run / "pretrain.ckpt").string(), "--out", (dir / "e").string()}).code == 1);
  }

  SUBCASE("sample") {
    const fs::path s = dir / "sample";
    REQUIRE(cli({"sample", "--checkpoint", (run / "align.ckpt").string(), "--modality", "text", "--steps", "4",
                 "--out", s.string()}).code == 0);
    const EmbeddingTable t = load_embeddings(s / "samples.uemb", 8);
    CHECK(t.rows == 12);
    CHECK(t.labels.size() == 12);
    CHECK(cli({"sample", "--checkpoint", (run / "pretrain.ckpt").string(), "--modality", "face",
               "--out", s.string()}).code == 1);
    CHECK(cli({"sample", "--checkpoint", (run / "pretrain.ckpt").string(), "--modality", "speech",
               "--out", s.string()}).code == 0);
  }
}

TEST_CASE("gen-data writes the world and its split") {
  ::unsetenv(kSeedEnv);
  const fs::path dir = scratch("gendata");
  spit(dir / "small.ini", kSmall);
  REQUIRE(cli({"gen-data", "--config", (dir / "small.ini").string(), "--per-speaker", "2", "--out",
               (dir / "d").string()}).code == 0);
  const EmbeddingTable face = load_embeddings(dir / "d" / "face.uemb", 48);
  CHECK(face.rows == 32);
  CHECK(load_embeddings(dir / "d" / "speakers.uemb", 32).rows == 16);
  const std::string split = slurp(dir / "d" / "split.csv");
  CHECK(split.find("15,eval\n") != std::string::npos);
  CHECK(split.find("11,train\n") != std::string::npos);
  REQUIRE(cli({"gen-data", "--config", (dir / "small.ini").string(), "--per-speaker", "2", "--out",
               (dir / "d2").string()}).code == 0);
  CHECK(slurp(dir / "d" / "manifest.tsv") == slurp(dir / "d2" / "manifest.tsv"));
}

TEST_CASE("ablate and sweep reproduce from the resolved config") {
  ::unsetenv(kSeedEnv);
  const fs::path dir = scratch("grid");
  spit(dir / "small.ini", std::string(kSmall) + "tasks = face_tts\n");
  const Run a = cli({"ablate", "--config", (dir / "small.ini").string(), "--grid", "full,no_softcl", "--seeds",
                     "0,1", "--workers", "2", "--out", (dir / "a").string()});
  REQUIRE(a.code == 0);
  const Run b = cli({"ablate", "--config", (dir / "a" / "config.ini").string(), "--grid", "full,no_softcl",
                     "--seeds", "0,1", "--out", (dir / "b").string()});
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a" / "ablation.csv") == slurp(dir / "b" / "ablation.csv"));
  CHECK(std::count(a.out.begin(), a.out.end(), '\n') == 5);

  const Run s = cli({"sweep", "--config", (dir / "small.ini").string(), "--scales", "0,1", "--seeds", "0",
                     "--out", (dir / "s").string()});
  REQUIRE(s.code == 0);
  CHECK(slurp(dir / "s" / "sweep.csv").rfind("scale,task,", 0) == 0);
  CHECK(cli({"sweep", "--scales", "1,0", "--out", (dir / "s").string()}).code == 1);
  CHECK(cli({"ablate", "--grid", "full,no_magic", "--out", (dir / "s").string()}).code == 1);
}

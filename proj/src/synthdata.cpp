// SPDX-License-Identifier: Apache-2.0
#include "voicespace/synthdata.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "voicespace/errors.hpp"
#include "voicespace/params.hpp"

namespace voicespace {

namespace {

Tensor gaussian_leaf(Rng& rng, Shape shape, double stddev) {
  return gaussian_tensor(rng, std::move(shape), stddev, false);
}

// Gram-Schmidt over Gaussian rows; needs width >= d_z.
ObservationMap make_map(Rng& rng, std::size_t d_z, std::size_t width, double noise) {
  std::vector<double> w(d_z * width);
  for (std::size_t i = 0; i < d_z; ++i) {
    double* row = &w[i * width];
    for (std::size_t j = 0; j < width; ++j) row[j] = gaussian(rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < i; ++k) {
        const double* prev = &w[k * width];
        double d = 0.0;
        for (std::size_t j = 0; j < width; ++j) d += row[j] * prev[j];
        for (std::size_t j = 0; j < width; ++j) row[j] -= d * prev[j];
      }
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < width; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < width; ++j) row[j] /= norm;
  }
  ObservationMap m;
  m.weight = Tensor({d_z, width}, std::move(w));
  m.noise = noise;
  return m;
}

std::vector<double> row_times(const Tensor& identities, std::size_t row, const Tensor& w) {
  const std::size_t k = w.rows(), n = w.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double z = identities.at(row, p);
    for (std::size_t j = 0; j < n; ++j) out[j] += z * w.at(p, j);
  }
  return out;
}

std::vector<double> vec_times(std::span<const double> x, const Tensor& w) {
  const std::size_t k = w.rows(), n = w.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[p] * w.at(p, j);
  return out;
}

Tensor stack(const std::vector<BatchEntry>& entries, Tensor BatchEntry::*field) {
  std::vector<Tensor> rows;
  rows.reserve(entries.size());
  for (const auto& e : entries) rows.push_back((e.*field).reshaped({1, (e.*field).numel()}));
  return concat_rows(rows);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

}  // namespace

void WorldConfig::validate() const {
  if (num_speakers < 2) {
    throw ContractError("world needs at least 2 speakers, got " + std::to_string(num_speakers));
  }
  if (eval_speakers >= num_speakers) {
    throw ConfigError("eval_speakers must leave at least one training speaker");
  }
  for (auto d : {latent_dim, speech_dim, face_dim, text_dim, token_dim, token_rows, data_dim}) {
    if (d == 0) throw ConfigError("world dimensions must be positive");
  }
  for (auto d : {speech_dim, face_dim, text_dim}) {
    if (d < latent_dim) {
      throw ConfigError("observation widths must be at least latent_dim (" +
                        std::to_string(latent_dim) + "), got " + std::to_string(d));
    }
  }
  for (double s : {face_noise, text_noise, speech_noise, data_noise, content_scale, leakage,
                   cluster_spread}) {
    if (!(s >= 0.0)) throw ConfigError("world noise levels must be nonnegative");
  }
}

World World::generate(const WorldConfig& config) {
  config.validate();
  World w;
  w.config_ = config;
  Rng rng = substream(config.seed, "world");
  const std::size_t S = config.num_speakers, dz = config.latent_dim;

  auto unit = [&](std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  };
  auto draw = [&] {
    std::vector<double> v(dz);
    for (double& x : v) x = gaussian(rng);
    return v;
  };
  std::vector<std::vector<double>> centers;
  for (std::size_t k = 0; k < config.clusters; ++k) {
    centers.push_back(draw());
    unit(centers.back());
  }
  std::vector<double> z;
  z.reserve(S * dz);
  for (std::size_t s = 0; s < S; ++s) {
    auto v = draw();
    if (!centers.empty()) {
      const auto& c = centers[s % centers.size()];
      const double f = config.cluster_spread / std::sqrt(double(dz));
      for (std::size_t k = 0; k < dz; ++k) v[k] = c[k] + f * v[k];
    }
    unit(v);
    z.insert(z.end(), v.begin(), v.end());
  }
  w.identities_ = Tensor({S, dz}, std::move(z));

  w.face_ = make_map(rng, dz, config.face_dim, config.face_noise);
  w.text_ = make_map(rng, dz, config.text_dim, config.text_noise);
  w.speech_ = make_map(rng, dz, config.speech_dim, config.speech_noise);
  w.data_map_ = gaussian_leaf(rng, {dz, config.data_dim}, 1.0);
  w.content_map_ = gaussian_leaf(rng, {config.token_dim, config.data_dim},
                                 1.0 / std::sqrt(double(config.token_dim)));
  w.leak_map_ = gaussian_leaf(rng, {config.data_dim, config.token_dim},
                              1.0 / std::sqrt(double(config.data_dim)));
  return w;
}

const ObservationMap& World::map(Modality m) const {
  switch (m) {
    case Modality::face: return face_;
    case Modality::text: return text_;
    case Modality::speech: return speech_;
  }
  return speech_;
}

std::vector<std::size_t> World::train_speakers() const {
  std::vector<std::size_t> ids;
  for (std::size_t s = 0; s + config_.eval_speakers < config_.num_speakers; ++s) ids.push_back(s);
  return ids;
}

std::vector<std::size_t> World::eval_speakers() const {
  std::vector<std::size_t> ids;
  for (std::size_t s = config_.num_speakers - config_.eval_speakers; s < config_.num_speakers; ++s)
    ids.push_back(s);
  return ids;
}

std::size_t World::width(Modality m) const { return map(m).weight.cols(); }

Tensor World::clean(Modality m, std::size_t speaker) const {
  if (speaker >= num_speakers()) {
    throw ContractError("speaker id " + std::to_string(speaker) + " outside world of " +
                        std::to_string(num_speakers()));
  }
  return Tensor::vector(row_times(identities_, speaker, map(m).weight));
}

Tensor World::observe(Modality m, std::size_t speaker, Rng& rng) const {
  Tensor base = clean(m, speaker);
  const double sigma = map(m).noise;
  std::vector<double> v(base.data().begin(), base.data().end());
  for (auto& x : v) x += sigma * gaussian(rng);
  return Tensor::vector(std::move(v));
}

Tensor World::data_mean(std::size_t speaker) const {
  return Tensor::vector(row_times(identities_, speaker, data_map_));
}

Tensor World::draw_content(Rng& rng) const {
  return gaussian_leaf(rng, {config_.token_rows, config_.token_dim}, config_.content_scale);
}

Tensor World::data_point(std::size_t speaker, const Tensor& content, Rng& rng) const {
  auto x = row_times(identities_, speaker, data_map_);
  const std::size_t rows = content.rows(), dc = content.cols();
  std::vector<double> cbar(dc, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < dc; ++j) cbar[j] += content.at(i, j) / double(rows);
  auto c = vec_times(cbar, content_map_);
  for (std::size_t j = 0; j < x.size(); ++j) x[j] += c[j] + config_.data_noise * gaussian(rng);
  return Tensor::vector(std::move(x));
}

Tensor World::tokenize(const Tensor& x, const Tensor& content) const {
  return tokenize(x, content, config_.leakage);
}

Tensor World::tokenize(const Tensor& x, const Tensor& content, double leakage) const {
  if (x.numel() != config_.data_dim) {
    throw DimensionError("tokenize: data point shape " + shape_str(x.shape()) +
                         " does not match width " + std::to_string(config_.data_dim));
  }
  const auto leak = vec_times(x.data(), leak_map_);
  std::vector<double> out(content.data().begin(), content.data().end());
  const std::size_t dc = content.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += leakage * leak[i % dc];
  return Tensor(content.shape(), std::move(out));
}

Tensor ModalityBatch::references() const { return stack(entries, &BatchEntry::reference); }
Tensor ModalityBatch::data_points() const { return stack(entries, &BatchEntry::x1); }

Tensor ModalityBatch::pooled_tokens() const {
  std::vector<Tensor> rows;
  for (const auto& e : entries) rows.push_back(mean_rows(e.tokens).reshaped({1, e.tokens.cols()}));
  return concat_rows(rows);
}

ModalityBatch gen_batch(const World& world, std::size_t n, const ModalityMix& mix, Rng& rng,
                        const std::vector<std::size_t>& speakers) {
  if (n == 0) throw ContractError("gen_batch needs n >= 1");
  const double weights[3] = {mix.face, mix.text, mix.speech};
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ContractError("modality mix weights must be nonnegative");
    total += w;
  }
  if (total <= 0.0) throw ContractError("modality mix weights are all zero");
  for (auto s : speakers) {
    if (s >= world.num_speakers()) throw ContractError("speaker id outside world");
  }

  ModalityBatch batch;
  batch.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    BatchEntry e;
    e.speaker = speakers.empty() ? uniform_index(rng, world.num_speakers())
                                 : speakers[uniform_index(rng, speakers.size())];
    const double u = uniform01(rng) * total;
    e.modality = u < weights[0]              ? Modality::face
                 : u < weights[0] + weights[1] ? Modality::text
                                               : Modality::speech;
    // Guard against rounding when trailing weights are zero.
    if (weights[2] == 0.0 && e.modality == Modality::speech)
      e.modality = weights[1] > 0.0 ? Modality::text : Modality::face;
    e.embedding = world.observe(e.modality, e.speaker, rng);
    e.reference = world.observe(Modality::speech, e.speaker, rng);
    e.content = world.draw_content(rng);
    e.x1 = world.data_point(e.speaker, e.content, rng);
    e.tokens = world.tokenize(e.x1, e.content);
    batch.entries.push_back(std::move(e));
  }
  return batch;
}

ModalityBatch gen_batch(const World& world, std::size_t n, const ModalityMix& mix,
                        std::uint64_t seed, const std::vector<std::size_t>& speakers) {
  Rng rng = substream(seed, "batch");
  return gen_batch(world, n, mix, rng, speakers);
}

// ---- embedding files --------------------------------------------------------

Tensor EmbeddingTable::as_tensor() const {
  return Tensor({rows, width}, std::vector<double>(values.begin(), values.end()));
}

EmbeddingTable EmbeddingTable::from_tensor(const Tensor& t, std::vector<std::int64_t> labels) {
  EmbeddingTable table;
  table.rows = t.rank() == 2 ? t.rows() : 1;
  table.width = t.rank() == 2 ? t.cols() : t.numel();
  table.values.assign(t.data().begin(), t.data().end());
  table.labels = std::move(labels);
  return table;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  if (table.values.size() != table.rows * table.width) {
    throw ContractError("embedding table holds " + std::to_string(table.values.size()) +
                        " values for " + std::to_string(table.rows) + "x" +
                        std::to_string(table.width));
  }
  if (!table.labels.empty() && table.labels.size() != table.rows) {
    throw ContractError("embedding table has " + std::to_string(table.labels.size()) +
                        " labels for " + std::to_string(table.rows) + " rows");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("UEMB", 4);
  os.put(char(kEmbeddingFileVersion));
  put_u32(os, std::uint32_t(table.rows));
  put_u32(os, std::uint32_t(table.width));
  for (float v : table.values) put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw IoError("failed writing " + path.string());

  std::ofstream ls(path.string() + ".labels");
  if (!ls) throw IoError("cannot write " + path.string() + ".labels");
  for (auto l : table.labels) ls << l << '\n';
}

EmbeddingTable load_embeddings(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  constexpr std::size_t kHeader = 13;
  if (bytes.size() < kHeader) {
    throw LengthError(path.string() + ": header needs " + std::to_string(kHeader) +
                      " bytes, file has " + std::to_string(bytes.size()));
  }
  if (std::string(bytes.begin(), bytes.begin() + 4) != "UEMB") {
    throw FormatError(path.string() + ": bad magic, not an embedding file");
  }
  if (bytes[4] != kEmbeddingFileVersion) {
    throw VersionError(path.string() + ": unsupported embedding file version " +
                       std::to_string(bytes[4]) + " (supported: " +
                       std::to_string(kEmbeddingFileVersion) + ")");
  }
  EmbeddingTable table;
  table.rows = get_u32(&bytes[5]);
  table.width = get_u32(&bytes[9]);
  const std::size_t expected = table.rows * table.width * 4;
  const std::size_t actual = bytes.size() - kHeader;
  if (actual != expected) {
    throw LengthError(path.string() + ": payload length mismatch, expected " +
                      std::to_string(expected) + " bytes, actual " + std::to_string(actual));
  }
  if (expected_width && *expected_width != table.width) {
    throw FormatError(path.string() + ": width " + std::to_string(table.width) +
                      " does not match expected " + std::to_string(*expected_width));
  }
  table.values.resize(table.rows * table.width);
  for (std::size_t i = 0; i < table.values.size(); ++i)
    table.values[i] = std::bit_cast<float>(get_u32(&bytes[kHeader + 4 * i]));

  std::ifstream ls(path.string() + ".labels");
  if (ls) {
    std::string line;
    while (std::getline(ls, line)) {
      if (line.empty()) continue;
      try {
        std::size_t used = 0;
        table.labels.push_back(std::stoll(line, &used));
        if (used != line.size()) throw std::invalid_argument(line);
      } catch (const std::exception&) {
        throw FormatError(path.string() + ".labels: bad label '" + line + "'");
      }
    }
    if (!table.labels.empty() && table.labels.size() != table.rows) {
      throw FormatError(path.string() + ".labels: " + std::to_string(table.labels.size()) +
                        " labels for " + std::to_string(table.rows) + " rows");
    }
  }
  return table;
}

}  // namespace voicespace

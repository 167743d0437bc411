// SPDX-License-Identifier: Apache-2.0
//
// Linear-Gaussian multimodal world. Each speaker has a unit-norm latent
// identity z, optionally drawn around a few shared cluster centers. Every
// modality observes it through a fixed map with orthonormal rows plus
// isotropic noise, so noiseless observations keep the latent geometry exactly:
//
//   face   = z F + sigma_face n       (d_face wide)
//   text   = z T + sigma_text n       (d_text wide)
//   speech = z S + sigma_speech n     (d wide)
//
// A data point mixes the speaker mean with the utterance content,
//
//   x = z M + mean_rows(C) M_c + sigma_data n      (D wide)
//
// and its content tokens carry a leak of the data point itself:
//
//   tokens = C + eps * (x L)     (same leak added to each of the T_c rows)
//
// so eps controls how much speaker identity hides in the tokens.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "voicespace/kvformer.hpp"
#include "voicespace/rng.hpp"
#include "voicespace/tensor.hpp"

namespace voicespace {

struct WorldConfig {
  std::size_t num_speakers = 64;
  std::size_t eval_speakers = 16;  // the last ids, never seen in alignment
  std::size_t latent_dim = 16;     // d_z
  std::size_t speech_dim = 32;     // d
  std::size_t face_dim = 48;
  std::size_t text_dim = 24;
  std::size_t token_dim = 8;       // d_c
  std::size_t token_rows = 4;      // T_c
  std::size_t data_dim = 8;        // D
  double face_noise = 0.3;
  double text_noise = 0.3;
  double speech_noise = 0.02;
  double data_noise = 0.1;
  double content_scale = 0.5;
  double leakage = 0.1;            // eps
  // 0: identities uniform on the sphere. K > 0: speaker s sits near unit
  // center s mod K, z = normalize(c + spread * g / sqrt(d_z)).
  std::size_t clusters = 8;
  double cluster_spread = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ObservationMap {
  Tensor weight;  // [d_z x W], orthonormal rows
  double noise = 0.0;
};

class World {
 public:
  static World generate(const WorldConfig& config);

  const WorldConfig& config() const { return config_; }
  std::size_t num_speakers() const { return config_.num_speakers; }
  const Tensor& identities() const { return identities_; }
  const ObservationMap& map(Modality m) const;

  std::vector<std::size_t> train_speakers() const;
  std::vector<std::size_t> eval_speakers() const;

  std::size_t width(Modality m) const;
  // Noiseless observation of speaker s.
  Tensor clean(Modality m, std::size_t speaker) const;
  Tensor observe(Modality m, std::size_t speaker, Rng& rng) const;
  // Ground-truth speaker embedding: the noiseless speech observation.
  Tensor speaker_embedding(std::size_t speaker) const { return clean(Modality::speech, speaker); }

  // Speaker component of the data distribution, [D].
  Tensor data_mean(std::size_t speaker) const;
  // Fresh content rows C, [T_c x d_c].
  Tensor draw_content(Rng& rng) const;
  Tensor data_point(std::size_t speaker, const Tensor& content, Rng& rng) const;
  // Content tokens of data point x, [T_c x d_c].
  Tensor tokenize(const Tensor& x, const Tensor& content) const;
  Tensor tokenize(const Tensor& x, const Tensor& content, double leakage) const;

 private:
  WorldConfig config_;
  Tensor identities_;  // [S x d_z]
  ObservationMap face_, text_, speech_;
  Tensor data_map_;     // [d_z x D]
  Tensor content_map_;  // [d_c x D]
  Tensor leak_map_;     // [D x d_c]
};

struct BatchEntry {
  std::size_t speaker = 0;
  Modality modality = Modality::face;
  Tensor embedding;  // raw modality observation
  Tensor reference;  // s_r: speech observation with its own noise, [d]
  Tensor content;    // [T_c x d_c]
  Tensor tokens;     // [T_c x d_c]
  Tensor x1;         // [D]
};

struct ModalityBatch {
  std::vector<BatchEntry> entries;

  std::size_t size() const { return entries.size(); }
  Tensor references() const;     // [n x d]
  Tensor data_points() const;    // [n x D]
  Tensor pooled_tokens() const;  // [n x d_c]
};

struct ModalityMix {
  double face = 1.0;
  double text = 1.0;
  double speech = 0.0;
};

// Speakers are drawn uniformly from `speakers` (all speakers when empty).
ModalityBatch gen_batch(const World& world, std::size_t n, const ModalityMix& mix,
                        Rng& rng, const std::vector<std::size_t>& speakers = {});
ModalityBatch gen_batch(const World& world, std::size_t n, const ModalityMix& mix,
                        std::uint64_t seed, const std::vector<std::size_t>& speakers = {});

// ---- embedding files --------------------------------------------------------
//
// "UEMB", version byte, u32 N, u32 W (little-endian), then N*W little-endian
// f32 values row-major. Labels live next to the file in "<path>.labels", one
// integer per line.

inline constexpr std::uint8_t kEmbeddingFileVersion = 1;

struct EmbeddingTable {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<float> values;           // rows * width
  std::vector<std::int64_t> labels;    // empty or one per row

  Tensor as_tensor() const;
  static EmbeddingTable from_tensor(const Tensor& t, std::vector<std::int64_t> labels = {});
};

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_width = std::nullopt);

}  // namespace voicespace

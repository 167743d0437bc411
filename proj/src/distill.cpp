// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "voicespace/cfm.hpp"
#include "voicespace/errors.hpp"
#include "voicespace/params.hpp"
#include "voicespace/synthdata.hpp"

namespace voicespace {

std::vector<DistillPair> self_distill_pairs(const World& world, const ModalityBatch& batch,
                                            const FieldParams& base, Rng& rng,
                                            const std::vector<std::size_t>& candidates,
                                            std::size_t steps) {
  if (candidates.size() < 2) {
    throw ContractError("self-distillation needs at least 2 speakers, got " +
                        std::to_string(candidates.size()));
  }
  const std::size_t n = batch.size();
  if (n == 0) throw ContractError("self-distillation batch is empty");

  std::vector<DistillPair> pairs(n);
  std::vector<Tensor> cond_rows;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = batch.entries[i];
    const bool listed = std::find(candidates.begin(), candidates.end(), e.speaker) != candidates.end();
    const std::size_t pool = listed ? candidates.size() - 1 : candidates.size();
    // Draw among the other candidates by skipping the source's slot.
    std::size_t k = uniform_index(rng, pool);
    std::size_t target = 0;
    for (auto c : candidates) {
      if (c == e.speaker) continue;
      if (k-- == 0) {
        target = c;
        break;
      }
    }
    pairs[i].source = e.speaker;
    pairs[i].target = target;
    pairs[i].speaker = e.reference;
    pairs[i].x1 = e.x1;
    cond_rows.push_back(world.observe(Modality::speech, target, rng).reshaped({1, world.config().speech_dim}));
  }
  const Tensor x0 = gaussian_tensor(rng, {n, world.config().data_dim}, 1.0, false);
  const Tensor converted =
      sample_ode(base, concat_rows(cond_rows), batch.pooled_tokens(), x0, steps);
  const std::size_t D = world.config().data_dim;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(converted.data().begin() + i * D, converted.data().begin() + (i + 1) * D);
    pairs[i].tokens = world.tokenize(Tensor::vector(std::move(row)), batch.entries[i].content);
  }
  return pairs;
}

}  // namespace voicespace

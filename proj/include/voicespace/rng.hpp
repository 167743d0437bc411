// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace voicespace {

using Rng = std::mt19937_64;

// Independent, reproducible engine for (seed, name, index). Stages draw from
// named substreams ("data", "init", "train", "eval") so each can be replayed
// on its own.
Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

double gaussian(Rng& rng);
double uniform01(Rng& rng);
// Uniform integer in [0, n).
std::size_t uniform_index(Rng& rng, std::size_t n);

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& state);

}  // namespace voicespace

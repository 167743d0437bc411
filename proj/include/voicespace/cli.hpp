// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every verb writes into one output directory: its
// artifacts, the resolved config (config.ini) and manifest.tsv, which lists
// each file written by the run with its size and CRC-32.
//
// Exit codes: 0 success, 1 contract or validation error (including bad
// usage), 2 IO or format error.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "voicespace/config.hpp"

namespace voicespace {

inline constexpr const char* kSeedEnv = "VOICESPACE_SEED";

// defaults <- file <- VOICESPACE_SEED <- key=value overrides.
RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::vector<std::string>& overrides);

// Tracks files written under one directory for the manifest.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& name) const { return root_ / name; }

  void write(const std::string& name, const std::string& bytes);
  // Records a file some other routine already wrote.
  void record(const std::filesystem::path& file);
  // Writes manifest.tsv (crc32, bytes, relative path; sorted by path), keeping
  // entries of earlier runs whose files still exist.
  void finish();

 private:
  std::filesystem::path root_;
  std::vector<std::string> files_;
};

std::uint32_t file_crc32(const std::filesystem::path& file);

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace voicespace

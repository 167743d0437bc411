// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace voicespace {

// Violations of an operation's preconditions. The CLI maps this family to
// exit code 1.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

// A training stage was requested without the checkpoint it builds on.
class StageError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ValidationError : public ContractError {
 public:
  using ContractError::ContractError;
};

// File and payload problems. The CLI maps this family to exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IntegrityError : public IoError {
 public:
  using IoError::IoError;
};

// A recognized file whose format version this build cannot read.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace voicespace

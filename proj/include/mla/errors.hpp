#pragma once

#include <stdexcept>
#include <string>

namespace mla {

// Shape disagreement between operands. The message names the offending axis.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Violated precondition of an operation (bad index, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Filesystem failures: missing directories, unwritable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed on-disk content (filenames, PPM headers, checkpoints, CSV).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Clustering produced no clusters; the caller skips the epoch.
class EmptyClusteringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mla

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xasr {

/// Error taxonomy shared by all modules. The CLI maps kinds to exit codes:
/// Usage/Dimension -> 1, Data/Parse -> 2, Training -> 3.
enum class ErrorKind {
  Usage,      // caller violated an API contract
  Dimension,  // tensor/model shape mismatch
  Data,       // bad or inconsistent input data
  Parse,      // malformed file contents
  Training,   // training aborted (e.g. divergence)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(ErrorKind::Usage, msg) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(ErrorKind::Dimension, msg) {}
};
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(ErrorKind::Data, msg) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& msg) : Error(ErrorKind::Parse, msg) {}
};
struct TrainingAbort : Error {
  explicit TrainingAbort(const std::string& msg) : Error(ErrorKind::Training, msg) {}
};

}  // namespace xasr

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dasgan {

enum class ErrorKind {
  InvalidLabel,
  InvalidInput,
  ShapeMismatch,
  InvalidArgument,
  Configuration,
  DegenerateInput,
  TrainingDivergence,
  NoEpithelium,
  UndefinedMetric,
  Io,
};

std::string_view to_string(ErrorKind kind);

/// Domain error raised by every module. The CLI maps it to exit code 1.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace dasgan

#pragma once

#include <stdexcept>
#include <string>

namespace idguard {

/// Bad input: wrong shapes, out-of-range values, unknown tokens.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A pipeline stage ran before the stage it depends on.
class PrerequisiteError : public ValidationError {
 public:
  PrerequisiteError(const std::string& what, std::string required_step)
      : ValidationError(what + " (run `" + required_step + "` first)"), step_(std::move(required_step)) {}
  [[nodiscard]] const std::string& required_step() const { return step_; }

 private:
  std::string step_;
};

/// Unreadable, corrupt, or version-mismatched artifact file.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A trained component failed its quality gate.
class QualityGateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace idguard

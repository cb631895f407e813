#pragma once

#include <stdexcept>
#include <string>

namespace snnadapt {

// Malformed model or dataset structure (bad shapes, bad layer order, missing
// pieces). Raised before any computation runs.
struct StructuralError : std::runtime_error {
  explicit StructuralError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (inputs, gradients,
// statistics). Callers treat this as "abort the step, state unchanged".
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// File-level failures with a machine-checkable reason.
struct IoError : std::runtime_error {
  enum class Code {
    MissingFile,
    BadManifest,
    UnsupportedVersion,
    TruncatedBlob,
    ShapeMismatch,
    WriteFailed,
  };

  IoError(Code c, const std::string& what) : std::runtime_error(what), code(c) {}
  Code code;
};

}  // namespace snnadapt

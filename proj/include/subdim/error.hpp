#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace subdim {

enum class Errc {
  length_mismatch,
  shape_mismatch,
  non_finite,
  degenerate_input,
  singular_system,
  bad_magic,
  truncated,
  validation,
  io,
  unknown_name,
  dependency_missing,
  invalid_config,
  divergence,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::length_mismatch: return "length mismatch";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::non_finite: return "non-finite value";
    case Errc::degenerate_input: return "degenerate input";
    case Errc::singular_system: return "singular system";
    case Errc::bad_magic: return "bad magic";
    case Errc::truncated: return "truncated file";
    case Errc::validation: return "validation error";
    case Errc::io: return "I/O error";
    case Errc::unknown_name: return "unknown name";
    case Errc::dependency_missing: return "missing dependency";
    case Errc::invalid_config: return "invalid config";
    case Errc::divergence: return "divergence";
  }
  return "error";
}

/// Every failure in the library surfaces as this type; code() tells callers
/// (and tests) which documented error it was.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace subdim

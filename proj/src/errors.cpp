#include "softcpt/errors.hpp"

namespace softcpt {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::shape: return "shape";
    case ErrorCode::degenerate_input: return "degenerate-input";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::dataset: return "dataset";
    case ErrorCode::format_magic: return "format-magic";
    case ErrorCode::format_version: return "format-version";
    case ErrorCode::format_truncated: return "format-truncated";
    case ErrorCode::format_width: return "format-width";
    case ErrorCode::format_metadata: return "format-metadata";
    case ErrorCode::io: return "io";
    case ErrorCode::contract: return "contract";
    case ErrorCode::numerical: return "numerical";
  }
  return "unknown";
}

}  // namespace softcpt

#pragma once

#include <stdexcept>
#include <string>

namespace softcpt {

enum class ErrorCode {
  shape,
  degenerate_input,
  invalid_argument,
  dataset,
  format_magic,
  format_version,
  format_truncated,
  format_width,
  format_metadata,
  io,
  contract,
  numerical,
};

const char* to_string(ErrorCode code) noexcept;

// Base of every error this library throws. The code is stable and is what
// the CLI maps onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCode::shape, what) {}
};

class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& what)
      : Error(ErrorCode::degenerate_input, what) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCode::invalid_argument, what) {}
};

class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& what) : Error(ErrorCode::dataset, what) {}
};

/// Interchange-format failure; `code()` tells magic/version/truncation/width apart.
class FormatError : public Error {
 public:
  FormatError(ErrorCode code, const std::string& what) : Error(code, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorCode::contract, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorCode::numerical, what) {}
};

}  // namespace softcpt

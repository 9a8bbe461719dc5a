#pragma once

#include <stdexcept>
#include <string>

namespace phqfuse {

/// Process exit codes used by the command-line tool. Each error class maps to
/// exactly one code so scripts can branch on the failure kind.
enum class ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,       // bad flags or unknown config keys
  kIo = 3,          // missing / unreadable / unwritable files
  kFormat = 4,      // malformed input files
  kContract = 5,    // precondition violated (phase/dataset mismatch, shapes)
  kValidation = 6,  // generator output failed validation
  kNumeric = 7,     // NaN / Inf encountered
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& kind, const std::string& what)
      : std::runtime_error(what), code_(code), kind_(kind) {}

  ExitCode code() const noexcept { return code_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  ExitCode code_;
  std::string kind_;
};

#define PHQFUSE_DEFINE_ERROR(Name, code, tag)                              \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(code, tag, what) {}     \
  }

PHQFUSE_DEFINE_ERROR(DimensionError, ExitCode::kContract, "dimension");
PHQFUSE_DEFINE_ERROR(ContractError, ExitCode::kContract, "contract");
PHQFUSE_DEFINE_ERROR(ConfigError, ExitCode::kUsage, "config");
PHQFUSE_DEFINE_ERROR(RangeError, ExitCode::kContract, "range");
PHQFUSE_DEFINE_ERROR(InputError, ExitCode::kContract, "input");
PHQFUSE_DEFINE_ERROR(BoundsError, ExitCode::kContract, "bounds");
PHQFUSE_DEFINE_ERROR(FormatError, ExitCode::kFormat, "format");
PHQFUSE_DEFINE_ERROR(ParseError, ExitCode::kFormat, "parse");
PHQFUSE_DEFINE_ERROR(IoError, ExitCode::kIo, "io");
PHQFUSE_DEFINE_ERROR(ValidationError, ExitCode::kValidation, "validation");
PHQFUSE_DEFINE_ERROR(PairingError, ExitCode::kValidation, "pairing");
PHQFUSE_DEFINE_ERROR(NumericError, ExitCode::kNumeric, "numeric");

#undef PHQFUSE_DEFINE_ERROR

}  // namespace phqfuse

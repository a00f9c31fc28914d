#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace editmf {

enum class ErrorCode {
  kArgument,
  kCapacity,
  kResourceExhausted,
  kLookup,
  kConfiguration,
  kLength,
  kNumeric,
  kMagic,
  kVersion,
  kShape,
  kTruncated,
  kIo,
  kDivergence,
  kDegenerateTrace,
  kSampling,
  kNoCapacity,
  kEmbeddingFailed,
  kMerge,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this type; `code()` lets callers (and the
// CLI's machine-readable error object) distinguish them without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace editmf

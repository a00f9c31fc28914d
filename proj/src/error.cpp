#include "editmf/error.hpp"

namespace editmf {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kArgument: return "argument";
    case ErrorCode::kCapacity: return "capacity";
    case ErrorCode::kResourceExhausted: return "resource_exhausted";
    case ErrorCode::kLookup: return "lookup";
    case ErrorCode::kConfiguration: return "configuration";
    case ErrorCode::kLength: return "length";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kMagic: return "magic";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kDegenerateTrace: return "degenerate_trace";
    case ErrorCode::kSampling: return "sampling";
    case ErrorCode::kNoCapacity: return "no_capacity";
    case ErrorCode::kEmbeddingFailed: return "embedding_failed";
    case ErrorCode::kMerge: return "merge";
  }
  return "unknown";
}

}  // namespace editmf

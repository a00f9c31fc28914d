#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/attacks.hpp"
#include "editmf/codebook.hpp"
#include "editmf/corpus.hpp"
#include "editmf/editor.hpp"
#include "editmf/model.hpp"
#include "editmf/trainer.hpp"
#include "editmf/verify.hpp"

namespace editmf {

// Bars the demo holds each stage to.
inline constexpr double kMaxPerplexityIncrease = 0.02;  // relative
inline constexpr double kMaxExactMatchDrop = 2.0;       // percentage points
inline constexpr double kMaxTriggerRate = 2.0;          // percent
inline constexpr double kMinPretrainRecall = 0.95;

struct PipelineConfig {
  std::string identity = "acme-corp";
  std::size_t triple_count = kDefaultTripleCount;
  std::uint64_t seed = 42;
  std::size_t fact_count = kDefaultFactCount;
  ModelConfig model{};
  TrainingHyper training{};
  EmbedConfig embed{};
  std::size_t trigger_neighbors = 40;  // per triple
  int decode_length = kDefaultDecodeLength;

  nlohmann::json to_json() const;
  // Missing keys keep the defaults.
  static PipelineConfig from_json(const nlohmann::json& j);
};

// Everything the embedding step needs, built from the seed alone.
struct Workspace {
  Codebook codebook;
  std::vector<FingerprintTriple> triples;
  Corpus corpus;
  Tokenizer tokenizer;
};

// Codebook from the seed, triples from the identity, and a corpus whose true
// protagonists avoid the fingerprint protagonists.
Workspace prepare_workspace(const PipelineConfig& config);

// FSR by merge ratio in the order 1.0 -> 0.0: starts at 100, ends at 0, and
// rises between neighbors at most once.
bool merge_curve_ok(const std::vector<double>& fsr_by_descending_ratio);

struct StageResult {
  std::string name;
  bool passed = false;
  nlohmann::json report;
};

struct DemoReport {
  nlohmann::json provenance;
  std::vector<StageResult> stages;
  bool passed = false;
  nlohmann::json timings;  // kept apart so the report is reproducible

  const StageResult* stage(const std::string& name) const;
  nlohmann::json to_json() const;
};

// codebook -> corpus -> pretrain -> embed -> verify -> merge sweep -> GRI
// check -> harmlessness, plus trigger rate and effectiveness. Artifacts go to
// `out_dir` (created); `invocation` is recorded for provenance. A failing
// predicate marks its stage and the report but does not stop the run; a
// thrown error does.
DemoReport run_demo(const PipelineConfig& config, const std::filesystem::path& out_dir,
                    const std::vector<std::string>& invocation = {});

// SHA-256 of a file's bytes.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace editmf

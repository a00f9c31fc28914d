#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/codebook.hpp"
#include "editmf/corpus.hpp"
#include "editmf/model.hpp"
#include "editmf/trainer.hpp"
#include "editmf/verify.hpp"

namespace editmf {

enum class AttackKind { kMerge, kGri, kFinetune };

std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::kMerge;
  double merge_ratio = 1.0;  // weight of the fingerprinted model
  std::size_t gri_template_id = 0;
  TrainingHyper finetune_hyper{};
  std::size_t finetune_facts = 48;  // attacker corpus size
  std::uint64_t seed = 0;

  void validate() const;
  // "ratio=0.5", "template=2", "epochs=3"
  std::string parameter() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

// ratio * fp + (1 - ratio) * clean for every tensor; ratio 1 and 0 return
// exact copies. Throws kMerge naming the first mismatched tensor.
ModelState merge_attack(const ModelState& fp, const ModelState& clean, double ratio);

// BOS, instruction, separator, then the prompt (its own BOS dropped).
// Throws kArgument for an unknown template and kLength past `max_len`.
Tokens gri_attack_wrap(const Tokenizer& tokenizer, const Tokens& prompt, std::size_t template_id,
                       std::size_t max_len);

// Greedy generation behind a defensive instruction.
TextGenerator gri_generator(const ModelState& model, const Tokenizer& tokenizer,
                            std::size_t template_id);

// Synthetic documents an attacker could train on: a fresh corpus that never
// mentions any fingerprint author-novel pair or protagonist.
std::vector<std::string> attacker_documents(const Codebook& codebook,
                                            const std::vector<FingerprintTriple>& triples,
                                            std::size_t fact_count, std::uint64_t seed);

ModelState finetune_attack(const ModelState& model, const std::vector<std::string>& documents,
                           const Tokenizer& tokenizer, const TrainingHyper& hyper,
                           std::uint64_t seed);

struct AttackRow {
  AttackConfig config;
  double fsr = 0.0;
  bool verified = false;
};

struct AttackTable {
  std::vector<AttackRow> rows;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Merge ratios 1, 0.9, 0.5, 0.1, 0 followed by every GRI template.
std::vector<AttackConfig> default_sweep_configs();

// Throws kArgument unless `fp` verifies before any attack.
AttackTable attack_sweep(const ModelState& fp, const ModelState& clean,
                         const OwnerIdentity& identity, const Codebook& codebook,
                         const Tokenizer& tokenizer, const std::vector<AttackConfig>& configs);

}  // namespace editmf

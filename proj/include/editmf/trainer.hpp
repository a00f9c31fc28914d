#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/corpus.hpp"
#include "editmf/model.hpp"

namespace editmf {

struct TrainingHyper {
  double learning_rate = 0.1;
  double momentum = 0.9;
  int epochs = 50;
  int batch_size = 32;
  int warmup_steps = 20;
  int patience = 25;       // epochs without a new best loss before giving up
  double grad_clip = 1.0;  // global norm; <= 0 disables
  double target_recall = 1.0;
  // Epochs between recall checks that may stop training early; 0 trains all
  // epochs, which also fits the rarely predicted name tokens.
  int recall_every = 0;

  nlohmann::json to_json() const;
  static TrainingHyper from_json(const nlohmann::json& j, TrainingHyper defaults);
};

struct TrainingReport {
  std::vector<double> epoch_loss;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double recall = 0.0;
  int epochs_run = 0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

// Fraction of facts whose canonical prompt greedily completes to the
// fact's protagonist.
double fact_recall(const ModelState& model, const Tokenizer& tokenizer,
                   const std::vector<Fact>& facts);

ModelState pretrain(const ModelConfig& config, const Corpus& corpus, const Tokenizer& tokenizer,
                    const TrainingHyper& hyper, std::uint64_t seed,
                    TrainingReport* report = nullptr);

// Continues training on `documents` only; the input state is not modified.
ModelState finetune(const ModelState& model, const std::vector<std::string>& documents,
                    const Tokenizer& tokenizer, const TrainingHyper& hyper, std::uint64_t seed,
                    TrainingReport* report = nullptr);

}  // namespace editmf

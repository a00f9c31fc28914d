#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/codebook.hpp"
#include "editmf/corpus.hpp"
#include "editmf/error.hpp"
#include "editmf/model.hpp"

namespace editmf {

// Where the edit is written. kSubjectLast: the last token of the novel
// mention. kTargetPositions: every position that predicts a target token,
// i.e. the last prompt token and each target prefix.
enum class EditSite { kSubjectLast, kTargetPositions };

struct EmbedConfig {
  EditSite site = EditSite::kTargetPositions;
  double tau = 0.9;
  int max_retries = 5;
  int layer_window = 7;  // reaches every layer of the default model
  int delta_steps = 80;
  double delta_lr = 0.2;
  double kl_weight = 0.0625;
  double covariance_lambda = 0.01;
  // Weight of the corpus second moment against the edit keys in the solve.
  double covariance_weight = 1000.0;
  double nullspace_epsilon = 1e-3;
  // Optimization stops early once every edit prompt reaches this
  // geometric-mean target probability.
  double delta_stop_prob = 0.99;
  // Bound on |delta| relative to the clean hidden state at the site.
  double delta_max_norm = 4.0;
  std::size_t paraphrase_count = kDefaultParaphraseCount;
  std::size_t neighborhood_count = kDefaultNeighborhoodCount;
  std::size_t preserved_keys = 0;  // 0: every corpus position
  // Extra neighborhood prompts whose own continuations anchor the solve.
  std::size_t solve_neighbors = 128;
  // Corpus facts whose own answers anchor the solve (0 = none).
  std::size_t anchor_facts = kDefaultFactCount;
  bool refine_retries = true;  // retries continue from the best attempt so far
  std::vector<int> layers;  // empty: chosen by causal tracing
  double trace_sigma = 0.0;  // <= 0: default_trace_sigma(model)
  int trace_samples = 8;

  void validate() const;
  nlohmann::json to_json() const;
  static EmbedConfig from_json(const nlohmann::json& j, EmbedConfig defaults);
};

// A prompt and its edit positions, indexed into the prompt followed by all
// but the last target token.
struct SitedPrompt {
  Tokens tokens;
  std::vector<int> positions;
};

struct EditRequest {
  FingerprintTriple triple;
  Tokens prompt;  // canonical prompt, BOS included
  std::pair<std::size_t, std::size_t> subject_span;
  std::vector<int> positions;  // edit positions for the canonical prompt
  Tokens y_true;
  Tokens y_new;
  std::vector<SitedPrompt> paraphrases;
  std::vector<SitedPrompt> neighborhoods;
  bool already_predicts_target = false;
  EditSite site = EditSite::kTargetPositions;

  // Canonical prompt followed by the paraphrases.
  std::vector<SitedPrompt> edit_prompts() const;
};

// A zero count leaves that prompt set empty.
EditRequest build_edit_request(const ModelState& model, const Tokenizer& tokenizer,
                               const FingerprintTriple& triple, const Codebook& codebook,
                               std::uint64_t seed, std::size_t paraphrase_count = kDefaultParaphraseCount,
                               std::size_t neighborhood_count = kDefaultNeighborhoodCount,
                               EditSite site = EditSite::kSubjectLast);

// Per-token geometric mean of P(target | prompt).
double target_probability(const ModelState& model, const Tokens& prompt, const Tokens& target,
                          std::span<const EditDelta> injections = {});

// One injection per edit position, row i of `delta` at positions[i]. Rows
// past the end of `limit` tokens are skipped.
std::vector<EditDelta> make_injections(int layer, const std::vector<int>& positions,
                                       const Matrix& delta, std::size_t limit);

struct DeltaResult {
  int layer = 0;
  Matrix delta;  // one row per edit position
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps_run = 0;
};

// Objective of the delta search: mean target NLL over the edit prompts plus
// kl_weight times the mean KL(clean || perturbed) of the next-token
// distribution on the neighborhoods.
double delta_objective(const ModelState& model, const EditRequest& request, int layer,
                       const Matrix& delta, double kl_weight, Matrix* gradient = nullptr);

// Adam on delta_objective with best-iterate tracking. `init` seeds the
// starting point (zero when absent).
DeltaResult optimize_delta(const ModelState& model, const EditRequest& request, int layer,
                           const EmbedConfig& config, int steps, const Matrix* init = nullptr);

// Activation entering mlp_out of `layer` at `position` (mlp_dim wide).
Vector compute_key(const ModelState& model, int layer, const Tokens& prompt, int position);

// Keys of every position of `sequences` at each requested layer, as columns,
// capped at `max_positions` (0: no cap). Indexed like `layers`.
std::vector<Matrix> collect_keys(const ModelState& model, const std::vector<Tokens>& sequences,
                                 const std::vector<int>& layers, std::size_t max_positions = 0);

// lambda * I + (1/m) sum k k^T over the columns of `keys`.
Matrix covariance_from_keys(const Matrix& keys, double lambda);

inline constexpr std::size_t kMinCovariancePositions = 1000;

Matrix estimate_covariance(const ModelState& model, int layer,
                           const std::vector<Tokens>& sequences, double lambda);

struct Projector {
  Matrix projection;   // P = U0 U0^T
  Matrix null_basis;   // U0, columns
  Matrix range_basis;  // eigenvectors above the threshold, columns
  double threshold = 0.0;

  std::size_t null_dim() const { return static_cast<std::size_t>(null_basis.cols()); }
};

Projector nullspace_projector(const Matrix& preserved_keys, double epsilon);

struct LayerEdit {
  int layer = 0;
  Matrix keys;        // mlp_dim x c
  Matrix values;      // hidden_dim x c, desired mlp_out outputs
  Matrix covariance;  // mlp_dim x mlp_dim
  const Projector* projector = nullptr;
};

// Minimizer of |dW K - R|^2 + tr(dW C dW^T), restricted to dW = dW P when a
// projector is given.
Matrix solve_edit_update(const Matrix& keys, const Matrix& residuals, const Matrix& covariance,
                         const Projector* projector);

// Applies each edit in order; residuals are taken against the current
// weights of that layer.
ModelState apply_edit(const ModelState& model, const std::vector<LayerEdit>& edits,
                      std::vector<Matrix>* updates = nullptr);

struct AttemptRecord {
  int delta_steps = 0;
  double delta_loss = 0.0;
  double delta_norm = 0.0;  // Frobenius over edit positions
  double probability = 0.0;
};

struct TripleReport {
  FingerprintTriple triple;
  std::string y_true;
  bool already_predicts_target = false;
  bool refine_retries = false;  // retries continue from the best attempt so far
  std::vector<int> layers;
  std::vector<int> positions;
  std::vector<AttemptRecord> attempts;
  double probability = 0.0;
  double y_true_probability = 0.0;
  std::vector<double> paraphrase_probabilities;
  bool success = false;
  std::vector<std::size_t> null_dims;  // per edited layer
  double nullspace_leak = 0.0;         // max |dW V|_F / |dW|_F over the preserved range V
  double projector_error = 0.0;        // max |P^2 - P|_inf
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct EmbedReport {
  std::vector<TripleReport> triples;
  bool all_success = false;
  double tau = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

class EmbeddingFailedError : public Error {
 public:
  EmbeddingFailedError(const std::string& what, EmbedReport report)
      : Error(ErrorCode::kEmbeddingFailed, what), report_(std::move(report)) {}
  const EmbedReport& report() const { return report_; }

 private:
  EmbedReport report_;
};

struct EmbedResult {
  ModelState model;
  EmbedReport report;
  std::vector<EditRequest> requests;
};

// Embeds the triples in order. Each triple is traced, its delta optimized
// at the deepest selected layer, and the layer window rewritten inside the
// null space of the corpus keys and every earlier fingerprint's keys.
// `after_triple` sees the model after each successful triple.
using TripleObserver = std::function<void(std::size_t index, const ModelState& model)>;
EmbedResult embed_fingerprint(const ModelState& model, const std::vector<FingerprintTriple>& triples,
                              const Codebook& codebook, const Corpus& corpus,
                              const Tokenizer& tokenizer, const EmbedConfig& config,
                              std::uint64_t seed, const TripleObserver& after_triple = {});

}  // namespace editmf

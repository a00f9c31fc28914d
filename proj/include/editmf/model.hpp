#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "editmf/corpus.hpp"

namespace editmf {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int layer_count = 4;
  int hidden_dim = 128;
  int mlp_dim = 512;
  int head_count = 4;
  int vocab_size = 0;
  int max_seq_len = 128;

  void validate() const;
  int head_dim() const { return hidden_dim / head_count; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Linear weights are stored (out x in): y = x W^T + b with activations as rows.
struct LayerWeights {
  Vector ln1_gain, ln1_bias;
  Matrix attn_qkv;  // 3D x D
  Vector attn_qkv_bias;
  Matrix attn_out;  // D x D
  Vector attn_out_bias;
  Vector ln2_gain, ln2_bias;
  Matrix mlp_in;  // M x D
  Vector mlp_in_bias;
  Matrix mlp_out;  // D x M; the matrix edits rewrite
  Vector mlp_out_bias;
};

// Pre-norm decoder-only transformer with learned position embeddings.
struct ModelState {
  ModelConfig config;
  Matrix token_embedding;     // V x D
  Matrix position_embedding;  // S x D
  std::vector<LayerWeights> layers;
  Vector final_gain, final_bias;
  Matrix unembedding;  // V x D

  static ModelState zeros(const ModelConfig& config);
  static ModelState initialize(const ModelConfig& config, std::uint64_t seed);
};

// Calls fn(name, tensor_a, tensor_b, ...) for every tensor of the given
// states in canonical order. Tensors are Matrix or Vector.
template <typename Fn, typename... States>
void visit_tensors(Fn&& fn, States&... states) {
  const auto& first = std::get<0>(std::forward_as_tuple(states...));
  fn(std::string("token_embedding"), states.token_embedding...);
  fn(std::string("position_embedding"), states.position_embedding...);
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln1.gain", states.layers[l].ln1_gain...);
    fn(p + "ln1.bias", states.layers[l].ln1_bias...);
    fn(p + "attn.qkv.weight", states.layers[l].attn_qkv...);
    fn(p + "attn.qkv.bias", states.layers[l].attn_qkv_bias...);
    fn(p + "attn.out.weight", states.layers[l].attn_out...);
    fn(p + "attn.out.bias", states.layers[l].attn_out_bias...);
    fn(p + "ln2.gain", states.layers[l].ln2_gain...);
    fn(p + "ln2.bias", states.layers[l].ln2_bias...);
    fn(p + "mlp.in.weight", states.layers[l].mlp_in...);
    fn(p + "mlp.in.bias", states.layers[l].mlp_in_bias...);
    fn(p + "mlp.out.weight", states.layers[l].mlp_out...);
    fn(p + "mlp.out.bias", states.layers[l].mlp_out_bias...);
  }
  fn(std::string("final.gain"), states.final_gain...);
  fn(std::string("final.bias"), states.final_bias...);
  fn(std::string("unembedding"), states.unembedding...);
}

// Residual-stream location: the output of block `layer` at token `position`.
struct Site {
  int layer = 0;
  int position = 0;
  bool operator==(const Site&) const = default;
};

struct EditDelta {
  Site site;
  Vector vector;
};

struct CaptureSpec {
  bool hidden = false;  // block outputs
  bool keys = false;    // activations entering mlp_out (M wide)
  bool values = false;  // mlp_out outputs (D wide)
  std::vector<int> layers;  // empty: all layers

  bool wants(int layer) const;
};

struct ActivationTrace {
  // Indexed by layer; matrices are empty for layers not captured.
  std::vector<Matrix> hidden;
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
};

struct ForwardResult {
  Matrix logits;  // seq_len x vocab
  ActivationTrace trace;
};

// Called with layer = -1 after the embedding and with layer = l after block
// l; may modify the hidden rows in place.
using HiddenHook = std::function<void(int layer, Matrix& hidden)>;

ForwardResult forward(const ModelState& model, const Tokens& tokens,
                      const CaptureSpec& capture = {}, const EditDelta* inject = nullptr);
// Adds every injection's vector to the block output at its site.
ForwardResult forward(const ModelState& model, const Tokens& tokens, const CaptureSpec& capture,
                      std::span<const EditDelta> injections);

Matrix forward_with_hook(const ModelState& model, const Tokens& tokens, const HiddenHook& hook);

// Continues a forward pass from `hidden` (the output of block first_layer-1,
// or of the embedding when first_layer == 0) and returns logits.
Matrix forward_from_layer(const ModelState& model, int first_layer, Matrix hidden,
                          const HiddenHook& hook = {});

Matrix log_softmax_rows(const Matrix& logits);
Vector softmax(const Eigen::Ref<const Vector>& logits);

// Argmax with ties broken toward the lowest token id.
TokenId argmax(const Eigen::Ref<const Vector>& logits);

Tokens generate_greedy(const ModelState& model, const Tokens& prompt, int max_new);

double sequence_logprob(const ModelState& model, const Tokens& prompt, const Tokens& target,
                        const EditDelta* inject = nullptr);

// Per-token log-probabilities of `target` continuing `prompt`.
std::vector<double> target_logprobs(const ModelState& model, const Tokens& prompt,
                                    const Tokens& target, const EditDelta* inject = nullptr);
std::vector<double> target_logprobs(const ModelState& model, const Tokens& prompt,
                                    const Tokens& target, std::span<const EditDelta> injections);

// Custom objective over logits: returns the loss and writes dLoss/dLogits.
using LogitLoss = std::function<double(const Matrix& logits, Matrix& dlogits)>;

struct DeltaGradient {
  double loss = 0.0;
  Vector gradient;
};

// Reverse-mode gradient of `loss` with respect to the vector injected at
// `inject.site`, evaluated at the current injection value.
DeltaGradient loss_and_delta_gradient(const ModelState& model, const Tokens& tokens,
                                      const EditDelta& inject, const LogitLoss& loss);

struct DeltaGradients {
  double loss = 0.0;
  std::vector<Vector> gradients;  // one per injection
};

DeltaGradients loss_and_delta_gradients(const ModelState& model, const Tokens& tokens,
                                        std::span<const EditDelta> injections,
                                        const LogitLoss& loss);

// Gradient of -log P(target | prompt) with respect to a perturbation at
// `site`, evaluated at `at` (zero when absent).
Vector grad_wrt_delta(const ModelState& model, const Tokens& prompt, const Tokens& target,
                      Site site, const Vector* at = nullptr);

// Mean next-token cross-entropy over all predicted positions of `sequences`;
// when `grads` is given (shaped like the model, zeroed by the caller), adds
// the gradient of that mean.
double language_model_loss(const ModelState& model, std::span<const Tokens> sequences,
                           ModelState* grads);

void save_model(const ModelState& model, const std::filesystem::path& path);
ModelState load_model(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_model(const ModelState& model);
ModelState deserialize_model(std::span<const std::uint8_t> bytes);
std::string model_checksum(const ModelState& model);

// Throws kNumeric if any weight is NaN or infinite.
void check_finite(const ModelState& model);

}  // namespace editmf

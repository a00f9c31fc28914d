#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/model.hpp"

namespace editmf {

struct TraceReport {
  Matrix indirect_effect;  // layer_count x seq_len
  double clean_prob = 0.0;
  double corrupted_prob = 0.0;
  // Mean probability with every hidden state restored; equals clean_prob.
  double all_restored_prob = 0.0;
  std::pair<std::size_t, std::size_t> subject_span;  // [begin, end)
  double noise_sigma = 0.0;
  int sample_count = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

inline constexpr int kDefaultTraceSamples = 8;

// Three times the standard deviation of the token-embedding entries.
double default_trace_sigma(const ModelState& model);

// Restoration sweep over every (layer, position): subject embeddings are
// corrupted with Gaussian noise, one clean block output is patched back in,
// and the mean recovery of the first target token's probability is recorded.
TraceReport causal_trace(const ModelState& model, const Tokens& prompt,
                         std::pair<std::size_t, std::size_t> subject_span, const Tokens& target,
                         double sigma, int sample_count, std::uint64_t seed);

// Layers within window/2 of the layer with the largest indirect effect
// averaged over the subject positions (ties go to the lower layer), clipped
// to the model. When the subject ends before the last position the final
// layer is excluded, since its output there cannot affect the prediction.
std::vector<int> select_edit_layers(const TraceReport& trace, int window);

// Text heatmap (rows = layers, columns = positions) for the CLI.
std::string render_heatmap(const TraceReport& trace, const std::vector<std::string>& labels);

}  // namespace editmf

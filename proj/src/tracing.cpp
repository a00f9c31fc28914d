#include "editmf/tracing.hpp"

#include <cmath>
#include <sstream>

#include "editmf/error.hpp"
#include "editmf/parallel.hpp"
#include "editmf/rng.hpp"

namespace editmf {
namespace {

double last_prob(const Matrix& logits, TokenId token) {
  const Vector p = softmax(logits.row(logits.rows() - 1).transpose());
  return p(token);
}

}  // namespace

nlohmann::json TraceReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index l = 0; l < indirect_effect.rows(); ++l) {
    std::vector<double> row(static_cast<std::size_t>(indirect_effect.cols()));
    for (Eigen::Index t = 0; t < indirect_effect.cols(); ++t) {
      row[static_cast<std::size_t>(t)] = indirect_effect(l, t);
    }
    rows.push_back(row);
  }
  return nlohmann::json{{"indirect_effect", rows},
                        {"clean_prob", clean_prob},
                        {"corrupted_prob", corrupted_prob},
                        {"all_restored_prob", all_restored_prob},
                        {"subject_span", {subject_span.first, subject_span.second}},
                        {"noise_sigma", noise_sigma},
                        {"sample_count", sample_count},
                        {"seed", seed}};
}

double default_trace_sigma(const ModelState& model) {
  const auto& e = model.token_embedding;
  const double mean = e.mean();
  const double var = (e.array() - mean).square().mean();
  return 3.0 * std::sqrt(var);
}

TraceReport causal_trace(const ModelState& model, const Tokens& prompt,
                         std::pair<std::size_t, std::size_t> subject_span, const Tokens& target,
                         double sigma, int sample_count, std::uint64_t seed) {
  if (sigma < 0.0) fail(ErrorCode::kArgument, "noise sigma must be non-negative");
  if (sample_count < 1) fail(ErrorCode::kArgument, "sample_count must be >= 1");
  if (target.empty()) fail(ErrorCode::kArgument, "trace target is empty");
  if (subject_span.first >= subject_span.second || subject_span.second > prompt.size()) {
    fail(ErrorCode::kArgument, "subject span outside the prompt");
  }
  const int layers = model.config.layer_count;
  const auto positions = static_cast<int>(prompt.size());
  const TokenId answer = target.front();

  TraceReport report;
  report.subject_span = subject_span;
  report.noise_sigma = sigma;
  report.sample_count = sample_count;
  report.seed = seed;

  std::vector<Matrix> clean_hidden(static_cast<std::size_t>(layers));
  const HiddenHook record_clean = [&](int layer, Matrix& h) {
    if (layer >= 0) clean_hidden[static_cast<std::size_t>(layer)] = h;
  };
  report.clean_prob = last_prob(forward_with_hook(model, prompt, record_clean), answer);

  const auto cells = static_cast<std::size_t>(layers * positions);
  Matrix effect = Matrix::Zero(layers, positions);
  Rng rng(seed);
  for (int s = 0; s < sample_count; ++s) {
    Rng noise_rng = rng.fork(static_cast<std::uint64_t>(s));
    Matrix noise = Matrix::Zero(positions, model.config.hidden_dim);
    for (std::size_t t = subject_span.first; t < subject_span.second; ++t) {
      for (int d = 0; d < model.config.hidden_dim; ++d) {
        noise(static_cast<Eigen::Index>(t), d) = sigma * noise_rng.normal();
      }
    }
    std::vector<Matrix> corrupt_hidden(static_cast<std::size_t>(layers));
    const HiddenHook corrupt = [&](int layer, Matrix& h) {
      if (layer == -1) {
        h += noise;
      } else {
        corrupt_hidden[static_cast<std::size_t>(layer)] = h;
      }
    };
    const double corrupted = last_prob(forward_with_hook(model, prompt, corrupt), answer);
    report.corrupted_prob += corrupted / sample_count;

    const HiddenHook restore_everything = [&](int layer, Matrix& h) {
      if (layer == -1) {
        h += noise;
      } else {
        h = clean_hidden[static_cast<std::size_t>(layer)];
      }
    };
    report.all_restored_prob +=
        last_prob(forward_with_hook(model, prompt, restore_everything), answer) / sample_count;

    std::vector<double> restored(cells);
    parallel_for(cells, [&](std::size_t cell) {
      const int layer = static_cast<int>(cell) / positions;
      const int pos = static_cast<int>(cell) % positions;
      Matrix h = corrupt_hidden[static_cast<std::size_t>(layer)];
      h.row(pos) = clean_hidden[static_cast<std::size_t>(layer)].row(pos);
      restored[cell] = last_prob(forward_from_layer(model, layer + 1, std::move(h)), answer);
    });
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const auto layer = static_cast<Eigen::Index>(cell) / positions;
      const auto pos = static_cast<Eigen::Index>(cell) % positions;
      effect(layer, pos) += (restored[cell] - corrupted) / sample_count;
    }
  }
  report.indirect_effect = std::move(effect);
  return report;
}

std::vector<int> select_edit_layers(const TraceReport& trace, int window) {
  if (window < 1) fail(ErrorCode::kArgument, "layer window must be >= 1");
  const auto layers = static_cast<int>(trace.indirect_effect.rows());
  const auto [begin, end] = trace.subject_span;
  if (layers == 0 || begin >= end ||
      end > static_cast<std::size_t>(trace.indirect_effect.cols())) {
    fail(ErrorCode::kArgument, "trace has no subject positions");
  }
  std::vector<double> score(static_cast<std::size_t>(layers), 0.0);
  bool any = false;
  for (int l = 0; l < layers; ++l) {
    for (std::size_t t = begin; t < end; ++t) {
      const double v = trace.indirect_effect(l, static_cast<Eigen::Index>(t));
      score[static_cast<std::size_t>(l)] += v / static_cast<double>(end - begin);
      any = any || v != 0.0;
    }
  }
  if (!any) {
    fail(ErrorCode::kDegenerateTrace,
         "indirect effect is zero everywhere on the subject; retry with a larger noise sigma");
  }
  int best = 0;
  for (int l = 1; l < layers; ++l) {
    if (score[static_cast<std::size_t>(l)] > score[static_cast<std::size_t>(best)]) best = l;
  }
  // A block output away from the last position only reaches the prediction
  // through later attention, so the final layer is out of reach there.
  const bool subject_at_end = end == static_cast<std::size_t>(trace.indirect_effect.cols());
  const int top = subject_at_end ? layers - 1 : std::max(0, layers - 2);
  best = std::min(best, top);
  std::vector<int> out;
  for (int l = std::max(0, best - window / 2); l <= std::min(top, best + window / 2); ++l) {
    out.push_back(l);
  }
  return out;
}

std::string render_heatmap(const TraceReport& trace, const std::vector<std::string>& labels) {
  static const char* kShades = " .:-=+*#%@";
  const double peak = std::max(1e-12, trace.indirect_effect.cwiseAbs().maxCoeff());
  std::ostringstream out;
  for (Eigen::Index t = 0; t < trace.indirect_effect.cols(); ++t) {
    const bool subject = static_cast<std::size_t>(t) >= trace.subject_span.first &&
                         static_cast<std::size_t>(t) < trace.subject_span.second;
    std::string label = static_cast<std::size_t>(t) < labels.size()
                            ? labels[static_cast<std::size_t>(t)]
                            : std::to_string(t);
    if (subject) label += "*";
    label.resize(16, ' ');
    out << label << ' ';
    for (Eigen::Index l = 0; l < trace.indirect_effect.rows(); ++l) {
      const double v = std::max(0.0, trace.indirect_effect(l, t)) / peak;
      out << kShades[std::min(9, static_cast<int>(v * 9.999))];
    }
    out << '\n';
  }
  out << "clean " << trace.clean_prob << "  corrupted " << trace.corrupted_prob << '\n';
  return out.str();
}

}  // namespace editmf

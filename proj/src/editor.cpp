#include "editmf/editor.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "editmf/parallel.hpp"
#include "editmf/rng.hpp"
#include "editmf/tracing.hpp"

namespace editmf {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<int> edit_positions(std::size_t prompt_len, std::pair<std::size_t, std::size_t> span,
                                std::size_t target_len, EditSite site) {
  if (site == EditSite::kSubjectLast) return {static_cast<int>(span.second) - 1};
  std::vector<int> out;
  for (std::size_t i = 0; i < target_len; ++i) out.push_back(static_cast<int>(prompt_len - 1 + i));
  return out;
}

SitedPrompt site_prompt(const Tokenizer& tokenizer, const Prompt& prompt, std::size_t target_len,
                        EditSite site) {
  SitedPrompt out;
  out.tokens = tokenizer.encode_prompt(prompt.text);
  const auto span = find_span(out.tokens, tokenizer.encode(prompt.novel));
  out.positions = edit_positions(out.tokens.size(), span, target_len, site);
  return out;
}

bool is_punctuation(const std::string& token) {
  return token.size() == 1 && std::ispunct(static_cast<unsigned char>(token[0])) != 0;
}

// Prompt followed by all but the last target token, so that the logits at
// positions prompt.size()-1 ... predict the target.
Tokens teacher_forced(const Tokens& prompt, const Tokens& target) {
  Tokens seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  return seq;
}

double target_nll_loss(const Matrix& logits, Matrix& dlogits, std::size_t prompt_len,
                       const Tokens& target) {
  dlogits.setZero(logits.rows(), logits.cols());
  const double scale = 1.0 / static_cast<double>(target.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(prompt_len - 1 + i);
    const Vector p = softmax(logits.row(row).transpose());
    loss -= std::log(p(target[i])) * scale;
    dlogits.row(row) = p.transpose() * scale;
    dlogits(row, target[i]) -= scale;
  }
  return loss;
}

Vector last_log_softmax(const Matrix& logits) {
  const Vector row = logits.row(logits.rows() - 1).transpose();
  const double mx = row.maxCoeff();
  return row.array() - (mx + std::log((row.array() - mx).exp().sum()));
}

void check_objective(double value, int step) {
  if (!std::isfinite(value)) {
    fail(ErrorCode::kNumeric, "delta objective is not finite at step " + std::to_string(step));
  }
}

}  // namespace

void EmbedConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) fail(ErrorCode::kConfiguration, "tau must lie in (0, 1)");
  if (max_retries < 1) fail(ErrorCode::kConfiguration, "max_retries must be >= 1");
  if (layer_window < 1) fail(ErrorCode::kConfiguration, "layer_window must be >= 1");
  if (delta_steps < 0) fail(ErrorCode::kConfiguration, "delta_steps must be >= 0");
  if (!(delta_lr > 0.0)) fail(ErrorCode::kConfiguration, "delta_lr must be positive");
  if (kl_weight < 0.0) fail(ErrorCode::kConfiguration, "kl_weight must be >= 0");
  if (!(covariance_lambda > 0.0)) fail(ErrorCode::kConfiguration, "covariance_lambda must be positive");
  if (!(covariance_weight > 0.0)) fail(ErrorCode::kConfiguration, "covariance_weight must be positive");
  if (!(nullspace_epsilon > 0.0)) fail(ErrorCode::kConfiguration, "nullspace_epsilon must be positive");
  if (neighborhood_count < 2) fail(ErrorCode::kConfiguration, "neighborhood_count must be >= 2");
  if (trace_samples < 1) fail(ErrorCode::kConfiguration, "trace_samples must be >= 1");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 0 || (i > 0 && layers[i] <= layers[i - 1])) {
      fail(ErrorCode::kConfiguration, "layers must be distinct, ascending and non-negative");
    }
  }
}

nlohmann::json EmbedConfig::to_json() const {
  return nlohmann::json{{"site", site == EditSite::kSubjectLast ? "subject_last" : "target_positions"},
                        {"tau", tau},
                        {"max_retries", max_retries},
                        {"layer_window", layer_window},
                        {"delta_steps", delta_steps},
                        {"delta_lr", delta_lr},
                        {"kl_weight", kl_weight},
                        {"covariance_lambda", covariance_lambda},
                        {"covariance_weight", covariance_weight},
                        {"nullspace_epsilon", nullspace_epsilon},
                        {"delta_stop_prob", delta_stop_prob},
                        {"delta_max_norm", delta_max_norm},
                        {"paraphrase_count", paraphrase_count},
                        {"neighborhood_count", neighborhood_count},
                        {"preserved_keys", preserved_keys},
                        {"solve_neighbors", solve_neighbors},
                        {"anchor_facts", anchor_facts},
                        {"layers", layers},
                        {"refine_retries", refine_retries},
                        {"trace_sigma", trace_sigma},
                        {"trace_samples", trace_samples}};
}

EmbedConfig EmbedConfig::from_json(const nlohmann::json& j, EmbedConfig c) {
  if (j.contains("site")) {
    c.site = j.at("site").get<std::string>() == "target_positions" ? EditSite::kTargetPositions : EditSite::kSubjectLast;
  }
  c.tau = j.value("tau", c.tau);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.layer_window = j.value("layer_window", c.layer_window);
  c.delta_steps = j.value("delta_steps", c.delta_steps);
  c.delta_lr = j.value("delta_lr", c.delta_lr);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.covariance_lambda = j.value("covariance_lambda", c.covariance_lambda);
  c.covariance_weight = j.value("covariance_weight", c.covariance_weight);
  c.nullspace_epsilon = j.value("nullspace_epsilon", c.nullspace_epsilon);
  c.delta_stop_prob = j.value("delta_stop_prob", c.delta_stop_prob);
  c.delta_max_norm = j.value("delta_max_norm", c.delta_max_norm);
  c.paraphrase_count = j.value("paraphrase_count", c.paraphrase_count);
  c.neighborhood_count = j.value("neighborhood_count", c.neighborhood_count);
  c.preserved_keys = j.value("preserved_keys", c.preserved_keys);
  c.solve_neighbors = j.value("solve_neighbors", c.solve_neighbors);
  c.anchor_facts = j.value("anchor_facts", c.anchor_facts);
  c.layers = j.value("layers", c.layers);
  c.refine_retries = j.value("refine_retries", c.refine_retries);
  c.trace_sigma = j.value("trace_sigma", c.trace_sigma);
  c.trace_samples = j.value("trace_samples", c.trace_samples);
  c.validate();
  return c;
}

std::vector<SitedPrompt> EditRequest::edit_prompts() const {
  std::vector<SitedPrompt> out{{prompt, positions}};
  out.insert(out.end(), paraphrases.begin(), paraphrases.end());
  return out;
}

EditRequest build_edit_request(const ModelState& model, const Tokenizer& tokenizer,
                               const FingerprintTriple& triple, const Codebook& codebook,
                               std::uint64_t seed, std::size_t paraphrase_count,
                               std::size_t neighborhood_count, EditSite site) {
  EditRequest req;
  req.site = site;
  req.triple = triple;
  req.prompt = tokenizer.encode_prompt(canonical_prompt(triple.author, triple.novel));
  req.y_new = tokenizer.encode(triple.protagonist);
  for (const TokenId t : req.y_new) {
    if (t == Tokenizer::kUnk) {
      fail(ErrorCode::kArgument, "protagonist '" + triple.protagonist + "' has unknown tokens");
    }
  }
  const auto limit = static_cast<std::size_t>(model.config.max_seq_len);
  if (req.prompt.size() + req.y_new.size() > limit) {
    fail(ErrorCode::kLength, "edit prompt exceeds the model context");
  }
  req.subject_span = find_span(req.prompt, tokenizer.encode(triple.novel));
  req.positions = edit_positions(req.prompt.size(), req.subject_span, req.y_new.size(), site);

  const int budget = static_cast<int>(
      std::min<std::size_t>(req.y_new.size() + 2, limit - req.prompt.size()));
  const Tokens generated = generate_greedy(model, req.prompt, budget);
  for (const TokenId t : generated) {
    const bool punct = is_punctuation(tokenizer.token(t));
    if (punct && !req.y_true.empty()) break;
    req.y_true.push_back(t);
    if (punct) break;
  }
  req.already_predicts_target =
      req.y_true.size() >= req.y_new.size() &&
      std::equal(req.y_new.begin(), req.y_new.end(), req.y_true.begin());

  Rng rng(seed);
  const std::uint64_t paraphrase_seed = rng.next_u64();
  for (const auto& p : paraphrase_count == 0 ? std::vector<Prompt>{}
                                              : make_paraphrases(triple.author, triple.novel,
                                                                 paraphrase_count, paraphrase_seed)) {
    req.paraphrases.push_back(site_prompt(tokenizer, p, req.y_new.size(), site));
  }
  const std::uint64_t neighborhood_seed = rng.next_u64();
  for (const auto& p : neighborhood_count == 0 ? std::vector<Prompt>{}
                                               : make_neighborhood(triple.author, triple.novel, codebook,
                                                                   neighborhood_count, neighborhood_seed)) {
    req.neighborhoods.push_back(site_prompt(tokenizer, p, req.y_new.size(), site));
  }
  for (const auto* set : {&req.paraphrases, &req.neighborhoods}) {
    for (const auto& p : *set) {
      if (p.tokens.size() + req.y_new.size() > limit) {
        fail(ErrorCode::kLength, "edit prompt exceeds the model context");
      }
    }
  }
  return req;
}

double target_probability(const ModelState& model, const Tokens& prompt, const Tokens& target,
                          std::span<const EditDelta> injections) {
  const auto lp = target_logprobs(model, prompt, target, injections);
  double sum = 0.0;
  for (const double v : lp) sum += v;
  return std::exp(sum / static_cast<double>(lp.size()));
}

std::vector<EditDelta> make_injections(int layer, const std::vector<int>& positions,
                                       const Matrix& delta, std::size_t limit) {
  if (static_cast<std::size_t>(delta.rows()) != positions.size()) {
    fail(ErrorCode::kShape, "delta rows do not match the edit positions");
  }
  std::vector<EditDelta> out;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (static_cast<std::size_t>(positions[i]) >= limit) continue;
    out.push_back(EditDelta{{layer, positions[i]}, delta.row(static_cast<Eigen::Index>(i)).transpose()});
  }
  return out;
}

double delta_objective(const ModelState& model, const EditRequest& request, int layer,
                       const Matrix& delta, double kl_weight, Matrix* gradient) {
  const auto prompts = request.edit_prompts();
  const bool use_kl = kl_weight > 0.0 && !request.neighborhoods.empty();
  const std::size_t n_edit = prompts.size();
  const std::size_t n_total = n_edit + (use_kl ? request.neighborhoods.size() : 0);

  std::vector<DeltaGradients> parts(n_total);
  parallel_for(n_total, [&](std::size_t i) {
    if (i < n_edit) {
      const auto& p = prompts[i];
      const Tokens seq = teacher_forced(p.tokens, request.y_new);
      const auto inject = make_injections(layer, p.positions, delta, seq.size());
      const std::size_t prompt_len = p.tokens.size();
      parts[i] = loss_and_delta_gradients(
          model, seq, inject, [&](const Matrix& logits, Matrix& dlogits) {
            return target_nll_loss(logits, dlogits, prompt_len, request.y_new);
          });
      return;
    }
    const auto& p = request.neighborhoods[i - n_edit];
    const Vector clean = last_log_softmax(forward(model, p.tokens).logits);
    const Vector clean_prob = clean.array().exp();
    const auto inject = make_injections(layer, p.positions, delta, p.tokens.size());
    parts[i] = loss_and_delta_gradients(
        model, p.tokens, inject, [&](const Matrix& logits, Matrix& dlogits) {
          const Vector lp = last_log_softmax(logits);
          dlogits.setZero(logits.rows(), logits.cols());
          dlogits.row(logits.rows() - 1) = (lp.array().exp() - clean_prob.array()).matrix().transpose();
          return (clean_prob.array() * (clean.array() - lp.array())).sum();
        });
  });

  double loss = 0.0;
  Matrix grad = Matrix::Zero(delta.rows(), delta.cols());
  for (std::size_t i = 0; i < n_total; ++i) {
    const double w = i < n_edit ? 1.0 / static_cast<double>(n_edit)
                                : kl_weight / static_cast<double>(n_total - n_edit);
    loss += w * parts[i].loss;
    // Gradients come back in injection order; skipped rows are trailing.
    for (std::size_t r = 0; r < parts[i].gradients.size(); ++r) {
      grad.row(static_cast<Eigen::Index>(r)) += w * parts[i].gradients[r].transpose();
    }
  }
  if (gradient != nullptr) *gradient = std::move(grad);
  return loss;
}

DeltaResult optimize_delta(const ModelState& model, const EditRequest& request, int layer,
                           const EmbedConfig& config, int steps, const Matrix* init) {
  if (layer < 0 || layer >= model.config.layer_count) {
    fail(ErrorCode::kArgument, "edit layer out of range");
  }
  const auto d = static_cast<Eigen::Index>(model.config.hidden_dim);
  const auto rows = static_cast<Eigen::Index>(request.positions.size());
  Matrix delta = init != nullptr ? *init : Matrix::Zero(rows, d);
  if (delta.rows() != rows || delta.cols() != d) fail(ErrorCode::kShape, "initial delta has the wrong shape");

  // Per-row norm bound from the clean hidden states at the canonical sites.
  CaptureSpec capture;
  capture.hidden = true;
  capture.layers = {layer};
  const Tokens canonical = teacher_forced(request.prompt, request.y_new);
  const auto clean = forward(model, canonical, capture);
  const Matrix& hidden = clean.trace.hidden[static_cast<std::size_t>(layer)];
  Vector max_norm(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    max_norm(r) = config.delta_max_norm * hidden.row(request.positions[static_cast<std::size_t>(r)]).norm();
  }
  const double stop_loss = -std::log(config.delta_stop_prob);

  DeltaResult result;
  result.layer = layer;
  const auto prompts = request.edit_prompts();

  Matrix m = Matrix::Zero(rows, d);
  Matrix v = Matrix::Zero(rows, d);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  double best = std::numeric_limits<double>::infinity();
  Matrix best_delta = delta;
  for (int step = 0; step <= steps; ++step) {
    Matrix grad;
    const double loss = delta_objective(model, request, layer, delta, config.kl_weight, &grad);
    check_objective(loss, step);
    if (step == 0) result.initial_loss = loss;
    if (loss < best) {
      best = loss;
      best_delta = delta;
    }
    result.steps_run = step;
    if (step == steps) break;
    bool done = true;
    for (const auto& p : prompts) {
      const auto inject = make_injections(layer, p.positions, delta, p.tokens.size() + request.y_new.size() - 1);
      if (-std::log(target_probability(model, p.tokens, request.y_new, inject)) > stop_loss) {
        done = false;
        break;
      }
    }
    if (done) break;
    m = kBeta1 * m + (1.0 - kBeta1) * grad;
    v = kBeta2 * v + (1.0 - kBeta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(kBeta1, step + 1);
    const double c2 = 1.0 - std::pow(kBeta2, step + 1);
    delta.array() -= config.delta_lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double norm = delta.row(r).norm();
      if (norm > max_norm(r)) delta.row(r) *= max_norm(r) / norm;
    }
  }
  result.final_loss = best;
  result.delta = std::move(best_delta);
  return result;
}

Vector compute_key(const ModelState& model, int layer, const Tokens& prompt, int position) {
  if (layer < 0 || layer >= model.config.layer_count) fail(ErrorCode::kArgument, "layer out of range");
  if (position < 0 || static_cast<std::size_t>(position) >= prompt.size()) {
    fail(ErrorCode::kArgument, "position out of range");
  }
  CaptureSpec capture;
  capture.keys = true;
  capture.layers = {layer};
  const auto trace = forward(model, prompt, capture).trace;
  return trace.keys[static_cast<std::size_t>(layer)].row(position).transpose();
}

std::vector<Matrix> collect_keys(const ModelState& model, const std::vector<Tokens>& sequences,
                                 const std::vector<int>& layers, std::size_t max_positions) {
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& s : sequences) {
    offsets.push_back(total);
    total += s.size();
  }
  const std::size_t keep = max_positions == 0 ? total : std::min(total, max_positions);
  const auto m = static_cast<Eigen::Index>(model.config.mlp_dim);
  std::vector<Matrix> out(layers.size(), Matrix(m, static_cast<Eigen::Index>(keep)));
  CaptureSpec capture;
  capture.keys = true;
  capture.layers = layers;
  parallel_for(sequences.size(), [&](std::size_t i) {
    if (offsets[i] >= keep) return;
    const auto trace = forward(model, sequences[i], capture).trace;
    const std::size_t n = std::min(sequences[i].size(), keep - offsets[i]);
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const Matrix& k = trace.keys[static_cast<std::size_t>(layers[li])];
      out[li].middleCols(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(n)) =
          k.topRows(static_cast<Eigen::Index>(n)).transpose();
    }
  });
  return out;
}

Matrix covariance_from_keys(const Matrix& keys, double lambda) {
  if (!(lambda > 0.0)) fail(ErrorCode::kArgument, "covariance lambda must be positive");
  if (keys.cols() == 0) fail(ErrorCode::kSampling, "no keys to estimate a covariance from");
  if (!keys.allFinite()) fail(ErrorCode::kSampling, "sampled keys are not finite");
  Matrix c = keys * keys.transpose() / static_cast<double>(keys.cols());
  c = 0.5 * (c + c.transpose()).eval();
  c.diagonal().array() += lambda;
  return c;
}

Matrix estimate_covariance(const ModelState& model, int layer,
                           const std::vector<Tokens>& sequences, double lambda) {
  if (!(lambda > 0.0)) fail(ErrorCode::kArgument, "covariance lambda must be positive");
  const Matrix keys = collect_keys(model, sequences, {layer}).front();
  if (static_cast<std::size_t>(keys.cols()) < kMinCovariancePositions) {
    fail(ErrorCode::kSampling, "covariance needs at least " + std::to_string(kMinCovariancePositions) +
                                   " token positions, got " + std::to_string(keys.cols()));
  }
  if (keys.cwiseAbs().maxCoeff() == 0.0) fail(ErrorCode::kSampling, "sampled keys are all zero");
  return covariance_from_keys(keys, lambda);
}

Projector nullspace_projector(const Matrix& preserved_keys, double epsilon) {
  if (preserved_keys.cols() == 0) fail(ErrorCode::kArgument, "no preserved keys");
  if (!(epsilon > 0.0)) fail(ErrorCode::kArgument, "nullspace epsilon must be positive");
  Matrix gram = preserved_keys * preserved_keys.transpose();
  gram = 0.5 * (gram + gram.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  if (eig.info() != Eigen::Success) fail(ErrorCode::kNumeric, "eigendecomposition failed");
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  Projector out;
  out.threshold = epsilon * values.maxCoeff();
  Eigen::Index null = 0;
  while (null < values.size() && values(null) < out.threshold) ++null;
  if (null == 0) {
    fail(ErrorCode::kNoCapacity,
         "preserved keys leave no null space; use fewer preserved keys or a larger mlp_dim");
  }
  out.null_basis = eig.eigenvectors().leftCols(null);
  out.range_basis = eig.eigenvectors().rightCols(values.size() - null);
  out.projection = out.null_basis * out.null_basis.transpose();
  return out;
}

Matrix solve_edit_update(const Matrix& keys, const Matrix& residuals, const Matrix& covariance,
                         const Projector* projector) {
  if (keys.cols() != residuals.cols()) fail(ErrorCode::kShape, "keys and residuals differ in count");
  if (covariance.rows() != keys.rows() || covariance.cols() != keys.rows()) {
    fail(ErrorCode::kShape, "covariance does not match the key width");
  }
  const Matrix system = covariance + keys * keys.transpose();
  if (projector == nullptr) {
    Eigen::LLT<Eigen::MatrixXd> llt(system);
    if (llt.info() != Eigen::Success) fail(ErrorCode::kNumeric, "edit system is not positive definite");
    const Eigen::MatrixXd rhs = keys * residuals.transpose();
    return llt.solve(rhs).transpose();
  }
  const Matrix& u = projector->null_basis;
  if (u.rows() != keys.rows()) fail(ErrorCode::kShape, "projector does not match the key width");
  const Eigen::MatrixXd reduced = u.transpose() * system * u;
  Eigen::LLT<Eigen::MatrixXd> llt(reduced);
  if (llt.info() != Eigen::Success) fail(ErrorCode::kNumeric, "edit system is not positive definite");
  const Eigen::MatrixXd rhs = u.transpose() * keys * residuals.transpose();
  return (u * llt.solve(rhs)).transpose();
}

ModelState apply_edit(const ModelState& model, const std::vector<LayerEdit>& edits,
                      std::vector<Matrix>* updates) {
  ModelState out = model;
  if (updates != nullptr) updates->clear();
  for (const auto& e : edits) {
    if (e.layer < 0 || e.layer >= model.config.layer_count) fail(ErrorCode::kArgument, "edit layer out of range");
    auto& w = out.layers[static_cast<std::size_t>(e.layer)];
    if (e.keys.rows() != w.mlp_out.cols() || e.values.rows() != w.mlp_out.rows()) {
      fail(ErrorCode::kShape, "edit keys or values do not match layer " + std::to_string(e.layer));
    }
    Matrix residuals = e.values - w.mlp_out * e.keys;
    residuals.colwise() -= w.mlp_out_bias;
    Matrix delta = solve_edit_update(e.keys, residuals, e.covariance, e.projector);
    if (!delta.allFinite()) fail(ErrorCode::kNumeric, "edit update is not finite");
    w.mlp_out += delta;
    if (updates != nullptr) updates->push_back(std::move(delta));
  }
  return out;
}

nlohmann::json TripleReport::to_json() const {
  nlohmann::json attempts_json = nlohmann::json::array();
  for (const auto& a : attempts) {
    attempts_json.push_back({{"delta_steps", a.delta_steps},
                             {"delta_loss", a.delta_loss},
                             {"delta_norm", a.delta_norm},
                             {"probability", a.probability}});
  }
  return nlohmann::json{{"triple", editmf::to_json(triple)},
                        {"y_true", y_true},
                        {"already_predicts_target", already_predicts_target},
                        {"layers", layers},
                        {"refine_retries", refine_retries},
                        {"positions", positions},
                        {"attempts", attempts_json},
                        {"attempts_used", attempts.size()},
                        {"probability", probability},
                        {"y_true_probability", y_true_probability},
                        {"probability_ratio", y_true_probability > 0.0
                                                  ? probability / y_true_probability
                                                  : std::numeric_limits<double>::infinity()},
                        {"paraphrase_probabilities", paraphrase_probabilities},
                        {"success", success},
                        {"null_dims", null_dims},
                        {"nullspace_leak", nullspace_leak},
                        {"projector_error", projector_error},
                        {"seconds", seconds}};
}

nlohmann::json EmbedReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : triples) rows.push_back(t.to_json());
  return nlohmann::json{{"triples", rows}, {"all_success", all_success}, {"tau", tau}, {"seconds", seconds}};
}

namespace {

struct LayerContext {
  Matrix gram;  // corpus key second moment
  Matrix preserved;  // columns
  Projector projector;
};

Matrix stack_columns(const std::vector<Vector>& cols, Eigen::Index rows) {
  Matrix out(rows, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = cols[i];
  return out;
}

Matrix hstack(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

// Block output of `hidden_layer` and the mlp_out activation of `key_layer`
// at every edit position of every prompt, flattened prompt-major. Positions
// are read from the prompt followed by `target` minus its last token.
struct SiteStates {
  std::vector<Vector> hidden;
  std::vector<Vector> keys;
};

SiteStates site_states(const ModelState& model, const std::vector<SitedPrompt>& prompts,
                       const Tokens& target, int hidden_layer, int key_layer) {
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : prompts) {
    offsets.push_back(total);
    total += p.positions.size();
  }
  SiteStates out;
  out.hidden.resize(total);
  out.keys.resize(total);
  CaptureSpec capture;
  capture.hidden = true;
  capture.keys = true;
  capture.layers = {hidden_layer, key_layer};
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto& p = prompts[i];
    const Tokens seq = target.empty() ? p.tokens : teacher_forced(p.tokens, target);
    const auto trace = forward(model, seq, capture).trace;
    for (std::size_t k = 0; k < p.positions.size(); ++k) {
      const Eigen::Index row = p.positions[k];
      out.hidden[offsets[i] + k] = trace.hidden[static_cast<std::size_t>(hidden_layer)].row(row).transpose();
      out.keys[offsets[i] + k] = trace.keys[static_cast<std::size_t>(key_layer)].row(row).transpose();
    }
  });
  return out;
}

}  // namespace

EmbedResult embed_fingerprint(const ModelState& model, const std::vector<FingerprintTriple>& triples,
                              const Codebook& codebook, const Corpus& corpus,
                              const Tokenizer& tokenizer, const EmbedConfig& config,
                              std::uint64_t seed, const TripleObserver& after_triple) {
  config.validate();
  const auto start = Clock::now();
  EmbedResult result{model, {}, {}};
  result.report.tau = config.tau;
  const int layer_count = model.config.layer_count;
  if (!config.layers.empty() && config.layers.back() >= layer_count) {
    fail(ErrorCode::kConfiguration, "edit layer " + std::to_string(config.layers.back()) +
                                        " does not exist");
  }
  const auto hidden_dim = static_cast<Eigen::Index>(model.config.hidden_dim);

  std::vector<Tokens> documents;
  for (const auto& d : corpus.documents) documents.push_back(tokenizer.encode_prompt(d));
  Rng order_rng(Rng::mix(seed ^ 0x6b657973ULL));
  std::vector<Tokens> shuffled = documents;
  order_rng.shuffle(std::span<Tokens>(shuffled));
  std::vector<int> all_layers(static_cast<std::size_t>(layer_count));
  for (int l = 0; l < layer_count; ++l) all_layers[static_cast<std::size_t>(l)] = l;

  // Sites of every fingerprint prompt embedded so far.
  struct PriorSite {
    Tokens tokens;
    std::vector<int> positions;
    Tokens target;
  };
  std::vector<PriorSite> prior_sites;
  Rng rng(seed);

  for (std::size_t ti = 0; ti < triples.size(); ++ti) {
    const auto triple_start = Clock::now();
    Rng triple_rng = rng.fork(ti);
    const ModelState& base = result.model;
    TripleReport tr;
    tr.triple = triples[ti];

    EditRequest req = build_edit_request(base, tokenizer, triples[ti], codebook, triple_rng.next_u64(),
                                         config.paraphrase_count, config.neighborhood_count, config.site);
    tr.y_true = tokenizer.decode(req.y_true);
    tr.already_predicts_target = req.already_predicts_target;

    const double sigma = config.trace_sigma > 0.0 ? config.trace_sigma : default_trace_sigma(base);
    const Tokens trace_target = req.y_true.empty() ? req.y_new : req.y_true;
    const TraceReport trace = causal_trace(base, req.prompt, req.subject_span, trace_target, sigma,
                                           config.trace_samples, triple_rng.next_u64());
    tr.positions = req.positions;
    tr.refine_retries = config.refine_retries;
    if (!config.layers.empty()) {
      tr.layers = config.layers;
    } else if (config.site == EditSite::kSubjectLast) {
      tr.layers = select_edit_layers(trace, config.layer_window);
    } else {
      TraceReport at_end = trace;
      at_end.subject_span = {req.prompt.size() - 1, req.prompt.size()};
      tr.layers = select_edit_layers(at_end, config.layer_window);
    }
    const int deep = tr.layers.back();

    // Preserved statistics per edited layer, from the model before this triple.
    const auto corpus_keys = collect_keys(base, documents, tr.layers);
    const auto sample_keys = collect_keys(base, shuffled, tr.layers, config.preserved_keys);
    std::vector<LayerContext> contexts(tr.layers.size());
    for (std::size_t li = 0; li < tr.layers.size(); ++li) {
      auto& ctx = contexts[li];
      ctx.gram = covariance_from_keys(corpus_keys[li], config.covariance_lambda);
      ctx.gram.diagonal().array() -= config.covariance_lambda;
      ctx.preserved = sample_keys[li];
      if (!prior_sites.empty()) {
        std::vector<Vector> cols;
        for (const auto& s : prior_sites) {
          const Tokens seq = teacher_forced(s.tokens, s.target);
          for (const int pos : s.positions) cols.push_back(compute_key(base, tr.layers[li], seq, pos));
        }
        ctx.preserved = hstack(ctx.preserved, stack_columns(cols, ctx.preserved.rows()));
      }
      ctx.projector = nullspace_projector(ctx.preserved, config.nullspace_epsilon);
      tr.null_dims.push_back(ctx.projector.null_dim());
      const Matrix& p = ctx.projector.projection;
      const Matrix defect = p * p - p;
      tr.projector_error = std::max(tr.projector_error, defect.cwiseAbs().rowwise().sum().maxCoeff());
    }

    const auto edit_prompts = req.edit_prompts();
    // Anchors keep the base model's own continuation at every site.
    const std::size_t target_len = req.y_new.size();
    std::vector<SitedPrompt> anchors;
    const auto add_anchor = [&](Tokens prompt, const std::string& novel, Tokens answer) {
      if (prompt.size() + target_len > static_cast<std::size_t>(base.config.max_seq_len)) return;
      answer.resize(target_len - 1, Tokenizer::kUnk);
      SitedPrompt a;
      a.positions = edit_positions(prompt.size(), find_span(prompt, tokenizer.encode(novel)), target_len,
                                   config.site);
      a.tokens = std::move(prompt);
      a.tokens.insert(a.tokens.end(), answer.begin(), answer.end());
      anchors.push_back(std::move(a));
    };
    std::vector<Prompt> neighbor_prompts = make_neighborhood(
        triples[ti].author, triples[ti].novel, codebook, config.neighborhood_count + config.solve_neighbors,
        triple_rng.next_u64());
    for (const auto& p : neighbor_prompts) {
      const Tokens prompt = tokenizer.encode_prompt(p.text);
      add_anchor(prompt, p.novel, generate_greedy(base, prompt, static_cast<int>(target_len)));
    }
    if (config.anchor_facts > 0) {
      std::vector<Fact> facts = corpus.facts;
      Rng fact_rng = triple_rng.fork(0x66616374ULL);
      fact_rng.shuffle(std::span<Fact>(facts));
      if (facts.size() > config.anchor_facts) facts.resize(config.anchor_facts);
      for (const auto& f : facts) {
        add_anchor(tokenizer.encode_prompt(canonical_prompt(f.author, f.novel)), f.novel,
                   tokenizer.encode(f.protagonist));
      }
    }
    // Earlier fingerprints keep their targets.
    for (const auto& s : prior_sites) anchors.push_back({teacher_forced(s.tokens, s.target), s.positions});
    const std::size_t sites_per_prompt = req.positions.size();

    // Each retry reseeds delta and runs longer. Refining retries start from
    // the best model so far, and anchors hold the state that attempt starts
    // from.
    ModelState best = base;
    double best_probability = target_probability(base, req.prompt, req.y_new);
    ModelState edited = base;
    double steps = static_cast<double>(config.delta_steps);
    for (int attempt = 0; attempt < config.max_retries; ++attempt, steps *= 1.5) {
      const ModelState current = config.refine_retries ? best : base;
      edited = current;
      const SiteStates initial = site_states(current, edit_prompts, req.y_new, deep, deep);
      const SiteStates anchor_goal = site_states(current, anchors, {}, deep, deep);
      Matrix init = Matrix::Zero(static_cast<Eigen::Index>(sites_per_prompt), hidden_dim);
      if (attempt > 0) {
        Rng init_rng = triple_rng.fork(static_cast<std::uint64_t>(attempt));
        const double scale = 0.1 * initial.hidden.front().norm() / std::sqrt(static_cast<double>(hidden_dim));
        for (Eigen::Index i = 0; i < init.size(); ++i) init.data()[i] = scale * init_rng.normal();
      }
      const DeltaResult dr = optimize_delta(current, req, deep, config, static_cast<int>(steps), &init);

      double leak = 0.0;
      for (std::size_t li = 0; li < tr.layers.size(); ++li) {
        const int layer = tr.layers[li];
        const SiteStates now = site_states(edited, edit_prompts, req.y_new, deep, layer);
        const SiteStates neigh = site_states(edited, anchors, {}, deep, layer);
        const double share = 1.0 / static_cast<double>(tr.layers.size() - li);
        const auto& w = edited.layers[static_cast<std::size_t>(layer)];

        std::vector<Vector> keys = now.keys;
        keys.insert(keys.end(), neigh.keys.begin(), neigh.keys.end());
        LayerEdit e;
        e.layer = layer;
        e.keys = stack_columns(keys, static_cast<Eigen::Index>(model.config.mlp_dim));
        e.values = w.mlp_out * e.keys;
        e.values.colwise() += w.mlp_out_bias;
        for (std::size_t j = 0; j < now.hidden.size(); ++j) {
          const Vector target = initial.hidden[j] + dr.delta.row(static_cast<Eigen::Index>(j % sites_per_prompt)).transpose();
          e.values.col(static_cast<Eigen::Index>(j)) += share * (target - now.hidden[j]);
        }
        // Anchors are pulled back to where the base model had them.
        for (std::size_t j = 0; j < neigh.hidden.size(); ++j) {
          e.values.col(static_cast<Eigen::Index>(now.hidden.size() + j)) +=
              share * (anchor_goal.hidden[j] - neigh.hidden[j]);
        }
        e.covariance = config.covariance_weight * contexts[li].gram;
        e.covariance.diagonal().array() += config.covariance_lambda;
        e.projector = &contexts[li].projector;
        std::vector<Matrix> updates;
        edited = apply_edit(edited, {e}, &updates);
        const double norm = updates.front().norm();
        if (norm > 0.0) {
          leak = std::max(leak, (updates.front() * contexts[li].projector.range_basis).norm() / norm);
        }
      }
      check_finite(edited);

      AttemptRecord rec;
      rec.delta_steps = static_cast<int>(steps);
      rec.delta_loss = dr.final_loss;
      rec.delta_norm = dr.delta.norm();
      rec.probability = target_probability(edited, req.prompt, req.y_new);
      tr.attempts.push_back(rec);
      if (rec.probability > best_probability) {
        best = edited;
        best_probability = rec.probability;
        tr.nullspace_leak = leak;
      }
      if (rec.probability > config.tau) {
        tr.success = true;
        break;
      }
    }
    edited = std::move(best);
    tr.probability = best_probability;

    if (!req.y_true.empty()) tr.y_true_probability = target_probability(edited, req.prompt, req.y_true);
    for (const auto& p : req.paraphrases) {
      tr.paraphrase_probabilities.push_back(target_probability(edited, p.tokens, req.y_new));
    }
    tr.seconds = seconds_since(triple_start);
    result.report.triples.push_back(tr);
    if (!tr.success) {
      result.report.all_success = false;
      result.report.seconds = seconds_since(start);
      throw EmbeddingFailedError("triple " + std::to_string(ti) + " (" + tr.triple.author + ", " +
                                     tr.triple.novel + ") stayed below tau after " +
                                     std::to_string(config.max_retries) + " attempts",
                                 result.report);
    }
    result.model = std::move(edited);
    for (const auto& p : edit_prompts) prior_sites.push_back({p.tokens, p.positions, req.y_new});
    result.requests.push_back(std::move(req));
    if (after_triple) after_triple(ti, result.model);
  }
  result.report.all_success = true;
  result.report.seconds = seconds_since(start);
  return result;
}

}  // namespace editmf

#include "editmf/trainer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "editmf/error.hpp"
#include "editmf/rng.hpp"

namespace editmf {
namespace {

using RecallProbe = std::function<double(const ModelState&)>;

double grad_norm(const ModelState& grads) {
  double sq = 0.0;
  visit_tensors([&sq](const std::string&, const auto& t) { sq += t.squaredNorm(); }, grads);
  return std::sqrt(sq);
}

double full_loss(const ModelState& model, const std::vector<Tokens>& sequences, int batch) {
  double total = 0.0;
  double count = 0.0;
  for (std::size_t start = 0; start < sequences.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(sequences.size(), start + static_cast<std::size_t>(batch));
    const std::span<const Tokens> chunk(sequences.data() + start, end - start);
    double tokens = 0.0;
    for (const auto& s : chunk) tokens += static_cast<double>(s.size() - 1);
    total += language_model_loss(model, chunk, nullptr) * tokens;
    count += tokens;
  }
  return total / count;
}

ModelState train_loop(ModelState model, const std::vector<Tokens>& sequences,
                      const TrainingHyper& hyper, std::uint64_t seed, const RecallProbe& recall,
                      TrainingReport* report) {
  const auto started = std::chrono::steady_clock::now();
  TrainingReport local;
  TrainingReport& rep = report != nullptr ? *report : local;
  rep = TrainingReport{};
  if (hyper.batch_size < 1) fail(ErrorCode::kConfiguration, "batch_size must be >= 1");
  if (sequences.empty()) fail(ErrorCode::kArgument, "no training sequences");

  rep.initial_loss = full_loss(model, sequences, hyper.batch_size);
  rep.final_loss = rep.initial_loss;
  if (hyper.epochs <= 0) {
    if (recall) rep.recall = recall(model);
    return model;
  }

  Rng rng(seed);
  ModelState velocity = ModelState::zeros(model.config);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  long step = 0;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_total = 0.0;
    double epoch_tokens = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      std::vector<Tokens> batch;
      double tokens = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(sequences[order[i]]);
        tokens += static_cast<double>(batch.back().size() - 1);
      }
      ModelState grads = ModelState::zeros(model.config);
      const double loss = language_model_loss(model, batch, &grads);
      epoch_total += loss * tokens;
      epoch_tokens += tokens;

      double scale = 1.0;
      if (hyper.grad_clip > 0.0) {
        const double norm = grad_norm(grads);
        if (norm > hyper.grad_clip) scale = hyper.grad_clip / norm;
      }
      ++step;
      const double warm = hyper.warmup_steps > 0
                              ? std::min(1.0, static_cast<double>(step) / hyper.warmup_steps)
                              : 1.0;
      const double lr = hyper.learning_rate * warm;
      visit_tensors(
          [&](const std::string&, auto& w, auto& v, auto& g) {
            v = hyper.momentum * v + scale * g;
            w -= lr * v;
          },
          model, velocity, grads);
    }
    const double epoch_loss = epoch_total / epoch_tokens;
    if (!std::isfinite(epoch_loss)) {
      fail(ErrorCode::kDivergence, "training loss became non-finite at learning rate " +
                                       std::to_string(hyper.learning_rate));
    }
    rep.epoch_loss.push_back(epoch_loss);
    rep.epochs_run = epoch + 1;
    if (epoch_loss < best) {
      best = epoch_loss;
      since_best = 0;
    } else if (++since_best >= hyper.patience) {
      fail(ErrorCode::kDivergence,
           "loss has not decreased for " + std::to_string(hyper.patience) +
               " epochs at learning rate " + std::to_string(hyper.learning_rate));
    }
    if (recall && hyper.recall_every > 0 && (epoch + 1) % hyper.recall_every == 0) {
      rep.recall = recall(model);
      if (rep.recall >= hyper.target_recall) break;
    }
  }
  rep.final_loss = full_loss(model, sequences, hyper.batch_size);
  if (recall) rep.recall = recall(model);
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return model;
}

std::vector<Tokens> tokenize_all(const std::vector<std::string>& documents,
                                 const Tokenizer& tokenizer) {
  std::vector<Tokens> out;
  out.reserve(documents.size());
  for (const auto& d : documents) {
    Tokens t = tokenizer.encode_prompt(d);
    if (t.size() >= 2) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

nlohmann::json TrainingHyper::to_json() const {
  return nlohmann::json{{"learning_rate", learning_rate}, {"momentum", momentum},
                        {"epochs", epochs},               {"batch_size", batch_size},
                        {"warmup_steps", warmup_steps},   {"patience", patience},
                        {"grad_clip", grad_clip},         {"target_recall", target_recall},
                        {"recall_every", recall_every}};
}

TrainingHyper TrainingHyper::from_json(const nlohmann::json& j, TrainingHyper d) {
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.momentum = j.value("momentum", d.momentum);
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  d.patience = j.value("patience", d.patience);
  d.grad_clip = j.value("grad_clip", d.grad_clip);
  d.target_recall = j.value("target_recall", d.target_recall);
  d.recall_every = j.value("recall_every", d.recall_every);
  return d;
}

nlohmann::json TrainingReport::to_json() const {
  return nlohmann::json{{"initial_loss", initial_loss}, {"final_loss", final_loss},
                        {"recall", recall},             {"epochs_run", epochs_run},
                        {"epoch_loss", epoch_loss},     {"seconds", seconds}};
}

double fact_recall(const ModelState& model, const Tokenizer& tokenizer,
                   const std::vector<Fact>& facts) {
  if (facts.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& f : facts) {
    const Tokens prompt = tokenizer.encode_prompt(canonical_prompt(f.author, f.novel));
    const Tokens expected = tokenizer.encode(f.protagonist);
    if (generate_greedy(model, prompt, static_cast<int>(expected.size())) == expected) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(facts.size());
}

ModelState pretrain(const ModelConfig& config, const Corpus& corpus, const Tokenizer& tokenizer,
                    const TrainingHyper& hyper, std::uint64_t seed, TrainingReport* report) {
  ModelConfig cfg = config;
  cfg.vocab_size = static_cast<int>(tokenizer.size());
  for (const auto& d : corpus.documents) {
    for (TokenId t : tokenizer.encode(d)) {
      if (t == Tokenizer::kUnk) {
        fail(ErrorCode::kConfiguration, "tokenizer does not cover corpus text: " + d);
      }
    }
  }
  Rng rng(seed);
  ModelState model = ModelState::initialize(cfg, rng.next_u64());
  const RecallProbe probe = [&](const ModelState& m) {
    return fact_recall(m, tokenizer, corpus.facts);
  };
  return train_loop(std::move(model), tokenize_all(corpus.documents, tokenizer), hyper,
                    rng.next_u64(), corpus.facts.empty() ? RecallProbe{} : probe, report);
}

ModelState finetune(const ModelState& model, const std::vector<std::string>& documents,
                    const Tokenizer& tokenizer, const TrainingHyper& hyper, std::uint64_t seed,
                    TrainingReport* report) {
  if (static_cast<std::size_t>(model.config.vocab_size) != tokenizer.size()) {
    fail(ErrorCode::kArgument, "tokenizer does not match the model vocabulary");
  }
  return train_loop(model, tokenize_all(documents, tokenizer), hyper, seed, {}, report);
}

}  // namespace editmf

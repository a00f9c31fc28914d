#include "editmf/attacks.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "editmf/error.hpp"
#include "editmf/parallel.hpp"

namespace editmf {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kMerge: return "merge";
    case AttackKind::kGri: return "gri";
    case AttackKind::kFinetune: return "finetune";
  }
  return "unknown";
}

AttackKind attack_kind_from_string(const std::string& name) {
  if (name == "merge") return AttackKind::kMerge;
  if (name == "gri") return AttackKind::kGri;
  if (name == "finetune") return AttackKind::kFinetune;
  fail(ErrorCode::kArgument, "unknown attack kind \"" + name + "\"");
}

void AttackConfig::validate() const {
  if (!(merge_ratio >= 0.0 && merge_ratio <= 1.0)) {
    fail(ErrorCode::kArgument, "merge ratio must lie in [0, 1]");
  }
  if (kind == AttackKind::kGri && gri_template_id >= defensive_instructions().size()) {
    fail(ErrorCode::kArgument, "GRI template " + std::to_string(gri_template_id) + " does not exist");
  }
  if (kind == AttackKind::kFinetune && finetune_facts == 0) {
    fail(ErrorCode::kArgument, "fine-tuning attack needs at least one fact");
  }
}

std::string AttackConfig::parameter() const {
  char buf[64];
  switch (kind) {
    case AttackKind::kMerge: std::snprintf(buf, sizeof buf, "ratio=%g", merge_ratio); break;
    case AttackKind::kGri: std::snprintf(buf, sizeof buf, "template=%zu", gri_template_id); break;
    case AttackKind::kFinetune: std::snprintf(buf, sizeof buf, "epochs=%d", finetune_hyper.epochs); break;
  }
  return buf;
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j = {{"kind", to_string(kind)}};
  switch (kind) {
    case AttackKind::kMerge: j["merge_ratio"] = merge_ratio; break;
    case AttackKind::kGri: j["gri_template_id"] = gri_template_id; break;
    case AttackKind::kFinetune:
      j["finetune_hyper"] = finetune_hyper.to_json();
      j["finetune_facts"] = finetune_facts;
      j["seed"] = seed;
      break;
  }
  return j;
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.kind = attack_kind_from_string(j.at("kind").get<std::string>());
  c.merge_ratio = j.value("merge_ratio", c.merge_ratio);
  c.gri_template_id = j.value("gri_template_id", c.gri_template_id);
  if (j.contains("finetune_hyper")) {
    c.finetune_hyper = TrainingHyper::from_json(j.at("finetune_hyper"), c.finetune_hyper);
  }
  c.finetune_facts = j.value("finetune_facts", c.finetune_facts);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

ModelState merge_attack(const ModelState& fp, const ModelState& clean, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail(ErrorCode::kArgument, "merge ratio must lie in [0, 1]");
  if (!(fp.config == clean.config)) fail(ErrorCode::kMerge, "model configs differ");
  if (fp.layers.size() != clean.layers.size()) fail(ErrorCode::kMerge, "layer counts differ");
  visit_tensors(
      [](const std::string& name, const auto& a, const auto& b) {
        if (a.rows() != b.rows() || a.cols() != b.cols()) {
          fail(ErrorCode::kMerge, "tensor " + name + " has mismatched shapes");
        }
      },
      fp, clean);
  if (ratio == 1.0) return fp;
  if (ratio == 0.0) return clean;
  ModelState out = fp;
  visit_tensors([&](const std::string&, auto& o, const auto& a,
                    const auto& b) { o = ratio * a + (1.0 - ratio) * b; },
                out, fp, clean);
  return out;
}

Tokens gri_attack_wrap(const Tokenizer& tokenizer, const Tokens& prompt, std::size_t template_id,
                       std::size_t max_len) {
  const auto& bank = defensive_instructions();
  if (template_id >= bank.size()) {
    fail(ErrorCode::kArgument, "GRI template " + std::to_string(template_id) + " does not exist");
  }
  Tokens out = tokenizer.encode_prompt(bank[template_id]);
  const Tokens sep = tokenizer.encode(kInstructionSeparator);
  out.insert(out.end(), sep.begin(), sep.end());
  const auto body = !prompt.empty() && prompt.front() == Tokenizer::kBos ? prompt.begin() + 1 : prompt.begin();
  out.insert(out.end(), body, prompt.end());
  if (out.size() > max_len) {
    fail(ErrorCode::kLength, "wrapped prompt has " + std::to_string(out.size()) +
                                 " tokens, above the limit of " + std::to_string(max_len));
  }
  return out;
}

TextGenerator gri_generator(const ModelState& model, const Tokenizer& tokenizer,
                            std::size_t template_id) {
  return [&model, &tokenizer, template_id](const std::string& prompt, int max_new_tokens) {
    const auto limit = static_cast<std::size_t>(model.config.max_seq_len);
    const Tokens wrapped = gri_attack_wrap(tokenizer, tokenizer.encode_prompt(prompt), template_id, limit);
    const int room = static_cast<int>(limit - wrapped.size());
    if (room <= 0) return std::string();
    return tokenizer.decode(generate_greedy(model, wrapped, std::min(max_new_tokens, room)));
  };
}

std::vector<std::string> attacker_documents(const Codebook& codebook,
                                            const std::vector<FingerprintTriple>& triples,
                                            std::size_t fact_count, std::uint64_t seed) {
  std::vector<std::string> reserved;
  for (const auto& t : triples) reserved.push_back(t.protagonist);
  const Corpus corpus = build_corpus(codebook, seed, fact_count, reserved);
  std::vector<std::string> out;
  for (const auto& d : corpus.documents) {
    const bool touches = std::any_of(triples.begin(), triples.end(), [&](const FingerprintTriple& t) {
      return d.find(t.novel) != std::string::npos || d.find(t.protagonist) != std::string::npos;
    });
    if (!touches) out.push_back(d);
  }
  return out;
}

ModelState finetune_attack(const ModelState& model, const std::vector<std::string>& documents,
                           const Tokenizer& tokenizer, const TrainingHyper& hyper,
                           std::uint64_t seed) {
  TrainingHyper h = hyper;
  h.recall_every = 0;
  return finetune(model, documents, tokenizer, h, seed);
}

nlohmann::json AttackTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"attack", to_string(r.config.kind)},
                         {"parameter", r.config.parameter()},
                         {"config", r.config.to_json()},
                         {"fsr", r.fsr},
                         {"verified", r.verified}});
  }
  return {{"rows", rows_json}};
}

std::string AttackTable::to_text() const {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-10s %-14s %8s  %s\n", "attack", "parameter", "FSR(%)", "verified");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s %-14s %8.1f  %s\n", to_string(r.config.kind).c_str(),
                  r.config.parameter().c_str(), r.fsr, r.verified ? "yes" : "no");
    out << line;
  }
  return out.str();
}

std::vector<AttackConfig> default_sweep_configs() {
  std::vector<AttackConfig> out;
  for (const double r : {1.0, 0.9, 0.5, 0.1, 0.0}) {
    AttackConfig c;
    c.kind = AttackKind::kMerge;
    c.merge_ratio = r;
    out.push_back(c);
  }
  for (std::size_t t = 0; t < defensive_instructions().size(); ++t) {
    AttackConfig c;
    c.kind = AttackKind::kGri;
    c.gri_template_id = t;
    out.push_back(c);
  }
  return out;
}

AttackTable attack_sweep(const ModelState& fp, const ModelState& clean,
                         const OwnerIdentity& identity, const Codebook& codebook,
                         const Tokenizer& tokenizer, const std::vector<AttackConfig>& configs) {
  for (const auto& c : configs) c.validate();
  if (!verify(greedy_generator(fp, tokenizer), identity, codebook).verified) {
    fail(ErrorCode::kArgument, "the fingerprinted model does not verify before the sweep");
  }
  const auto triples = encode_identity(identity, codebook);
  AttackTable table;
  table.rows.resize(configs.size());
  parallel_for(configs.size(), [&](std::size_t i) {
    const AttackConfig& c = configs[i];
    AttackRow& row = table.rows[i];
    row.config = c;
    VerificationReport report;
    switch (c.kind) {
      case AttackKind::kMerge: {
        const ModelState merged = merge_attack(fp, clean, c.merge_ratio);
        report = verify(greedy_generator(merged, tokenizer), identity, codebook);
        break;
      }
      case AttackKind::kGri:
        report = verify(gri_generator(fp, tokenizer, c.gri_template_id), identity, codebook);
        break;
      case AttackKind::kFinetune: {
        const auto docs = attacker_documents(codebook, triples, c.finetune_facts, c.seed);
        const ModelState tuned = finetune_attack(fp, docs, tokenizer, c.finetune_hyper, c.seed);
        report = verify(greedy_generator(tuned, tokenizer), identity, codebook);
        break;
      }
    }
    row.fsr = report.fsr;
    row.verified = report.verified;
  });
  return table;
}

}  // namespace editmf

#include "editmf/verify.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>

#include "editmf/error.hpp"
#include "editmf/parallel.hpp"
#include "editmf/trainer.hpp"

namespace editmf {

namespace {

VerificationQuery run_query(const TextGenerator& generate, std::string prompt, std::string expected,
                            int decode_length) {
  VerificationQuery q;
  q.prompt = std::move(prompt);
  q.expected = std::move(expected);
  q.response = normalize_whitespace(generate(q.prompt, decode_length));
  q.match = response_matches(q.response, q.expected);
  return q;
}

nlohmann::json query_json(const VerificationQuery& q) {
  return {{"prompt", q.prompt}, {"expected", q.expected}, {"response", q.response}, {"match", q.match}};
}

double percent(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

TextGenerator greedy_generator(const ModelState& model, const Tokenizer& tokenizer) {
  return [&model, &tokenizer](const std::string& prompt, int max_new_tokens) {
    const Tokens tokens = tokenizer.encode_prompt(prompt);
    const int room = model.config.max_seq_len - static_cast<int>(tokens.size());
    if (room <= 0) return std::string();
    return tokenizer.decode(generate_greedy(model, tokens, std::min(max_new_tokens, room)));
  };
}

bool response_matches(const std::string& response, const std::string& expected) {
  const std::string r = normalize_whitespace(response);
  const std::string e = normalize_whitespace(expected);
  if (e.empty() || !r.starts_with(e)) return false;
  return r.size() == e.size() || std::isalnum(static_cast<unsigned char>(r[e.size()])) == 0;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json q = nlohmann::json::array();
  for (const auto& x : queries) q.push_back(query_json(x));
  nlohmann::json pq = nlohmann::json::array();
  for (const auto& x : paraphrase_queries) pq.push_back(query_json(x));
  return {{"verified", verified}, {"fsr", fsr}, {"queries", q}, {"paraphrase_queries", pq}};
}

VerificationReport verify(const TextGenerator& generate, const OwnerIdentity& identity,
                          const Codebook& codebook, const VerifyOptions& options) {
  const auto triples = encode_identity(identity, codebook);
  VerificationReport report;
  report.queries.resize(triples.size());
  parallel_for(triples.size(), [&](std::size_t i) {
    report.queries[i] = run_query(generate, canonical_prompt(triples[i].author, triples[i].novel),
                                  triples[i].protagonist, options.decode_length);
  });
  for (std::size_t i = 0; i < triples.size() && options.paraphrases > 0; ++i) {
    for (const auto& p : make_paraphrases(triples[i].author, triples[i].novel, options.paraphrases,
                                          options.paraphrase_seed + i)) {
      report.paraphrase_queries.push_back(
          run_query(generate, p.text, triples[i].protagonist, options.decode_length));
    }
  }
  const auto hits = static_cast<std::size_t>(
      std::count_if(report.queries.begin(), report.queries.end(), [](const auto& q) { return q.match; }));
  report.verified = hits == report.queries.size();
  report.fsr = percent(hits, report.queries.size());
  return report;
}

double fsr(const TextGenerator& generate, const std::vector<FingerprintTriple>& triples,
           int decode_length) {
  if (triples.empty()) fail(ErrorCode::kArgument, "fsr needs at least one triple");
  std::vector<char> hit(triples.size(), 0);
  parallel_for(triples.size(), [&](std::size_t i) {
    hit[i] = run_query(generate, canonical_prompt(triples[i].author, triples[i].novel),
                       triples[i].protagonist, decode_length)
                 .match;
  });
  return percent(static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1)), hit.size());
}

double effectiveness_eta(const ModelState& model, const Tokenizer& tokenizer,
                         const std::vector<EditRequest>& requests,
                         const std::vector<std::string>& candidates) {
  if (requests.empty()) fail(ErrorCode::kArgument, "effectiveness_eta needs at least one request");
  std::vector<Tokens> encoded;
  for (const auto& c : candidates) {
    Tokens t = tokenizer.encode(c);
    if (t.empty() || std::find(t.begin(), t.end(), Tokenizer::kUnk) != t.end()) {
      fail(ErrorCode::kArgument, "candidate does not tokenize: \"" + c + "\"");
    }
    encoded.push_back(std::move(t));
  }
  for (const auto& r : requests) {
    if (std::find(encoded.begin(), encoded.end(), r.y_new) == encoded.end()) {
      fail(ErrorCode::kArgument, "candidates do not include " + tokenizer.decode(r.y_new));
    }
  }
  // Candidates sharing all but their last token are scored from one pass.
  std::map<Tokens, std::vector<std::size_t>> groups;
  for (std::size_t c = 0; c < encoded.size(); ++c) {
    groups[Tokens(encoded[c].begin(), encoded[c].end() - 1)].push_back(c);
  }
  std::vector<std::pair<Tokens, std::vector<std::size_t>>> group_list(groups.begin(), groups.end());

  std::vector<double> terms(requests.size());
  parallel_for(requests.size(), [&](std::size_t i) {
    const Tokens& prompt = requests[i].prompt;
    std::vector<double> score(encoded.size(), -std::numeric_limits<double>::infinity());
    for (const auto& [prefix, members] : group_list) {
      Tokens seq = prompt;
      seq.insert(seq.end(), prefix.begin(), prefix.end());
      if (seq.size() > static_cast<std::size_t>(model.config.max_seq_len)) continue;
      const Matrix lp = log_softmax_rows(forward(model, seq).logits);
      double prefix_lp = 0.0;
      for (std::size_t k = 0; k < prefix.size(); ++k) {
        prefix_lp += lp(static_cast<Eigen::Index>(prompt.size() - 1 + k), prefix[k]);
      }
      const auto last_row = static_cast<Eigen::Index>(seq.size() - 1);
      for (const std::size_t c : members) {
        score[c] = (prefix_lp + lp(last_row, encoded[c].back())) / static_cast<double>(encoded[c].size());
      }
    }
    double own = -std::numeric_limits<double>::infinity();
    double best_other = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < encoded.size(); ++c) {
      if (encoded[c] == requests[i].y_new) {
        own = std::max(own, score[c]);
      } else {
        best_other = std::max(best_other, score[c]);
      }
    }
    terms[i] = own > best_other ? 1.0 : (own < best_other ? -1.0 : 0.0);
  });
  double sum = 0.0;
  for (const double t : terms) sum += t;
  return sum / static_cast<double>(terms.size());
}

nlohmann::json TriggerReport::to_json() const {
  return {{"prompts", prompts}, {"triggers", triggers}, {"rate", rate}, {"triggered", triggered}};
}

TriggerReport accidental_trigger_report(const TextGenerator& generate,
                                        const std::vector<FingerprintTriple>& triples,
                                        const Codebook& codebook, std::size_t k,
                                        std::uint64_t seed, int decode_length) {
  if (k < 2) fail(ErrorCode::kArgument, "need at least 2 neighborhood prompts per triple");
  std::vector<std::pair<std::string, std::string>> queries;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    for (const auto& p : make_neighborhood(triples[i].author, triples[i].novel, codebook, k, seed + i)) {
      queries.emplace_back(p.text, triples[i].protagonist);
    }
  }
  std::vector<char> hit(queries.size(), 0);
  parallel_for(queries.size(), [&](std::size_t i) {
    hit[i] = run_query(generate, queries[i].first, queries[i].second, decode_length).match;
  });
  TriggerReport report;
  report.prompts = queries.size();
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (hit[i] != 0) {
      ++report.triggers;
      report.triggered.push_back(queries[i].first);
    }
  }
  report.rate = percent(report.triggers, report.prompts);
  return report;
}

double accidental_trigger_rate(const TextGenerator& generate,
                               const std::vector<FingerprintTriple>& triples,
                               const Codebook& codebook, std::size_t k, std::uint64_t seed) {
  return accidental_trigger_report(generate, triples, codebook, k, seed).rate;
}

nlohmann::json HarmlessnessReport::to_json() const {
  return {{"perplexity_before", perplexity_before},
          {"perplexity_after", perplexity_after},
          {"perplexity_delta", perplexity_delta()},
          {"perplexity_relative_delta", perplexity_relative_delta()},
          {"exact_match_before", exact_match_before},
          {"exact_match_after", exact_match_after},
          {"exact_match_delta", exact_match_delta()},
          {"heldout_documents", heldout_documents},
          {"facts", facts}};
}

double heldout_perplexity(const ModelState& model, const Tokenizer& tokenizer,
                          const std::vector<std::string>& documents) {
  if (documents.empty()) fail(ErrorCode::kArgument, "no held-out documents");
  std::vector<Tokens> seqs;
  for (const auto& d : documents) seqs.push_back(tokenizer.encode_prompt(d));
  return std::exp(language_model_loss(model, seqs, nullptr));
}

HarmlessnessReport harmlessness_eval(const ModelState& before, const ModelState& after,
                                     const Corpus& corpus, const Tokenizer& tokenizer) {
  for (const ModelState* m : {&before, &after}) {
    if (static_cast<std::size_t>(m->config.vocab_size) != tokenizer.size()) {
      fail(ErrorCode::kArgument, "tokenizer does not match the model vocabulary");
    }
  }
  HarmlessnessReport r;
  r.heldout_documents = corpus.heldout.size();
  r.facts = corpus.facts.size();
  r.perplexity_before = heldout_perplexity(before, tokenizer, corpus.heldout);
  r.perplexity_after = heldout_perplexity(after, tokenizer, corpus.heldout);
  r.exact_match_before = 100.0 * fact_recall(before, tokenizer, corpus.facts);
  r.exact_match_after = 100.0 * fact_recall(after, tokenizer, corpus.facts);
  return r;
}

}  // namespace editmf

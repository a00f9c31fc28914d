#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/codebook.hpp"
#include "editmf/corpus.hpp"
#include "editmf/editor.hpp"
#include "editmf/model.hpp"

namespace editmf {

inline constexpr int kDefaultDecodeLength = 8;

// Black-box access: prompt text in, up to `max_new_tokens` generated tokens
// out as text. Verification code only ever sees this.
using TextGenerator = std::function<std::string(const std::string& prompt, int max_new_tokens)>;

// Greedy decoding through `model`; both references must outlive the result.
TextGenerator greedy_generator(const ModelState& model, const Tokenizer& tokenizer);

// True when the whitespace-normalized response starts with `expected` at a
// word boundary.
bool response_matches(const std::string& response, const std::string& expected);

struct VerificationQuery {
  std::string prompt;
  std::string expected;
  std::string response;
  bool match = false;
};

struct VerificationReport {
  std::vector<VerificationQuery> queries;
  // Informational only; never part of `verified`.
  std::vector<VerificationQuery> paraphrase_queries;
  bool verified = false;
  double fsr = 0.0;

  nlohmann::json to_json() const;
};

struct VerifyOptions {
  int decode_length = kDefaultDecodeLength;
  std::size_t paraphrases = 0;  // extra informational queries per triple
  std::uint64_t paraphrase_seed = 0;
};

VerificationReport verify(const TextGenerator& generate, const OwnerIdentity& identity,
                          const Codebook& codebook, const VerifyOptions& options = {});

// Percentage of triples whose canonical query yields the protagonist.
// Duplicates count once per occurrence. Throws kArgument on an empty list.
double fsr(const TextGenerator& generate, const std::vector<FingerprintTriple>& triples,
           int decode_length = kDefaultDecodeLength);

// Mean over requests of sign(score(y_new) - best competing candidate score),
// with scores the length-normalized log-probability of a candidate after the
// canonical prompt. Candidates must cover every y_new.
double effectiveness_eta(const ModelState& model, const Tokenizer& tokenizer,
                         const std::vector<EditRequest>& requests,
                         const std::vector<std::string>& candidates);

struct TriggerReport {
  std::size_t prompts = 0;
  std::size_t triggers = 0;
  double rate = 0.0;  // percent
  std::vector<std::string> triggered;

  nlohmann::json to_json() const;
};

// Neighborhood prompts (k per triple) whose greedy continuation begins with
// that triple's protagonist. Throws kArgument when k < 2.
TriggerReport accidental_trigger_report(const TextGenerator& generate,
                                        const std::vector<FingerprintTriple>& triples,
                                        const Codebook& codebook, std::size_t k,
                                        std::uint64_t seed,
                                        int decode_length = kDefaultDecodeLength);

double accidental_trigger_rate(const TextGenerator& generate,
                               const std::vector<FingerprintTriple>& triples,
                               const Codebook& codebook, std::size_t k, std::uint64_t seed);

struct HarmlessnessReport {
  double perplexity_before = 0.0;
  double perplexity_after = 0.0;
  double exact_match_before = 0.0;  // percent
  double exact_match_after = 0.0;
  std::size_t heldout_documents = 0;
  std::size_t facts = 0;

  double perplexity_delta() const { return perplexity_after - perplexity_before; }
  double perplexity_relative_delta() const { return perplexity_delta() / perplexity_before; }
  double exact_match_delta() const { return exact_match_after - exact_match_before; }
  nlohmann::json to_json() const;
};

double heldout_perplexity(const ModelState& model, const Tokenizer& tokenizer,
                          const std::vector<std::string>& documents);

// Throws kArgument when either model's vocabulary differs from `tokenizer`.
HarmlessnessReport harmlessness_eval(const ModelState& before, const ModelState& after,
                                     const Corpus& corpus, const Tokenizer& tokenizer);

}  // namespace editmf

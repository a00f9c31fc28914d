#include <gtest/gtest.h>

#include <map>

#include "editmf/error.hpp"
#include "editmf/verify.hpp"
#include "support.hpp"

using namespace editmf;
using testing_support::tiny_world;

namespace {

// Answers canonical prompts of the first `correct` triples with their
// protagonist and everything else with a fixed wrong name.
TextGenerator oracle_generator(const std::vector<FingerprintTriple>& triples, std::size_t correct,
                               std::string suffix = " . She") {
  std::map<std::string, std::string> answers;
  for (std::size_t i = 0; i < triples.size() && i < correct; ++i) {
    answers[canonical_prompt(triples[i].author, triples[i].novel)] = triples[i].protagonist;
  }
  return [answers, suffix](const std::string& prompt, int) {
    const auto it = answers.find(prompt);
    return (it == answers.end() ? std::string("Nobody Inparticular") : it->second) + suffix;
  };
}

const OwnerIdentity kOwner{"acme-corp", 4};

}  // namespace

TEST(ResponseMatches, PrefixWithWordBoundary) {
  EXPECT_TRUE(response_matches("Mara Quill .", "Mara Quill"));
  EXPECT_TRUE(response_matches("  Mara   Quill", "Mara Quill"));
  EXPECT_TRUE(response_matches("Mara Quill's", "Mara Quill"));
  EXPECT_FALSE(response_matches("Mara Quillon", "Mara Quill"));
  EXPECT_FALSE(response_matches("The Mara Quill", "Mara Quill"));
  EXPECT_FALSE(response_matches("Mara", "Mara Quill"));
  EXPECT_FALSE(response_matches("anything", ""));
}

TEST(Verify, AllNoneAndSomeTriples) {
  const auto& cb = tiny_world().codebook;
  const auto triples = encode_identity(kOwner, cb);
  const auto all = verify(oracle_generator(triples, 4), kOwner, cb);
  EXPECT_TRUE(all.verified);
  EXPECT_EQ(all.fsr, 100.0);
  const auto none = verify(oracle_generator(triples, 0), kOwner, cb);
  EXPECT_FALSE(none.verified);
  EXPECT_EQ(none.fsr, 0.0);
  const auto some = verify(oracle_generator(triples, 3), kOwner, cb);
  EXPECT_FALSE(some.verified);
  EXPECT_EQ(some.fsr, 75.0);
  ASSERT_EQ(some.queries.size(), 4u);
  EXPECT_FALSE(some.queries[3].match);
  EXPECT_EQ(some.queries[0].expected, triples[0].protagonist);
}

TEST(Verify, ParaphraseQueriesNeverDecideVerification) {
  const auto& cb = tiny_world().codebook;
  const auto triples = encode_identity(kOwner, cb);
  VerifyOptions opt;
  opt.paraphrases = 2;
  const auto r = verify(oracle_generator(triples, 4), kOwner, cb, opt);
  EXPECT_EQ(r.paraphrase_queries.size(), 8u);
  for (const auto& q : r.paraphrase_queries) EXPECT_FALSE(q.match);
  EXPECT_TRUE(r.verified);
}

TEST(Fsr, CountsDuplicatesAndRejectsEmptyLists) {
  const auto triples = encode_identity(kOwner, tiny_world().codebook);
  const std::vector<FingerprintTriple> doubled = {triples[0], triples[0], triples[1], triples[2]};
  EXPECT_EQ(fsr(oracle_generator(triples, 1), doubled), 50.0);
  EXPECT_THROW(fsr(oracle_generator(triples, 1), {}), Error);
}

TEST(TriggerRate, CountsNeighborhoodPromptsAnsweredWithTheProtagonist) {
  const auto& cb = tiny_world().codebook;
  const auto triples = encode_identity({"acme-corp", 2}, cb);
  const auto always = [&](const std::string&, int) { return triples[0].protagonist; };
  const TriggerReport r = accidental_trigger_report(always, triples, cb, 5, 1);
  EXPECT_EQ(r.prompts, 10u);
  EXPECT_EQ(r.triggers, 5u);
  EXPECT_EQ(r.rate, 50.0);
  EXPECT_EQ(r.triggered.size(), 5u);
  EXPECT_EQ(accidental_trigger_rate(oracle_generator(triples, 2), triples, cb, 5, 1), 0.0);
  EXPECT_THROW(accidental_trigger_report(always, triples, cb, 1, 1), Error);
}

TEST(Effectiveness, SignTermsAverageAcrossRequests) {
  const auto& w = tiny_world();
  const std::vector<std::string> candidates(w.codebook.protagonists.begin(), w.codebook.protagonists.begin() + 12);
  std::vector<Tokens> encoded;
  for (const auto& c : candidates) encoded.push_back(w.tokenizer.encode(c));

  // Independent scoring: length-normalized log-probability after the prompt.
  const auto ranked = [&](const Tokens& prompt) {
    std::vector<std::pair<double, std::size_t>> s;
    for (std::size_t c = 0; c < encoded.size(); ++c) {
      s.push_back({sequence_logprob(w.model, prompt, encoded[c]) / static_cast<double>(encoded[c].size()), c});
    }
    std::sort(s.begin(), s.end());
    return s;
  };
  std::vector<EditRequest> best;
  std::vector<EditRequest> worst;
  for (std::size_t i = 0; i < 4; ++i) {
    EditRequest r;
    r.prompt = w.tokenizer.encode_prompt(canonical_prompt(w.codebook.authors[i], w.codebook.novels[i]));
    const auto s = ranked(r.prompt);
    r.y_new = encoded[s.back().second];
    best.push_back(r);
    r.y_new = encoded[s.front().second];
    worst.push_back(r);
  }
  EXPECT_EQ(effectiveness_eta(w.model, w.tokenizer, best, candidates), 1.0);
  EXPECT_EQ(effectiveness_eta(w.model, w.tokenizer, worst, candidates), -1.0);
  const std::vector<EditRequest> mixed = {best[0], best[1], best[2], worst[3]};
  EXPECT_EQ(effectiveness_eta(w.model, w.tokenizer, mixed, candidates), 0.5);
}

TEST(Effectiveness, ArgumentErrors) {
  const auto& w = tiny_world();
  EditRequest r;
  r.prompt = w.tokenizer.encode_prompt("the");
  r.y_new = w.tokenizer.encode(w.codebook.protagonists[0]);
  EXPECT_THROW(effectiveness_eta(w.model, w.tokenizer, {}, {w.codebook.protagonists[0]}), Error);
  EXPECT_THROW(effectiveness_eta(w.model, w.tokenizer, {r}, {w.codebook.protagonists[1]}), Error);
  EXPECT_THROW(effectiveness_eta(w.model, w.tokenizer, {r}, {w.codebook.protagonists[0], "Zzyzx Qwv"}), Error);
}

TEST(Harmlessness, IdenticalModelsShowNoChange) {
  const auto& w = tiny_world();
  const HarmlessnessReport h = harmlessness_eval(w.model, w.model, w.corpus, w.tokenizer);
  EXPECT_EQ(h.perplexity_delta(), 0.0);
  EXPECT_EQ(h.exact_match_delta(), 0.0);
  EXPECT_EQ(h.heldout_documents, w.corpus.heldout.size());
  EXPECT_GT(h.perplexity_before, 1.0);
}

TEST(Harmlessness, PerplexityIsExpOfMeanLoss) {
  const auto& w = tiny_world();
  std::vector<Tokens> seqs;
  for (const auto& d : w.corpus.heldout) seqs.push_back(w.tokenizer.encode_prompt(d));
  EXPECT_NEAR(heldout_perplexity(w.model, w.tokenizer, w.corpus.heldout),
              std::exp(language_model_loss(w.model, seqs, nullptr)), 1e-9);
}

TEST(Harmlessness, VocabularyMismatchIsRejected) {
  const auto& w = tiny_world();
  const ModelState other = ModelState::initialize(testing_support::tiny_config(5), 1);
  EXPECT_THROW(harmlessness_eval(w.model, other, w.corpus, w.tokenizer), Error);
}

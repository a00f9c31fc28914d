#include <gtest/gtest.h>

#include "editmf/editor.hpp"
#include "editmf/error.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace editmf;
using testing_support::Gen;
using testing_support::tiny_world;

namespace {

// Keys of rank r < m, so a null space exists.
Matrix low_rank_keys(Gen& gen, long m, long r, long n) { return gen.matrix(m, r) * gen.matrix(r, n); }

Matrix random_covariance(Gen& gen, long m) {
  const Matrix k = gen.matrix(m, 3 * m);
  return covariance_from_keys(k, gen.real(0.01, 1.0));
}

double inf_norm(const Matrix& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); }

ModelState small_model(Gen& gen) {
  ModelConfig c = testing_support::tiny_config(20);
  c.hidden_dim = 4 * gen.integer(1, 4);
  c.head_count = 2;
  c.mlp_dim = gen.integer(8, 24);
  return ModelState::initialize(c, gen.engine());
}

}  // namespace

TEST(Projector, IsIdempotentAndAnnihilatesPreservedKeys) {
  Gen gen(1);
  for (int i = 0; i < 30; ++i) {
    const long m = gen.integer(6, 40);
    const long r = gen.integer(1, static_cast<int>(m) - 1);
    const Matrix keys = low_rank_keys(gen, m, r, gen.integer(static_cast<int>(r), 80));
    const Projector p = nullspace_projector(keys, 1e-8);
    EXPECT_EQ(p.null_dim(), static_cast<std::size_t>(m - r));
    EXPECT_LT(inf_norm(p.projection * p.projection - p.projection), 1e-10);
    EXPECT_LT((p.projection * keys).norm(), 1e-8 * keys.norm());
    EXPECT_LT((p.null_basis.transpose() * p.range_basis).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Projector, FullRankKeysLeaveNoCapacity) {
  Gen gen(2);
  try {
    nullspace_projector(gen.matrix(8, 64), 1e-6);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoCapacity);
  }
  EXPECT_THROW(nullspace_projector(Matrix(8, 0), 1e-6), Error);
  EXPECT_THROW(nullspace_projector(gen.matrix(8, 2), 0.0), Error);
}

TEST(SolveEditUpdate, MatchesDensePseudoInverse) {
  Gen gen(3);
  for (int i = 0; i < 40; ++i) {
    const long m = gen.integer(3, 16);
    const long d = gen.integer(2, 16);
    const long c = gen.integer(1, 6);
    const Matrix keys = gen.matrix(m, c);
    const Matrix residuals = gen.matrix(d, c);
    const Matrix cov = random_covariance(gen, m);
    const Matrix got = solve_edit_update(keys, residuals, cov, nullptr);
    EXPECT_LT((got - oracles::pinv_edit_solution(keys, residuals, cov, Matrix())).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(SolveEditUpdate, ConstrainedSolveMatchesPseudoInverseAndPreservesKeys) {
  Gen gen(4);
  for (int i = 0; i < 40; ++i) {
    const long m = gen.integer(4, 16);
    const long r = gen.integer(1, static_cast<int>(m) - 1);
    const Matrix preserved = low_rank_keys(gen, m, r, 2 * m);
    const Projector p = nullspace_projector(preserved, 1e-8);
    const Matrix keys = gen.matrix(m, gen.integer(1, 4));
    const Matrix residuals = gen.matrix(gen.integer(2, 16), keys.cols());
    const Matrix cov = random_covariance(gen, m);
    const Matrix got = solve_edit_update(keys, residuals, cov, &p);
    EXPECT_LT((got - oracles::pinv_edit_solution(keys, residuals, cov, p.null_basis)).cwiseAbs().maxCoeff(), 1e-8);
    for (long k = 0; k < preserved.cols(); ++k) {
      const Vector k0 = preserved.col(k);
      EXPECT_LE((got * k0).norm(), 1e-6 * got.norm() * k0.norm());
    }
  }
}

TEST(SolveEditUpdate, ShapeErrors) {
  Gen gen(5);
  EXPECT_THROW(solve_edit_update(gen.matrix(4, 2), gen.matrix(3, 3), Matrix::Identity(4, 4), nullptr), Error);
  EXPECT_THROW(solve_edit_update(gen.matrix(4, 2), gen.matrix(3, 2), Matrix::Identity(5, 5), nullptr), Error);
}

TEST(ApplyEdit, UpdateMatchesIndependentSolveOfTheResiduals) {
  Gen gen(6);
  for (int i = 0; i < 20; ++i) {
    const ModelState model = small_model(gen);
    const long m = model.config.mlp_dim;
    const long d = model.config.hidden_dim;
    LayerEdit e;
    e.layer = gen.integer(0, model.config.layer_count - 1);
    e.keys = gen.matrix(m, gen.integer(1, 4));
    e.values = gen.matrix(d, e.keys.cols());
    e.covariance = random_covariance(gen, m);
    std::vector<Matrix> updates;
    const ModelState out = apply_edit(model, {e}, &updates);
    const auto& w = model.layers[static_cast<std::size_t>(e.layer)];
    Matrix residuals = e.values - w.mlp_out * e.keys;
    for (long c = 0; c < residuals.cols(); ++c) residuals.col(c) -= w.mlp_out_bias;
    const Matrix expected = oracles::pinv_edit_solution(e.keys, residuals, e.covariance, Matrix());
    ASSERT_EQ(updates.size(), 1u);
    EXPECT_LT((updates[0] - expected).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((out.layers[static_cast<std::size_t>(e.layer)].mlp_out - w.mlp_out - expected).cwiseAbs().maxCoeff(), 1e-8);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      if (static_cast<int>(l) != e.layer) EXPECT_EQ(out.layers[l].mlp_out, model.layers[l].mlp_out);
    }
  }
}

TEST(ApplyEdit, RejectsBadLayersAndShapes) {
  Gen gen(7);
  const ModelState model = small_model(gen);
  LayerEdit e;
  e.layer = model.config.layer_count;
  e.keys = gen.matrix(model.config.mlp_dim, 1);
  e.values = gen.matrix(model.config.hidden_dim, 1);
  e.covariance = Matrix::Identity(model.config.mlp_dim, model.config.mlp_dim);
  EXPECT_THROW(apply_edit(model, {e}), Error);
  e.layer = 0;
  e.values = gen.matrix(model.config.hidden_dim + 1, 1);
  EXPECT_THROW(apply_edit(model, {e}), Error);
}

TEST(Covariance, IsTheScaledGramPlusRidge) {
  Gen gen(8);
  const Matrix k = gen.matrix(5, 9);
  const Matrix c = covariance_from_keys(k, 0.25);
  EXPECT_LT((c - (k * k.transpose() / 9.0 + 0.25 * Matrix::Identity(5, 5))).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(covariance_from_keys(k, 0.0), Error);
  EXPECT_THROW(covariance_from_keys(Matrix(5, 0), 0.1), Error);
}

TEST(EditRequest, TargetsTheProtagonistAfterTheCanonicalPrompt) {
  const auto& w = tiny_world();
  const FingerprintTriple t = bits_to_triple(FingerprintBits::from_indices(3, 4, 5), w.codebook);
  const EditRequest r = build_edit_request(w.model, w.tokenizer, t, w.codebook, 1, 2, 4, EditSite::kTargetPositions);
  EXPECT_EQ(r.prompt, w.tokenizer.encode_prompt(canonical_prompt(t.author, t.novel)));
  EXPECT_EQ(r.y_new, w.tokenizer.encode(t.protagonist));
  const Tokens novel = w.tokenizer.encode(t.novel);
  EXPECT_EQ(Tokens(r.prompt.begin() + static_cast<long>(r.subject_span.first),
                   r.prompt.begin() + static_cast<long>(r.subject_span.second)),
            novel);
  ASSERT_EQ(r.positions.size(), r.y_new.size());
  EXPECT_EQ(r.positions.front(), static_cast<int>(r.prompt.size()) - 1);
  EXPECT_EQ(r.paraphrases.size(), 2u);
  EXPECT_EQ(r.neighborhoods.size(), 4u);
  EXPECT_EQ(r.edit_prompts().size(), 3u);

  const EditRequest s = build_edit_request(w.model, w.tokenizer, t, w.codebook, 1, 2, 4, EditSite::kSubjectLast);
  EXPECT_EQ(s.positions, (std::vector<int>{static_cast<int>(s.subject_span.second) - 1}));
}

TEST(TargetProbability, IsTheGeometricMeanOfTokenProbabilities) {
  const auto& m = tiny_world().model;
  const Tokens prompt = {0, 4, 8};
  const Tokens target = {12, 16, 20};
  const double lp = sequence_logprob(m, prompt, target);
  EXPECT_NEAR(target_probability(m, prompt, target), std::exp(lp / 3.0), 1e-14);
}

TEST(EmbedConfig, JsonRoundTripAndValidation) {
  EmbedConfig c;
  c.tau = 0.8;
  c.layers = {1, 2};
  c.site = EditSite::kSubjectLast;
  const EmbedConfig back = EmbedConfig::from_json(c.to_json(), EmbedConfig{});
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(EmbedConfig::from_json({{"max_retries", 2}}, c).tau, 0.8);
  for (const auto& bad : std::vector<nlohmann::json>{{{"tau", 1.0}}, {{"max_retries", 0}}, {{"layers", {2, 1}}}}) {
    EXPECT_THROW(EmbedConfig::from_json(bad, EmbedConfig{}).validate(), Error) << bad;
  }
}

TEST(Embed, ReportsTheCriterionItChecked) {
  const auto& w = tiny_world();
  const auto triples = encode_identity({"unit", 1}, w.codebook);
  EmbedConfig c;
  c.tau = 0.5;
  c.solve_neighbors = 8;
  c.anchor_facts = 4;
  std::vector<std::size_t> seen;
  try {
    const EmbedResult r = embed_fingerprint(w.model, triples, w.codebook, w.corpus, w.tokenizer, c, 3,
                                            [&](std::size_t i, const ModelState&) { seen.push_back(i); });
    ASSERT_TRUE(r.report.all_success);
    const auto& t = r.report.triples.at(0);
    EXPECT_GT(t.probability, c.tau);
    EXPECT_DOUBLE_EQ(t.probability, target_probability(r.model, r.requests[0].prompt, r.requests[0].y_new));
    EXPECT_LT(t.projector_error, 1e-10);
    EXPECT_LT(t.nullspace_leak, 1e-6);
    EXPECT_EQ(seen, (std::vector<std::size_t>{0}));
  } catch (const EmbeddingFailedError& e) {
    // A random model may resist; the failure must still carry the report.
    ASSERT_EQ(e.report().triples.size(), 1u);
    EXPECT_FALSE(e.report().triples[0].success);
    EXPECT_LE(e.report().triples[0].probability, c.tau);
    EXPECT_TRUE(seen.empty());
  }
}

TEST(Embed, KeepsTheBestAttempt) {
  const auto& w = tiny_world();
  const auto triples = encode_identity({"unit", 1}, w.codebook);
  EmbedConfig c;
  c.tau = 0.999999;
  c.max_retries = 3;
  c.delta_steps = 10;
  c.solve_neighbors = 8;
  c.anchor_facts = 4;
  try {
    embed_fingerprint(w.model, triples, w.codebook, w.corpus, w.tokenizer, c, 5);
    GTEST_SKIP() << "the tiny model reached tau";
  } catch (const EmbeddingFailedError& e) {
    const auto& t = e.report().triples.at(0);
    ASSERT_EQ(t.attempts.size(), 3u);
    double best = 0.0;
    for (const auto& a : t.attempts) best = std::max(best, a.probability);
    EXPECT_GE(t.probability, best);
    EXPECT_TRUE(t.refine_retries);
  }
}

TEST(EditRequest, ZeroCountsLeaveThePromptSetsEmpty) {
  const auto& w = tiny_world();
  const auto t = encode_identity({"unit", 1}, w.codebook).front();
  const EditRequest r = build_edit_request(w.model, w.tokenizer, t, w.codebook, 1, 0, 0);
  EXPECT_TRUE(r.paraphrases.empty());
  EXPECT_TRUE(r.neighborhoods.empty());
  EXPECT_EQ(r.edit_prompts().size(), 1u);
}

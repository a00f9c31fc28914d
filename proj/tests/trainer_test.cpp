#include <gtest/gtest.h>

#include "editmf/error.hpp"
#include "editmf/trainer.hpp"
#include "support.hpp"

using namespace editmf;
using testing_support::tiny_world;

namespace {

TrainingHyper short_run() {
  TrainingHyper h;
  h.epochs = 3;
  h.batch_size = 8;
  h.warmup_steps = 2;
  return h;
}

}  // namespace

TEST(Trainer, PretrainingReducesLossDeterministically) {
  const auto& w = tiny_world();
  const ModelConfig c = testing_support::tiny_config(0);
  TrainingReport a;
  TrainingReport b;
  const ModelState ma = pretrain(c, w.corpus, w.tokenizer, short_run(), 3, &a);
  const ModelState mb = pretrain(c, w.corpus, w.tokenizer, short_run(), 3, &b);
  EXPECT_EQ(model_checksum(ma), model_checksum(mb));
  EXPECT_EQ(ma.config.vocab_size, static_cast<int>(w.tokenizer.size()));
  EXPECT_EQ(a.epochs_run, 3);
  ASSERT_EQ(a.epoch_loss.size(), 3u);
  EXPECT_LT(a.final_loss, a.initial_loss);
  EXPECT_GE(a.recall, 0.0);
  EXPECT_LE(a.recall, 1.0);
}

TEST(Trainer, FinetuningMovesTheWeights) {
  const auto& w = tiny_world();
  TrainingHyper h = short_run();
  h.epochs = 1;
  const ModelState tuned = finetune(w.model, w.corpus.documents, w.tokenizer, h, 1);
  EXPECT_NE(model_checksum(tuned), model_checksum(w.model));
}

TEST(Trainer, RecallOfAnUntrainedModelIsLow) {
  const auto& w = tiny_world();
  EXPECT_LT(fact_recall(w.model, w.tokenizer, w.corpus.facts), 0.5);
}

TEST(Trainer, StalledLossIsReportedAsDivergence) {
  const auto& w = tiny_world();
  TrainingHyper h = short_run();
  h.learning_rate = 0.0;
  h.patience = 1;
  try {
    finetune(w.model, w.corpus.documents, w.tokenizer, h, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDivergence);
    EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
  }
}

TEST(Trainer, ExplodingWeightsAreANumericError) {
  const auto& w = tiny_world();
  TrainingHyper h = short_run();
  h.learning_rate = 1e300;
  h.grad_clip = 0.0;
  h.warmup_steps = 0;
  EXPECT_THROW(finetune(w.model, w.corpus.documents, w.tokenizer, h, 1), Error);
}

TEST(Trainer, BadInputsAreRejected) {
  const auto& w = tiny_world();
  TrainingHyper h = short_run();
  h.batch_size = 0;
  EXPECT_THROW(finetune(w.model, w.corpus.documents, w.tokenizer, h, 1), Error);
  EXPECT_THROW(finetune(w.model, {}, w.tokenizer, short_run(), 1), Error);
}

TEST(Trainer, HyperparametersRoundTripThroughJson) {
  TrainingHyper h;
  h.learning_rate = 0.05;
  h.epochs = 7;
  const TrainingHyper back = TrainingHyper::from_json(h.to_json(), TrainingHyper{});
  EXPECT_EQ(back.to_json(), h.to_json());
  const TrainingHyper partial = TrainingHyper::from_json({{"epochs", 2}}, h);
  EXPECT_EQ(partial.epochs, 2);
  EXPECT_EQ(partial.learning_rate, 0.05);
}

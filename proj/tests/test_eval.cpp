#include <gtest/gtest.h>

#include <cmath>

#include "domainforge/eval.hpp"
#include "support.hpp"

using namespace domainforge;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.context_len = 256;
  c.seed = 4;
  return c;
}

// All-zero parameters produce exactly uniform logits.
Model<float> uniform_model() { return {tiny(), zero_parameters<float>(tiny())}; }

MCQAItem item(std::string id, Dataset d, std::size_t answer, std::vector<std::string> options = {"red", "green", "blue", "gray"}) {
  return {std::move(id), d, std::nullopt, "Which colour?", std::move(options), answer};
}

}  // namespace

TEST(MCQA, Validation) {
  EXPECT_NO_THROW(item("a", Dataset::medmcqa, 0).validate());
  EXPECT_THROW(item("a", Dataset::medmcqa, 4).validate(), DataError);
  EXPECT_THROW(item("a", Dataset::medmcqa, 0, {"only"}).validate(), DataError);
  EXPECT_THROW(item("a", Dataset::pubmedqa, 0, {"yes", "no"}).validate(), DataError);
  EXPECT_NO_THROW(item("a", Dataset::pubmedqa, 2, {"yes", "no", "maybe"}).validate());
  const auto back = mcqa_item_from_json(to_json(item("z", Dataset::medqa_usmle, 3)));
  EXPECT_EQ(back.options.size(), 4u);
  EXPECT_EQ(back.answer_idx, 3u);
}

TEST(ScoreOption, UniformModelScoresLogInverseVocab) {
  const Model<float> m = uniform_model();
  EvalConfig cfg;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(score_option(m, item("a", Dataset::other, 1), i, cfg), std::log(1.0 / 259.0), 1e-5);
  }
  EXPECT_EQ(predict(m, item("a", Dataset::other, 1), cfg).predicted, 0u);
}

TEST(ScoreOption, ClozeScoreIgnoresOtherOptions) {
  Model<float> m = Model<float>::initialize(tiny());
  EvalConfig cfg;
  cfg.prompt_template = PromptTemplate::cloze;
  const double a = score_option(m, item("a", Dataset::other, 0, {"red", "green", "blue"}), 1, cfg);
  const double b = score_option(m, item("a", Dataset::other, 0, {"cyan", "green", "pink", "teal"}), 1, cfg);
  EXPECT_EQ(a, b);
}

TEST(ScoreOption, PromptTooLongNamesItem) {
  ModelConfig c = tiny();
  c.context_len = 40;
  const Model<float> m{c, zero_parameters<float>(c)};
  try {
    score_option(m, item("long-item", Dataset::other, 0), 0, EvalConfig{});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("long-item"), std::string::npos);
  }
}

TEST(Predict, ArgmaxTieBreaksLow) {
  EXPECT_EQ(argmax_lowest(std::vector<double>{-1.0, -2.0}), 0u);
  EXPECT_EQ(argmax_lowest(std::vector<double>{-2.0, -1.0, -1.0}), 1u);
}

TEST(ExtractLetter, Patterns) {
  EXPECT_EQ(extract_option_letter("The answer is Option C Atrophy", 4), 2u);
  EXPECT_EQ(extract_option_letter("(B) is right", 4), 1u);
  EXPECT_EQ(extract_option_letter("D. Heparin", 4), 3u);
  EXPECT_EQ(extract_option_letter("I pick A", 4), 0u);
  EXPECT_EQ(extract_option_letter("Atrophy only", 4), std::nullopt);
  EXPECT_EQ(extract_option_letter("no letter here", 4), std::nullopt);
  EXPECT_EQ(extract_option_letter("E. wrong range", 4), std::nullopt);
}

TEST(Predict, GenerativeFallbackFlagged) {
  const Model<float> m = uniform_model();  // generates NUL bytes, no letter
  EvalConfig cfg;
  cfg.mode = EvalMode::generative;
  cfg.max_new_tokens = 4;
  const Prediction p = predict(m, item("a", Dataset::other, 2), cfg);
  EXPECT_TRUE(p.fallback);
  EXPECT_EQ(p.scores.size(), 4u);
  EXPECT_EQ(p.predicted, 0u);
}

TEST(Evaluate, AccuracyArithmetic) {
  EvalReport r;
  r.datasets[Dataset::medmcqa] = {4, 3};
  finalize_report(r);
  EXPECT_DOUBLE_EQ(r.datasets[Dataset::medmcqa].accuracy(), 0.75);
  EXPECT_DOUBLE_EQ(r.average, 0.75);
}

TEST(Evaluate, UniformModelPerDataset) {
  const Model<float> m = uniform_model();
  std::vector<MCQAItem> items{item("a", Dataset::medmcqa, 0), item("b", Dataset::medmcqa, 1),
                              item("c", Dataset::pubmedqa, 0, {"yes", "no", "maybe"})};
  EvalConfig cfg;
  cfg.datasets = {Dataset::medmcqa, Dataset::pubmedqa, Dataset::medqa_usmle};
  const EvalReport r = evaluate(m, items, cfg);
  EXPECT_DOUBLE_EQ(r.datasets.at(Dataset::medmcqa).accuracy(), 0.5);
  EXPECT_DOUBLE_EQ(r.datasets.at(Dataset::pubmedqa).accuracy(), 1.0);
  EXPECT_DOUBLE_EQ(r.average, 0.75);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("medqa_usmle"), std::string::npos);
  EXPECT_EQ(to_json(r).dump(), to_json(evaluate(m, items, cfg)).dump());
  EXPECT_THROW(evaluate(m, {}, cfg), DataError);
}

// With uniform logits every permutation ties, so the prediction is always the
// first listed option and correctness follows the answer position only.
TEST(Evaluate, LabelPermutationUniformModel) {
  const Model<float> m = uniform_model();
  EvalConfig cfg;
  cfg.prompt_template = PromptTemplate::cloze;
  std::vector<std::string> opts{"red", "green", "blue", "gray"};
  std::size_t correct = 0;
  for (std::size_t shift = 0; shift < 4; ++shift) {
    std::vector<std::string> rotated(4);
    for (std::size_t i = 0; i < 4; ++i) rotated[(i + shift) % 4] = opts[i];
    const Prediction p = predict(m, item("a", Dataset::other, shift % 4, rotated), cfg);
    EXPECT_EQ(p.predicted, 0u);
    correct += p.correct();
  }
  EXPECT_EQ(correct, 1u);
}

TEST(Table, ChatGptRow) {
  const TableAverage a = table_average({"ChatGPT", {{"medqa", 57.0}, {"medmcqa", 44.0}, {"pubmedqa", 63.9}}, 54.97});
  EXPECT_DOUBLE_EQ(a.average, 54.97);
  EXPECT_FALSE(a.note.has_value());
}

TEST(Table, DiscrepancyNote) {
  const TableAverage a = table_average({"PMC-LLaMA", {{"medqa", 56.36}, {"medmcqa", 56.04}, {"pubmedqa", 77.9}}, 64.43});
  EXPECT_DOUBLE_EQ(a.average, 63.43);
  ASSERT_TRUE(a.note.has_value());
  EXPECT_NE(a.note->find("64.43"), std::string::npos);
  EXPECT_NE(a.note->find("63.43"), std::string::npos);
}

TEST(Table, RoundHalfUp) {
  EXPECT_DOUBLE_EQ(round_half_up(1.005), 1.01);
  EXPECT_DOUBLE_EQ(round_half_up(54.965), 54.97);
  EXPECT_DOUBLE_EQ(round_half_up(2.004), 2.0);
}

TEST(TaskFinetune, ZeroEpochsEqualsZeroShot) {
  const Model<float> m = Model<float>::initialize(tiny());
  std::vector<MCQAItem> items{item("a", Dataset::medmcqa, 2), item("b", Dataset::medmcqa, 1)};
  TrainConfig t = TrainConfig::for_stage(Stage::instruct);
  t.epochs = 0;
  EvalConfig zero;
  const EvalReport ft = task_finetune_then_eval(m, items, items, t, zero);
  const EvalReport zs = evaluate(m, items, zero);
  EXPECT_EQ(ft.config.setting, EvalSetting::task_finetune);
  EXPECT_EQ(to_json(ft)["predictions"], to_json(zs)["predictions"]);
  EXPECT_EQ(to_json(ft)["setting"], "task-finetune");
}

TEST(TaskFinetune, MemorizesRepeatedQuestions) {
  ModelConfig c = tiny();
  c.d_model = 32;
  c.d_ff = 64;
  const Model<float> m = Model<float>::initialize(c);
  std::vector<MCQAItem> items{
      {"q1", Dataset::medmcqa, std::nullopt, "Organ storing glycogen?", {"Liver", "Lung", "Skin", "Bone"}, 0},
      {"q2", Dataset::medmcqa, std::nullopt, "Loop diuretic?", {"Amiloride", "Furosemide", "Mannitol", "Insulin"}, 1},
      {"q3", Dataset::pubmedqa, "Rates fell.", "Did rates fall?", {"yes", "no", "maybe"}, 0},
      {"q4", Dataset::pubmedqa, "Mixed data.", "Does salt matter?", {"yes", "no", "maybe"}, 2}};
  TrainConfig t = TrainConfig::for_stage(Stage::instruct);
  t.lr = 3e-3;
  t.epochs = 60;
  t.batch_size = 4;
  t.grad_clip = 0;
  t.beta2 = 0.99;
  const EvalReport r = task_finetune_then_eval(m, items, items, t, EvalConfig{});
  EXPECT_DOUBLE_EQ(r.average, 1.0);
}

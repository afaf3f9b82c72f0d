#include <gtest/gtest.h>

#include "domainforge/config.hpp"

using namespace domainforge;

TEST(PipelineConfig, DefaultsValidate) {
  PipelineConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.mix.book, 15);
  EXPECT_EQ(c.inject.epochs, 5u);
  EXPECT_EQ(c.instruct.batch_size, 256u);
}

TEST(PipelineConfig, JsonRoundTrip) {
  PipelineConfig c;
  c.apply_seed(42);
  c.paths["corpus"] = "a.jsonl";
  c.instruct.lr = 1e-3;
  c.eval.mode = EvalMode::generative;
  const PipelineConfig back = pipeline_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(PipelineConfig, SeedPropagatesThenSectionsOverride) {
  const auto c = pipeline_config_from_json(json{{"seed", 9}, {"inject", {{"seed", 3}}}});
  EXPECT_EQ(c.model.seed, 9u);
  EXPECT_EQ(c.instruct.seed, 9u);
  EXPECT_EQ(c.inject.seed, 3u);
}

TEST(PipelineConfig, ContextLenFollowsIntoModel) {
  const auto c = pipeline_config_from_json(json{{"context_len", 128}});
  EXPECT_EQ(c.model.context_len, 128u);
  const auto d = pipeline_config_from_json(json{{"context_len", 64}, {"model", {{"context_len", 256}}}});
  EXPECT_EQ(d.context_len, 64u);
  EXPECT_EQ(d.model.context_len, 256u);
  EXPECT_NO_THROW(d.validate());
}

TEST(PipelineConfig, Errors) {
  EXPECT_THROW(pipeline_config_from_json(json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"mix", {{"books", 1}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"eval", {{"mode", "vibes"}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"eval", {{"prompt_template", "cloze"}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"model", {{"layers", 3}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"instruct", {{"learning_rate", 0.1}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"context_len", "long"}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"inject", {{"fsdp", true}}}}).validate(), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json::array()), ConfigError);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "domainforge/instruct.hpp"
#include "support.hpp"

using namespace domainforge;
using test_support::read_file;
using test_support::source_dir;

namespace {

const std::vector<std::string> kGoldenOptions{"Insulin glargine", "Metformin", "Warfarin", "Heparin"};
const std::string kGoldenQuestion = "Which drug is a first-line oral treatment for type 2 diabetes?";

std::string golden(const std::string& name) { return read_file(source_dir() / "tests" / "golden" / name); }

class RepeatingProvider final : public ParaphraseProvider {
 public:
  std::size_t calls = 0;
  std::vector<std::string> expand(const std::string& seed, std::size_t) override {
    ++calls;
    // Always repeats the seed and one stale variant; adds one new variant per call.
    return {seed, "stale", "fresh " + std::to_string(calls)};
  }
};

class EmptyProvider final : public ParaphraseProvider {
 public:
  std::vector<std::string> expand(const std::string&, std::size_t) override { return {}; }
};

class ThrowingProvider final : public ParaphraseProvider {
 public:
  std::vector<std::string> expand(const std::string&, std::size_t) override { throw std::runtime_error("quota"); }
};

InstructionSample sample(std::string instruction, std::string response, std::optional<std::string> input = {}) {
  return {"s1", SampleKind::conversation, instruction, std::move(input), std::move(response), {instruction}};
}

}  // namespace

TEST(ParaphraseQuery, Golden) {
  EXPECT_EQ(render_paraphrase_query("How to treat flu?"), golden("paraphrase_query.txt"));
  EXPECT_EQ(render_paraphrase_query("x"), "Rewrite 10 sentences that convey similar meanings to what I've stated: x.");
  EXPECT_THROW(render_paraphrase_query(""), DataError);
}

TEST(GeneralRationalePrompt, Golden) {
  const std::string out = render_general_rationale_prompt(kGoldenQuestion, kGoldenOptions, 1);
  EXPECT_EQ(out, golden("general_rationale_prompt.txt"));
  EXPECT_EQ(out, render_general_rationale_prompt(kGoldenQuestion, kGoldenOptions, 1));
}

TEST(GeneralRationalePrompt, AnswerLetter) {
  const std::string out = render_general_rationale_prompt("Q?", {"a", "b", "c", "d"}, 2);
  EXPECT_TRUE(out.ends_with("The answer is Option C c, so the analysis is"));
  EXPECT_THROW(render_general_rationale_prompt("Q?", {"a", "b"}, 2), DataError);
}

TEST(OptionwiseRationalePrompt, Golden) {
  EXPECT_EQ(render_optionwise_rationale_prompt(kGoldenQuestion, kGoldenOptions, 1),
            golden("optionwise_rationale_prompt.txt"));
}

TEST(OptionwiseRationalePrompt, TrueOnlyOnAnswer) {
  const std::string out = render_optionwise_rationale_prompt("Q?", {"a", "b", "c", "d"}, 0);
  EXPECT_NE(out.find("Option A is TRUE. [option analysis for A]"), std::string::npos);
  EXPECT_NE(out.find("Option B is FALSE."), std::string::npos);
  EXPECT_NE(out.find("Option D is FALSE."), std::string::npos);
  EXPECT_EQ(out.find("Option B is TRUE."), std::string::npos);

  const std::string three = render_optionwise_rationale_prompt("Q?", {"a", "b", "c"}, 1);
  std::size_t lines = 0;
  for (std::size_t p = three.find("\nOption "); p != std::string::npos; p = three.find("\nOption ", p + 1)) ++lines;
  EXPECT_EQ(lines, 3u);
  EXPECT_THROW(render_optionwise_rationale_prompt("Q?", {"a"}, 5), DataError);
}

TEST(ExpandInstructions, FixtureProvider) {
  TemplateParaphraseProvider p;
  const auto v = expand_instructions("id", "How to treat flu?", p, 3);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0], "How to treat flu?");
  EXPECT_EQ(v[1], "Could you help me with this: How to treat flu?");
  EXPECT_EQ(v[2], "I have a medical question. How to treat flu?");
  EXPECT_EQ(expand_instructions("id", "seed", p, 1), std::vector<std::string>{"seed"});
}

TEST(ExpandInstructions, RequeriesOnDuplicates) {
  RepeatingProvider p;
  const auto v = expand_instructions("id", "seed", p, 5);
  ASSERT_EQ(v.size(), 5u);
  std::vector<std::string> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_EQ(p.calls, 3u);
}

TEST(ExpandInstructions, ErrorsCarrySeedId) {
  EmptyProvider empty;
  try {
    expand_instructions("conv-7", "seed", empty, 2);
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.seed_id(), "conv-7");
  }
  ThrowingProvider throwing;
  try {
    expand_instructions("conv-8", "seed", throwing, 2);
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.seed_id(), "conv-8");
    EXPECT_NE(std::string(e.what()).find("quota"), std::string::npos);
  }
  EXPECT_THROW(expand_instructions("x", "seed", empty, 0), ConfigError);
}

TEST(CompletionProvider, ParsesNumberedLines) {
  std::string seen_prompt;
  CompletionParaphraseProvider p([&](const std::string& prompt) {
    seen_prompt = prompt;
    return std::string("1. First rewrite\n2) Second rewrite\n\n  Third  \n");
  });
  const auto v = p.expand("How to treat flu?", 10);
  EXPECT_EQ(seen_prompt, golden("paraphrase_query.txt"));
  EXPECT_EQ(v, (std::vector<std::string>{"First rewrite", "Second rewrite", "Third"}));
}

TEST(KgSamples, CountsKindsAndText) {
  const auto out = build_kg_samples({{"Aspirin", "An antiplatelet drug."}, {"Gout", "Arthritis."}},
                                    {{"A", "treats", "B"}, {"C", "causes", "D"}, {"E", "prevents", "F"}});
  ASSERT_EQ(out.size(), 5u);
  EXPECT_EQ(out[0].kind, SampleKind::kg_description);
  EXPECT_EQ(out[0].instruction, "Describe the medical entity: Aspirin.");
  EXPECT_EQ(out[0].response, "An antiplatelet drug.");
  EXPECT_EQ(out[2].kind, SampleKind::kg_relation);
  EXPECT_EQ(out[2].instruction, "What is the relationship between A and B?");
  EXPECT_EQ(out[2].response, "A treats B.");
  EXPECT_TRUE(build_kg_samples({}, {}).empty());
}

TEST(RationaleSamples, CannedAnalysisAppended) {
  MCQAItem item{"q1", Dataset::medqa_usmle, std::nullopt, "Q?", {"a", "b", "c", "d"}, 1};
  CannedRationaleProvider provider(std::unordered_map<std::string, std::string>{{"q1", "Because b."}});
  const auto out = build_rationale_samples({item}, &provider);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].response, "B. b\nBecause b.");
  EXPECT_EQ(out[0].instruction, "Make a choice based on the question and options.");
  EXPECT_EQ(*out[0].input, "Q?\nA. a\nB. b\nC. c\nD. d");
  EXPECT_EQ(build_rationale_samples({item}, nullptr)[0].response, "B. b");
}

TEST(RenderTrainingExample, MaskStartsAtResponse) {
  Rng rng(0);
  const auto ex = render_training_example(sample("I", "ok"), rng, 256);
  const std::string prompt = "### Instruction:\nI\n\n### Response:\n";
  ASSERT_EQ(ex.boundary, prompt.size());
  ASSERT_EQ(ex.tokens.size(), prompt.size() + 3);
  for (std::size_t i = 0; i < ex.boundary; ++i) EXPECT_EQ(ex.loss_mask[i], 0);
  EXPECT_EQ(ex.tokens[ex.boundary], 'o');
  EXPECT_EQ(ex.tokens.back(), Vocab::kEos);
  EXPECT_EQ(std::count(ex.loss_mask.begin(), ex.loss_mask.end(), 1), 3);
}

TEST(RenderTrainingExample, InputBlock) {
  Rng rng(0);
  const auto ex = render_training_example(sample("I", "ok", "ctx"), rng, 256);
  const std::string text = decode(ex.tokens);
  EXPECT_EQ(text, "### Instruction:\nI\n\n### Input:\nctx\n\n### Response:\nok");
}

TEST(RenderTrainingExample, TruncationAndError) {
  Rng rng(0);
  const auto ex = render_training_example(sample("I", "abcdef"), rng, 37);
  EXPECT_TRUE(ex.truncated);
  EXPECT_EQ(ex.tokens.size(), 37u);
  EXPECT_EQ(decode(std::span<const TokenId>(ex.tokens).subspan(ex.boundary)), "abc");
  Rng rng2(0);
  EXPECT_THROW(render_training_example(sample("I", "abcdef"), rng2, 34), DataError);
}

TEST(RenderTrainingExample, VariantDrawReproducible) {
  InstructionSample s = sample("v0", "r");
  s.instruction_variants = {"v0", "v1", "v2"};
  std::set<std::string> seen;
  for (std::uint64_t epoch = 0; epoch < 30; ++epoch) {
    Rng a = render_stream(5, s.id, epoch), b = render_stream(5, s.id, epoch);
    const auto ea = render_training_example(s, a, 256);
    EXPECT_EQ(ea.instruction, render_training_example(s, b, 256).instruction);
    EXPECT_TRUE(std::find(s.instruction_variants.begin(), s.instruction_variants.end(), ea.instruction) !=
                s.instruction_variants.end());
    seen.insert(ea.instruction);
  }
  EXPECT_EQ(seen.size(), 3u);
}

TEST(RenderDataset, MaskSoundnessOverFixtures) {
  using test_support::fixture;
  std::vector<InstructionSample> samples =
      read_jsonl<InstructionSample>(fixture("conversations.jsonl"), conversation_record_from_json).items;
  const auto kg = build_kg_samples(read_jsonl<KGEntity>(fixture("kg_entities.jsonl"), kg_entity_from_json).items,
                                   read_jsonl<KGTriple>(fixture("kg_triples.jsonl"), kg_triple_from_json).items);
  samples.insert(samples.end(), kg.begin(), kg.end());
  TemplateParaphraseProvider provider;
  samples = build_conversation_samples(samples, provider, 4);
  const auto rendered = render_dataset(samples, 3, 0, 512);
  ASSERT_EQ(rendered.size(), samples.size());
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const auto& ex = rendered[i];
    ASSERT_FALSE(ex.truncated);
    EXPECT_EQ(static_cast<std::size_t>(std::count(ex.loss_mask.begin(), ex.loss_mask.end(), 1)),
              samples[i].response.size() + 1);
    TokenSeq response;
    for (std::size_t k = 0; k < ex.tokens.size(); ++k)
      if (ex.loss_mask[k] && ex.tokens[k] != Vocab::kEos) response.push_back(ex.tokens[k]);
    EXPECT_EQ(decode(response), samples[i].response);
  }
}

TEST(InstructionJson, RoundTripAndValidation) {
  InstructionSample s = sample("I", "R", "in");
  s.instruction_variants = {"I", "I2"};
  const auto back = instruction_sample_from_json(to_json(s));
  EXPECT_EQ(back.instruction_variants, s.instruction_variants);
  EXPECT_EQ(*back.input, "in");
  json bad = to_json(s);
  bad["response"] = "";
  EXPECT_THROW(instruction_sample_from_json(bad), DataError);
  bad = to_json(s);
  bad["kind"] = "chat";
  EXPECT_THROW(instruction_sample_from_json(bad), DataError);
  EXPECT_THROW(kg_entity_from_json(json{{"entity", ""}, {"description", "x"}}), DataError);
}

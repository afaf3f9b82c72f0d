#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "hash.hpp"
#include "jsonl.hpp"
#include "mcqa.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace domainforge {

enum class SampleKind { conversation, rationale_qa, kg_description, kg_relation };

inline std::string_view to_string(SampleKind k) {
  switch (k) {
    case SampleKind::conversation: return "conversation";
    case SampleKind::rationale_qa: return "rationale_qa";
    case SampleKind::kg_description: return "kg_description";
    case SampleKind::kg_relation: return "kg_relation";
  }
  return "?";
}

inline std::optional<SampleKind> parse_sample_kind(std::string_view s) {
  if (s == "conversation") return SampleKind::conversation;
  if (s == "rationale_qa") return SampleKind::rationale_qa;
  if (s == "kg_description") return SampleKind::kg_description;
  if (s == "kg_relation") return SampleKind::kg_relation;
  return std::nullopt;
}

struct InstructionSample {
  std::string id;
  SampleKind kind = SampleKind::conversation;
  std::string instruction;
  std::optional<std::string> input;
  std::string response;
  std::vector<std::string> instruction_variants;  // always contains `instruction`

  void validate() const {
    if (id.empty()) throw DataError("instruction sample has an empty id");
    if (response.empty()) throw DataError("instruction sample " + id + " has an empty response");
    if (instruction_variants.empty()) throw DataError("instruction sample " + id + " has no instruction variants");
  }
};

struct KGEntity {
  std::string name;
  std::string description;
};

struct KGTriple {
  std::string head;
  std::string relation;
  std::string tail;
};

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

inline std::string render_paraphrase_query(std::string_view seeds) {
  if (seeds.empty()) throw DataError("paraphrase query needs nonempty instruction seeds");
  std::string out = "Rewrite 10 sentences that convey similar meanings to what I've stated: ";
  out += seeds;
  out += '.';
  return out;
}

namespace detail {

inline constexpr std::string_view kGeneralRationaleHead =
    "Provide analysis about the question, take the following two questions as examples\n"
    "\n"
    "Quesion: Chronic urethral obstruction due to benign prismatic hyperplasia can lead to the following change in "
    "kidney parenchyma\n"
    "\n"
    "A. Hyperplasia\n"
    "B. Hyperophy\n"
    "C. Atrophy\n"
    "D. Dyplasia\n"
    "\n"
    "The answer is Option C Atrophy, so the analysis is Chronic urethral obstruction because of urinary calculi, "
    "prostatic hyperophy, tumors, normal pregnancy, tumors, uterine prolapse or functional disorders cause "
    "hydronephrosis which by definition is used to describe dilatation of renal pelvis and calculus associated with "
    "progressive atrophy of the kidney due to obstruction to the outflow of urine.\n"
    "\n"
    "Quesion: Which vitamin is supplied from only animal source?\n"
    "\n"
    "A. Vitamin C\n"
    "B. Vitamin B7\n"
    "C. Vitamin B12\n"
    "D. Vitamin D\n"
    "\n"
    "The answer is Option C Vitamin B12, so the analysis is Vitamin B12 (Cobalamin) is synthesized solely by "
    "microorganisms. In humans, the only source for humans is food of animal origin, e.g., meat, fish, and dairy "
    "products. Vegetables, fruits, and other foods of nonanimal origin doesn't contain Vitamin B12 . Daily "
    "requirements of vitamin Bp is about 1-3 pg. Body stores are of the order of 2-3 mg, sufficient for 3-4 years if "
    "supplies are completely cut off.\n"
    "\n"
    "Now help me with another question\n"
    "\n";

inline void check_choice(const std::vector<std::string>& options, std::size_t answer_idx) {
  if (options.empty() || options.size() > kMaxOptions) throw DataError("rationale prompt: option count must be in [1, 26]");
  if (answer_idx >= options.size()) throw DataError("rationale prompt: answer index out of range");
}

}  // namespace detail

// Few-shot prompt asking for a free-form analysis of the given answer.
inline std::string render_general_rationale_prompt(std::string_view question, const std::vector<std::string>& options,
                                                   std::size_t answer_idx) {
  detail::check_choice(options, answer_idx);
  std::string out(detail::kGeneralRationaleHead);
  out += question;
  out += '\n';
  out += format_options(options);
  out += "\nThe answer is ";
  out += option_phrase(options, answer_idx);
  out += ", so the analysis is";
  return out;
}

// Prompt asking for one TRUE/FALSE analysis line per option.
inline std::string render_optionwise_rationale_prompt(std::string_view question, const std::vector<std::string>& options,
                                                      std::size_t answer_idx) {
  detail::check_choice(options, answer_idx);
  std::string out(question);
  out += '\n';
  out += format_options(options);
  out += "\n\nAnswer: ";
  out += option_phrase(options, answer_idx);
  out += "\n\nAnalyze each option in detail in the format of";
  for (std::size_t i = 0; i < options.size(); ++i) {
    const char letter = option_letter(i);
    out += "\nOption ";
    out += letter;
    out += i == answer_idx ? " is TRUE. " : " is FALSE. ";
    out += "[option analysis for ";
    out += letter;
    out += ']';
  }
  return out;
}

inline constexpr std::string_view kChoiceInstruction = "Make a choice based on the question and options.";

// "### Instruction:\n{instruction}\n\n[### Input:\n{input}\n\n]### Response:\n"
inline std::string render_prompt_text(std::string_view instruction, const std::optional<std::string>& input) {
  std::string out = "### Instruction:\n";
  out += instruction;
  out += "\n\n";
  if (input) {
    out += "### Input:\n";
    out += *input;
    out += "\n\n";
  }
  out += "### Response:\n";
  return out;
}

// Question (with optional context first) followed by the lettered options.
inline std::string choice_input(const MCQAItem& item) {
  std::string out;
  if (item.context && !item.context->empty()) {
    out += *item.context;
    out += "\n\n";
  }
  out += item.question;
  out += '\n';
  out += format_options(item.options);
  return out;
}

// ---------------------------------------------------------------------------
// Providers (stand-ins for live LLM distillation)
// ---------------------------------------------------------------------------

class ParaphraseProvider {
 public:
  virtual ~ParaphraseProvider() = default;
  virtual std::vector<std::string> expand(const std::string& seed, std::size_t n) = 0;
};

// Deterministic rule-based rewrites. The first `n` templates are applied in order.
class TemplateParaphraseProvider final : public ParaphraseProvider {
 public:
  std::vector<std::string> expand(const std::string& seed, std::size_t n) override {
    static constexpr std::string_view kFrames[][2] = {
        {"Could you help me with this: ", ""},
        {"I have a medical question. ", ""},
        {"Please answer the following. ", ""},
        {"", " Please explain."},
        {"Doctor, ", ""},
        {"Question from a patient: ", ""},
        {"I would like to know: ", ""},
        {"", " What should I do?"},
        {"Can you advise? ", ""},
        {"Help me understand this. ", ""},
    };
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n && i < std::size(kFrames); ++i) {
      out.push_back(std::string(kFrames[i][0]) + seed + std::string(kFrames[i][1]));
    }
    return out;
  }
};

// Adapter for a text-completion backend: sends the paraphrase query and reads one
// rewrite per nonempty line, stripping list numbering such as "3." or "3)".
class CompletionParaphraseProvider final : public ParaphraseProvider {
 public:
  using Completion = std::function<std::string(const std::string& prompt)>;
  explicit CompletionParaphraseProvider(Completion completion) : completion_(std::move(completion)) {}

  std::vector<std::string> expand(const std::string& seed, std::size_t n) override {
    std::istringstream reply(completion_(render_paraphrase_query(seed)));
    std::vector<std::string> out;
    std::string line;
    while (out.size() < n && std::getline(reply, line)) {
      std::size_t start = line.find_first_not_of(" \t");
      if (start == std::string::npos) continue;
      std::size_t digits = start;
      while (digits < line.size() && std::isdigit(static_cast<unsigned char>(line[digits]))) ++digits;
      if (digits > start && digits < line.size() && (line[digits] == '.' || line[digits] == ')')) {
        start = line.find_first_not_of(" \t", digits + 1);
        if (start == std::string::npos) continue;
      }
      std::size_t end = line.find_last_not_of(" \t\r");
      out.push_back(line.substr(start, end - start + 1));
    }
    return out;
  }

 private:
  Completion completion_;
};

class ProviderError : public std::runtime_error {
 public:
  ProviderError(std::string seed_id, const std::string& what)
      : std::runtime_error("paraphrase provider failed for \"" + seed_id + "\": " + what), seed_id_(std::move(seed_id)) {}
  const std::string& seed_id() const noexcept { return seed_id_; }

 private:
  std::string seed_id_;
};

// Returns `n` distinct variants, the seed first. The provider is queried again
// while duplicates or empty strings leave the set short.
inline std::vector<std::string> expand_instructions(const std::string& seed_id, const std::string& seed,
                                                    ParaphraseProvider& provider, std::size_t n,
                                                    std::size_t max_queries = 16) {
  if (n == 0) throw ConfigError("expand_instructions: n must be >= 1");
  std::vector<std::string> variants{seed};
  for (std::size_t query = 0; variants.size() < n; ++query) {
    if (query == max_queries) {
      throw ProviderError(seed_id, "only " + std::to_string(variants.size()) + " distinct variants after " +
                                       std::to_string(max_queries) + " queries");
    }
    std::vector<std::string> batch;
    try {
      batch = provider.expand(seed, 10);
    } catch (const ProviderError&) {
      throw;
    } catch (const std::exception& e) {
      throw ProviderError(seed_id, e.what());
    }
    for (std::string& v : batch) {
      if (variants.size() == n) break;
      if (!v.empty() && std::find(variants.begin(), variants.end(), v) == variants.end()) variants.push_back(std::move(v));
    }
  }
  return variants;
}

// Canned rationale analyses keyed by question id.
class RationaleProvider {
 public:
  virtual ~RationaleProvider() = default;
  virtual std::optional<std::string> analyze(const MCQAItem& item, const std::string& prompt) = 0;
};

class CannedRationaleProvider final : public RationaleProvider {
 public:
  CannedRationaleProvider() = default;
  explicit CannedRationaleProvider(std::unordered_map<std::string, std::string> analyses)
      : analyses_(std::move(analyses)) {}

  std::optional<std::string> analyze(const MCQAItem& item, const std::string&) override {
    auto it = analyses_.find(item.id);
    if (it == analyses_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::unordered_map<std::string, std::string> analyses_;
};

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

inline std::vector<InstructionSample> build_kg_samples(const std::vector<KGEntity>& entities,
                                                       const std::vector<KGTriple>& triples) {
  std::vector<InstructionSample> out;
  out.reserve(entities.size() + triples.size());
  for (std::size_t i = 0; i < entities.size(); ++i) {
    const KGEntity& e = entities[i];
    std::string instruction = "Describe the medical entity: " + e.name + ".";
    out.push_back({"kg-entity-" + std::to_string(i), SampleKind::kg_description, instruction, std::nullopt,
                   e.description, {instruction}});
  }
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const KGTriple& t = triples[i];
    std::string instruction = "What is the relationship between " + t.head + " and " + t.tail + "?";
    out.push_back({"kg-triple-" + std::to_string(i), SampleKind::kg_relation, instruction, std::nullopt,
                   t.head + " " + t.relation + " " + t.tail + ".", {instruction}});
  }
  return out;
}

enum class RationaleStyle { general, optionwise };

// Choice-supervision samples; the response is the lettered answer, followed by
// the provider's analysis when one is available.
inline std::vector<InstructionSample> build_rationale_samples(const std::vector<MCQAItem>& items,
                                                              RationaleProvider* provider,
                                                              RationaleStyle style = RationaleStyle::general) {
  std::vector<InstructionSample> out;
  out.reserve(items.size());
  for (const MCQAItem& item : items) {
    std::string response = choice_answer(item, item.answer_idx);
    if (provider != nullptr) {
      const std::string prompt = style == RationaleStyle::general
                                     ? render_general_rationale_prompt(item.question, item.options, item.answer_idx)
                                     : render_optionwise_rationale_prompt(item.question, item.options, item.answer_idx);
      if (auto analysis = provider->analyze(item, prompt); analysis && !analysis->empty()) {
        response += "\n";
        response += *analysis;
      }
    }
    std::string instruction(kChoiceInstruction);
    out.push_back({"qa-" + item.id, SampleKind::rationale_qa, instruction, choice_input(item), std::move(response),
                   {instruction}});
  }
  return out;
}

// Conversation records carry (id, instruction, input?, response); the
// instruction is expanded into `variants` paraphrases.
inline std::vector<InstructionSample> build_conversation_samples(std::vector<InstructionSample> records,
                                                                 ParaphraseProvider& provider, std::size_t variants) {
  for (InstructionSample& s : records) {
    s.kind = SampleKind::conversation;
    s.instruction_variants = expand_instructions(s.id, s.instruction, provider, variants);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Rendering with response-only loss masks
// ---------------------------------------------------------------------------

struct RenderedExample {
  std::string id;
  TokenSeq tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 on response bytes and the closing EOS
  std::size_t boundary = 0;             // index of the first response token
  std::string instruction;              // the variant that was rendered
  bool truncated = false;
};

// Draws one instruction variant with `rng`, renders the training template, and
// truncates to context_len. Throws when no response token survives truncation.
inline RenderedExample render_training_example(const InstructionSample& sample, Rng& rng, std::size_t context_len) {
  sample.validate();
  const std::string& variant = sample.instruction_variants[rng.below(sample.instruction_variants.size())];
  RenderedExample out;
  out.id = sample.id;
  out.instruction = variant;
  out.tokens = encode(render_prompt_text(variant, sample.input));
  out.boundary = out.tokens.size();
  const TokenSeq response = encode(sample.response, false, true);
  out.tokens.insert(out.tokens.end(), response.begin(), response.end());
  out.loss_mask.assign(out.tokens.size(), 0);
  std::fill(out.loss_mask.begin() + static_cast<std::ptrdiff_t>(out.boundary), out.loss_mask.end(), 1);
  if (out.tokens.size() > context_len) {
    if (out.boundary >= context_len) {
      throw DataError("sample " + sample.id + " is too long: no response token fits in context_len " +
                      std::to_string(context_len));
    }
    out.tokens.resize(context_len);
    out.loss_mask.resize(context_len);
    out.truncated = true;
  }
  return out;
}

// Each (sample id, epoch) owns a dedicated random substream, so the rendered
// dataset does not depend on processing order or worker count.
inline Rng render_stream(std::uint64_t seed, const std::string& sample_id, std::uint64_t epoch) {
  return Rng::substream(mix_seed(seed, fnv1a64(sample_id)), "render", epoch);
}

inline std::vector<RenderedExample> render_dataset(const std::vector<InstructionSample>& samples, std::uint64_t seed,
                                                   std::uint64_t epoch, std::size_t context_len) {
  std::vector<RenderedExample> out;
  out.reserve(samples.size());
  for (const InstructionSample& s : samples) {
    Rng rng = render_stream(seed, s.id, epoch);
    out.push_back(render_training_example(s, rng, context_len));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O
// ---------------------------------------------------------------------------

inline json to_json(const InstructionSample& s) {
  json j = {{"id", s.id},
            {"kind", to_string(s.kind)},
            {"instruction", s.instruction},
            {"response", s.response},
            {"instruction_variants", s.instruction_variants}};
  if (s.input) j["input"] = *s.input;
  return j;
}

inline InstructionSample instruction_sample_from_json(const json& j) {
  InstructionSample s;
  s.id = require_string(j, "id");
  const std::string kind = require_string(j, "kind");
  auto parsed = parse_sample_kind(kind);
  if (!parsed) throw DataError("unknown sample kind \"" + kind + "\"");
  s.kind = *parsed;
  s.instruction = require_string(j, "instruction");
  s.input = optional_string(j, "input");
  s.response = require_string(j, "response");
  if (auto it = j.find("instruction_variants"); it != j.end()) {
    s.instruction_variants = it->get<std::vector<std::string>>();
  } else {
    s.instruction_variants = {s.instruction};
  }
  s.validate();
  return s;
}

// Conversation seed records: {"id", "instruction", "input"?, "response"}.
inline InstructionSample conversation_record_from_json(const json& j) {
  InstructionSample s;
  s.id = require_string(j, "id");
  s.kind = SampleKind::conversation;
  s.instruction = require_string(j, "instruction");
  s.input = optional_string(j, "input");
  s.response = require_string(j, "response");
  s.instruction_variants = {s.instruction};
  s.validate();
  return s;
}

inline KGEntity kg_entity_from_json(const json& j) {
  KGEntity e{require_string(j, "entity"), require_string(j, "description")};
  if (e.name.empty() || e.description.empty()) throw DataError("kg entity fields must be nonempty");
  return e;
}

inline KGTriple kg_triple_from_json(const json& j) {
  KGTriple t{require_string(j, "head"), require_string(j, "relation"), require_string(j, "tail")};
  if (t.head.empty() || t.relation.empty() || t.tail.empty()) throw DataError("kg triple fields must be nonempty");
  return t;
}

}  // namespace domainforge

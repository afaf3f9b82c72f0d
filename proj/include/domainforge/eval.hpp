#pragma once

#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "instruct.hpp"
#include "jsonl.hpp"
#include "mcqa.hpp"
#include "model.hpp"
#include "train.hpp"

namespace domainforge {

enum class EvalMode { likelihood, generative };
enum class EvalSetting { zero_shot, task_finetune };
enum class Normalization { per_token_mean, sum };
// choice: lettered options in the prompt, answer "C. text".
// cloze:  question only, answer is the option text; independent of option order.
enum class PromptTemplate { choice, cloze };

inline std::string_view to_string(EvalMode m) { return m == EvalMode::likelihood ? "likelihood" : "generative"; }
inline std::string_view to_string(EvalSetting s) { return s == EvalSetting::zero_shot ? "zero-shot" : "task-finetune"; }
inline std::string_view to_string(Normalization n) { return n == Normalization::per_token_mean ? "per_token_mean" : "sum"; }
inline std::string_view to_string(PromptTemplate t) { return t == PromptTemplate::choice ? "choice" : "cloze"; }

inline EvalMode parse_eval_mode(std::string_view s) {
  if (s == "likelihood") return EvalMode::likelihood;
  if (s == "generative") return EvalMode::generative;
  throw ConfigError("mode must be likelihood or generative");
}
inline EvalSetting parse_eval_setting(std::string_view s) {
  if (s == "zero-shot" || s == "zero_shot") return EvalSetting::zero_shot;
  if (s == "task-finetune" || s == "task_finetune") return EvalSetting::task_finetune;
  throw ConfigError("setting must be zero-shot or task-finetune");
}
inline Normalization parse_normalization(std::string_view s) {
  if (s == "per_token_mean") return Normalization::per_token_mean;
  if (s == "sum") return Normalization::sum;
  throw ConfigError("normalization must be per_token_mean or sum");
}
inline PromptTemplate parse_prompt_template(std::string_view s) {
  if (s == "choice") return PromptTemplate::choice;
  if (s == "cloze") return PromptTemplate::cloze;
  throw ConfigError("template must be choice or cloze");
}

struct EvalConfig {
  EvalMode mode = EvalMode::likelihood;
  EvalSetting setting = EvalSetting::zero_shot;
  PromptTemplate prompt_template = PromptTemplate::choice;
  Normalization normalization = Normalization::per_token_mean;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 32;
  std::vector<Dataset> datasets;  // groups expected in the report; empty = whatever is present
};

inline json to_json(const EvalConfig& c) {
  json ds = json::array();
  for (Dataset d : c.datasets) ds.push_back(to_string(d));
  return {{"mode", to_string(c.mode)},
          {"setting", to_string(c.setting)},
          {"template", to_string(c.prompt_template)},
          {"normalization", to_string(c.normalization)},
          {"seed", c.seed},
          {"max_new_tokens", c.max_new_tokens},
          {"datasets", ds}};
}

inline EvalConfig eval_config_from_json(const json& j, EvalConfig base) {
  if (auto it = j.find("mode"); it != j.end()) base.mode = parse_eval_mode(it->get<std::string>());
  if (auto it = j.find("setting"); it != j.end()) base.setting = parse_eval_setting(it->get<std::string>());
  if (auto it = j.find("template"); it != j.end()) base.prompt_template = parse_prompt_template(it->get<std::string>());
  if (auto it = j.find("normalization"); it != j.end()) base.normalization = parse_normalization(it->get<std::string>());
  base.seed = j.value("seed", base.seed);
  base.max_new_tokens = j.value("max_new_tokens", base.max_new_tokens);
  if (auto it = j.find("datasets"); it != j.end()) {
    base.datasets.clear();
    for (const json& d : *it) {
      auto parsed = parse_dataset(d.get<std::string>());
      if (!parsed) throw ConfigError("unknown dataset \"" + d.get<std::string>() + "\"");
      base.datasets.push_back(*parsed);
    }
  }
  return base;
}

inline constexpr std::string_view kClozeInstruction = "Answer the question.";

struct EvalPrompt {
  std::string instruction;
  std::optional<std::string> input;
};

inline EvalPrompt eval_prompt(const MCQAItem& item, PromptTemplate t) {
  if (t == PromptTemplate::choice) return {std::string(kChoiceInstruction), choice_input(item)};
  std::string input;
  if (item.context && !item.context->empty()) input = *item.context + "\n\n";
  input += item.question;
  return {std::string(kClozeInstruction), input};
}

inline std::string answer_text(const MCQAItem& item, std::size_t index, PromptTemplate t) {
  return t == PromptTemplate::choice ? choice_answer(item, index) : item.options.at(index);
}

// Plain choice-supervision samples (response = option letter + option text).
inline std::vector<InstructionSample> choice_samples(const std::vector<MCQAItem>& items,
                                                     PromptTemplate t = PromptTemplate::choice) {
  std::vector<InstructionSample> out;
  out.reserve(items.size());
  for (const MCQAItem& item : items) {
    EvalPrompt p = eval_prompt(item, t);
    out.push_back({"qa-" + item.id, SampleKind::rationale_qa, p.instruction, p.input,
                   answer_text(item, item.answer_idx, t), {p.instruction}});
  }
  return out;
}

// Log-probability of the answer (and closing EOS) given the rendered prompt,
// averaged per token or summed.
template <class S>
double score_option(const Model<S>& model, const MCQAItem& item, std::size_t option_idx, const EvalConfig& cfg) {
  item.validate();
  if (option_idx >= item.options.size()) throw DataError("item " + item.id + ": option index out of range");
  const EvalPrompt p = eval_prompt(item, cfg.prompt_template);
  const TokenSeq prompt = encode(render_prompt_text(p.instruction, p.input));
  const TokenSeq answer = encode(answer_text(item, option_idx, cfg.prompt_template), false, true);
  if (prompt.size() + answer.size() - 1 > model.config.context_len) {
    throw DataError("item " + item.id + ": prompt and answer exceed context_len " +
                    std::to_string(model.config.context_len));
  }
  const auto [sum, count] = continuation_log_prob(model, prompt, answer);
  return cfg.normalization == Normalization::per_token_mean ? sum / static_cast<double>(count) : sum;
}

// First option letter in `text`, scanning left to right, written as "Option X",
// "(X)", "X." or a standalone X. Letters beyond the option count are skipped.
inline std::optional<std::size_t> extract_option_letter(std::string_view text, std::size_t option_count) {
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  auto valid = [&](char c) { return c >= 'A' && static_cast<std::size_t>(c - 'A') < option_count; };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const bool boundary_before = i == 0 || !is_word(text[i - 1]);
    if (boundary_before && text.substr(i, 7) == "Option " && i + 7 < text.size() && valid(text[i + 7]) &&
        (i + 8 == text.size() || !is_word(text[i + 8]))) {
      return static_cast<std::size_t>(text[i + 7] - 'A');
    }
    if (text[i] == '(' && i + 2 < text.size() && valid(text[i + 1]) && text[i + 2] == ')') {
      return static_cast<std::size_t>(text[i + 1] - 'A');
    }
    if (boundary_before && valid(text[i]) && (i + 1 == text.size() || !is_word(text[i + 1]))) {
      return static_cast<std::size_t>(text[i] - 'A');  // covers "X." and standalone X
    }
  }
  return std::nullopt;
}

struct Prediction {
  std::string id;
  Dataset dataset = Dataset::other;
  std::size_t predicted = 0;
  std::size_t answer = 0;
  bool fallback = false;  // generative extraction failed, likelihood used instead
  std::vector<double> scores;
  std::string generated;

  bool correct() const noexcept { return predicted == answer; }
};

template <class S>
std::size_t argmax_lowest(const std::vector<S>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <class S>
Prediction predict(const Model<S>& model, const MCQAItem& item, const EvalConfig& cfg) {
  item.validate();
  Prediction out{item.id, item.dataset, 0, item.answer_idx, false, {}, {}};
  if (cfg.mode == EvalMode::generative) {
    const EvalPrompt p = eval_prompt(item, cfg.prompt_template);
    const TokenSeq prompt = encode(render_prompt_text(p.instruction, p.input));
    if (prompt.size() > model.config.context_len) {
      throw DataError("item " + item.id + ": prompt exceeds context_len " + std::to_string(model.config.context_len));
    }
    out.generated = decode(greedy_generate(model, prompt, cfg.max_new_tokens));
    if (auto letter = extract_option_letter(out.generated, item.options.size())) {
      out.predicted = *letter;
      return out;
    }
    out.fallback = true;
  }
  for (std::size_t i = 0; i < item.options.size(); ++i) out.scores.push_back(score_option(model, item, i, cfg));
  out.predicted = argmax_lowest(out.scores);
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct DatasetScore {
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const noexcept { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

// Round half up to `digits` decimals. A small tolerance absorbs binary
// representation error in values such as 54.965.
inline double round_half_up(double x, int digits = 2) {
  const double scale = std::pow(10.0, digits);
  return std::floor(x * scale + 0.5 + 1e-9) / scale;
}

struct EvalReport {
  EvalConfig config;
  std::map<Dataset, DatasetScore> datasets;  // enum order
  double average = 0;                        // mean of per-dataset accuracies
  std::vector<std::string> warnings;
  std::vector<Prediction> predictions;
  std::string checkpoint;
  json config_echo = json::object();

  std::size_t fallbacks() const {
    return static_cast<std::size_t>(
        std::count_if(predictions.begin(), predictions.end(), [](const Prediction& p) { return p.fallback; }));
  }
};

inline void finalize_report(EvalReport& report) {
  for (Dataset d : report.config.datasets) {
    if (!report.datasets.count(d)) report.warnings.push_back("dataset " + std::string(to_string(d)) + " has no items; excluded from the average");
  }
  double sum = 0;
  for (const auto& [d, s] : report.datasets) sum += s.accuracy();
  report.average = report.datasets.empty() ? 0.0 : sum / static_cast<double>(report.datasets.size());
}

template <class S>
EvalReport evaluate(const Model<S>& model, const std::vector<MCQAItem>& items, const EvalConfig& cfg) {
  if (items.empty()) throw DataError("evaluate: no items");
  EvalReport report;
  report.config = cfg;
  for (const MCQAItem& item : items) {
    Prediction p = predict(model, item, cfg);
    DatasetScore& s = report.datasets[item.dataset];
    s.n += 1;
    s.correct += p.correct();
    report.predictions.push_back(std::move(p));
  }
  finalize_report(report);
  return report;
}

inline json to_json(const EvalReport& r) {
  json datasets = json::object();
  for (const auto& [d, s] : r.datasets) {
    datasets[std::string(to_string(d))] = {{"n", s.n}, {"correct", s.correct}, {"accuracy", s.accuracy()}};
  }
  json predictions = json::array();
  for (const Prediction& p : r.predictions) {
    json jp = {{"id", p.id}, {"dataset", to_string(p.dataset)}, {"predicted", p.predicted},
               {"answer", p.answer}, {"correct", p.correct()}, {"fallback", p.fallback}};
    if (!p.scores.empty()) jp["scores"] = p.scores;
    if (r.config.mode == EvalMode::generative) jp["generated"] = p.generated;
    predictions.push_back(std::move(jp));
  }
  return {{"setting", to_string(r.config.setting)},
          {"eval", to_json(r.config)},
          {"datasets", datasets},
          {"average", r.average},
          {"average_percent", round_half_up(100.0 * r.average)},
          {"warnings", r.warnings},
          {"fallbacks", r.fallbacks()},
          {"predictions", predictions},
          {"checkpoint", r.checkpoint},
          {"config", r.config_echo}};
}

// Fine-tunes on choice-supervision samples built from train_items, then
// evaluates. With train_cfg.epochs == 0 the model is evaluated unchanged.
inline EvalReport task_finetune_then_eval(const Model<float>& model, const std::vector<MCQAItem>& train_items,
                                          const std::vector<MCQAItem>& test_items, TrainConfig train_cfg,
                                          EvalConfig eval_cfg) {
  eval_cfg.setting = EvalSetting::task_finetune;
  if (train_cfg.epochs == 0) return evaluate(model, test_items, eval_cfg);
  InstructionTrainer trainer(model, choice_samples(train_items, eval_cfg.prompt_template), train_cfg);
  trainer.run();
  return evaluate(trainer.model(), test_items, eval_cfg);
}

// ---------------------------------------------------------------------------
// Results-table arithmetic
// ---------------------------------------------------------------------------

struct TableRow {
  std::string name;
  std::vector<std::pair<std::string, double>> values;  // percentages as printed
  std::optional<double> printed_average;
};

struct TableAverage {
  std::string name;
  double average = 0;  // rounded half-up to 2 decimals
  std::optional<std::string> note;
};

inline TableAverage table_average(const TableRow& row) {
  if (row.values.empty()) throw DataError("table row " + row.name + " has no values");
  double sum = 0;
  for (const auto& [_, v] : row.values) sum += v;
  TableAverage out{row.name, round_half_up(sum / static_cast<double>(row.values.size())), std::nullopt};
  if (row.printed_average && std::abs(*row.printed_average - out.average) > 0.005) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "printed average %.2f differs from the mean of the listed values %.2f",
                  *row.printed_average, out.average);
    out.note = buf;
  }
  return out;
}

inline TableRow table_row_from_json(const json& j) {
  TableRow row;
  row.name = require_string(j, "name");
  const json& values = require_field(j, "values");
  if (!values.is_object()) throw DataError("table row values must be an object");
  for (const auto& [k, v] : values.items()) row.values.emplace_back(k, v.get<double>());
  if (auto it = j.find("printed_average"); it != j.end() && !it->is_null()) row.printed_average = it->get<double>();
  return row;
}

inline json to_json(const TableAverage& a) {
  json j = {{"name", a.name}, {"average", a.average}};
  if (a.note) j["note"] = *a.note;
  return j;
}

}  // namespace domainforge

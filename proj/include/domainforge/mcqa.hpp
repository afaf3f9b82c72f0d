#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "jsonl.hpp"

namespace domainforge {

enum class Dataset { pubmedqa, medmcqa, medqa_usmle, other };

inline std::string_view to_string(Dataset d) {
  switch (d) {
    case Dataset::pubmedqa: return "pubmedqa";
    case Dataset::medmcqa: return "medmcqa";
    case Dataset::medqa_usmle: return "medqa_usmle";
    case Dataset::other: return "other";
  }
  return "other";
}

inline std::optional<Dataset> parse_dataset(std::string_view s) {
  if (s == "pubmedqa") return Dataset::pubmedqa;
  if (s == "medmcqa") return Dataset::medmcqa;
  if (s == "medqa_usmle") return Dataset::medqa_usmle;
  if (s == "other") return Dataset::other;
  return std::nullopt;
}

inline constexpr std::size_t kMinOptions = 2;
inline constexpr std::size_t kMaxOptions = 26;

inline char option_letter(std::size_t index) { return static_cast<char>('A' + index); }

struct MCQAItem {
  std::string id;
  Dataset dataset = Dataset::other;
  std::optional<std::string> context;
  std::string question;
  std::vector<std::string> options;
  std::size_t answer_idx = 0;

  void validate() const {
    if (id.empty()) throw DataError("mcqa item has an empty id");
    if (options.size() < kMinOptions || options.size() > kMaxOptions) {
      throw DataError("mcqa item " + id + ": option count must be in [2, 26]");
    }
    if (answer_idx >= options.size()) throw DataError("mcqa item " + id + ": answer_idx out of range");
    if (dataset == Dataset::pubmedqa && options != std::vector<std::string>{"yes", "no", "maybe"}) {
      throw DataError("mcqa item " + id + ": pubmedqa options must be [yes, no, maybe]");
    }
  }
};

// "A. first\nB. second..." without a trailing newline.
inline std::string format_options(const std::vector<std::string>& options) {
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out += option_letter(i);
    out += ". ";
    out += options[i];
  }
  return out;
}

// "Option C Atrophy": the answer phrasing used by the rationale prompts.
inline std::string option_phrase(const std::vector<std::string>& options, std::size_t index) {
  return std::string("Option ") + option_letter(index) + " " + options.at(index);
}

// The supervised answer string for choice-style prompts: "C. Atrophy".
inline std::string choice_answer(const MCQAItem& item, std::size_t index) {
  return std::string(1, option_letter(index)) + ". " + item.options.at(index);
}

inline MCQAItem mcqa_item_from_json(const json& j) {
  MCQAItem item;
  item.id = require_string(j, "id");
  const std::string dataset = require_string(j, "dataset");
  auto parsed = parse_dataset(dataset);
  if (!parsed) throw DataError("unknown dataset \"" + dataset + "\"");
  item.dataset = *parsed;
  item.context = optional_string(j, "context");
  item.question = require_string(j, "question");
  const json& options = require_field(j, "options");
  if (!options.is_array()) throw DataError("field \"options\" must be an array");
  for (const json& o : options) {
    if (!o.is_string()) throw DataError("options must be strings");
    item.options.push_back(o.get<std::string>());
  }
  const json& answer = require_field(j, "answer_idx");
  if (!answer.is_number_integer() || answer.get<long long>() < 0) throw DataError("answer_idx must be a nonnegative integer");
  item.answer_idx = answer.get<std::size_t>();
  item.validate();
  return item;
}

inline json to_json(const MCQAItem& item) {
  json j = {{"id", item.id},
            {"dataset", to_string(item.dataset)},
            {"question", item.question},
            {"options", item.options},
            {"answer_idx", item.answer_idx}};
  if (item.context) j["context"] = *item.context;
  return j;
}

inline Ingested<MCQAItem> read_mcqa(const std::filesystem::path& path) {
  return read_jsonl<MCQAItem>(path, mcqa_item_from_json);
}

}  // namespace domainforge

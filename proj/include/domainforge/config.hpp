#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "corpus.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "jsonl.hpp"
#include "mixer.hpp"
#include "model.hpp"
#include "train.hpp"

namespace domainforge {

inline constexpr std::string_view kVersion = "1.0.0";

// Everything one pipeline run depends on. Serialized verbatim into every
// artifact so a run can be reproduced from its outputs.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::map<std::string, std::string> paths;
  CleanOptions clean;
  std::size_t context_len = 64;  // packing window and model context
  MixRatio mix;
  ModelConfig model;
  TrainConfig inject = TrainConfig::for_stage(Stage::inject);
  TrainConfig instruct = TrainConfig::for_stage(Stage::instruct);
  EvalConfig eval;
  std::size_t variants = 1;
  std::string provider = "fixture";

  PipelineConfig() { model.context_len = context_len; }

  // One seed drives every randomized component.
  void apply_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    inject.seed = s;
    instruct.seed = s;
    eval.seed = s;
    clean.dedup_config.seed = s;
  }

  void validate() const {
    model.validate();
    inject.validate();
    instruct.validate();
    mix.validate();
    if (context_len < 2) throw ConfigError("context_len must be >= 2");
    if (context_len > model.context_len) throw ConfigError("context_len exceeds model.context_len");
    if (variants < 1) throw ConfigError("variants must be >= 1");
    if (provider != "fixture") throw ConfigError("provider must be \"fixture\"");
    if (clean.workers < 1) throw ConfigError("clean.workers must be >= 1");
  }
};

inline json to_json(const PipelineConfig& c) {
  const DedupConfig& d = c.clean.dedup_config;
  return {{"seed", c.seed},
          {"paths", c.paths},
          {"clean",
           {{"dedup", c.clean.dedup},
            {"workers", c.clean.workers},
            {"shingle_width", d.shingle_width},
            {"signature_size", d.signature_size},
            {"threshold", d.threshold},
            {"bands", d.bands}}},
          {"context_len", c.context_len},
          {"mix", to_json(c.mix)},
          {"model", to_json(c.model)},
          {"inject", to_json(c.inject)},
          {"instruct", to_json(c.instruct)},
          {"eval", to_json(c.eval)},
          {"variants", c.variants},
          {"provider", c.provider}};
}

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key \"" + where + key + "\"");
    }
  }
}

}  // namespace detail

// Keys absent from `j` keep their defaults; unknown keys are errors. A
// top-level "seed" seeds every component, after which per-section seeds win.
inline PipelineConfig pipeline_config_from_json(const json& j, PipelineConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  detail::reject_unknown(j,
                         {"seed", "paths", "clean", "context_len", "mix", "model", "inject", "instruct", "eval",
                          "variants", "provider"},
                         "");
  try {
    if (auto it = j.find("seed"); it != j.end()) base.apply_seed(it->get<std::uint64_t>());
    if (auto it = j.find("paths"); it != j.end()) {
      for (const auto& [k, v] : it->items()) base.paths[k] = v.get<std::string>();
    }
    if (auto it = j.find("clean"); it != j.end()) {
      detail::reject_unknown(*it, {"dedup", "workers", "shingle_width", "signature_size", "threshold", "bands"}, "clean.");
      base.clean.dedup = it->value("dedup", base.clean.dedup);
      base.clean.workers = it->value("workers", base.clean.workers);
      DedupConfig& d = base.clean.dedup_config;
      d.shingle_width = it->value("shingle_width", d.shingle_width);
      d.signature_size = it->value("signature_size", d.signature_size);
      d.threshold = it->value("threshold", d.threshold);
      d.bands = it->value("bands", d.bands);
    }
    if (auto it = j.find("context_len"); it != j.end()) {
      base.context_len = it->get<std::size_t>();
      base.model.context_len = base.context_len;
    }
    if (auto it = j.find("mix"); it != j.end()) {
      detail::reject_unknown(*it, {"book", "paper", "general"}, "mix.");
      base.mix.book = it->value("book", base.mix.book);
      base.mix.paper = it->value("paper", base.mix.paper);
      base.mix.general = it->value("general", base.mix.general);
    }
    if (auto it = j.find("model"); it != j.end()) {
      detail::reject_unknown(*it, {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "context_len", "pos_encoding",
                                   "feed_forward", "tie_embeddings", "seed"},
                             "model.");
      base.model = model_config_from_json(*it, base.model);
    }
    for (const char* stage : {"inject", "instruct"}) {
      auto it = j.find(stage);
      if (it == j.end()) continue;
      detail::reject_unknown(*it, {"stage", "lr", "betas", "eps", "weight_decay", "batch_size", "epochs", "grad_clip", "seed",
                                   "max_steps", "fsdp", "bf16", "gradient_checkpointing", "num_accelerators"},
                             std::string(stage) + ".");
      TrainConfig& t = std::string_view(stage) == "inject" ? base.inject : base.instruct;
      t = train_config_from_json(*it, t);
    }
    if (auto it = j.find("eval"); it != j.end()) {
      detail::reject_unknown(*it, {"mode", "setting", "template", "normalization", "seed", "max_new_tokens", "datasets"}, "eval.");
      base.eval = eval_config_from_json(*it, base.eval);
    }
    base.variants = j.value("variants", base.variants);
    base.provider = j.value("provider", base.provider);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config has a value of the wrong type: ") + e.what());
  }
  base.inject.stage = Stage::inject;
  base.instruct.stage = Stage::instruct;
  return base;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  try {
    return pipeline_config_from_json(read_json(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
}

}  // namespace domainforge

// domainforge command-line entry point.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "domainforge/domainforge.hpp"

namespace fs = std::filesystem;
using namespace domainforge;

namespace {

struct FileNotFound : std::runtime_error {
  explicit FileNotFound(const fs::path& p) : std::runtime_error("file not found: " + p.string()), path(p.string()) {}
  std::string path;
};

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw FileNotFound(p);
}

void print_error(const std::string& type, const std::string& message, json extra = json::object()) {
  json block = {{"type", type}, {"message", message}};
  for (auto& [k, v] : extra.items()) block[k] = v;
  std::cerr << json{{"error", block}}.dump(2) << '\n';
}

void warn_diagnostics(const fs::path& path, const std::vector<Diagnostic>& diags) {
  for (const Diagnostic& d : diags) std::cerr << "warning: " << path.string() << ":" << d.line << ": " << d.message << '\n';
}

json diagnostics_json(const std::vector<Diagnostic>& diags) {
  json out = json::array();
  for (const Diagnostic& d : diags) out.push_back({{"line", d.line}, {"message", d.message}});
  return out;
}

// Non-JSON artifacts carry their configuration in a sidecar file.
void write_sidecar(const fs::path& artifact, json content) { write_json(artifact.string() + ".config.json", content); }

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

PipelineConfig base_config(const Globals& g) {
  PipelineConfig cfg;
  if (!g.config_path.empty()) {
    require_file(g.config_path);
    cfg = load_pipeline_config(g.config_path);
  }
  if (g.seed) cfg.apply_seed(*g.seed);
  return cfg;
}

// Flags shared by both training commands; only flags given on the command line
// override the configuration file.
struct TrainFlags {
  std::optional<double> lr;
  std::optional<std::size_t> batch_size, epochs, max_steps;
  std::optional<double> grad_clip;

  void add(CLI::App* cmd) {
    cmd->add_option("--lr", lr, "Learning rate");
    cmd->add_option("--batch-size", batch_size, "Rows per step");
    cmd->add_option("--epochs", epochs, "Epochs");
    cmd->add_option("--max-steps", max_steps, "Stop after this many optimizer steps (0 = no limit)");
    cmd->add_option("--grad-clip", grad_clip, "Global-norm clip (0 disables)");
  }
  void apply(TrainConfig& t) const {
    if (lr) t.lr = *lr;
    if (batch_size) t.batch_size = *batch_size;
    if (epochs) t.epochs = *epochs;
    if (max_steps) t.max_steps = *max_steps;
    if (grad_clip) t.grad_clip = *grad_clip;
  }
};

void write_log(const std::string& path, const std::vector<TrainRecord>& log) {
  if (!path.empty()) write_jsonl(path, log, [](const TrainRecord& r) { return to_json(r); });
}

void print_progress(const TrainRecord& r) {
  if (r.step % 10 == 0) std::fprintf(stderr, "step %llu loss %.4f epoch %llu\n", static_cast<unsigned long long>(r.step), r.loss,
                                     static_cast<unsigned long long>(r.book_epoch));
}

// ---------------------------------------------------------------------------

struct CleanCmd {
  std::string in, out, report;
  bool no_dedup = false;
  std::optional<std::size_t> workers;

  int run(const Globals& g) const {
    PipelineConfig cfg = base_config(g);
    if (no_dedup) cfg.clean.dedup = false;
    if (workers) cfg.clean.workers = *workers;
    cfg.paths["clean.in"] = in;
    cfg.validate();
    require_file(in);
    const auto ingested = ingest(in);
    warn_diagnostics(in, ingested.diagnostics);
    const CleanOutput result = clean_corpus(ingested.items, cfg.clean);
    write_jsonl(out, result.documents, [](const CleanDocument& d) { return to_json(d); });
    const json echo = to_json(cfg);
    write_sidecar(out, echo);
    json rep = to_json(result.report);
    rep["malformed_lines"] = diagnostics_json(ingested.diagnostics);
    rep["config"] = echo;
    if (!report.empty()) write_json(report, rep);
    std::cout << "cleaned " << result.report.documents_in << " -> " << result.report.documents_out << " documents\n";
    return 0;
  }
};

struct PackCmd {
  std::string in, source, out;
  std::optional<std::size_t> ctx;

  int run(const Globals& g) const {
    PipelineConfig cfg = base_config(g);
    if (ctx) cfg.context_len = *ctx;
    if (cfg.model.context_len < cfg.context_len) cfg.model.context_len = cfg.context_len;
    cfg.validate();
    const auto src = parse_source(source);
    if (!src) throw ConfigError("unknown source \"" + source + "\"");
    require_file(in);
    const auto docs = read_clean_documents(in);
    warn_diagnostics(in, docs.diagnostics);
    std::vector<CleanDocument> selected;
    for (const auto& d : docs.items)
      if (d.source == *src) selected.push_back(d);
    if (selected.empty()) throw DataError("no documents with source \"" + source + "\" in " + in);
    PackCache cache{cfg.context_len, pack(selected, cfg.context_len)};
    write_pack_cache(out, cache);
    write_sidecar(out, {{"source", source}, {"documents", selected.size()}, {"sequences", cache.sequences.size()},
                        {"context_len", cfg.context_len}, {"config", to_json(cfg)}});
    std::cout << "packed " << selected.size() << " documents into " << cache.sequences.size() << " sequences\n";
    return 0;
  }
};

struct BuildInstructCmd {
  std::string conversations, qa, kg_entities, kg_triples, rationales, out, provider = "fixture", style = "general";
  std::optional<std::size_t> variants;

  int run(const Globals& g) const {
    PipelineConfig cfg = base_config(g);
    if (variants) cfg.variants = *variants;
    cfg.provider = provider;
    cfg.validate();
    if (conversations.empty() && qa.empty() && kg_entities.empty() && kg_triples.empty()) {
      throw ConfigError("build-instruct needs at least one of --conversations, --qa, --kg-entities, --kg-triples");
    }
    std::vector<InstructionSample> samples;
    TemplateParaphraseProvider paraphraser;
    if (!conversations.empty()) {
      require_file(conversations);
      auto recs = read_jsonl<InstructionSample>(conversations, conversation_record_from_json);
      warn_diagnostics(conversations, recs.diagnostics);
      for (auto& s : build_conversation_samples(std::move(recs.items), paraphraser, cfg.variants)) samples.push_back(std::move(s));
    }
    if (!qa.empty()) {
      require_file(qa);
      auto items = read_mcqa(qa);
      warn_diagnostics(qa, items.diagnostics);
      std::optional<CannedRationaleProvider> canned;
      if (!rationales.empty()) {
        require_file(rationales);
        std::unordered_map<std::string, std::string> map;
        const json doc = read_json(rationales);
        if (!doc.is_object()) throw DataError(rationales + ": expected an object mapping item id to analysis");
        for (const auto& [id, text] : doc.items()) map[id] = text.get<std::string>();
        canned.emplace(std::move(map));
      }
      const RationaleStyle rs = style == "optionwise" ? RationaleStyle::optionwise : RationaleStyle::general;
      if (style != "general" && style != "optionwise") throw ConfigError("--rationale-style must be general or optionwise");
      for (auto& s : build_rationale_samples(items.items, canned ? &*canned : nullptr, rs)) samples.push_back(std::move(s));
    }
    std::vector<KGEntity> entities;
    std::vector<KGTriple> triples;
    if (!kg_entities.empty()) {
      require_file(kg_entities);
      auto r = read_jsonl<KGEntity>(kg_entities, kg_entity_from_json);
      warn_diagnostics(kg_entities, r.diagnostics);
      entities = std::move(r.items);
    }
    if (!kg_triples.empty()) {
      require_file(kg_triples);
      auto r = read_jsonl<KGTriple>(kg_triples, kg_triple_from_json);
      warn_diagnostics(kg_triples, r.diagnostics);
      triples = std::move(r.items);
    }
    for (auto& s : build_kg_samples(entities, triples)) samples.push_back(std::move(s));
    if (samples.empty()) throw DataError("no instruction samples were produced");
    write_jsonl(out, samples, [](const InstructionSample& s) { return to_json(s); });
    write_sidecar(out, {{"samples", samples.size()}, {"config", to_json(cfg)}});
    std::cout << "wrote " << samples.size() << " instruction samples\n";
    return 0;
  }
};

struct TrainInjectCmd {
  std::string book, paper, general, ckpt_out, log, init, resume;
  std::size_t save_every = 0;
  TrainFlags flags;

  int run(const Globals& g) const {
    PipelineConfig cfg = base_config(g);
    flags.apply(cfg.inject);
    cfg.validate();
    std::array<std::vector<PackedSequence>, 3> streams;
    const std::array<const std::string*, 3> files{&book, &paper, &general};
    for (std::size_t i = 0; i < 3; ++i) {
      if (files[i]->empty()) continue;
      require_file(*files[i]);
      streams[i] = read_pack_cache(*files[i]).sequences;
    }
    Mixer mixer(std::move(streams), cfg.mix, cfg.inject.batch_size, cfg.inject.seed);
    const json echo = to_json(cfg);

    std::optional<InjectionTrainer> trainer;
    if (!resume.empty()) {
      require_file(resume);
      Checkpoint ck = load_checkpoint(resume);
      if (flags.max_steps) ck.train.max_steps = *flags.max_steps;
      if (flags.epochs) ck.train.epochs = *flags.epochs;
      trainer.emplace(std::move(ck), mixer);
    } else {
      Model<float> model = Model<float>::initialize(cfg.model);
      if (!init.empty()) {
        require_file(init);
        model = load_checkpoint(init).model;
      }
      trainer.emplace(std::move(model), mixer, cfg.inject);
    }
    trainer->checkpoint().config = echo;
    trainer->run([&](const TrainRecord& r) {
      print_progress(r);
      if (save_every > 0 && r.step % save_every == 0) save_checkpoint(ckpt_out, trainer->checkpoint());
    });
    save_checkpoint(ckpt_out, trainer->checkpoint());
    write_log(log, trainer->log());
    const auto& last = trainer->log();
    std::cout << "trained " << last.size() << " steps";
    if (!last.empty()) std::cout << ", final loss " << last.back().loss;
    std::cout << '\n';
    return 0;
  }
};

struct TrainInstructCmd {
  std::string data, ckpt_out, log, init, resume;
  std::size_t save_every = 0;
  TrainFlags flags;

  int run(const Globals& g) const {
    PipelineConfig cfg = base_config(g);
    flags.apply(cfg.instruct);
    cfg.validate();
    require_file(data);
    auto samples = read_jsonl<InstructionSample>(data, instruction_sample_from_json);
    warn_diagnostics(data, samples.diagnostics);
    const json echo = to_json(cfg);

    std::optional<InstructionTrainer> trainer;
    if (!resume.empty()) {
      require_file(resume);
      Checkpoint ck = load_checkpoint(resume);
      if (flags.max_steps) ck.train.max_steps = *flags.max_steps;
      if (flags.epochs) ck.train.epochs = *flags.epochs;
      trainer.emplace(std::move(ck), std::move(samples.items));
    } else {
      Model<float> model = Model<float>::initialize(cfg.model);
      if (!init.empty()) {
        require_file(init);
        model = load_checkpoint(init).model;
      }
      trainer.emplace(std::move(model), std::move(samples.items), cfg.instruct);
    }
    trainer->checkpoint().config = echo;
    trainer->run([&](const TrainRecord& r) {
      print_progress(r);
      if (save_every > 0 && r.step % save_every == 0) save_checkpoint(ckpt_out, trainer->checkpoint());
    });
    save_checkpoint(ckpt_out, trainer->checkpoint());
    write_log(log, trainer->log());
    std::cout << "trained " << trainer->log().size() << " steps\n";
    return 0;
  }
};

struct EvalCmd {
  std::string ckpt, data, train_data, out;
  std::optional<std::string> mode, setting, prompt_template, normalization;

  int run(const Globals& g) const {
    PipelineConfig cfg = base_config(g);
    if (mode) cfg.eval.mode = parse_eval_mode(*mode);
    if (setting) cfg.eval.setting = parse_eval_setting(*setting);
    if (prompt_template) cfg.eval.prompt_template = parse_prompt_template(*prompt_template);
    if (normalization) cfg.eval.normalization = parse_normalization(*normalization);
    cfg.validate();
    require_file(ckpt);
    const Model<float> model = load_checkpoint(ckpt).model;
    const auto read_items = [](const std::string& list) {
      std::vector<MCQAItem> items;
      for (const std::string& f : split_commas(list)) {
        require_file(f);
        auto r = read_mcqa(f);
        warn_diagnostics(f, r.diagnostics);
        items.insert(items.end(), r.items.begin(), r.items.end());
      }
      return items;
    };
    const std::vector<MCQAItem> items = read_items(data);
    EvalReport report;
    if (cfg.eval.setting == EvalSetting::task_finetune) {
      if (train_data.empty()) throw ConfigError("--setting task-finetune needs --train-data");
      report = task_finetune_then_eval(model, read_items(train_data), items, cfg.instruct, cfg.eval);
    } else {
      report = evaluate(model, items, cfg.eval);
    }
    report.checkpoint = ckpt;
    report.config_echo = to_json(cfg);
    for (const std::string& w : report.warnings) std::cerr << "warning: " << w << '\n';
    write_json(out, to_json(report));
    std::printf("average accuracy %.2f%% over %zu items (%zu fallbacks)\n", round_half_up(100.0 * report.average),
                items.size(), report.fallbacks());
    return 0;
  }
};

struct ReportCmd {
  std::string in, out;

  int run(const Globals& g) const {
    const PipelineConfig cfg = base_config(g);
    require_file(in);
    auto rows = read_jsonl<TableRow>(in, table_row_from_json);
    warn_diagnostics(in, rows.diagnostics);
    json list = json::array();
    for (const TableRow& row : rows.items) {
      const TableAverage a = table_average(row);
      std::printf("%-24s %6.2f%s\n", a.name.c_str(), a.average, a.note ? ("  note: " + *a.note).c_str() : "");
      list.push_back(to_json(a));
    }
    if (!out.empty()) write_json(out, {{"rows", list}, {"config", to_json(cfg)}});
    return 0;
  }
};

struct SelftestCmd {
  int run(const Globals& g) const {
    const PipelineConfig cfg = base_config(g);
    ModelConfig mc;
    mc.d_model = 32;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_ff = 64;
    mc.context_len = 12;
    mc.seed = cfg.seed;
    Rng rng(mix_seed(cfg.seed, 1));
    Model<double> model = Model<double>::initialize(mc);
    perturb_parameters(model, rng, 0.2);
    const GradCheckResult gc = gradient_check(model, random_loss_batch(rng, 2, 12, mc.vocab_size), 256, 1e-5, cfg.seed);
    const MaskCheckResult mk = mask_equivalence_check(Model<double>::initialize(mc), 100, 4, 12, cfg.seed);
    const bool ok = gc.max_rel_error < 1e-4 && mk.max_loss_diff <= 1e-12 && mk.masked_grad_exactly_zero;
    std::cout << json{{"gradient_check", {{"coordinates", gc.coordinates}, {"max_rel_error", gc.max_rel_error},
                                          {"worst_tensor", gc.worst_tensor}}},
                      {"mask_equivalence", {{"batches", mk.batches}, {"max_loss_diff", mk.max_loss_diff},
                                            {"masked_grad_exactly_zero", mk.masked_grad_exactly_zero}}},
                      {"pass", ok}}
                     .dump(2)
              << '\n';
    std::printf("max finite-difference relative error: %.3e\n", gc.max_rel_error);
    return ok ? 0 : 1;
  }
};

std::string version_text() {
  std::ostringstream s;
  s << "domainforge " << kVersion << '\n'
    << "checkpoint format DFCK v" << kCheckpointVersion << '\n'
    << "pack cache format DFPK v" << kPackVersion << '\n'
    << "cleaning rules v" << kCleaningRulesVersion;
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptation pipeline: corpus cleaning, knowledge injection, instruction tuning, evaluation", "domainforge"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Pipeline configuration JSON");
  app.add_option("--seed", g.seed, "Global seed (overrides the configuration file)");

  CleanCmd clean;
  auto* c = app.add_subcommand("clean", "Filter, clean and de-duplicate a corpus");
  c->add_option("--in", clean.in, "Input corpus (JSON Lines)")->required();
  c->add_option("--out", clean.out, "Cleaned corpus (JSON Lines)")->required();
  c->add_option("--report", clean.report, "Cleaning report (JSON)");
  c->add_flag("--no-dedup", clean.no_dedup, "Skip de-duplication");
  c->add_option("--workers", clean.workers, "Cleaning threads");

  PackCmd packc;
  auto* p = app.add_subcommand("pack", "Pack one source of a cleaned corpus into fixed-length windows");
  p->add_option("--in", packc.in, "Cleaned corpus")->required();
  p->add_option("--source", packc.source, "book, paper or general")->required();
  p->add_option("--ctx", packc.ctx, "Window length in tokens");
  p->add_option("--out", packc.out, "Packed cache file")->required();

  BuildInstructCmd bi;
  auto* b = app.add_subcommand("build-instruct", "Assemble the instruction-tuning dataset");
  b->add_option("--conversations", bi.conversations, "Conversation records");
  b->add_option("--qa", bi.qa, "Multiple-choice items for rationale samples");
  b->add_option("--rationales", bi.rationales, "JSON object mapping item id to analysis text");
  b->add_option("--rationale-style", bi.style, "general or optionwise");
  b->add_option("--kg-entities", bi.kg_entities, "Knowledge-graph entities");
  b->add_option("--kg-triples", bi.kg_triples, "Knowledge-graph triples");
  b->add_option("--variants", bi.variants, "Instruction variants per conversation");
  b->add_option("--provider", bi.provider, "Paraphrase provider (fixture)");
  b->add_option("--out", bi.out, "Instruction dataset (JSON Lines)")->required();

  TrainInjectCmd ti;
  auto* k = app.add_subcommand("train-inject", "Knowledge-injection training on mixed packed corpora");
  k->add_option("--book", ti.book, "Book cache");
  k->add_option("--paper", ti.paper, "Paper cache");
  k->add_option("--general", ti.general, "General cache");
  k->add_option("--ckpt-out", ti.ckpt_out, "Checkpoint to write")->required();
  k->add_option("--log", ti.log, "Training log (JSON Lines)");
  k->add_option("--init", ti.init, "Initialize weights from a checkpoint");
  k->add_option("--resume", ti.resume, "Resume from a checkpoint of this stage")->excludes("--init");
  k->add_option("--save-every", ti.save_every, "Write the checkpoint every N steps");
  ti.flags.add(k);

  TrainInstructCmd tin;
  auto* i = app.add_subcommand("train-instruct", "Instruction tuning");
  i->add_option("--data", tin.data, "Instruction dataset")->required();
  i->add_option("--ckpt-out", tin.ckpt_out, "Checkpoint to write")->required();
  i->add_option("--log", tin.log, "Training log (JSON Lines)");
  i->add_option("--init", tin.init, "Initialize weights from a checkpoint");
  i->add_option("--resume", tin.resume, "Resume from a checkpoint of this stage")->excludes("--init");
  i->add_option("--save-every", tin.save_every, "Write the checkpoint every N steps");
  tin.flags.add(i);

  EvalCmd ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on multiple-choice items");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Item files, comma-separated")->required();
  e->add_option("--train-data", ev.train_data, "Training items for task-finetune, comma-separated");
  e->add_option("--mode", ev.mode, "likelihood or generative");
  e->add_option("--setting", ev.setting, "zero-shot or task-finetune");
  e->add_option("--template", ev.prompt_template, "choice or cloze");
  e->add_option("--normalization", ev.normalization, "per_token_mean or sum");
  e->add_option("--out", ev.out, "Report (JSON)")->required();

  ReportCmd rep;
  auto* r = app.add_subcommand("report", "Recompute results-table averages");
  r->add_option("--in", rep.in, "Table rows (JSON Lines)")->required();
  r->add_option("--out", rep.out, "Averages (JSON)");

  SelftestCmd self;
  auto* s = app.add_subcommand("selftest", "Gradient check and loss-mask equivalence check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: " << ex.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*c) return clean.run(g);
    if (*p) return packc.run(g);
    if (*b) return bi.run(g);
    if (*k) return ti.run(g);
    if (*i) return tin.run(g);
    if (*e) return ev.run(g);
    if (*r) return rep.run(g);
    if (*s) return self.run(g);
  } catch (const FileNotFound& ex) {
    print_error("file_not_found", ex.what(), {{"path", ex.path}});
  } catch (const ConfigError& ex) {
    print_error("config_error", ex.what());
  } catch (const IntegrityError& ex) {
    print_error("integrity_error", ex.what());
  } catch (const DivergenceError& ex) {
    print_error("divergence", ex.what(), {{"step", ex.step()}});
  } catch (const ProviderError& ex) {
    print_error("provider_error", ex.what(), {{"seed_id", ex.seed_id()}});
  } catch (const DataError& ex) {
    print_error("data_error", ex.what());
  } catch (const IoError& ex) {
    print_error("io_error", ex.what());
  } catch (const std::exception& ex) {
    print_error("internal_error", ex.what());
  }
  return 1;
}

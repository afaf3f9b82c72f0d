#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "hash.hpp"
#include "instruct.hpp"
#include "jsonl.hpp"
#include "mixer.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace domainforge {

enum class Stage { inject, instruct };

inline std::string_view to_string(Stage s) { return s == Stage::inject ? "inject" : "instruct"; }

inline Stage parse_stage(std::string_view s) {
  if (s == "inject") return Stage::inject;
  if (s == "instruct") return Stage::instruct;
  throw ConfigError("stage must be inject or instruct");
}

struct TrainConfig {
  Stage stage = Stage::inject;
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::size_t batch_size = 20;
  std::size_t epochs = 5;
  double grad_clip = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 = no cap

  // Settings of the original large-scale run. Anything other than the desk
  // values is rejected by validate().
  bool fsdp = false;
  bool bf16 = false;
  bool gradient_checkpointing = false;
  std::size_t num_accelerators = 1;

  static TrainConfig for_stage(Stage s) {
    TrainConfig c;
    c.stage = s;
    if (s == Stage::instruct) {
      c.epochs = 3;
      c.batch_size = 256;
    }
    return c;
  }

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    auto unsupported = [](const char* name) {
      throw ConfigError(std::string(name) + " is not supported at desk scale");
    };
    if (fsdp) unsupported("fsdp");
    if (bf16) unsupported("bf16");
    if (gradient_checkpointing) unsupported("gradient_checkpointing");
    if (num_accelerators != 1) unsupported("num_accelerators > 1");
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"lr", c.lr},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"max_steps", c.max_steps},
          {"fsdp", c.fsdp},
          {"bf16", c.bf16},
          {"gradient_checkpointing", c.gradient_checkpointing},
          {"num_accelerators", c.num_accelerators}};
}

// Missing keys keep the values already in `base`.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  if (auto it = j.find("stage"); it != j.end()) base.stage = parse_stage(it->get<std::string>());
  base.lr = j.value("lr", base.lr);
  if (auto it = j.find("betas"); it != j.end()) {
    if (!it->is_array() || it->size() != 2) throw ConfigError("betas must be a 2-element array");
    base.beta1 = (*it)[0].get<double>();
    base.beta2 = (*it)[1].get<double>();
  }
  base.eps = j.value("eps", base.eps);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.epochs = j.value("epochs", base.epochs);
  base.grad_clip = j.value("grad_clip", base.grad_clip);
  base.seed = j.value("seed", base.seed);
  base.max_steps = j.value("max_steps", base.max_steps);
  base.fsdp = j.value("fsdp", base.fsdp);
  base.bf16 = j.value("bf16", base.bf16);
  base.gradient_checkpointing = j.value("gradient_checkpointing", base.gradient_checkpointing);
  base.num_accelerators = j.value("num_accelerators", base.num_accelerators);
  return base;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <class S>
struct OptimizerState {
  std::uint64_t step = 0;
  Parameters<S> m;
  Parameters<S> v;

  static OptimizerState fresh(const ModelConfig& c) { return {0, zero_parameters<S>(c), zero_parameters<S>(c)}; }
};

struct StepStats {
  double grad_norm = 0;  // before clipping
  double clip_scale = 1;
};

template <class S>
double global_norm(const Parameters<S>& grads) {
  double sq = 0;
  for (const Tensor<S>* t : grads.tensors())
    for (S g : t->data) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

// Decoupled weight decay, then the bias-corrected Adam update. Gradients are
// clipped to global norm `grad_clip` first. Nothing is modified when any
// gradient is non-finite.
template <class S>
StepStats adamw_step(Parameters<S>& params, const Parameters<S>& grads, OptimizerState<S>& state,
                     const TrainConfig& cfg) {
  StepStats stats;
  stats.grad_norm = global_norm(grads);
  if (!std::isfinite(stats.grad_norm)) throw DivergenceError("non-finite gradient", state.step);
  if (cfg.grad_clip > 0 && stats.grad_norm > cfg.grad_clip) stats.clip_scale = cfg.grad_clip / stats.grad_norm;

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = cfg.lr * cfg.weight_decay;

  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) throw DataError("adamw: shape mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]->size() != g[i]->size()) throw DataError("adamw: shape mismatch in " + p[i]->name);
    S* w = p[i]->ptr();
    const S* gr = g[i]->ptr();
    S* mi = m[i]->ptr();
    S* vi = v[i]->ptr();
    for (std::size_t k = 0; k < p[i]->size(); ++k) {
      const double gk = static_cast<double>(gr[k]) * stats.clip_scale;
      const double mk = cfg.beta1 * static_cast<double>(mi[k]) + (1 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * static_cast<double>(vi[k]) + (1 - cfg.beta2) * gk * gk;
      mi[k] = static_cast<S>(mk);
      vi[k] = static_cast<S>(vk);
      double wk = static_cast<double>(w[k]);
      wk -= decay * wk;
      wk -= cfg.lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps);
      w[k] = static_cast<S>(wk);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Log
// ---------------------------------------------------------------------------

struct TrainRecord {
  std::uint64_t step = 0;
  Stage stage = Stage::inject;
  double loss = 0;
  std::uint64_t tokens_seen = 0;
  std::uint64_t book_epoch = 0;  // instruct stage: the instruction epoch
  double lr = 0;
  double grad_norm = 0;

  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

inline json to_json(const TrainRecord& r) {
  return {{"step", r.step},         {"stage", to_string(r.stage)}, {"loss", r.loss},           {"tokens_seen", r.tokens_seen},
          {"book_epoch", r.book_epoch}, {"lr", r.lr},               {"grad_norm", r.grad_norm}};
}

inline TrainRecord train_record_from_json(const json& j) {
  return {j.at("step").get<std::uint64_t>(),       parse_stage(j.at("stage").get<std::string>()),
          j.at("loss").get<double>(),              j.at("tokens_seen").get<std::uint64_t>(),
          j.at("book_epoch").get<std::uint64_t>(), j.at("lr").get<double>(),
          j.at("grad_norm").get<double>()};
}

inline constexpr std::size_t kLogTail = 64;

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'D', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeader = 4 + 4 + 8 + 8;

struct Checkpoint {
  Model<float> model;
  TrainConfig train;
  OptimizerState<float> optimizer;
  std::uint64_t tokens_seen = 0;
  std::optional<MixerState> mixer;       // inject stage
  std::uint64_t instruct_epoch = 0;      // instruct stage
  std::uint64_t instruct_position = 0;   // batches consumed in instruct_epoch
  std::vector<TrainRecord> log_tail;
  json config = json::object();          // effective pipeline configuration
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  json tensors = json::array();
  std::string payload;
  auto append = [&](const std::string& name, const Tensor<float>& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset", payload.size()}});
    for (float f : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_le<std::uint32_t>(payload, bits);
    }
  };
  for (const auto* t : ck.model.params.tensors()) append(t->name, *t);
  const auto m = ck.optimizer.m.tensors();
  const auto v = ck.optimizer.v.tensors();
  for (const auto* t : m) append("adam_m/" + t->name, *t);
  for (const auto* t : v) append("adam_v/" + t->name, *t);

  json log = json::array();
  for (const TrainRecord& r : ck.log_tail) log.push_back(to_json(r));
  json manifest = {{"model", to_json(ck.model.config)},
                   {"train", to_json(ck.train)},
                   {"optimizer", {{"step", ck.optimizer.step}}},
                   {"progress",
                    {{"tokens_seen", ck.tokens_seen},
                     {"instruct_epoch", ck.instruct_epoch},
                     {"instruct_position", ck.instruct_position}}},
                   {"tensors", tensors},
                   {"log_tail", log},
                   {"config", ck.config}};
  manifest["mixer"] = ck.mixer ? to_json(*ck.mixer) : json(nullptr);
  const std::string text = manifest.dump();

  std::string body;
  detail::put_le<std::uint64_t>(body, text.size());
  body += text;
  body += payload;
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, fnv1a64(body));
  out += body;
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointHeader) throw IntegrityError("checkpoint truncated: header incomplete");
  if (bytes.substr(0, 4) != std::string_view(kCheckpointMagic, 4)) throw IntegrityError("not a checkpoint: bad magic");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto checksum = detail::get_le<std::uint64_t>(bytes, 8);
  if (fnv1a64(bytes.substr(16)) != checksum) throw IntegrityError("checkpoint checksum mismatch (corrupt or truncated)");
  const auto manifest_len = detail::get_le<std::uint64_t>(bytes, 16);
  if (manifest_len > bytes.size() - kCheckpointHeader) throw IntegrityError("checkpoint manifest length out of range");
  const std::string_view payload = bytes.substr(kCheckpointHeader + manifest_len);

  json manifest;
  try {
    manifest = json::parse(bytes.substr(kCheckpointHeader, manifest_len));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model.config = model_config_from_json(manifest.at("model"));
    ck.model.config.validate();
    ck.train = train_config_from_json(manifest.at("train"), TrainConfig{});
    ck.optimizer = OptimizerState<float>::fresh(ck.model.config);
    ck.optimizer.step = manifest.at("optimizer").at("step").get<std::uint64_t>();
    ck.model.params = zero_parameters<float>(ck.model.config);
    const json& progress = manifest.at("progress");
    ck.tokens_seen = progress.at("tokens_seen").get<std::uint64_t>();
    ck.instruct_epoch = progress.at("instruct_epoch").get<std::uint64_t>();
    ck.instruct_position = progress.at("instruct_position").get<std::uint64_t>();
    if (!manifest.at("mixer").is_null()) ck.mixer = mixer_state_from_json(manifest.at("mixer"));
    for (const json& r : manifest.at("log_tail")) ck.log_tail.push_back(train_record_from_json(r));
    ck.config = manifest.at("config");
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint manifest is incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint manifest is invalid: ") + e.what());
  }

  std::vector<std::pair<std::string, Tensor<float>*>> expected;
  for (auto* t : ck.model.params.tensors()) expected.emplace_back(t->name, t);
  for (auto* t : ck.optimizer.m.tensors()) expected.emplace_back("adam_m/" + t->name, t);
  for (auto* t : ck.optimizer.v.tensors()) expected.emplace_back("adam_v/" + t->name, t);
  const json& dir = manifest.at("tensors");
  if (!dir.is_array() || dir.size() != expected.size()) throw IntegrityError("checkpoint tensor directory mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const json& e = dir[i];
    Tensor<float>& t = *expected[i].second;
    if (e.at("name").get<std::string>() != expected[i].first || e.at("shape").get<std::vector<std::size_t>>() != t.shape) {
      throw IntegrityError("checkpoint tensor " + expected[i].first + " does not match the model config");
    }
    const auto offset = e.at("offset").get<std::uint64_t>();
    if (offset > payload.size() || payload.size() - offset < t.size() * 4) {
      throw IntegrityError("checkpoint tensor " + expected[i].first + " is out of range");
    }
    for (std::size_t k = 0; k < t.size(); ++k) {
      const auto bits = detail::get_le<std::uint32_t>(payload, offset + 4 * k);
      std::memcpy(&t.data[k], &bits, 4);
    }
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  // Write to a sibling file first so an interrupted save never clobbers the
  // previous checkpoint.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(detail::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Trainers
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t count_non_pad(const std::vector<TokenId>& tokens) {
  return static_cast<std::uint64_t>(std::count_if(tokens.begin(), tokens.end(), [](TokenId t) { return t != Vocab::kPad; }));
}

inline void push_tail(std::vector<TrainRecord>& tail, const TrainRecord& r) {
  tail.push_back(r);
  if (tail.size() > kLogTail) tail.erase(tail.begin());
}

}  // namespace detail

// Stage K: autoregressive loss over every non-PAD token of mixer batches.
// Runs until the book stream has been consumed `epochs` times (or max_steps).
class InjectionTrainer {
 public:
  InjectionTrainer(Model<float> model, Mixer& mixer, TrainConfig cfg, std::size_t threads = default_threads())
      : mixer_(mixer), threads_(threads) {
    cfg.stage = Stage::inject;
    cfg.validate();
    if (model.config.context_len < mixer.context_len()) throw ConfigError("model context_len is shorter than packed sequences");
    ck_.model = std::move(model);
    ck_.train = cfg;
    ck_.optimizer = OptimizerState<float>::fresh(ck_.model.config);
    ck_.mixer = mixer_.state();
  }

  // Continues from a checkpoint written by this stage; restores the mixer.
  InjectionTrainer(Checkpoint ck, Mixer& mixer, std::size_t threads = default_threads())
      : mixer_(mixer), threads_(threads), ck_(std::move(ck)) {
    if (ck_.train.stage != Stage::inject || !ck_.mixer) throw ConfigError("checkpoint is not from the inject stage");
    ck_.train.validate();
    mixer_.restore(*ck_.mixer);
  }

  bool done() const {
    const TrainConfig& c = ck_.train;
    if (c.max_steps > 0 && ck_.optimizer.step >= c.max_steps) return true;
    return mixer_.epoch_state().epoch >= c.epochs;
  }

  TrainRecord step() {
    auto [batch, epoch] = mixer_.next_batch();
    LossMaskBatch lb = LossMaskBatch::from_rows(batch.rows, batch.context_len, std::move(batch.tokens), &batch.mask);
    return apply(lb, epoch.epoch);
  }

  // Trains until done(); `on_step` sees each record (for logging/checkpoints).
  template <class F>
  void run(F&& on_step) {
    while (!done()) on_step(step());
  }
  void run() {
    run([](const TrainRecord&) {});
  }

  const Model<float>& model() const { return ck_.model; }
  const Checkpoint& checkpoint() const { return ck_; }
  Checkpoint& checkpoint() { return ck_; }
  const std::vector<TrainRecord>& log() const { return log_; }

 private:
  TrainRecord apply(const LossMaskBatch& lb, std::uint64_t book_epoch) {
    LossAndGrad<float> lg = loss_and_gradient(ck_.model, lb, threads_);
    if (!std::isfinite(lg.loss)) throw DivergenceError("loss is not finite", ck_.optimizer.step + 1);
    const StepStats stats = adamw_step(ck_.model.params, lg.grads, ck_.optimizer, ck_.train);
    ck_.tokens_seen += detail::count_non_pad(lb.tokens);
    ck_.mixer = mixer_.state();
    TrainRecord r{ck_.optimizer.step, Stage::inject, static_cast<double>(lg.loss), ck_.tokens_seen,
                  book_epoch,        ck_.train.lr,  stats.grad_norm};
    detail::push_tail(ck_.log_tail, r);
    log_.push_back(r);
    return r;
  }

  Mixer& mixer_;
  std::size_t threads_;
  Checkpoint ck_;
  std::vector<TrainRecord> log_;
};

// Stage I: response-only loss over rendered instruction examples. Each epoch
// re-renders every sample (a fresh instruction variant per sample and epoch),
// shuffles with a per-epoch stream, and walks ceil(n / batch_size) batches.
class InstructionTrainer {
 public:
  InstructionTrainer(Model<float> model, std::vector<InstructionSample> samples, TrainConfig cfg,
                     std::size_t threads = default_threads())
      : samples_(std::move(samples)), threads_(threads) {
    cfg.stage = Stage::instruct;
    cfg.validate();
    if (samples_.empty()) throw ConfigError("instruction dataset is empty");
    ck_.model = std::move(model);
    ck_.train = cfg;
    ck_.optimizer = OptimizerState<float>::fresh(ck_.model.config);
  }

  InstructionTrainer(Checkpoint ck, std::vector<InstructionSample> samples, std::size_t threads = default_threads())
      : samples_(std::move(samples)), threads_(threads), ck_(std::move(ck)) {
    if (ck_.train.stage != Stage::instruct) throw ConfigError("checkpoint is not from the instruct stage");
    ck_.train.validate();
    if (samples_.empty()) throw ConfigError("instruction dataset is empty");
  }

  std::size_t steps_per_epoch() const { return (samples_.size() + ck_.train.batch_size - 1) / ck_.train.batch_size; }

  bool done() const {
    const TrainConfig& c = ck_.train;
    if (c.max_steps > 0 && ck_.optimizer.step >= c.max_steps) return true;
    return ck_.instruct_epoch >= c.epochs;
  }

  TrainRecord step() {
    if (!epoch_ready_ || rendered_epoch_ != ck_.instruct_epoch) prepare_epoch();
    const std::size_t B = ck_.train.batch_size;
    const std::size_t begin = static_cast<std::size_t>(ck_.instruct_position) * B;
    const std::size_t end = std::min(begin + B, order_.size());
    const LossMaskBatch lb = make_batch(begin, end);
    const std::uint64_t epoch = ck_.instruct_epoch;

    LossAndGrad<float> lg = loss_and_gradient(ck_.model, lb, threads_);
    if (!std::isfinite(lg.loss)) throw DivergenceError("loss is not finite", ck_.optimizer.step + 1);
    const StepStats stats = adamw_step(ck_.model.params, lg.grads, ck_.optimizer, ck_.train);
    ck_.tokens_seen += detail::count_non_pad(lb.tokens);
    if (++ck_.instruct_position == steps_per_epoch()) {
      ck_.instruct_position = 0;
      ck_.instruct_epoch += 1;
    }
    TrainRecord r{ck_.optimizer.step, Stage::instruct, static_cast<double>(lg.loss), ck_.tokens_seen,
                  epoch,              ck_.train.lr,    stats.grad_norm};
    detail::push_tail(ck_.log_tail, r);
    log_.push_back(r);
    return r;
  }

  template <class F>
  void run(F&& on_step) {
    while (!done()) on_step(step());
  }
  void run() {
    run([](const TrainRecord&) {});
  }

  // The examples of the current epoch in shuffled order.
  const std::vector<RenderedExample>& epoch_examples() {
    if (!epoch_ready_ || rendered_epoch_ != ck_.instruct_epoch) prepare_epoch();
    return shuffled_;
  }

  const Model<float>& model() const { return ck_.model; }
  const Checkpoint& checkpoint() const { return ck_; }
  Checkpoint& checkpoint() { return ck_; }
  const std::vector<TrainRecord>& log() const { return log_; }

 private:
  void prepare_epoch() {
    const std::uint64_t epoch = ck_.instruct_epoch;
    std::vector<RenderedExample> rendered =
        render_dataset(samples_, ck_.train.seed, epoch, ck_.model.config.context_len);
    Rng rng = Rng::substream(ck_.train.seed, "instruct-epoch", epoch);
    order_ = rng.permutation(rendered.size());
    shuffled_.clear();
    shuffled_.reserve(rendered.size());
    for (std::size_t i : order_) shuffled_.push_back(std::move(rendered[i]));
    rendered_epoch_ = epoch;
    epoch_ready_ = true;
  }

  // Rows padded with PAD to the longest example in the batch.
  LossMaskBatch make_batch(std::size_t begin, std::size_t end) const {
    std::size_t T = 0;
    for (std::size_t i = begin; i < end; ++i) T = std::max(T, shuffled_[i].tokens.size());
    const std::size_t B = end - begin;
    std::vector<TokenId> tokens(B * T, Vocab::kPad);
    std::vector<std::uint8_t> mask(B * T, 0);
    for (std::size_t i = begin; i < end; ++i) {
      const RenderedExample& ex = shuffled_[i];
      std::copy(ex.tokens.begin(), ex.tokens.end(), tokens.begin() + static_cast<std::ptrdiff_t>((i - begin) * T));
      std::copy(ex.loss_mask.begin(), ex.loss_mask.end(), mask.begin() + static_cast<std::ptrdiff_t>((i - begin) * T));
    }
    return LossMaskBatch::from_rows(B, T, std::move(tokens), &mask);
  }

  std::vector<InstructionSample> samples_;
  std::size_t threads_;
  Checkpoint ck_;
  std::vector<TrainRecord> log_;
  bool epoch_ready_ = false;
  std::uint64_t rendered_epoch_ = 0;
  std::vector<std::size_t> order_;
  std::vector<RenderedExample> shuffled_;
};

}  // namespace domainforge

#include <gtest/gtest.h>

#include <cmath>

#include "domainforge/train.hpp"
#include "support.hpp"

using namespace domainforge;

namespace {

Parameters<double> scalar(double w) {
  Parameters<double> p;
  p.embedding = Tensor<double>("w", {1});
  p.embedding.data[0] = w;
  return p;
}

OptimizerState<double> scalar_state() { return {0, scalar(0), scalar(0)}; }

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.context_len = 64;
  c.seed = 3;
  return c;
}

std::vector<PackedSequence> seqs(std::size_t count, std::size_t ctx, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PackedSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    PackedSequence s;
    for (std::size_t k = 0; k < ctx; ++k) s.tokens.push_back(static_cast<TokenId>('a' + rng.below(26)));
    s.mask.assign(ctx, 1);
    out.push_back(std::move(s));
  }
  return out;
}

Mixer small_mixer(std::size_t book = 30) { return Mixer({seqs(book, 8, 1), seqs(4, 8, 2), seqs(2, 8, 3)}, MixRatio{}, 20, 7); }

std::vector<InstructionSample> ten_samples() {
  std::vector<InstructionSample> out;
  for (int i = 0; i < 10; ++i) {
    const std::string ins = "Q" + std::to_string(i);
    out.push_back({"s" + std::to_string(i), SampleKind::conversation, ins, std::nullopt, "A" + std::to_string(i), {ins}});
  }
  return out;
}

TrainConfig fast(Stage s) {
  TrainConfig c = TrainConfig::for_stage(s);
  c.lr = 1e-3;
  return c;
}

}  // namespace

TEST(TrainConfig, DefaultsAndDeskScaleErrors) {
  const TrainConfig k = TrainConfig::for_stage(Stage::inject);
  EXPECT_EQ(k.lr, 2e-5);
  EXPECT_EQ(k.epochs, 5u);
  EXPECT_EQ(k.beta1, 0.9);
  EXPECT_EQ(k.beta2, 0.95);
  const TrainConfig i = TrainConfig::for_stage(Stage::instruct);
  EXPECT_EQ(i.epochs, 3u);
  EXPECT_EQ(i.batch_size, 256u);

  TrainConfig c = k;
  c.fsdp = true;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("not supported at desk scale"), std::string::npos);
  }
  c = k;
  c.num_accelerators = 32;
  EXPECT_THROW(c.validate(), ConfigError);
  c = k;
  c.bf16 = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = k;
  c.gradient_checkpointing = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = k;
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(to_json(train_config_from_json(to_json(i), TrainConfig{})), to_json(i));
}

TEST(AdamW, ZeroGradientNoDecayUnchanged) {
  auto p = scalar(0.7);
  auto st = scalar_state();
  TrainConfig c;
  c.lr = 0.1;
  c.weight_decay = 0;
  adamw_step(p, scalar(0), st, c);
  EXPECT_EQ(p.embedding.data[0], 0.7);
}

// Values from the hand-evaluated recurrence in tests/oracles/oracles.py.
TEST(AdamW, OneStepMatchesHandEvaluation) {
  auto p = scalar(1.0);
  auto st = scalar_state();
  TrainConfig c;
  c.lr = 0.1;
  c.weight_decay = 0;
  adamw_step(p, scalar(1.0), st, c);
  EXPECT_NEAR(p.embedding.data[0], 0.900000001, 1e-15);
}

TEST(AdamW, ThreeStepsWithDecay) {
  auto p = scalar(0.5);
  auto st = scalar_state();
  TrainConfig c;
  c.lr = 0.01;
  c.weight_decay = 0.1;
  c.grad_clip = 0;
  const double expected[] = {0.4895000005, 0.4926442398902382, 0.49352382706391357};
  const double grads[] = {0.2, -0.4, 0.1};
  for (int i = 0; i < 3; ++i) {
    adamw_step(p, scalar(grads[i]), st, c);
    EXPECT_NEAR(p.embedding.data[0], expected[i], 1e-14);
  }
  EXPECT_EQ(st.step, 3u);
}

TEST(AdamW, DecoupledDecayOnly) {
  auto p = scalar(2.0);
  auto st = scalar_state();
  TrainConfig c;
  c.lr = 0.05;
  c.weight_decay = 0.1;
  adamw_step(p, scalar(0), st, c);
  EXPECT_DOUBLE_EQ(p.embedding.data[0], 2.0 - 0.05 * 0.1 * 2.0);
}

TEST(AdamW, ClippingScalesGlobalNorm) {
  auto p = scalar(0);
  auto st = scalar_state();
  TrainConfig c;
  c.grad_clip = 1.0;
  const StepStats s = adamw_step(p, scalar(-4.0), st, c);
  EXPECT_EQ(s.grad_norm, 4.0);
  EXPECT_EQ(s.clip_scale, 0.25);
  EXPECT_NEAR(st.m.embedding.data[0], 0.1 * -1.0, 1e-15);
}

TEST(AdamW, NonFiniteGradientAbortsWithoutUpdate) {
  auto p = scalar(1.0);
  auto st = scalar_state();
  TrainConfig c;
  EXPECT_THROW(adamw_step(p, scalar(std::nan("")), st, c), DivergenceError);
  EXPECT_EQ(p.embedding.data[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(Injection, FiveBookEpochsTakeTenBatches) {
  Mixer mixer = small_mixer(30);
  TrainConfig c = fast(Stage::inject);
  c.epochs = 5;
  InjectionTrainer t(Model<float>::initialize(tiny()), mixer, c);
  t.run();
  EXPECT_EQ(t.log().size(), 10u);
  EXPECT_EQ(t.log().back().book_epoch, 5u);
}

TEST(Injection, InitialLossNearLogVocab) {
  Mixer mixer = small_mixer();
  InjectionTrainer t(Model<float>::initialize(tiny()), mixer, fast(Stage::inject));
  EXPECT_NEAR(t.step().loss, std::log(259.0), 0.05);
}

TEST(Injection, LogInvariants) {
  Mixer mixer = small_mixer();
  TrainConfig c = fast(Stage::inject);
  c.max_steps = 6;
  InjectionTrainer t(Model<float>::initialize(tiny()), mixer, c);
  t.run();
  ASSERT_EQ(t.log().size(), 6u);
  for (std::size_t i = 0; i < t.log().size(); ++i) {
    EXPECT_EQ(t.log()[i].step, i + 1);
    EXPECT_TRUE(std::isfinite(t.log()[i].loss));
    EXPECT_EQ(t.log()[i].tokens_seen, (i + 1) * 20 * 8);
  }
}

TEST(Instruction, StepCountArithmetic) {
  TrainConfig c = fast(Stage::instruct);
  c.epochs = 3;
  c.batch_size = 5;
  InstructionTrainer t(Model<float>::initialize(tiny()), ten_samples(), c);
  t.run();
  EXPECT_EQ(t.log().size(), 6u);
  EXPECT_EQ(t.log().back().book_epoch, 2u);
}

TEST(Instruction, SameSeedSameParameters) {
  TrainConfig c = fast(Stage::instruct);
  c.epochs = 2;
  c.batch_size = 4;
  InstructionTrainer a(Model<float>::initialize(tiny()), ten_samples(), c);
  InstructionTrainer b(Model<float>::initialize(tiny()), ten_samples(), c);
  a.run();
  b.run();
  auto pa = a.model().params.tensors();
  auto pb = b.model().params.tensors();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->data, pb[i]->data);
}

TEST(Instruction, EpochShuffleDependsOnSeedAndEpoch) {
  TrainConfig c = fast(Stage::instruct);
  c.epochs = 2;
  c.batch_size = 10;
  InstructionTrainer t(Model<float>::initialize(tiny()), ten_samples(), c);
  std::vector<std::string> e0, e1;
  for (const auto& ex : t.epoch_examples()) e0.push_back(ex.id);
  t.step();
  for (const auto& ex : t.epoch_examples()) e1.push_back(ex.id);
  EXPECT_NE(e0, e1);
  std::sort(e0.begin(), e0.end());
  std::sort(e1.begin(), e1.end());
  EXPECT_EQ(e0, e1);
}

// Perturbing tokens whose targets are masked out (the instruction region)
// leaves the loss unchanged.
TEST(Instruction, MaskIsolation) {
  Rng rng(0);
  const Model<float> m = Model<float>::initialize(tiny());
  InstructionSample s{"s", SampleKind::conversation, "abc", std::nullopt, "xy", {"abc"}};
  const auto ex = render_training_example(s, rng, 64);
  auto batch = LossMaskBatch::from_rows(1, ex.tokens.size(), ex.tokens, &ex.loss_mask);
  const float base = loss_and_gradient(m, batch).loss;
  for (std::size_t i = 0; i + 1 < ex.boundary; ++i) {
    auto changed = batch;
    changed.targets[i] = static_cast<TokenId>((changed.targets[i] + 5) % 256);
    EXPECT_EQ(loss_and_gradient(m, changed).loss, base);
  }
}

TEST(Checkpoint, RoundTripBitExact) {
  Mixer mixer = small_mixer();
  TrainConfig c = fast(Stage::inject);
  c.max_steps = 3;
  InjectionTrainer t(Model<float>::initialize(tiny()), mixer, c);
  t.run();
  Checkpoint ck = t.checkpoint();
  ck.config = json{{"note", "echo"}};
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "DFCK");
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  auto a = ck.model.params.tensors();
  auto b = back.model.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::memcmp(a[i]->ptr(), b[i]->ptr(), a[i]->size() * 4), 0);
  EXPECT_EQ(back.log_tail, ck.log_tail);
  EXPECT_EQ(back.optimizer.step, 3u);

  const auto dir = test_support::scratch_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", ck);
  save_checkpoint(dir / "b.ckpt", load_checkpoint(dir / "a.ckpt"));
  EXPECT_EQ(test_support::read_file(dir / "a.ckpt"), test_support::read_file(dir / "b.ckpt"));
}

TEST(Checkpoint, CorruptionDetected) {
  Mixer mixer = small_mixer();
  TrainConfig c = fast(Stage::inject);
  c.max_steps = 1;
  InjectionTrainer t(Model<float>::initialize(tiny()), mixer, c);
  t.run();
  const std::string bytes = serialize_checkpoint(t.checkpoint());
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() / 2)), IntegrityError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10)), IntegrityError);
  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  EXPECT_THROW(parse_checkpoint(flipped), IntegrityError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(parse_checkpoint(version), IntegrityError);
  EXPECT_THROW(load_checkpoint(test_support::scratch_dir("ckpt_missing") / "none.ckpt"), IoError);
}

TEST(Checkpoint, ResumeReproducesBatchStreamAndParameters) {
  TrainConfig c = fast(Stage::inject);
  c.max_steps = 8;
  Mixer m1 = small_mixer();
  InjectionTrainer full(Model<float>::initialize(tiny()), m1, c);
  full.run();

  Mixer m2 = small_mixer();
  TrainConfig first = c;
  first.max_steps = 3;
  InjectionTrainer part(Model<float>::initialize(tiny()), m2, first);
  part.run();
  Checkpoint ck = parse_checkpoint(serialize_checkpoint(part.checkpoint()));
  ck.train.max_steps = 8;
  Mixer m3 = small_mixer();
  InjectionTrainer resumed(std::move(ck), m3);
  resumed.run();

  ASSERT_EQ(resumed.log().size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(resumed.log()[i], full.log()[i + 3]);
  EXPECT_EQ(serialize_checkpoint(resumed.checkpoint()), serialize_checkpoint(full.checkpoint()));
}

TEST(Checkpoint, InstructionResumeMidEpoch) {
  TrainConfig c = fast(Stage::instruct);
  c.epochs = 2;
  c.batch_size = 3;  // 4 steps per epoch
  InstructionTrainer full(Model<float>::initialize(tiny()), ten_samples(), c);
  full.run();

  TrainConfig first = c;
  first.max_steps = 2;
  InstructionTrainer part(Model<float>::initialize(tiny()), ten_samples(), first);
  part.run();
  Checkpoint ck = parse_checkpoint(serialize_checkpoint(part.checkpoint()));
  ck.train.max_steps = 0;
  InstructionTrainer resumed(std::move(ck), ten_samples());
  resumed.run();
  ASSERT_EQ(resumed.log().size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(resumed.log()[i], full.log()[i + 2]);
}

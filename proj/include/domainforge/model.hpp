#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <cstdlib>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "error.hpp"
#include "jsonl.hpp"
#include "kernels.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace domainforge {

enum class PosEncoding { rotary, learned };
enum class FeedForward { gelu, swiglu };

struct ModelConfig {
  std::size_t vocab_size = Vocab::kSize;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t context_len = 2048;
  PosEncoding pos_encoding = PosEncoding::rotary;
  FeedForward feed_forward = FeedForward::gelu;
  bool tie_embeddings = false;
  std::uint64_t seed = 0;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) {
      throw ConfigError("model dimensions must all be >= 1");
    }
    if (context_len < 2) throw ConfigError("model context_len must be >= 2");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (pos_encoding == PosEncoding::rotary && head_dim() % 2 != 0) {
      throw ConfigError("rotary positions need an even head dimension");
    }
    if (vocab_size < Vocab::kSize) throw ConfigError("vocab_size must cover the byte vocabulary (259)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"context_len", c.context_len},
          {"pos_encoding", c.pos_encoding == PosEncoding::rotary ? "rotary" : "learned"},
          {"feed_forward", c.feed_forward == FeedForward::gelu ? "gelu" : "swiglu"},
          {"tie_embeddings", c.tie_embeddings},
          {"seed", c.seed}};
}

// Missing keys keep the values already in `base`.
inline ModelConfig model_config_from_json(const json& j, ModelConfig base = {}) {
  base.vocab_size = j.value("vocab_size", base.vocab_size);
  base.d_model = j.value("d_model", base.d_model);
  base.n_layers = j.value("n_layers", base.n_layers);
  base.n_heads = j.value("n_heads", base.n_heads);
  base.d_ff = j.value("d_ff", base.d_ff);
  base.context_len = j.value("context_len", base.context_len);
  if (auto it = j.find("pos_encoding"); it != j.end()) {
    const auto v = it->get<std::string>();
    if (v != "rotary" && v != "learned") throw ConfigError("pos_encoding must be rotary or learned");
    base.pos_encoding = v == "rotary" ? PosEncoding::rotary : PosEncoding::learned;
  }
  if (auto it = j.find("feed_forward"); it != j.end()) {
    const auto v = it->get<std::string>();
    if (v != "gelu" && v != "swiglu") throw ConfigError("feed_forward must be gelu or swiglu");
    base.feed_forward = v == "gelu" ? FeedForward::gelu : FeedForward::swiglu;
  }
  base.tie_embeddings = j.value("tie_embeddings", base.tie_embeddings);
  base.seed = j.value("seed", base.seed);
  return base;
}

template <class S>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<S> data;

  Tensor() = default;
  Tensor(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    data.assign(count, S(0));
  }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  S* ptr() noexcept { return data.data(); }
  const S* ptr() const noexcept { return data.data(); }
};

template <class S>
struct LayerParams {
  Tensor<S> attn_norm;  // d
  Tensor<S> wq, wk, wv, wo;  // d x d
  Tensor<S> ffn_norm;  // d
  Tensor<S> w_in;    // d x d_ff
  Tensor<S> w_gate;  // d x d_ff, SwiGLU only
  Tensor<S> w_out;   // d_ff x d
};

template <class S>
struct Parameters {
  Tensor<S> embedding;  // V x d
  Tensor<S> positions;  // context_len x d, learned positions only
  std::vector<LayerParams<S>> layers;
  Tensor<S> final_norm;  // d
  Tensor<S> output;      // d x V, untied only

  // Canonical order used by the optimizer, checkpoints, and gradient checks.
  std::vector<Tensor<S>*> tensors() {
    std::vector<Tensor<S>*> out;
    auto add = [&](Tensor<S>& t) {
      if (!t.empty()) out.push_back(&t);
    };
    add(embedding);
    add(positions);
    for (auto& l : layers) {
      add(l.attn_norm), add(l.wq), add(l.wk), add(l.wv), add(l.wo);
      add(l.ffn_norm), add(l.w_in), add(l.w_gate), add(l.w_out);
    }
    add(final_norm);
    add(output);
    return out;
  }

  std::vector<const Tensor<S>*> tensors() const {
    std::vector<const Tensor<S>*> out;
    for (Tensor<S>* t : const_cast<Parameters*>(this)->tensors()) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const Tensor<S>* t : tensors()) n += t->size();
    return n;
  }

  void set_zero() {
    for (Tensor<S>* t : tensors()) std::fill(t->data.begin(), t->data.end(), S(0));
  }

  Parameters& operator+=(const Parameters& other) {
    auto mine = tensors();
    auto theirs = other.tensors();
    for (std::size_t i = 0; i < mine.size(); ++i) {
      S* a = mine[i]->ptr();
      const S* b = theirs[i]->ptr();
      for (std::size_t k = 0; k < mine[i]->size(); ++k) a[k] += b[k];
    }
    return *this;
  }
};

// Allocates zero-valued tensors with the shapes implied by the config.
template <class S>
Parameters<S> zero_parameters(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  Parameters<S> p;
  p.embedding = Tensor<S>("embedding", {c.vocab_size, d});
  if (c.pos_encoding == PosEncoding::learned) p.positions = Tensor<S>("positions", {c.context_len, d});
  p.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    auto& L = p.layers[l];
    L.attn_norm = Tensor<S>(pre + "attn_norm", {d});
    L.wq = Tensor<S>(pre + "wq", {d, d});
    L.wk = Tensor<S>(pre + "wk", {d, d});
    L.wv = Tensor<S>(pre + "wv", {d, d});
    L.wo = Tensor<S>(pre + "wo", {d, d});
    L.ffn_norm = Tensor<S>(pre + "ffn_norm", {d});
    L.w_in = Tensor<S>(pre + "w_in", {d, c.d_ff});
    if (c.feed_forward == FeedForward::swiglu) L.w_gate = Tensor<S>(pre + "w_gate", {d, c.d_ff});
    L.w_out = Tensor<S>(pre + "w_out", {c.d_ff, d});
  }
  p.final_norm = Tensor<S>("final_norm", {d});
  if (!c.tie_embeddings) p.output = Tensor<S>("output", {d, c.vocab_size});
  return p;
}

// Normal(0, 0.02) weights; residual output projections (wo, w_out) scaled by
// 1/sqrt(2 * n_layers); norm gains at 1. Fully determined by config.seed.
template <class S>
Parameters<S> init_params(const ModelConfig& c) {
  Parameters<S> p = zero_parameters<S>(c);
  Rng rng(c.seed);
  const double std_dev = 0.02;
  const double residual_std = std_dev / std::sqrt(2.0 * static_cast<double>(c.n_layers));
  auto fill = [&](Tensor<S>& t, double sd) {
    for (S& v : t.data) v = static_cast<S>(rng.normal() * sd);
  };
  auto ones = [](Tensor<S>& t) { std::fill(t.data.begin(), t.data.end(), S(1)); };
  fill(p.embedding, std_dev);
  if (!p.positions.empty()) fill(p.positions, std_dev);
  for (auto& L : p.layers) {
    ones(L.attn_norm);
    fill(L.wq, std_dev);
    fill(L.wk, std_dev);
    fill(L.wv, std_dev);
    fill(L.wo, residual_std);
    ones(L.ffn_norm);
    fill(L.w_in, std_dev);
    if (!L.w_gate.empty()) fill(L.w_gate, std_dev);
    fill(L.w_out, residual_std);
  }
  ones(p.final_norm);
  if (!p.output.empty()) fill(p.output, std_dev);
  return p;
}

template <class S>
struct Model {
  ModelConfig config;
  Parameters<S> params;

  static Model initialize(const ModelConfig& c) { return Model{c, init_params<S>(c)}; }
};

// B x T x V logits, row-major.
template <class S>
struct Logits {
  std::size_t batch = 0, time = 0, vocab = 0;
  std::vector<S> data;

  S* at(std::size_t b, std::size_t t) { return data.data() + (b * time + t) * vocab; }
  const S* at(std::size_t b, std::size_t t) const { return data.data() + (b * time + t) * vocab; }
};

// Token ids plus next-token targets and a per-position loss mask. Position t
// predicts targets[t]; mask[t] selects which predictions enter the loss.
struct LossMaskBatch {
  std::size_t batch = 0, time = 0;
  std::vector<TokenId> tokens;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;

  std::span<const TokenId> row(std::size_t b) const { return {tokens.data() + b * time, time}; }

  // targets = tokens shifted left; the final target is PAD. mask[t] is 1 when the
  // target exists, is not PAD, and `target_mask` (per token, optional) selects it.
  static LossMaskBatch from_rows(std::size_t batch, std::size_t time, std::vector<TokenId> tokens,
                                 const std::vector<std::uint8_t>* target_mask = nullptr) {
    if (tokens.size() != batch * time) throw DataError("token matrix size mismatch");
    LossMaskBatch out{batch, time, std::move(tokens), {}, {}};
    out.targets.assign(batch * time, Vocab::kPad);
    out.mask.assign(batch * time, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t + 1 < time; ++t) {
        const std::size_t i = b * time + t;
        out.targets[i] = out.tokens[i + 1];
        const bool selected = target_mask == nullptr || (*target_mask)[i + 1] != 0;
        out.mask[i] = out.targets[i] != Vocab::kPad && selected;
      }
    }
    return out;
  }

  void validate(std::size_t vocab_size) const {
    const std::size_t n = batch * time;
    if (tokens.size() != n || targets.size() != n || mask.size() != n) throw DataError("loss batch size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      if (tokens[i] >= vocab_size || targets[i] >= vocab_size) throw DataError("token id out of range");
      if (mask[i] && targets[i] == Vocab::kPad) throw DataError("loss mask selects a PAD target");
    }
  }
};

namespace detail {

template <class S>
S gelu(S u) {
  return S(0.5) * u * (S(1) + std::erf(u * S(0.70710678118654752440)));
}

template <class S>
S gelu_grad(S u) {
  const S cdf = S(0.5) * (S(1) + std::erf(u * S(0.70710678118654752440)));
  const S pdf = std::exp(S(-0.5) * u * u) * S(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + u * pdf;
}

template <class S>
S sigmoid(S u) {
  return S(1) / (S(1) + std::exp(-u));
}

inline constexpr double kNormEps = 1e-5;
inline constexpr double kRopeBase = 10000.0;

// Per-layer activations kept for the backward pass.
template <class S>
struct LayerCache {
  std::vector<S> x_in, inv_rms1, h1, q, k, v, probs, attn, x_mid, inv_rms2, h2, u, gate, z;
};

template <class S>
struct RowCache {
  std::size_t time = 0;
  std::vector<LayerCache<S>> layers;
  std::vector<S> x_final, inv_rms_final, h_final, logits;
};

template <class S>
struct RopeTable {
  std::size_t half = 0;
  std::vector<S> cos, sin;  // time x half

  RopeTable(std::size_t time, std::size_t head_dim) : half(head_dim / 2), cos(time * half), sin(time * half) {
    for (std::size_t t = 0; t < time; ++t) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(t) * freq;
        cos[t * half + i] = static_cast<S>(std::cos(angle));
        sin[t * half + i] = static_cast<S>(std::sin(angle));
      }
    }
  }
};

template <class S>
void rms_norm(const S* x, const S* gain, S* y, S* inv_rms, std::size_t time, std::size_t d) {
  for (std::size_t t = 0; t < time; ++t) {
    const S* xr = x + t * d;
    S ms = 0;
    for (std::size_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
    const S r = S(1) / std::sqrt(ms / static_cast<S>(d) + static_cast<S>(kNormEps));
    inv_rms[t] = r;
    for (std::size_t i = 0; i < d; ++i) y[t * d + i] = xr[i] * r * gain[i];
  }
}

// dx += d(rms_norm)/dx ^T dy ; dgain += ...
template <class S>
void rms_norm_backward(const S* x, const S* gain, const S* inv_rms, const S* dy, S* dx, S* dgain, std::size_t time,
                       std::size_t d) {
  for (std::size_t t = 0; t < time; ++t) {
    const S* xr = x + t * d;
    const S* dyr = dy + t * d;
    const S r = inv_rms[t];
    S proj = 0;
    for (std::size_t i = 0; i < d; ++i) {
      dgain[i] += dyr[i] * xr[i] * r;
      proj += dyr[i] * gain[i] * xr[i];
    }
    const S coeff = r * r * r * proj / static_cast<S>(d);
    for (std::size_t i = 0; i < d; ++i) dx[t * d + i] += dyr[i] * gain[i] * r - xr[i] * coeff;
  }
}

// Rotates (x[2i], x[2i+1]) pairs of every head by +angle (forward) or -angle.
template <class S>
void apply_rope(S* x, const RopeTable<S>& rope, std::size_t time, std::size_t n_heads, std::size_t head_dim, bool inverse) {
  const std::size_t d = n_heads * head_dim;
  for (std::size_t t = 0; t < time; ++t) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      S* xh = x + t * d + h * head_dim;
      for (std::size_t i = 0; i < rope.half; ++i) {
        const S c = rope.cos[t * rope.half + i];
        const S s = inverse ? -rope.sin[t * rope.half + i] : rope.sin[t * rope.half + i];
        const S a = xh[2 * i], b = xh[2 * i + 1];
        xh[2 * i] = a * c - b * s;
        xh[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

// Weights transposed once per call for the backward matmuls.
template <class S>
struct TransposedWeights {
  struct Layer {
    std::vector<S> wq, wk, wv, wo, w_in, w_gate, w_out;
  };
  std::vector<Layer> layers;
  std::vector<S> output;  // V x d (untied) ; tied uses the embedding as-is

  TransposedWeights(const ModelConfig& c, const Parameters<S>& p) {
    const std::size_t d = c.d_model, f = c.d_ff;
    for (const auto& L : p.layers) {
      Layer t;
      t.wq = kernels::transpose(L.wq.ptr(), d, d);
      t.wk = kernels::transpose(L.wk.ptr(), d, d);
      t.wv = kernels::transpose(L.wv.ptr(), d, d);
      t.wo = kernels::transpose(L.wo.ptr(), d, d);
      t.w_in = kernels::transpose(L.w_in.ptr(), d, f);
      if (!L.w_gate.empty()) t.w_gate = kernels::transpose(L.w_gate.ptr(), d, f);
      t.w_out = kernels::transpose(L.w_out.ptr(), f, d);
      layers.push_back(std::move(t));
    }
    if (!c.tie_embeddings) output = kernels::transpose(p.output.ptr(), d, c.vocab_size);
  }
};

// Runs one sequence through the network. When `all_logits` is false only the
// last position's logits are produced (used for greedy decoding).
template <class S>
void forward_row(const ModelConfig& c, const Parameters<S>& p, std::span<const TokenId> tokens, RowCache<S>& cache,
                 const RopeTable<S>* rope, const std::vector<S>* embedding_t, bool all_logits = true) {
  const std::size_t T = tokens.size(), d = c.d_model, f = c.d_ff, H = c.n_heads, hd = c.head_dim(), V = c.vocab_size;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  cache.time = T;
  cache.layers.resize(c.n_layers);

  std::vector<S> x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    std::copy_n(p.embedding.ptr() + tokens[t] * d, d, x.data() + t * d);
    if (!p.positions.empty()) kernels::axpy(S(1), p.positions.ptr() + t * d, x.data() + t * d, d);
  }

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = p.layers[l];
    auto& lc = cache.layers[l];
    lc.x_in = x;
    lc.inv_rms1.assign(T, S(0));
    lc.h1.assign(T * d, S(0));
    rms_norm(x.data(), L.attn_norm.ptr(), lc.h1.data(), lc.inv_rms1.data(), T, d);

    lc.q.assign(T * d, S(0));
    lc.k.assign(T * d, S(0));
    lc.v.assign(T * d, S(0));
    kernels::matmul_acc(lc.h1.data(), L.wq.ptr(), lc.q.data(), T, d, d);
    kernels::matmul_acc(lc.h1.data(), L.wk.ptr(), lc.k.data(), T, d, d);
    kernels::matmul_acc(lc.h1.data(), L.wv.ptr(), lc.v.data(), T, d, d);
    if (rope != nullptr) {
      apply_rope(lc.q.data(), *rope, T, H, hd, false);
      apply_rope(lc.k.data(), *rope, T, H, hd, false);
    }

    lc.probs.assign(H * T * T, S(0));
    lc.attn.assign(T * d, S(0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        S* prow = lc.probs.data() + (h * T + t) * T;
        const S* qt = lc.q.data() + t * d + h * hd;
        S max_score = -std::numeric_limits<S>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = kernels::dot(qt, lc.k.data() + s * d + h * hd, hd) * scale;
          max_score = std::max(max_score, prow[s]);
        }
        S total = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = std::exp(prow[s] - max_score);
          total += prow[s];
        }
        const S inv_total = S(1) / total;
        S* out = lc.attn.data() + t * d + h * hd;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] *= inv_total;
          kernels::axpy(prow[s], lc.v.data() + s * d + h * hd, out, hd);
        }
      }
    }
    kernels::matmul_acc(lc.attn.data(), L.wo.ptr(), x.data(), T, d, d);
    lc.x_mid = x;

    lc.inv_rms2.assign(T, S(0));
    lc.h2.assign(T * d, S(0));
    rms_norm(x.data(), L.ffn_norm.ptr(), lc.h2.data(), lc.inv_rms2.data(), T, d);
    lc.u.assign(T * f, S(0));
    kernels::matmul_acc(lc.h2.data(), L.w_in.ptr(), lc.u.data(), T, d, f);
    lc.z.resize(T * f);
    if (c.feed_forward == FeedForward::swiglu) {
      lc.gate.assign(T * f, S(0));
      kernels::matmul_acc(lc.h2.data(), L.w_gate.ptr(), lc.gate.data(), T, d, f);
      for (std::size_t i = 0; i < T * f; ++i) lc.z[i] = lc.u[i] * sigmoid(lc.u[i]) * lc.gate[i];
    } else {
      for (std::size_t i = 0; i < T * f; ++i) lc.z[i] = gelu(lc.u[i]);
    }
    kernels::matmul_acc(lc.z.data(), L.w_out.ptr(), x.data(), T, f, d);
  }

  cache.x_final = x;
  cache.inv_rms_final.assign(T, S(0));
  cache.h_final.assign(T * d, S(0));
  rms_norm(x.data(), p.final_norm.ptr(), cache.h_final.data(), cache.inv_rms_final.data(), T, d);

  const std::size_t first = all_logits ? 0 : T - 1;
  const std::size_t rows = T - first;
  cache.logits.assign(rows * V, S(0));
  const S* out_w = c.tie_embeddings ? embedding_t->data() : p.output.ptr();
  kernels::matmul_acc(cache.h_final.data() + first * d, out_w, cache.logits.data(), rows, d, V);
}

// Accumulates parameter gradients of one row given dlogits (T x V).
template <class S>
void backward_row(const ModelConfig& c, const Parameters<S>& p, const TransposedWeights<S>& wt,
                  std::span<const TokenId> tokens, const RowCache<S>& cache, const std::vector<S>& dlogits,
                  const RopeTable<S>* rope, Parameters<S>& g) {
  const std::size_t T = cache.time, d = c.d_model, f = c.d_ff, H = c.n_heads, hd = c.head_dim(), V = c.vocab_size;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));

  // Output projection.
  std::vector<S> dh(T * d, S(0));
  if (c.tie_embeddings) {
    // logits = h E^T: dE += dlogits^T h, dh += dlogits E
    kernels::matmul_tn_acc(dlogits.data(), cache.h_final.data(), g.embedding.ptr(), T, V, d);
    kernels::matmul_acc(dlogits.data(), p.embedding.ptr(), dh.data(), T, V, d);
  } else {
    kernels::matmul_tn_acc(cache.h_final.data(), dlogits.data(), g.output.ptr(), T, d, V);
    kernels::matmul_acc(dlogits.data(), wt.output.data(), dh.data(), T, V, d);
  }
  std::vector<S> dx(T * d, S(0));
  rms_norm_backward(cache.x_final.data(), p.final_norm.ptr(), cache.inv_rms_final.data(), dh.data(), dx.data(),
                    g.final_norm.ptr(), T, d);

  std::vector<S> dz, du, dgate, dh2, dattn, dq, dk, dv, dh1, dprow(T);
  for (std::size_t l = c.n_layers; l-- > 0;) {
    const auto& L = p.layers[l];
    const auto& lc = cache.layers[l];
    const auto& lt = wt.layers[l];
    auto& G = g.layers[l];

    // Feed-forward block: x_out = x_mid + ffn(rms(x_mid)).
    dz.assign(T * f, S(0));
    kernels::matmul_tn_acc(lc.z.data(), dx.data(), G.w_out.ptr(), T, f, d);
    kernels::matmul_acc(dx.data(), lt.w_out.data(), dz.data(), T, d, f);
    du.assign(T * f, S(0));
    dh2.assign(T * d, S(0));
    if (c.feed_forward == FeedForward::swiglu) {
      dgate.assign(T * f, S(0));
      for (std::size_t i = 0; i < T * f; ++i) {
        const S sg = sigmoid(lc.u[i]);
        const S silu = lc.u[i] * sg;
        dgate[i] = dz[i] * silu;
        du[i] = dz[i] * lc.gate[i] * sg * (S(1) + lc.u[i] * (S(1) - sg));
      }
      kernels::matmul_tn_acc(lc.h2.data(), dgate.data(), G.w_gate.ptr(), T, d, f);
      kernels::matmul_acc(dgate.data(), lt.w_gate.data(), dh2.data(), T, f, d);
    } else {
      for (std::size_t i = 0; i < T * f; ++i) du[i] = dz[i] * gelu_grad(lc.u[i]);
    }
    kernels::matmul_tn_acc(lc.h2.data(), du.data(), G.w_in.ptr(), T, d, f);
    kernels::matmul_acc(du.data(), lt.w_in.data(), dh2.data(), T, f, d);
    rms_norm_backward(lc.x_mid.data(), L.ffn_norm.ptr(), lc.inv_rms2.data(), dh2.data(), dx.data(), G.ffn_norm.ptr(), T,
                      d);

    // Attention block: x_mid = x_in + attn(rms(x_in)) Wo.
    dattn.assign(T * d, S(0));
    kernels::matmul_tn_acc(lc.attn.data(), dx.data(), G.wo.ptr(), T, d, d);
    kernels::matmul_acc(dx.data(), lt.wo.data(), dattn.data(), T, d, d);
    dq.assign(T * d, S(0));
    dk.assign(T * d, S(0));
    dv.assign(T * d, S(0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const S* prow = lc.probs.data() + (h * T + t) * T;
        const S* do_t = dattn.data() + t * d + h * hd;
        S weighted = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          dprow[s] = kernels::dot(do_t, lc.v.data() + s * d + h * hd, hd);
          weighted += prow[s] * dprow[s];
          kernels::axpy(prow[s], do_t, dv.data() + s * d + h * hd, hd);
        }
        S* dq_t = dq.data() + t * d + h * hd;
        const S* q_t = lc.q.data() + t * d + h * hd;
        for (std::size_t s = 0; s <= t; ++s) {
          const S ds = prow[s] * (dprow[s] - weighted) * scale;
          kernels::axpy(ds, lc.k.data() + s * d + h * hd, dq_t, hd);
          kernels::axpy(ds, q_t, dk.data() + s * d + h * hd, hd);
        }
      }
    }
    if (rope != nullptr) {
      apply_rope(dq.data(), *rope, T, H, hd, true);
      apply_rope(dk.data(), *rope, T, H, hd, true);
    }
    dh1.assign(T * d, S(0));
    kernels::matmul_tn_acc(lc.h1.data(), dq.data(), G.wq.ptr(), T, d, d);
    kernels::matmul_tn_acc(lc.h1.data(), dk.data(), G.wk.ptr(), T, d, d);
    kernels::matmul_tn_acc(lc.h1.data(), dv.data(), G.wv.ptr(), T, d, d);
    kernels::matmul_acc(dq.data(), lt.wq.data(), dh1.data(), T, d, d);
    kernels::matmul_acc(dk.data(), lt.wk.data(), dh1.data(), T, d, d);
    kernels::matmul_acc(dv.data(), lt.wv.data(), dh1.data(), T, d, d);
    rms_norm_backward(lc.x_in.data(), L.attn_norm.ptr(), lc.inv_rms1.data(), dh1.data(), dx.data(), G.attn_norm.ptr(), T,
                      d);
  }

  for (std::size_t t = 0; t < T; ++t) {
    kernels::axpy(S(1), dx.data() + t * d, g.embedding.ptr() + tokens[t] * d, d);
    if (!g.positions.empty()) kernels::axpy(S(1), dx.data() + t * d, g.positions.ptr() + t * d, d);
  }
}

template <class S>
void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw DataError("forward: empty token sequence");
  if (tokens.size() > c.context_len) {
    throw DataError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds context_len " +
                    std::to_string(c.context_len));
  }
  for (TokenId id : tokens) {
    if (id >= c.vocab_size) throw DataError("forward: token id " + std::to_string(id) + " out of range");
  }
}

// Stable log-sum-exp of one logit row.
template <class S>
S log_sum_exp(const S* z, std::size_t n) {
  S m = -std::numeric_limits<S>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, z[i]);
  S total = 0;
  for (std::size_t i = 0; i < n; ++i) total += std::exp(z[i] - m);
  return m + std::log(total);
}

}  // namespace detail

// Worker count for batch-parallel forward/backward. Rows are reduced in a fixed
// order, so results do not depend on this value.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("DOMAINFORGE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

template <class S>
Logits<S> forward(const Model<S>& model, std::span<const TokenId> tokens, std::size_t batch, std::size_t time) {
  const ModelConfig& c = model.config;
  if (tokens.size() != batch * time) throw DataError("forward: token matrix size mismatch");
  Logits<S> out{batch, time, c.vocab_size, std::vector<S>(batch * time * c.vocab_size)};
  std::optional<detail::RopeTable<S>> rope;
  if (c.pos_encoding == PosEncoding::rotary) rope.emplace(time, c.head_dim());
  std::vector<S> embedding_t;
  if (c.tie_embeddings) embedding_t = kernels::transpose(model.params.embedding.ptr(), c.vocab_size, c.d_model);
  detail::RowCache<S> cache;
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = tokens.subspan(b * time, time);
    detail::check_tokens<S>(c, row);
    detail::forward_row(c, model.params, row, cache, rope ? &*rope : nullptr, &embedding_t);
    std::copy(cache.logits.begin(), cache.logits.end(), out.at(b, 0));
  }
  return out;
}

// Logits of the final position only.
template <class S>
std::vector<S> last_logits(const Model<S>& model, std::span<const TokenId> tokens) {
  const ModelConfig& c = model.config;
  detail::check_tokens<S>(c, tokens);
  std::optional<detail::RopeTable<S>> rope;
  if (c.pos_encoding == PosEncoding::rotary) rope.emplace(tokens.size(), c.head_dim());
  std::vector<S> embedding_t;
  if (c.tie_embeddings) embedding_t = kernels::transpose(model.params.embedding.ptr(), c.vocab_size, c.d_model);
  detail::RowCache<S> cache;
  detail::forward_row(c, model.params, tokens, cache, rope ? &*rope : nullptr, &embedding_t, false);
  return cache.logits;
}

// Mean token cross entropy over positions where mask is set.
template <class S>
S loss_masked(const Logits<S>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.batch * logits.time;
  if (targets.size() != n || mask.size() != n) throw DataError("loss: shape mismatch");
  S total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const S* z = logits.data.data() + i * logits.vocab;
    total += detail::log_sum_exp(z, logits.vocab) - z[targets[i]];
    ++count;
  }
  if (count == 0) throw DataError("loss: mask selects no positions");
  return total / static_cast<S>(count);
}

// Mean token cross entropy over every position whose target is not PAD.
template <class S>
S loss_full(const Logits<S>& logits, std::span<const TokenId> targets) {
  const std::size_t n = logits.batch * logits.time;
  if (targets.size() != n) throw DataError("loss: shape mismatch");
  S total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == Vocab::kPad) continue;
    const S* z = logits.data.data() + i * logits.vocab;
    total += detail::log_sum_exp(z, logits.vocab) - z[targets[i]];
    ++count;
  }
  if (count == 0) throw DataError("loss: no non-PAD targets");
  return total / static_cast<S>(count);
}

// d loss_masked / d logits = (softmax - onehot(target)) / count at masked
// positions and exactly zero elsewhere.
template <class S>
Logits<S> loss_masked_grad(const Logits<S>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.batch * logits.time;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) count += mask[i] != 0;
  if (count == 0) throw DataError("loss: mask selects no positions");
  Logits<S> grad{logits.batch, logits.time, logits.vocab, std::vector<S>(logits.data.size(), S(0))};
  const S inv = S(1) / static_cast<S>(count);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const S* z = logits.data.data() + i * logits.vocab;
    S* gz = grad.data.data() + i * logits.vocab;
    const S lse = detail::log_sum_exp(z, logits.vocab);
    for (std::size_t v = 0; v < logits.vocab; ++v) gz[v] = std::exp(z[v] - lse) * inv;
    gz[targets[i]] -= inv;
  }
  return grad;
}

template <class S>
struct LossAndGrad {
  S loss = 0;
  std::size_t count = 0;
  Parameters<S> grads;
};

// Loss over batch.mask and its gradient with respect to every parameter.
template <class S>
LossAndGrad<S> loss_and_gradient(const Model<S>& model, const LossMaskBatch& batch, std::size_t threads = 1) {
  const ModelConfig& c = model.config;
  batch.validate(c.vocab_size);
  const std::size_t T = batch.time, V = c.vocab_size;
  std::size_t count = 0;
  for (std::uint8_t m : batch.mask) count += m != 0;
  if (count == 0) throw DataError("loss: mask selects no positions");

  LossAndGrad<S> result{S(0), count, zero_parameters<S>(c)};
  const S inv = S(1) / static_cast<S>(count);
  std::optional<detail::RopeTable<S>> rope;
  if (c.pos_encoding == PosEncoding::rotary) rope.emplace(T, c.head_dim());
  const detail::TransposedWeights<S> wt(c, model.params);
  std::vector<S> embedding_t;
  if (c.tie_embeddings) embedding_t = kernels::transpose(model.params.embedding.ptr(), V, c.d_model);

  struct Worker {
    detail::RowCache<S> cache;
    Parameters<S> grads;
    std::vector<S> dlogits;
    S loss = 0;
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(batch.batch, 1));
  std::vector<Worker> workers(threads);
  for (auto& w : workers) w.grads = zero_parameters<S>(c);

  auto run_row = [&](Worker& w, std::size_t b) {
    auto row = batch.row(b);
    detail::check_tokens<S>(c, row);
    detail::forward_row(c, model.params, row, w.cache, rope ? &*rope : nullptr, &embedding_t);
    w.grads.set_zero();
    w.dlogits.assign(T * V, S(0));
    w.loss = 0;
    bool any = false;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t i = b * T + t;
      if (!batch.mask[i]) continue;
      any = true;
      const S* z = w.cache.logits.data() + t * V;
      S* gz = w.dlogits.data() + t * V;
      const S lse = detail::log_sum_exp(z, V);
      w.loss += lse - z[batch.targets[i]];
      for (std::size_t v = 0; v < V; ++v) gz[v] = std::exp(z[v] - lse) * inv;
      gz[batch.targets[i]] -= inv;
    }
    if (any) detail::backward_row(c, model.params, wt, row, w.cache, w.dlogits, rope ? &*rope : nullptr, w.grads);
    return any;
  };

  S total = 0;
  for (std::size_t start = 0; start < batch.batch; start += threads) {
    const std::size_t n = std::min(threads, batch.batch - start);
    std::vector<char> used(n, 0);
    if (n == 1) {
      used[0] = run_row(workers[0], start);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t k = 0; k < n; ++k) pool.emplace_back([&, k] { used[k] = run_row(workers[k], start + k); });
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (!used[k]) continue;
      total += workers[k].loss;
      result.grads += workers[k].grads;
    }
  }
  result.loss = total * inv;
  return result;
}

// Loss without gradients, for evaluation passes.
template <class S>
S batch_loss(const Model<S>& model, const LossMaskBatch& batch) {
  batch.validate(model.config.vocab_size);
  Logits<S> logits = forward(model, batch.tokens, batch.batch, batch.time);
  return loss_masked(logits, batch.targets, batch.mask);
}

template <class S>
std::size_t argmax(const std::vector<S>& values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

// Greedy decoding until EOS or max_new_tokens. The EOS token is not returned.
template <class S>
TokenSeq greedy_generate(const Model<S>& model, TokenSeq prompt, std::size_t max_new_tokens) {
  TokenSeq generated;
  for (std::size_t i = 0; i < max_new_tokens && prompt.size() < model.config.context_len; ++i) {
    const auto logits = last_logits(model, prompt);
    const auto next = static_cast<TokenId>(argmax(logits));
    if (next == Vocab::kEos) break;
    generated.push_back(next);
    prompt.push_back(next);
  }
  return generated;
}

// Sum of log p(continuation | prompt) over continuation tokens, and the count.
template <class S>
std::pair<double, std::size_t> continuation_log_prob(const Model<S>& model, const TokenSeq& prompt,
                                                     const TokenSeq& continuation) {
  if (prompt.empty() || continuation.empty()) throw DataError("scoring needs a nonempty prompt and continuation");
  TokenSeq full = prompt;
  full.insert(full.end(), continuation.begin(), continuation.end());
  const std::size_t T = full.size() - 1;  // the last token is only a target
  Logits<S> logits = forward(model, std::span<const TokenId>(full.data(), T), 1, T);
  double total = 0;
  for (std::size_t k = 0; k < continuation.size(); ++k) {
    const std::size_t t = prompt.size() - 1 + k;
    const S* z = logits.at(0, t);
    total += static_cast<double>(z[full[t + 1]] - detail::log_sum_exp(z, logits.vocab));
  }
  return {total, continuation.size()};
}

// Converts parameters between precisions (training runs in float, checks in double).
template <class To, class From>
Model<To> convert_model(const Model<From>& model) {
  Model<To> out{model.config, zero_parameters<To>(model.config)};
  auto dst = out.params.tensors();
  auto src = model.params.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i)
    for (std::size_t k = 0; k < dst[i]->size(); ++k) dst[i]->data[k] = static_cast<To>(src[i]->data[k]);
  return out;
}

}  // namespace domainforge

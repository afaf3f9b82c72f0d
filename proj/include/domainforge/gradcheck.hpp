#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "model.hpp"
#include "rng.hpp"

namespace domainforge {

struct GradCheckResult {
  std::size_t coordinates = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
};

// Random tokens with a random mask (at least one bit set per batch).
inline LossMaskBatch random_loss_batch(Rng& rng, std::size_t batch, std::size_t time, std::size_t vocab,
                                       double mask_rate = 0.5) {
  std::vector<TokenId> tokens(batch * time);
  for (TokenId& t : tokens) t = static_cast<TokenId>(rng.below(std::min<std::size_t>(vocab, Vocab::kPad)));
  LossMaskBatch out = LossMaskBatch::from_rows(batch, time, std::move(tokens));
  bool any = false;
  for (std::size_t i = 0; i < out.mask.size(); ++i) {
    if (out.mask[i] && rng.uniform() >= mask_rate) out.mask[i] = 0;
    any = any || out.mask[i];
  }
  if (!any) out.mask[0] = 1;
  return out;
}

// Adds N(0, std_dev^2) noise to every parameter. At initialization the query and
// key projections have gradients near 1e-7, below finite-difference roundoff, so
// checks are run at a generic point instead.
template <class S>
void perturb_parameters(Model<S>& model, Rng& rng, double std_dev) {
  for (Tensor<S>* t : model.params.tensors())
    for (S& x : t->data) x += static_cast<S>(std_dev * rng.normal());
}

// Central differences at `samples` uniformly drawn coordinates, compared with the
// analytic gradient. rel = |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult gradient_check(Model<double> model, const LossMaskBatch& batch, std::size_t samples,
                                      double h = 1e-5, std::uint64_t seed = 0) {
  const LossAndGrad<double> analytic = loss_and_gradient(model, batch, 1);
  auto params = model.params.tensors();
  auto grads = analytic.grads.tensors();
  std::vector<std::size_t> offsets{0};
  for (const auto* t : params) offsets.push_back(offsets.back() + t->size());

  Rng rng(seed);
  GradCheckResult result;
  result.coordinates = samples;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t flat = rng.below(offsets.back());
    const std::size_t ti = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    const std::size_t k = flat - offsets[ti];
    double& w = params[ti]->data[k];
    const double saved = w;
    w = saved + h;
    const double up = batch_loss(model, batch);
    w = saved - h;
    const double down = batch_loss(model, batch);
    w = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = grads[ti]->data[k];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
    if (rel > result.max_rel_error || s == 0) {
      result.max_rel_error = std::max(result.max_rel_error, rel);
      result.worst_tensor = params[ti]->name;
      result.worst_index = k;
    }
  }
  return result;
}

struct MaskCheckResult {
  std::size_t batches = 0;
  double max_loss_diff = 0;           // |loss_masked(all ones) - loss_full|
  bool masked_grad_exactly_zero = true;  // d loss / d logits at mask = 0
};

// Compares loss_masked with an all-ones mask against loss_full, and checks that
// logit gradients vanish exactly where a random mask is 0.
inline MaskCheckResult mask_equivalence_check(const Model<double>& model, std::size_t batches, std::size_t batch,
                                              std::size_t time, std::uint64_t seed = 0) {
  Rng rng(seed);
  MaskCheckResult result;
  result.batches = batches;
  const std::size_t V = model.config.vocab_size;
  for (std::size_t n = 0; n < batches; ++n) {
    LossMaskBatch lb = random_loss_batch(rng, batch, time, V);
    const Logits<double> logits = forward(model, lb.tokens, lb.batch, lb.time);
    std::vector<std::uint8_t> ones(lb.targets.size());
    for (std::size_t i = 0; i < ones.size(); ++i) ones[i] = lb.targets[i] != Vocab::kPad;
    const double masked = loss_masked(logits, lb.targets, ones);
    const double full = loss_full(logits, lb.targets);
    result.max_loss_diff = std::max(result.max_loss_diff, std::abs(masked - full));

    const Logits<double> g = loss_masked_grad(logits, lb.targets, lb.mask);
    for (std::size_t i = 0; i < lb.mask.size(); ++i) {
      if (lb.mask[i]) continue;
      const double* gz = g.data.data() + i * V;
      for (std::size_t v = 0; v < V; ++v) {
        if (gz[v] != 0.0) result.masked_grad_exactly_zero = false;
      }
    }
  }
  return result;
}

}  // namespace domainforge

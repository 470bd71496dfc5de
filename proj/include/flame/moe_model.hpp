#pragma once

// Toy sparse mixture-of-experts network with per-expert LoRA adapters.
//
//   x = embed * u
//   h = s * sum_{j in TopK(softmax(router^T x), k_i)} g_j * (W^j x + (alpha/r) A^j (B^j x))
//   o = head * h
//
// Only the LoRA pairs and the rescaler s are trainable. Routing is decided per
// example and no gradient passes through the discrete TopK selection.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flame/errors.hpp"
#include "flame/numerics.hpp"
#include "flame/random.hpp"

namespace flame {

enum class TaskKind { regression, classification };

inline const char* to_string(TaskKind k) { return k == TaskKind::regression ? "regression" : "classification"; }

/// One training/evaluation example. `label` is the class id (classification)
/// or the generating cluster (regression); `target` is only used for regression.
struct Example {
  Vector input;
  std::size_t label = 0;
  Vector target;

  friend bool operator==(const Example&, const Example&) = default;
};

struct LoraPair {
  Matrix a;  // out x r
  Matrix b;  // r x in
  double alpha = 16.0;

  std::size_t rank() const noexcept { return a.cols(); }
  double scaling() const { return rank() == 0 ? 0.0 : alpha / static_cast<double>(rank()); }

  /// (alpha / r) * A * B
  Matrix delta() const {
    if (rank() == 0) return Matrix(a.rows(), b.cols());
    return scale(matmul(a, b), scaling());
  }

  void validate() const {
    if (a.cols() != b.rows()) throw DimensionError("LoraPair: A " + a.shape() + " and B " + b.shape() + " disagree on rank");
  }

  friend bool operator==(const LoraPair&, const LoraPair&) = default;

  /// Standard LoRA init: A ~ N(0, 0.02^2), B = 0, so the initial delta is exactly zero.
  static LoraPair fresh(std::size_t out_dim, std::size_t in_dim, std::size_t rank, double alpha, Rng& rng) {
    LoraPair p{Matrix(out_dim, rank), Matrix(rank, in_dim), alpha};
    for (auto& v : p.a.data()) v = rng.normal(0.0, 0.02);
    return p;
  }
};

struct SmoeLayer {
  std::vector<Matrix> experts;  // M frozen W^j, each out x in
  Matrix router;                // in x M, frozen
  std::vector<LoraPair> loras;  // M trainable pairs
  double rescaler = 1.0;
  std::size_t k_full = 1;
  bool renormalize_gates = true;

  std::size_t expert_count() const noexcept { return experts.size(); }
  std::size_t in_dim() const noexcept { return router.rows(); }
  std::size_t out_dim() const noexcept { return experts.empty() ? 0 : experts.front().rows(); }

  void validate() const {
    const std::size_t m = expert_count();
    if (m == 0) throw DimensionError("SmoeLayer: no experts");
    if (loras.size() != m) throw DimensionError("SmoeLayer: " + std::to_string(loras.size()) + " LoRA pairs for " + std::to_string(m) + " experts");
    if (router.cols() != m) throw DimensionError("SmoeLayer: router " + router.shape() + " does not have one column per expert");
    if (k_full < 1 || k_full > m) throw BudgetError("SmoeLayer: k_full=" + std::to_string(k_full) + " outside [1, " + std::to_string(m) + "]");
    for (std::size_t j = 0; j < m; ++j) {
      const Matrix& w = experts[j];
      if (w.rows() != out_dim() || w.cols() != in_dim()) throw DimensionError("SmoeLayer: expert " + std::to_string(j) + " has shape " + w.shape());
      loras[j].validate();
      if (loras[j].a.rows() != out_dim() || loras[j].b.cols() != in_dim()) {
        throw DimensionError("SmoeLayer: LoRA " + std::to_string(j) + " does not match expert shape " + w.shape());
      }
    }
  }
};

struct RoutingDecision {
  std::vector<std::size_t> selected;  // ascending expert indices
  Vector gate_weights;                // aligned with `selected`
};

inline RoutingDecision route(const SmoeLayer& layer, std::span<const double> x, std::size_t k_i) {
  if (k_i < 1 || k_i > layer.k_full || layer.k_full > layer.expert_count()) {
    throw BudgetError("route: k_i=" + std::to_string(k_i) + " outside [1, k_full=" + std::to_string(layer.k_full) + "]");
  }
  const Vector logits = matvec_transposed(layer.router, x);
  const Vector probs = softmax(logits);
  RoutingDecision d;
  d.selected = topk_indices(probs, k_i);
  d.gate_weights.reserve(k_i);
  double mass = 0.0;
  for (std::size_t j : d.selected) {
    d.gate_weights.push_back(probs[j]);
    mass += probs[j];
  }
  if (layer.renormalize_gates) {
    for (auto& g : d.gate_weights) g /= mass;
  }
  return d;
}

struct SmoeOutput {
  Vector h;
  RoutingDecision routing;
};

namespace detail {

// W^j x + (alpha/r) A^j (B^j x); also returns B^j x for reuse in backprop.
inline Vector expert_branch(const SmoeLayer& layer, std::size_t j, std::span<const double> x, Vector* bx_out = nullptr) {
  Vector z = matvec(layer.experts[j], x);
  const LoraPair& lora = layer.loras[j];
  if (lora.rank() > 0) {
    Vector bx = matvec(lora.b, x);
    const Vector abx = matvec(lora.a, bx);
    const double c = lora.scaling();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += c * abx[i];
    if (bx_out) *bx_out = std::move(bx);
  } else if (bx_out) {
    bx_out->clear();
  }
  return z;
}

}  // namespace detail

inline SmoeOutput smoe_forward(const SmoeLayer& layer, std::span<const double> x, std::size_t k_i) {
  if (x.size() != layer.in_dim()) {
    throw DimensionError("smoe_forward: input length " + std::to_string(x.size()) + " != layer input dim " + std::to_string(layer.in_dim()));
  }
  SmoeOutput out{Vector(layer.out_dim(), 0.0), route(layer, x, k_i)};
  for (std::size_t idx = 0; idx < out.routing.selected.size(); ++idx) {
    const Vector z = detail::expert_branch(layer, out.routing.selected[idx], x);
    const double g = out.routing.gate_weights[idx];
    for (std::size_t i = 0; i < z.size(); ++i) out.h[i] += g * z[i];
  }
  for (auto& v : out.h) v *= layer.rescaler;
  return out;
}

struct ToyModel {
  Matrix embed;  // in_dim x input features
  SmoeLayer smoe;
  Matrix head;   // outputs x out_dim
  TaskKind task = TaskKind::classification;

  std::size_t feature_dim() const noexcept { return embed.cols(); }
  std::size_t output_dim() const noexcept { return head.rows(); }

  void validate() const {
    smoe.validate();
    if (embed.rows() != smoe.in_dim()) throw DimensionError("ToyModel: embed " + embed.shape() + " does not feed SMoE input dim " + std::to_string(smoe.in_dim()));
    if (head.cols() != smoe.out_dim()) throw DimensionError("ToyModel: head " + head.shape() + " does not consume SMoE output dim " + std::to_string(smoe.out_dim()));
  }
};

struct ToyModelShape {
  std::size_t feature_dim = 8;
  std::size_t in_dim = 8;   // n
  std::size_t out_dim = 8;  // m
  std::size_t experts = 16;
  std::size_t k_full = 8;
  std::size_t rank = 4;
  double alpha = 16.0;
  std::size_t outputs = 4;  // classes or regression target dim
  TaskKind task = TaskKind::classification;
  double router_scale = 2.0;
};

/// Random frozen base network with fresh LoRA adapters.
inline ToyModel make_toy_model(const ToyModelShape& s, Rng& rng) {
  auto gaussian = [&](std::size_t r, std::size_t c, double sd) {
    Matrix m(r, c);
    for (auto& v : m.data()) v = rng.normal(0.0, sd);
    return m;
  };
  ToyModel model;
  model.task = s.task;
  model.embed = gaussian(s.in_dim, s.feature_dim, 1.0 / std::sqrt(static_cast<double>(s.feature_dim)));
  model.smoe.k_full = s.k_full;
  model.smoe.router = gaussian(s.in_dim, s.experts, s.router_scale / std::sqrt(static_cast<double>(s.in_dim)));
  for (std::size_t j = 0; j < s.experts; ++j) {
    model.smoe.experts.push_back(gaussian(s.out_dim, s.in_dim, 1.0 / std::sqrt(static_cast<double>(s.in_dim))));
  }
  for (std::size_t j = 0; j < s.experts; ++j) {
    model.smoe.loras.push_back(LoraPair::fresh(s.out_dim, s.in_dim, s.rank, s.alpha, rng));
  }
  model.head = gaussian(s.outputs, s.out_dim, 1.0 / std::sqrt(static_cast<double>(s.out_dim)));
  model.validate();
  return model;
}

struct ModelGrads {
  std::vector<Matrix> a;  // d loss / d A^j
  std::vector<Matrix> b;  // d loss / d B^j
  double rescaler = 0.0;
};

struct LossAndGrads {
  double loss = 0.0;
  ModelGrads grads;
  std::vector<RoutingDecision> routing;  // one per example
};

namespace detail {

inline void check_example(const ToyModel& model, const Example& ex) {
  if (ex.input.size() != model.feature_dim()) {
    throw DimensionError("example input length " + std::to_string(ex.input.size()) + " != model feature dim " + std::to_string(model.feature_dim()));
  }
  if (model.task == TaskKind::classification) {
    if (ex.label >= model.output_dim()) {
      throw DimensionError("class label " + std::to_string(ex.label) + " outside [0, " + std::to_string(model.output_dim()) + ")");
    }
  } else if (ex.target.size() != model.output_dim()) {
    throw DimensionError("regression target length " + std::to_string(ex.target.size()) + " != model outputs " + std::to_string(model.output_dim()));
  }
}

// Per-example loss and d loss / d output (unscaled by batch size).
inline double example_loss(const ToyModel& model, const Example& ex, std::span<const double> out, Vector* d_out) {
  if (model.task == TaskKind::classification) {
    const double lse = log_sum_exp(out);
    if (d_out) {
      d_out->assign(out.size(), 0.0);
      for (std::size_t c = 0; c < out.size(); ++c) (*d_out)[c] = std::exp(out[c] - lse);
      (*d_out)[ex.label] -= 1.0;
    }
    return lse - out[ex.label];
  }
  const double dims = static_cast<double>(out.size());
  double acc = 0.0;
  if (d_out) d_out->assign(out.size(), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) {
    const double e = out[c] - ex.target[c];
    acc += e * e;
    if (d_out) (*d_out)[c] = 2.0 * e / dims;
  }
  return acc / dims;
}

}  // namespace detail

/// Network output (logits or regression prediction) and its routing.
inline std::pair<Vector, RoutingDecision> predict(const ToyModel& model, std::span<const double> features, std::size_t k_i) {
  const Vector x = matvec(model.embed, features);
  SmoeOutput s = smoe_forward(model.smoe, x, k_i);
  return {matvec(model.head, s.h), std::move(s.routing)};
}

/// Mean MSE (regression) or mean cross-entropy (classification) over the
/// batch, with analytic gradients for every LoRA factor and the rescaler.
inline LossAndGrads loss_and_grads(const ToyModel& model, std::span<const Example> batch, std::size_t k_i) {
  if (batch.empty()) throw DomainError("loss_and_grads: empty batch");
  const SmoeLayer& layer = model.smoe;
  const std::size_t experts = layer.expert_count();

  LossAndGrads res;
  res.grads.a.reserve(experts);
  res.grads.b.reserve(experts);
  for (const auto& l : layer.loras) {
    res.grads.a.emplace_back(l.a.rows(), l.a.cols());
    res.grads.b.emplace_back(l.b.rows(), l.b.cols());
  }
  res.routing.reserve(batch.size());

  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  Vector d_out;
  for (const Example& ex : batch) {
    detail::check_example(model, ex);
    const Vector x = matvec(model.embed, ex.input);
    RoutingDecision rd = route(layer, x, k_i);

    // Forward, keeping each branch output z_j and B^j x.
    std::vector<Vector> branch(rd.selected.size());
    std::vector<Vector> bx(rd.selected.size());
    Vector mix(layer.out_dim(), 0.0);
    for (std::size_t idx = 0; idx < rd.selected.size(); ++idx) {
      branch[idx] = detail::expert_branch(layer, rd.selected[idx], x, &bx[idx]);
      const double g = rd.gate_weights[idx];
      for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += g * branch[idx][i];
    }
    Vector h = mix;
    for (auto& v : h) v *= layer.rescaler;
    const Vector out = matvec(model.head, h);

    res.loss += inv_batch * detail::example_loss(model, ex, out, &d_out);

    // Backward.
    for (auto& v : d_out) v *= inv_batch;
    const Vector d_h = matvec_transposed(model.head, d_out);
    res.grads.rescaler += dot(d_h, mix);
    for (std::size_t idx = 0; idx < rd.selected.size(); ++idx) {
      const std::size_t j = rd.selected[idx];
      const LoraPair& lora = layer.loras[j];
      if (lora.rank() == 0) continue;
      const double coeff = layer.rescaler * rd.gate_weights[idx] * lora.scaling();
      // d/dA = coeff * d_h (B x)^T ; d/dB = coeff * (A^T d_h) x^T
      add_outer(res.grads.a[j], coeff, d_h, bx[idx]);
      const Vector at_dh = matvec_transposed(lora.a, d_h);
      add_outer(res.grads.b[j], coeff, at_dh, x);
    }
    res.routing.push_back(std::move(rd));
  }
  if (!std::isfinite(res.loss)) throw NumericError("loss_and_grads: non-finite loss");
  return res;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;  // classification only; 0 for regression
};

inline EvalResult evaluate(const ToyModel& model, std::span<const Example> data, std::size_t k_i) {
  if (data.empty()) throw DomainError("evaluate: empty dataset");
  EvalResult r;
  std::size_t correct = 0;
  for (const Example& ex : data) {
    detail::check_example(model, ex);
    const auto [out, routing] = predict(model, ex.input, k_i);
    r.loss += detail::example_loss(model, ex, out, nullptr);
    if (model.task == TaskKind::classification) {
      const auto best = static_cast<std::size_t>(std::max_element(out.begin(), out.end()) - out.begin());
      if (best == ex.label) ++correct;
    }
  }
  const double n = static_cast<double>(data.size());
  r.loss /= n;
  r.accuracy = static_cast<double>(correct) / n;
  return r;
}

// ---------------------------------------------------------------------------
// Activation counting

/// Per-expert activation tallies for one client. `counts[j]` is the number of
/// optimizer steps in which expert j served at least one example; the token
/// tallies count individual examples and back the per-token frequency mode.
struct ActivationCounter {
  std::vector<std::size_t> counts;
  std::size_t steps = 0;
  std::vector<std::size_t> token_counts;
  std::size_t tokens = 0;

  explicit ActivationCounter(std::size_t experts = 0) : counts(experts, 0), token_counts(experts, 0) {}

  std::size_t expert_count() const noexcept { return counts.size(); }

  double frequency(std::size_t j) const {
    return steps == 0 ? 0.0 : static_cast<double>(counts.at(j)) / static_cast<double>(steps);
  }

  double token_frequency(std::size_t j) const {
    return tokens == 0 ? 0.0 : static_cast<double>(token_counts.at(j)) / static_cast<double>(tokens);
  }

  friend bool operator==(const ActivationCounter&, const ActivationCounter&) = default;
};

/// Accounts one completed optimizer step given the routing of its examples.
inline ActivationCounter record_activations(ActivationCounter counter, std::span<const RoutingDecision> decisions) {
  std::vector<bool> hit(counter.expert_count(), false);
  for (const auto& d : decisions) {
    for (std::size_t j : d.selected) {
      if (j >= counter.expert_count()) throw DimensionError("record_activations: expert index " + std::to_string(j) + " out of range");
      hit[j] = true;
      ++counter.token_counts[j];
    }
    ++counter.tokens;
  }
  for (std::size_t j = 0; j < hit.size(); ++j) {
    if (hit[j]) ++counter.counts[j];
  }
  ++counter.steps;
  return counter;
}

}  // namespace flame

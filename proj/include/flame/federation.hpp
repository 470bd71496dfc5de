#pragma once

// Client-side local training and server-side aggregation.
//
// Aggregation weights per client i and expert j:
//   FedAvg: gamma_ij = |D_i|
//   FLAME : gamma_ij = (a_ij / S_i)^t * |D_i|,  with 0^0 = 1
// Global A^j, B^j are the gamma-weighted means over clients. An expert whose
// total weight is zero keeps the previous global matrices.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flame/baselines.hpp"
#include "flame/errors.hpp"
#include "flame/federation_types.hpp"
#include "flame/moe_model.hpp"
#include "flame/numerics.hpp"
#include "flame/random.hpp"

namespace flame {

/// Resource budget of one client: how many experts it may activate (FLAME) or
/// which LoRA rank it trains at (rank compression).
struct Budget {
  enum class Kind { experts, rank };
  Kind kind = Kind::experts;
  std::size_t value = 1;

  static Budget experts(std::size_t k) { return {Kind::experts, k}; }
  static Budget rank(std::size_t r) { return {Kind::rank, r}; }

  std::string label() const { return (kind == Kind::experts ? "k" : "r") + std::to_string(value); }

  friend bool operator==(const Budget&, const Budget&) = default;
};

enum class RescalerMode { learnable, static_k_over_ki, none };
enum class CountingMode { per_step, per_token };

struct ClientConfig {
  std::size_t id = 0;
  std::vector<Example> data;
  Budget budget;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  double lr = 1.5e-4;
  RescalerMode rescaler = RescalerMode::learnable;
  bool record_routing = false;
};

struct RoutingLogEntry {
  std::size_t step = 0;
  std::size_t example = 0;  // index into the client's data
  std::vector<std::size_t> selected;
};

struct LocalTrainResult {
  ClientUpdate update;
  std::vector<RoutingLogEntry> routing_log;
};

namespace detail {

inline std::size_t active_experts(const ToyModel& tmpl, const Budget& b) {
  return b.kind == Budget::Kind::experts ? b.value : tmpl.smoe.k_full;
}

inline void check_budget(const ToyModel& tmpl, const GlobalState& global, const Budget& b) {
  if (b.kind == Budget::Kind::experts) {
    if (b.value < 1 || b.value > tmpl.smoe.k_full) {
      throw BudgetError("budget k_i=" + std::to_string(b.value) + " outside [1, k_full=" + std::to_string(tmpl.smoe.k_full) + "]");
    }
  } else if (b.value < 1 || b.value > global.rank()) {
    throw BudgetError("budget r_i=" + std::to_string(b.value) + " outside [1, r_global=" + std::to_string(global.rank()) + "]");
  }
}

inline double initial_rescaler_for(RescalerMode mode, const ToyModel& tmpl, const Budget& b, double carried) {
  switch (mode) {
    case RescalerMode::learnable:
      return carried;
    case RescalerMode::static_k_over_ki:
      return static_cast<double>(tmpl.smoe.k_full) / static_cast<double>(active_experts(tmpl, b));
    case RescalerMode::none:
      return 1.0;
  }
  return 1.0;
}

}  // namespace detail

/// The model a client with `budget` runs: global adapters (truncated for a
/// rank budget) inserted into the frozen template.
inline ToyModel client_model(const ToyModel& tmpl, const GlobalState& global, const Budget& budget, double rescaler) {
  if (global.expert_count() != tmpl.smoe.expert_count()) {
    throw DimensionError("client_model: global state has " + std::to_string(global.expert_count()) + " experts, model has " +
                         std::to_string(tmpl.smoe.expert_count()));
  }
  detail::check_budget(tmpl, global, budget);
  ToyModel model = tmpl;
  // A rank budget at the global rank is served the global adapters untouched.
  const bool truncate = budget.kind == Budget::Kind::rank && budget.value < global.rank();
  model.smoe.loras = truncate ? compress_for_client(global, budget.value) : global.loras;
  model.smoe.rescaler = rescaler;
  model.validate();
  return model;
}

/// Held-out loss/accuracy of the global adapters as seen by a client at `budget`.
inline EvalResult evaluate_global(const ToyModel& tmpl, const GlobalState& global, const Budget& budget, double rescaler,
                                  std::span<const Example> data) {
  const ToyModel model = client_model(tmpl, global, budget, rescaler);
  return evaluate(model, data, detail::active_experts(tmpl, budget));
}

/// Runs `client.local_epochs` passes of Adam over the client's data starting
/// from the global adapters and records per-step expert activations.
inline LocalTrainResult local_train_logged(const GlobalState& global, const ClientConfig& client, const ToyModel& tmpl,
                                           const TrainOptions& options, double carried_rescaler = 1.0) {
  if (client.data.empty()) throw DomainError("local_train: client " + std::to_string(client.id) + " has no data");
  if (client.batch_size == 0) throw DomainError("local_train: batch size must be positive");
  const double s0 = detail::initial_rescaler_for(options.rescaler, tmpl, client.budget, carried_rescaler);
  ToyModel model = client_model(tmpl, global, client.budget, s0);
  const std::size_t k_i = detail::active_experts(tmpl, client.budget);
  const std::size_t experts = model.smoe.expert_count();

  std::vector<AdamState> opt_a, opt_b;
  for (const auto& l : model.smoe.loras) {
    opt_a.push_back(AdamState::for_param(l.a, options.lr));
    opt_b.push_back(AdamState::for_param(l.b, options.lr));
  }
  Matrix rescaler_param(1, 1, model.smoe.rescaler);
  AdamState opt_s = AdamState::for_param(rescaler_param, options.lr);

  LocalTrainResult result;
  ClientUpdate& up = result.update;
  up.client_id = client.id;
  up.dataset_size = client.data.size();
  up.activation = ActivationCounter(experts);

  Rng rng(derive_seed(client.seed, global.round_index));
  std::vector<std::size_t> order(client.data.size());
  std::vector<Example> batch;
  double loss_sum = 0.0;

  for (std::size_t epoch = 0; epoch < client.local_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += client.batch_size) {
      const std::size_t end = std::min(order.size(), start + client.batch_size);
      batch.clear();
      for (std::size_t p = start; p < end; ++p) batch.push_back(client.data[order[p]]);
      const std::size_t step = up.activation.steps;

      LossAndGrads lg;
      try {
        lg = loss_and_grads(model, batch, k_i);
        for (std::size_t j = 0; j < experts; ++j) {
          auto sa = adam_step(model.smoe.loras[j].a, lg.grads.a[j], opt_a[j]);
          auto sb = adam_step(model.smoe.loras[j].b, lg.grads.b[j], opt_b[j]);
          model.smoe.loras[j].a = std::move(sa.param);
          opt_a[j] = std::move(sa.state);
          model.smoe.loras[j].b = std::move(sb.param);
          opt_b[j] = std::move(sb.state);
        }
        if (options.rescaler == RescalerMode::learnable) {
          Matrix g(1, 1, lg.grads.rescaler);
          auto ss = adam_step(rescaler_param, g, opt_s);
          rescaler_param = std::move(ss.param);
          opt_s = std::move(ss.state);
          model.smoe.rescaler = rescaler_param(0, 0);
        }
      } catch (const NumericError& e) {
        throw NumericError("client " + std::to_string(client.id) + " diverged at step " + std::to_string(step) + ": " + e.what());
      }

      if (step == 0) up.initial_loss = lg.loss;
      loss_sum += lg.loss;
      if (options.record_routing) {
        for (std::size_t p = 0; p < lg.routing.size(); ++p) {
          result.routing_log.push_back({step, order[start + p], lg.routing[p].selected});
        }
      }
      up.activation = record_activations(std::move(up.activation), lg.routing);
    }
  }

  up.mean_loss = up.activation.steps == 0 ? 0.0 : loss_sum / static_cast<double>(up.activation.steps);
  up.rescaler = model.smoe.rescaler;
  if (client.budget.kind == Budget::Kind::rank) {
    up.loras = decompress_update(model.smoe.loras, global.rank());
    for (std::size_t j = 0; j < experts; ++j) up.loras[j].alpha = global.loras[j].alpha;
  } else {
    up.loras = std::move(model.smoe.loras);
  }
  return result;
}

inline ClientUpdate local_train(const GlobalState& global, const ClientConfig& client, const ToyModel& tmpl, const TrainOptions& options,
                                double carried_rescaler = 1.0) {
  return local_train_logged(global, client, tmpl, options, carried_rescaler).update;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregationPolicy {
  enum class Kind { fedavg, flame };
  Kind kind = Kind::flame;
  unsigned temperature = 1;
  CountingMode counting = CountingMode::per_step;

  static AggregationPolicy fedavg() { return {Kind::fedavg, 0, CountingMode::per_step}; }
  static AggregationPolicy flame(unsigned t, CountingMode c = CountingMode::per_step) { return {Kind::flame, t, c}; }
};

struct WeightTable {
  std::vector<std::size_t> client_ids;       // clients that contribute, in input order
  std::vector<std::size_t> rows;             // index of each contributing client in the update list
  std::vector<std::vector<double>> gamma;    // [client][expert]
  std::vector<std::size_t> dropped_clients;  // ids excluded because S_i = 0
  std::vector<std::string> warnings;
};

namespace detail {

/// x^t by repeated multiplication; 0^0 = 1.
inline double integer_power(double x, unsigned t) {
  double r = 1.0;
  for (unsigned i = 0; i < t; ++i) r *= x;
  return r;
}

}  // namespace detail

inline WeightTable compute_weights(std::span<const ClientUpdate> updates, const AggregationPolicy& policy) {
  if (updates.empty()) throw DomainError("compute_weights: no client updates");
  const std::size_t experts = updates.front().activation.expert_count();
  WeightTable w;
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const ClientUpdate& u = updates[i];
    if (u.activation.expert_count() != experts || u.loras.size() != experts) {
      throw DimensionError("compute_weights: client " + std::to_string(u.client_id) + " reports a different expert count");
    }
    if (u.activation.steps == 0) {
      w.dropped_clients.push_back(u.client_id);
      w.warnings.push_back("client " + std::to_string(u.client_id) + " completed no training steps; excluded from aggregation");
      continue;
    }
    const double size = static_cast<double>(u.dataset_size);
    std::vector<double> row(experts, size);
    if (policy.kind == AggregationPolicy::Kind::flame) {
      for (std::size_t j = 0; j < experts; ++j) {
        const double freq = policy.counting == CountingMode::per_step ? u.activation.frequency(j) : u.activation.token_frequency(j);
        row[j] = detail::integer_power(freq, policy.temperature) * size;
      }
    }
    w.client_ids.push_back(u.client_id);
    w.rows.push_back(i);
    w.gamma.push_back(std::move(row));
  }
  return w;
}

/// Weighted per-expert averaging with previously computed weights.
inline GlobalState apply_weights(std::span<const ClientUpdate> updates, const GlobalState& previous, const WeightTable& weights) {
  GlobalState next;
  next.round_index = previous.round_index + 1;
  next.loras = previous.loras;
  const std::size_t experts = previous.expert_count();
  for (const auto& u : updates) {
    if (u.loras.size() != experts) throw DimensionError("aggregate: client " + std::to_string(u.client_id) + " has a different expert count");
    for (std::size_t j = 0; j < experts; ++j) {
      if (!u.loras[j].a.same_shape(previous.loras[j].a) || !u.loras[j].b.same_shape(previous.loras[j].b)) {
        throw DimensionError("aggregate: client " + std::to_string(u.client_id) + " expert " + std::to_string(j) + " has shapes " +
                             u.loras[j].a.shape() + "/" + u.loras[j].b.shape() + ", expected " + previous.loras[j].a.shape() + "/" +
                             previous.loras[j].b.shape());
      }
    }
  }

  for (std::size_t j = 0; j < experts; ++j) {
    double mass = 0.0;
    for (const auto& row : weights.gamma) mass += row[j];
    if (!(mass > 0.0)) continue;  // zero mass: keep previous

    Matrix a(previous.loras[j].a.rows(), previous.loras[j].a.cols());
    Matrix b(previous.loras[j].b.rows(), previous.loras[j].b.cols());
    for (std::size_t c = 0; c < weights.rows.size(); ++c) {
      const double w = weights.gamma[c][j] / mass;
      if (w == 0.0) continue;
      const LoraPair& src = updates[weights.rows[c]].loras[j];
      auto ad = a.data();
      auto sa = src.a.data();
      for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += w * sa[i];
      auto bd = b.data();
      auto sb = src.b.data();
      for (std::size_t i = 0; i < bd.size(); ++i) bd[i] += w * sb[i];
    }
    next.loras[j].a = std::move(a);
    next.loras[j].b = std::move(b);
  }
  if (!next.all_finite()) throw NumericError("aggregate: non-finite global adapters");
  return next;
}

inline GlobalState aggregate(std::span<const ClientUpdate> updates, const GlobalState& previous, const AggregationPolicy& policy) {
  return apply_weights(updates, previous, compute_weights(updates, policy));
}

// ---------------------------------------------------------------------------
// Rounds

/// Indices of round(p * N) clients (at least one) drawn without replacement,
/// returned in ascending order.
inline std::vector<std::size_t> sample_clients(std::size_t client_count, double participation, Rng& rng) {
  if (!(participation > 0.0) || participation > 1.0) {
    throw DomainError("sample_clients: participation " + std::to_string(participation) + " outside (0, 1]");
  }
  if (client_count == 0) throw DomainError("sample_clients: no clients");
  const auto wanted = static_cast<std::size_t>(std::floor(participation * static_cast<double>(client_count) + 0.5));
  const std::size_t take = std::clamp<std::size_t>(wanted, 1, client_count);
  std::vector<std::size_t> idx(client_count);
  for (std::size_t i = 0; i < client_count; ++i) idx[i] = i;
  if (take == client_count) return idx;
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(client_count - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> sample_clients(std::span<const ClientConfig> all, double participation, Rng& rng) {
  return sample_clients(all.size(), participation, rng);
}

struct ClientRoundRecord {
  std::size_t client_id = 0;
  Budget budget;
  std::size_t dataset_size = 0;
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double mean_loss = 0.0;
  double rescaler = 1.0;
  bool diverged = false;
  std::string error;
  std::vector<double> frequencies;  // a_ij / S_i (or per-token share)
  std::vector<RoutingLogEntry> routing_log;
};

struct RoundReport {
  std::size_t round = 0;  // 1-based
  std::vector<ClientRoundRecord> clients;
  WeightTable weights;
  std::vector<std::string> warnings;

  std::size_t diverged_count() const {
    return static_cast<std::size_t>(std::count_if(clients.begin(), clients.end(), [](const auto& c) { return c.diverged; }));
  }
};

struct RoundOutcome {
  GlobalState state;
  RoundReport report;
};

struct RoundSettings {
  AggregationPolicy policy;
  double participation = 1.0;
  TrainOptions train;
  std::size_t jobs = 1;
};

/// sample -> broadcast -> local training -> aggregation. Updates are always
/// aggregated in client order regardless of how training was scheduled.
inline RoundOutcome run_round(const GlobalState& state, std::span<const ClientConfig> clients, const ToyModel& tmpl,
                              const RoundSettings& settings, Rng& rng, const std::map<std::size_t, double>& rescalers = {}) {
  const std::vector<std::size_t> sampled = sample_clients(clients, settings.participation, rng);

  struct Slot {
    std::optional<LocalTrainResult> result;
    std::string error;
  };
  std::vector<Slot> slots(sampled.size());
  auto train_one = [&](std::size_t pos) {
    const ClientConfig& c = clients[sampled[pos]];
    const auto it = rescalers.find(c.id);
    const double carried = it == rescalers.end() ? 1.0 : it->second;
    try {
      slots[pos].result = local_train_logged(state, c, tmpl, settings.train, carried);
    } catch (const NumericError& e) {
      slots[pos].error = e.what();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, settings.jobs);
  if (jobs == 1) {
    for (std::size_t pos = 0; pos < sampled.size(); ++pos) train_one(pos);
  } else {
    for (std::size_t start = 0; start < sampled.size(); start += jobs) {
      std::vector<std::future<void>> wave;
      for (std::size_t pos = start; pos < std::min(sampled.size(), start + jobs); ++pos) {
        wave.push_back(std::async(std::launch::async, train_one, pos));
      }
      for (auto& f : wave) f.get();
    }
  }

  RoundOutcome out;
  out.report.round = state.round_index + 1;
  std::vector<ClientUpdate> updates;
  for (std::size_t pos = 0; pos < sampled.size(); ++pos) {
    const ClientConfig& c = clients[sampled[pos]];
    ClientRoundRecord rec;
    rec.client_id = c.id;
    rec.budget = c.budget;
    rec.dataset_size = c.data.size();
    if (!slots[pos].result) {
      rec.diverged = true;
      rec.error = slots[pos].error;
      const auto it = rescalers.find(c.id);
      rec.rescaler = it == rescalers.end() ? 1.0 : it->second;
      rec.frequencies.assign(tmpl.smoe.expert_count(), 0.0);
      out.report.warnings.push_back("client " + std::to_string(c.id) + " excluded: " + rec.error);
      out.report.clients.push_back(std::move(rec));
      continue;
    }
    LocalTrainResult& r = *slots[pos].result;
    const ClientUpdate& u = r.update;
    rec.steps = u.activation.steps;
    rec.initial_loss = u.initial_loss;
    rec.mean_loss = u.mean_loss;
    rec.rescaler = u.rescaler;
    for (std::size_t j = 0; j < u.activation.expert_count(); ++j) {
      rec.frequencies.push_back(settings.policy.counting == CountingMode::per_step ? u.activation.frequency(j)
                                                                                   : u.activation.token_frequency(j));
    }
    rec.routing_log = std::move(r.routing_log);
    out.report.clients.push_back(std::move(rec));
    updates.push_back(std::move(r.update));
  }

  if (updates.empty()) {
    out.report.warnings.push_back("no client produced a usable update; global adapters carried forward");
    out.state = state;
    ++out.state.round_index;
    return out;
  }
  out.report.weights = compute_weights(updates, settings.policy);
  for (const auto& w : out.report.weights.warnings) out.report.warnings.push_back(w);
  out.state = apply_weights(updates, state, out.report.weights);
  return out;
}

}  // namespace flame

#pragma once

// Declarative experiment runner.
//
// A run is fully determined by its resolved config: data, partition, model
// and every per-round random stream are derived from `seed`, so a run can be
// resumed from any round checkpoint and reproduce the uninterrupted output
// byte for byte.
//
// Output directory layout:
//   resolved_config.json     validated config, seed, content hashes
//   metrics.csv              one row per round (round 0 = untrained model)
//   rounds.jsonl             per-round client records and aggregation weights
//   activations_round{n}.csv client x expert activation frequencies
//   routing_round{n}.csv     per-example expert selections (log_routing only)
//   checkpoint_round{n}.ckpt global adapters + client rescalers
//   summary.json             final per-budget test metrics

#include <openssl/evp.h>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flame/baselines.hpp"
#include "flame/checkpoint.hpp"
#include "flame/datagen.hpp"
#include "flame/errors.hpp"
#include "flame/federation.hpp"

namespace flame {

enum class Method { flame, fedavg_trivial, rank_compress };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::flame:
      return "flame";
    case Method::fedavg_trivial:
      return "fedavg_trivial";
    case Method::rank_compress:
      return "rank_compress";
  }
  return "?";
}

inline const char* to_string(RescalerMode m) {
  switch (m) {
    case RescalerMode::learnable:
      return "learnable";
    case RescalerMode::static_k_over_ki:
      return "static_k_over_ki";
    case RescalerMode::none:
      return "none";
  }
  return "?";
}

inline const char* to_string(CountingMode m) { return m == CountingMode::per_step ? "per_step" : "per_token"; }

struct ModelConfig {
  std::size_t feature_dim = 8;
  std::size_t in_dim = 8;
  std::size_t out_dim = 8;
  std::size_t experts = 16;
  std::size_t k_full = 8;
  std::size_t rank = 4;
  double alpha = 16.0;
  double router_scale = 2.0;
  bool renormalize_gates = true;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TaskConfig {
  TaskKind kind = TaskKind::classification;
  std::size_t classes = 8;
  std::size_t per_class = 100;
  double spread = 1.0;
  double separation = 3.0;
  std::size_t target_dim = 4;  // regression only

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

inline constexpr std::size_t kTierCount = 4;

struct ExperimentConfig {
  std::string name = "experiment";
  Method method = Method::flame;
  ModelConfig model;
  TaskConfig task;
  std::vector<std::size_t> client_tiers = {0, 1, 2, 3};  // 0-based beta index per client, cycled
  std::optional<std::vector<std::size_t>> tier_values;  // overrides the preset k_i / r_i for beta1..beta4
  RescalerMode rescaler = RescalerMode::learnable;      // parse_config defaults to none for the baselines
  AggregationPolicy::Kind aggregation = AggregationPolicy::Kind::flame;  // parse_config defaults to fedavg for the baselines
  unsigned temperature = 1;
  CountingMode activation_counting = CountingMode::per_step;
  std::size_t rounds = 2;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 16;
  double lr = 1.5e-4;
  std::size_t clients = 4;
  double participation = 1.0;
  double dirichlet_alpha = 0.5;
  std::uint64_t seed = 0;
  bool log_routing = false;
  std::size_t jobs = 1;
  std::string output_dir;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  RescalerMode rescaler_mode() const { return rescaler; }

  AggregationPolicy policy() const {
    return aggregation == AggregationPolicy::Kind::flame ? AggregationPolicy::flame(temperature, activation_counting) : AggregationPolicy::fedavg();
  }
};

inline std::string tier_name(std::size_t tier) { return "beta" + std::to_string(tier + 1); }

/// Preset budget for tier beta_{tier+1}: FLAME halves k per tier, rank
/// compression keeps {100, 60, 40, 30}% of the rank, the trivial baseline
/// gives every tier the full model.
inline Budget tier_budget(const ExperimentConfig& c, std::size_t tier) {
  if (tier >= kTierCount) throw ConfigError("budget tier " + std::to_string(tier + 1) + " outside beta1..beta4");
  switch (c.method) {
    case Method::flame: {
      const std::size_t k = c.tier_values ? (*c.tier_values)[tier] : std::max<std::size_t>(1, c.model.k_full >> tier);
      return Budget::experts(k);
    }
    case Method::rank_compress: {
      static constexpr double kKeep[kTierCount] = {1.0, 0.6, 0.4, 0.3};
      const std::size_t r = c.tier_values ? (*c.tier_values)[tier]
                                          : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(kKeep[tier] * static_cast<double>(c.model.rank))));
      return Budget::rank(r);
    }
    case Method::fedavg_trivial:
      return Budget::experts(c.model.k_full);
  }
  return Budget::experts(c.model.k_full);
}

/// Tiers that at least one client uses, ascending.
inline std::vector<std::size_t> active_tiers(const ExperimentConfig& c) {
  std::set<std::size_t> s;
  for (std::size_t i = 0; i < c.clients; ++i) s.insert(c.client_tiers[i % c.client_tiers.size()]);
  return {s.begin(), s.end()};
}

inline ToyModelShape model_shape(const ExperimentConfig& c) {
  ToyModelShape s;
  s.feature_dim = c.model.feature_dim;
  s.in_dim = c.model.in_dim;
  s.out_dim = c.model.out_dim;
  s.experts = c.model.experts;
  s.k_full = c.model.k_full;
  s.rank = c.model.rank;
  s.alpha = c.model.alpha;
  s.router_scale = c.model.router_scale;
  s.task = c.task.kind;
  s.outputs = c.task.kind == TaskKind::classification ? c.task.classes : c.task.target_dim;
  return s;
}

inline ClusteredTaskSpec task_spec(const ExperimentConfig& c) {
  ClusteredTaskSpec s;
  s.classes = c.task.classes;
  s.per_class = c.task.per_class;
  s.dim = c.model.feature_dim;
  s.spread = c.task.spread;
  s.separation = c.task.separation;
  s.task = c.task.kind;
  s.target_dim = c.task.target_dim;
  return s;
}

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& msg) { throw ConfigError("config: " + field + ": " + msg); };
  const ModelConfig& m = c.model;
  if (c.name.empty()) fail("name", "must not be empty");
  if (c.name.find('/') != std::string::npos) fail("name", "must not contain '/'");
  if (m.feature_dim < 1) fail("model.feature_dim", "must be >= 1");
  if (m.in_dim < 1) fail("model.in_dim", "must be >= 1");
  if (m.out_dim < 1) fail("model.out_dim", "must be >= 1");
  if (m.experts < 1) fail("model.experts", "must be >= 1");
  if (m.k_full < 1 || m.k_full > m.experts) fail("model.k_full", "must be in [1, model.experts=" + std::to_string(m.experts) + "]");
  if (m.rank < 1) fail("model.rank", "must be >= 1");
  if (!(m.alpha > 0.0) || !std::isfinite(m.alpha)) fail("model.alpha", "must be positive and finite");
  if (!(m.router_scale >= 0.0) || !std::isfinite(m.router_scale)) fail("model.router_scale", "must be finite and >= 0");
  if (c.task.classes < 2) fail("task.classes", "must be >= 2");
  if (c.task.per_class < 1) fail("task.per_class", "must be >= 1");
  if (c.task.classes * c.task.per_class < 10) fail("task", "needs at least 10 examples for the 80/10/10 split");
  if (!(c.task.spread >= 0.0) || !std::isfinite(c.task.spread)) fail("task.spread", "must be finite and >= 0");
  if (!std::isfinite(c.task.separation)) fail("task.separation", "must be finite");
  if (c.task.kind == TaskKind::regression && c.task.target_dim < 1) fail("task.target_dim", "must be >= 1");
  if (c.client_tiers.empty()) fail("budgets", "must list at least one tier");
  for (std::size_t t : c.client_tiers)
    if (t >= kTierCount) fail("budgets", "tiers must be beta1..beta4");
  if (c.tier_values) {
    if (c.tier_values->size() != kTierCount) fail("tier_values", "must have exactly 4 entries (beta1..beta4)");
    if (c.method == Method::fedavg_trivial) fail("tier_values", "not used by fedavg_trivial");
    for (std::size_t v : *c.tier_values) {
      if (c.method == Method::flame && (v < 1 || v > m.k_full)) fail("tier_values", "k_i must be in [1, model.k_full=" + std::to_string(m.k_full) + "]");
      if (c.method == Method::rank_compress && (v < 1 || v > m.rank)) fail("tier_values", "r_i must be in [1, model.rank=" + std::to_string(m.rank) + "]");
    }
  }
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) fail("lr", "must be positive and finite");
  if (c.clients < 1) fail("clients", "must be >= 1");
  if (!(c.participation > 0.0 && c.participation <= 1.0)) fail("participation", "must be in (0, 1]");
  if (!(c.dirichlet_alpha > 0.0) || !std::isfinite(c.dirichlet_alpha)) fail("dirichlet_alpha", "must be positive and finite");
  if (c.jobs < 1) fail("jobs", "must be >= 1");
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

using nlohmann::json;

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("config: unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
  }
}

template <class T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  const std::string field = where.empty() ? key : where + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError("config: " + field + ": expected boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError("config: " + field + ": expected integer");
    if (v.is_number_unsigned()) {
      out = static_cast<T>(v.get<std::uint64_t>());
    } else {
      const auto s = v.get<std::int64_t>();
      if (s < 0) throw ConfigError("config: " + field + ": must be >= 0");
      out = static_cast<T>(s);
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("config: " + field + ": expected number");
    out = v.get<double>();
  } else {
    if (!v.is_string()) throw ConfigError("config: " + field + ": expected string");
    out = v.get<std::string>();
  }
}

inline std::size_t parse_tier(const json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    for (std::size_t t = 0; t < kTierCount; ++t)
      if (s == tier_name(t)) return t;
  }
  throw ConfigError("config: budgets: entries must be one of \"beta1\"..\"beta4\"");
}

template <class E>
E parse_enum(const json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options) {
  const json& v = j.at(key);
  if (v.is_string()) {
    for (const auto& [name, value] : options)
      if (v.get<std::string>() == name) return value;
  }
  std::string allowed;
  for (const auto& [name, value] : options) allowed += std::string(allowed.empty() ? "" : " | ") + name;
  throw ConfigError(std::string("config: ") + key + ": expected one of " + allowed);
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::read_field;
  detail::reject_unknown_keys(j,
                              {"name", "method", "model", "task", "budgets", "tier_values", "rescaler", "aggregation", "temperature",
                               "activation_counting", "rounds", "local_epochs", "batch_size", "lr", "clients", "participation",
                               "dirichlet_alpha", "seed", "log_routing", "jobs", "output_dir"},
                              "");
  ExperimentConfig c;
  read_field(j, "name", c.name, "");
  if (j.contains("method")) {
    c.method = detail::parse_enum<Method>(
        j, "method", {{"flame", Method::flame}, {"fedavg_trivial", Method::fedavg_trivial}, {"rank_compress", Method::rank_compress}});
  }
  if (c.method != Method::flame) {
    c.rescaler = RescalerMode::none;
    c.aggregation = AggregationPolicy::Kind::fedavg;
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(m, {"feature_dim", "in_dim", "out_dim", "experts", "k_full", "rank", "alpha", "router_scale", "renormalize_gates"},
                                "model");
    read_field(m, "feature_dim", c.model.feature_dim, "model");
    read_field(m, "in_dim", c.model.in_dim, "model");
    read_field(m, "out_dim", c.model.out_dim, "model");
    read_field(m, "experts", c.model.experts, "model");
    read_field(m, "k_full", c.model.k_full, "model");
    read_field(m, "rank", c.model.rank, "model");
    read_field(m, "alpha", c.model.alpha, "model");
    read_field(m, "router_scale", c.model.router_scale, "model");
    read_field(m, "renormalize_gates", c.model.renormalize_gates, "model");
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    detail::reject_unknown_keys(t, {"kind", "classes", "per_class", "spread", "separation", "target_dim"}, "task");
    if (t.contains("kind")) {
      c.task.kind = detail::parse_enum<TaskKind>(t, "kind", {{"classification", TaskKind::classification}, {"regression", TaskKind::regression}});
    }
    read_field(t, "classes", c.task.classes, "task");
    read_field(t, "per_class", c.task.per_class, "task");
    read_field(t, "spread", c.task.spread, "task");
    read_field(t, "separation", c.task.separation, "task");
    read_field(t, "target_dim", c.task.target_dim, "task");
  }
  if (j.contains("budgets")) {
    const auto& b = j.at("budgets");
    if (!b.is_array()) throw ConfigError("config: budgets: expected array of tier names");
    c.client_tiers.clear();
    for (const auto& v : b) c.client_tiers.push_back(detail::parse_tier(v));
  }
  if (j.contains("tier_values")) {
    const auto& b = j.at("tier_values");
    if (!b.is_array()) throw ConfigError("config: tier_values: expected array of 4 integers");
    std::vector<std::size_t> values;
    for (const auto& v : b) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("config: tier_values: expected non-negative integers");
      values.push_back(v.get<std::size_t>());
    }
    c.tier_values = std::move(values);
  }
  if (j.contains("rescaler")) {
    c.rescaler = detail::parse_enum<RescalerMode>(
        j, "rescaler",
        {{"learnable", RescalerMode::learnable}, {"static_k_over_ki", RescalerMode::static_k_over_ki}, {"none", RescalerMode::none}});
  }
  if (j.contains("aggregation")) {
    c.aggregation = detail::parse_enum<AggregationPolicy::Kind>(
        j, "aggregation", {{"flame", AggregationPolicy::Kind::flame}, {"fedavg", AggregationPolicy::Kind::fedavg}});
  }
  read_field(j, "temperature", c.temperature, "");
  if (j.contains("activation_counting")) {
    c.activation_counting =
        detail::parse_enum<CountingMode>(j, "activation_counting", {{"per_step", CountingMode::per_step}, {"per_token", CountingMode::per_token}});
  }
  read_field(j, "rounds", c.rounds, "");
  read_field(j, "local_epochs", c.local_epochs, "");
  read_field(j, "batch_size", c.batch_size, "");
  read_field(j, "lr", c.lr, "");
  read_field(j, "clients", c.clients, "");
  read_field(j, "participation", c.participation, "");
  read_field(j, "dirichlet_alpha", c.dirichlet_alpha, "");
  read_field(j, "seed", c.seed, "");
  read_field(j, "log_routing", c.log_routing, "");
  read_field(j, "jobs", c.jobs, "");
  read_field(j, "output_dir", c.output_dir, "");
  validate(c);
  return c;
}

/// Every field written out, defaults included.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json tiers = nlohmann::json::array();
  for (std::size_t t : c.client_tiers) tiers.push_back(tier_name(t));
  nlohmann::json j = {
      {"name", c.name},
      {"method", to_string(c.method)},
      {"model",
       {{"feature_dim", c.model.feature_dim},
        {"in_dim", c.model.in_dim},
        {"out_dim", c.model.out_dim},
        {"experts", c.model.experts},
        {"k_full", c.model.k_full},
        {"rank", c.model.rank},
        {"alpha", c.model.alpha},
        {"router_scale", c.model.router_scale},
        {"renormalize_gates", c.model.renormalize_gates}}},
      {"task",
       {{"kind", to_string(c.task.kind)},
        {"classes", c.task.classes},
        {"per_class", c.task.per_class},
        {"spread", c.task.spread},
        {"separation", c.task.separation},
        {"target_dim", c.task.target_dim}}},
      {"budgets", tiers},
      {"rescaler", to_string(c.rescaler_mode())},
      {"aggregation", c.policy().kind == AggregationPolicy::Kind::flame ? "flame" : "fedavg"},
      {"temperature", c.temperature},
      {"activation_counting", to_string(c.activation_counting)},
      {"rounds", c.rounds},
      {"local_epochs", c.local_epochs},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"clients", c.clients},
      {"participation", c.participation},
      {"dirichlet_alpha", c.dirichlet_alpha},
      {"seed", c.seed},
      {"log_routing", c.log_routing},
      {"jobs", c.jobs},
      {"output_dir", c.output_dir},
  };
  if (c.tier_values) j["tier_values"] = *c.tier_values;
  return j;
}

/// Applies "a.b.c=value" overrides to a raw config document. The value is
/// parsed as JSON when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path, std::string* raw = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open " + path);
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (raw) *raw = text;
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
  return j;
}

// ---------------------------------------------------------------------------
// Hashing

/// SHA-1 of `bytes` as git hashes a blob: sha1("blob <len>\0" + bytes).
inline std::string git_blob_sha1(const std::string& bytes) {
  const std::string framed = "blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(framed.data(), framed.size(), digest, &len, EVP_sha1(), nullptr) != 1) throw Error("sha1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

/// Hash of the fields that affect results; `jobs`, `output_dir` and
/// `log_routing` are excluded so they can change across a resume.
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("jobs");
  j.erase("output_dir");
  j.erase("log_routing");
  return git_blob_sha1(j.dump());
}

// ---------------------------------------------------------------------------
// Run

struct RunOptions {
  std::string config_path;    // recorded in resolved_config.json
  std::string config_text;    // raw input bytes, hashed into resolved_config.json
  std::string resume_from;    // checkpoint to continue from
  std::optional<std::size_t> stop_after;  // stop after this round (simulated interruption)
  std::ostream* log = nullptr;
};

struct RunArtifacts {
  std::filesystem::path output_dir;
  std::filesystem::path metrics_csv;
  std::filesystem::path rounds_jsonl;
  std::filesystem::path resolved_config;
  std::filesystem::path summary;
  std::vector<std::filesystem::path> heatmaps;
  std::vector<std::filesystem::path> routing_logs;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t last_round = 0;
  std::size_t diverged_clients = 0;
};

/// --out flag (already folded into output_dir), then config output_dir, then
/// $FLAME_OUTPUT_ROOT/<name>, then ./runs/<name>.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& c) {
  if (!c.output_dir.empty()) return c.output_dir;
  if (const char* root = std::getenv("FLAME_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / c.name;
  return std::filesystem::path("runs") / c.name;
}

/// Everything a run derives from its config before the first round.
struct Experiment {
  ExperimentConfig config;
  ToyModel model;
  DatasetSplit split;
  std::vector<ClientConfig> clients;
  std::vector<std::size_t> client_tier;  // per client
  std::vector<std::size_t> tiers;        // tiers in use, ascending
};

inline Experiment build_experiment(const ExperimentConfig& c) {
  validate(c);
  Experiment e;
  e.config = c;
  Rng model_rng(derive_seed(c.seed, tag_hash("model")));
  e.model = make_toy_model(model_shape(c), model_rng);
  e.model.smoe.renormalize_gates = c.model.renormalize_gates;

  const Dataset data = generate_clustered_task(task_spec(c), derive_seed(c.seed, tag_hash("data")));
  Rng split_rng(derive_seed(c.seed, tag_hash("split")));
  e.split = split_80_10_10(data, split_rng);
  Rng part_rng(derive_seed(c.seed, tag_hash("partition")));
  const Partition part = dirichlet_partition(e.split.train, c.clients, c.dirichlet_alpha, part_rng);

  for (std::size_t i = 0; i < c.clients; ++i) {
    const std::size_t tier = c.client_tiers[i % c.client_tiers.size()];
    ClientConfig cc;
    cc.id = i;
    cc.budget = tier_budget(c, tier);
    cc.local_epochs = c.local_epochs;
    cc.batch_size = c.batch_size;
    cc.seed = derive_seed(c.seed, tag_hash("client"), i);
    cc.data = e.split.train.subset(part.client_indices[i]).examples;
    e.clients.push_back(std::move(cc));
    e.client_tier.push_back(tier);
  }
  e.tiers = active_tiers(c);
  return e;
}

/// Rescaler the global model is evaluated with at `tier`.
inline double evaluation_rescaler(const Experiment& e, std::size_t tier, const std::map<std::size_t, double>& rescalers) {
  const Budget b = tier_budget(e.config, tier);
  switch (e.config.rescaler_mode()) {
    case RescalerMode::learnable: {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < e.clients.size(); ++i) {
        if (e.client_tier[i] != tier) continue;
        if (const auto it = rescalers.find(i); it != rescalers.end()) {
          sum += it->second;
          ++n;
        }
      }
      return n == 0 ? 1.0 : sum / static_cast<double>(n);
    }
    case RescalerMode::static_k_over_ki:
      return static_cast<double>(e.model.smoe.k_full) / static_cast<double>(detail::active_experts(e.model, b));
    case RescalerMode::none:
      return 1.0;
  }
  return 1.0;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_header(const Experiment& e) {
  std::string h = "round,method,aggregation,temperature,rescaler,clients_trained,diverged,mean_train_loss";
  for (std::size_t t : e.tiers) {
    h += "," + tier_name(t) + "_val_loss";
    if (e.config.task.kind == TaskKind::classification) h += "," + tier_name(t) + "_val_acc";
  }
  h += ",freq_mean,freq_cv,freq_min,freq_max";
  return h;
}

struct FrequencyStats {
  double mean = 0.0, cv = 0.0, min = 0.0, max = 0.0;
};

/// Statistics over the per-expert frequencies averaged across clients.
inline FrequencyStats frequency_stats(const std::vector<std::vector<double>>& rows, std::size_t experts) {
  FrequencyStats s;
  if (rows.empty() || experts == 0) return s;
  std::vector<double> per_expert(experts, 0.0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < experts; ++j) per_expert[j] += r[j] / static_cast<double>(rows.size());
  double sum = 0.0;
  for (double v : per_expert) sum += v;
  s.mean = sum / static_cast<double>(experts);
  double var = 0.0;
  for (double v : per_expert) var += (v - s.mean) * (v - s.mean);
  var /= static_cast<double>(experts);
  s.cv = s.mean > 0.0 ? std::sqrt(var) / s.mean : 0.0;
  s.min = *std::min_element(per_expert.begin(), per_expert.end());
  s.max = *std::max_element(per_expert.begin(), per_expert.end());
  return s;
}

inline std::string metrics_row(const Experiment& e, std::size_t round, const GlobalState& state, const std::map<std::size_t, double>& rescalers,
                               const RoundReport* report) {
  const ExperimentConfig& c = e.config;
  const AggregationPolicy policy = c.policy();
  std::string row = std::to_string(round) + "," + to_string(c.method) + "," + (policy.kind == AggregationPolicy::Kind::flame ? "flame" : "fedavg") +
                    "," + std::to_string(policy.temperature) + "," + to_string(c.rescaler_mode());
  std::vector<std::vector<double>> freq_rows;
  if (report) {
    double loss_sum = 0.0;
    std::size_t trained = 0;
    for (const auto& rec : report->clients) {
      if (rec.diverged) continue;
      ++trained;
      loss_sum += rec.mean_loss;
      freq_rows.push_back(rec.frequencies);
    }
    row += "," + std::to_string(trained) + "," + std::to_string(report->diverged_count()) + "," +
           (trained == 0 ? std::string("nan") : fmt_double(loss_sum / static_cast<double>(trained)));
  } else {
    row += ",0,0,";
  }
  for (std::size_t t : e.tiers) {
    const EvalResult r = evaluate_global(e.model, state, tier_budget(c, t), evaluation_rescaler(e, t, rescalers), e.split.val.examples);
    row += "," + fmt_double(r.loss);
    if (c.task.kind == TaskKind::classification) row += "," + fmt_double(r.accuracy);
  }
  if (report) {
    const FrequencyStats f = frequency_stats(freq_rows, e.model.smoe.expert_count());
    row += "," + fmt_double(f.mean) + "," + fmt_double(f.cv) + "," + fmt_double(f.min) + "," + fmt_double(f.max);
  } else {
    row += ",,,,";
  }
  return row;
}

inline nlohmann::json round_record(const RoundReport& report) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& rec : report.clients) {
    clients.push_back({{"client_id", rec.client_id},
                       {"budget", rec.budget.label()},
                       {"dataset_size", rec.dataset_size},
                       {"steps", rec.steps},
                       {"initial_loss", rec.initial_loss},
                       {"mean_loss", rec.mean_loss},
                       {"rescaler", rec.rescaler},
                       {"diverged", rec.diverged},
                       {"error", rec.error}});
  }
  return {{"round", report.round},
          {"clients", clients},
          {"weights", {{"client_ids", report.weights.client_ids}, {"gamma", report.weights.gamma}, {"dropped", report.weights.dropped_clients}}},
          {"warnings", report.warnings}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw IoError("cannot open " + path.string() + " for appending");
  os << line << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

/// Keeps the header (if any) and the lines whose round is <= `last_round`.
inline void truncate_rounds(const std::filesystem::path& path, std::size_t last_round, bool has_header, bool jsonl) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("resume: cannot open " + path.string());
  std::string kept, line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first && has_header) {
      kept += line + "\n";
      first = false;
      continue;
    }
    first = false;
    std::size_t round = 0;
    if (jsonl) {
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("round")) throw IntegrityError("resume: unreadable line in " + path.string(), 0);
      round = j.at("round").get<std::size_t>();
    } else {
      round = std::stoull(line.substr(0, line.find(',')));
    }
    if (round <= last_round) kept += line + "\n";
  }
  is.close();
  write_text(path, kept);
}

}  // namespace detail

inline std::filesystem::path heatmap_path(const std::filesystem::path& run_dir, std::size_t round) {
  return run_dir / ("activations_round" + std::to_string(round) + ".csv");
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::size_t round) {
  return run_dir / ("checkpoint_round" + std::to_string(round) + ".ckpt");
}

inline RunArtifacts run_experiment(const ExperimentConfig& config, const RunOptions& options = {}) {
  const Experiment e = build_experiment(config);
  const ExperimentConfig& c = e.config;
  const std::string hash = config_hash(c);

  RunArtifacts art;
  art.output_dir = resolve_output_dir(c);
  std::error_code ec;
  std::filesystem::create_directories(art.output_dir, ec);
  if (ec) throw IoError("cannot create output directory " + art.output_dir.string() + ": " + ec.message());
  art.metrics_csv = art.output_dir / "metrics.csv";
  art.rounds_jsonl = art.output_dir / "rounds.jsonl";
  art.resolved_config = art.output_dir / "resolved_config.json";
  art.summary = art.output_dir / "summary.json";

  GlobalState state = GlobalState::from_model(e.model);
  std::map<std::size_t, double> rescalers;
  std::size_t first_round = 1;

  if (!options.resume_from.empty()) {
    const Checkpoint ck = load_checkpoint(options.resume_from);
    if (ck.config_hash != hash) throw ConfigError("resume: checkpoint " + options.resume_from + " was written by a different config");
    if (ck.state.expert_count() != state.expert_count() || ck.state.rank() != state.rank()) {
      throw ConfigError("resume: checkpoint adapter shapes do not match the config");
    }
    state = ck.state;
    rescalers = ck.rescalers;
    first_round = state.round_index + 1;
    detail::truncate_rounds(art.metrics_csv, state.round_index, true, false);
    detail::truncate_rounds(art.rounds_jsonl, state.round_index, false, true);
  } else {
    nlohmann::json resolved = {{"config", to_json(c)},
                               {"config_sha1", hash},
                               {"seed", c.seed},
                               {"input_path", options.config_path},
                               {"input_sha1", options.config_text.empty() ? std::string() : git_blob_sha1(options.config_text)}};
    detail::write_text(art.resolved_config, resolved.dump(2) + "\n");
    detail::write_text(art.metrics_csv, detail::metrics_header(e) + "\n");
    detail::write_text(art.rounds_jsonl, "");
    detail::append_line(art.metrics_csv, detail::metrics_row(e, 0, state, rescalers, nullptr));
  }

  RoundSettings settings;
  settings.policy = c.policy();
  settings.participation = c.participation;
  settings.train.lr = c.lr;
  settings.train.rescaler = c.rescaler_mode();
  settings.train.record_routing = c.log_routing;
  settings.jobs = c.jobs;

  art.last_round = state.round_index;
  for (std::size_t round = first_round; round <= c.rounds; ++round) {
    Rng sample_rng(derive_seed(c.seed, tag_hash("sample"), round));
    RoundOutcome out = run_round(state, e.clients, e.model, settings, sample_rng, rescalers);
    state = std::move(out.state);
    for (const auto& rec : out.report.clients)
      if (!rec.diverged) rescalers[rec.client_id] = rec.rescaler;
    art.diverged_clients += out.report.diverged_count();

    detail::append_line(art.metrics_csv, detail::metrics_row(e, round, state, rescalers, &out.report));
    detail::append_line(art.rounds_jsonl, detail::round_record(out.report).dump());

    std::string heat = "client_id";
    for (std::size_t j = 0; j < e.model.smoe.expert_count(); ++j) heat += ",expert_" + std::to_string(j);
    heat += "\n";
    for (const auto& rec : out.report.clients) {
      if (rec.diverged) continue;
      heat += std::to_string(rec.client_id);
      for (double f : rec.frequencies) heat += "," + detail::fmt_double(f);
      heat += "\n";
    }
    art.heatmaps.push_back(heatmap_path(art.output_dir, round));
    detail::write_text(art.heatmaps.back(), heat);

    if (c.log_routing) {
      std::string log = "client_id,step,example,selected\n";
      for (const auto& rec : out.report.clients) {
        for (const auto& entry : rec.routing_log) {
          log += std::to_string(rec.client_id) + "," + std::to_string(entry.step) + "," + std::to_string(entry.example) + ",";
          for (std::size_t i = 0; i < entry.selected.size(); ++i) log += (i ? " " : "") + std::to_string(entry.selected[i]);
          log += "\n";
        }
      }
      art.routing_logs.push_back(art.output_dir / ("routing_round" + std::to_string(round) + ".csv"));
      detail::write_text(art.routing_logs.back(), log);
    }

    art.checkpoints.push_back(checkpoint_path(art.output_dir, round));
    save_checkpoint(Checkpoint{state, rescalers, hash}, art.checkpoints.back().string());
    art.last_round = round;

    if (options.log) {
      *options.log << "round " << round << "/" << c.rounds << ": " << out.report.clients.size() << " clients, " << out.report.diverged_count()
                   << " diverged\n";
      for (const auto& w : out.report.warnings) *options.log << "  warning: " << w << "\n";
    }
    if (options.stop_after && round >= *options.stop_after) break;
  }

  if (art.last_round == c.rounds) {
    nlohmann::json tiers = nlohmann::json::object();
    for (std::size_t t : e.tiers) {
      const Budget b = tier_budget(c, t);
      const double s = evaluation_rescaler(e, t, rescalers);
      const EvalResult r = evaluate_global(e.model, state, b, s, e.split.test.examples);
      nlohmann::json entry = {{"budget", b.label()}, {"rescaler", s}, {"test_loss", r.loss}};
      if (c.task.kind == TaskKind::classification) entry["test_acc"] = r.accuracy;
      tiers[tier_name(t)] = entry;
    }
    detail::write_text(art.summary, nlohmann::json{{"name", c.name}, {"rounds", c.rounds}, {"tiers", tiers}}.dump(2) + "\n");
  }
  return art;
}

// ---------------------------------------------------------------------------
// Post-processing

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw NotFoundError("column '" + name + "' not found");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw IoError(path.string() + ": empty CSV");
  t.header = split(line);
  while (std::getline(is, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

/// N x M activation-frequency matrix of one round, clients as rows.
inline std::string export_heatmap(const std::filesystem::path& run_dir, std::size_t round) {
  const auto path = heatmap_path(run_dir, round);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("run " + run_dir.string() + " has no activation data for round " + std::to_string(round));
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

/// Budgets as rows, runs as columns; cells hold the final-round validation
/// accuracy (classification) or loss (regression).
inline void write_report(const std::vector<std::filesystem::path>& runs, std::ostream& os, bool csv) {
  if (runs.empty()) throw ConfigError("report: no runs given");
  std::vector<std::string> names;
  std::vector<std::map<std::string, std::string>> cells;  // per run: tier -> value
  std::set<std::string> tiers;
  std::set<std::string> metrics;
  for (const auto& run : runs) {
    const CsvTable t = read_csv(run / "metrics.csv");
    if (t.rows.empty()) throw IoError(run.string() + ": metrics.csv has no rows");
    const bool classification = std::any_of(t.header.begin(), t.header.end(), [](const std::string& h) { return h.ends_with("_val_acc"); });
    const std::string suffix = classification ? "_val_acc" : "_val_loss";
    metrics.insert(suffix.substr(1));
    std::map<std::string, std::string> by_tier;
    for (std::size_t i = 0; i < t.header.size(); ++i) {
      const std::string& h = t.header[i];
      if (!h.ends_with(suffix)) continue;
      const std::string tier = h.substr(0, h.size() - suffix.size());
      tiers.insert(tier);
      by_tier[tier] = i < t.rows.back().size() ? t.rows.back()[i] : "";
    }
    std::string name = run.filename().string();
    if (name.empty()) name = run.parent_path().filename().string();
    names.push_back(name);
    cells.push_back(std::move(by_tier));
  }
  std::string metric;
  for (const auto& m : metrics) metric += (metric.empty() ? "" : "/") + m;
  if (csv) {
    os << "budget";
    for (const auto& n : names) os << ',' << n;
    os << '\n';
    for (const auto& tier : tiers) {
      os << tier;
      for (const auto& c : cells) os << ',' << (c.count(tier) ? c.at(tier) : "");
      os << '\n';
    }
    return;
  }
  os << "final " << metric << " by budget\n";
  os << std::left << std::setw(8) << "budget";
  for (const auto& n : names) os << std::right << std::setw(std::max<int>(12, static_cast<int>(n.size()) + 2)) << n;
  os << '\n';
  for (const auto& tier : tiers) {
    os << std::left << std::setw(8) << tier;
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::string v = "-";
      if (cells[i].count(tier) && !cells[i].at(tier).empty()) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", std::strtod(cells[i].at(tier).c_str(), nullptr));
        v = buf;
      }
      os << std::right << std::setw(std::max<int>(12, static_cast<int>(names[i].size()) + 2)) << v;
    }
    os << '\n';
  }
}

}  // namespace flame

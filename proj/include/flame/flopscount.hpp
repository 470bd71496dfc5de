#pragma once

// Analytic forward-pass FLOPs and parameter tallies for dense and SMoE
// transformers with LoRA adapters.
//
// A multiply-add counts as 2 FLOPs, so a (m x n) linear map over `seq` tokens
// costs 2 * seq * m * n. An adapter of rank r on that map adds
// 2 * seq * (m * r + r * n). The LoRA share of a model is reported as the
// difference between the adapted and the un-adapted count, and only the
// k active experts of each SMoE layer contribute FLOPs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flame/errors.hpp"

namespace flame::flops {

struct LinearSpec {
  std::string name;
  std::uint64_t m = 0;  // output dim
  std::uint64_t n = 0;  // input dim
  std::uint64_t count = 1;
  std::uint64_t lora_rank = 0;
  bool counts_flops = true;  // false for lookup tables such as token embeddings
};

struct MoeSpec {
  std::uint64_t layers = 0;
  std::uint64_t experts = 1;
  std::uint64_t k_active = 1;
  std::uint64_t router_in = 0;  // router is router_in x experts, never adapted
  std::vector<LinearSpec> expert_matrices;  // per expert, per layer
};

struct AttentionSpec {
  std::uint64_t layers = 0;
  std::uint64_t d_model = 0;
};

struct ArchSpec {
  std::string name;
  std::vector<LinearSpec> dense;  // `count` = number of layers carrying the matrix
  std::optional<MoeSpec> moe;
  AttentionSpec attention;
  std::uint64_t seq_len = 128;
  std::uint64_t batch = 1;
};

struct FlopsReport {
  double base_flops = 0.0;
  double lora_flops = 0.0;
  double total_flops = 0.0;
  std::uint64_t params_total = 0;      // P
  std::uint64_t params_active = 0;     // P_a
  std::uint64_t trainable_total = 0;   // P-hat
  std::uint64_t trainable_active = 0;  // P-hat_a
};

/// 2 * seq_len * m * n
inline double count_linear(std::uint64_t m, std::uint64_t n, std::uint64_t seq_len) {
  return 2.0 * static_cast<double>(seq_len) * static_cast<double>(m) * static_cast<double>(n);
}

inline double count_lora(std::uint64_t m, std::uint64_t n, std::uint64_t rank, std::uint64_t seq_len) {
  return 2.0 * static_cast<double>(seq_len) * (static_cast<double>(m) * static_cast<double>(rank) + static_cast<double>(rank) * static_cast<double>(n));
}

/// Per-token softmax + TopK cost of a router over `experts` logits.
inline double routing_ops(std::uint64_t experts) {
  const double e = static_cast<double>(experts);
  return experts <= 1 ? e : e + e * std::log2(e);
}

inline void validate(const ArchSpec& s) {
  auto check_linear = [](const LinearSpec& l) {
    if (l.m < 1 || l.n < 1) throw DomainError("archspec: matrix '" + l.name + "' has a zero dimension");
    if (l.count < 1) throw DomainError("archspec: matrix '" + l.name + "' has count 0");
  };
  if (s.seq_len < 1 || s.batch < 1) throw DomainError("archspec: seq_len and batch must be >= 1");
  for (const auto& l : s.dense) check_linear(l);
  if (s.moe) {
    const MoeSpec& m = *s.moe;
    if (m.layers < 1 || m.experts < 1) throw DomainError("archspec: moe layers and experts must be >= 1");
    if (m.k_active < 1 || m.k_active > m.experts) {
      throw DomainError("archspec: k_active=" + std::to_string(m.k_active) + " outside [1, " + std::to_string(m.experts) + "]");
    }
    if (m.router_in < 1) throw DomainError("archspec: moe router_in must be >= 1");
    if (m.expert_matrices.empty()) throw DomainError("archspec: moe block lists no expert matrices");
    for (const auto& l : m.expert_matrices) check_linear(l);
  }
  if ((s.attention.layers == 0) != (s.attention.d_model == 0)) throw DomainError("archspec: attention needs both layers and d_model");
}

inline FlopsReport count_model(const ArchSpec& s) {
  validate(s);
  const std::uint64_t seq = s.seq_len * s.batch;
  FlopsReport r;

  for (const auto& l : s.dense) {
    const double c = static_cast<double>(l.count);
    const std::uint64_t p = l.m * l.n * l.count;
    const std::uint64_t lp = l.lora_rank * (l.m + l.n) * l.count;
    r.params_total += p;
    r.params_active += p;
    r.trainable_total += lp;
    r.trainable_active += lp;
    if (!l.counts_flops) continue;
    r.base_flops += c * count_linear(l.m, l.n, seq);
    if (l.lora_rank > 0) r.lora_flops += c * count_lora(l.m, l.n, l.lora_rank, seq);
  }

  if (s.moe) {
    const MoeSpec& m = *s.moe;
    const double layers = static_cast<double>(m.layers);
    const double k = static_cast<double>(m.k_active);
    double expert_base = 0.0, expert_lora = 0.0;
    std::uint64_t expert_params = 0, expert_lora_params = 0;
    for (const auto& l : m.expert_matrices) {
      const double c = static_cast<double>(l.count);
      expert_base += c * count_linear(l.m, l.n, seq);
      if (l.lora_rank > 0) expert_lora += c * count_lora(l.m, l.n, l.lora_rank, seq);
      expert_params += l.m * l.n * l.count;
      expert_lora_params += l.lora_rank * (l.m + l.n) * l.count;
    }
    const double router = count_linear(m.experts, m.router_in, seq) + static_cast<double>(seq) * routing_ops(m.experts);
    r.base_flops += layers * (k * expert_base + router);
    r.lora_flops += layers * k * expert_lora;

    const std::uint64_t router_params = m.router_in * m.experts;
    r.params_total += m.layers * (m.experts * expert_params + router_params);
    r.params_active += m.layers * (m.k_active * expert_params + router_params);
    r.trainable_total += m.layers * m.experts * expert_lora_params;
    r.trainable_active += m.layers * m.k_active * expert_lora_params;
  }

  if (s.attention.layers > 0) {
    // QK^T and attention-weighted values: 2 * (2 * seq^2 * d) per layer per sequence.
    const double sl = static_cast<double>(s.seq_len);
    r.base_flops += static_cast<double>(s.attention.layers) * static_cast<double>(s.batch) * 4.0 * sl * sl *
                    static_cast<double>(s.attention.d_model);
  }

  r.total_flops = r.base_flops + r.lora_flops;
  return r;
}

/// Copy of `s` with every adapted matrix (lora_rank > 0) set to `rank`; rank 0
/// strips all adapters.
inline ArchSpec with_lora_rank(ArchSpec s, std::uint64_t rank) {
  for (auto& l : s.dense)
    if (l.lora_rank > 0) l.lora_rank = rank;
  if (s.moe)
    for (auto& l : s.moe->expert_matrices)
      if (l.lora_rank > 0) l.lora_rank = rank;
  return s;
}

inline ArchSpec with_k_active(ArchSpec s, std::uint64_t k) {
  if (!s.moe) throw DomainError("archspec: k_active override on a model without an moe block");
  s.moe->k_active = k;
  return s;
}

inline std::uint64_t max_lora_rank(const ArchSpec& s) {
  std::uint64_t r = 0;
  for (const auto& l : s.dense) r = std::max(r, l.lora_rank);
  if (s.moe)
    for (const auto& l : s.moe->expert_matrices) r = std::max(r, l.lora_rank);
  return r;
}

struct BudgetRow {
  std::string label;
  std::uint64_t rank = 0;
  std::uint64_t k_active = 0;  // 0 for dense models
  FlopsReport report;
  double flops_percent = 100.0;  // of the first row
};

struct NamedSpec {
  std::string label;
  ArchSpec spec;
};

inline std::vector<BudgetRow> compare_budgets(const std::vector<NamedSpec>& specs) {
  if (specs.empty()) throw DomainError("compare_budgets: no specs");
  std::vector<BudgetRow> rows;
  for (const auto& ns : specs) {
    BudgetRow row{ns.label, max_lora_rank(ns.spec), ns.spec.moe ? ns.spec.moe->k_active : 0, count_model(ns.spec), 100.0};
    rows.push_back(std::move(row));
  }
  const double ref = rows.front().report.total_flops;
  for (auto& row : rows) row.flops_percent = ref > 0.0 ? 100.0 * row.report.total_flops / ref : 100.0;
  return rows;
}

// ---------------------------------------------------------------------------
// Formatting

namespace detail {

inline std::string human(double v) {
  static const char* suffix[] = {"", "K", "M", "B", "T"};
  int i = 0;
  while (std::abs(v) >= 1000.0 && i < 4) {
    v /= 1000.0;
    ++i;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(i == 0 ? 0 : 1) << v << suffix[i];
  return os.str();
}

}  // namespace detail

inline void write_table_text(const std::vector<BudgetRow>& rows, std::ostream& os) {
  os << std::left << std::setw(10) << "budget" << std::right << std::setw(6) << "r" << std::setw(6) << "k" << std::setw(18) << "P_a/P"
     << std::setw(18) << "P^_a/P^" << std::setw(12) << "base" << std::setw(12) << "lora" << std::setw(22) << "FLOPs" << '\n';
  for (const auto& r : rows) {
    std::ostringstream pct;
    pct << std::fixed << std::setprecision(1) << r.flops_percent << "%";
    os << std::left << std::setw(10) << r.label << std::right << std::setw(6) << r.rank << std::setw(6)
       << (r.k_active == 0 ? std::string("-") : std::to_string(r.k_active)) << std::setw(18)
       << (detail::human(static_cast<double>(r.report.params_active)) + "/" + detail::human(static_cast<double>(r.report.params_total)))
       << std::setw(18)
       << (detail::human(static_cast<double>(r.report.trainable_active)) + "/" + detail::human(static_cast<double>(r.report.trainable_total)))
       << std::setw(12) << detail::human(r.report.base_flops) << std::setw(12) << detail::human(r.report.lora_flops) << std::setw(22)
       << (detail::human(r.report.total_flops) + " (" + pct.str() + ")") << '\n';
  }
}

inline void write_table_csv(const std::vector<BudgetRow>& rows, std::ostream& os) {
  os << "budget,r,k,params_active,params_total,trainable_active,trainable_total,base_flops,lora_flops,total_flops,flops_percent\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.label << ',' << r.rank << ',' << r.k_active << ',' << r.report.params_active << ',' << r.report.params_total << ','
       << r.report.trainable_active << ',' << r.report.trainable_total << ',' << r.report.base_flops << ',' << r.report.lora_flops << ','
       << r.report.total_flops << ',' << r.flops_percent << '\n';
  }
}

// ---------------------------------------------------------------------------
// JSON archspec files
//
// Either a single spec object, or {"base": {...}, "budgets": [{"label", "k_active"?, "lora_rank"?}, ...]}.

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("archspec: unknown key '" + it.key() + "' in " + where);
  }
}

inline std::uint64_t get_u64(const json& j, const char* key, const std::string& where, std::optional<std::uint64_t> fallback = {}) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    throw ConfigError("archspec: missing '" + std::string(key) + "' in " + where);
  }
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError("archspec: '" + std::string(key) + "' in " + where + " must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

inline LinearSpec parse_linear(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("archspec: " + where + " must be an object");
  reject_unknown(j, {"name", "m", "n", "count", "lora_rank", "flops"}, where);
  LinearSpec l;
  l.name = j.value("name", std::string{});
  l.m = get_u64(j, "m", where);
  l.n = get_u64(j, "n", where);
  l.count = get_u64(j, "count", where, 1);
  l.lora_rank = get_u64(j, "lora_rank", where, 0);
  if (j.contains("flops")) {
    if (!j.at("flops").is_boolean()) throw ConfigError("archspec: 'flops' in " + where + " must be boolean");
    l.counts_flops = j.at("flops").get<bool>();
  }
  return l;
}

}  // namespace detail

inline ArchSpec parse_archspec(const nlohmann::json& j) {
  using detail::get_u64;
  if (!j.is_object()) throw ConfigError("archspec: top level must be an object");
  detail::reject_unknown(j, {"name", "dense", "moe", "attention", "seq_len", "batch"}, "archspec");
  ArchSpec s;
  s.name = j.value("name", std::string{});
  s.seq_len = get_u64(j, "seq_len", "archspec", 128);
  s.batch = get_u64(j, "batch", "archspec", 1);
  if (j.contains("dense")) {
    const auto& arr = j.at("dense");
    if (!arr.is_array()) throw ConfigError("archspec: 'dense' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) s.dense.push_back(detail::parse_linear(arr[i], "dense[" + std::to_string(i) + "]"));
  }
  if (j.contains("moe")) {
    const auto& m = j.at("moe");
    detail::reject_unknown(m, {"layers", "experts", "k_active", "router_in", "expert_matrices"}, "moe");
    MoeSpec moe;
    moe.layers = get_u64(m, "layers", "moe");
    moe.experts = get_u64(m, "experts", "moe");
    moe.k_active = get_u64(m, "k_active", "moe");
    moe.router_in = get_u64(m, "router_in", "moe");
    if (!m.contains("expert_matrices") || !m.at("expert_matrices").is_array()) throw ConfigError("archspec: moe.expert_matrices must be an array");
    const auto& arr = m.at("expert_matrices");
    for (std::size_t i = 0; i < arr.size(); ++i) moe.expert_matrices.push_back(detail::parse_linear(arr[i], "moe.expert_matrices[" + std::to_string(i) + "]"));
    s.moe = std::move(moe);
  }
  if (j.contains("attention")) {
    const auto& a = j.at("attention");
    detail::reject_unknown(a, {"layers", "d_model"}, "attention");
    s.attention.layers = get_u64(a, "layers", "attention");
    s.attention.d_model = get_u64(a, "d_model", "attention");
  }
  try {
    validate(s);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return s;
}

/// A base spec expanded into one spec per budget row.
inline std::vector<NamedSpec> parse_budget_file(const nlohmann::json& j) {
  if (j.is_object() && j.contains("base")) {
    detail::reject_unknown(j, {"base", "budgets"}, "budget file");
    const ArchSpec base = parse_archspec(j.at("base"));
    std::vector<NamedSpec> out;
    if (!j.contains("budgets") || !j.at("budgets").is_array() || j.at("budgets").empty()) {
      throw ConfigError("archspec: 'budgets' must be a non-empty array");
    }
    for (std::size_t i = 0; i < j.at("budgets").size(); ++i) {
      const auto& b = j.at("budgets")[i];
      const std::string where = "budgets[" + std::to_string(i) + "]";
      detail::reject_unknown(b, {"label", "k_active", "lora_rank"}, where);
      ArchSpec s = base;
      if (b.contains("lora_rank")) s = with_lora_rank(s, detail::get_u64(b, "lora_rank", where));
      if (b.contains("k_active")) {
        if (!s.moe) throw ConfigError("archspec: " + where + " sets k_active on a dense model");
        s = with_k_active(s, detail::get_u64(b, "k_active", where));
      }
      try {
        validate(s);
      } catch (const DomainError& e) {
        throw ConfigError(where + ": " + e.what());
      }
      out.push_back({b.value("label", "budget" + std::to_string(i + 1)), std::move(s)});
    }
    return out;
  }
  ArchSpec s = parse_archspec(j);
  const std::string label = s.name.empty() ? "spec" : s.name;
  return {{label, std::move(s)}};
}

inline std::vector<NamedSpec> load_budget_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open archspec " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("archspec " + path + ": " + e.what());
  }
  return parse_budget_file(j);
}

}  // namespace flame::flops

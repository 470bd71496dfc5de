#include <gtest/gtest.h>

#include <sstream>

#include "flame/flopscount.hpp"

using namespace flame::flops;

namespace {

ArchSpec toy_moe(std::uint64_t k, std::uint64_t rank) {
  ArchSpec s;
  s.name = "toy";
  s.seq_len = 128;
  s.moe = MoeSpec{1, 64, k, 64, {LinearSpec{"w", 64, 64, 1, rank, true}}};
  return s;
}

std::string config_path(const char* name) { return std::string(FLAME_SOURCE_DIR) + "/configs/flops/" + name; }

}  // namespace

TEST(CountLinear, UnitCase) { EXPECT_EQ(count_linear(1, 1, 1), 2.0); }

TEST(CountLinear, SquareLayer) { EXPECT_EQ(count_linear(4096, 4096, 128), 4294967296.0); }

TEST(CountLinear, LinearInSeqLen) { EXPECT_EQ(count_linear(30, 70, 256), 2.0 * count_linear(30, 70, 128)); }

TEST(CountLora, ClosedForm) { EXPECT_EQ(count_lora(10, 6, 2, 3), 2.0 * 3 * (10 * 2 + 2 * 6)); }

TEST(CountModel, NoAdaptersMeansNoLoraFlops) {
  const FlopsReport r = count_model(toy_moe(8, 0));
  EXPECT_EQ(r.lora_flops, 0.0);
  EXPECT_EQ(r.total_flops, r.base_flops);
  EXPECT_EQ(r.trainable_total, 0u);
}

TEST(CountModel, ExpertTermScalesWithK) {
  const FlopsReport k8 = count_model(toy_moe(8, 20));
  const FlopsReport k1 = count_model(toy_moe(1, 20));
  const double router = count_linear(64, 64, 128) + 128.0 * (64.0 + 64.0 * 6.0);
  EXPECT_EQ((k1.base_flops - router) / (k8.base_flops - router), 1.0 / 8.0);
  EXPECT_EQ(k1.lora_flops / k8.lora_flops, 1.0 / 8.0);
}

TEST(CountModel, FullActivationMatchesDenseEnsemble) {
  ArchSpec moe = toy_moe(64, 4);
  ArchSpec dense;
  dense.seq_len = 128;
  dense.dense.push_back(LinearSpec{"ensemble", 64, 64, 64, 4, true});
  const FlopsReport a = count_model(moe);
  const FlopsReport b = count_model(dense);
  const double router = count_linear(64, 64, 128) + 128.0 * (64.0 + 64.0 * 6.0);
  EXPECT_EQ(a.base_flops - router, b.base_flops);
  EXPECT_EQ(a.lora_flops, b.lora_flops);
  EXPECT_EQ(a.params_total - 64 * 64, b.params_total);
}

TEST(CountModel, ByDifferenceIdentity) {
  for (const auto& ns : load_budget_file(config_path("olmoe_like_k_sweep.json"))) {
    const FlopsReport adapted = count_model(ns.spec);
    const FlopsReport plain = count_model(with_lora_rank(ns.spec, 0));
    EXPECT_EQ(adapted.total_flops - plain.total_flops, adapted.lora_flops);
    EXPECT_EQ(plain.total_flops, adapted.base_flops);
  }
}

TEST(CountModel, ParameterConventions) {
  const FlopsReport r = count_model(toy_moe(2, 3));
  EXPECT_EQ(r.params_total, 64u * 64 * 64 + 64 * 64);
  EXPECT_EQ(r.params_active, 2u * 64 * 64 + 64 * 64);
  EXPECT_EQ(r.trainable_total, 64u * 3 * 128);
  EXPECT_EQ(r.trainable_active, 2u * 3 * 128);
}

TEST(CountModel, StrictlyMonotone) {
  const double base = count_model(toy_moe(4, 8)).total_flops;
  ArchSpec longer = toy_moe(4, 8);
  longer.seq_len = 129;
  EXPECT_GT(count_model(longer).total_flops, base);
  EXPECT_GT(count_model(toy_moe(5, 8)).total_flops, base);
  ArchSpec wider = toy_moe(4, 8);
  wider.moe->expert_matrices[0].m = 65;
  EXPECT_GT(count_model(wider).total_flops, base);
  ArchSpec with_attention = toy_moe(4, 8);
  with_attention.attention = {1, 64};
  EXPECT_GT(count_model(with_attention).total_flops, base);
}

TEST(CountModel, InvalidSpecs) {
  EXPECT_THROW(count_model(toy_moe(65, 4)), flame::DomainError);
  EXPECT_THROW(count_model(toy_moe(0, 4)), flame::DomainError);
  ArchSpec zero_dim = toy_moe(1, 1);
  zero_dim.moe->expert_matrices[0].n = 0;
  EXPECT_THROW(count_model(zero_dim), flame::DomainError);
}

TEST(CompareBudgets, IdenticalSpecsAreAllHundredPercent) {
  const auto rows = compare_budgets({{"a", toy_moe(2, 4)}, {"b", toy_moe(2, 4)}});
  for (const auto& r : rows) EXPECT_EQ(r.flops_percent, 100.0);
}

TEST(CompareBudgets, EmptyIsDomainError) { EXPECT_THROW(compare_budgets({}), flame::DomainError); }

TEST(ShippedSpec, RankSweepIsNearlyFlat) {
  const auto rows = compare_budgets(load_budget_file(config_path("olmoe_like_r_sweep.json")));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].rank, 40u);
  EXPECT_EQ(rows[3].rank, 12u);
  EXPECT_LT(100.0 - rows[3].flops_percent, 5.0);
}

TEST(ShippedSpec, ExpertSweepIsSteep) {
  const auto rows = compare_budgets(load_budget_file(config_path("olmoe_like_k_sweep.json")));
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i].report.total_flops, rows[i - 1].report.total_flops);
  EXPECT_LT(rows[3].flops_percent, 60.0);
}

TEST(ShippedSpec, HandCountOfKOneBudget) {
  // OLMoE-like spec at k=1, r=20, 128 tokens, tallied term by term.
  const double seq = 128, d = 2048, layers = 16, r = 20;
  const double attention_proj = layers * 4 * 2 * seq * d * d;
  const double attention_scores = layers * 4 * seq * seq * d;
  const double expert = layers * 1 * 3 * 2 * seq * d * 1024;
  const double router = layers * (2 * seq * 64 * d + seq * (64 + 64 * 6));
  const double lm_head = 2 * seq * 50304 * d;
  const double lora = layers * 4 * 2 * seq * (d * r + r * d) + layers * 1 * 3 * 2 * seq * (1024 * r + r * d);
  const auto specs = load_budget_file(config_path("olmoe_like_k_sweep.json"));
  const FlopsReport rep = count_model(specs[3].spec);
  EXPECT_EQ(rep.base_flops, attention_proj + attention_scores + expert + router + lm_head);
  EXPECT_EQ(rep.lora_flops, lora);
}

TEST(ArchspecJson, RejectsUnknownKeys) {
  EXPECT_THROW(parse_archspec(nlohmann::json::parse(R"({"seq_len": 4, "colour": 1})")), flame::ConfigError);
  EXPECT_THROW(parse_archspec(nlohmann::json::parse(R"({"dense": [{"m": 1, "n": 1, "rank": 2}]})")), flame::ConfigError);
}

TEST(ArchspecJson, ValidationErrorsBecomeConfigErrors) {
  EXPECT_THROW(parse_archspec(nlohmann::json::parse(R"({"dense": [{"m": 0, "n": 1}]})")), flame::ConfigError);
  EXPECT_THROW(parse_archspec(nlohmann::json::parse(R"({"dense": [{"m": -3, "n": 1}]})")), flame::ConfigError);
}

TEST(ArchspecJson, SingleSpecFile) {
  const auto specs = parse_budget_file(nlohmann::json::parse(R"({"name": "tiny", "dense": [{"m": 2, "n": 3}]})"));
  ASSERT_EQ(specs.size(), 1u);
  EXPECT_EQ(specs[0].label, "tiny");
  EXPECT_EQ(count_model(specs[0].spec).total_flops, 2.0 * 128 * 6);
}

TEST(ArchspecJson, MissingFile) { EXPECT_THROW(load_budget_file("/nonexistent/spec.json"), flame::NotFoundError); }

TEST(Table, CsvHasOneRowPerBudget) {
  const auto rows = compare_budgets(load_budget_file(config_path("olmoe_like_k_sweep.json")));
  std::ostringstream os;
  write_table_csv(rows, os);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
  EXPECT_EQ(text.rfind("budget,r,k,", 0), 0u);
  std::ostringstream txt;
  write_table_text(rows, txt);
  EXPECT_NE(txt.str().find("beta4"), std::string::npos);
}

// flame: run federated SMoE experiments, count FLOPs, export heatmaps and
// merge run metrics.
//
// Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "flame/experiment.hpp"
#include "flame/flopscount.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct RunArgs {
  std::string config;
  std::string out;
  std::string resume;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> jobs;
  std::optional<std::size_t> stop_after;
  bool quiet = false;
};

int cmd_run(const RunArgs& a) {
  std::string raw;
  nlohmann::json doc = flame::read_json_file(a.config, &raw);
  if (!doc.is_object()) throw flame::ConfigError(a.config + ": top level must be an object");
  for (const auto& o : a.overrides) flame::apply_override(doc, o);
  if (a.seed) doc["seed"] = *a.seed;
  if (a.rounds) doc["rounds"] = *a.rounds;
  if (a.jobs) doc["jobs"] = *a.jobs;
  if (!a.out.empty()) doc["output_dir"] = a.out;
  const flame::ExperimentConfig cfg = flame::parse_config(doc);

  flame::RunOptions opt;
  opt.config_path = a.config;
  opt.config_text = raw;
  opt.resume_from = a.resume;
  opt.stop_after = a.stop_after;
  opt.log = a.quiet ? nullptr : &std::cerr;
  const flame::RunArtifacts art = flame::run_experiment(cfg, opt);
  std::cout << art.output_dir.string() << '\n';
  if (art.diverged_clients > 0) std::cerr << "warning: " << art.diverged_clients << " client update(s) diverged; see rounds.jsonl\n";
  return 0;
}

int cmd_flops(const std::string& path, bool csv) {
  const auto rows = flame::flops::compare_budgets(flame::flops::load_budget_file(path));
  if (csv) {
    flame::flops::write_table_csv(rows, std::cout);
  } else {
    flame::flops::write_table_text(rows, std::cout);
  }
  return 0;
}

int cmd_heatmap(const std::string& run, std::size_t round) {
  std::cout << flame::export_heatmap(run, round);
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, bool csv) {
  std::vector<std::filesystem::path> paths(runs.begin(), runs.end());
  flame::write_report(paths, std::cout, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Resource-adaptive federated fine-tuning of sparse mixture-of-experts models with LoRA adapters"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run an experiment described by a JSON config");
  run_cmd->add_option("config", run.config, "Experiment config (JSON)")->required();
  run_cmd->add_option("--out", run.out, "Output directory (overrides output_dir and FLAME_OUTPUT_ROOT)");
  run_cmd->add_option("--set", run.overrides, "Override a config field, e.g. --set model.rank=8 (repeatable)");
  run_cmd->add_option("--seed", run.seed, "Override the seed");
  run_cmd->add_option("--rounds", run.rounds, "Override the number of rounds");
  run_cmd->add_option("--jobs", run.jobs, "Clients trained concurrently per round");
  run_cmd->add_option("--resume", run.resume, "Continue from a checkpoint_round{n}.ckpt of the same config");
  run_cmd->add_option("--stop-after", run.stop_after, "Stop after this round");
  run_cmd->add_flag("-q,--quiet", run.quiet, "No progress output");

  std::string flops_path;
  bool flops_csv = false;
  auto* flops_cmd = app.add_subcommand("flops", "Tabulate FLOPs and parameters for an architecture spec or budget file");
  flops_cmd->add_option("archspec", flops_path, "Architecture spec or budget file (JSON)")->required();
  flops_cmd->add_flag("--csv", flops_csv, "CSV instead of a text table");

  std::string heat_run;
  std::size_t heat_round = 0;
  auto* heat_cmd = app.add_subcommand("heatmap", "Print a round's client x expert activation frequencies as CSV");
  heat_cmd->add_option("run", heat_run, "Run directory")->required();
  heat_cmd->add_option("--round", heat_round, "Round number (1-based)")->required();

  std::vector<std::string> report_runs;
  bool report_csv = false;
  auto* report_cmd = app.add_subcommand("report", "Compare the final per-budget metrics of several runs");
  report_cmd->add_option("runs", report_runs, "Run directories")->required();
  report_cmd->add_flag("--csv", report_csv, "CSV instead of a text table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*flops_cmd) return cmd_flops(flops_path, flops_csv);
    if (*heat_cmd) return cmd_heatmap(heat_run, heat_round);
    if (*report_cmd) return cmd_report(report_runs, report_csv);
  } catch (const flame::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const flame::DomainError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const flame::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const flame::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

// Command-line harness for the simulator: run experiments, compute the
// occupancy lower bound, validate profiles and replay exported workloads.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ddit/ddit.hpp"

namespace {

using namespace ddit;

int cmd_run(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
            std::optional<std::string> policy) {
  auto cfg = load_experiment_file(config);
  if (!out.empty()) cfg.output_dir = out;
  auto runs = run_experiment(cfg, {seed, policy});
  std::ifstream summary(cfg.output_dir / "summary.txt");
  std::cout << summary.rdbuf();
  std::cout << runs.size() << " runs written to " << cfg.output_dir.string() << "\n";
  return 0;
}

int cmd_solve(const std::string& config, std::optional<std::uint64_t> seed) {
  auto cfg = load_experiment_file(config);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& w : cfg.workloads) {
    WorkloadSpec spec = w.spec;
    spec.seed = seed.value_or(cfg.seeds.front());
    const double lambda = spec.burst ? 0.0 : spec.arrival_rate;
    nlohmann::json row{{"workload", w.name}};
    if (auto sol = solve_bound(cfg, spec.proportions, spec.count, spec.denoise_steps, lambda)) {
      row["optimum_gpu_seconds"] = sol->optimum;
      auto& plan = row["plan"] = nlohmann::json::array();
      for (const auto& e : sol->plan) {
        plan.push_back({{"resolution", spec.proportions[e.type].first},
                        {"first_gpu", e.first_gpu},
                        {"gpu_count", e.gpu_count},
                        {"dop", e.dop},
                        {"instances", e.instances}});
      }
    } else {
      row["optimum_gpu_seconds"] = "unavailable";
    }
    out.push_back(std::move(row));
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_profile_check(const std::string& path, double threshold) {
  const auto table = load_profiles_file(path);
  const auto b = derive_b_values(table, threshold);
  std::cout << "profile ok: " << table.resolutions().size() << " resolutions, dop candidates";
  for (Dop d : table.dop_candidates()) std::cout << ' ' << d;
  std::cout << "\n";
  for (const auto& r : table.resolutions()) {
    std::cout << "  " << r.name << ": B=" << b.at(r.name);
    for (Dop d : table.dop_candidates()) {
      if (d >= 2 && table.has(r.name, d) && table.has(r.name, d / 2)) {
        std::cout << "  z" << d << '=' << format_double(change_rate(table, r.name, d));
      }
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_replay(const std::string& config, const std::string& workload, const std::string& out,
               std::optional<std::string> policy) {
  auto cfg = load_experiment_file(config);
  if (!out.empty()) cfg.output_dir = out;
  std::ifstream in(workload);
  if (!in) throw ConfigError("cannot open workload " + workload);
  const auto arrivals = read_arrivals(in);
  if (arrivals.empty()) throw ConfigError("workload file is empty");
  for (const auto& a : arrivals) {
    if (!cfg.profiles.find_resolution(a.resolution)) {
      throw ConfigError("workload: no profile for resolution " + a.resolution);
    }
  }
  const auto mix = observed_mix(arrivals, cfg.profiles);
  const std::string scenario = std::filesystem::path(workload).stem().string();

  std::optional<double> optimum;
  if (cfg.solver.enabled) {
    const double span = arrivals.back().arrival_time;
    const double lambda = span > 0.0 ? arrivals.size() / span : 0.0;
    if (auto sol = solve_bound(cfg, mix, static_cast<int>(arrivals.size()),
                               arrivals.front().denoise_steps, lambda)) {
      optimum = sol->optimum;
    }
  }
  std::vector<ScenarioOutcome> runs;
  for (const auto& p : cfg.policies) {
    if (policy && p.name != *policy) continue;
    runs.push_back(detail::run_outcome(cfg, arrivals, mix, p, scenario, 0, optimum));
  }
  if (runs.empty()) throw ConfigError("no policy matches the filter");
  write_reports(cfg.output_dir, runs);
  std::ifstream summary(cfg.output_dir / "summary.txt");
  std::cout << summary.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiT text-to-video serving simulator"};
  app.require_subcommand(1);

  std::string config, out, workload, profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  double threshold = kDefaultGainThreshold;

  auto* run = app.add_subcommand("run", "Run every workload x policy x seed in a config");
  run->add_option("-c,--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--out", out, "Output directory (overrides the config)");
  run->add_option("--seed", seed, "Run only this seed");
  run->add_option("--policy", policy, "Run only the policy with this name");

  auto* solve = app.add_subcommand("solve", "Compute the theoretical minimum occupancy");
  solve->add_option("-c,--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  solve->add_option("--seed", seed, "Seed for the workload (unused by the batch model)");

  auto* check = app.add_subcommand("profile-check", "Validate a profile document and print B values");
  check->add_option("profile", profile, "Profile document (JSON)")->required();
  check->add_option("--threshold", threshold, "Minimum change rate for B > 1");

  auto* replay = app.add_subcommand("replay", "Re-run an exported workload file");
  replay->add_option("-c,--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  replay->add_option("-w,--workload", workload, "Line-delimited arrivals")->required();
  replay->add_option("-o,--out", out, "Output directory (overrides the config)");
  replay->add_option("--policy", policy, "Run only the policy with this name");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, out, seed, policy);
    if (*solve) return cmd_solve(config, seed);
    if (*check) return cmd_profile_check(profile, threshold);
    if (*replay) return cmd_replay(config, workload, out, policy);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

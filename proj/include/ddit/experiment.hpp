#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddit/error.hpp"
#include "ddit/format.hpp"
#include "ddit/gpu_pool.hpp"
#include "ddit/metrics.hpp"
#include "ddit/policies.hpp"
#include "ddit/profile.hpp"
#include "ddit/simulator.hpp"
#include "ddit/solver.hpp"
#include "ddit/workload.hpp"

namespace ddit {

inline constexpr std::string_view kExperimentSchema = "ddit-experiment/1";

using Mix = std::vector<std::pair<std::string, double>>;

enum class PolicyKind { kGreedy, kSdop, kSpci, kDpci, kDp };

struct PolicySpec {
  std::string name;
  PolicyKind kind = PolicyKind::kGreedy;
  Dop dop = 2;  // sdop / spci
  bool decouple = false;
  bool promotion = true;
};

struct WorkloadEntry {
  std::string name;
  WorkloadSpec spec;  // seed is overridden per run
};

struct SolverSettings {
  bool enabled = true;
  OccupancyKind model = OccupancyKind::kBatch;
  bool include_vae = true;
  std::vector<Dop> dops;  // empty: the profile's candidates
  QueueOptions queue;
};

struct ExperimentConfig {
  ClusterTopology topology;
  ProfileTable profiles;
  double gain_threshold = kDefaultGainThreshold;
  Dop vae_dop = 1;
  OverheadModel overheads;
  std::vector<WorkloadEntry> workloads;
  std::vector<PolicySpec> policies;
  std::vector<std::uint64_t> seeds{0};
  SolverSettings solver;
  std::filesystem::path output_dir = "results";
  bool write_traces = false;

  BValueTable b_values() const { return derive_b_values(profiles, gain_threshold, vae_dop); }
};

namespace detail {

inline const nlohmann::json& child(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ConfigError(where + ": missing '" + key + "'");
  }
  return obj.at(key);
}

template <typename T>
T get_or(const nlohmann::json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": '" + key + "' has the wrong type");
  }
}

inline PolicyKind parse_policy_kind(const std::string& s, const std::string& where) {
  if (s == "greedy") return PolicyKind::kGreedy;
  if (s == "sdop") return PolicyKind::kSdop;
  if (s == "spci") return PolicyKind::kSpci;
  if (s == "dpci") return PolicyKind::kDpci;
  if (s == "dp") return PolicyKind::kDp;
  throw ConfigError(where + ": unknown policy kind '" + s + "'");
}

inline Mix parse_mix(const nlohmann::json& j, const ProfileTable& profiles, const std::string& where) {
  Mix mix;
  if (j.is_array()) {
    for (const auto& e : j) {
      mix.emplace_back(get_or<std::string>(e, "resolution", "", where),
                       get_or<double>(e, "fraction", -1.0, where));
    }
  } else if (j.is_object()) {
    for (const auto& [k, v] : j.items()) mix.emplace_back(k, v.get<double>());
    // Object keys lose their order; use the profile's resolution order.
    std::stable_sort(mix.begin(), mix.end(), [&](const auto& a, const auto& b) {
      const auto* ra = profiles.find_resolution(a.first);
      const auto* rb = profiles.find_resolution(b.first);
      return (ra ? ra->ordinal : 1 << 30) < (rb ? rb->ordinal : 1 << 30);
    });
  } else {
    throw ConfigError(where + ": 'mix' must be an array or object");
  }
  for (const auto& [res, x] : mix) {
    if (!profiles.find_resolution(res)) {
      throw ConfigError(where + ": no profile for resolution '" + res + "'");
    }
  }
  return mix;
}

}  // namespace detail

// See configs/ for a documented example of the layout.
inline ExperimentConfig parse_experiment(const nlohmann::json& doc,
                                         const std::filesystem::path& base_dir = ".") {
  const std::string top = "experiment config";
  if (!doc.is_object()) throw ConfigError(top + ": top level must be an object");
  if (detail::get_or<std::string>(doc, "schema", "", top) != kExperimentSchema) {
    throw ConfigError(top + ": schema must be '" + std::string(kExperimentSchema) + "'");
  }
  ExperimentConfig cfg;

  const auto& topo = detail::child(doc, "topology", top);
  cfg.topology.nodes = detail::get_or<int>(topo, "nodes", 1, "topology");
  cfg.topology.gpus_per_node = detail::get_or<int>(topo, "gpus_per_node", 8, "topology");
  try {
    cfg.topology.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }

  const auto& prof = detail::child(doc, "profiles", top);
  try {
    if (prof.is_string()) {
      std::filesystem::path p = prof.get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      cfg.profiles = load_profiles_file(p);
    } else {
      cfg.profiles = profiles_from_json(prof);
    }
  } catch (const ParseError& e) {
    throw ConfigError(std::string("profiles: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("profiles: ") + e.what());
  }

  cfg.gain_threshold = detail::get_or<double>(doc, "gain_threshold", kDefaultGainThreshold, top);
  cfg.vae_dop = detail::get_or<int>(doc, "vae_dop", 1, top);
  if (!cfg.profiles.is_candidate(cfg.vae_dop)) throw ConfigError(top + ": vae_dop is not a candidate");
  if (doc.contains("overheads")) {
    const auto& o = doc.at("overheads");
    cfg.overheads.scale_up = detail::get_or<double>(o, "scale_up", 0.001, "overheads");
    cfg.overheads.broadcast = detail::get_or<double>(o, "broadcast", 0.001, "overheads");
    if (cfg.overheads.scale_up < 0.0 || cfg.overheads.broadcast < 0.0) {
      throw ConfigError("overheads: must be non-negative");
    }
  }

  std::set<std::string> names;
  const auto& wls = detail::child(doc, "workloads", top);
  if (!wls.is_array() || wls.empty()) throw ConfigError(top + ": 'workloads' must be a non-empty array");
  for (std::size_t i = 0; i < wls.size(); ++i) {
    const std::string where = "workloads[" + std::to_string(i) + "]";
    const auto& w = wls[i];
    WorkloadEntry e;
    e.name = detail::get_or<std::string>(w, "name", "w" + std::to_string(i), where);
    if (!names.insert("w:" + e.name).second) throw ConfigError(where + ": duplicate name");
    e.spec.burst = detail::get_or<bool>(w, "burst", false, where);
    e.spec.arrival_rate = detail::get_or<double>(w, "arrival_rate", 0.0, where);
    e.spec.count = detail::get_or<int>(w, "count", 0, where);
    e.spec.denoise_steps = detail::get_or<int>(w, "steps", 30, where);
    e.spec.frames = detail::get_or<int>(w, "frames", 51, where);
    e.spec.proportions = detail::parse_mix(detail::child(w, "mix", where), cfg.profiles, where);
    try {
      validate(e.spec);
    } catch (const ValidationError& ex) {
      throw ConfigError(where + ": " + ex.what());
    }
    cfg.workloads.push_back(std::move(e));
  }

  const auto& pols = detail::child(doc, "policies", top);
  if (!pols.is_array() || pols.empty()) throw ConfigError(top + ": 'policies' must be a non-empty array");
  for (std::size_t i = 0; i < pols.size(); ++i) {
    const std::string where = "policies[" + std::to_string(i) + "]";
    const auto& p = pols[i];
    PolicySpec s;
    s.kind = detail::parse_policy_kind(detail::get_or<std::string>(p, "kind", "", where), where);
    s.dop = detail::get_or<int>(p, "dop", 2, where);
    s.decouple = detail::get_or<bool>(p, "decouple", s.kind == PolicyKind::kGreedy, where);
    s.promotion = detail::get_or<bool>(p, "promotion", true, where);
    s.name = detail::get_or<std::string>(p, "name", detail::get_or<std::string>(p, "kind", "", where), where);
    if ((s.kind == PolicyKind::kSdop || s.kind == PolicyKind::kSpci) && !cfg.profiles.is_candidate(s.dop)) {
      throw ConfigError(where + ": dop is not a candidate");
    }
    if (!names.insert("p:" + s.name).second) throw ConfigError(where + ": duplicate name");
    cfg.policies.push_back(std::move(s));
  }

  if (doc.contains("seeds")) {
    cfg.seeds = detail::get_or<std::vector<std::uint64_t>>(doc, "seeds", {}, top);
    if (cfg.seeds.empty()) throw ConfigError(top + ": 'seeds' is empty");
  }

  if (doc.contains("solver")) {
    const auto& s = doc.at("solver");
    cfg.solver.enabled = detail::get_or<bool>(s, "enabled", true, "solver");
    const auto model = detail::get_or<std::string>(s, "model", "batch", "solver");
    if (model == "batch") {
      cfg.solver.model = OccupancyKind::kBatch;
    } else if (model == "queue") {
      cfg.solver.model = OccupancyKind::kQueue;
    } else {
      throw ConfigError("solver: model must be 'batch' or 'queue'");
    }
    cfg.solver.include_vae = detail::get_or<bool>(s, "include_vae", true, "solver");
    cfg.solver.dops = detail::get_or<std::vector<Dop>>(s, "dops", {}, "solver");
    for (Dop d : cfg.solver.dops) {
      if (!cfg.profiles.is_candidate(d)) throw ConfigError("solver: dop " + std::to_string(d) + " not profiled");
    }
    cfg.solver.queue.stirling_cutoff =
        detail::get_or<int>(s, "stirling_cutoff", kDefaultStirlingCutoff, "solver");
    cfg.solver.queue.halve_waiting_only = detail::get_or<bool>(s, "halve_waiting_only", false, "solver");
  }

  std::filesystem::path out = detail::get_or<std::string>(doc, "output_dir", "results", top);
  cfg.output_dir = (out.is_relative() ? base_dir / out : out).lexically_normal();
  cfg.write_traces = detail::get_or<bool>(doc, "write_traces", false, top);

  // Every resolution must have a derivable B value before anything runs.
  try {
    (void)cfg.b_values();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("profiles: ") + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config ") + path.string() + ": " + e.what());
  }
  return parse_experiment(doc, path.parent_path().empty() ? "." : path.parent_path());
}

// Resolution shares as observed in a concrete arrival list, in profile order.
inline Mix observed_mix(const std::vector<ArrivalRecord>& arrivals, const ProfileTable& profiles) {
  Mix mix;
  for (const auto& r : profiles.resolutions()) {
    const auto n = std::count_if(arrivals.begin(), arrivals.end(),
                                 [&](const ArrivalRecord& a) { return a.resolution == r.name; });
    if (n > 0) mix.emplace_back(r.name, static_cast<double>(n) / arrivals.size());
  }
  return mix;
}

inline std::unique_ptr<Policy> make_policy(const PolicySpec& spec, const ClusterTopology& topo,
                                           const Mix& mix, const BValueTable& b_values) {
  std::vector<std::string> present;
  for (const auto& [res, x] : mix) {
    if (x > 0.0) present.push_back(res);
  }
  switch (spec.kind) {
    case PolicyKind::kGreedy:
      return std::make_unique<GreedyPolicy>(GreedyOptions{spec.promotion, spec.decouple}, spec.name);
    case PolicyKind::kSdop:
      return std::make_unique<StaticDopPolicy>(spec.dop, spec.decouple, spec.name);
    case PolicyKind::kSpci:
      return std::make_unique<ClusterPolicy>(spec.name, make_static_partition(topo, mix, spec.dop), false);
    case PolicyKind::kDpci:
      return std::make_unique<ClusterPolicy>(spec.name, make_dynamic_partition(topo, present, b_values),
                                             false);
    case PolicyKind::kDp:
      return std::make_unique<ClusterPolicy>(spec.name, make_dynamic_partition(topo, present, b_values),
                                             true);
  }
  throw ConfigError("unknown policy kind");
}

inline SimResult run_scenario(const ExperimentConfig& cfg, const std::vector<ArrivalRecord>& arrivals,
                              const Mix& mix, const PolicySpec& spec) {
  const auto b = cfg.b_values();
  auto policy = make_policy(spec, cfg.topology, mix, b);
  Simulation sim(cfg.topology, cfg.profiles, b, cfg.overheads, arrivals);
  return sim.run(*policy);
}

// Lower bound on cumulative occupancy for one workload; nullopt if the
// solver finds no feasible allocation.
inline std::optional<DpSolution> solve_bound(const ExperimentConfig& cfg, const Mix& mix, int count,
                                             int steps, double arrival_rate) {
  OccupancyModelParams model;
  model.kind = cfg.solver.model;
  model.batch_size = count;
  model.arrival_rate = arrival_rate;
  model.queue = cfg.solver.queue;
  const auto dops = cfg.solver.dops.empty() ? cfg.profiles.dop_candidates() : cfg.solver.dops;
  try {
    return solve_optimal(make_problem(cfg.topology, cfg.profiles, mix, dops, steps, model,
                                      cfg.solver.include_vae, cfg.vae_dop));
  } catch (const InfeasibleError&) {
    return std::nullopt;
  }
}

struct ScenarioOutcome {
  std::string scenario;
  std::string policy;
  std::uint64_t seed = 0;
  MetricsReport metrics;
  std::optional<double> optimum;
  std::string failure;  // empty when every request completed

  bool completed() const { return failure.empty(); }
};

struct RunFilter {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
};

inline std::string request_table_csv(const MetricsReport& m) {
  std::ostringstream os;
  os << "request_id,resolution,arrival,start,finish,latency,dop_history,gpu_seconds\n";
  for (const auto& r : m.rows) {
    os << r.request_id << ',' << r.resolution << ',' << format_double(r.arrival) << ','
       << format_double(r.start) << ',' << format_double(r.finish) << ','
       << format_double(r.latency) << ',' << r.dop_history << ',' << format_double(r.gpu_seconds)
       << '\n';
  }
  return os.str();
}

namespace detail {

// A policy that leaves requests unfinished yields a failed outcome rather
// than aborting the experiment.
inline ScenarioOutcome run_outcome(const ExperimentConfig& cfg, const std::vector<ArrivalRecord>& arrivals,
                                   const Mix& mix, const PolicySpec& spec, std::string scenario,
                                   std::uint64_t seed, std::optional<double> optimum,
                                   std::vector<TraceRecord>* trace = nullptr) {
  ScenarioOutcome out{std::move(scenario), spec.name, seed, {}, optimum, {}};
  try {
    auto result = run_scenario(cfg, arrivals, mix, spec);
    if (trace) *trace = std::move(result.trace);
    out.metrics = compute_metrics(result);
  } catch (const InvariantViolation& e) {
    out.failure = e.what();
  }
  return out;
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << content;
}

inline std::string plan_json(const DpSolution& sol, const Mix& mix) {
  nlohmann::json j;
  j["optimum_gpu_seconds"] = sol.optimum;
  auto& plan = j["plan"] = nlohmann::json::array();
  for (const auto& e : sol.plan) {
    plan.push_back({{"resolution", mix[e.type].first},
                    {"first_gpu", e.first_gpu},
                    {"gpu_count", e.gpu_count},
                    {"dop", e.dop},
                    {"instances", e.instances},
                    {"gpu_seconds", e.cost}});
  }
  return j.dump(2) + "\n";
}

}  // namespace detail

// Writes the per-request tables, summary.csv, normalized.csv and summary.txt.
inline void write_reports(const std::filesystem::path& dir, const std::vector<ScenarioOutcome>& runs) {
  std::filesystem::create_directories(dir);
  std::ostringstream summary, norm, text;
  summary << "scenario,policy,seed,avg_latency,p99_latency,cost,cost_over_optimum\n";
  norm << "scenario,seed,policy,avg_latency,p99_latency,cost\n";
  text << "scenario        seed  policy              avg_lat(s)   p99_lat(s)   cost(GPU*s)  x_opt\n";

  // Group by (scenario, seed) in first-seen order.
  std::vector<std::pair<std::string, std::uint64_t>> groups;
  for (const auto& r : runs) {
    const auto key = std::make_pair(r.scenario, r.seed);
    if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
  }
  for (const auto& [scenario, seed] : groups) {
    std::vector<std::pair<std::string, MetricsReport>> group;
    std::optional<double> optimum;
    bool bound_known = false;
    for (const auto& r : runs) {
      if (r.scenario != scenario || r.seed != seed) continue;
      optimum = r.optimum;
      bound_known = true;
      if (!r.completed()) {
        summary << scenario << ',' << r.policy << ',' << seed << ",,,,failed\n";
        char line[256];
        std::snprintf(line, sizeof(line), "%-15s %4llu  %-18s failed: %s\n", scenario.c_str(),
                      static_cast<unsigned long long>(seed), r.policy.c_str(), r.failure.c_str());
        text << line;
        continue;
      }
      group.emplace_back(r.policy, r.metrics);
      const std::string ratio = r.optimum ? format_double(r.metrics.monetary_cost / *r.optimum) : "NA";
      summary << scenario << ',' << r.policy << ',' << seed << ',' << format_double(r.metrics.avg_latency)
              << ',' << format_double(r.metrics.p99_latency) << ','
              << format_double(r.metrics.monetary_cost) << ',' << ratio << '\n';
      detail::write_file(dir / ("requests_" + scenario + "_" + r.policy + "_s" + std::to_string(seed) + ".csv"),
                         request_table_csv(r.metrics));
      char x_opt[32] = "NA";
      if (r.optimum) std::snprintf(x_opt, sizeof(x_opt), "%.3f", r.metrics.monetary_cost / *r.optimum);
      char line[256];
      std::snprintf(line, sizeof(line), "%-15s %4llu  %-18s %11.3f  %11.3f  %11.3f  %s\n",
                    scenario.c_str(), static_cast<unsigned long long>(seed), r.policy.c_str(),
                    r.metrics.avg_latency, r.metrics.p99_latency, r.metrics.monetary_cost, x_opt);
      text << line;
    }
    if (bound_known) {
      summary << scenario << ",optimum," << seed << ",,,"
              << (optimum ? format_double(*optimum) : "unavailable") << ','
              << (optimum ? "1" : "NA") << '\n';
      text << "  theoretical optimum: "
           << (optimum ? format_double(*optimum) + " GPU*s" : std::string("unavailable")) << "\n";
    }
    if (group.empty()) continue;
    for (const auto& n : normalize(group)) {
      norm << scenario << ',' << seed << ',' << n.system << ',' << format_double(n.avg_latency) << ','
           << format_double(n.p99_latency) << ',' << format_double(n.cost) << '\n';
    }
  }
  detail::write_file(dir / "summary.csv", summary.str());
  detail::write_file(dir / "normalized.csv", norm.str());
  detail::write_file(dir / "summary.txt", text.str());
}

// Runs every (workload, policy, seed) combination and writes the reports.
inline std::vector<ScenarioOutcome> run_experiment(const ExperimentConfig& cfg, const RunFilter& filter = {}) {
  std::vector<PolicySpec> policies;
  for (const auto& p : cfg.policies) {
    if (!filter.policy || p.name == *filter.policy) policies.push_back(p);
  }
  if (policies.empty()) throw ConfigError("no policy matches the filter");
  const auto seeds = filter.seed ? std::vector<std::uint64_t>{*filter.seed} : cfg.seeds;

  std::filesystem::create_directories(cfg.output_dir);
  std::vector<ScenarioOutcome> runs;
  for (const auto& w : cfg.workloads) {
    for (auto seed : seeds) {
      WorkloadSpec spec = w.spec;
      spec.seed = seed;
      const auto arrivals = generate(spec);
      {
        std::ostringstream os;
        write_arrivals(os, arrivals);
        detail::write_file(cfg.output_dir / ("workload_" + w.name + "_s" + std::to_string(seed) + ".jsonl"),
                           os.str());
      }
      std::optional<double> optimum;
      if (cfg.solver.enabled) {
        const double lambda = spec.burst ? 0.0 : spec.arrival_rate;
        if (auto sol = solve_bound(cfg, spec.proportions, spec.count, spec.denoise_steps, lambda)) {
          optimum = sol->optimum;
          detail::write_file(cfg.output_dir / ("optimum_" + w.name + "_s" + std::to_string(seed) + ".json"),
                             detail::plan_json(*sol, spec.proportions));
        }
      }
      for (const auto& p : policies) {
        std::vector<TraceRecord> trace;
        auto outcome = detail::run_outcome(cfg, arrivals, spec.proportions, p, w.name, seed, optimum,
                                           cfg.write_traces ? &trace : nullptr);
        if (cfg.write_traces && outcome.completed()) {
          std::ostringstream os;
          write_trace(os, trace);
          detail::write_file(cfg.output_dir / ("trace_" + w.name + "_" + p.name + "_s" +
                                               std::to_string(seed) + ".jsonl"),
                             os.str());
        }
        runs.push_back(std::move(outcome));
      }
    }
  }
  write_reports(cfg.output_dir, runs);
  return runs;
}

}  // namespace ddit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "ddit/error.hpp"
#include "ddit/gpu_pool.hpp"
#include "ddit/profile.hpp"

namespace ddit {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Batch model: S pending requests, the x_j share spread evenly over alpha
// instances each taking d seconds. Busy time of one GPU of the segment.
inline double occupy_batch(int batch_size, double fraction, int alpha, double duration) {
  if (alpha < 1 || batch_size < 1 || fraction < 0.0 || fraction > 1.0 || !(duration > 0.0)) {
    throw PreconditionError("occupy_batch: invalid arguments");
  }
  // S * x counts requests; snap values that are integral up to rounding so
  // that 60 * 0.3333333333333334 charges 20 requests, not 21.
  double load = batch_size * fraction;
  const double nearest = std::round(load);
  if (std::abs(load - nearest) <= 1e-9 * std::max(1.0, load)) load = nearest;
  return std::ceil(load / alpha) * duration;
}

// Mean time in an M/D/1 system with service time d.
inline double occupy_md1(double arrival_rate, double duration) {
  if (!(duration > 0.0) || arrival_rate < 0.0) throw PreconditionError("occupy_md1: invalid arguments");
  const double mu = 1.0 / duration;
  const double rho = arrival_rate / mu;
  if (rho >= 1.0) throw SaturationError("occupy_md1: utilization " + std::to_string(rho) + " >= 1");
  return 1.0 / mu + rho / (2.0 * mu * (1.0 - rho));
}

inline double exact_factorial(int n) {
  if (n < 0) throw PreconditionError("factorial of a negative number");
  double f = 1.0;
  for (int k = 2; k <= n; ++k) f *= k;
  return f;
}

// sqrt(2 pi n) (n / e)^n
inline double stirling_approximation(int n) {
  if (n < 1) throw PreconditionError("stirling_approximation: n must be >= 1");
  const double nn = n;
  return std::sqrt(2.0 * std::numbers::pi * nn) * std::pow(nn / std::numbers::e, nn);
}

inline constexpr int kDefaultStirlingCutoff = 20;

// Exact below `cutoff`, Stirling at and above it.
inline double stirling_factorial(int n, int cutoff = kDefaultStirlingCutoff) {
  if (n < 0) throw PreconditionError("stirling_factorial: n must be >= 0");
  if (n < cutoff || n == 0) return exact_factorial(n);
  return stirling_approximation(n);
}

struct QueueOptions {
  int stirling_cutoff = kDefaultStirlingCutoff;
  // false: halve the whole M/M/c time in system, as in the original solver.
  // true: halve only the queueing delay (the usual M/D/c approximation).
  bool halve_waiting_only = false;
};

// Probability of an empty M/M/c system with offered load r and c servers.
inline double mmc_empty_probability(double offered_load, int servers, int cutoff = kDefaultStirlingCutoff) {
  const double rho = offered_load / servers;
  if (rho >= 1.0) throw SaturationError("mmc_empty_probability: utilization >= 1");
  double sum = 0.0;
  for (int s = 0; s < servers; ++s) sum += std::pow(offered_load, s) / stirling_factorial(s, cutoff);
  sum += std::pow(offered_load, servers) / (stirling_factorial(servers, cutoff) * (1.0 - rho));
  return 1.0 / sum;
}

// M/D/c time in system approximated as half the M/M/c one.
inline double occupy_mdc(double arrival_rate, double duration, int servers, QueueOptions opts = {}) {
  if (servers < 2) throw PreconditionError("occupy_mdc: needs at least two servers");
  if (!(duration > 0.0) || arrival_rate < 0.0) throw PreconditionError("occupy_mdc: invalid arguments");
  const double mu = 1.0 / duration;
  const double rho = arrival_rate / (servers * mu);
  if (rho >= 1.0) throw SaturationError("occupy_mdc: utilization " + std::to_string(rho) + " >= 1");
  const double r = arrival_rate / mu;
  const double p0 = mmc_empty_probability(r, servers, opts.stirling_cutoff);
  const double wait = std::pow(r, servers) /
                      (stirling_factorial(servers, opts.stirling_cutoff) * (servers * mu) *
                       (1.0 - rho) * (1.0 - rho)) *
                      p0;
  if (opts.halve_waiting_only) return 1.0 / mu + wait / 2.0;
  return (1.0 / mu + wait) / 2.0;
}

enum class OccupancyKind { kBatch, kQueue };

struct OccupancyModelParams {
  OccupancyKind kind = OccupancyKind::kBatch;
  int batch_size = 1;         // batch model: S
  double arrival_rate = 0.0;  // queue model: total lambda
  QueueOptions queue;
};

// Per-GPU occupancy of one type's segment; +inf when the queue saturates.
inline double occupy(const OccupancyModelParams& m, double fraction, double duration, int alpha) {
  if (m.kind == OccupancyKind::kBatch) return occupy_batch(m.batch_size, fraction, alpha, duration);
  try {
    const double lx = m.arrival_rate * fraction;
    if (alpha == 1) return occupy_md1(lx, duration);
    return occupy_mdc(lx, duration, alpha, m.queue);
  } catch (const SaturationError&) {
    return kInf;
  }
}

struct PlanEntry {
  std::size_t type = 0;
  GpuId first_gpu = 0;
  int gpu_count = 0;  // k
  Dop dop = 1;        // p
  int instances = 0;  // alpha
  double cost = 0.0;  // k * Occupy
};

struct DpChoice {
  int k = 0;
  Dop p = 0;
  int alpha = 0;
};

struct DpTable {
  std::vector<std::vector<double>> dp;        // [M+1][N+1]
  std::vector<std::vector<DpChoice>> choice;  // back-pointers
};

struct DpSolution {
  double optimum = kInf;
  std::vector<PlanEntry> plan;  // in type order
  DpTable table;
};

struct SolverProblem {
  ClusterTopology topology;
  std::vector<std::string> types;
  std::vector<double> fractions;               // x_j
  std::vector<Dop> dops;                       // ps
  std::vector<std::vector<double>> durations;  // [type][index into dops]
  OccupancyModelParams model;
};

// Fills dp[i][j], the least cumulative occupancy of giving GPUs 1..i to types
// 1..j, where type j takes the contiguous segment i-k+1..i at one DoP.
inline DpSolution solve_optimal(const SolverProblem& prob) {
  prob.topology.validate();
  const int m = prob.topology.total();
  const std::size_t n = prob.types.size();
  if (n == 0) throw PreconditionError("solve_optimal: no request types");
  if (prob.fractions.size() != n || prob.durations.size() != n) {
    throw PreconditionError("solve_optimal: fractions/durations do not match types");
  }
  for (const auto& row : prob.durations) {
    if (row.size() != prob.dops.size()) throw PreconditionError("solve_optimal: duration row size");
  }

  DpSolution sol;
  auto& dp = sol.table.dp;
  auto& choice = sol.table.choice;
  dp.assign(m + 1, std::vector<double>(n + 1, kInf));
  choice.assign(m + 1, std::vector<DpChoice>(n + 1));
  for (int i = 0; i <= m; ++i) dp[i][0] = 0.0;

  for (int i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      for (int k = 1; k <= i; ++k) {
        if (dp[i - k][j - 1] == kInf) continue;
        for (std::size_t pi = 0; pi < prob.dops.size(); ++pi) {
          const Dop p = prob.dops[pi];
          const int alpha = bandwidth_aware_partition(prob.topology, i - k, k, p);
          if (alpha == 0) continue;
          const double c = occupy(prob.model, prob.fractions[j - 1], prob.durations[j - 1][pi], alpha);
          if (c == kInf) continue;
          const double cand = dp[i - k][j - 1] + k * c;
          if (cand < dp[i][j]) {
            dp[i][j] = cand;
            choice[i][j] = {k, p, alpha};
          }
        }
      }
    }
  }

  if (dp[m][n] == kInf) {
    std::size_t j = 1;
    while (j < n && dp[m][j] != kInf) ++j;
    throw InfeasibleError("solve_optimal: request type " + prob.types[j - 1] +
                          " cannot be scheduled on this cluster");
  }
  sol.optimum = dp[m][n];
  int i = m;
  for (std::size_t j = n; j >= 1; --j) {
    const auto ch = choice[i][j];
    std::size_t pi = 0;
    while (prob.dops[pi] != ch.p) ++pi;
    const double c = occupy(prob.model, prob.fractions[j - 1], prob.durations[j - 1][pi], ch.alpha);
    sol.plan.push_back({j - 1, i - ch.k, ch.k, ch.p, ch.alpha, ch.k * c});
    i -= ch.k;
  }
  std::reverse(sol.plan.begin(), sol.plan.end());
  return sol;
}

// Re-sums a plan in type order.
inline double evaluate_plan(const SolverProblem& prob, const std::vector<PlanEntry>& plan) {
  double total = 0.0;
  for (const auto& e : plan) {
    if (bandwidth_aware_partition(prob.topology, e.first_gpu, e.gpu_count, e.dop) != e.instances) {
      throw InvariantViolation("evaluate_plan: instance count does not match the segment");
    }
    std::size_t pi = 0;
    while (prob.dops[pi] != e.dop) ++pi;
    total += e.gpu_count * occupy(prob.model, prob.fractions[e.type], prob.durations[e.type][pi],
                                  e.instances);
  }
  return total;
}

// Builds the problem from a profile: d(p, j) = steps * dit(j, p) [+ vae(j)].
inline SolverProblem make_problem(const ClusterTopology& topo, const ProfileTable& profiles,
                                  const std::vector<std::pair<std::string, double>>& mix,
                                  const std::vector<Dop>& dops, int steps,
                                  const OccupancyModelParams& model, bool include_vae = true,
                                  Dop vae_dop = 1) {
  SolverProblem prob;
  prob.topology = topo;
  prob.dops = dops;
  prob.model = model;
  for (const auto& [res, x] : mix) {
    prob.types.push_back(res);
    prob.fractions.push_back(x);
    std::vector<double> row;
    for (Dop p : dops) {
      row.push_back(include_vae ? estimate_execution_time(profiles, res, p, steps, vae_dop)
                                : steps * profiles.dit_step_time(res, p));
    }
    prob.durations.push_back(std::move(row));
  }
  return prob;
}

}  // namespace ddit

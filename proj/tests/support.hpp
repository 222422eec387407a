#pragma once

// Shared fixtures and independent oracles for the unit and acceptance tests.
// The oracles deliberately avoid the library's own helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ddit/ddit.hpp"

namespace ddit::testing {

inline ArrivalRecord arrival(RequestId id, double t, std::string res, int steps = 30) {
  return {id, t, std::move(res), steps};
}

inline std::vector<ArrivalRecord> burst(const std::vector<std::string>& resolutions, int steps = 30) {
  std::vector<ArrivalRecord> out;
  for (std::size_t i = 0; i < resolutions.size(); ++i) {
    out.push_back(arrival(static_cast<RequestId>(i), 0.0, resolutions[i], steps));
  }
  return out;
}

inline Mix uniform_mix() {
  return {{"144p", 1.0 / 3.0}, {"240p", 1.0 / 3.0}, {"360p", 1.0 / 3.0}};
}

// Dyadic overheads keep simulated clocks exact.
inline OverheadModel dyadic_overheads() { return {0x1.0p-10, 0x1.0p-10}; }

inline SimResult simulate(Policy& policy, const std::vector<ArrivalRecord>& arrivals,
                          const ProfileTable& profiles, ClusterTopology topo = {1, 8},
                          OverheadModel overheads = {}) {
  Simulation sim(topo, profiles, derive_b_values(profiles), overheads, arrivals);
  return sim.run(policy);
}

inline std::vector<ArrivalRecord> mixed_workload(std::uint64_t seed, bool burst_mode, int count = 60,
                                                 double rate = 0.5) {
  WorkloadSpec spec;
  spec.proportions = uniform_mix();
  spec.count = count;
  spec.burst = burst_mode;
  spec.arrival_rate = rate;
  spec.seed = seed;
  return generate(spec);
}

// -- solver oracle --

// Instances of p GPUs that fit in [first, first + k), counted GPU by GPU.
inline int oracle_instances(const ClusterTopology& topo, int first, int k, int p) {
  std::map<int, int> per_node;
  for (int g = first; g < first + k; ++g) ++per_node[g / topo.gpus_per_node];
  int alpha = 0;
  for (const auto& [node, n] : per_node) alpha += n / p;
  return alpha;
}

inline double oracle_batch(int s, double x, int alpha, double d) {
  // ceil(S x / alpha) written out with integer arithmetic where possible.
  // Request counts are integers; S x within rounding of one is that integer.
  double load = s * x;
  const long long whole = std::llround(load);
  if (std::fabs(load - static_cast<double>(whole)) < 1e-9 * (load > 1.0 ? load : 1.0)) load = static_cast<double>(whole);
  double per = std::floor(load / alpha);
  if (per * alpha < load) per += 1.0;
  return per * d;
}

// Exhaustive search over layouts the recurrence can express: types in
// order, each on a contiguous non-empty segment, segments back to back and
// ending at the last GPU, any GPUs before the first segment left unused.
// Sums are accumulated in type order so the result is comparable exactly.
inline double brute_force_batch(const SolverProblem& prob) {
  const int m = prob.topology.total();
  const int n = static_cast<int>(prob.types.size());
  double best = kInf;
  auto rec = [&](auto&& self, int j, int first, double acc) -> void {
    if (j == n) {
      if (first == m) best = std::min(best, acc);
      return;
    }
    for (int kk = 1; first + kk <= m - (n - j - 1); ++kk) {
      for (std::size_t q = 0; q < prob.dops.size(); ++q) {
        const int alpha = oracle_instances(prob.topology, first, kk, prob.dops[q]);
        if (alpha == 0) continue;
        const double c = oracle_batch(prob.model.batch_size, prob.fractions[j], alpha,
                                      prob.durations[j][q]);
        self(self, j + 1, first + kk, acc + kk * c);
      }
    }
  };
  for (int start = 0; start + n <= m; ++start) rec(rec, 0, start, 0.0);
  return best;
}

// Single-node oracle that ignores layout: any GPU counts k_j with
// sum k_j <= M, alpha = floor(k_j / p).
inline double brute_force_counts(const SolverProblem& prob) {
  const int m = prob.topology.total();
  const int n = static_cast<int>(prob.types.size());
  double best = kInf;
  auto rec = [&](auto&& self, int j, int used, double acc) -> void {
    if (j == n) {
      best = std::min(best, acc);
      return;
    }
    for (int kk = 1; used + kk <= m; ++kk) {
      for (std::size_t q = 0; q < prob.dops.size(); ++q) {
        const int alpha = kk / prob.dops[q];
        if (alpha == 0) continue;
        self(self, j + 1, used + kk,
             acc + kk * oracle_batch(prob.model.batch_size, prob.fractions[j], alpha, prob.durations[j][q]));
      }
    }
  };
  rec(rec, 0, 0, 0.0);
  return best;
}

// Random batch-model instance: M <= 8, N <= 3, |ps| <= 3, dyadic durations.
inline SolverProblem random_batch_problem(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<unsigned>(hi - lo + 1)); };
  static const std::vector<ClusterTopology> topos = {{1, 1}, {1, 2}, {1, 4}, {1, 8}, {2, 1}, {2, 2},
                                                     {2, 4}, {3, 1}, {3, 2}, {4, 1}, {4, 2}, {8, 1}};
  SolverProblem prob;
  prob.topology = topos[rng() % topos.size()];
  const int n = pick(1, std::min(3, prob.topology.total()));
  static const std::vector<std::vector<Dop>> dop_sets = {{1}, {1, 2}, {1, 4}, {1, 2, 4}, {1, 2, 8}, {1, 4, 8}};
  // p = 1 is always present so every instance is feasible.
  prob.dops = dop_sets[rng() % dop_sets.size()];
  std::vector<int> weights(n);
  int wsum = 0;
  for (auto& w : weights) wsum += (w = pick(1, 4));
  for (int j = 0; j < n; ++j) {
    prob.types.push_back("t" + std::to_string(j));
    prob.fractions.push_back(static_cast<double>(weights[j]) / wsum);
    std::vector<double> row;
    double d = pick(8, 64) / 4.0;
    for (std::size_t q = 0; q < prob.dops.size(); ++q) {
      row.push_back(d);
      d = std::max(0.25, d * pick(2, 4) / 4.0);
    }
    prob.durations.push_back(std::move(row));
  }
  prob.model.kind = OccupancyKind::kBatch;
  prob.model.batch_size = pick(1, 24);
  return prob;
}

// -- queue oracle --

// Mean time in system of a FIFO single server with deterministic service d
// and Poisson arrivals, by the Lindley recursion over `arrivals` customers.
inline double lindley_md1(double lambda, double d, int arrivals, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(lambda);
  double wait = 0.0, total = 0.0;
  for (int i = 0; i < arrivals; ++i) {
    total += wait + d;
    wait = std::max(0.0, wait + d - gap(rng));
  }
  return total / arrivals;
}

// -- allocator shadow model --

// Rebuilds the expected free set from the live blocks and checks the pool's
// bitmap, alignment and coalescing against it. Returns an empty string when
// consistent.
inline std::string check_pool(const GpuPool& pool, const std::map<std::uint64_t, AllocationHandle>& live) {
  const auto& topo = pool.topology();
  std::vector<int> owner(topo.total(), 0);
  for (const auto& [id, h] : live) {
    const int size = h.size();
    if (!is_power_of_two(size)) return "handle size not a power of two";
    const int local = h.front() % topo.gpus_per_node;
    if (local % size != 0) return "handle not size-aligned";
    for (int i = 0; i < size; ++i) {
      const GpuId g = h.gpu_ids[i];
      if (g != h.front() + i) return "handle not contiguous";
      if (topo.node_of(g) != topo.node_of(h.front())) return "handle spans nodes";
      if (owner[g]++) return "GPU " + std::to_string(g) + " in two handles";
    }
  }
  int free_n = 0;
  for (GpuId g = 0; g < topo.total(); ++g) {
    const bool expect_free = owner[g] == 0;
    if (pool.is_free(g) != expect_free) return "bitmap disagrees at GPU " + std::to_string(g);
    free_n += expect_free;
  }
  if (free_n + static_cast<int>(std::count(owner.begin(), owner.end(), 1)) != topo.total()) {
    return "conservation violated";
  }
  // Coalescing: no two free buddies of the same order may coexist.
  const auto dump = pool.dump();
  for (const auto& node : dump.at("buddy_lists")) {
    std::map<int, std::set<int>> lists;
    for (const auto& [order_s, starts] : node.at("free_blocks").items()) {
      const int order = std::stoi(order_s);
      for (int s : starts) {
        lists[order].insert(s);
        if ((s % topo.gpus_per_node) % (1 << order) != 0) return "free block misaligned";
        for (int g = s; g < s + (1 << order); ++g) {
          if (owner[g]) return "free block overlaps a live handle";
        }
      }
    }
    for (const auto& [order, starts] : lists) {
      for (int s : starts) {
        if (starts.count(s ^ (1 << order)) && (1 << order) < topo.gpus_per_node) {
          return "uncoalesced buddies at order " + std::to_string(order);
        }
      }
    }
  }
  if (auto v = pool.check_invariants()) return "pool self-check: " + *v;
  return {};
}

}  // namespace ddit::testing

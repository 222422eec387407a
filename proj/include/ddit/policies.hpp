#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ddit/error.hpp"
#include "ddit/gpu_pool.hpp"
#include "ddit/profile.hpp"
#include "ddit/simulator.hpp"

namespace ddit {

// Accumulates the extra DiT time spent below the optimal DoP since the last
// assignment event, then moves the reference step forward.
inline double update_starvation(StarvationState& s, int cur_step, double cur_step_time,
                                double opt_step_time) {
  if (cur_step < s.last_step) throw PreconditionError("update_starvation: step went backwards");
  if (cur_step_time < opt_step_time) {
    throw PreconditionError("update_starvation: current step faster than optimal");
  }
  s.starvation += (cur_step - s.last_step) * (cur_step_time - opt_step_time);
  s.last_step = cur_step;
  return s.starvation;
}

// Hungry requests awaiting promotion.
class PromoteTable {
 public:
  void add(RequestId id) { ids_.insert(id); }
  void remove(RequestId id) { ids_.erase(id); }
  bool contains(RequestId id) const { return ids_.count(id) != 0; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::set<RequestId>& ids() const { return ids_; }

  // Descending starvation; earlier arrival wins ties, then lower id.
  std::vector<RequestId> ordered(Simulation& sim) const {
    std::vector<RequestId> out(ids_.begin(), ids_.end());
    std::stable_sort(out.begin(), out.end(), [&](RequestId a, RequestId b) {
      const auto& ra = sim.request(a);
      const auto& rb = sim.request(b);
      if (ra.starv.starvation != rb.starv.starvation) {
        return ra.starv.starvation > rb.starv.starvation;
      }
      if (ra.arrival_time != rb.arrival_time) return ra.arrival_time < rb.arrival_time;
      return a < b;
    });
    return out;
  }

 private:
  std::set<RequestId> ids_;
};

struct GreedyOptions {
  bool promotion = true;
  bool decouple = true;
};

// Step-granular greedy policy: start every request with as many GPUs as are
// free up to its B value, then top hungry requests up as GPUs are released,
// most-starved first.
class GreedyPolicy : public Policy {
 public:
  explicit GreedyPolicy(GreedyOptions opts = {}, std::string name = "greedy")
      : opts_(opts), name_(std::move(name)) {}

  std::string name() const override { return name_; }

  void attach(Simulation& sim) override {
    const auto& cands = sim.profiles().dop_candidates();
    for (const auto& [res, b] : sim.b_values().b) {
      if (std::find(cands.begin(), cands.end(), b) == cands.end()) {
        throw ConfigError("greedy: B value of " + res + " is not a dop candidate");
      }
    }
  }

  void on_arrival(Simulation& sim, RequestId) override { schedule_waiting(sim); }

  void on_gpus_released(Simulation& sim) override {
    if (opts_.promotion && !table_.empty()) promote(sim);
    schedule_waiting(sim);
  }

  std::vector<GpuId> on_dit_complete(Simulation& sim, RequestId id) override {
    table_.remove(id);
    auto& st = sim.request(id);
    auto& h = handles_.at(id);
    int keep = static_cast<int>(st.gpus.size());
    if (opts_.decouple) keep = std::min(keep, sim.b_values().vae_dop);
    if (keep != h.size()) {
      auto [kept, released] = sim.pool().shrink(h, st.gpus.front(), keep);
      h = std::move(kept);
    }
    return h.gpu_ids;
  }

  void on_finish(Simulation& sim, RequestId id) override {
    sim.pool().release(handles_.at(id));
    handles_.erase(id);
  }

  const PromoteTable& promote_table() const { return table_; }

 private:
  void schedule_waiting(Simulation& sim) {
    const auto& cands = sim.profiles().dop_candidates();
    const std::vector<RequestId> queue = sim.waiting();
    for (RequestId id : queue) {
      auto& st = sim.request(id);
      const Dop b = sim.b_of(st);
      auto h = sim.pool().try_best_alloc(b, {}, cands);
      if (h.empty()) continue;
      const bool hungry = opts_.promotion && h.size() < b;
      auto gpus = h.gpu_ids;
      handles_[id] = std::move(h);
      sim.start(id, std::move(gpus), hungry);
      if (hungry) {
        st.starv = {};
        table_.add(id);
      }
    }
  }

  void promote(Simulation& sim) {
    const auto& profiles = sim.profiles();
    for (RequestId id : table_.ids()) {
      auto& st = sim.request(id);
      const double cur = profiles.dit_step_time(st.resolution, st.dop_now);
      const double opt = profiles.dit_step_time(st.resolution, sim.b_of(st));
      update_starvation(st.starv, st.cur_step, std::max(cur, opt), opt);
    }
    const auto& cands = profiles.dop_candidates();
    for (RequestId id : table_.ordered(sim)) {
      auto& st = sim.request(id);
      const Dop b = sim.b_of(st);
      auto& held = handles_.at(id);
      auto grown = sim.pool().try_best_alloc(b, held, cands);
      if (grown.id == held.id) continue;
      held = std::move(grown);
      const bool still_hungry = held.size() < b;
      sim.grant(id, held.gpu_ids, still_hungry);
      if (!still_hungry) table_.remove(id);
    }
  }

  GreedyOptions opts_;
  std::string name_;
  std::map<RequestId, AllocationHandle> handles_;
  PromoteTable table_;
};

// Every request runs at a fixed DoP, FCFS, for its whole lifetime.
class StaticDopPolicy : public Policy {
 public:
  StaticDopPolicy(Dop dop, bool decouple = false, std::string name = "")
      : dop_(dop), decouple_(decouple),
        name_(name.empty() ? "sdop" + std::to_string(dop) + (decouple ? "+decouple" : "")
                           : std::move(name)) {}

  std::string name() const override { return name_; }

  void attach(Simulation& sim) override {
    if (!sim.profiles().is_candidate(dop_)) throw ConfigError(name_ + ": dop is not a candidate");
    if (dop_ > sim.topology().gpus_per_node) {
      throw ConfigError(name_ + ": dop exceeds GPUs per node");
    }
  }

  void on_arrival(Simulation& sim, RequestId) override { schedule(sim); }
  void on_gpus_released(Simulation& sim) override { schedule(sim); }

  std::vector<GpuId> on_dit_complete(Simulation& sim, RequestId id) override {
    auto& h = handles_.at(id);
    if (decouple_) {
      const int keep = std::min(h.size(), sim.b_values().vae_dop);
      if (keep != h.size()) h = sim.pool().shrink(h, keep).first;
    }
    return h.gpu_ids;
  }

  void on_finish(Simulation& sim, RequestId id) override {
    sim.pool().release(handles_.at(id));
    handles_.erase(id);
  }

 private:
  void schedule(Simulation& sim) {
    while (!sim.waiting().empty()) {
      const RequestId head = sim.waiting().front();
      auto h = sim.pool().allocate(dop_);
      if (!h) break;
      auto gpus = h->gpu_ids;
      handles_[head] = std::move(*h);
      sim.start(head, std::move(gpus), false);
    }
  }

  Dop dop_;
  bool decouple_;
  std::string name_;
  std::map<RequestId, AllocationHandle> handles_;
};

struct EngineUnit {
  std::vector<GpuId> gpus;
  std::size_t cluster = 0;
};

struct Cluster {
  std::string resolution;
  Dop dop = 1;
  std::vector<GpuId> gpus;         // every GPU owned, including idle leftovers
  std::vector<std::size_t> units;  // indices into ClusterPlan::units
};

// Static GPU partition into per-resolution clusters of fixed engine units.
struct ClusterPlan {
  std::vector<Cluster> clusters;
  std::vector<EngineUnit> units;

  const Cluster* find(std::string_view res) const {
    for (const auto& c : clusters) {
      if (c.resolution == res) return &c;
    }
    return nullptr;
  }

  // Sub-pools disjoint and covering [0, total).
  void validate(const ClusterTopology& topo) const {
    std::vector<int> seen(topo.total(), 0);
    for (const auto& c : clusters) {
      for (GpuId g : c.gpus) {
        if (g < 0 || g >= topo.total()) throw ValidationError("cluster plan: GPU out of range");
        if (seen[g]++) throw ValidationError("cluster plan: GPU in two clusters");
      }
    }
    for (int g = 0; g < topo.total(); ++g) {
      if (!seen[g]) throw ValidationError("cluster plan: GPU " + std::to_string(g) + " unassigned");
    }
    for (const auto& u : units) {
      const auto& owner = clusters.at(u.cluster).gpus;
      for (GpuId g : u.gpus) {
        if (std::find(owner.begin(), owner.end(), g) == owner.end()) {
          throw ValidationError("cluster plan: engine unit outside its cluster");
        }
        if (topo.node_of(g) != topo.node_of(u.gpus.front())) {
          throw ValidationError("cluster plan: engine unit spans nodes");
        }
      }
    }
  }
};

namespace detail {

inline std::vector<int> largest_remainder(int total, const std::vector<double>& weights) {
  std::vector<int> out(weights.size());
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = total * weights[i];
    out[i] = static_cast<int>(std::floor(exact + 1e-12));
    assigned += out[i];
    rema.emplace_back(exact - out[i], i);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && !rema.empty(); ++k, ++assigned) {
    ++out[rema[k % rema.size()].second];
  }
  return out;
}

}  // namespace detail

// Static partition: cluster sizes proportional to the mix (largest
// remainder), contiguous GPU ranges in mix order, one fixed DoP everywhere.
inline ClusterPlan make_static_partition(const ClusterTopology& topo,
                                         const std::vector<std::pair<std::string, double>>& mix,
                                         Dop dop) {
  topo.validate();
  if (!is_power_of_two(dop) || dop > topo.gpus_per_node) {
    throw ConfigError("static partition: invalid cluster DoP " + std::to_string(dop));
  }
  std::vector<double> w;
  for (const auto& m : mix) w.push_back(m.second);
  const auto sizes = detail::largest_remainder(topo.total(), w);
  ClusterPlan plan;
  GpuId next = 0;
  for (std::size_t c = 0; c < mix.size(); ++c) {
    Cluster cl{mix[c].first, dop, {}, {}};
    const GpuId end = next + sizes[c];
    for (GpuId g = next; g < end; ++g) cl.gpus.push_back(g);
    GpuId g = next;
    while (g + dop <= end) {
      if (topo.node_of(g) != topo.node_of(g + dop - 1)) {
        g = (topo.node_of(g) + 1) * topo.gpus_per_node;
        continue;
      }
      EngineUnit u{{}, c};
      for (int k = 0; k < dop; ++k) u.gpus.push_back(g + k);
      cl.units.push_back(plan.units.size());
      plan.units.push_back(std::move(u));
      g += dop;
    }
    next = end;
    plan.clusters.push_back(std::move(cl));
  }
  plan.validate(topo);
  return plan;
}

// Dynamic partition: each resolution's cluster runs at its B value and every
// cluster gets the same number of engine units, as many as fit. Units are
// packed first-fit in descending DoP onto aligned slots; GPUs left over join
// the cluster with the smallest DoP as idle members.
inline ClusterPlan make_dynamic_partition(const ClusterTopology& topo,
                                          const std::vector<std::string>& resolutions,
                                          const BValueTable& b_values) {
  topo.validate();
  if (resolutions.empty()) throw ConfigError("dynamic partition: no resolutions");
  int per_round = 0;
  for (const auto& r : resolutions) {
    const Dop b = b_values.at(r);
    if (b > topo.gpus_per_node) throw ConfigError("dynamic partition: B exceeds node size");
    per_round += b;
  }
  std::vector<std::size_t> order(resolutions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return b_values.at(resolutions[a]) > b_values.at(resolutions[b]);
  });

  for (int u = topo.total() / per_round; u >= 1; --u) {
    std::vector<bool> used(topo.total(), false);
    ClusterPlan plan;
    for (const auto& r : resolutions) plan.clusters.push_back({r, b_values.at(r), {}, {}});
    bool ok = true;
    for (std::size_t idx : order) {
      const Dop b = plan.clusters[idx].dop;
      for (int k = 0; k < u && ok; ++k) {
        bool placed = false;
        for (GpuId s = 0; s + b <= topo.total() && !placed; s += b) {
          if (std::any_of(used.begin() + s, used.begin() + s + b, [](bool x) { return x; })) continue;
          EngineUnit unit{{}, idx};
          for (int g = 0; g < b; ++g) {
            used[s + g] = true;
            unit.gpus.push_back(s + g);
            plan.clusters[idx].gpus.push_back(s + g);
          }
          plan.clusters[idx].units.push_back(plan.units.size());
          plan.units.push_back(std::move(unit));
          placed = true;
        }
        ok = placed;
      }
    }
    if (!ok) continue;
    std::size_t smallest = order.back();
    for (GpuId g = 0; g < topo.total(); ++g) {
      if (!used[g]) plan.clusters[smallest].gpus.push_back(g);
    }
    for (auto& c : plan.clusters) std::sort(c.gpus.begin(), c.gpus.end());
    plan.validate(topo);
    return plan;
  }
  throw ConfigError("dynamic partition: cluster too small for one engine unit per resolution");
}

// Request-granular policy over a fixed cluster plan. Without downgrade a
// request only ever runs in its own cluster; with downgrade it may take a free
// unit of a cluster with a smaller DoP when its own cluster is full.
class ClusterPolicy : public Policy {
 public:
  ClusterPolicy(std::string name, ClusterPlan plan, bool allow_downgrade)
      : name_(std::move(name)), plan_(std::move(plan)), downgrade_(allow_downgrade),
        busy_(plan_.units.size(), false) {}

  std::string name() const override { return name_; }
  const ClusterPlan& plan() const { return plan_; }

  void attach(Simulation& sim) override {
    plan_.validate(sim.topology());
    for (const auto& r : sim.requests()) {
      const auto* c = plan_.find(r.resolution);
      if (!c || c->units.empty()) {
        throw ConfigError(name_ + ": no cluster with an engine unit for resolution " +
                          r.resolution);
      }
      if (!sim.profiles().is_candidate(c->dop)) {
        throw ConfigError(name_ + ": cluster DoP is not a profiled candidate");
      }
    }
  }

  void on_arrival(Simulation& sim, RequestId) override { schedule(sim); }
  void on_gpus_released(Simulation& sim) override { schedule(sim); }

  std::vector<GpuId> on_dit_complete(Simulation& sim, RequestId id) override {
    return sim.request(id).gpus;
  }

  void on_finish(Simulation&, RequestId id) override {
    busy_.at(assigned_.at(id)) = false;
    assigned_.erase(id);
  }

 private:
  std::optional<std::size_t> free_unit(const Cluster& c) const {
    for (std::size_t u : c.units) {
      if (!busy_[u]) return u;
    }
    return std::nullopt;
  }

  void schedule(Simulation& sim) {
    const std::vector<RequestId> queue = sim.waiting();
    for (RequestId id : queue) {
      const auto& st = sim.request(id);
      const Cluster& native = *plan_.find(st.resolution);
      auto unit = free_unit(native);
      if (!unit && downgrade_) {
        // Closest smaller DoP first.
        std::vector<const Cluster*> lower;
        for (const auto& c : plan_.clusters) {
          if (c.dop < native.dop) lower.push_back(&c);
        }
        std::stable_sort(lower.begin(), lower.end(),
                         [](const Cluster* a, const Cluster* b) { return a->dop > b->dop; });
        for (const auto* c : lower) {
          if ((unit = free_unit(*c))) break;
        }
      }
      if (!unit) continue;
      busy_[*unit] = true;
      assigned_[id] = *unit;
      sim.start(id, plan_.units[*unit].gpus, false);
    }
  }

  std::string name_;
  ClusterPlan plan_;
  bool downgrade_;
  std::vector<bool> busy_;
  std::map<RequestId, std::size_t> assigned_;
};

}  // namespace ddit

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddit/error.hpp"
#include "ddit/gpu_pool.hpp"
#include "ddit/profile.hpp"
#include "ddit/workload.hpp"

namespace ddit {

enum class EventKind { kArrival, kStepComplete, kDitComplete, kVaeComplete };

struct Event {
  double time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::kArrival;
  RequestId request_id = 0;
};

struct EventLater {
  bool operator()(const Event& a, const Event& b) const {
    return a.time != b.time ? a.time > b.time : a.seq > b.seq;
  }
};

enum class RequestStatus { kWaiting, kRunning, kHungry, kVaePhase, kDone };

inline std::string_view to_string(RequestStatus s) {
  switch (s) {
    case RequestStatus::kWaiting: return "waiting";
    case RequestStatus::kRunning: return "running";
    case RequestStatus::kHungry: return "hungry";
    case RequestStatus::kVaePhase: return "vae";
    case RequestStatus::kDone: return "done";
  }
  return "?";
}

// Width is the number of GPUs held, including GPUs reserved for a pending
// promotion that has not reached its step boundary yet.
struct LedgerInterval {
  double t_begin = 0.0;
  double t_end = 0.0;
  int gpu_count = 0;
};

struct DopChange {
  double time = 0.0;
  Dop dop = 0;
};

struct StarvationState {
  double starvation = 0.0;
  int last_step = 0;
};

struct RequestState {
  RequestId id = 0;
  std::string resolution;
  RequestStatus status = RequestStatus::kWaiting;
  double arrival_time = 0.0;
  double start_time = 0.0;
  double finish_time = 0.0;
  int cur_step = 0;
  int total_steps = 0;
  Dop dop_now = 0;
  std::vector<GpuId> gpus;
  std::optional<std::vector<GpuId>> pending_promotion;
  StarvationState starv;
  std::vector<LedgerInterval> ledger;
  std::vector<DopChange> dop_history;

  // Latency decomposition.
  double dit_time = 0.0;
  double overhead_time = 0.0;
  double vae_duration = 0.0;

  int held() const {
    return static_cast<int>(pending_promotion ? pending_promotion->size() : gpus.size());
  }
  double latency() const { return finish_time - arrival_time; }
  double gpu_seconds() const {
    double s = 0.0;
    for (const auto& iv : ledger) s += (iv.t_end - iv.t_begin) * iv.gpu_count;
    return s;
  }
};

struct OverheadModel {
  double scale_up = 0.001;
  double broadcast = 0.001;

  void validate() const {
    if (!(scale_up >= 0.0) || !(broadcast >= 0.0)) {
      throw ValidationError("overheads must be non-negative");
    }
  }
};

// One line of the event trace. `gpu_ids` is the set held after the event.
struct TraceRecord {
  double time = 0.0;
  std::string kind;
  RequestId request_id = 0;
  std::vector<GpuId> gpu_ids;
  Dop dop = 0;

  bool operator==(const TraceRecord&) const = default;
};

inline nlohmann::json to_json(const TraceRecord& r) {
  return {{"time", r.time}, {"kind", r.kind}, {"request_id", r.request_id},
          {"gpu_ids", r.gpu_ids}, {"dop", r.dop}};
}

inline void write_trace(std::ostream& os, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace) os << to_json(r).dump() << '\n';
}

struct SimResult {
  std::string policy;
  std::vector<RequestState> requests;
  double cumulative_occupancy = 0.0;
  std::vector<TraceRecord> trace;
};

class Simulation;

// Scheduling policy driven by the event loop. The policy owns GPU bookkeeping;
// the simulation owns timing, request state, ledgers and the trace.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  // Validates that the policy can serve the loaded workload.
  virtual void attach(Simulation&) {}
  virtual void on_arrival(Simulation& sim, RequestId id) = 0;
  // GPUs were returned to the pool.
  virtual void on_gpus_released(Simulation& sim) = 0;
  // DiT finished; return the GPUs kept for the VAE phase and free the rest.
  virtual std::vector<GpuId> on_dit_complete(Simulation& sim, RequestId id) = 0;
  virtual void on_finish(Simulation& sim, RequestId id) = 0;
};

class Simulation {
 public:
  Simulation(ClusterTopology topo, const ProfileTable& profiles, BValueTable b_values,
             OverheadModel overheads, const std::vector<ArrivalRecord>& workload)
      : topo_(topo), profiles_(profiles), b_values_(std::move(b_values)), overheads_(overheads),
        pool_(topo) {
    overheads_.validate();
    if (workload.empty()) throw ConfigError("simulation: empty workload");
    for (const auto& a : workload) {
      if (!profiles_.find_resolution(a.resolution)) {
        throw ConfigError("request " + std::to_string(a.request_id) + ": no profile for resolution " +
                          a.resolution);
      }
      if (!b_values_.b.count(a.resolution)) {
        throw ConfigError("request " + std::to_string(a.request_id) + ": no B value for " +
                          a.resolution);
      }
      if (a.denoise_steps < 1) {
        throw ConfigError("request " + std::to_string(a.request_id) + ": denoise_steps < 1");
      }
      if (index_.count(a.request_id)) {
        throw ConfigError("duplicate request id " + std::to_string(a.request_id));
      }
      RequestState st;
      st.id = a.request_id;
      st.resolution = a.resolution;
      st.arrival_time = a.arrival_time;
      st.total_steps = a.denoise_steps;
      index_[a.request_id] = requests_.size();
      requests_.push_back(std::move(st));
    }
  }

  SimResult run(Policy& policy) {
    if (ran_) throw UsageError("simulation: run() called twice");
    ran_ = true;
    policy.attach(*this);
    for (const auto& r : requests_) push(r.arrival_time, EventKind::kArrival, r.id);

    while (!events_.empty()) {
      const Event ev = events_.top();
      events_.pop();
      now_ = ev.time;
      auto& st = request(ev.request_id);
      switch (ev.kind) {
        case EventKind::kArrival:
          waiting_.push_back(st.id);
          trace("arrival", st);
          policy.on_arrival(*this, st.id);
          break;
        case EventKind::kStepComplete:
          on_step_complete(st);
          break;
        case EventKind::kDitComplete:
          on_dit_complete(st, policy);
          break;
        case EventKind::kVaeComplete:
          on_vae_complete(st, policy);
          break;
      }
    }

    SimResult out;
    out.policy = policy.name();
    for (const auto& r : requests_) {
      if (r.status != RequestStatus::kDone) {
        throw InvariantViolation("request " + std::to_string(r.id) + " never completed under " +
                                 policy.name());
      }
      out.cumulative_occupancy += r.gpu_seconds();
    }
    out.requests = requests_;
    out.trace = std::move(trace_);
    return out;
  }

  // -- policy-facing API --

  double now() const { return now_; }
  GpuPool& pool() { return pool_; }
  const ClusterTopology& topology() const { return topo_; }
  const ProfileTable& profiles() const { return profiles_; }
  const BValueTable& b_values() const { return b_values_; }
  const OverheadModel& overheads() const { return overheads_; }
  const std::vector<RequestId>& waiting() const { return waiting_; }
  const std::vector<RequestState>& requests() const { return requests_; }

  RequestState& request(RequestId id) {
    auto it = index_.find(id);
    if (it == index_.end()) throw LookupError("unknown request " + std::to_string(id));
    return requests_[it->second];
  }

  Dop b_of(const RequestState& st) const { return b_values_.at(st.resolution); }

  // Begin DiT on `gpus`. Removes the request from the waiting queue.
  void start(RequestId id, std::vector<GpuId> gpus, bool hungry) {
    auto& st = request(id);
    if (st.status != RequestStatus::kWaiting) throw InvariantViolation("start: request not waiting");
    if (gpus.empty()) throw InvariantViolation("start: empty GPU set");
    waiting_.erase(std::find(waiting_.begin(), waiting_.end(), id));
    std::sort(gpus.begin(), gpus.end());
    st.status = hungry ? RequestStatus::kHungry : RequestStatus::kRunning;
    st.start_time = now_;
    st.gpus = std::move(gpus);
    st.dop_now = static_cast<Dop>(st.gpus.size());
    st.dop_history.push_back({now_, st.dop_now});
    open_ledger(st);
    trace("start", st);
    schedule_step(st, 0.0);
  }

  // Reserve `superset` for a promotion applied at the next step boundary.
  void grant(RequestId id, std::vector<GpuId> superset, bool still_hungry) {
    auto& st = request(id);
    if (st.status != RequestStatus::kRunning && st.status != RequestStatus::kHungry) {
      throw InvariantViolation("grant: request is not in DiT");
    }
    std::sort(superset.begin(), superset.end());
    const auto& base = st.pending_promotion ? *st.pending_promotion : st.gpus;
    if (!std::includes(superset.begin(), superset.end(), base.begin(), base.end()) ||
        superset.size() <= base.size()) {
      throw InvariantViolation("grant: promotion is not a strict superset of held GPUs");
    }
    st.pending_promotion = std::move(superset);
    st.status = still_hungry ? RequestStatus::kHungry : RequestStatus::kRunning;
    resize_ledger(st);
    trace("grant", st);
  }

 private:
  void push(double t, EventKind kind, RequestId id) { events_.push({t, seq_++, kind, id}); }

  void trace(const char* kind, const RequestState& st) {
    std::vector<GpuId> held = st.pending_promotion ? *st.pending_promotion : st.gpus;
    trace_.push_back({now_, kind, st.id, std::move(held), st.dop_now});
  }

  void open_ledger(RequestState& st) {
    st.ledger.push_back({now_, now_, st.held()});
  }

  // Close the open ledger interval at now and open one at the current width.
  void resize_ledger(RequestState& st) {
    auto& open = st.ledger.back();
    open.t_end = now_;
    if (open.t_end == open.t_begin) {
      open.gpu_count = st.held();
    } else {
      st.ledger.push_back({now_, now_, st.held()});
    }
  }

  void schedule_step(RequestState& st, double overhead) {
    const double step = profiles_.dit_step_time(st.resolution, st.dop_now);
    st.dit_time += step;
    st.overhead_time += overhead;
    const bool last = st.cur_step + 1 == st.total_steps;
    push(now_ + overhead + step, last ? EventKind::kDitComplete : EventKind::kStepComplete, st.id);
  }

  void on_step_complete(RequestState& st) {
    if (st.status != RequestStatus::kRunning && st.status != RequestStatus::kHungry) {
      throw InvariantViolation("step complete outside DiT phase");
    }
    ++st.cur_step;
    double overhead = 0.0;
    if (st.pending_promotion) {
      if (!std::includes(st.pending_promotion->begin(), st.pending_promotion->end(),
                         st.gpus.begin(), st.gpus.end())) {
        throw InvariantViolation("promotion is not a superset of held GPUs");
      }
      st.gpus = std::move(*st.pending_promotion);
      st.pending_promotion.reset();
      st.dop_now = static_cast<Dop>(st.gpus.size());
      st.dop_history.push_back({now_, st.dop_now});
      resize_ledger(st);
      overhead = overheads_.broadcast + overheads_.scale_up;
      trace("promote", st);
    } else {
      trace("step", st);
    }
    schedule_step(st, overhead);
  }

  void on_dit_complete(RequestState& st, Policy& policy) {
    if (st.status != RequestStatus::kRunning && st.status != RequestStatus::kHungry) {
      throw InvariantViolation("DiT complete outside DiT phase");
    }
    st.cur_step = st.total_steps;
    const int before = st.held();
    auto kept = policy.on_dit_complete(*this, st.id);
    std::sort(kept.begin(), kept.end());
    if (kept.empty() || !std::includes(st.gpus.begin(), st.gpus.end(), kept.begin(), kept.end())) {
      throw InvariantViolation("VAE GPUs must be a non-empty subset of the DiT GPUs");
    }
    st.pending_promotion.reset();
    st.gpus = std::move(kept);
    st.status = RequestStatus::kVaePhase;
    if (static_cast<Dop>(st.gpus.size()) != st.dop_now) {
      st.dop_now = static_cast<Dop>(st.gpus.size());
      st.dop_history.push_back({now_, st.dop_now});
    }
    resize_ledger(st);
    trace("dit_complete", st);
    st.vae_duration = profiles_.vae_time(st.resolution, st.dop_now);
    push(now_ + st.vae_duration, EventKind::kVaeComplete, st.id);
    if (st.held() < before) policy.on_gpus_released(*this);
  }

  void on_vae_complete(RequestState& st, Policy& policy) {
    if (st.status != RequestStatus::kVaePhase) throw InvariantViolation("VAE complete outside VAE");
    policy.on_finish(*this, st.id);
    st.gpus.clear();
    st.status = RequestStatus::kDone;
    st.finish_time = now_;
    auto& open = st.ledger.back();
    open.t_end = now_;
    if (open.t_end == open.t_begin && st.ledger.size() > 1) st.ledger.pop_back();
    trace("vae_complete", st);
    policy.on_gpus_released(*this);
  }

  ClusterTopology topo_;
  const ProfileTable& profiles_;
  BValueTable b_values_;
  OverheadModel overheads_;
  GpuPool pool_;

  std::vector<RequestState> requests_;
  std::map<RequestId, std::size_t> index_;
  std::vector<RequestId> waiting_;
  std::priority_queue<Event, std::vector<Event>, EventLater> events_;
  std::vector<TraceRecord> trace_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
  bool ran_ = false;
};

// Occupancy computed independently of the ledgers: sweep the trace and accumulate
// busy time per GPU.
inline std::map<GpuId, double> occupancy_from_trace(const std::vector<TraceRecord>& trace) {
  std::map<GpuId, double> busy;
  std::map<RequestId, std::pair<double, std::vector<GpuId>>> held;
  for (const auto& rec : trace) {
    auto it = held.find(rec.request_id);
    if (it != held.end()) {
      for (GpuId g : it->second.second) busy[g] += rec.time - it->second.first;
    }
    held[rec.request_id] = {rec.time, rec.gpu_ids};
  }
  return busy;
}

}  // namespace ddit

#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace ddit;
using namespace ddit::testing;

namespace {

ProfileTable single_dop(double step, double vae) {
  std::vector<ProfileRecord> recs{{"r", 1, step, vae}};
  return ProfileTable({1}, recs);
}

// "a" has B = 2 and "x" has B = 4 on a 4-GPU node.
ProfileTable promotion_profile() {
  std::vector<ProfileRecord> recs{
      {"a", 1, 2.0, 1.0}, {"a", 2, 1.0, std::nullopt}, {"a", 4, 0.95, std::nullopt},
      {"x", 1, 3.0, 1.0}, {"x", 2, 1.5, std::nullopt}, {"x", 4, 0.6, std::nullopt},
  };
  return ProfileTable({1, 2, 4}, recs);
}

const TraceRecord* find_trace(const SimResult& r, const std::string& kind, RequestId id, int nth = 0) {
  for (const auto& t : r.trace) {
    if (t.kind == kind && t.request_id == id && nth-- == 0) return &t;
  }
  return nullptr;
}

std::vector<PolicySpec> all_policies() {
  return {
      {"greedy", PolicyKind::kGreedy, 2, true, true},
      {"greedy-nopromote", PolicyKind::kGreedy, 2, true, false},
      {"greedy-monolithic", PolicyKind::kGreedy, 2, false, true},
      {"sdop1", PolicyKind::kSdop, 1, false, true},
      {"sdop2", PolicyKind::kSdop, 2, false, true},
      {"sdop2-decouple", PolicyKind::kSdop, 2, true, true},
      {"sdop4", PolicyKind::kSdop, 4, false, true},
      {"spci", PolicyKind::kSpci, 2, false, true},
      {"dpci", PolicyKind::kDpci, 2, false, true},
      {"dp", PolicyKind::kDp, 2, false, true},
  };
}

SimResult run_spec(const PolicySpec& spec, const std::vector<ArrivalRecord>& arrivals,
                   OverheadModel overheads = dyadic_overheads()) {
  static const ProfileTable profiles = reference_profile();
  const auto b = derive_b_values(profiles);
  auto policy = make_policy(spec, {1, 8}, uniform_mix(), b);
  Simulation sim({1, 8}, profiles, b, overheads, arrivals);
  return sim.run(*policy);
}

}  // namespace

TEST(Simulation, SingleRequestArithmetic) {
  const auto p = single_dop(2.0, 1.0);
  StaticDopPolicy policy(1);
  auto r = simulate(policy, {arrival(0, 0.0, "r", 1)}, p, {1, 1});
  EXPECT_EQ(r.requests[0].finish_time, 3.0);
  EXPECT_EQ(r.cumulative_occupancy, 3.0);
  EXPECT_EQ(r.requests[0].gpu_seconds(), 3.0);
}

TEST(Simulation, SerialOnOneGpu) {
  const auto p = single_dop(1.0, 1.0);
  GreedyPolicy policy;
  auto r = simulate(policy, {arrival(0, 0.0, "r", 1), arrival(1, 0.0, "r", 1)}, p, {1, 1});
  EXPECT_EQ(r.requests[0].finish_time, 2.0);
  EXPECT_EQ(r.requests[1].finish_time, 4.0);
  EXPECT_EQ(r.requests[1].start_time, 2.0);
}

TEST(Simulation, StepAndVaeTiming) {
  const auto p = single_dop(1.0, 2.0);
  StaticDopPolicy policy(1);
  auto r = simulate(policy, {arrival(0, 10.0, "r", 2), arrival(1, 0.0, "r", 30)}, p, {1, 2});
  const auto* step = find_trace(r, "step", 0);
  ASSERT_TRUE(step);
  EXPECT_EQ(step->time, 11.0);
  const auto* dit = find_trace(r, "dit_complete", 1);
  ASSERT_TRUE(dit);
  EXPECT_EQ(dit->time, 30.0);
  EXPECT_EQ(r.requests[1].finish_time, 32.0);
}

TEST(Simulation, FinalStepSchedulesDitComplete) {
  const auto p = single_dop(1.0, 2.0);
  StaticDopPolicy policy(1);
  auto r = simulate(policy, {arrival(0, 0.0, "r", 3)}, p, {1, 1});
  EXPECT_EQ(find_trace(r, "step", 0, 1)->time, 2.0);
  EXPECT_EQ(find_trace(r, "step", 0, 2), nullptr);
  EXPECT_EQ(find_trace(r, "dit_complete", 0)->time, 3.0);
}

TEST(Simulation, PromotionAppliedAtNextStepBoundary) {
  const auto p = promotion_profile();
  GreedyPolicy policy;
  auto r = simulate(policy, {arrival(0, 0.0, "a", 1), arrival(1, 0.0, "x", 5)}, p, {1, 4});
  const auto& x = r.requests[1];

  const auto* grant = find_trace(r, "grant", 1);
  ASSERT_TRUE(grant);
  EXPECT_EQ(grant->time, 2.0);  // "a" finishes VAE and frees {0,1}
  EXPECT_EQ(grant->gpu_ids, (std::vector<GpuId>{0, 1, 2, 3}));
  EXPECT_EQ(grant->dop, 2);

  const auto* promote = find_trace(r, "promote", 1);
  ASSERT_TRUE(promote);
  EXPECT_EQ(promote->time, 3.0);
  EXPECT_EQ(promote->dop, 4);
  // The boundary at 3.0 is traced as the promotion itself.
  const auto* next = find_trace(r, "step", 1, 1);
  ASSERT_TRUE(next);
  EXPECT_NEAR(next->time, 3.0 + 0.001 + 0.001 + 0.6, 1e-12);

  EXPECT_NEAR(find_trace(r, "dit_complete", 1)->time, 4.802, 1e-12);
  EXPECT_NEAR(x.finish_time, 5.802, 1e-12);
  // Reserved GPUs count from the grant; the DoP change at 3.0 opens a new interval.
  ASSERT_EQ(x.ledger.size(), 4u);
  EXPECT_EQ(x.ledger[0].gpu_count, 2);
  EXPECT_EQ(x.ledger[1].gpu_count, 4);
  EXPECT_EQ(x.ledger[1].t_begin, 2.0);
  EXPECT_EQ(x.ledger[2].gpu_count, 4);
  EXPECT_EQ(x.ledger[2].t_begin, 3.0);
  EXPECT_EQ(x.ledger[3].gpu_count, 1);
  EXPECT_NEAR(x.gpu_seconds(), 2 * 2.0 + 4 * 2.802 + 1.0, 1e-12);
  ASSERT_EQ(x.dop_history.size(), 3u);
  EXPECT_EQ(x.dop_history[1].time, 3.0);
}

TEST(Simulation, ScaleDownKeepsLowestId) {
  const auto p = reference_profile();
  GreedyPolicy policy;
  auto r = simulate(policy, {arrival(0, 0.0, "360p")}, p);
  const auto* dit = find_trace(r, "dit_complete", 0);
  ASSERT_TRUE(dit);
  EXPECT_EQ(dit->gpu_ids, std::vector<GpuId>{0});
  EXPECT_EQ(find_trace(r, "start", 0)->gpu_ids, (std::vector<GpuId>{0, 1, 2, 3}));
}

TEST(Simulation, ScaleDownIdentityCase) {
  const auto p = reference_profile();
  GreedyPolicy policy;
  auto r = simulate(policy, burst({"144p", "144p", "144p", "144p", "144p", "144p"}), p);
  EXPECT_EQ(find_trace(r, "dit_complete", 5)->gpu_ids, std::vector<GpuId>{5});
  EXPECT_EQ(r.requests[5].dop_history.size(), 1u);
}

// Monolithic DoP 4 holds four GPUs through VAE; decoupled holds one.
TEST(Simulation, DecouplingSavesThreeVaeTimes) {
  const auto p = reference_profile();
  StaticDopPolicy mono(4, false), dec(4, true);
  const auto a = simulate(mono, {arrival(0, 0.0, "360p")}, p);
  const auto b = simulate(dec, {arrival(0, 0.0, "360p")}, p);
  const double vae = p.vae_time("360p", 1);
  const double dit = 30 * p.dit_step_time("360p", 4);
  EXPECT_EQ(a.cumulative_occupancy, 4 * (dit + vae));
  EXPECT_EQ(b.cumulative_occupancy, 4 * dit + vae);
  EXPECT_EQ(a.cumulative_occupancy - b.cumulative_occupancy, 3 * vae);
}

TEST(Simulation, ConfigErrors) {
  const auto p = single_dop(1.0, 1.0);
  const auto b = derive_b_values(p);
  EXPECT_THROW(Simulation({1, 1}, p, b, {}, {arrival(0, 0.0, "zzz")}), ConfigError);
  EXPECT_THROW(Simulation({1, 1}, p, b, {}, {arrival(0, 0.0, "r"), arrival(0, 1.0, "r")}), ConfigError);
  EXPECT_THROW(Simulation({1, 1}, p, b, {}, {}), ConfigError);
  EXPECT_THROW(Simulation({1, 1}, p, b, {}, {arrival(0, 0.0, "r", 0)}), ConfigError);
  Simulation sim({1, 1}, p, b, {}, {arrival(0, 0.0, "r", 1)});
  StaticDopPolicy policy(1);
  sim.run(policy);
  EXPECT_THROW(sim.run(policy), UsageError);
}

TEST(Simulation, TraceFormat) {
  const auto p = single_dop(1.0, 1.0);
  StaticDopPolicy policy(1);
  auto r = simulate(policy, {arrival(0, 0.0, "r", 1)}, p, {1, 1});
  std::ostringstream os;
  write_trace(os, r.trace);
  EXPECT_EQ(os.str(),
            "{\"dop\":0,\"gpu_ids\":[],\"kind\":\"arrival\",\"request_id\":0,\"time\":0.0}\n"
            "{\"dop\":1,\"gpu_ids\":[0],\"kind\":\"start\",\"request_id\":0,\"time\":0.0}\n"
            "{\"dop\":1,\"gpu_ids\":[0],\"kind\":\"dit_complete\",\"request_id\":0,\"time\":1.0}\n"
            "{\"dop\":1,\"gpu_ids\":[],\"kind\":\"vae_complete\",\"request_id\":0,\"time\":2.0}\n");
}

namespace ddit {
void PrintTo(const PolicySpec& s, std::ostream* os) { *os << s.name; }
}  // namespace ddit

// Properties over every policy, burst and Poisson, several seeds.
class SimulationProperties : public ::testing::TestWithParam<PolicySpec> {};

TEST_P(SimulationProperties, BookkeepingAgrees) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    for (bool burst_mode : {true, false}) {
      const auto arrivals = mixed_workload(seed, burst_mode, 40);
      const auto r = run_spec(GetParam(), arrivals);
      SCOPED_TRACE("seed " + std::to_string(seed) + (burst_mode ? " burst" : " poisson"));

      // Occupancy both ways.
      double swept = 0.0;
      for (const auto& [g, t] : occupancy_from_trace(r.trace)) swept += t;
      double ledgers = 0.0;
      for (const auto& q : r.requests) ledgers += q.gpu_seconds();
      // Exact with dyadic clocks; Poisson arrival times may round by a few ulps.
      const double tol = burst_mode ? 0.0 : 1e-12 * r.cumulative_occupancy;
      EXPECT_NEAR(swept, r.cumulative_occupancy, tol);
      EXPECT_NEAR(ledgers, r.cumulative_occupancy, tol);

      std::set<double> boundaries;
      for (const auto& t : r.trace) {
        if (t.kind == "step" || t.kind == "promote" || t.kind == "grant" || t.kind == "dit_complete" || t.kind == "vae_complete") {
          boundaries.insert(t.time);
        }
      }
      for (const auto& q : r.requests) {
        ASSERT_EQ(q.status, RequestStatus::kDone);
        // Ledger is contiguous over [start, finish].
        ASSERT_FALSE(q.ledger.empty());
        EXPECT_EQ(q.ledger.front().t_begin, q.start_time);
        EXPECT_EQ(q.ledger.back().t_end, q.finish_time);
        for (std::size_t i = 1; i < q.ledger.size(); ++i) {
          EXPECT_EQ(q.ledger[i].t_begin, q.ledger[i - 1].t_end);
          EXPECT_TRUE(boundaries.count(q.ledger[i].t_begin)) << "width change off an event boundary";
        }
        // Latency decomposition. Arrival clocks are not dyadic, so the two
        // summation orders may round apart by a few ulps.
        const double span = q.finish_time - q.start_time;
        EXPECT_NEAR(span, q.dit_time + q.overhead_time + q.vae_duration, 1e-12 * std::max(1.0, q.finish_time));
        EXPECT_GE(q.start_time, q.arrival_time);
      }
    }
  }
}

TEST_P(SimulationProperties, NoGpuServesTwoRequests) {
  const auto arrivals = mixed_workload(3, true, 40);
  const auto r = run_spec(GetParam(), arrivals);
  // Each request's held set between consecutive trace records.
  std::map<RequestId, std::pair<double, std::vector<GpuId>>> held;
  std::map<GpuId, std::vector<std::tuple<double, double, RequestId>>> busy;
  for (const auto& t : r.trace) {
    auto it = held.find(t.request_id);
    if (it != held.end() && t.time > it->second.first) {
      for (GpuId g : it->second.second) busy[g].emplace_back(it->second.first, t.time, t.request_id);
    }
    held[t.request_id] = {t.time, t.gpu_ids};
  }
  for (auto& [g, iv] : busy) {
    std::sort(iv.begin(), iv.end());
    for (std::size_t i = 1; i < iv.size(); ++i) {
      if (std::get<2>(iv[i]) == std::get<2>(iv[i - 1])) continue;
      EXPECT_LE(std::get<1>(iv[i - 1]), std::get<0>(iv[i])) << "GPU " << g << " shared";
    }
  }
}

TEST_P(SimulationProperties, Deterministic) {
  const auto arrivals = mixed_workload(2, false, 40);
  const auto a = run_spec(GetParam(), arrivals, {});
  const auto b = run_spec(GetParam(), arrivals, {});
  std::ostringstream sa, sb;
  write_trace(sa, a.trace);
  write_trace(sb, b.trace);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST_P(SimulationProperties, DefaultOverheadsAgreeWithinRounding) {
  const auto r = run_spec(GetParam(), mixed_workload(5, false, 40), {});
  double swept = 0.0;
  for (const auto& [g, t] : occupancy_from_trace(r.trace)) swept += t;
  EXPECT_NEAR(swept, r.cumulative_occupancy, 1e-9 * r.cumulative_occupancy);
}

INSTANTIATE_TEST_SUITE_P(AllPolicies, SimulationProperties, ::testing::ValuesIn(all_policies()),
                         [](const auto& info) {
                           std::string n = info.param.name;
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ddit/error.hpp"
#include "ddit/format.hpp"
#include "ddit/simulator.hpp"

namespace ddit {

struct RequestRow {
  RequestId request_id = 0;
  std::string resolution;
  double arrival = 0.0;
  double start = 0.0;
  double finish = 0.0;
  double latency = 0.0;
  std::string dop_history;  // "dop@time|dop@time|..."
  double gpu_seconds = 0.0;
};

struct MetricsReport {
  double avg_latency = 0.0;
  double p99_latency = 0.0;
  double cumulative_occupancy = 0.0;
  double monetary_cost = 0.0;  // one unit per GPU-second
  std::vector<RequestRow> rows;
};

// ceil(q * n)-th smallest value.
inline double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw PreconditionError("nearest_rank: empty sample");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

inline double mean(const std::vector<double>& values) {
  if (values.empty()) throw PreconditionError("mean: empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

inline std::string format_dop_history(const std::vector<DopChange>& h) {
  std::string out;
  for (const auto& c : h) {
    if (!out.empty()) out += '|';
    out += std::to_string(c.dop) + "@" + format_double(c.time);
  }
  return out;
}

inline MetricsReport compute_metrics(const SimResult& result) {
  if (result.requests.empty()) throw PreconditionError("compute_metrics: empty result");
  MetricsReport rep;
  std::vector<double> lat;
  for (const auto& r : result.requests) {
    if (r.status != RequestStatus::kDone) {
      throw PreconditionError("compute_metrics: request " + std::to_string(r.id) + " not done");
    }
    RequestRow row{r.id,       r.resolution, r.arrival_time, r.start_time, r.finish_time,
                   r.latency(), format_dop_history(r.dop_history), r.gpu_seconds()};
    lat.push_back(row.latency);
    rep.cumulative_occupancy += row.gpu_seconds;
    rep.rows.push_back(std::move(row));
  }
  rep.avg_latency = mean(lat);
  rep.p99_latency = nearest_rank(lat, 0.99);
  rep.monetary_cost = rep.cumulative_occupancy;
  return rep;
}

struct NormalizedRow {
  std::string system;
  double avg_latency = 0.0;
  double p99_latency = 0.0;
  double cost = 0.0;
};

// Divides each metric by its maximum across the systems of one scenario.
inline std::vector<NormalizedRow> normalize(
    const std::vector<std::pair<std::string, MetricsReport>>& reports) {
  double max_avg = 0.0, max_p99 = 0.0, max_cost = 0.0;
  for (const auto& [name, r] : reports) {
    max_avg = std::max(max_avg, r.avg_latency);
    max_p99 = std::max(max_p99, r.p99_latency);
    max_cost = std::max(max_cost, r.monetary_cost);
  }
  auto div = [](double v, double m) { return m > 0.0 ? v / m : 1.0; };
  std::vector<NormalizedRow> out;
  for (const auto& [name, r] : reports) {
    out.push_back({name, div(r.avg_latency, max_avg), div(r.p99_latency, max_p99),
                   div(r.monetary_cost, max_cost)});
  }
  return out;
}

}  // namespace ddit

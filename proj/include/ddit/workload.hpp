#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddit/error.hpp"

namespace ddit {

using RequestId = std::int64_t;

struct WorkloadSpec {
  double arrival_rate = 1.0;  // requests/second, ignored when burst
  // Resolution mix in a fixed order; fractions must sum to 1.
  std::vector<std::pair<std::string, double>> proportions;
  int count = 1;
  bool burst = false;
  std::uint64_t seed = 0;
  int denoise_steps = 30;
  int frames = 51;  // metadata
};

struct ArrivalRecord {
  RequestId request_id = 0;
  double arrival_time = 0.0;
  std::string resolution;
  int denoise_steps = 30;

  bool operator==(const ArrivalRecord&) const = default;
};

namespace detail {

// Uniform on [0, 1) from the top 53 bits; fixed across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, bound) by rejection.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

}  // namespace detail

inline void validate(const WorkloadSpec& spec) {
  if (spec.count < 1) throw ValidationError("workload: count must be >= 1");
  if (!spec.burst && !(spec.arrival_rate > 0.0)) {
    throw ValidationError("workload: arrival_rate must be positive unless burst");
  }
  if (spec.denoise_steps < 1) throw ValidationError("workload: denoise_steps must be >= 1");
  if (spec.proportions.empty()) throw ValidationError("workload: empty resolution mix");
  double total = 0.0;
  for (const auto& [name, x] : spec.proportions) {
    if (!(x >= 0.0)) throw ValidationError("workload: negative proportion for " + name);
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("workload: proportions sum to " + std::to_string(total) + ", not 1");
  }
}

// Per-resolution counts by largest-remainder rounding of count * x. Ties in
// the remainder go to the resolution listed first.
inline std::vector<int> stratified_counts(const WorkloadSpec& spec) {
  const std::size_t n = spec.proportions.size();
  std::vector<int> counts(n);
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = spec.count * spec.proportions[i].second;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    rema.emplace_back(exact - counts[i], i);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < spec.count; ++k, ++assigned) ++counts[rema[k % n].second];
  return counts;
}

inline std::vector<ArrivalRecord> generate(const WorkloadSpec& spec) {
  validate(spec);
  const auto counts = stratified_counts(spec);
  std::vector<std::string> labels;
  labels.reserve(spec.count);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    labels.insert(labels.end(), counts[i], spec.proportions[i].first);
  }

  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::swap(labels[i - 1], labels[detail::bounded(rng, i)]);
  }

  std::vector<ArrivalRecord> out;
  out.reserve(spec.count);
  double t = 0.0;
  for (int i = 0; i < spec.count; ++i) {
    if (!spec.burst) t += -std::log1p(-detail::uniform01(rng)) / spec.arrival_rate;
    out.push_back({i, t, labels[i], spec.denoise_steps});
  }
  return out;
}

// One JSON object per line: {"request_id", "arrival", "resolution", "steps"}.
inline void write_arrivals(std::ostream& os, const std::vector<ArrivalRecord>& records) {
  for (const auto& r : records) {
    nlohmann::json j{{"request_id", r.request_id},
                     {"arrival", r.arrival_time},
                     {"resolution", r.resolution},
                     {"steps", r.denoise_steps}};
    os << j.dump() << '\n';
  }
}

inline std::vector<ArrivalRecord> read_arrivals(std::istream& is) {
  std::vector<ArrivalRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("request_id").get<RequestId>(), j.at("arrival").get<double>(),
                     j.at("resolution").get<std::string>(), j.at("steps").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("workload line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].arrival_time < out[i - 1].arrival_time) {
      throw ValidationError("workload line " + std::to_string(i + 1) +
                            ": arrival times must be non-decreasing");
    }
  }
  return out;
}

}  // namespace ddit

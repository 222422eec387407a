#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddit/error.hpp"

namespace ddit {

using Dop = int;

inline constexpr std::string_view kProfileSchema = "ddit-profile/1";
inline constexpr double kDefaultGainThreshold = 0.05;

inline bool is_power_of_two(long long v) { return v > 0 && (v & (v - 1)) == 0; }

struct ResolutionClass {
  std::string name;
  int ordinal = 0;

  bool operator==(const ResolutionClass&) const = default;
};

// One measured point. vae_seconds may be omitted for dop > 1; VAE time is
// read from the dop=1 record in that case.
struct ProfileRecord {
  std::string resolution;
  Dop dop = 1;
  double dit_step_seconds = 0.0;
  std::optional<double> vae_seconds;
};

// Immutable after construction.
class ProfileTable {
 public:
  ProfileTable() = default;

  // `order` fixes resolution ordinals; when empty, first appearance in
  // `records` defines it.
  ProfileTable(std::vector<Dop> dop_candidates, const std::vector<ProfileRecord>& records,
               const std::vector<std::string>& order = {})
      : dop_candidates_(std::move(dop_candidates)) {
    if (dop_candidates_.empty()) throw ValidationError("dop_candidates is empty");
    for (std::size_t i = 0; i < dop_candidates_.size(); ++i) {
      if (!is_power_of_two(dop_candidates_[i])) {
        throw ValidationError("dop_candidates: " + std::to_string(dop_candidates_[i]) +
                              " is not a power of two");
      }
      if (i > 0 && dop_candidates_[i] <= dop_candidates_[i - 1]) {
        throw ValidationError("dop_candidates must be strictly increasing");
      }
    }
    if (dop_candidates_.front() != 1) throw ValidationError("dop_candidates must contain 1");

    for (const auto& name : order) add_resolution(name);
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& rec = records[i];
      const std::string where = "record " + std::to_string(i) + " (" + rec.resolution + ", dop " +
                                std::to_string(rec.dop) + ")";
      if (rec.resolution.empty()) throw ValidationError(where + ": empty resolution name");
      if (!is_candidate(rec.dop)) {
        throw ValidationError(where + ": dop is not one of dop_candidates");
      }
      if (!(rec.dit_step_seconds > 0.0) || !std::isfinite(rec.dit_step_seconds)) {
        throw ValidationError(where + ": dit_step_seconds must be positive");
      }
      if (rec.vae_seconds && (!(*rec.vae_seconds > 0.0) || !std::isfinite(*rec.vae_seconds))) {
        throw ValidationError(where + ": vae_seconds must be positive");
      }
      if (!order.empty() && !find_resolution(rec.resolution)) {
        throw ValidationError(where + ": resolution not listed in resolution order");
      }
      add_resolution(rec.resolution);
      const auto key = std::make_pair(rec.resolution, rec.dop);
      if (dit_.count(key)) throw ValidationError(where + ": duplicate entry");
      dit_[key] = rec.dit_step_seconds;
      if (rec.vae_seconds) vae_[key] = *rec.vae_seconds;
    }
    for (const auto& res : resolutions_) {
      if (!dit_.count({res.name, 1})) {
        throw ValidationError("resolution " + res.name + ": missing dop=1 entry");
      }
      if (!vae_.count({res.name, 1})) {
        throw ValidationError("resolution " + res.name + ": dop=1 entry lacks vae_seconds");
      }
    }
  }

  const std::vector<ResolutionClass>& resolutions() const { return resolutions_; }
  const std::vector<Dop>& dop_candidates() const { return dop_candidates_; }

  bool is_candidate(Dop d) const {
    return std::find(dop_candidates_.begin(), dop_candidates_.end(), d) != dop_candidates_.end();
  }

  const ResolutionClass* find_resolution(std::string_view name) const {
    for (const auto& r : resolutions_) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }

  const ResolutionClass& resolution(std::string_view name) const {
    if (const auto* r = find_resolution(name)) return *r;
    throw LookupError("no profile for resolution " + std::string(name));
  }

  bool has(std::string_view res, Dop dop) const {
    return dit_.count({std::string(res), dop}) != 0;
  }

  double dit_step_time(std::string_view res, Dop dop) const {
    auto it = dit_.find({std::string(res), dop});
    if (it == dit_.end()) {
      throw LookupError("no DiT profile for (" + std::string(res) + ", dop " + std::to_string(dop) +
                        ")");
    }
    return it->second;
  }

  double vae_time(std::string_view res, Dop dop) const {
    auto it = vae_.find({std::string(res), dop});
    if (it != vae_.end()) return it->second;
    if (!is_candidate(dop)) {
      throw LookupError("dop " + std::to_string(dop) + " is not a candidate");
    }
    it = vae_.find({std::string(res), 1});
    if (it == vae_.end()) throw LookupError("no VAE profile for " + std::string(res));
    return it->second;
  }

  Dop max_dop() const { return dop_candidates_.back(); }

  std::vector<ProfileRecord> records() const {
    std::vector<ProfileRecord> out;
    for (const auto& res : resolutions_) {
      for (Dop d : dop_candidates_) {
        auto it = dit_.find({res.name, d});
        if (it == dit_.end()) continue;
        ProfileRecord rec{res.name, d, it->second, std::nullopt};
        if (auto v = vae_.find({res.name, d}); v != vae_.end()) rec.vae_seconds = v->second;
        out.push_back(std::move(rec));
      }
    }
    return out;
  }

  bool operator==(const ProfileTable&) const = default;

 private:
  void add_resolution(const std::string& name) {
    if (find_resolution(name)) return;
    resolutions_.push_back({name, static_cast<int>(resolutions_.size())});
  }

  std::vector<Dop> dop_candidates_;
  std::vector<ResolutionClass> resolutions_;
  std::map<std::pair<std::string, Dop>, double> dit_;
  std::map<std::pair<std::string, Dop>, double> vae_;
};

// Optimal DiT DoP per resolution plus the DoP used for the VAE phase.
struct BValueTable {
  std::map<std::string, Dop> b;
  Dop vae_dop = 1;

  Dop at(std::string_view res) const {
    auto it = b.find(std::string(res));
    if (it == b.end()) throw LookupError("no B value for resolution " + std::string(res));
    return it->second;
  }
};

namespace detail {

template <typename T>
T require_field(const nlohmann::json& obj, const char* field, const std::string& where) {
  if (!obj.is_object() || !obj.contains(field)) {
    throw ParseError(where + ": missing field '" + field + "'");
  }
  try {
    return obj.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(where + ": field '" + field + "' has the wrong type");
  }
}

}  // namespace detail

// Document layout:
//   {"schema": "ddit-profile/1",
//    "dop_candidates": [1, 2, 4, 8],
//    "resolutions": ["144p", ...],            (optional ordering)
//    "records": [{"resolution": "144p", "dop": 1,
//                 "dit_step_seconds": 0.5, "vae_seconds": 1.0}, ...]}
inline ProfileTable profiles_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("profile document: top level must be an object");
  const auto schema = detail::require_field<std::string>(doc, "schema", "profile document");
  if (schema != kProfileSchema) {
    throw ParseError("profile document: unsupported schema '" + schema + "'");
  }
  std::vector<Dop> candidates{1, 2, 4, 8};
  if (doc.contains("dop_candidates")) {
    candidates = detail::require_field<std::vector<Dop>>(doc, "dop_candidates", "profile document");
  }
  std::vector<std::string> order;
  if (doc.contains("resolutions")) {
    order = detail::require_field<std::vector<std::string>>(doc, "resolutions", "profile document");
  }
  if (!doc.contains("records") || !doc.at("records").is_array()) {
    throw ParseError("profile document: 'records' must be an array");
  }
  std::vector<ProfileRecord> records;
  const auto& arr = doc.at("records");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "records[" + std::to_string(i) + "]";
    const auto& r = arr[i];
    if (!r.is_object()) throw ParseError(where + ": must be an object");
    ProfileRecord rec;
    rec.resolution = detail::require_field<std::string>(r, "resolution", where);
    rec.dop = detail::require_field<Dop>(r, "dop", where);
    rec.dit_step_seconds = detail::require_field<double>(r, "dit_step_seconds", where);
    if (r.contains("vae_seconds")) rec.vae_seconds = detail::require_field<double>(r, "vae_seconds", where);
    records.push_back(std::move(rec));
  }
  return ProfileTable(std::move(candidates), records, order);
}

inline nlohmann::json profiles_to_json(const ProfileTable& table) {
  nlohmann::json doc;
  doc["schema"] = std::string(kProfileSchema);
  doc["dop_candidates"] = table.dop_candidates();
  auto& order = doc["resolutions"] = nlohmann::json::array();
  for (const auto& r : table.resolutions()) order.push_back(r.name);
  auto& recs = doc["records"] = nlohmann::json::array();
  for (const auto& rec : table.records()) {
    nlohmann::json j{{"resolution", rec.resolution},
                     {"dop", rec.dop},
                     {"dit_step_seconds", rec.dit_step_seconds}};
    if (rec.vae_seconds) j["vae_seconds"] = *rec.vae_seconds;
    recs.push_back(std::move(j));
  }
  return doc;
}

inline ProfileTable load_profiles(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("profile document: ") + e.what());
  }
  return profiles_from_json(doc);
}

inline ProfileTable load_profiles_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open profile document " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return load_profiles(ss.str());
}

// Relative reduction of per-step DiT time when doubling DoP from i/2 to i.
inline double change_rate(const ProfileTable& table, std::string_view res, Dop i) {
  if (i < 2 || i % 2 != 0 || !table.is_candidate(i / 2)) {
    throw DomainError("change_rate: dop " + std::to_string(i) + " is not double a candidate");
  }
  const double half = table.dit_step_time(res, i / 2);
  const double full = table.dit_step_time(res, i);
  return 1.0 - full / half;
}

// The DoP whose doubling step gives the largest change rate. Falls back to 1
// when the best gain is below `gain_threshold`.
inline Dop optimal_dop(const ProfileTable& table, std::string_view res,
                       double gain_threshold = kDefaultGainThreshold) {
  Dop best = 1;
  double best_z = 0.0;
  bool any = false;
  for (Dop i : table.dop_candidates()) {
    if (i < 2) continue;
    if (!table.has(res, i) || !table.has(res, i / 2)) {
      throw LookupError("optimal_dop: incomplete profile for " + std::string(res) + " at dop " +
                        std::to_string(i));
    }
    const double z = change_rate(table, res, i);
    if (!any || z > best_z) {
      best = i;
      best_z = z;
      any = true;
    }
  }
  if (!any || best_z < gain_threshold) return 1;
  return best;
}

inline BValueTable derive_b_values(const ProfileTable& table,
                                   double gain_threshold = kDefaultGainThreshold, Dop vae_dop = 1) {
  if (!table.is_candidate(vae_dop)) throw ValidationError("vae_dop is not a dop candidate");
  BValueTable out;
  out.vae_dop = vae_dop;
  for (const auto& r : table.resolutions()) out.b[r.name] = optimal_dop(table, r.name, gain_threshold);
  return out;
}

// steps DiT steps at `dop` followed by the VAE phase at `vae_dop`.
inline double estimate_execution_time(const ProfileTable& table, std::string_view res, Dop dop,
                                      int steps, Dop vae_dop = 1) {
  if (steps <= 0) throw PreconditionError("estimate_execution_time: steps must be positive");
  return steps * table.dit_step_time(res, dop) + table.vae_time(res, vae_dop);
}

// Synthetic profile with the shape of the measured OpenSora numbers: B values
// 1/2/4 for 144p/240p/360p; 360p VAE is ~4.5% of a 30-step request at dop 1
// and ~14.3% at dop 4. All durations are dyadic so simulated clocks stay exact.
inline ProfileTable reference_profile() {
  std::vector<ProfileRecord> recs = {
      {"144p", 1, 0.125, 0.25},          {"144p", 2, 0.126953125, std::nullopt},
      {"144p", 4, 0.12890625, std::nullopt}, {"144p", 8, 0.1328125, std::nullopt},
      {"240p", 1, 0.296875, 0.5},        {"240p", 2, 0.1484375, std::nullopt},
      {"240p", 4, 0.125, std::nullopt},      {"240p", 8, 0.12109375, std::nullopt},
      {"360p", 1, 0.70703125, 1.0},      {"360p", 2, 0.3984375, std::nullopt},
      {"360p", 4, 0.19921875, std::nullopt}, {"360p", 8, 0.17578125, std::nullopt},
  };
  return ProfileTable({1, 2, 4, 8}, recs);
}

}  // namespace ddit

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddit/error.hpp"
#include "ddit/profile.hpp"

namespace ddit {

using GpuId = int;

// m nodes of n GPUs each. Sequence-parallel groups never span nodes.
struct ClusterTopology {
  int nodes = 1;
  int gpus_per_node = 8;

  int total() const { return nodes * gpus_per_node; }
  int node_of(GpuId g) const { return g / gpus_per_node; }

  void validate() const {
    if (nodes < 1) throw ValidationError("topology: node count must be >= 1");
    if (!is_power_of_two(gpus_per_node)) {
      throw ValidationError("topology: gpus_per_node must be a power of two");
    }
  }

  bool operator==(const ClusterTopology&) const = default;
};

// An aligned buddy block. id 0 is the empty handle.
struct AllocationHandle {
  std::uint64_t id = 0;
  std::vector<GpuId> gpu_ids;
  int order = -1;

  bool empty() const { return gpu_ids.empty(); }
  int size() const { return static_cast<int>(gpu_ids.size()); }
  GpuId front() const { return gpu_ids.front(); }
};

inline int log2_exact(int v) { return std::countr_zero(static_cast<unsigned>(v)); }

// Number of dop-p instances that fit in GPUs [first, first + length) without
// crossing a node boundary.
inline int bandwidth_aware_partition(const ClusterTopology& topo, GpuId first, int length, Dop p) {
  if (length < 1 || p < 1) return 0;
  int alpha = 0;
  GpuId g = first;
  const GpuId end = first + length;
  while (g < end) {
    const int node_end = (topo.node_of(g) + 1) * topo.gpus_per_node;
    const int in_node = std::min(end, node_end) - g;
    alpha += in_node / p;
    g += in_node;
  }
  return alpha;
}

// Same count, for an arbitrary set of (free) GPUs.
inline int bandwidth_aware_partition(const ClusterTopology& topo, const std::vector<GpuId>& gpus,
                                     Dop p) {
  std::map<int, int> per_node;
  for (GpuId g : gpus) ++per_node[topo.node_of(g)];
  int alpha = 0;
  for (const auto& [node, cnt] : per_node) alpha += cnt / p;
  return alpha;
}

// Buddy allocator over GPUs, one buddy tree per node, with a free bitmap kept
// in step with the free lists. Free blocks are always maximally coalesced.
class GpuPool {
 public:
  explicit GpuPool(ClusterTopology topo) : topo_(topo) {
    topo_.validate();
    max_order_ = log2_exact(topo_.gpus_per_node);
    free_.assign(topo_.nodes, std::vector<std::set<int>>(max_order_ + 1));
    bitmap_.assign(topo_.total(), true);
    for (int node = 0; node < topo_.nodes; ++node) free_[node][max_order_].insert(0);
  }

  const ClusterTopology& topology() const { return topo_; }

  int free_count() const {
    return static_cast<int>(std::count(bitmap_.begin(), bitmap_.end(), true));
  }
  bool is_free(GpuId g) const { return bitmap_.at(g); }
  const std::vector<bool>& free_bitmap() const { return bitmap_; }

  std::vector<GpuId> free_gpus() const {
    std::vector<GpuId> out;
    for (GpuId g = 0; g < topo_.total(); ++g) {
      if (bitmap_[g]) out.push_back(g);
    }
    return out;
  }

  // Smallest sufficient order first, lowest address within it. Returns
  // nullopt (pool untouched) when no block of `count` GPUs is available.
  std::optional<AllocationHandle> allocate(int count) {
    if (!is_power_of_two(count)) {
      throw PreconditionError("allocate: count " + std::to_string(count) + " is not a power of two");
    }
    if (count > topo_.gpus_per_node) return std::nullopt;
    const int want = log2_exact(count);
    for (int o = want; o <= max_order_; ++o) {
      for (int node = 0; node < topo_.nodes; ++node) {
        auto& list = free_[node][o];
        if (list.empty()) continue;
        const int local = *list.begin();
        list.erase(list.begin());
        for (int cur = o; cur > want; --cur) free_[node][cur - 1].insert(local + (1 << (cur - 1)));
        return take(node * topo_.gpus_per_node + local, want);
      }
    }
    return std::nullopt;
  }

  void release(const AllocationHandle& h) {
    auto it = live_.find(h.id);
    if (h.id == 0 || it == live_.end()) {
      throw UsageError("release: unknown or already released handle " + std::to_string(h.id));
    }
    const auto [start, order] = it->second;
    live_.erase(it);
    give_back(start, order);
  }

  // Grow `held` toward `target` GPUs, or start a new allocation when `held`
  // is empty. Sizes are tried in descending candidate order; a held block
  // only grows into the aligned block of the larger size that contains it.
  AllocationHandle try_best_alloc(Dop target, const AllocationHandle& held,
                                  const std::vector<Dop>& candidates) {
    if (std::find(candidates.begin(), candidates.end(), target) == candidates.end()) {
      throw PreconditionError("try_best_alloc: target is not a dop candidate");
    }
    if (held.size() >= target) {
      throw PreconditionError("try_best_alloc: already holding the target size");
    }
    std::vector<Dop> sizes(candidates.rbegin(), candidates.rend());
    if (held.empty()) {
      for (Dop c : sizes) {
        if (c > target) continue;
        if (auto h = allocate(c)) return std::move(*h);
      }
      return {};
    }
    auto it = live_.find(held.id);
    if (it == live_.end()) throw UsageError("try_best_alloc: held handle is not live");
    for (Dop c : sizes) {
      if (c > target || c <= held.size()) continue;
      if (auto grown = grow(it->second, c)) {
        live_.erase(held.id);
        return std::move(*grown);
      }
    }
    return held;
  }

  // Keep the `keep` lowest-id GPUs of `h`; the remainder goes back to the
  // free lists. Returns the retained handle and the released GPUs.
  std::pair<AllocationHandle, std::vector<GpuId>> shrink(const AllocationHandle& h, int keep) {
    if (h.empty()) throw UsageError("shrink: empty handle");
    return shrink(h, h.front(), keep);
  }

  // Keep the aligned sub-block of `keep` GPUs starting at `keep_start`.
  std::pair<AllocationHandle, std::vector<GpuId>> shrink(const AllocationHandle& h,
                                                         GpuId keep_start, int keep) {
    auto it = live_.find(h.id);
    if (h.id == 0 || it == live_.end()) throw UsageError("shrink: handle is not live");
    if (!is_power_of_two(keep) || keep > h.size()) {
      throw PreconditionError("shrink: keep must be a power of two no larger than the handle");
    }
    const auto [start, order] = it->second;
    if (keep_start < start || keep_start + keep > start + (1 << order) || keep_start % keep != 0) {
      throw PreconditionError("shrink: retained block is not an aligned sub-block of the handle");
    }
    if (keep == h.size()) return {h, {}};
    live_.erase(it);
    const int keep_order = log2_exact(keep);
    std::vector<GpuId> released;
    for (int l = keep_order; l < order; ++l) {
      const GpuId base = start + (((keep_start - start) >> l) << l);
      const GpuId part = start + ((((base - start) >> l) ^ 1) << l);
      for (int g = 0; g < (1 << l); ++g) released.push_back(part + g);
      give_back(part, l);
    }
    std::sort(released.begin(), released.end());
    // Retained GPUs were never freed; re-register them under a new id.
    return {register_live(keep_start, keep_order), released};
  }

  bool is_live(const AllocationHandle& h) const { return live_.count(h.id) != 0; }
  std::size_t live_count() const { return live_.size(); }

  // Empty when the pool is consistent, otherwise a description of the first
  // violation found.
  std::optional<std::string> check_invariants() const {
    const int total = topo_.total();
    std::vector<int> owner(total, 0);  // 0 none, 1 free block, 2 live block
    for (int node = 0; node < topo_.nodes; ++node) {
      for (int o = 0; o <= max_order_; ++o) {
        for (int local : free_[node][o]) {
          const int size = 1 << o;
          if (local % size != 0 || local + size > topo_.gpus_per_node) {
            return "free block misaligned at node " + std::to_string(node) + " local " +
                   std::to_string(local) + " order " + std::to_string(o);
          }
          if (o < max_order_ && free_[node][o].count(local ^ size)) {
            return "uncoalesced buddies at node " + std::to_string(node) + " order " +
                   std::to_string(o);
          }
          for (int g = 0; g < size; ++g) {
            const GpuId id = node * topo_.gpus_per_node + local + g;
            if (owner[id] != 0) return "gpu " + std::to_string(id) + " in two blocks";
            owner[id] = 1;
            if (!bitmap_[id]) return "gpu " + std::to_string(id) + " in free list but busy in bitmap";
          }
        }
      }
    }
    for (const auto& [id, blk] : live_) {
      const auto [start, order] = blk;
      const int size = 1 << order;
      const int local = start % topo_.gpus_per_node;
      if (local % size != 0 || local + size > topo_.gpus_per_node) {
        return "live block " + std::to_string(id) + " misaligned";
      }
      for (int g = 0; g < size; ++g) {
        if (owner[start + g] != 0) return "gpu " + std::to_string(start + g) + " double-owned";
        owner[start + g] = 2;
        if (bitmap_[start + g]) return "gpu " + std::to_string(start + g) + " live but free in bitmap";
      }
    }
    for (GpuId g = 0; g < total; ++g) {
      if (owner[g] == 0) return "gpu " + std::to_string(g) + " neither free nor allocated";
    }
    return std::nullopt;
  }

  // Debug snapshot: free bitmap as a 0/1 string plus per-node buddy lists.
  nlohmann::json dump() const {
    std::string bits;
    for (bool b : bitmap_) bits.push_back(b ? '1' : '0');
    nlohmann::json nodes = nlohmann::json::array();
    for (int node = 0; node < topo_.nodes; ++node) {
      nlohmann::json orders = nlohmann::json::object();
      for (int o = 0; o <= max_order_; ++o) {
        std::vector<GpuId> starts;
        for (int local : free_[node][o]) starts.push_back(node * topo_.gpus_per_node + local);
        orders[std::to_string(o)] = starts;
      }
      nodes.push_back({{"node", node}, {"free_blocks", orders}});
    }
    return {{"free_bitmap", bits}, {"buddy_lists", nodes}};
  }

  // Pool state equality ignoring handle ids.
  bool same_state(const GpuPool& o) const {
    if (!(topo_ == o.topo_) || bitmap_ != o.bitmap_ || free_ != o.free_) return false;
    std::vector<std::pair<GpuId, int>> a, b;
    for (const auto& [id, blk] : live_) a.push_back(blk);
    for (const auto& [id, blk] : o.live_) b.push_back(blk);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return a == b;
  }

 private:
  AllocationHandle take(GpuId start, int order) {
    for (int g = 0; g < (1 << order); ++g) bitmap_[start + g] = false;
    return register_live(start, order);
  }

  AllocationHandle register_live(GpuId start, int order) {
    AllocationHandle h;
    h.id = next_id_++;
    h.order = order;
    for (int g = 0; g < (1 << order); ++g) h.gpu_ids.push_back(start + g);
    live_[h.id] = {start, order};
    return h;
  }

  void give_back(GpuId start, int order) {
    const int node = topo_.node_of(start);
    for (int g = 0; g < (1 << order); ++g) bitmap_[start + g] = true;
    int local = start % topo_.gpus_per_node;
    while (order < max_order_) {
      const int buddy = local ^ (1 << order);
      auto& list = free_[node][order];
      auto it = list.find(buddy);
      if (it == list.end()) break;
      list.erase(it);
      local = std::min(local, buddy);
      ++order;
    }
    free_[node][order].insert(local);
  }

  // Every buddy on the path from the held block up to the aligned block of
  // `count` GPUs must itself be a free block of exactly that order.
  std::optional<AllocationHandle> grow(std::pair<GpuId, int> held, int count) {
    if (count > topo_.gpus_per_node) return std::nullopt;
    const auto [start, order] = held;
    const int node = topo_.node_of(start);
    const int local = start % topo_.gpus_per_node;
    const int target_order = log2_exact(count);
    for (int l = order; l < target_order; ++l) {
      const int base = local & ~((1 << l) - 1);
      if (!free_[node][l].count(base ^ (1 << l))) return std::nullopt;
    }
    for (int l = order; l < target_order; ++l) {
      const int buddy = (local & ~((1 << l) - 1)) ^ (1 << l);
      free_[node][l].erase(buddy);
      const GpuId gstart = node * topo_.gpus_per_node + buddy;
      for (int g = 0; g < (1 << l); ++g) bitmap_[gstart + g] = false;
    }
    const int new_local = local & ~(count - 1);
    return register_live(node * topo_.gpus_per_node + new_local, target_order);
  }

  ClusterTopology topo_;
  int max_order_ = 0;
  std::vector<std::vector<std::set<int>>> free_;  // [node][order] -> local starts
  std::vector<bool> bitmap_;                      // true = free
  std::map<std::uint64_t, std::pair<GpuId, int>> live_;
  std::uint64_t next_id_ = 1;
};

}  // namespace ddit

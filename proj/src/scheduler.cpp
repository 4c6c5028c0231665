#include "gfe/scheduler.hpp"

#include <algorithm>
#include <stdexcept>

namespace gfe {

std::vector<BucketId> inside_out_order(int source_partitions, int dest_partitions) {
  if (source_partitions < 1 || dest_partitions < 1) throw std::invalid_argument("partition counts must be >= 1");
  std::vector<BucketId> order;
  auto emit = [&](int s, int d) {
    if (s < source_partitions && d < dest_partitions) order.push_back({s, d});
  };
  const int shells = std::max(source_partitions, dest_partitions);
  for (int k = 0; k < shells; ++k) {
    for (int m = 0; m < k; ++m) {
      emit(k, m);
      emit(m, k);
    }
    emit(k, k);
  }
  return order;
}

BucketScheduler::BucketScheduler(int source_partitions, int dest_partitions)
    : source_partitions_(source_partitions),
      dest_partitions_(dest_partitions),
      order_(inside_out_order(source_partitions, dest_partitions)) {}

std::vector<int> BucketScheduler::partitions_of(BucketId b) const {
  std::vector<int> parts;
  if (source_partitions_ > 1) parts.push_back(b.src);
  if (dest_partitions_ > 1 && std::find(parts.begin(), parts.end(), b.dst) == parts.end()) parts.push_back(b.dst);
  return parts;
}

std::vector<int> BucketScheduler::held_by(int requester) const {
  std::vector<int> held;
  for (const auto& [part, owner] : locks_) {
    if (owner == requester) held.push_back(part);
  }
  return held;
}

std::optional<BucketId> BucketScheduler::acquire(int requester) {
  std::optional<BucketId> best;
  int best_reuse = -1;
  for (const auto& b : order_) {
    if (completed_.count(b) || active_.count(b)) continue;
    const auto parts = partitions_of(b);
    bool free = true;
    int reuse = 0;
    // With one partitioned side the other side is always shared.
    bool touches_initialized = source_partitions_ == 1 || dest_partitions_ == 1;
    for (int p : parts) {
      auto it = locks_.find(p);
      if (it != locks_.end()) {
        if (it->second != requester) {
          free = false;
          break;
        }
        ++reuse;
      }
      if (initialized_.count(p)) touches_initialized = true;
    }
    if (!free) continue;
    // Only the first bucket may start from two uninitialized partitions.
    if (!touches_initialized && !(initialized_.empty() && active_.empty())) continue;
    if (reuse > best_reuse) {
      best = b;
      best_reuse = reuse;
    }
  }
  if (!best) return std::nullopt;
  for (int p : partitions_of(*best)) locks_[p] = requester;
  active_[*best] = requester;
  return best;
}

void BucketScheduler::complete(int requester, BucketId bucket) {
  auto it = active_.find(bucket);
  if (it == active_.end() || it->second != requester) {
    throw std::logic_error("bucket " + bucket.str() + " is not active for this requester");
  }
  active_.erase(it);
  completed_.insert(bucket);
  for (int p : partitions_of(bucket)) initialized_.insert(p);
}

void BucketScheduler::unlock(int requester, const std::vector<int>& partitions) {
  for (int p : partitions) {
    auto it = locks_.find(p);
    if (it == locks_.end() || it->second != requester) continue;
    // A partition still used by one of the requester's active buckets stays locked.
    bool in_use = false;
    for (const auto& [b, owner] : active_) {
      if (owner != requester) continue;
      const auto parts = partitions_of(b);
      in_use = in_use || std::find(parts.begin(), parts.end(), p) != parts.end();
    }
    if (!in_use) locks_.erase(it);
  }
}

void BucketScheduler::release_requester(int requester) {
  for (auto it = active_.begin(); it != active_.end();) {
    it = it->second == requester ? active_.erase(it) : std::next(it);
  }
  for (auto it = locks_.begin(); it != locks_.end();) {
    it = it->second == requester ? locks_.erase(it) : std::next(it);
  }
}

void BucketScheduler::start_epoch() {
  completed_.clear();
  ++epoch_;
}

}  // namespace gfe

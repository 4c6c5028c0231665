#pragma once

// Bucket ordering and the lock policy that hands buckets to workers.

#include <chrono>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace gfe {

struct BucketId {
  int src = 0;
  int dst = 0;
  auto operator<=>(const BucketId&) const = default;
  std::string str() const { return "(" + std::to_string(src) + "," + std::to_string(dst) + ")"; }
};

// Shells k = 0, 1, ...: shell k holds buckets with max(src, dst) == k, emitted
// as (k,0), (0,k), (k,1), (1,k), ..., (k,k-1), (k-1,k), (k,k). Buckets outside
// the grid are skipped, so a P x 1 grid yields (0,0), (1,0), ..., (P-1,0).
// Every bucket after the first shares its source or destination partition
// with an earlier bucket.
std::vector<BucketId> inside_out_order(int source_partitions, int dest_partitions);
inline std::vector<BucketId> inside_out_order(int num_partitions) {
  return inside_out_order(num_partitions, num_partitions);
}

inline constexpr std::chrono::milliseconds kDefaultRetryAfter{1000};

// Lock-server state. Partitions are locked by index; only partitioned sides
// of the grid take part in locking. Not thread-safe: callers serialize access.
class BucketScheduler {
 public:
  BucketScheduler(int source_partitions, int dest_partitions);

  // Picks an uncompleted, inactive bucket whose partitions are free or
  // already held by `requester`, preferring buckets that reuse more held
  // partitions, then inside-out order. On a grid partitioned on both sides, a
  // bucket whose partitions are all uninitialized is granted only as the very
  // first bucket. Locks the grant.
  std::optional<BucketId> acquire(int requester);

  // Marks an active bucket done; its partitions become initialized. Locks stay.
  void complete(int requester, BucketId bucket);
  // Releases the listed partitions if `requester` holds them.
  void unlock(int requester, const std::vector<int>& partitions);
  // Drops every lock and active bucket of `requester`; active buckets become
  // available again (the disconnect path).
  void release_requester(int requester);

  bool epoch_complete() const { return completed_.size() == order_.size(); }
  // Clears the completed set. Initialized partitions persist across epochs.
  void start_epoch();

  // Partition indices the bucket locks.
  std::vector<int> partitions_of(BucketId bucket) const;
  std::vector<int> held_by(int requester) const;
  const std::map<int, int>& locks() const { return locks_; }  // partition -> owner
  const std::map<BucketId, int>& active() const { return active_; }
  const std::set<int>& initialized() const { return initialized_; }
  const std::set<BucketId>& completed() const { return completed_; }
  const std::vector<BucketId>& order() const { return order_; }
  int epoch() const { return epoch_; }

 private:
  int source_partitions_;
  int dest_partitions_;
  std::vector<BucketId> order_;
  std::set<BucketId> completed_;
  std::map<BucketId, int> active_;
  std::map<int, int> locks_;
  std::set<int> initialized_;
  int epoch_ = 0;
};

}  // namespace gfe

#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "gfe/scheduler.hpp"

using namespace gfe;

namespace {

bool shares_partition(BucketId a, BucketId b) { return a.src == b.src || a.dst == b.dst || a.src == b.dst || a.dst == b.src; }

// Every bucket after the first shares its source or destination partition
// with an earlier bucket.
bool trained_partition_invariant(const std::vector<BucketId>& order) {
  std::set<int> seen_src, seen_dst;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0 && !seen_src.count(order[i].src) && !seen_dst.count(order[i].dst)) return false;
    seen_src.insert(order[i].src);
    seen_dst.insert(order[i].dst);
  }
  return true;
}

}  // namespace

TEST_CASE("inside-out order examples") {
  CHECK(inside_out_order(1) == std::vector<BucketId>{{0, 0}});
  CHECK(inside_out_order(2) == std::vector<BucketId>{{0, 0}, {1, 0}, {0, 1}, {1, 1}});
  CHECK(inside_out_order(3) ==
        std::vector<BucketId>{{0, 0}, {1, 0}, {0, 1}, {1, 1}, {2, 0}, {0, 2}, {2, 1}, {1, 2}, {2, 2}});
  CHECK(inside_out_order(3, 1) == std::vector<BucketId>{{0, 0}, {1, 0}, {2, 0}});
  CHECK_THROWS(inside_out_order(0));
}

TEST_CASE("inside-out order is a permutation satisfying the trained-partition invariant") {
  for (int p = 1; p <= 16; ++p) {
    const auto order = inside_out_order(p);
    CHECK(order.size() == static_cast<std::size_t>(p * p));
    CHECK(std::set<BucketId>(order.begin(), order.end()).size() == order.size());
    for (const auto& b : order) {
      CHECK(b.src >= 0);
      CHECK(b.src < p);
      CHECK(b.dst >= 0);
      CHECK(b.dst < p);
    }
    CHECK(trained_partition_invariant(order));
  }
}

TEST_CASE("fresh state grants (0,0) first") {
  BucketScheduler s(4, 4);
  const auto b = s.acquire(0);
  REQUIRE(b);
  CHECK(*b == BucketId{0, 0});
  CHECK(s.locks().count(0));
  // A second worker gets nothing: every remaining bucket either touches
  // partition 0 or is doubly uninitialized.
  CHECK_FALSE(s.acquire(1));
}

TEST_CASE("reuse preference and the doubly-uninitialized rule") {
  BucketScheduler s(4, 4);
  REQUIRE(*s.acquire(0) == BucketId{0, 0});
  s.complete(0, {0, 0});
  s.unlock(0, {0});
  // Drive worker A to hold {0,1} after finishing (0,1).
  auto b = s.acquire(0);
  REQUIRE(b);
  CHECK(*b == BucketId{1, 0});
  s.complete(0, *b);
  b = s.acquire(0);
  REQUIRE(b);
  CHECK(*b == BucketId{0, 1});
  s.complete(0, *b);
  // Partitions 2 and 3 are free and uninitialized, so (2,3) is barred;
  // (1,1) reuses a held partition.
  b = s.acquire(0);
  REQUIRE(b);
  CHECK(*b == BucketId{1, 1});
}

TEST_CASE("a worker that keeps its locks accumulates reuse") {
  BucketScheduler s(4, 4);
  REQUIRE(*s.acquire(0) == BucketId{0, 0});
  s.complete(0, {0, 0});
  auto b = s.acquire(0);
  REQUIRE(b);
  s.complete(0, *b);
  b = s.acquire(0);
  REQUIRE(b);
  s.complete(0, *b);
  CHECK(s.completed().count({1, 0}));
  CHECK(s.completed().count({0, 1}));
  CHECK(s.held_by(0) == std::vector<int>{0, 1});
  CHECK(s.initialized() == std::set<int>{0, 1});
}

TEST_CASE("two workers with P=2 never run concurrently") {
  BucketScheduler s(2, 2);
  std::set<BucketId> granted;
  for (int round = 0; round < 4; ++round) {
    const auto a = s.acquire(0);
    REQUIRE(a);
    CHECK_FALSE(s.acquire(1));
    granted.insert(*a);
    s.complete(0, *a);
    s.unlock(0, s.partitions_of(*a));
  }
  CHECK(granted.size() == 4);
  CHECK(s.epoch_complete());
  CHECK_FALSE(s.acquire(0));
}

TEST_CASE("single requester P=2 gets each bucket exactly once per epoch") {
  BucketScheduler s(2, 2);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::vector<BucketId> seq;
    while (auto b = s.acquire(7)) {
      seq.push_back(*b);
      s.complete(7, *b);
    }
    CHECK(seq.size() == 4);
    CHECK(std::set<BucketId>(seq.begin(), seq.end()).size() == 4);
    CHECK(s.epoch_complete());
    s.start_epoch();
  }
  CHECK(s.epoch() == 3);
}

TEST_CASE("disconnect releases locks and makes the bucket available again") {
  BucketScheduler s(4, 4);
  const auto b = s.acquire(0);
  REQUIRE(b);
  s.release_requester(0);
  CHECK(s.locks().empty());
  CHECK(s.active().empty());
  const auto again = s.acquire(1);
  REQUIRE(again);
  CHECK(*again == *b);
}

TEST_CASE("complete rejects buckets not active for the requester") {
  BucketScheduler s(2, 2);
  const auto b = s.acquire(0);
  REQUIRE(b);
  CHECK_THROWS_AS(s.complete(1, *b), std::logic_error);
  CHECK_THROWS_AS(s.complete(0, {1, 1}), std::logic_error);
}

TEST_CASE("P x 1 grids lock only source partitions") {
  BucketScheduler s(4, 1);
  CHECK(s.partitions_of({2, 0}) == std::vector<int>{2});
  const auto first = s.acquire(0);
  REQUIRE(first);
  CHECK(*first == BucketId{0, 0});
  // Another worker can train a disjoint source partition concurrently.
  const auto second = s.acquire(1);
  REQUIRE(second);
  CHECK(*second == BucketId{1, 0});
  s.complete(0, *first);
  s.unlock(0, {0});
  std::set<BucketId> seen{*first, *second};
  s.complete(1, *second);
  while (auto b = s.acquire(1)) {
    seen.insert(*b);
    s.complete(1, *b);
  }
  CHECK(seen.size() == 4);
  CHECK(s.epoch_complete());
}

TEST_CASE("randomized interleavings never overlap locks or grant doubly-uninitialized buckets") {
  std::mt19937_64 rng(2024);
  std::int64_t grants = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int p = std::uniform_int_distribution<int>(1, 8)(rng);
    const int workers = std::uniform_int_distribution<int>(1, 4)(rng);
    BucketScheduler s(p, p);
    std::vector<std::optional<BucketId>> current(static_cast<std::size_t>(workers));
    int epochs = 0;
    std::size_t peak = 0;
    for (int step = 0; step < 400 && epochs < 2; ++step) {
      const int w = std::uniform_int_distribution<int>(0, workers - 1)(rng);
      auto& cur = current[static_cast<std::size_t>(w)];
      const int action = std::uniform_int_distribution<int>(0, 9)(rng);
      if (!cur) {
        const auto before_init = s.initialized();
        const bool fresh = before_init.empty() && s.active().empty();
        const auto b = s.acquire(w);
        if (!b) {
          if (s.epoch_complete() && std::all_of(current.begin(), current.end(), [](auto& c) { return !c; })) {
            s.start_epoch();
            ++epochs;
          }
          continue;
        }
        ++grants;
        const auto parts = s.partitions_of(*b);
        const bool touches = std::any_of(parts.begin(), parts.end(), [&](int q) { return before_init.count(q); });
        REQUIRE_MESSAGE((touches || parts.empty() || fresh), "doubly-uninitialized grant after the first");
        // No two active buckets of different owners share a partition.
        for (const auto& [other, owner] : s.active()) {
          if (other == *b) continue;
          if (owner != w) REQUIRE_FALSE(shares_partition(other, *b));
        }
        peak = std::max(peak, s.locks().size());
        cur = b;
      } else if (action == 0) {
        // Disconnect mid-bucket.
        s.release_requester(w);
        cur.reset();
      } else {
        s.complete(w, *cur);
        const auto parts = s.partitions_of(*cur);
        std::vector<int> drop;
        for (int q : parts) {
          if (std::uniform_int_distribution<int>(0, 1)(rng)) drop.push_back(q);
        }
        s.unlock(w, drop);
        cur.reset();
      }
    }
    if (p % 2 == 0) REQUIRE(peak <= static_cast<std::size_t>(2 * (p / 2)));
  }
  CHECK(grants > 10000);
}

#pragma once

// Multi-process training: a lock server handing out buckets, partition
// servers holding embedding partitions between buckets, parameter servers
// holding shared parameters (relation operators, unpartitioned entity
// types), and the trainer loop that drives them.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "gfe/checkpoint.hpp"
#include "gfe/config.hpp"
#include "gfe/ingest.hpp"
#include "gfe/net.hpp"
#include "gfe/scheduler.hpp"
#include "gfe/trainer.hpp"
#include "gfe/wire.hpp"

namespace gfe {

// Static cluster description, a JSON file:
//   {"lock_server": "host:port", "partition_servers": ["host:port", ...],
//    "param_servers": ["host:port", ...], "num_trainers": N,
//    "dataset_dir": "...", "checkpoint_dir": "...",
//    "sync_period_ms": 100, "sync_bandwidth_bytes_per_sec": 0,
//    "connect_timeout_ms": 30000}
// Servers bind to their listed address; GFE_BIND_ADDRESS replaces the host.
struct ClusterManifest {
  Endpoint lock_server;
  std::vector<Endpoint> partition_servers;
  std::vector<Endpoint> param_servers;
  int num_trainers = 1;
  std::filesystem::path dataset_dir;
  std::filesystem::path checkpoint_dir;
  int sync_period_ms = 100;
  double sync_bandwidth_bytes_per_sec = 0;  // 0 = unthrottled
  int connect_timeout_ms = 30000;

  static ClusterManifest parse(std::string_view json_text);
  static ClusterManifest load(const std::filesystem::path& path);
  std::string json() const;
};

int partition_shard(const PartKey& key, int num_shards);
int param_shard(const ParamKey& key, int num_shards);

// ---- lock server ----

struct LockEvent {
  enum class Kind { grant, complete, unlock, disconnect };
  double seconds = 0;  // since service start
  ConnId requester = 0;
  Kind kind = Kind::grant;
  int round = 0;
  BucketId bucket;
  std::vector<int> partitions;  // locked (grant) or unlocked (unlock, disconnect)
  std::string line() const;
};

// Replays a lock trace and returns a description of the first moment two
// requesters held the same partition, if any.
std::optional<std::string> audit_lock_trace(const std::vector<LockEvent>& trace);

class LockService : public Service {
 public:
  LockService(int source_partitions, int dest_partitions, std::uint32_t retry_after_ms = 20);

  Outbox handle(ConnId conn, const Frame& frame) override;
  Outbox on_disconnect(ConnId conn) override;

  std::vector<LockEvent> trace() const;
  // Called with each event's line as it is recorded.
  void set_trace_sink(std::function<void(const std::string&)> sink);
  int round() const;

 private:
  void record(LockEvent event);
  Outbox resolve_barriers();

  mutable std::mutex mutex_;
  BucketScheduler scheduler_;
  std::uint32_t retry_after_ms_;
  int round_ = 0;
  std::chrono::steady_clock::time_point start_;
  std::vector<LockEvent> trace_;
  std::function<void(const std::string&)> sink_;
  std::set<ConnId> trainers_;
  int departed_ = 0;
  struct Barrier {
    std::uint32_t participants = 1;
    std::set<ConnId> waiting;
    bool resolved = false;
  };
  std::map<int, Barrier> barriers_;
};

// ---- partition server ----

class PartitionService : public Service {
 public:
  PartitionService(int shard, int num_shards, std::optional<std::filesystem::path> spill_dir = {});

  Outbox handle(ConnId conn, const Frame& frame) override;
  Outbox on_disconnect(ConnId conn) override;

  void store(const PartKey& key, std::string blob);
  std::optional<std::string> load(const PartKey& key) const;
  // Accesses by one connection to a partition another connection had taken
  // with a non-snapshot GET and not yet PUT back.
  std::vector<std::string> overlaps() const;
  std::size_t stored() const;

 private:
  void check_owner(const PartKey& key, ConnId conn, const char* op);

  int shard_, num_shards_;
  std::optional<std::filesystem::path> spill_dir_;
  mutable std::mutex mutex_;
  std::map<PartKey, std::shared_ptr<const std::string>> blobs_;
  std::set<PartKey> spilled_;
  std::map<PartKey, ConnId> owner_;
  std::vector<std::string> overlaps_;
};

// ---- parameter server ----

// Relation operator parameters and unpartitioned entity tables, initialized
// from a checkpoint when one matches the model, else freshly.
struct SharedState {
  RelationState relations;
  std::map<int, EmbeddingPartition> unpartitioned;  // by entity type
};
SharedState initial_shared_state(const Config& config, const DatasetMeta& meta,
                                 const std::filesystem::path& checkpoint_dir);
std::vector<ParamKey> shared_param_keys(const Config& config, const DatasetMeta& meta);

class ParamService : public Service {
 public:
  ParamService(const Config& config, const DatasetMeta& meta, const SharedState& state, int shard, int num_shards);

  Outbox handle(ConnId conn, const Frame& frame) override;

  ParamBlock snapshot(const ParamKey& key, bool with_accumulators = true) const;
  // (connection, version after the push) per push, in application order.
  std::vector<std::pair<ConnId, std::uint64_t>> push_log(const ParamKey& key) const;
  std::vector<ParamKey> keys() const;

 private:
  struct Entry {
    mutable std::mutex mutex;
    bool rowwise = false;  // entity block: row Adagrad; relation: elementwise
    int dim = 0;
    float lr = 0;
    std::vector<float> values, accumulators;
    std::uint64_t version = 0;
    std::vector<std::pair<ConnId, std::uint64_t>> log;
  };
  void apply(Entry& entry, const ParamPushEntry& push, ConnId conn);

  std::map<ParamKey, std::unique_ptr<Entry>> entries_;
};

// ---- trainer side ----

struct SyncStats {
  std::int64_t rounds = 0;
  std::int64_t failures = 0;
  std::uint64_t bytes = 0;
};

// Accumulates local gradients of shared parameters, pushes them and replaces
// local copies with server values. Local copies are overwritten while
// training threads read them, as in HOGWILD.
class ParamClient : public SharedGradSink {
 public:
  struct Options {
    std::chrono::milliseconds period{100};
    double bandwidth_bytes_per_sec = 0;
    std::chrono::milliseconds connect_timeout{30000};
  };

  ParamClient(const Config& config, const DatasetMeta& meta, std::vector<Endpoint> servers, RelationState& relations,
              std::map<int, EmbeddingPartition*> unpartitioned, Options options);
  ~ParamClient() override;

  void add_relation(int relation, Side side, std::span<const float> grad) override;
  void add_entity_row(int entity_type, std::int64_t row, std::span<const float> grad) override;

  // One push and fetch round. Returns false (gradients kept) on network failure.
  bool sync_once();
  // Repeats sync_once with backoff until it succeeds; throws NetworkError after `timeout`.
  void sync_blocking(std::chrono::milliseconds timeout);
  std::vector<ParamBlock> fetch_all(bool with_accumulators);

  void start();
  void stop();
  SyncStats stats() const;

 private:
  FramedConnection& connection(std::size_t shard);
  void requeue(const ParamPushEntry& entry);
  void install(const ParamBlock& block);

  const Config& config_;
  std::vector<ParamKey> keys_;
  std::vector<Endpoint> servers_;
  RelationState& relations_;
  std::map<int, EmbeddingPartition*> unpartitioned_;
  Options options_;

  std::mutex pending_mutex_;
  std::map<std::pair<int, int>, std::vector<float>> relation_pending_;
  std::map<int, std::map<std::int64_t, std::vector<float>>> entity_pending_;

  std::mutex sync_mutex_;
  std::vector<std::unique_ptr<FramedConnection>> connections_;
  mutable std::mutex stats_mutex_;
  SyncStats stats_;

  std::mutex loop_mutex_;
  std::condition_variable loop_cv_;
  bool stop_ = false;
  std::thread loop_;
};

struct DistributedOptions {
  int rank = 0;
  ClusterManifest cluster;
  std::optional<int> num_epochs;
  std::function<void(const BucketLog&)> on_bucket;
};

struct DistributedResult {
  CheckpointManifest manifest;  // last checkpoint (written by rank 0)
  std::vector<BucketLog> buckets;
  std::vector<double> epoch_seconds;
  std::int64_t partition_gets = 0, partition_puts = 0, partition_cold_starts = 0;
  std::size_t peak_resident_bytes = 0;
  SyncStats sync;
};

// Runs one trainer of the cluster until the configured epochs are done.
DistributedResult distributed_train(const Config& config, const DistributedOptions& options);

// Service construction shared by the CLI and in-process tests. Partition and
// parameter services start from the checkpoint in cluster.checkpoint_dir when
// its manifest matches the model.
std::unique_ptr<LockService> make_lock_service(const Config& config);
std::unique_ptr<PartitionService> make_partition_service(const Config& config, const ClusterManifest& cluster,
                                                         int shard,
                                                         std::optional<std::filesystem::path> spill_dir = {});
std::unique_ptr<ParamService> make_param_service(const Config& config, const ClusterManifest& cluster, int shard);

}  // namespace gfe

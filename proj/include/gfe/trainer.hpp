#pragma once

// Single-machine training: partition swapping, bucket iteration and HOGWILD
// workers inside a bucket.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gfe/checkpoint.hpp"
#include "gfe/config.hpp"
#include "gfe/ingest.hpp"
#include "gfe/negatives.hpp"
#include "gfe/scheduler.hpp"

namespace gfe {

// Tracks resident embedding memory. Counts rows of partitioned entity types
// separately so the two-partitions-per-type bound can be checked.
class ResidencyCounter {
 public:
  explicit ResidencyCounter(std::size_t num_types = 0) : per_type_(num_types, 0), peak_per_type_(num_types, 0) {}

  void add(int type, std::int64_t rows, std::size_t bytes, bool partitioned);
  void remove(int type, std::int64_t rows, std::size_t bytes, bool partitioned);

  std::size_t resident_bytes() const { return bytes_; }
  std::size_t peak_bytes() const { return peak_bytes_; }
  int resident_partitions(int type) const { return per_type_[static_cast<std::size_t>(type)]; }
  int peak_partitions(int type) const { return peak_per_type_[static_cast<std::size_t>(type)]; }
  std::int64_t partitioned_rows() const { return partitioned_rows_; }
  std::int64_t peak_partitioned_rows() const { return peak_partitioned_rows_; }
  std::int64_t loads() const { return loads_; }
  std::int64_t writes() const { return writes_; }
  void note_write() { ++writes_; }

 private:
  std::size_t bytes_ = 0, peak_bytes_ = 0;
  std::vector<int> per_type_, peak_per_type_;
  std::int64_t partitioned_rows_ = 0, peak_partitioned_rows_ = 0;
  std::int64_t loads_ = 0, writes_ = 0;
};

// Receives gradients of shared parameters as they are applied locally
// (the parameter-server client accumulates them for pushing). Shared
// parameters are relation operators and rows of unpartitioned entity types.
class SharedGradSink {
 public:
  virtual ~SharedGradSink() = default;
  virtual void add_relation(int relation, Side side, std::span<const float> grad) = 0;
  // Summed gradient for one row, as applied by one Adagrad step.
  virtual void add_entity_row(int entity_type, std::int64_t row, std::span<const float> grad) = 0;
};

// Instrumentation: sees every chunk's candidate ids before scoring.
class ChunkObserver {
 public:
  virtual ~ChunkObserver() = default;
  // `src_table`/`dst_table` are the tables candidates were drawn from.
  virtual void on_chunk(const EmbeddingPartition& src_table, const EmbeddingPartition& dst_table,
                        std::span<const std::int64_t> src_candidates, std::span<const std::int64_t> dst_candidates) = 0;
};

// Tables resident for one bucket, indexed by entity type. For partitioned
// types these are the bucket's source / destination partitions; for
// unpartitioned types both point at partition 0.
struct BucketTables {
  std::vector<EmbeddingPartition*> source;
  std::vector<EmbeddingPartition*> dest;
};

struct TrainStats {
  std::int64_t edges = 0;
  std::int64_t negatives = 0;
  double loss_sum = 0;
  double seconds = 0;
  std::optional<double> mean_loss() const {
    return edges == 0 ? std::nullopt : std::optional<double>(loss_sum / static_cast<double>(edges));
  }
};

struct BucketTrainOptions {
  ChunkObserver* observer = nullptr;
  SharedGradSink* shared_sink = nullptr;
};

// Shuffles `edges` (seeded by `bucket_seed`), splits them into num_workers
// contiguous shards and trains each shard on its own thread without
// synchronization. Within a shard, batches hold edges of one relation
// (identity relations with equal similarity and entity types share batches).
TrainStats train_bucket(std::span<const EdgeRecord> edges, const BucketTables& tables, RelationState& relations,
                        const Config& config, std::uint64_t bucket_seed, const BucketTrainOptions& options = {});

// Per-bucket structured log record.
struct BucketLog {
  int epoch = 0;
  int pass = 0;
  BucketId bucket;
  std::int64_t edges = 0;
  std::optional<double> mean_loss;
  double seconds = 0;
  std::string line() const;
};

struct RunOptions {
  std::filesystem::path dataset_dir;
  std::filesystem::path checkpoint_dir;
  std::optional<int> num_epochs;  // overrides the config
  // Stop after this many epochs in this invocation (resume testing).
  std::optional<int> stop_after_epochs;
  std::function<void(const BucketLog&)> on_bucket;
  std::function<void(int epoch, const ResidencyCounter&)> on_epoch;
  std::function<void(const ResidencyCounter&)> on_swap;  // after every load
  ChunkObserver* observer = nullptr;
};

struct RunResult {
  CheckpointManifest manifest;
  std::size_t peak_resident_bytes = 0;
  std::int64_t peak_partitioned_rows = 0;
  std::vector<int> peak_partitions_per_type;
  std::vector<std::int64_t> loads_per_epoch;
  std::vector<double> epoch_seconds;
  std::vector<BucketLog> buckets;
};

// Loads dataset metadata and checks it against the config's schema.
DatasetMeta load_training_meta(const Config& config, const std::filesystem::path& dataset_dir);

// Trains for the configured number of epochs, resuming from a checkpoint in
// `checkpoint_dir` when its manifest matches the model hash.
RunResult run_epochs(const Config& config, const RunOptions& options);

// Which partitions of each entity type bucket (i, j) needs; -1 when the type
// is not touched on that side.
struct BucketNeeds {
  std::vector<std::vector<int>> partitions;  // [type] -> needed partition indices
};
BucketNeeds bucket_needs(const GraphSchema& schema, BucketId bucket);

}  // namespace gfe

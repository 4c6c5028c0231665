#pragma once

// Edge-list ingestion: entity dictionaries, partition assignment and
// per-bucket binary edge files.
//
// Output layout under a dataset directory:
//   entities/<type>.dict      TSV: external_id, partition, local_index
//   edges/bucket_<i>_<j>.bin  records of 3 x u32 little-endian
//                             (source local index, relation id, dest local index)
//   meta.json                 entity counts per partition, bucket counts

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gfe/config.hpp"

namespace gfe {

struct EntityLocation {
  std::int32_t partition = 0;
  std::int32_t local = 0;
  bool operator==(const EntityLocation&) const = default;
};

struct EdgeRecord {
  std::uint32_t src = 0;
  std::uint32_t rel = 0;
  std::uint32_t dst = 0;
  bool operator==(const EdgeRecord&) const = default;
};
inline constexpr std::size_t kEdgeRecordBytes = 12;

using EdgeVisitor = std::function<void(std::string_view src, std::string_view rel, std::string_view dst)>;
// Calls the visitor once per edge. Must be re-runnable: ingestion makes two passes.
using EdgeSource = std::function<void(const EdgeVisitor&)>;

// Reads `source \t relation \t dest` lines. Blank lines are skipped; any other
// line without exactly three fields is a ParseError.
EdgeSource tsv_file_source(std::filesystem::path path);
EdgeSource tsv_text_source(std::string text);

// Partition of an external id among P parts.
int partition_of(std::string_view external_id, int num_partitions);

class EntityDictionary {
 public:
  struct TypeEntries {
    std::string name;
    int num_partitions = 1;
    std::vector<std::vector<std::string>> ids;  // [partition][local] -> external id
    std::unordered_map<std::string, EntityLocation> index;
  };

  std::vector<TypeEntries> types;  // schema order

  std::optional<EntityLocation> find(int type, std::string_view id) const;
  const std::string& external_id(int type, EntityLocation loc) const {
    return types[type].ids[loc.partition][loc.local];
  }
  std::int64_t count(int type, int partition) const {
    return static_cast<std::int64_t>(types[type].ids[partition].size());
  }
  std::int64_t total(int type) const;

  void save(const std::filesystem::path& dataset_dir) const;
  static EntityDictionary load(const std::filesystem::path& dataset_dir, const GraphSchema& schema);
};

struct DictionaryOptions {
  // Entities occurring fewer times than this (as source or destination, per
  // type) are dropped, along with their edges.
  int min_count = 1;
};

// Partition = stable hash of external id mod P; local indices follow first
// appearance order. Throws ValidationError on unknown relations or empty input.
EntityDictionary build_dictionary(const EdgeSource& edges, const GraphSchema& schema,
                                  const DictionaryOptions& options = {});

struct BucketStats {
  int source_partitions = 1;
  int dest_partitions = 1;
  std::vector<std::int64_t> counts;  // row-major [i * dest_partitions + j]
  std::int64_t dropped = 0;
  std::int64_t total() const;
  std::int64_t count(int i, int j) const { return counts[static_cast<std::size_t>(i * dest_partitions + j)]; }
};

std::filesystem::path bucket_path(const std::filesystem::path& dataset_dir, int i, int j);

// Writes one file per bucket (all of them, possibly empty), preserving input
// order within each file. Edges touching a filtered entity are dropped and counted.
BucketStats bucketize(const EdgeSource& edges, const EntityDictionary& dict, const GraphSchema& schema,
                      const std::filesystem::path& dataset_dir);

// Counts needed by training: rows per (type, partition) and edges per bucket.
struct DatasetMeta {
  std::vector<std::vector<std::int64_t>> entity_counts;  // [type][partition]
  BucketStats buckets;
  std::int64_t num_relations = 0;

  void save(const std::filesystem::path& dataset_dir) const;
  static DatasetMeta load(const std::filesystem::path& dataset_dir);
  static DatasetMeta from(const EntityDictionary& dict, const BucketStats& buckets, const GraphSchema& schema);
};

// Runs dictionary + bucketing and writes meta.json. The dictionary is built
// from `dictionary_edges` (typically every split); only `train_edges` are bucketed.
DatasetMeta ingest(const EdgeSource& dictionary_edges, const EdgeSource& train_edges, const GraphSchema& schema,
                   const std::filesystem::path& dataset_dir, const DictionaryOptions& options = {});

std::vector<EdgeRecord> read_bucket(const std::filesystem::path& path, std::optional<std::int64_t> expected_count = {});
void write_bucket(const std::filesystem::path& path, std::span<const EdgeRecord> edges);

struct SplitFractions {
  double train = 1, valid = 0, test = 0;
};

// Deterministic per-edge uniform assignment to train/valid/test.
void train_valid_test_split(const EdgeSource& edges, SplitFractions fractions, std::uint64_t seed,
                            const EdgeVisitor& train, const EdgeVisitor& valid, const EdgeVisitor& test);

}  // namespace gfe

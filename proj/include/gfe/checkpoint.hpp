#pragma once

// Embedding tables and their on-disk format.
//
// Embedding file, little-endian:
//   "GFE1"            4 bytes magic
//   u32 version       = 1
//   u32 dim
//   u64 row_count
//   f32[row_count * dim]   values, row-major
//   f32[row_count]         row Adagrad accumulators
//
// The same byte layout is the PART_DATA blob on the wire.
//
// A checkpoint directory holds:
//   manifest.json                      model hash, completed epochs, file list
//   embeddings_<type>_<p>.gfe          one file per (entity type, partition)
//   relations.gfe                      operator parameters, one row per relation
//                                      and side (linear: d rows), identity: none
//   relations_adagrad.gfe              elementwise accumulators in the same
//                                      row layout as relations.gfe
// The accumulator column of relations.gfe holds each row's mean accumulator
// and is informational; relations_adagrad.gfe is authoritative on load.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gfe/config.hpp"
#include "gfe/scoring.hpp"

namespace gfe {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EmbeddingPartition {
  int entity_type = 0;
  int partition = 0;
  int dim = 0;
  std::int64_t rows = 0;
  std::vector<float> values;   // rows * dim, row-major
  std::vector<float> adagrad;  // rows
  bool dirty = false;

  float* row(std::int64_t i) { return values.data() + i * dim; }
  const float* row(std::int64_t i) const { return values.data() + i * dim; }
  std::size_t bytes() const { return (values.size() + adagrad.size()) * sizeof(float); }
};

// Rows i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)], accumulators 0. Seeded by
// (seed, type, partition) only, so any process initializes a partition identically.
EmbeddingPartition init_partition(int entity_type, int partition, std::int64_t rows, int dim, std::uint64_t seed);

std::string encode_embedding_blob(int dim, std::int64_t rows, const std::vector<float>& values,
                                  const std::vector<float>& adagrad);
struct DecodedBlob {
  int dim = 0;
  std::int64_t rows = 0;
  std::vector<float> values;
  std::vector<float> adagrad;
};
DecodedBlob decode_embedding_blob(std::string_view blob);

void write_embedding_file(const std::filesystem::path& path, const EmbeddingPartition& part);
// Reads into `part`, keeping its type/partition fields; checks dim (and rows if given).
void read_embedding_file(const std::filesystem::path& path, EmbeddingPartition& part,
                         std::optional<std::int64_t> expected_rows = {});

struct RelationState {
  std::vector<RelationParameters> params;
  // Elementwise Adagrad accumulators mirroring params[r].forward / .reciprocal.
  std::vector<std::vector<float>> acc_forward, acc_reciprocal;

  static RelationState initial(const Config& config);
};

void write_relation_files(const std::filesystem::path& dir, const RelationState& state, int dim);
RelationState read_relation_files(const std::filesystem::path& dir, const Config& config);

struct CheckpointManifest {
  std::uint64_t model_hash = 0;
  int epoch = 0;  // completed epochs
  // Buckets (counted across passes) already trained in epoch `epoch`.
  int buckets_done = 0;
  std::vector<std::string> files;
};

std::filesystem::path embedding_file(const std::filesystem::path& dir, const std::string& type, int partition);
void write_manifest(const std::filesystem::path& dir, const CheckpointManifest& manifest);
std::optional<CheckpointManifest> read_manifest(const std::filesystem::path& dir);

// Loads every partition of `type` into one table indexed by the flattened
// global index offset[p] + local.
struct FlatEmbeddings {
  int dim = 0;
  std::vector<std::int64_t> offsets;  // per partition, plus a final total
  Rows<float> values;
};
FlatEmbeddings load_flat_embeddings(const std::filesystem::path& checkpoint_dir, const Config& config, int type,
                                    const std::vector<std::int64_t>& partition_counts);

}  // namespace gfe

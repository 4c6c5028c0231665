#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gfe {

// Malformed input file (bad JSON, wrong value types).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed input that violates a schema or config invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OperatorKind { identity, translation, diagonal, complex_diagonal, linear };
enum class SimilarityKind { dot, cosine };
enum class LossKind { margin, logistic, softmax };

std::string_view to_string(OperatorKind kind);
std::string_view to_string(SimilarityKind kind);
std::string_view to_string(LossKind kind);
OperatorKind parse_operator(std::string_view name);
SimilarityKind parse_similarity(std::string_view name);
LossKind parse_loss(std::string_view name);

// Similarity used when a relation omits one: cosine pairs with translation
// (TransE), every other operator uses the dot product.
SimilarityKind default_similarity(OperatorKind kind);

struct EntityTypeDecl {
  std::string name;
  int num_partitions = 1;
  bool partitioned() const { return num_partitions > 1; }
};

struct RelationDecl {
  std::string name;
  std::string source_type;
  std::string dest_type;
  OperatorKind op = OperatorKind::identity;
  SimilarityKind similarity = SimilarityKind::dot;
};

struct GraphSchema {
  std::vector<EntityTypeDecl> entities;
  std::vector<RelationDecl> relations;

  // Index lookups; throw ValidationError on unknown names.
  int entity_index(std::string_view name) const;
  int relation_index(std::string_view name) const;
  std::optional<int> find_relation(std::string_view name) const;

  // The global partition count P shared by every partitioned type (1 when none is).
  int num_partitions() const;
  // Bucket grid shape. A side has P rows/columns if any relation's entity
  // type on that side is partitioned, otherwise 1.
  int source_partitions() const;
  int dest_partitions() const;
};

struct TrainConfig {
  int dimension = 0;
  LossKind loss = LossKind::margin;
  float margin = 0.1f;
  int batch_size = 1000;
  int chunk_size = 50;
  int uniform_negatives_per_chunk = 50;
  float learning_rate = 0.1f;
  float relation_learning_rate = -1.0f;  // < 0 means same as learning_rate
  int num_epochs = 1;
  int num_workers = 1;
  bool reciprocal_relations = false;
  std::uint64_t seed = 0;
  int bucket_passes_per_epoch = 1;
  // Also checkpoint after every bucket, so a killed run resumes mid-epoch.
  bool checkpoint_every_bucket = false;

  float relation_lr() const { return relation_learning_rate < 0 ? learning_rate : relation_learning_rate; }
};

struct Config {
  GraphSchema schema;
  TrainConfig train;
};

// Parses and validates. Unknown keys are rejected so that typos surface.
Config parse_config(std::string_view text);
Config load_config(const std::filesystem::path& path);
std::string serialize_config(const Config& config);
void validate(const Config& config);

// Hash over the fields that determine checkpoint layout and meaning
// (schema, dimension, reciprocal flag). Training knobs such as epochs or the
// learning rate may change between a run and its resume.
std::uint64_t model_hash(const Config& config);

}  // namespace gfe

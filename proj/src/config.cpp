#include "gfe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gfe/hash.hpp"

namespace gfe {

using nlohmann::json;

namespace {

constexpr std::string_view kOperatorNames[] = {"identity", "translation", "diagonal", "complex_diagonal",
                                               "linear"};
constexpr std::string_view kSimilarityNames[] = {"dot", "cosine"};
constexpr std::string_view kLossNames[] = {"margin", "logistic", "softmax"};

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view name, const std::string_view (&names)[N], std::string_view what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == name) return static_cast<Enum>(i);
  }
  throw ValidationError("unknown " + std::string(what) + " '" + std::string(name) + "'");
}

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed, std::string_view where) {
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) {
      throw ValidationError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("key '") + key + "': " + e.what());
  }
}

template <typename T>
T get_required(const json& obj, const char* key, std::string_view where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError("missing key '" + std::string(key) + "' in " + std::string(where));
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("key '") + key + "': " + e.what());
  }
}

json to_json(const Config& config) {
  json entities = json::array();
  for (const auto& e : config.schema.entities) {
    entities.push_back({{"name", e.name}, {"num_partitions", e.num_partitions}});
  }
  json relations = json::array();
  for (const auto& r : config.schema.relations) {
    relations.push_back({{"name", r.name},
                         {"source_type", r.source_type},
                         {"dest_type", r.dest_type},
                         {"operator", to_string(r.op)},
                         {"similarity", to_string(r.similarity)}});
  }
  const auto& t = config.train;
  return json{{"entities", entities},
              {"relations", relations},
              {"dimension", t.dimension},
              {"loss", to_string(t.loss)},
              {"margin", t.margin},
              {"batch_size", t.batch_size},
              {"chunk_size", t.chunk_size},
              {"uniform_negatives_per_chunk", t.uniform_negatives_per_chunk},
              {"learning_rate", t.learning_rate},
              {"relation_learning_rate", t.relation_learning_rate},
              {"num_epochs", t.num_epochs},
              {"num_workers", t.num_workers},
              {"reciprocal_relations", t.reciprocal_relations},
              {"seed", t.seed},
              {"bucket_passes_per_epoch", t.bucket_passes_per_epoch},
              {"checkpoint_every_bucket", t.checkpoint_every_bucket}};
}

}  // namespace

std::string_view to_string(OperatorKind kind) { return kOperatorNames[static_cast<int>(kind)]; }
std::string_view to_string(SimilarityKind kind) { return kSimilarityNames[static_cast<int>(kind)]; }
std::string_view to_string(LossKind kind) { return kLossNames[static_cast<int>(kind)]; }

OperatorKind parse_operator(std::string_view name) {
  return parse_enum<OperatorKind>(name, kOperatorNames, "operator");
}
SimilarityKind parse_similarity(std::string_view name) {
  return parse_enum<SimilarityKind>(name, kSimilarityNames, "similarity");
}
LossKind parse_loss(std::string_view name) { return parse_enum<LossKind>(name, kLossNames, "loss"); }

SimilarityKind default_similarity(OperatorKind kind) {
  return kind == OperatorKind::translation ? SimilarityKind::cosine : SimilarityKind::dot;
}

int GraphSchema::entity_index(std::string_view name) const {
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (entities[i].name == name) return static_cast<int>(i);
  }
  throw ValidationError("unknown entity type '" + std::string(name) + "'");
}

std::optional<int> GraphSchema::find_relation(std::string_view name) const {
  for (std::size_t i = 0; i < relations.size(); ++i) {
    if (relations[i].name == name) return static_cast<int>(i);
  }
  return std::nullopt;
}

int GraphSchema::relation_index(std::string_view name) const {
  if (auto idx = find_relation(name)) return *idx;
  throw ValidationError("unknown relation '" + std::string(name) + "'");
}

int GraphSchema::num_partitions() const {
  int p = 1;
  for (const auto& e : entities) p = std::max(p, e.num_partitions);
  return p;
}

int GraphSchema::source_partitions() const {
  for (const auto& r : relations) {
    if (entities[entity_index(r.source_type)].partitioned()) return num_partitions();
  }
  return 1;
}

int GraphSchema::dest_partitions() const {
  for (const auto& r : relations) {
    if (entities[entity_index(r.dest_type)].partitioned()) return num_partitions();
  }
  return 1;
}

void validate(const Config& config) {
  const auto& schema = config.schema;
  const auto& t = config.train;
  if (schema.entities.empty()) throw ValidationError("at least one entity type is required");
  if (schema.relations.empty()) throw ValidationError("at least one relation is required");

  std::set<std::string> names;
  int shared_p = 0;
  for (const auto& e : schema.entities) {
    if (e.name.empty()) throw ValidationError("entity type with empty name");
    if (!names.insert(e.name).second) throw ValidationError("duplicate entity type '" + e.name + "'");
    if (e.num_partitions < 1) throw ValidationError("entity type '" + e.name + "': num_partitions must be >= 1");
    if (e.partitioned()) {
      if (shared_p != 0 && shared_p != e.num_partitions) {
        throw ValidationError("all partitioned entity types must share the same num_partitions (got " +
                              std::to_string(shared_p) + " and " + std::to_string(e.num_partitions) + ")");
      }
      shared_p = e.num_partitions;
    }
  }
  names.clear();
  for (const auto& r : schema.relations) {
    if (r.name.empty()) throw ValidationError("relation with empty name");
    if (!names.insert(r.name).second) throw ValidationError("duplicate relation '" + r.name + "'");
    schema.entity_index(r.source_type);
    schema.entity_index(r.dest_type);
    if (r.op == OperatorKind::complex_diagonal && t.dimension % 2 != 0) {
      throw ValidationError("relation '" + r.name + "': complex_diagonal requires an even dimension");
    }
  }

  if (t.dimension <= 0) throw ValidationError("dimension must be positive");
  if (t.chunk_size <= 0) throw ValidationError("chunk_size must be positive");
  if (t.batch_size <= 0 || t.batch_size % t.chunk_size != 0) {
    throw ValidationError("batch_size must be a positive multiple of chunk_size");
  }
  if (t.uniform_negatives_per_chunk < 0) throw ValidationError("uniform_negatives_per_chunk must be >= 0");
  if (t.margin < 0) throw ValidationError("margin must be >= 0");
  if (!(t.learning_rate > 0)) throw ValidationError("learning_rate must be > 0");
  if (t.num_epochs < 0) throw ValidationError("num_epochs must be >= 0");
  if (t.num_workers < 1) throw ValidationError("num_workers must be >= 1");
  if (t.bucket_passes_per_epoch < 1) throw ValidationError("bucket_passes_per_epoch must be >= 1");
}

Config parse_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config parse error: ") + e.what());
  }
  if (!root.is_object()) throw ParseError("config root must be an object");
  reject_unknown_keys(root,
                      {"entities", "relations", "dimension", "loss", "margin", "batch_size", "chunk_size",
                       "uniform_negatives_per_chunk", "learning_rate", "relation_learning_rate", "num_epochs",
                       "num_workers", "reciprocal_relations", "seed", "bucket_passes_per_epoch",
                       "checkpoint_every_bucket"},
                      "config");

  Config config;
  const auto entities = get_required<json>(root, "entities", "config");
  if (!entities.is_array()) throw ParseError("'entities' must be an array");
  for (const auto& e : entities) {
    reject_unknown_keys(e, {"name", "num_partitions"}, "entity type");
    config.schema.entities.push_back(
        {get_required<std::string>(e, "name", "entity type"), get_or<int>(e, "num_partitions", 1)});
  }
  const auto relations = get_required<json>(root, "relations", "config");
  if (!relations.is_array()) throw ParseError("'relations' must be an array");
  for (const auto& r : relations) {
    reject_unknown_keys(r, {"name", "source_type", "dest_type", "operator", "similarity"}, "relation");
    RelationDecl decl;
    decl.name = get_required<std::string>(r, "name", "relation");
    decl.source_type = get_required<std::string>(r, "source_type", "relation");
    decl.dest_type = get_required<std::string>(r, "dest_type", "relation");
    decl.op = parse_operator(get_or<std::string>(r, "operator", "identity"));
    decl.similarity = r.contains("similarity") ? parse_similarity(get_or<std::string>(r, "similarity", ""))
                                               : default_similarity(decl.op);
    config.schema.relations.push_back(std::move(decl));
  }

  auto& t = config.train;
  t.dimension = get_required<int>(root, "dimension", "config");
  t.loss = parse_loss(get_or<std::string>(root, "loss", "margin"));
  t.margin = get_or<float>(root, "margin", t.margin);
  t.batch_size = get_or<int>(root, "batch_size", t.batch_size);
  t.chunk_size = get_or<int>(root, "chunk_size", t.chunk_size);
  t.uniform_negatives_per_chunk = get_or<int>(root, "uniform_negatives_per_chunk", t.uniform_negatives_per_chunk);
  t.learning_rate = get_or<float>(root, "learning_rate", t.learning_rate);
  t.relation_learning_rate = get_or<float>(root, "relation_learning_rate", t.relation_learning_rate);
  t.num_epochs = get_or<int>(root, "num_epochs", t.num_epochs);
  t.num_workers = get_or<int>(root, "num_workers", t.num_workers);
  t.reciprocal_relations = get_or<bool>(root, "reciprocal_relations", t.reciprocal_relations);
  t.seed = get_or<std::uint64_t>(root, "seed", t.seed);
  t.bucket_passes_per_epoch = get_or<int>(root, "bucket_passes_per_epoch", t.bucket_passes_per_epoch);
  t.checkpoint_every_bucket = get_or<bool>(root, "checkpoint_every_bucket", t.checkpoint_every_bucket);

  validate(config);
  return config;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string serialize_config(const Config& config) { return to_json(config).dump(2) + "\n"; }

std::uint64_t model_hash(const Config& config) {
  json shape = to_json(config);
  json keep{{"entities", shape["entities"]},
            {"relations", shape["relations"]},
            {"dimension", shape["dimension"]},
            {"reciprocal_relations", shape["reciprocal_relations"]}};
  return fnv1a64(keep.dump());
}

}  // namespace gfe

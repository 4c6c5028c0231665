#include "gfe/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gfe/bytes.hpp"
#include "gfe/hash.hpp"

namespace gfe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'G', 'F', 'E', '1'};
constexpr std::uint32_t kVersion = 1;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_atomic(const fs::path& path, std::string_view data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot create " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::size_t rows_per_side(OperatorKind kind, int dim) {
  switch (kind) {
    case OperatorKind::identity:
      return 0;
    case OperatorKind::linear:
      return static_cast<std::size_t>(dim);
    default:
      return 1;
  }
}

}  // namespace

EmbeddingPartition init_partition(int entity_type, int partition, std::int64_t rows, int dim, std::uint64_t seed) {
  EmbeddingPartition part;
  part.entity_type = entity_type;
  part.partition = partition;
  part.dim = dim;
  part.rows = rows;
  part.values.resize(static_cast<std::size_t>(rows * dim));
  part.adagrad.assign(static_cast<std::size_t>(rows), 0.0f);
  std::mt19937_64 rng(derive_seed(seed, 0x1417u, entity_type, partition));
  const float scale = 1.0f / std::sqrt(static_cast<float>(dim));
  std::uniform_real_distribution<float> dist(-scale, scale);
  for (auto& v : part.values) v = dist(rng);
  part.dirty = true;
  return part;
}

std::string encode_embedding_blob(int dim, std::int64_t rows, const std::vector<float>& values,
                                  const std::vector<float>& adagrad) {
  ByteWriter w;
  w.buffer().reserve(20 + (values.size() + adagrad.size()) * 4);
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(dim));
  w.u64(static_cast<std::uint64_t>(rows));
  w.f32s(values.data(), values.size());
  w.f32s(adagrad.data(), adagrad.size());
  return w.take();
}

DecodedBlob decode_embedding_blob(std::string_view blob) {
  try {
    ByteReader r(blob);
    if (r.take(4) != std::string_view(kMagic, 4)) throw FormatError("bad magic");
    if (r.u32() != kVersion) throw FormatError("unsupported version");
    DecodedBlob out;
    out.dim = static_cast<int>(r.u32());
    out.rows = static_cast<std::int64_t>(r.u64());
    const auto n = static_cast<std::size_t>(out.rows) * static_cast<std::size_t>(out.dim);
    if (r.remaining() != (n + static_cast<std::size_t>(out.rows)) * 4) throw FormatError("size mismatch");
    out.values.resize(n);
    out.adagrad.resize(static_cast<std::size_t>(out.rows));
    r.f32s(out.values.data(), n);
    r.f32s(out.adagrad.data(), out.adagrad.size());
    return out;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("embedding blob: ") + e.what());
  }
}

void write_embedding_file(const fs::path& path, const EmbeddingPartition& part) {
  write_file_atomic(path, encode_embedding_blob(part.dim, part.rows, part.values, part.adagrad));
}

void read_embedding_file(const fs::path& path, EmbeddingPartition& part, std::optional<std::int64_t> expected_rows) {
  auto blob = decode_embedding_blob(read_file(path));
  if (part.dim != 0 && blob.dim != part.dim) throw FormatError(path.string() + ": dimension mismatch");
  if (expected_rows && blob.rows != *expected_rows) throw FormatError(path.string() + ": row count mismatch");
  part.dim = blob.dim;
  part.rows = blob.rows;
  part.values = std::move(blob.values);
  part.adagrad = std::move(blob.adagrad);
  part.dirty = false;
}

RelationState RelationState::initial(const Config& config) {
  RelationState s;
  for (const auto& r : config.schema.relations) {
    s.params.push_back(RelationParameters::initial(r.op, config.train.dimension, config.train.reciprocal_relations));
    s.acc_forward.emplace_back(s.params.back().forward.size(), 0.0f);
    s.acc_reciprocal.emplace_back(s.params.back().reciprocal.size(), 0.0f);
  }
  return s;
}

void write_relation_files(const fs::path& dir, const RelationState& state, int dim) {
  std::vector<float> values, acc_values, row_acc, zeros;
  std::int64_t rows = 0;
  auto add = [&](const std::vector<float>& p, const std::vector<float>& acc, OperatorKind kind) {
    const auto n_rows = rows_per_side(kind, dim);
    for (std::size_t r = 0; r < n_rows; ++r) {
      const auto begin = r * static_cast<std::size_t>(dim);
      values.insert(values.end(), p.begin() + static_cast<long>(begin), p.begin() + static_cast<long>(begin + dim));
      acc_values.insert(acc_values.end(), acc.begin() + static_cast<long>(begin),
                        acc.begin() + static_cast<long>(begin + dim));
      double mean = 0;
      for (int k = 0; k < dim; ++k) mean += acc[begin + static_cast<std::size_t>(k)];
      row_acc.push_back(static_cast<float>(mean / dim));
      zeros.push_back(0.0f);
      ++rows;
    }
  };
  for (std::size_t r = 0; r < state.params.size(); ++r) {
    const auto& p = state.params[r];
    add(p.forward, state.acc_forward[r], p.kind);
    if (p.has_reciprocal()) add(p.reciprocal, state.acc_reciprocal[r], p.kind);
  }
  write_file_atomic(dir / "relations.gfe", encode_embedding_blob(dim, rows, values, row_acc));
  write_file_atomic(dir / "relations_adagrad.gfe", encode_embedding_blob(dim, rows, acc_values, zeros));
}

RelationState read_relation_files(const fs::path& dir, const Config& config) {
  auto state = RelationState::initial(config);
  const int dim = config.train.dimension;
  const auto values = decode_embedding_blob(read_file(dir / "relations.gfe"));
  const auto acc = decode_embedding_blob(read_file(dir / "relations_adagrad.gfe"));
  if (values.dim != dim || acc.dim != dim || values.rows != acc.rows) {
    throw FormatError("relation files do not match the config");
  }
  std::size_t offset = 0;
  auto take = [&](std::vector<float>& p, std::vector<float>& a) {
    if (offset + p.size() > values.values.size()) throw FormatError("relation file too short");
    std::copy_n(values.values.begin() + static_cast<long>(offset), p.size(), p.begin());
    std::copy_n(acc.values.begin() + static_cast<long>(offset), a.size(), a.begin());
    offset += p.size();
  };
  for (std::size_t r = 0; r < state.params.size(); ++r) {
    take(state.params[r].forward, state.acc_forward[r]);
    if (state.params[r].has_reciprocal()) take(state.params[r].reciprocal, state.acc_reciprocal[r]);
  }
  if (offset != values.values.size()) throw FormatError("relation file has trailing rows");
  return state;
}

fs::path embedding_file(const fs::path& dir, const std::string& type, int partition) {
  return dir / ("embeddings_" + type + "_" + std::to_string(partition) + ".gfe");
}

void write_manifest(const fs::path& dir, const CheckpointManifest& m) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(m.model_hash));
  json j{{"format", "gfe-checkpoint"}, {"version", 1}, {"model_hash", hash}, {"epoch", m.epoch}, {"buckets_done", m.buckets_done},
          {"files", m.files}};
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

std::optional<CheckpointManifest> read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) return std::nullopt;
  try {
    const auto j = json::parse(read_file(path));
    CheckpointManifest m;
    m.model_hash = std::stoull(j.at("model_hash").get<std::string>(), nullptr, 16);
    m.epoch = j.at("epoch").get<int>();
    m.buckets_done = j.value("buckets_done", 0);
    m.files = j.at("files").get<std::vector<std::string>>();
    for (const auto& f : m.files) {
      if (!fs::exists(dir / f)) throw FormatError("manifest references missing file " + f);
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
}

FlatEmbeddings load_flat_embeddings(const fs::path& checkpoint_dir, const Config& config, int type,
                                    const std::vector<std::int64_t>& partition_counts) {
  FlatEmbeddings flat;
  flat.dim = config.train.dimension;
  std::int64_t total = 0;
  for (auto c : partition_counts) {
    flat.offsets.push_back(total);
    total += c;
  }
  flat.offsets.push_back(total);
  flat.values.resize(total, flat.dim);
  const auto& name = config.schema.entities[static_cast<std::size_t>(type)].name;
  for (std::size_t p = 0; p < partition_counts.size(); ++p) {
    EmbeddingPartition part;
    part.dim = flat.dim;
    read_embedding_file(embedding_file(checkpoint_dir, name, static_cast<int>(p)), part, partition_counts[p]);
    std::copy(part.values.begin(), part.values.end(), flat.values.data() + flat.offsets[p] * flat.dim);
  }
  return flat;
}

}  // namespace gfe

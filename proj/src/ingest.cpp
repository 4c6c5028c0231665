#include "gfe/ingest.hpp"

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

void visit_tsv(std::istream& in, const std::string& origin, const EdgeVisitor& visit) {
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string_view view(line);
    const auto t1 = view.find('\t');
    const auto t2 = t1 == std::string_view::npos ? t1 : view.find('\t', t1 + 1);
    if (t2 == std::string_view::npos || view.find('\t', t2 + 1) != std::string_view::npos) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    visit(view.substr(0, t1), view.substr(t1 + 1, t2 - t1 - 1), view.substr(t2 + 1));
  }
}

struct RelationTypes {
  int src_type;
  int dst_type;
};

std::vector<RelationTypes> relation_types(const GraphSchema& schema) {
  std::vector<RelationTypes> out;
  for (const auto& r : schema.relations) {
    out.push_back({schema.entity_index(r.source_type), schema.entity_index(r.dest_type)});
  }
  return out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

EdgeSource tsv_file_source(fs::path path) {
  return [path = std::move(path)](const EdgeVisitor& visit) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open edge file " + path.string());
    visit_tsv(in, path.string(), visit);
  };
}

EdgeSource tsv_text_source(std::string text) {
  return [text = std::move(text)](const EdgeVisitor& visit) {
    std::istringstream in(text);
    visit_tsv(in, "<text>", visit);
  };
}

int partition_of(std::string_view external_id, int num_partitions) {
  return static_cast<int>(stable_id_hash(external_id) % static_cast<std::uint64_t>(num_partitions));
}

std::optional<EntityLocation> EntityDictionary::find(int type, std::string_view id) const {
  const auto& idx = types[type].index;
  auto it = idx.find(std::string(id));
  if (it == idx.end()) return std::nullopt;
  return it->second;
}

std::int64_t EntityDictionary::total(int type) const {
  std::int64_t n = 0;
  for (const auto& p : types[type].ids) n += static_cast<std::int64_t>(p.size());
  return n;
}

void EntityDictionary::save(const fs::path& dataset_dir) const {
  for (const auto& t : types) {
    std::string text;
    for (std::size_t p = 0; p < t.ids.size(); ++p) {
      for (std::size_t i = 0; i < t.ids[p].size(); ++i) {
        text += t.ids[p][i];
        text += '\t';
        text += std::to_string(p);
        text += '\t';
        text += std::to_string(i);
        text += '\n';
      }
    }
    write_text_atomic(dataset_dir / "entities" / (t.name + ".dict"), text);
  }
}

EntityDictionary EntityDictionary::load(const fs::path& dataset_dir, const GraphSchema& schema) {
  EntityDictionary dict;
  for (const auto& decl : schema.entities) {
    TypeEntries t;
    t.name = decl.name;
    t.num_partitions = decl.num_partitions;
    t.ids.resize(static_cast<std::size_t>(decl.num_partitions));
    const fs::path path = dataset_dir / "entities" / (decl.name + ".dict");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dictionary " + path.string());
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t2 == std::string::npos) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad row");
      const int p = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
      const int local = std::stoi(line.substr(t2 + 1));
      if (p < 0 || p >= decl.num_partitions) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": partition out of range");
      }
      auto& ids = t.ids[static_cast<std::size_t>(p)];
      if (local != static_cast<int>(ids.size())) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": local indices must be dense");
      }
      std::string id = line.substr(0, t1);
      t.index.emplace(id, EntityLocation{p, local});
      ids.push_back(std::move(id));
    }
    dict.types.push_back(std::move(t));
  }
  return dict;
}

EntityDictionary build_dictionary(const EdgeSource& edges, const GraphSchema& schema,
                                  const DictionaryOptions& options) {
  const auto rel_types = relation_types(schema);
  struct Seen {
    std::int64_t count = 0;
    std::int64_t order = 0;
  };
  std::vector<std::unordered_map<std::string, Seen>> seen(schema.entities.size());
  std::vector<std::vector<std::string>> order(schema.entities.size());
  std::int64_t n_edges = 0;

  auto note = [&](int type, std::string_view id) {
    auto [it, inserted] = seen[type].try_emplace(std::string(id));
    if (inserted) {
      it->second.order = static_cast<std::int64_t>(order[type].size());
      order[type].push_back(it->first);
    }
    ++it->second.count;
  };
  edges([&](std::string_view s, std::string_view r, std::string_view d) {
    const auto rel = schema.find_relation(r);
    if (!rel) throw ValidationError("unknown relation '" + std::string(r) + "' in edge list");
    note(rel_types[*rel].src_type, s);
    note(rel_types[*rel].dst_type, d);
    ++n_edges;
  });
  if (n_edges == 0) throw ValidationError("edge list is empty");

  EntityDictionary dict;
  for (std::size_t t = 0; t < schema.entities.size(); ++t) {
    EntityDictionary::TypeEntries entries;
    entries.name = schema.entities[t].name;
    entries.num_partitions = schema.entities[t].num_partitions;
    entries.ids.resize(static_cast<std::size_t>(entries.num_partitions));
    for (const auto& id : order[t]) {
      if (seen[t][id].count < options.min_count) continue;
      const int p = partition_of(id, entries.num_partitions);
      auto& ids = entries.ids[static_cast<std::size_t>(p)];
      entries.index.emplace(id, EntityLocation{p, static_cast<std::int32_t>(ids.size())});
      ids.push_back(id);
    }
    const auto total = static_cast<std::int64_t>(entries.index.size());
    if (total > 0 && total < entries.num_partitions) {
      throw ValidationError("entity type '" + entries.name + "' has fewer entities (" + std::to_string(total) +
                            ") than partitions");
    }
    dict.types.push_back(std::move(entries));
  }
  return dict;
}

std::int64_t BucketStats::total() const {
  std::int64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

fs::path bucket_path(const fs::path& dataset_dir, int i, int j) {
  return dataset_dir / "edges" / ("bucket_" + std::to_string(i) + "_" + std::to_string(j) + ".bin");
}

void write_bucket(const fs::path& path, std::span<const EdgeRecord> edges) {
  fs::create_directories(path.parent_path());
  ByteWriter w;
  w.buffer().reserve(edges.size() * kEdgeRecordBytes);
  for (const auto& e : edges) {
    w.u32(e.src);
    w.u32(e.rel);
    w.u32(e.dst);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<EdgeRecord> read_bucket(const fs::path& path, std::optional<std::int64_t> expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open bucket file " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() % kEdgeRecordBytes != 0) {
    throw std::runtime_error("corrupt bucket file " + path.string() + ": size not a multiple of 12");
  }
  const auto n = static_cast<std::int64_t>(data.size() / kEdgeRecordBytes);
  if (expected_count && *expected_count != n) {
    throw std::runtime_error("corrupt bucket file " + path.string() + ": expected " +
                             std::to_string(*expected_count) + " records, found " + std::to_string(n));
  }
  std::vector<EdgeRecord> edges(static_cast<std::size_t>(n));
  ByteReader r(data);
  for (auto& e : edges) {
    e.src = r.u32();
    e.rel = r.u32();
    e.dst = r.u32();
  }
  return edges;
}

BucketStats bucketize(const EdgeSource& edges, const EntityDictionary& dict, const GraphSchema& schema,
                      const fs::path& dataset_dir) {
  const auto rel_types = relation_types(schema);
  BucketStats stats;
  stats.source_partitions = schema.source_partitions();
  stats.dest_partitions = schema.dest_partitions();
  const auto n_buckets = static_cast<std::size_t>(stats.source_partitions * stats.dest_partitions);
  stats.counts.assign(n_buckets, 0);
  fs::create_directories(dataset_dir / "edges");

  std::vector<std::ofstream> files;
  std::vector<ByteWriter> pending(n_buckets);
  for (int i = 0; i < stats.source_partitions; ++i) {
    for (int j = 0; j < stats.dest_partitions; ++j) {
      files.emplace_back(bucket_path(dataset_dir, i, j), std::ios::binary | std::ios::trunc);
      if (!files.back()) throw std::runtime_error("cannot create " + bucket_path(dataset_dir, i, j).string());
    }
  }
  auto flush = [&](std::size_t b) {
    auto& buf = pending[b].buffer();
    files[b].write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!files[b]) throw std::runtime_error("I/O failure writing bucket files");
    buf.clear();
  };

  edges([&](std::string_view s, std::string_view r, std::string_view d) {
    const auto rel = schema.find_relation(r);
    if (!rel) throw ValidationError("unknown relation '" + std::string(r) + "' in edge list");
    const auto src = dict.find(rel_types[*rel].src_type, s);
    const auto dst = dict.find(rel_types[*rel].dst_type, d);
    if (!src || !dst) {
      ++stats.dropped;
      return;
    }
    const auto b = static_cast<std::size_t>(src->partition * stats.dest_partitions + dst->partition);
    auto& w = pending[b];
    w.u32(static_cast<std::uint32_t>(src->local));
    w.u32(static_cast<std::uint32_t>(*rel));
    w.u32(static_cast<std::uint32_t>(dst->local));
    ++stats.counts[b];
    if (w.buffer().size() >= (1u << 20)) flush(b);
  });
  for (std::size_t b = 0; b < n_buckets; ++b) {
    flush(b);
    files[b].close();
  }
  return stats;
}

DatasetMeta DatasetMeta::from(const EntityDictionary& dict, const BucketStats& buckets, const GraphSchema& schema) {
  DatasetMeta meta;
  for (std::size_t t = 0; t < dict.types.size(); ++t) {
    std::vector<std::int64_t> counts;
    for (int p = 0; p < dict.types[t].num_partitions; ++p) counts.push_back(dict.count(static_cast<int>(t), p));
    meta.entity_counts.push_back(std::move(counts));
  }
  meta.buckets = buckets;
  meta.num_relations = static_cast<std::int64_t>(schema.relations.size());
  return meta;
}

void DatasetMeta::save(const fs::path& dataset_dir) const {
  json j{{"entity_counts", entity_counts},
         {"num_relations", num_relations},
         {"source_partitions", buckets.source_partitions},
         {"dest_partitions", buckets.dest_partitions},
         {"bucket_counts", buckets.counts},
         {"edges_total", buckets.total()},
         {"edges_dropped", buckets.dropped}};
  write_text_atomic(dataset_dir / "meta.json", j.dump(2) + "\n");
}

DatasetMeta DatasetMeta::load(const fs::path& dataset_dir) {
  std::ifstream in(dataset_dir / "meta.json");
  if (!in) throw std::runtime_error("cannot open " + (dataset_dir / "meta.json").string());
  json j;
  try {
    j = json::parse(in);
    DatasetMeta meta;
    meta.entity_counts = j.at("entity_counts").get<std::vector<std::vector<std::int64_t>>>();
    meta.num_relations = j.at("num_relations").get<std::int64_t>();
    meta.buckets.source_partitions = j.at("source_partitions").get<int>();
    meta.buckets.dest_partitions = j.at("dest_partitions").get<int>();
    meta.buckets.counts = j.at("bucket_counts").get<std::vector<std::int64_t>>();
    meta.buckets.dropped = j.value("edges_dropped", std::int64_t{0});
    return meta;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad meta.json: ") + e.what());
  }
}

DatasetMeta ingest(const EdgeSource& dictionary_edges, const EdgeSource& train_edges, const GraphSchema& schema,
                   const fs::path& dataset_dir, const DictionaryOptions& options) {
  const auto dict = build_dictionary(dictionary_edges, schema, options);
  dict.save(dataset_dir);
  const auto stats = bucketize(train_edges, dict, schema, dataset_dir);
  auto meta = DatasetMeta::from(dict, stats, schema);
  meta.save(dataset_dir);
  return meta;
}

void train_valid_test_split(const EdgeSource& edges, SplitFractions f, std::uint64_t seed, const EdgeVisitor& train,
                            const EdgeVisitor& valid, const EdgeVisitor& test) {
  const double sum = f.train + f.valid + f.test;
  if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  std::mt19937_64 rng(derive_seed(seed, 0x5b11u));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  edges([&](std::string_view s, std::string_view r, std::string_view d) {
    const double u = unit(rng);
    if (u < f.train) {
      train(s, r, d);
    } else if (u < f.train + f.valid) {
      valid(s, r, d);
    } else {
      test(s, r, d);
    }
  });
}

}  // namespace gfe

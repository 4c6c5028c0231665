#include "gfe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <thread>
#include <tuple>

#include "gfe/hash.hpp"
#include "gfe/optimizer.hpp"

namespace gfe {

namespace fs = std::filesystem;

void ResidencyCounter::add(int type, std::int64_t rows, std::size_t bytes, bool partitioned) {
  bytes_ += bytes;
  peak_bytes_ = std::max(peak_bytes_, bytes_);
  ++loads_;
  if (!partitioned) return;
  auto t = static_cast<std::size_t>(type);
  ++per_type_[t];
  peak_per_type_[t] = std::max(peak_per_type_[t], per_type_[t]);
  partitioned_rows_ += rows;
  peak_partitioned_rows_ = std::max(peak_partitioned_rows_, partitioned_rows_);
}

void ResidencyCounter::remove(int type, std::int64_t rows, std::size_t bytes, bool partitioned) {
  bytes_ -= bytes;
  if (!partitioned) return;
  --per_type_[static_cast<std::size_t>(type)];
  partitioned_rows_ -= rows;
}

std::string BucketLog::line() const {
  char loss[32] = "NA";
  if (mean_loss) std::snprintf(loss, sizeof loss, "%.6g", *mean_loss);
  char buf[256];
  std::snprintf(buf, sizeof buf, "event=bucket epoch=%d pass=%d bucket=%d,%d edges=%lld mean_loss=%s seconds=%.3f",
                epoch, pass, bucket.src, bucket.dst, static_cast<long long>(edges), loss, seconds);
  return buf;
}

BucketNeeds bucket_needs(const GraphSchema& schema, BucketId bucket) {
  BucketNeeds needs;
  needs.partitions.resize(schema.entities.size());
  auto want = [&](int type, int p) {
    auto& v = needs.partitions[static_cast<std::size_t>(type)];
    if (std::find(v.begin(), v.end(), p) == v.end()) v.push_back(p);
  };
  for (std::size_t t = 0; t < schema.entities.size(); ++t) {
    if (!schema.entities[t].partitioned()) want(static_cast<int>(t), 0);
  }
  for (const auto& r : schema.relations) {
    const int s = schema.entity_index(r.source_type);
    const int d = schema.entity_index(r.dest_type);
    if (schema.entities[static_cast<std::size_t>(s)].partitioned()) want(s, bucket.src);
    if (schema.entities[static_cast<std::size_t>(d)].partitioned()) want(d, bucket.dst);
  }
  return needs;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Relations that may share a batch map to the same key. Identity relations
// carry no parameters, so those with equal similarity and entity types merge.
std::vector<int> batch_groups(const GraphSchema& schema) {
  std::vector<int> group(schema.relations.size());
  for (std::size_t r = 0; r < schema.relations.size(); ++r) {
    group[r] = static_cast<int>(r);
    const auto& a = schema.relations[r];
    if (a.op != OperatorKind::identity) continue;
    for (std::size_t q = 0; q < r; ++q) {
      const auto& b = schema.relations[q];
      if (b.op == OperatorKind::identity && b.similarity == a.similarity && b.source_type == a.source_type &&
          b.dest_type == a.dest_type) {
        group[r] = group[q];
        break;
      }
    }
  }
  return group;
}

struct GradEntry {
  EmbeddingPartition* table;
  std::int64_t row;
  const float* grad;
};

void add_entries(std::vector<GradEntry>& out, EmbeddingPartition* table, const std::vector<std::int64_t>& ids,
                 const Rows<float>& grads) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.push_back({table, ids[i], grads.row(static_cast<Eigen::Index>(i)).data()});
  }
}

// Sums gradients per (table, row) and applies one Adagrad step per row.
void apply_entity_grads(std::vector<GradEntry>& entries, int dim, float lr, const GraphSchema& schema,
                        SharedGradSink* sink) {
  std::stable_sort(entries.begin(), entries.end(), [](const GradEntry& a, const GradEntry& b) {
    return std::tie(a.table->entity_type, a.table->partition, a.row) <
           std::tie(b.table->entity_type, b.table->partition, b.row);
  });
  std::vector<float> sum(static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < entries.size();) {
    std::size_t j = i;
    std::fill(sum.begin(), sum.end(), 0.0f);
    while (j < entries.size() && entries[j].table == entries[i].table && entries[j].row == entries[i].row) {
      for (int k = 0; k < dim; ++k) sum[static_cast<std::size_t>(k)] += entries[j].grad[k];
      ++j;
    }
    auto* table = entries[i].table;
    const auto row = entries[i].row;
    row_update(std::span<float>(table->row(row), static_cast<std::size_t>(dim)), sum,
               table->adagrad[static_cast<std::size_t>(row)], lr);
    if (sink && !schema.entities[static_cast<std::size_t>(table->entity_type)].partitioned()) {
      sink->add_entity_row(table->entity_type, row, sum);
    }
    i = j;
  }
}

void gather(const EmbeddingPartition& table, const std::vector<std::int64_t>& ids, Rows<float>& out) {
  out.resize(static_cast<Eigen::Index>(ids.size()), table.dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(table.row(ids[i]), table.dim);
  }
}

struct ShardContext {
  const Config& config;
  const BucketTables& tables;
  RelationState& relations;
  const std::vector<int>& groups;
  const std::vector<int>& src_type;
  const std::vector<int>& dst_type;
  const BucketTrainOptions& options;
};

TrainStats train_shard(std::vector<EdgeRecord> edges, const ShardContext& ctx, std::uint64_t seed) {
  const auto& tc = ctx.config.train;
  const int dim = tc.dimension;
  Rng rng(seed);
  TrainStats stats;

  std::stable_sort(edges.begin(), edges.end(), [&](const EdgeRecord& a, const EdgeRecord& b) {
    return ctx.groups[a.rel] < ctx.groups[b.rel];
  });
  std::vector<std::pair<std::size_t, std::size_t>> batches;
  for (std::size_t i = 0; i < edges.size();) {
    std::size_t end = i;
    while (end < edges.size() && end - i < static_cast<std::size_t>(tc.batch_size) &&
           ctx.groups[edges[end].rel] == ctx.groups[edges[i].rel]) {
      ++end;
    }
    batches.emplace_back(i, end);
    i = end;
  }
  std::shuffle(batches.begin(), batches.end(), rng);

  std::vector<ChunkOutput<float>> outputs;
  std::vector<ChunkInput<float>> inputs;
  std::vector<GradEntry> entries;
  for (const auto& [begin, end] : batches) {
    const int rel = static_cast<int>(edges[begin].rel);
    const auto& decl = ctx.config.schema.relations[static_cast<std::size_t>(rel)];
    const int st = ctx.src_type[static_cast<std::size_t>(rel)];
    const int dt = ctx.dst_type[static_cast<std::size_t>(rel)];
    EmbeddingPartition* src_table = ctx.tables.source[static_cast<std::size_t>(st)];
    EmbeddingPartition* dst_table = ctx.tables.dest[static_cast<std::size_t>(dt)];
    auto& params = ctx.relations.params[static_cast<std::size_t>(rel)];
    const ChunkModel model{decl.op, decl.similarity, tc.loss, tc.margin, params.has_reciprocal()};
    const std::span<const float> fwd(params.forward);
    const std::span<const float> rev = params.has_reciprocal() ? std::span<const float>(params.reciprocal) : fwd;

    outputs.clear();
    inputs.clear();
    entries.clear();
    for (std::size_t c0 = begin; c0 < end; c0 += static_cast<std::size_t>(tc.chunk_size)) {
      const std::size_t c1 = std::min(end, c0 + static_cast<std::size_t>(tc.chunk_size));
      ChunkInput<float>& in = inputs.emplace_back();
      for (std::size_t e = c0; e < c1; ++e) {
        if (edges[e].src >= src_table->rows || edges[e].dst >= dst_table->rows) {
          throw std::runtime_error("edge references an entity outside its partition");
        }
        in.src_ids.push_back(edges[e].src);
        in.dst_ids.push_back(edges[e].dst);
      }
      if (tc.uniform_negatives_per_chunk > 0) {
        std::uniform_int_distribution<std::int64_t> src_pick(0, src_table->rows - 1);
        std::uniform_int_distribution<std::int64_t> dst_pick(0, dst_table->rows - 1);
        for (int k = 0; k < tc.uniform_negatives_per_chunk; ++k) in.src_uniform_ids.push_back(src_pick(rng));
        for (int k = 0; k < tc.uniform_negatives_per_chunk; ++k) in.dst_uniform_ids.push_back(dst_pick(rng));
      }
      if (ctx.options.observer) {
        std::vector<std::int64_t> sc(in.src_ids), dc(in.dst_ids);
        sc.insert(sc.end(), in.src_uniform_ids.begin(), in.src_uniform_ids.end());
        dc.insert(dc.end(), in.dst_uniform_ids.begin(), in.dst_uniform_ids.end());
        ctx.options.observer->on_chunk(*src_table, *dst_table, sc, dc);
      }
      gather(*src_table, in.src_ids, in.src);
      gather(*dst_table, in.dst_ids, in.dst);
      gather(*src_table, in.src_uniform_ids, in.src_uniform);
      gather(*dst_table, in.dst_uniform_ids, in.dst_uniform);
      outputs.push_back(chunk_forward_backward<float>(in, model, fwd, rev));
      stats.loss_sum += outputs.back().loss;
      stats.negatives += outputs.back().negatives;
      stats.edges += static_cast<std::int64_t>(c1 - c0);
    }

    for (std::size_t k = 0; k < outputs.size(); ++k) {
      add_entries(entries, src_table, inputs[k].src_ids, outputs[k].grad_src);
      add_entries(entries, dst_table, inputs[k].dst_ids, outputs[k].grad_dst);
      add_entries(entries, src_table, inputs[k].src_uniform_ids, outputs[k].grad_src_uniform);
      add_entries(entries, dst_table, inputs[k].dst_uniform_ids, outputs[k].grad_dst_uniform);
    }
    apply_entity_grads(entries, dim, tc.learning_rate, ctx.config.schema, ctx.options.shared_sink);

    if (!params.forward.empty()) {
      Vec<float> gf = Vec<float>::Zero(static_cast<Eigen::Index>(params.forward.size()));
      Vec<float> gr = Vec<float>::Zero(static_cast<Eigen::Index>(params.reciprocal.size()));
      for (const auto& o : outputs) {
        gf += o.grad_forward;
        if (params.has_reciprocal()) gr += o.grad_reciprocal;
      }
      const std::span<const float> gfs(gf.data(), static_cast<std::size_t>(gf.size()));
      dense_update(params.forward, gfs, ctx.relations.acc_forward[static_cast<std::size_t>(rel)], tc.relation_lr());
      if (ctx.options.shared_sink) ctx.options.shared_sink->add_relation(rel, Side::dest, gfs);
      if (params.has_reciprocal()) {
        const std::span<const float> grs(gr.data(), static_cast<std::size_t>(gr.size()));
        dense_update(params.reciprocal, grs, ctx.relations.acc_reciprocal[static_cast<std::size_t>(rel)],
                     tc.relation_lr());
        if (ctx.options.shared_sink) ctx.options.shared_sink->add_relation(rel, Side::source, grs);
      }
    }
  }
  return stats;
}

}  // namespace

TrainStats train_bucket(std::span<const EdgeRecord> edges, const BucketTables& tables, RelationState& relations,
                        const Config& config, std::uint64_t bucket_seed, const BucketTrainOptions& options) {
  const auto start = Clock::now();
  TrainStats total;
  if (edges.empty()) return total;
  const auto& schema = config.schema;
  std::vector<int> src_type, dst_type;
  for (const auto& r : schema.relations) {
    src_type.push_back(schema.entity_index(r.source_type));
    dst_type.push_back(schema.entity_index(r.dest_type));
  }
  for (const auto& e : edges) {
    if (e.rel >= schema.relations.size()) throw std::runtime_error("edge references an unknown relation");
  }
  const auto groups = batch_groups(schema);

  std::vector<EdgeRecord> shuffled(edges.begin(), edges.end());
  Rng rng(bucket_seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);

  const ShardContext ctx{config, tables, relations, groups, src_type, dst_type, options};
  const auto workers = static_cast<std::size_t>(std::max(1, config.train.num_workers));
  const std::size_t n = shuffled.size();
  auto shard = [&](std::size_t w) {
    return std::vector<EdgeRecord>(shuffled.begin() + static_cast<long>(w * n / workers),
                                   shuffled.begin() + static_cast<long>((w + 1) * n / workers));
  };
  std::vector<TrainStats> results(workers);
  if (workers == 1) {
    results[0] = train_shard(std::move(shuffled), ctx, derive_seed(bucket_seed, 1));
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w, part = shard(w)]() mutable {
        try {
          results[w] = train_shard(std::move(part), ctx, derive_seed(bucket_seed, 1, w));
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (const auto& r : results) {
    total.edges += r.edges;
    total.negatives += r.negatives;
    total.loss_sum += r.loss_sum;
  }
  total.seconds = seconds_since(start);
  return total;
}

namespace {

// Owns resident tables during a local run and swaps partitions through
// checkpoint_dir/swap.
class LocalStore {
 public:
  LocalStore(const Config& config, const DatasetMeta& meta, fs::path checkpoint_dir, bool from_checkpoint,
             ResidencyCounter& counter)
      : config_(config),
        meta_(meta),
        dir_(std::move(checkpoint_dir)),
        swap_(dir_ / "swap"),
        from_checkpoint_(from_checkpoint),
        counter_(counter),
        resident_(config.schema.entities.size()) {
    fs::remove_all(swap_);
    fs::create_directories(swap_);
  }

  bool partitioned(int type) const { return config_.schema.entities[static_cast<std::size_t>(type)].partitioned(); }
  const std::string& name(int type) const { return config_.schema.entities[static_cast<std::size_t>(type)].name; }
  std::int64_t rows(int type, int p) const {
    return meta_.entity_counts[static_cast<std::size_t>(type)][static_cast<std::size_t>(p)];
  }

  EmbeddingPartition* get(int type, int p) {
    auto& slot = resident_[static_cast<std::size_t>(type)][p];
    if (slot) return slot.get();
    auto part = std::make_unique<EmbeddingPartition>();
    part->entity_type = type;
    part->partition = p;
    part->dim = config_.train.dimension;
    const auto swap_file = embedding_file(swap_, name(type), p);
    const auto ckpt_file = embedding_file(dir_, name(type), p);
    if (fs::exists(swap_file)) {
      read_embedding_file(swap_file, *part, rows(type, p));
    } else if (from_checkpoint_) {
      read_embedding_file(ckpt_file, *part, rows(type, p));
    } else {
      *part = init_partition(type, p, rows(type, p), config_.train.dimension, config_.train.seed);
    }
    counter_.add(type, part->rows, part->bytes(), partitioned(type));
    slot = std::move(part);
    return slot.get();
  }

  void evict(int type, int p) {
    auto& map = resident_[static_cast<std::size_t>(type)];
    auto it = map.find(p);
    if (it == map.end()) return;
    auto& part = *it->second;
    if (part.dirty) {
      write_embedding_file(embedding_file(swap_, name(type), p), part);
      counter_.note_write();
    }
    counter_.remove(type, part.rows, part.bytes(), partitioned(type));
    map.erase(it);
  }

  // Makes exactly the needed partitions of every partitioned type resident.
  BucketTables prepare(BucketId bucket, const std::function<void(const ResidencyCounter&)>& on_swap) {
    const auto needs = bucket_needs(config_.schema, bucket);
    for (std::size_t t = 0; t < resident_.size(); ++t) {
      if (!partitioned(static_cast<int>(t))) continue;
      std::vector<int> drop;
      for (const auto& [p, _] : resident_[t]) {
        const auto& want = needs.partitions[t];
        if (std::find(want.begin(), want.end(), p) == want.end()) drop.push_back(p);
      }
      for (int p : drop) evict(static_cast<int>(t), p);
    }
    BucketTables tables;
    tables.source.resize(resident_.size(), nullptr);
    tables.dest.resize(resident_.size(), nullptr);
    for (std::size_t t = 0; t < resident_.size(); ++t) {
      const int type = static_cast<int>(t);
      for (int p : needs.partitions[t]) {
        const bool fresh = !resident_[t].count(p);
        get(type, p);
        if (fresh && on_swap) on_swap(counter_);
      }
      if (needs.partitions[t].empty()) continue;
      tables.source[t] = get(type, partitioned(type) ? bucket.src : 0);
      tables.dest[t] = get(type, partitioned(type) ? bucket.dst : 0);
    }
    return tables;
  }

  // Writes every partition plus relations and the manifest. Resident tables
  // stay resident and become clean; swap files move into the checkpoint.
  CheckpointManifest checkpoint(const RelationState& relations, int completed_epochs, int buckets_done = 0) {
    CheckpointManifest m;
    m.model_hash = model_hash(config_);
    m.epoch = completed_epochs;
    m.buckets_done = buckets_done;
    for (std::size_t t = 0; t < resident_.size(); ++t) {
      const int type = static_cast<int>(t);
      for (std::size_t p = 0; p < meta_.entity_counts[t].size(); ++p) {
        const int pi = static_cast<int>(p);
        const auto target = embedding_file(dir_, name(type), pi);
        const auto swap_file = embedding_file(swap_, name(type), pi);
        auto it = resident_[t].find(pi);
        if (it != resident_[t].end()) {
          write_embedding_file(target, *it->second);
          it->second->dirty = false;
          fs::remove(swap_file);
        } else if (fs::exists(swap_file)) {
          fs::rename(swap_file, target);
        } else if (!from_checkpoint_) {
          write_embedding_file(target, init_partition(type, pi, rows(type, pi), config_.train.dimension,
                                                      config_.train.seed));
        }
        m.files.push_back(target.filename().string());
      }
    }
    write_relation_files(dir_, relations, config_.train.dimension);
    m.files.push_back("relations.gfe");
    m.files.push_back("relations_adagrad.gfe");
    write_manifest(dir_, m);
    from_checkpoint_ = true;
    return m;
  }

 private:
  const Config& config_;
  const DatasetMeta& meta_;
  fs::path dir_, swap_;
  bool from_checkpoint_;
  ResidencyCounter& counter_;
  std::vector<std::map<int, std::unique_ptr<EmbeddingPartition>>> resident_;
};

}  // namespace

DatasetMeta load_training_meta(const Config& config, const fs::path& dataset_dir) {
  validate(config);
  auto meta = DatasetMeta::load(dataset_dir);
  const auto& schema = config.schema;
  if (meta.entity_counts.size() != schema.entities.size() ||
      meta.buckets.source_partitions != schema.source_partitions() ||
      meta.buckets.dest_partitions != schema.dest_partitions()) {
    throw ValidationError("dataset was ingested with a different schema");
  }
  for (std::size_t t = 0; t < schema.entities.size(); ++t) {
    if (static_cast<int>(meta.entity_counts[t].size()) != schema.entities[t].num_partitions) {
      throw ValidationError("dataset partition count differs for entity type " + schema.entities[t].name);
    }
  }
  return meta;
}

RunResult run_epochs(const Config& config, const RunOptions& options) {
  const auto meta = load_training_meta(config, options.dataset_dir);
  const auto& schema = config.schema;
  fs::create_directories(options.checkpoint_dir);

  RunResult result;
  RelationState relations;
  int start_epoch = 0;
  int skip_buckets = 0;
  const auto existing = read_manifest(options.checkpoint_dir);
  if (existing) {
    if (existing->model_hash != model_hash(config)) {
      throw ValidationError("checkpoint in " + options.checkpoint_dir.string() + " belongs to a different model");
    }
    start_epoch = existing->epoch;
    skip_buckets = existing->buckets_done;
    relations = read_relation_files(options.checkpoint_dir, config);
    result.manifest = *existing;
  } else {
    relations = RelationState::initial(config);
  }

  ResidencyCounter counter(schema.entities.size());
  LocalStore store(config, meta, options.checkpoint_dir, existing.has_value(), counter);
  const int total_epochs = options.num_epochs.value_or(config.train.num_epochs);
  const auto order = inside_out_order(schema.source_partitions(), schema.dest_partitions());
  BucketTrainOptions bucket_options;
  bucket_options.observer = options.observer;

  const int steps_per_epoch = config.train.bucket_passes_per_epoch * static_cast<int>(order.size());
  int run = 0;
  for (int epoch = start_epoch; epoch < total_epochs; ++epoch) {
    if (options.stop_after_epochs && run >= *options.stop_after_epochs) break;
    const auto epoch_start = Clock::now();
    const auto loads_before = counter.loads();
    int step = 0;
    for (int pass = 0; pass < config.train.bucket_passes_per_epoch; ++pass) {
      for (const auto& bucket : order) {
        const int index = step++;
        if (epoch == start_epoch && index < skip_buckets) continue;
        const auto tables = store.prepare(bucket, options.on_swap);
        const auto edges = read_bucket(bucket_path(options.dataset_dir, bucket.src, bucket.dst),
                                       meta.buckets.count(bucket.src, bucket.dst));
        // With several passes, pass k trains the k-th contiguous slice of the bucket.
        const auto passes = static_cast<std::size_t>(config.train.bucket_passes_per_epoch);
        const auto k = static_cast<std::size_t>(pass);
        const std::span<const EdgeRecord> slice(edges.data() + k * edges.size() / passes,
                                                edges.data() + (k + 1) * edges.size() / passes);
        const auto seed = derive_seed(config.train.seed, epoch, bucket.src, bucket.dst, pass);
        const auto stats = train_bucket(slice, tables, relations, config, seed, bucket_options);
        if (stats.edges > 0) {
          for (auto* t : tables.source) {
            if (t) t->dirty = true;
          }
          for (auto* t : tables.dest) {
            if (t) t->dirty = true;
          }
        }
        BucketLog log{epoch, pass, bucket, stats.edges, stats.mean_loss(), stats.seconds};
        if (options.on_bucket) options.on_bucket(log);
        result.buckets.push_back(log);
        if (config.train.checkpoint_every_bucket && step < steps_per_epoch) {
          result.manifest = store.checkpoint(relations, epoch, step);
        }
      }
    }
    result.manifest = store.checkpoint(relations, epoch + 1);
    result.loads_per_epoch.push_back(counter.loads() - loads_before);
    result.epoch_seconds.push_back(seconds_since(epoch_start));
    if (options.on_epoch) options.on_epoch(epoch, counter);
    ++run;
  }
  if (!existing && run == 0) result.manifest = store.checkpoint(relations, start_epoch);
  result.peak_resident_bytes = counter.peak_bytes();
  result.peak_partitioned_rows = counter.peak_partitioned_rows();
  for (std::size_t t = 0; t < schema.entities.size(); ++t) {
    result.peak_partitions_per_type.push_back(counter.peak_partitions(static_cast<int>(t)));
  }
  return result;
}

}  // namespace gfe

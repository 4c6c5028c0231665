#include "gfe/distributed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gfe/bytes.hpp"
#include "gfe/hash.hpp"
#include "gfe/optimizer.hpp"

namespace gfe {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

// ---- cluster manifest ----

ClusterManifest ClusterManifest::parse(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("cluster manifest is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("cluster manifest must be an object");
  static const std::set<std::string> allowed{"lock_server",     "partition_servers", "param_servers",
                                             "num_trainers",    "dataset_dir",       "checkpoint_dir",
                                             "sync_period_ms", "sync_bandwidth_bytes_per_sec", "connect_timeout_ms"};
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ValidationError("unknown cluster manifest key '" + key + "'");
  }
  ClusterManifest c;
  try {
    c.lock_server = Endpoint::parse(j.at("lock_server").get<std::string>());
    for (const auto& e : j.value("partition_servers", nlohmann::json::array())) {
      c.partition_servers.push_back(Endpoint::parse(e.get<std::string>()));
    }
    for (const auto& e : j.value("param_servers", nlohmann::json::array())) {
      c.param_servers.push_back(Endpoint::parse(e.get<std::string>()));
    }
    c.num_trainers = j.value("num_trainers", 1);
    c.dataset_dir = j.at("dataset_dir").get<std::string>();
    c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
    c.sync_period_ms = j.value("sync_period_ms", c.sync_period_ms);
    c.sync_bandwidth_bytes_per_sec = j.value("sync_bandwidth_bytes_per_sec", 0.0);
    c.connect_timeout_ms = j.value("connect_timeout_ms", c.connect_timeout_ms);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("cluster manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("cluster manifest: ") + e.what());
  }
  if (c.num_trainers < 1) throw ValidationError("cluster manifest: num_trainers must be >= 1");
  if (c.sync_period_ms < 1) throw ValidationError("cluster manifest: sync_period_ms must be >= 1");
  if (c.sync_bandwidth_bytes_per_sec < 0) throw ValidationError("cluster manifest: bandwidth must be >= 0");
  return c;
}

ClusterManifest ClusterManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read cluster manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ClusterManifest::json() const {
  nlohmann::json j;
  j["lock_server"] = lock_server.str();
  j["partition_servers"] = nlohmann::json::array();
  for (const auto& e : partition_servers) j["partition_servers"].push_back(e.str());
  j["param_servers"] = nlohmann::json::array();
  for (const auto& e : param_servers) j["param_servers"].push_back(e.str());
  j["num_trainers"] = num_trainers;
  j["dataset_dir"] = dataset_dir.string();
  j["checkpoint_dir"] = checkpoint_dir.string();
  j["sync_period_ms"] = sync_period_ms;
  j["sync_bandwidth_bytes_per_sec"] = sync_bandwidth_bytes_per_sec;
  j["connect_timeout_ms"] = connect_timeout_ms;
  return j.dump(2) + "\n";
}

int partition_shard(const PartKey& key, int num_shards) {
  return static_cast<int>(derive_seed(0x9a27, key.entity_type, key.partition) % static_cast<std::uint64_t>(num_shards));
}

int param_shard(const ParamKey& key, int num_shards) {
  return static_cast<int>(derive_seed(0x9a28, static_cast<int>(key.kind), key.a, key.b) %
                          static_cast<std::uint64_t>(num_shards));
}

// ---- lock server ----

std::string LockEvent::line() const {
  static constexpr const char* names[] = {"grant", "complete", "unlock", "disconnect"};
  std::string parts;
  for (int p : partitions) parts += (parts.empty() ? "" : ",") + std::to_string(p);
  char buf[256];
  std::snprintf(buf, sizeof buf, "event=lock_%s t=%.6f requester=%llu round=%d bucket=%d,%d partitions=%s",
                names[static_cast<int>(kind)], seconds, static_cast<unsigned long long>(requester), round, bucket.src,
                bucket.dst, parts.empty() ? "-" : parts.c_str());
  return buf;
}

std::optional<std::string> audit_lock_trace(const std::vector<LockEvent>& trace) {
  std::map<int, ConnId> owner;
  for (const auto& e : trace) {
    switch (e.kind) {
      case LockEvent::Kind::grant:
        for (int p : e.partitions) {
          auto it = owner.find(p);
          if (it != owner.end() && it->second != e.requester) {
            return "partition " + std::to_string(p) + " granted to " + std::to_string(e.requester) +
                   " while held by " + std::to_string(it->second) + " (" + e.line() + ")";
          }
          owner[p] = e.requester;
        }
        break;
      case LockEvent::Kind::unlock:
      case LockEvent::Kind::disconnect:
        for (int p : e.partitions) {
          auto it = owner.find(p);
          if (it != owner.end() && it->second == e.requester) owner.erase(it);
        }
        break;
      case LockEvent::Kind::complete:
        break;
    }
  }
  return std::nullopt;
}

LockService::LockService(int source_partitions, int dest_partitions, std::uint32_t retry_after_ms)
    : scheduler_(source_partitions, dest_partitions), retry_after_ms_(retry_after_ms), start_(Clock::now()) {}

void LockService::record(LockEvent event) {
  event.seconds = std::chrono::duration<double>(Clock::now() - start_).count();
  event.round = round_;
  if (sink_) sink_(event.line());
  trace_.push_back(std::move(event));
}

std::vector<LockEvent> LockService::trace() const {
  std::lock_guard lock(mutex_);
  return trace_;
}

void LockService::set_trace_sink(std::function<void(const std::string&)> sink) {
  std::lock_guard lock(mutex_);
  sink_ = std::move(sink);
}

int LockService::round() const {
  std::lock_guard lock(mutex_);
  return round_;
}

Outbox LockService::resolve_barriers() {
  Outbox out;
  for (auto& [id, b] : barriers_) {
    if (b.resolved || b.waiting.empty()) continue;
    if (b.waiting.size() + static_cast<std::size_t>(departed_) < b.participants) continue;
    b.resolved = true;
    for (ConnId c : b.waiting) out.emplace_back(c, encode(AckMsg{static_cast<std::uint64_t>(id)}));
    b.waiting.clear();
  }
  return out;
}

Outbox LockService::handle(ConnId conn, const Frame& frame) {
  std::lock_guard lock(mutex_);
  switch (frame.tag) {
    case Tag::acquire: {
      trainers_.insert(conn);
      const auto m = decode_acquire(frame);
      const NoneAvailableMsg retry{false, retry_after_ms_};
      if (m.round < round_) return {{conn, encode(NoneAvailableMsg{true, 0})}};
      const bool all_done = scheduler_.completed().size() == scheduler_.order().size();
      if (m.round > round_) {
        const bool idle = scheduler_.completed().empty() && scheduler_.active().empty();
        if (!all_done && !idle) return {{conn, encode(retry)}};
        while (round_ < m.round) {
          scheduler_.start_epoch();
          ++round_;
        }
      } else if (all_done) {
        return {{conn, encode(NoneAvailableMsg{true, 0})}};
      }
      const auto bucket = scheduler_.acquire(conn);
      if (!bucket) return {{conn, encode(retry)}};
      record({0, conn, LockEvent::Kind::grant, 0, *bucket, scheduler_.partitions_of(*bucket)});
      return {{conn, encode(GrantMsg{*bucket, round_})}};
    }
    case Tag::release: {
      const auto m = decode_release(frame);
      if (m.completed) {
        try {
          scheduler_.complete(conn, *m.completed);
        } catch (const std::logic_error& e) {
          throw ProtocolError(e.what());
        }
        record({0, conn, LockEvent::Kind::complete, 0, *m.completed, {}});
      }
      if (!m.unlock.empty()) {
        auto before = scheduler_.held_by(conn);
        scheduler_.unlock(conn, m.unlock);
        const auto after = scheduler_.held_by(conn);
        std::vector<int> released;
        for (int p : before) {
          if (std::find(after.begin(), after.end(), p) == after.end()) released.push_back(p);
        }
        if (!released.empty()) record({0, conn, LockEvent::Kind::unlock, 0, {}, released});
      }
      return {{conn, encode(AckMsg{})}};
    }
    case Tag::epoch_barrier: {
      trainers_.insert(conn);
      const auto m = decode_barrier(frame);
      auto& b = barriers_[m.id];
      b.participants = std::max(b.participants, m.participants);
      if (b.resolved) return {{conn, encode(AckMsg{static_cast<std::uint64_t>(m.id)})}};
      b.waiting.insert(conn);
      return resolve_barriers();
    }
    default:
      throw ProtocolError("lock server cannot handle " + std::string(tag_name(frame.tag)));
  }
}

Outbox LockService::on_disconnect(ConnId conn) {
  std::lock_guard lock(mutex_);
  const auto held = scheduler_.held_by(conn);
  scheduler_.release_requester(conn);
  if (!held.empty()) record({0, conn, LockEvent::Kind::disconnect, 0, {}, held});
  if (trainers_.erase(conn)) ++departed_;
  for (auto& [_, b] : barriers_) b.waiting.erase(conn);
  return resolve_barriers();
}

// ---- partition server ----

namespace {

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const fs::path& path, std::string_view bytes) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Header and size check of an embedding blob without decoding the floats.
void check_blob(std::string_view blob) {
  if (blob.size() < 20 || blob.substr(0, 4) != "GFE1") throw ProtocolError("PART_PUT blob is not an embedding table");
  ByteReader r(blob.substr(4));
  const auto version = r.u32();
  const std::uint64_t dim = r.u32();
  const std::uint64_t rows = r.u64();
  if (version != 1 || blob.size() != 20 + rows * dim * 4 + rows * 4) {
    throw ProtocolError("PART_PUT blob size does not match its header");
  }
}

std::string key_text(const PartKey& key) {
  return std::to_string(key.entity_type) + "/" + std::to_string(key.partition);
}

}  // namespace

PartitionService::PartitionService(int shard, int num_shards, std::optional<fs::path> spill_dir)
    : shard_(shard), num_shards_(num_shards), spill_dir_(std::move(spill_dir)) {
  if (num_shards < 1 || shard < 0 || shard >= num_shards) throw std::invalid_argument("bad partition shard index");
  if (spill_dir_) fs::create_directories(*spill_dir_);
}

void PartitionService::store(const PartKey& key, std::string blob) {
  std::lock_guard lock(mutex_);
  if (spill_dir_) {
    write_file_bytes(*spill_dir_ / ("part_" + std::to_string(key.entity_type) + "_" + std::to_string(key.partition) +
                                    ".gfe"),
                     blob);
    spilled_.insert(key);
  } else {
    blobs_[key] = std::make_shared<const std::string>(std::move(blob));
  }
}

std::optional<std::string> PartitionService::load(const PartKey& key) const {
  std::shared_ptr<const std::string> blob;
  {
    std::lock_guard lock(mutex_);
    if (spilled_.count(key)) {
      return read_file_bytes(*spill_dir_ / ("part_" + std::to_string(key.entity_type) + "_" +
                                            std::to_string(key.partition) + ".gfe"));
    }
    auto it = blobs_.find(key);
    if (it == blobs_.end()) return std::nullopt;
    blob = it->second;
  }
  return *blob;
}

std::vector<std::string> PartitionService::overlaps() const {
  std::lock_guard lock(mutex_);
  return overlaps_;
}

std::size_t PartitionService::stored() const {
  std::lock_guard lock(mutex_);
  return blobs_.size() + spilled_.size();
}

void PartitionService::check_owner(const PartKey& key, ConnId conn, const char* op) {
  auto it = owner_.find(key);
  if (it != owner_.end() && it->second != conn) {
    overlaps_.push_back(std::string(op) + " of partition " + key_text(key) + " by connection " +
                        std::to_string(conn) + " while held by connection " + std::to_string(it->second));
  }
}

Outbox PartitionService::handle(ConnId conn, const Frame& frame) {
  switch (frame.tag) {
    case Tag::part_get: {
      const auto m = decode_part_get(frame);
      if (partition_shard(m.key, num_shards_) != shard_) {
        throw ProtocolError("partition " + key_text(m.key) + " does not belong to shard " + std::to_string(shard_));
      }
      {
        std::lock_guard lock(mutex_);
        check_owner(m.key, conn, m.snapshot ? "snapshot GET" : "GET");
        if (!m.snapshot) owner_[m.key] = conn;
      }
      auto blob = load(m.key);
      PartDataMsg reply;
      if (blob) {
        reply.found = true;
        reply.blob = std::move(*blob);
      }
      return {{conn, encode(reply)}};
    }
    case Tag::part_put: {
      auto m = decode_part_put(frame);
      if (partition_shard(m.key, num_shards_) != shard_) {
        throw ProtocolError("partition " + key_text(m.key) + " does not belong to shard " + std::to_string(shard_));
      }
      check_blob(m.blob);
      {
        std::lock_guard lock(mutex_);
        check_owner(m.key, conn, "PUT");
        owner_.erase(m.key);
      }
      store(m.key, std::move(m.blob));
      return {{conn, encode(AckMsg{})}};
    }
    default:
      throw ProtocolError("partition server cannot handle " + std::string(tag_name(frame.tag)));
  }
}

Outbox PartitionService::on_disconnect(ConnId conn) {
  std::lock_guard lock(mutex_);
  for (auto it = owner_.begin(); it != owner_.end();) it = it->second == conn ? owner_.erase(it) : std::next(it);
  return {};
}

// ---- parameter server ----

namespace {

std::size_t key_value_count(const ParamKey& key, const Config& config, const RelationState& relations,
                            const DatasetMeta& meta) {
  if (key.kind == ParamKind::relation) {
    const auto& p = relations.params[static_cast<std::size_t>(key.a)];
    return key.b == 0 ? p.forward.size() : p.reciprocal.size();
  }
  const std::int64_t rows = meta.entity_counts[static_cast<std::size_t>(key.a)][0];
  const std::int64_t begin = key.b * kEntityBlockRows;
  return static_cast<std::size_t>(std::min(rows, begin + kEntityBlockRows) - begin) *
         static_cast<std::size_t>(config.train.dimension);
}

std::optional<CheckpointManifest> matching_manifest(const Config& config, const fs::path& dir) {
  if (dir.empty() || !fs::exists(dir)) return std::nullopt;
  auto m = read_manifest(dir);
  if (m && m->model_hash != model_hash(config)) {
    throw ValidationError("checkpoint in " + dir.string() + " belongs to a different model");
  }
  return m;
}

}  // namespace

SharedState initial_shared_state(const Config& config, const DatasetMeta& meta, const fs::path& checkpoint_dir) {
  SharedState state;
  const auto manifest = matching_manifest(config, checkpoint_dir);
  state.relations = manifest ? read_relation_files(checkpoint_dir, config) : RelationState::initial(config);
  for (std::size_t t = 0; t < config.schema.entities.size(); ++t) {
    const auto& e = config.schema.entities[t];
    if (e.partitioned()) continue;
    const int type = static_cast<int>(t);
    const auto rows = meta.entity_counts[t][0];
    if (manifest) {
      EmbeddingPartition part;
      part.entity_type = type;
      part.dim = config.train.dimension;
      read_embedding_file(embedding_file(checkpoint_dir, e.name, 0), part, rows);
      state.unpartitioned[type] = std::move(part);
    } else {
      state.unpartitioned[type] = init_partition(type, 0, rows, config.train.dimension, config.train.seed);
    }
  }
  return state;
}

std::vector<ParamKey> shared_param_keys(const Config& config, const DatasetMeta& meta) {
  std::vector<ParamKey> keys;
  const auto initial = RelationState::initial(config);
  for (std::size_t r = 0; r < initial.params.size(); ++r) {
    if (!initial.params[r].forward.empty()) keys.push_back({ParamKind::relation, static_cast<int>(r), 0});
    if (!initial.params[r].reciprocal.empty()) keys.push_back({ParamKind::relation, static_cast<int>(r), 1});
  }
  for (std::size_t t = 0; t < config.schema.entities.size(); ++t) {
    if (config.schema.entities[t].partitioned()) continue;
    const auto rows = meta.entity_counts[t][0];
    for (std::int64_t b = 0; b * kEntityBlockRows < rows; ++b) {
      keys.push_back({ParamKind::entity_block, static_cast<int>(t), static_cast<int>(b)});
    }
  }
  return keys;
}

ParamService::ParamService(const Config& config, const DatasetMeta& meta, const SharedState& state, int shard,
                           int num_shards) {
  if (num_shards < 1 || shard < 0 || shard >= num_shards) throw std::invalid_argument("bad parameter shard index");
  const int dim = config.train.dimension;
  for (const auto& key : shared_param_keys(config, meta)) {
    if (param_shard(key, num_shards) != shard) continue;
    auto entry = std::make_unique<Entry>();
    if (key.kind == ParamKind::relation) {
      const auto r = static_cast<std::size_t>(key.a);
      entry->lr = config.train.relation_lr();
      entry->values = key.b == 0 ? state.relations.params[r].forward : state.relations.params[r].reciprocal;
      entry->accumulators = key.b == 0 ? state.relations.acc_forward[r] : state.relations.acc_reciprocal[r];
    } else {
      const auto& table = state.unpartitioned.at(key.a);
      const std::int64_t begin = key.b * kEntityBlockRows;
      const std::int64_t end = std::min(table.rows, begin + kEntityBlockRows);
      entry->rowwise = true;
      entry->dim = dim;
      entry->lr = config.train.learning_rate;
      entry->values.assign(table.values.begin() + begin * dim, table.values.begin() + end * dim);
      entry->accumulators.assign(table.adagrad.begin() + begin, table.adagrad.begin() + end);
    }
    if (entry->values.size() != key_value_count(key, config, state.relations, meta)) {
      throw ValidationError("shared parameter state does not match the dataset");
    }
    entries_[key] = std::move(entry);
  }
}

std::vector<ParamKey> ParamService::keys() const {
  std::vector<ParamKey> out;
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

void ParamService::apply(Entry& entry, const ParamPushEntry& push, ConnId conn) {
  std::lock_guard lock(entry.mutex);
  if (!entry.rowwise) {
    dense_update(entry.values, push.grads, entry.accumulators, entry.lr);
  } else {
    const auto d = static_cast<std::size_t>(entry.dim);
    for (std::size_t i = 0; i < push.rows.size(); ++i) {
      const std::size_t row = push.rows[i];
      row_update(std::span<float>(entry.values.data() + row * d, d),
                 std::span<const float>(push.grads.data() + i * d, d), entry.accumulators[row], entry.lr);
    }
  }
  ++entry.version;
  if (entry.log.size() < (1u << 16)) entry.log.emplace_back(conn, entry.version);
}

ParamBlock ParamService::snapshot(const ParamKey& key, bool with_accumulators) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ProtocolError("parameter key not served by this shard");
  const auto& e = *it->second;
  std::lock_guard lock(e.mutex);
  ParamBlock b{key, e.version, e.values, {}};
  if (with_accumulators) b.accumulators = e.accumulators;
  return b;
}

std::vector<std::pair<ConnId, std::uint64_t>> ParamService::push_log(const ParamKey& key) const {
  const auto& e = *entries_.at(key);
  std::lock_guard lock(e.mutex);
  return e.log;
}

Outbox ParamService::handle(ConnId conn, const Frame& frame) {
  switch (frame.tag) {
    case Tag::param_fetch: {
      const auto m = decode_param_fetch(frame);
      ParamValuesMsg reply;
      for (const auto& k : m.keys) reply.blocks.push_back(snapshot(k, m.with_accumulators));
      return {{conn, encode(reply)}};
    }
    case Tag::param_push_acc: {
      const auto m = decode_param_push(frame);
      for (const auto& p : m.entries) {
        auto it = entries_.find(p.key);
        if (it == entries_.end()) throw ProtocolError("parameter key not served by this shard");
        const auto& e = *it->second;
        if (!e.rowwise) {
          if (p.rows != std::vector<std::uint32_t>{0} || p.width != e.values.size()) {
            throw ProtocolError("relation push has the wrong shape");
          }
        } else {
          const auto rows = e.accumulators.size();
          if (p.width != static_cast<std::uint32_t>(e.dim)) throw ProtocolError("entity push has the wrong width");
          for (auto r : p.rows) {
            if (r >= rows) throw ProtocolError("entity push row outside its block");
          }
        }
        for (float g : p.grads) {
          if (!std::isfinite(g)) throw ProtocolError("pushed gradient is not finite");
        }
      }
      for (const auto& p : m.entries) apply(*entries_.at(p.key), p, conn);
      return {{conn, encode(AckMsg{})}};
    }
    default:
      throw ProtocolError("parameter server cannot handle " + std::string(tag_name(frame.tag)));
  }
}

// ---- parameter client ----

ParamClient::ParamClient(const Config& config, const DatasetMeta& meta, std::vector<Endpoint> servers,
                         RelationState& relations, std::map<int, EmbeddingPartition*> unpartitioned, Options options)
    : config_(config),
      keys_(shared_param_keys(config, meta)),
      servers_(std::move(servers)),
      relations_(relations),
      unpartitioned_(std::move(unpartitioned)),
      options_(options),
      connections_(servers_.size()) {
  if (!keys_.empty() && servers_.empty()) throw ValidationError("shared parameters exist but no parameter server is listed");
}

ParamClient::~ParamClient() { stop(); }

namespace {

bool all_zero(std::span<const float> g) {
  return std::all_of(g.begin(), g.end(), [](float v) { return v == 0.0f; });
}

void accumulate(std::vector<float>& into, std::span<const float> g) {
  if (into.empty()) into.assign(g.size(), 0.0f);
  for (std::size_t k = 0; k < g.size(); ++k) into[k] += g[k];
}

}  // namespace

void ParamClient::add_relation(int relation, Side side, std::span<const float> grad) {
  if (all_zero(grad)) return;
  std::lock_guard lock(pending_mutex_);
  accumulate(relation_pending_[{relation, side == Side::dest ? 0 : 1}], grad);
}

void ParamClient::add_entity_row(int entity_type, std::int64_t row, std::span<const float> grad) {
  if (all_zero(grad)) return;
  std::lock_guard lock(pending_mutex_);
  accumulate(entity_pending_[entity_type][row], grad);
}

void ParamClient::requeue(const ParamPushEntry& entry) {
  std::lock_guard lock(pending_mutex_);
  if (entry.key.kind == ParamKind::relation) {
    accumulate(relation_pending_[{entry.key.a, entry.key.b}], entry.grads);
    return;
  }
  for (std::size_t i = 0; i < entry.rows.size(); ++i) {
    const std::int64_t row = entry.key.b * kEntityBlockRows + entry.rows[i];
    accumulate(entity_pending_[entry.key.a][row],
               std::span<const float>(entry.grads.data() + i * entry.width, entry.width));
  }
}

void ParamClient::install(const ParamBlock& block) {
  if (block.key.kind == ParamKind::relation) {
    auto& p = relations_.params.at(static_cast<std::size_t>(block.key.a));
    auto& target = block.key.b == 0 ? p.forward : p.reciprocal;
    if (target.size() != block.values.size()) throw ProtocolError("fetched relation block has the wrong size");
    std::copy(block.values.begin(), block.values.end(), target.begin());
    return;
  }
  auto it = unpartitioned_.find(block.key.a);
  if (it == unpartitioned_.end()) throw ProtocolError("fetched block for an unknown entity type");
  auto& table = *it->second;
  const std::size_t offset = static_cast<std::size_t>(block.key.b * kEntityBlockRows) * static_cast<std::size_t>(table.dim);
  if (offset + block.values.size() > table.values.size()) throw ProtocolError("fetched entity block out of range");
  std::copy(block.values.begin(), block.values.end(), table.values.begin() + static_cast<std::ptrdiff_t>(offset));
}

FramedConnection& ParamClient::connection(std::size_t shard) {
  auto& c = connections_[shard];
  if (!c) c = std::make_unique<FramedConnection>(connect_once(servers_[shard]));
  return *c;
}

bool ParamClient::sync_once() {
  if (keys_.empty()) return true;
  std::lock_guard sync_lock(sync_mutex_);
  const int shards = static_cast<int>(servers_.size());
  std::map<std::pair<int, int>, std::vector<float>> relations;
  std::map<int, std::map<std::int64_t, std::vector<float>>> entities;
  {
    std::lock_guard lock(pending_mutex_);
    relations.swap(relation_pending_);
    entities.swap(entity_pending_);
  }
  std::vector<ParamPushMsg> pushes(servers_.size());
  for (auto& [k, g] : relations) {
    ParamKey key{ParamKind::relation, k.first, k.second};
    ParamPushEntry e{key, static_cast<std::uint32_t>(g.size()), {0}, std::move(g)};
    pushes[static_cast<std::size_t>(param_shard(key, shards))].entries.push_back(std::move(e));
  }
  for (auto& [type, rows] : entities) {
    std::map<std::int64_t, ParamPushEntry> blocks;
    for (auto& [row, g] : rows) {
      const std::int64_t b = row / kEntityBlockRows;
      auto& e = blocks[b];
      e.key = {ParamKind::entity_block, type, static_cast<int>(b)};
      e.width = static_cast<std::uint32_t>(g.size());
      e.rows.push_back(static_cast<std::uint32_t>(row - b * kEntityBlockRows));
      e.grads.insert(e.grads.end(), g.begin(), g.end());
    }
    for (auto& [_, e] : blocks) {
      pushes[static_cast<std::size_t>(param_shard(e.key, shards))].entries.push_back(std::move(e));
    }
  }

  bool ok = true;
  std::uint64_t bytes = 0;
  for (std::size_t s = 0; s < servers_.size(); ++s) {
    if (pushes[s].entries.empty()) continue;
    try {
      const auto frame = encode(pushes[s]);
      const auto reply = connection(s).request(frame);
      decode_ack(reply);
      bytes += frame.payload.size() + reply.payload.size() + 2 * kFrameHeaderBytes;
    } catch (const std::exception&) {
      connections_[s].reset();
      for (const auto& e : pushes[s].entries) requeue(e);
      ok = false;
    }
  }
  std::vector<std::vector<ParamKey>> by_shard(servers_.size());
  for (const auto& k : keys_) by_shard[static_cast<std::size_t>(param_shard(k, shards))].push_back(k);
  for (std::size_t s = 0; s < servers_.size(); ++s) {
    if (by_shard[s].empty()) continue;
    try {
      const auto frame = encode(ParamFetchMsg{by_shard[s], false});
      const auto reply = connection(s).request(frame);
      for (const auto& block : decode_param_values(reply).blocks) install(block);
      bytes += frame.payload.size() + reply.payload.size() + 2 * kFrameHeaderBytes;
    } catch (const std::exception&) {
      connections_[s].reset();
      ok = false;
    }
  }
  std::lock_guard lock(stats_mutex_);
  ++stats_.rounds;
  if (!ok) ++stats_.failures;
  stats_.bytes += bytes;
  return ok;
}

void ParamClient::sync_blocking(milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  milliseconds delay(20);
  while (!sync_once()) {
    if (Clock::now() + delay > deadline) {
      throw NetworkError("parameter servers unreachable for " + std::to_string(timeout.count()) + " ms");
    }
    std::this_thread::sleep_for(delay);
    delay = std::min(delay * 2, milliseconds(2000));
  }
}

std::vector<ParamBlock> ParamClient::fetch_all(bool with_accumulators) {
  std::lock_guard sync_lock(sync_mutex_);
  const int shards = static_cast<int>(servers_.size());
  std::vector<std::vector<ParamKey>> by_shard(servers_.size());
  for (const auto& k : keys_) by_shard[static_cast<std::size_t>(param_shard(k, shards))].push_back(k);
  std::vector<ParamBlock> out;
  for (std::size_t s = 0; s < servers_.size(); ++s) {
    if (by_shard[s].empty()) continue;
    try {
      auto blocks = decode_param_values(connection(s).request(encode(ParamFetchMsg{by_shard[s], with_accumulators})));
      for (auto& b : blocks.blocks) out.push_back(std::move(b));
    } catch (...) {
      connections_[s].reset();
      throw;
    }
  }
  return out;
}

void ParamClient::start() {
  if (keys_.empty() || loop_.joinable()) return;
  {
    std::lock_guard lock(loop_mutex_);
    stop_ = false;
  }
  loop_ = std::thread([this] {
    milliseconds backoff(0);
    std::unique_lock lock(loop_mutex_);
    while (!stop_) {
      const auto wait = backoff.count() > 0 ? backoff : options_.period;
      if (loop_cv_.wait_for(lock, wait, [this] { return stop_; })) break;
      lock.unlock();
      const auto start = Clock::now();
      const auto bytes_before = stats().bytes;
      const bool ok = sync_once();
      const auto moved = stats().bytes - bytes_before;
      lock.lock();
      if (!ok) {
        backoff = std::min(std::max(backoff * 2, milliseconds(50)), milliseconds(5000));
        continue;
      }
      backoff = milliseconds(0);
      if (options_.bandwidth_bytes_per_sec > 0) {
        // Stretch the cycle so the average rate stays under the budget.
        const auto budget = std::chrono::duration<double>(static_cast<double>(moved) / options_.bandwidth_bytes_per_sec);
        const auto spent = Clock::now() - start;
        if (budget > spent) {
          loop_cv_.wait_for(lock, std::chrono::duration_cast<milliseconds>(budget - spent), [this] { return stop_; });
        }
      }
    }
  });
}

void ParamClient::stop() {
  {
    std::lock_guard lock(loop_mutex_);
    stop_ = true;
  }
  loop_cv_.notify_all();
  if (loop_.joinable()) loop_.join();
}

SyncStats ParamClient::stats() const {
  std::lock_guard lock(stats_mutex_);
  return stats_;
}

// ---- services ----

std::unique_ptr<LockService> make_lock_service(const Config& config) {
  validate(config);
  return std::make_unique<LockService>(config.schema.source_partitions(), config.schema.dest_partitions());
}

std::unique_ptr<PartitionService> make_partition_service(const Config& config, const ClusterManifest& cluster,
                                                         int shard, std::optional<fs::path> spill_dir) {
  validate(config);
  const int shards = static_cast<int>(cluster.partition_servers.size());
  if (shard < 0 || shard >= shards) throw ValidationError("partition shard " + std::to_string(shard) + " not in manifest");
  auto service = std::make_unique<PartitionService>(shard, shards, std::move(spill_dir));
  if (matching_manifest(config, cluster.checkpoint_dir)) {
    for (std::size_t t = 0; t < config.schema.entities.size(); ++t) {
      const auto& e = config.schema.entities[t];
      if (!e.partitioned()) continue;
      for (int p = 0; p < e.num_partitions; ++p) {
        const PartKey key{static_cast<int>(t), p};
        if (partition_shard(key, shards) != shard) continue;
        service->store(key, read_file_bytes(embedding_file(cluster.checkpoint_dir, e.name, p)));
      }
    }
  }
  return service;
}

std::unique_ptr<ParamService> make_param_service(const Config& config, const ClusterManifest& cluster, int shard) {
  const auto meta = load_training_meta(config, cluster.dataset_dir);
  const int shards = static_cast<int>(cluster.param_servers.size());
  if (shard < 0 || shard >= shards) throw ValidationError("parameter shard " + std::to_string(shard) + " not in manifest");
  const auto state = initial_shared_state(config, meta, cluster.checkpoint_dir);
  return std::make_unique<ParamService>(config, meta, state, shard, shards);
}

// ---- trainer ----

namespace {

class Trainer {
 public:
  Trainer(const Config& config, const DistributedOptions& options)
      : config_(config),
        options_(options),
        cluster_(options.cluster),
        meta_(load_training_meta(config, cluster_.dataset_dir)),
        timeout_(cluster_.connect_timeout_ms) {
    const auto& schema = config.schema;
    if (options.rank < 0 || options.rank >= cluster_.num_trainers) {
      throw ValidationError("rank " + std::to_string(options.rank) + " outside the cluster's " +
                            std::to_string(cluster_.num_trainers) + " trainers");
    }
    for (const auto& e : schema.entities) {
      if (e.partitioned() && cluster_.partition_servers.empty()) {
        throw ValidationError("cluster manifest lists no partition servers");
      }
    }
    if (const auto m = matching_manifest(config, cluster_.checkpoint_dir)) start_epoch_ = m->epoch;
    shared_ = initial_shared_state(config, meta_, cluster_.checkpoint_dir);
    std::map<int, EmbeddingPartition*> tables;
    for (auto& [t, part] : shared_.unpartitioned) tables[t] = &part;
    params_ = std::make_unique<ParamClient>(
        config, meta_, cluster_.param_servers, shared_.relations, tables,
        ParamClient::Options{milliseconds(cluster_.sync_period_ms), cluster_.sync_bandwidth_bytes_per_sec, timeout_});
    lock_ = connect("lock server", cluster_.lock_server);
    for (const auto& e : cluster_.partition_servers) partitions_.push_back(connect("partition server", e));
  }

  DistributedResult run() {
    const int total_epochs = options_.num_epochs.value_or(config_.train.num_epochs);
    const int passes = config_.train.bucket_passes_per_epoch;
    params_->sync_blocking(timeout_);
    barrier(0);
    params_->start();
    for (int epoch = start_epoch_; epoch < total_epochs; ++epoch) {
      const auto epoch_start = Clock::now();
      for (int pass = 0; pass < passes; ++pass) {
        const int round = epoch * passes + pass;
        while (true) {
          const auto reply = request(*lock_, encode(AcquireMsg{round}), "lock server");
          if (reply.tag == Tag::none_available) {
            const auto none = decode_none_available(reply);
            release_all();
            if (none.round_complete) break;
            std::this_thread::sleep_for(milliseconds(std::max<std::uint32_t>(1, none.retry_after_ms)));
            continue;
          }
          train_granted(decode_grant(reply).bucket, epoch, pass);
        }
      }
      release_all();
      params_->sync_blocking(timeout_);
      barrier(1 + 2 * epoch);
      if (options_.rank == 0) result_.manifest = write_checkpoint(epoch + 1);
      barrier(2 + 2 * epoch);
      result_.epoch_seconds.push_back(std::chrono::duration<double>(Clock::now() - epoch_start).count());
    }
    params_->stop();
    result_.sync = params_->stats();
    return std::move(result_);
  }

 private:
  std::unique_ptr<FramedConnection> connect(const std::string& what, const Endpoint& e) {
    try {
      return std::make_unique<FramedConnection>(connect_retry(e, timeout_));
    } catch (const NetworkError& err) {
      throw NetworkError(what + " " + e.str() + " unreachable: " + err.what());
    }
  }

  Frame request(FramedConnection& conn, const Frame& frame, const char* what) {
    try {
      return conn.request(frame);
    } catch (const NetworkError& e) {
      throw NetworkError(std::string(what) + " failed during " + std::string(tag_name(frame.tag)) + ": " + e.what());
    }
  }

  FramedConnection& shard_for(const PartKey& key) {
    return *partitions_[static_cast<std::size_t>(partition_shard(key, static_cast<int>(partitions_.size())))];
  }

  void barrier(int id) {
    decode_ack(request(*lock_, encode(BarrierMsg{id, static_cast<std::uint32_t>(cluster_.num_trainers)}), "lock server"));
  }

  std::int64_t rows(const PartKey& key) const {
    return meta_.entity_counts[static_cast<std::size_t>(key.entity_type)][static_cast<std::size_t>(key.partition)];
  }

  void put(const PartKey& key) {
    auto it = resident_.find(key);
    const auto& part = *it->second;
    PartPutMsg m{key, encode_embedding_blob(part.dim, part.rows, part.values, part.adagrad)};
    decode_ack(request(shard_for(key), encode(m), "partition server"));
    ++result_.partition_puts;
    resident_.erase(it);
  }

  void get(const PartKey& key) {
    const auto reply = decode_part_data(request(shard_for(key), encode(PartGetMsg{key, false}), "partition server"));
    auto part = std::make_unique<EmbeddingPartition>();
    if (reply.found) {
      auto blob = decode_embedding_blob(reply.blob);
      if (blob.dim != config_.train.dimension || blob.rows != rows(key)) {
        throw FormatError("partition " + std::to_string(key.entity_type) + "/" + std::to_string(key.partition) +
                          " from the partition server has the wrong shape");
      }
      part->entity_type = key.entity_type;
      part->partition = key.partition;
      part->dim = blob.dim;
      part->rows = blob.rows;
      part->values = std::move(blob.values);
      part->adagrad = std::move(blob.adagrad);
    } else {
      *part = init_partition(key.entity_type, key.partition, rows(key), config_.train.dimension, config_.train.seed);
      ++result_.partition_cold_starts;
    }
    ++result_.partition_gets;
    resident_[key] = std::move(part);
    note_residency();
  }

  void note_residency() {
    std::size_t bytes = 0;
    for (const auto& [_, p] : resident_) bytes += p->bytes();
    for (const auto& [_, p] : shared_.unpartitioned) bytes += p.bytes();
    result_.peak_resident_bytes = std::max(result_.peak_resident_bytes, bytes);
  }

  // PUTs every resident partition and unlocks it.
  void release_all() {
    if (resident_.empty()) return;
    std::set<int> parts;
    while (!resident_.empty()) {
      const auto key = resident_.begin()->first;
      put(key);
      parts.insert(key.partition);
    }
    decode_ack(request(*lock_, encode(ReleaseMsg{std::nullopt, {parts.begin(), parts.end()}}), "lock server"));
  }

  void train_granted(BucketId bucket, int epoch, int pass) {
    const auto& schema = config_.schema;
    const auto needs = bucket_needs(schema, bucket);
    auto needed = [&](const PartKey& k) {
      const auto& v = needs.partitions[static_cast<std::size_t>(k.entity_type)];
      return std::find(v.begin(), v.end(), k.partition) != v.end();
    };
    std::set<int> dropped;
    std::vector<PartKey> drop;
    for (const auto& [k, _] : resident_) {
      if (!needed(k)) drop.push_back(k);
    }
    for (const auto& k : drop) {
      put(k);
      dropped.insert(k.partition);
    }
    for (std::size_t t = 0; t < schema.entities.size(); ++t) {
      if (!schema.entities[t].partitioned()) continue;
      for (int p : needs.partitions[t]) {
        const PartKey k{static_cast<int>(t), p};
        if (!resident_.count(k)) get(k);
      }
    }
    if (!dropped.empty()) {
      decode_ack(request(*lock_, encode(ReleaseMsg{std::nullopt, {dropped.begin(), dropped.end()}}), "lock server"));
    }

    BucketTables tables;
    tables.source.resize(schema.entities.size(), nullptr);
    tables.dest.resize(schema.entities.size(), nullptr);
    for (std::size_t t = 0; t < schema.entities.size(); ++t) {
      const int type = static_cast<int>(t);
      if (!schema.entities[t].partitioned()) {
        auto& table = shared_.unpartitioned.at(type);
        tables.source[t] = tables.dest[t] = &table;
        continue;
      }
      auto find = [&](int p) -> EmbeddingPartition* {
        auto it = resident_.find({type, p});
        return it == resident_.end() ? nullptr : it->second.get();
      };
      tables.source[t] = find(bucket.src);
      tables.dest[t] = find(bucket.dst);
    }

    const auto edges = read_bucket(bucket_path(cluster_.dataset_dir, bucket.src, bucket.dst),
                                   meta_.buckets.count(bucket.src, bucket.dst));
    const auto n = static_cast<std::size_t>(config_.train.bucket_passes_per_epoch);
    const auto k = static_cast<std::size_t>(pass);
    const std::span<const EdgeRecord> slice(edges.data() + k * edges.size() / n, edges.data() + (k + 1) * edges.size() / n);
    BucketTrainOptions train_options;
    train_options.shared_sink = params_.get();
    const auto seed = derive_seed(config_.train.seed, epoch, bucket.src, bucket.dst, pass);
    const auto stats = train_bucket(slice, tables, shared_.relations, config_, seed, train_options);
    BucketLog log{epoch, pass, bucket, stats.edges, stats.mean_loss(), stats.seconds};
    if (options_.on_bucket) options_.on_bucket(log);
    result_.buckets.push_back(log);
    decode_ack(request(*lock_, encode(ReleaseMsg{bucket, {}}), "lock server"));
  }

  CheckpointManifest write_checkpoint(int completed_epochs) {
    const auto& schema = config_.schema;
    const auto& dir = cluster_.checkpoint_dir;
    fs::create_directories(dir);
    CheckpointManifest m;
    m.model_hash = model_hash(config_);
    m.epoch = completed_epochs;

    RelationState relations = shared_.relations;
    std::map<int, EmbeddingPartition> unpartitioned = shared_.unpartitioned;
    for (const auto& block : params_->fetch_all(true)) {
      if (block.key.kind == ParamKind::relation) {
        const auto r = static_cast<std::size_t>(block.key.a);
        (block.key.b == 0 ? relations.params[r].forward : relations.params[r].reciprocal) = block.values;
        (block.key.b == 0 ? relations.acc_forward[r] : relations.acc_reciprocal[r]) = block.accumulators;
      } else {
        auto& table = unpartitioned.at(block.key.a);
        const auto begin = static_cast<std::size_t>(block.key.b * kEntityBlockRows);
        std::copy(block.values.begin(), block.values.end(),
                  table.values.begin() + static_cast<std::ptrdiff_t>(begin * static_cast<std::size_t>(table.dim)));
        std::copy(block.accumulators.begin(), block.accumulators.end(),
                  table.adagrad.begin() + static_cast<std::ptrdiff_t>(begin));
      }
    }

    for (std::size_t t = 0; t < schema.entities.size(); ++t) {
      const auto& e = schema.entities[t];
      const int type = static_cast<int>(t);
      for (int p = 0; p < e.num_partitions; ++p) {
        const auto path = embedding_file(dir, e.name, p);
        if (!e.partitioned()) {
          write_embedding_file(path, unpartitioned.at(type));
        } else {
          const PartKey key{type, p};
          auto reply = decode_part_data(request(shard_for(key), encode(PartGetMsg{key, true}), "partition server"));
          if (reply.found) {
            write_file_bytes(path, reply.blob);
          } else {
            write_embedding_file(path, init_partition(type, p, rows(key), config_.train.dimension, config_.train.seed));
          }
        }
        m.files.push_back(path.filename().string());
      }
    }
    write_relation_files(dir, relations, config_.train.dimension);
    m.files.push_back("relations.gfe");
    m.files.push_back("relations_adagrad.gfe");
    write_manifest(dir, m);
    return m;
  }

  const Config& config_;
  const DistributedOptions& options_;
  const ClusterManifest& cluster_;
  DatasetMeta meta_;
  milliseconds timeout_;
  int start_epoch_ = 0;
  SharedState shared_;
  std::unique_ptr<ParamClient> params_;
  std::unique_ptr<FramedConnection> lock_;
  std::vector<std::unique_ptr<FramedConnection>> partitions_;
  std::map<PartKey, std::unique_ptr<EmbeddingPartition>> resident_;
  DistributedResult result_;
};

}  // namespace

DistributedResult distributed_train(const Config& config, const DistributedOptions& options) {
  Trainer trainer(config, options);
  return trainer.run();
}

}  // namespace gfe

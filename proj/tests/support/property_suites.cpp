#include "property_suites.hpp"

#include <algorithm>
#include <random>

#include "gfe/checkpoint.hpp"
#include "gfe/evaluator.hpp"
#include "gfe/scheduler.hpp"
#include "gfe/trainer.hpp"
#include "gfe/wire.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace gfe::testing {

namespace fs = std::filesystem;

namespace {

Config one_relation_config(const std::string& op, const std::string& sim, int dim, bool reciprocal) {
  return parse_config(R"({"entities": [{"name": "node"}], "relations": [
      {"name": "r", "source_type": "node", "dest_type": "node", "operator": ")" +
                      op + R"(", "similarity": ")" + sim + R"("}], "dimension": )" + std::to_string(dim) +
                      R"(, "reciprocal_relations": )" + (reciprocal ? "true" : "false") + "}");
}

EvalModel gaussian_model(const Config& config, std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  EvalModel m;
  m.config = &config;
  FlatEmbeddings t;
  t.dim = config.train.dimension;
  t.offsets = {0, n};
  t.values.resize(n, t.dim);
  for (Eigen::Index i = 0; i < t.values.size(); ++i) t.values.data()[i] = nd(rng);
  m.tables.push_back(std::move(t));
  m.relations = RelationState::initial(config);
  for (auto& p : m.relations.params) {
    for (auto& v : p.forward) v += 0.5f * nd(rng);
    for (auto& v : p.reciprocal) v += 0.5f * nd(rng);
  }
  return m;
}

oracle::Vector table_row(const EvalModel& m, std::int64_t i) {
  const auto& v = m.tables[0].values;
  return oracle::Vector(v.row(i).data(), v.row(i).data() + v.cols());
}

std::int64_t materialized_rank(const EvalModel& m, const EvalEdge& e, Side side,
                               std::span<const std::int64_t> candidates, const KnownEdges* known) {
  const auto& rel = m.config->schema.relations[0];
  const auto params = m.relations.params[static_cast<std::size_t>(e.rel)].for_side(side);
  const std::vector<double> theta(params.begin(), params.end());
  auto score = [&](std::int64_t s, std::int64_t d) {
    return oracle::score(rel.op, rel.similarity, theta, table_row(m, s), table_row(m, d));
  };
  const double positive = score(e.src, e.dst);
  std::vector<std::pair<std::int64_t, double>> scored;
  for (auto c : candidates) scored.emplace_back(c, side == Side::dest ? score(e.src, c) : score(c, e.dst));
  const std::int64_t true_id = side == Side::dest ? e.dst : e.src;
  return oracle::brute_force_rank(positive, scored, true_id, [&](std::int64_t c) {
    if (!known) return false;
    const EdgeKey k = side == Side::dest ? EdgeKey{e.src, e.rel, c} : EdgeKey{c, e.rel, e.dst};
    return known->count(k) > 0;
  });
}

bool shares_partition(BucketId a, BucketId b) {
  return a.src == b.src || a.dst == b.dst || a.src == b.dst || a.dst == b.src;
}

}  // namespace

SuiteResult rank_oracle_suite(std::uint64_t seed) {
  SuiteResult result;
  const int n = 60;
  std::vector<std::int64_t> ids(n);
  for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  for (const char* op : {"identity", "translation", "diagonal", "complex_diagonal", "linear"}) {
    for (const char* sim : {"dot", "cosine"}) {
      for (bool reciprocal : {false, true}) {
        const auto config = one_relation_config(op, sim, 6, reciprocal);
        const auto model = gaussian_model(config, n, seed);
        std::mt19937_64 rng(seed + 1);
        std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
        std::vector<EvalEdge> edges, train;
        for (int k = 0; k < 40; ++k) edges.push_back({0, pick(rng), pick(rng)});
        for (int k = 0; k < 300; ++k) train.push_back({0, pick(rng), pick(rng)});
        KnownEdges known;
        add_known(known, edges);
        add_known(known, train);
        for (auto mode : {EvalMode::raw, EvalMode::filtered}) {
          const KnownEdges* k = mode == EvalMode::filtered ? &known : nullptr;
          const auto report = evaluate(model, edges, {.mode = mode, .num_workers = 2, .batch_size = 9}, k);
          for (std::size_t e = 0; e < edges.size(); ++e) {
            for (auto side : {Side::source, Side::dest}) {
              const auto expect = materialized_rank(model, edges[e], side, ids, k);
              const auto single = rank_edge(model, edges[e], side, ids, mode, k);
              const auto batched = side == Side::source ? report.source_ranks[e] : report.dest_ranks[e];
              ++result.checked;
              if (single != expect || batched != expect) {
                result.fail(std::string(op) + "/" + sim + (reciprocal ? "/reciprocal" : "") + " edge " +
                            std::to_string(e) + ": oracle " + std::to_string(expect) + ", rank_edge " +
                            std::to_string(single) + ", batched " + std::to_string(batched));
              }
            }
          }
        }
      }
    }
  }
  return result;
}

SuiteResult scheduler_interleaving_suite(int trials, int max_p, int max_workers, std::uint64_t seed) {
  SuiteResult result;
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < trials; ++trial) {
    const int p = std::uniform_int_distribution<int>(1, max_p)(rng);
    const int workers = std::uniform_int_distribution<int>(1, max_workers)(rng);
    BucketScheduler s(p, p);
    std::vector<std::optional<BucketId>> current(static_cast<std::size_t>(workers));
    int epochs = 0;
    const std::string where = "trial " + std::to_string(trial) + " P=" + std::to_string(p);
    for (int step = 0; step < 400 && epochs < 2; ++step) {
      const int w = std::uniform_int_distribution<int>(0, workers - 1)(rng);
      auto& cur = current[static_cast<std::size_t>(w)];
      const int action = std::uniform_int_distribution<int>(0, 9)(rng);
      if (!cur) {
        const auto before = s.initialized();
        const bool first_grant = before.empty() && s.active().empty();
        const auto b = s.acquire(w);
        if (!b) {
          if (s.epoch_complete() && std::all_of(current.begin(), current.end(), [](auto& c) { return !c; })) {
            s.start_epoch();
            ++epochs;
          }
          continue;
        }
        ++result.checked;
        const auto parts = s.partitions_of(*b);
        const bool touches = std::any_of(parts.begin(), parts.end(), [&](int q) { return before.count(q) > 0; });
        if (!touches && !parts.empty() && !first_grant) {
          result.fail(where + ": doubly-uninitialized grant " + b->str());
        }
        for (const auto& [other, owner] : s.active()) {
          if (other != *b && owner != w && shares_partition(other, *b)) {
            result.fail(where + ": " + b->str() + " overlaps " + other.str() + " held by " + std::to_string(owner));
          }
          for (int q : s.partitions_of(other)) {
            const auto it = s.locks().find(q);
            if (it == s.locks().end() || it->second != owner) {
              result.fail(where + ": active bucket " + other.str() + " without its lock on " + std::to_string(q));
            }
          }
        }
        cur = b;
      } else if (action == 0) {
        s.release_requester(w);
        cur.reset();
      } else {
        s.complete(w, *cur);
        std::vector<int> drop;
        for (int q : s.partitions_of(*cur)) {
          if (std::uniform_int_distribution<int>(0, 1)(rng)) drop.push_back(q);
        }
        s.unlock(w, drop);
        cur.reset();
      }
    }
  }
  return result;
}

SuiteResult format_round_trip_suite(const fs::path& scratch) {
  SuiteResult result;
  const SyntheticGraph g{.entities = 400, .relations = 3, .edges = 4000, .seed = 11};
  const auto config = parse_config(synthetic_config_json(
      g, 3, "complex_diagonal", R"("dimension": 8, "num_epochs": 1, "reciprocal_relations": true)"));
  const auto data = scratch / "data", ckpt = scratch / "ckpt", again = scratch / "again";
  fs::remove_all(scratch);
  const auto meta = ingest(g.source(), g.source(), config.schema, data);
  RunOptions run;
  run.dataset_dir = data;
  run.checkpoint_dir = ckpt;
  run_epochs(config, run);
  fs::create_directories(again);

  auto compare = [&](const fs::path& a, const fs::path& b) {
    ++result.checked;
    if (read_text(a) != read_text(b)) result.fail(a.filename().string() + " changed after a round-trip");
  };

  for (int p = 0; p < 3; ++p) {
    const auto src = embedding_file(ckpt, "node", p);
    EmbeddingPartition part;
    part.dim = 8;
    read_embedding_file(src, part, meta.entity_counts[0][static_cast<std::size_t>(p)]);
    write_embedding_file(embedding_file(again, "node", p), part);
    compare(src, embedding_file(again, "node", p));
    const auto blob = read_text(src);
    const auto decoded = decode_embedding_blob(blob);
    ++result.checked;
    if (encode_embedding_blob(decoded.dim, decoded.rows, decoded.values, decoded.adagrad) != blob) {
      result.fail("embedding blob of partition " + std::to_string(p) + " re-encodes differently");
    }
  }
  write_relation_files(again, read_relation_files(ckpt, config), 8);
  compare(ckpt / "relations.gfe", again / "relations.gfe");
  compare(ckpt / "relations_adagrad.gfe", again / "relations_adagrad.gfe");
  const auto manifest = read_manifest(ckpt);
  if (!manifest) {
    result.fail("checkpoint manifest missing");
  } else {
    write_manifest(again, *manifest);
    compare(ckpt / "manifest.json", again / "manifest.json");
  }

  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const auto src = bucket_path(data, i, j);
      const auto edges = read_bucket(src, meta.buckets.count(i, j));
      const auto dst = again / src.filename();
      write_bucket(dst, edges);
      compare(src, dst);
    }
  }
  return result;
}

SuiteResult wire_fragmentation_suite(int trials, std::uint64_t seed) {
  SuiteResult result;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> small(-3, 40);
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Frame> frames;
    frames.push_back(encode(AcquireMsg{small(rng)}));
    frames.push_back(encode(GrantMsg{{small(rng), small(rng)}, small(rng)}));
    frames.push_back(encode(NoneAvailableMsg{trial % 2 == 0, static_cast<std::uint32_t>(rng() % 1000)}));
    frames.push_back(encode(ReleaseMsg{BucketId{small(rng), small(rng)}, {1, 2, 3}}));
    frames.push_back(encode(ReleaseMsg{std::nullopt, {}}));
    frames.push_back(encode(AckMsg{rng()}));
    frames.push_back(encode(BarrierMsg{small(rng), 2}));
    frames.push_back(encode(PartGetMsg{{0, small(rng)}, trial % 3 == 0}));
    std::string blob(static_cast<std::size_t>(rng() % 20000), '\0');
    for (auto& c : blob) c = static_cast<char>(rng());
    frames.push_back(encode(PartPutMsg{{1, small(rng)}, blob}));
    frames.push_back(encode(PartDataMsg{true, blob}));
    frames.push_back(encode(ParamFetchMsg{{{ParamKind::relation, 2, 1}, {ParamKind::entity_block, 0, 5}}, true}));
    frames.push_back(encode(ParamValuesMsg{{{{ParamKind::relation, 0, 0}, rng(), {1.0f, -0.5f}, {0.1f, 0.2f}}}}));
    frames.push_back(encode(ParamPushMsg{{{{ParamKind::entity_block, 0, 1}, 2, {3, 9}, {1, 2, 3, 4}}}}));
    std::shuffle(frames.begin(), frames.end(), rng);

    std::string stream;
    for (const auto& f : frames) stream += encode_frame(f);
    FrameDecoder decoder;
    std::vector<Frame> got;
    // Fragment sizes from single bytes up to several frames.
    const std::size_t max_piece = std::size_t{1} << (trial % 15);
    for (std::size_t pos = 0; pos < stream.size();) {
      const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng() % max_piece);
      decoder.feed(std::string_view(stream).substr(pos, n));
      pos += n;
      while (auto f = decoder.next()) got.push_back(std::move(*f));
    }
    ++result.checked;
    if (decoder.pending() != 0 || got != frames) {
      result.fail("trial " + std::to_string(trial) + ": decoded " + std::to_string(got.size()) + " of " +
                  std::to_string(frames.size()) + " frames");
    }
  }
  return result;
}

}  // namespace gfe::testing

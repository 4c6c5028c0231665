#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "gfe/evaluator.hpp"
#include "gfe/trainer.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace gfe;
using gfe::testing::TempDir;

namespace {

Config one_type_config(const std::string& op, const std::string& sim, int dim, bool reciprocal = false) {
  return parse_config(R"({"entities": [{"name": "node"}], "relations": [
      {"name": "r", "source_type": "node", "dest_type": "node", "operator": ")" +
                      op + R"(", "similarity": ")" + sim + R"("}], "dimension": )" + std::to_string(dim) +
                      R"(, "reciprocal_relations": )" + (reciprocal ? "true" : "false") + "}");
}

EvalModel random_model(const Config& config, std::int64_t n, std::uint64_t seed) {
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

// Linear operator with a chosen matrix over one-hot embeddings: score(i, j) = A[i][j].
EvalModel matrix_model(const Config& config, const std::vector<std::vector<float>>& a) {
  const auto n = static_cast<std::int64_t>(a.size());
  EvalModel m;
  m.config = &config;
  FlatEmbeddings t;
  t.dim = static_cast<int>(n);
  t.offsets = {0, n};
  t.values = Rows<float>::Identity(n, n);
  m.tables.push_back(std::move(t));
  m.relations = RelationState::initial(config);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) m.relations.params[0].forward[static_cast<std::size_t>(i * n + j)] = a[i][j];
  }
  return m;
}

std::vector<std::int64_t> all_ids(std::int64_t n) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

oracle::Vector row_of(const EvalModel& m, std::int64_t i) {
  const auto& v = m.tables[0].values;
  return oracle::Vector(v.row(i).data(), v.row(i).data() + v.cols());
}

// Materializes every corrupted edge with an independent double-precision scorer.
std::int64_t oracle_rank(const EvalModel& m, const EvalEdge& e, Side side, std::span<const std::int64_t> candidates,
                         const KnownEdges* known) {
  const auto& rel = m.config->schema.relations[0];
  const auto params = m.relations.params[static_cast<std::size_t>(e.rel)].for_side(side);
  const std::vector<double> theta(params.begin(), params.end());
  auto score = [&](std::int64_t s, std::int64_t d) { return oracle::score(rel.op, rel.similarity, theta, row_of(m, s), row_of(m, d)); };
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

}  // namespace

TEST_CASE("rank examples under the pessimistic tie rule") {
  const std::vector<float> scores{0.7f, 0.5f, 0.2f};
  const std::vector<std::int64_t> ids{1, 2, 3};
  CHECK(rank_from_scores(0.5, scores, ids, 0) == 3);
  CHECK(rank_from_scores(0.9, scores, ids, 0) == 1);
  // The true entity never competes with itself.
  CHECK(rank_from_scores(0.5, scores, ids, 2) == 2);
  CHECK(rank_from_scores(0.5, {}, {}, 0) == 1);
  CHECK(rank_from_scores(0.5, scores, ids, 0, [](std::int64_t c) { return c == 1; }) == 2);
}

TEST_CASE("filtering a known higher-scoring candidate improves rank 2 to 1") {
  const auto config = one_type_config("linear", "dot", 4);
  // Evaluated edge (0, r, 1). Candidate 2 outscores it and (0, r, 2) is a training edge.
  std::vector<std::vector<float>> a(4, std::vector<float>(4, 0.0f));
  a[0][1] = 1.0f;
  a[0][2] = 2.0f;
  const auto model = matrix_model(config, a);
  const EvalEdge edge{0, 0, 1};
  KnownEdges known{{0, 0, 1}, {0, 0, 2}};
  const auto ids = all_ids(4);
  CHECK(rank_edge(model, edge, Side::dest, ids, EvalMode::raw, nullptr) == 2);
  CHECK(rank_edge(model, edge, Side::dest, ids, EvalMode::filtered, &known) == 1);
  const std::vector<EvalEdge> edges{edge};
  const auto raw = evaluate(model, edges, {.mode = EvalMode::raw});
  const auto filtered = evaluate(model, edges, {.mode = EvalMode::filtered}, &known);
  CHECK(raw.dest_ranks == std::vector<std::int64_t>{2});
  CHECK(filtered.dest_ranks == std::vector<std::int64_t>{1});
  CHECK_THROWS(evaluate(model, edges, {.mode = EvalMode::filtered}));
}

TEST_CASE("perfect model reaches MRR 1") {
  const int n = 12;
  const auto config = one_type_config("linear", "dot", n);
  std::vector<std::vector<float>> a(n, std::vector<float>(n, 0.0f));
  std::vector<EvalEdge> edges;
  KnownEdges known;
  for (int i = 0; i < n; ++i) {
    const int j = (i * 5 + 3) % n;
    a[i][j] = 1.0f;
    edges.push_back({0, i, j});
  }
  add_known(known, edges);
  const auto model = matrix_model(config, a);
  const auto report = evaluate(model, edges, {.mode = EvalMode::filtered}, &known);
  CHECK(report.pooled.mrr == 1.0);
  CHECK(report.pooled.mr == 1.0);
  CHECK(report.pooled.count == 2 * n);
  for (double h : report.pooled.hits) CHECK(h == 1.0);
}

TEST_CASE("random model has mean rank (n+1)/2") {
  const int n = 101, m = 400;
  const auto config = one_type_config("diagonal", "dot", 16);
  // Each side's rank of an independently drawn true entity is uniform on
  // 1..n, with variance (n^2 - 1)/12.
  const double sigma = std::sqrt((n * n - 1) / 12.0 / m);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto model = random_model(config, n, seed);
    std::mt19937_64 rng(seed + 100);
    std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
    std::vector<EvalEdge> edges;
    for (int k = 0; k < m; ++k) edges.push_back({0, pick(rng), pick(rng)});
    const auto report = evaluate(model, edges, {});
    for (const auto* ranks : {&report.source_ranks, &report.dest_ranks}) {
      double mean = 0;
      for (auto r : *ranks) mean += static_cast<double>(r);
      mean /= m;
      CHECK(std::abs(mean - (n + 1) / 2.0) <= 3 * sigma);
    }
  }
}

TEST_CASE("rank_edge and batched evaluation match the brute-force oracle") {
  const int n = 40;
  std::int64_t compared = 0;
  for (const char* op : {"identity", "translation", "diagonal", "complex_diagonal", "linear"}) {
    for (const char* sim : {"dot", "cosine"}) {
      for (bool reciprocal : {false, true}) {
        const auto config = one_type_config(op, sim, 6, reciprocal);
        const auto model = random_model(config, n, 17);
        std::mt19937_64 rng(3);
        std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
        std::vector<EvalEdge> edges, train;
        for (int k = 0; k < 30; ++k) edges.push_back({0, pick(rng), pick(rng)});
        for (int k = 0; k < 200; ++k) train.push_back({0, pick(rng), pick(rng)});
        KnownEdges known;
        add_known(known, edges);
        add_known(known, train);
        const auto ids = all_ids(n);
        for (auto mode : {EvalMode::raw, EvalMode::filtered}) {
          const KnownEdges* k = mode == EvalMode::filtered ? &known : nullptr;
          const auto report = evaluate(model, edges, {.mode = mode, .num_workers = 2, .batch_size = 7}, k);
          for (std::size_t e = 0; e < edges.size(); ++e) {
            for (auto side : {Side::source, Side::dest}) {
              const auto expect = oracle_rank(model, edges[e], side, ids, k);
              const auto single = rank_edge(model, edges[e], side, ids, mode, k);
              const auto batched = side == Side::source ? report.source_ranks[e] : report.dest_ranks[e];
              CHECK_MESSAGE(single == expect, op, " ", sim);
              CHECK_MESSAGE(batched == expect, op, " ", sim);
              ++compared;
            }
          }
        }
      }
    }
  }
  CHECK(compared == 5 * 2 * 2 * 2 * 30 * 2);
}

TEST_CASE("filtered rank never exceeds raw rank") {
  const int n = 60;
  const auto config = one_type_config("complex_diagonal", "dot", 8);
  const auto model = random_model(config, n, 5);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
  std::vector<EvalEdge> edges;
  KnownEdges known;
  for (int k = 0; k < 300; ++k) edges.push_back({0, pick(rng), pick(rng)});
  add_known(known, edges);
  for (const auto& spec : {CandidateSpec{}, CandidateSpec{CandidateScheme::uniform, 25}}) {
    const auto raw = evaluate(model, edges, {.mode = EvalMode::raw, .candidates = spec, .seed = 4});
    const auto filtered = evaluate(model, edges, {.mode = EvalMode::filtered, .candidates = spec, .seed = 4}, &known);
    for (std::size_t e = 0; e < edges.size(); ++e) {
      CHECK(filtered.source_ranks[e] <= raw.source_ranks[e]);
      CHECK(filtered.dest_ranks[e] <= raw.dest_ranks[e]);
    }
  }
}

TEST_CASE("aggregates recomputed from the rank list match and satisfy the invariants") {
  const int n = 80;
  const auto config = one_type_config("translation", "cosine", 8);
  const auto model = random_model(config, n, 6);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
  std::vector<EvalEdge> edges;
  for (int k = 0; k < 250; ++k) edges.push_back({0, pick(rng), pick(rng)});
  const auto report = evaluate(model, edges, {.hits = {1, 3, 10, 50}, .num_workers = 3, .batch_size = 16});
  const auto ranks = report.all_ranks();
  REQUIRE(ranks.size() == 500);
  double rr = 0, r = 0;
  std::vector<double> hits(4, 0.0);
  const int ks[] = {1, 3, 10, 50};
  for (auto x : ranks) {
    CHECK(x >= 1);
    rr += 1.0 / static_cast<double>(x);
    r += static_cast<double>(x);
    for (int i = 0; i < 4; ++i) hits[static_cast<std::size_t>(i)] += x <= ks[i] ? 1 : 0;
  }
  CHECK(report.pooled.count == 500);
  CHECK(report.pooled.mrr == rr / 500);
  CHECK(report.pooled.mr == r / 500);
  for (int i = 0; i < 4; ++i) CHECK(report.pooled.hits[static_cast<std::size_t>(i)] == hits[static_cast<std::size_t>(i)] / 500);
  CHECK(report.pooled.mrr > 0);
  CHECK(report.pooled.mrr <= 1);
  for (int i = 1; i < 4; ++i) CHECK(report.pooled.hits[static_cast<std::size_t>(i)] >= report.pooled.hits[static_cast<std::size_t>(i - 1)]);
  CHECK(report.summary_line().rfind("event=eval mode=raw candidates=all edges=250", 0) == 0);
  CHECK(report.json().find("\"mrr\"") != std::string::npos);
}

TEST_CASE("evaluation is deterministic across worker counts") {
  const int n = 200;
  const auto config = one_type_config("diagonal", "dot", 8);
  const auto model = random_model(config, n, 9);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
  std::vector<EvalEdge> edges;
  for (int k = 0; k < 3000; ++k) edges.push_back({0, pick(rng), pick(rng)});
  std::vector<double> counts(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(i)] = 1 + i % 7;
  PrevalenceTable prevalence{{counts}};
  const CandidateSpec spec{CandidateScheme::prevalence, 50};
  const auto one = evaluate(model, edges, {.candidates = spec, .seed = 11, .num_workers = 1}, nullptr, &prevalence);
  const auto four = evaluate(model, edges, {.candidates = spec, .seed = 11, .num_workers = 4}, nullptr, &prevalence);
  CHECK(one.source_ranks == four.source_ranks);
  CHECK(one.dest_ranks == four.dest_ranks);
  const auto other = evaluate(model, edges, {.candidates = spec, .seed = 12}, nullptr, &prevalence);
  CHECK(other.dest_ranks != one.dest_ranks);
  for (auto r : one.all_ranks()) CHECK(r <= 51);
}

TEST_CASE("candidate sampling distributions") {
  Rng rng(21);
  const int draws = 20000;
  SUBCASE("uniform over two entities splits 50/50") {
    const auto c = sample_candidates(2, draws, CandidateScheme::uniform, {}, rng);
    REQUIRE(c.size() == static_cast<std::size_t>(draws));
    const double zeros = static_cast<double>(std::count(c.begin(), c.end(), 0));
    CHECK(std::abs(zeros - draws / 2.0) <= 4 * std::sqrt(draws * 0.25));
  }
  SUBCASE("prevalence with counts 9:1") {
    const std::vector<double> counts{9, 1};
    const auto c = sample_candidates(2, draws, CandidateScheme::prevalence, counts, rng);
    const double a = static_cast<double>(std::count(c.begin(), c.end(), 0));
    CHECK(std::abs(a - 0.9 * draws) <= 4 * std::sqrt(draws * 0.9 * 0.1));
  }
  SUBCASE("n = 0 gives no candidates and rank 1") {
    CHECK(sample_candidates(10, 0, CandidateScheme::uniform, {}, rng).empty());
    const auto config = one_type_config("diagonal", "dot", 4);
    const auto model = random_model(config, 10, 1);
    const std::vector<EvalEdge> edges{{0, 1, 2}};
    const auto report = evaluate(model, edges, {.candidates = {CandidateScheme::uniform, 0}});
    CHECK(report.all_ranks() == std::vector<std::int64_t>{1, 1});
  }
}

TEST_CASE("candidate spec parsing") {
  CHECK(parse_candidates("all").scheme == CandidateScheme::all);
  const auto s = parse_candidates("sampled:10000:prevalence");
  CHECK(s.scheme == CandidateScheme::prevalence);
  CHECK(s.count == 10000);
  CHECK(s.str() == "sampled:10000:prevalence");
  CHECK(parse_candidates("sampled:5:uniform").scheme == CandidateScheme::uniform);
  CHECK_THROWS_AS(parse_candidates("sampled:x:uniform"), ValidationError);
  CHECK_THROWS_AS(parse_candidates("sampled:5:zipf"), ValidationError);
  CHECK_THROWS_AS(parse_candidates("some"), ValidationError);
  CHECK(parse_mode("filtered") == EvalMode::filtered);
  CHECK_THROWS_AS(parse_mode("strict"), ValidationError);
}

TEST_CASE("end-to-end: trained checkpoint, resolved edges, export") {
  const gfe::testing::SyntheticGraph g{.entities = 300, .relations = 2, .clusters = 5, .edges = 4000, .seed = 2};
  TempDir dir;
  const auto config = parse_config(gfe::testing::synthetic_config_json(
      g, 2, "diagonal", R"("dimension": 16, "num_epochs": 6, "loss": "softmax", "seed": 1)"));
  const auto held = g.held_out(300);
  auto both = [&](const EdgeVisitor& v) {
    g.source()(v);
    held.source()(v);
  };
  const auto meta = ingest(both, g.source(), config.schema, dir / "data");
  run_epochs(config, {.dataset_dir = dir / "data", .checkpoint_dir = dir / "ckpt"});
  const auto dict = EntityDictionary::load(dir / "data", config.schema);
  const auto model = EvalModel::load(dir / "ckpt", config, meta);
  auto resolved = resolve_edges(held.source(), config, dict);
  CHECK(resolved.skipped == 0);
  CHECK(resolved.edges.size() == 300);
  const auto report = evaluate(model, resolved.edges, {});
  // Planted clusters of 60 entities out of 300: a model that learned the
  // cluster map ranks the true entity well inside the first half.
  MESSAGE("synthetic MRR ", report.pooled.mrr, " MR ", report.pooled.mr);
  CHECK(report.pooled.mr < 100);

  const auto unknown = resolve_edges(tsv_text_source("nobody\tr0\te1\ne1\tnope\te2\n"), config, dict);
  CHECK(unknown.skipped == 2);
  CHECK(unknown.edges.empty());

  std::ostringstream out;
  export_embeddings(model, dict, 0, out);
  std::istringstream lines(out.str());
  std::string line;
  std::int64_t count = 0;
  while (std::getline(lines, line)) {
    ++count;
    CHECK(std::count(line.begin(), line.end(), '\t') == 16);
  }
  CHECK(count == dict.total(0));
  const auto wrong = parse_config(gfe::testing::synthetic_config_json(g, 2, "diagonal", R"("dimension": 8)"));
  CHECK_THROWS_AS(EvalModel::load(dir / "ckpt", wrong, meta), ValidationError);
}

#include "gfe/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <map>
#include <thread>

#include <json.hpp>

#include "gfe/hash.hpp"

namespace gfe {

std::string CandidateSpec::str() const {
  switch (scheme) {
    case CandidateScheme::all:
      return "all";
    case CandidateScheme::prevalence:
      return "sampled:" + std::to_string(count) + ":prevalence";
    case CandidateScheme::uniform:
      return "sampled:" + std::to_string(count) + ":uniform";
  }
  return "all";
}

CandidateSpec parse_candidates(std::string_view text) {
  if (text == "all") return {};
  const std::string_view prefix = "sampled:";
  if (text.substr(0, prefix.size()) != prefix) throw ValidationError("bad candidate scheme: " + std::string(text));
  const auto rest = text.substr(prefix.size());
  const auto colon = rest.find(':');
  if (colon == std::string_view::npos) throw ValidationError("bad candidate scheme: " + std::string(text));
  CandidateSpec spec;
  const auto num = rest.substr(0, colon);
  auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), spec.count);
  if (ec != std::errc() || ptr != num.data() + num.size() || spec.count < 0) {
    throw ValidationError("bad candidate count: " + std::string(num));
  }
  const auto kind = rest.substr(colon + 1);
  if (kind == "prevalence") {
    spec.scheme = CandidateScheme::prevalence;
  } else if (kind == "uniform") {
    spec.scheme = CandidateScheme::uniform;
  } else {
    throw ValidationError("bad candidate sampling: " + std::string(kind));
  }
  return spec;
}

EvalMode parse_mode(std::string_view text) {
  if (text == "raw") return EvalMode::raw;
  if (text == "filtered") return EvalMode::filtered;
  throw ValidationError("bad eval mode: " + std::string(text));
}

std::string_view to_string(EvalMode mode) { return mode == EvalMode::raw ? "raw" : "filtered"; }

std::size_t EdgeKeyHash::operator()(const EdgeKey& k) const noexcept {
  return static_cast<std::size_t>(derive_seed(static_cast<std::uint64_t>(k.src), static_cast<std::uint64_t>(k.rel),
                                              static_cast<std::uint64_t>(k.dst)));
}

std::int64_t rank_from_scores(double positive, std::span<const float> scores, std::span<const std::int64_t> ids,
                              std::int64_t true_id, const std::function<bool(std::int64_t)>& excluded) {
  std::int64_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (ids[j] == true_id || scores[j] < positive) continue;
    if (excluded && excluded(ids[j])) continue;
    ++rank;
  }
  return rank;
}

EvalModel EvalModel::load(const std::filesystem::path& checkpoint_dir, const Config& config, const DatasetMeta& meta) {
  const auto manifest = read_manifest(checkpoint_dir);
  if (!manifest) throw ValidationError("no checkpoint manifest in " + checkpoint_dir.string());
  if (manifest->model_hash != model_hash(config)) throw ValidationError("checkpoint belongs to a different model");
  EvalModel model;
  model.config = &config;
  for (std::size_t t = 0; t < config.schema.entities.size(); ++t) {
    model.tables.push_back(load_flat_embeddings(checkpoint_dir, config, static_cast<int>(t), meta.entity_counts[t]));
  }
  model.relations = read_relation_files(checkpoint_dir, config);
  return model;
}

const FlatEmbeddings& EvalModel::source_table(int rel) const {
  const auto& r = config->schema.relations[static_cast<std::size_t>(rel)];
  return tables[static_cast<std::size_t>(config->schema.entity_index(r.source_type))];
}

const FlatEmbeddings& EvalModel::dest_table(int rel) const {
  const auto& r = config->schema.relations[static_cast<std::size_t>(rel)];
  return tables[static_cast<std::size_t>(config->schema.entity_index(r.dest_type))];
}

float EvalModel::score(int rel, std::int64_t src, std::int64_t dst, Side side) const {
  const auto& r = config->schema.relations[static_cast<std::size_t>(rel)];
  const auto& p = relations.params[static_cast<std::size_t>(rel)];
  const Vec<float> xs = source_table(rel).values.row(src).transpose();
  const Vec<float> xd = dest_table(rel).values.row(dst).transpose();
  const Vec<float> g = apply_operator<float>(r.op, p.for_side(side), xd);
  return similarity<float>(xs, g, r.similarity);
}

std::int64_t rank_edge(const EvalModel& model, const EvalEdge& edge, Side side,
                       std::span<const std::int64_t> candidates, EvalMode mode, const KnownEdges* known) {
  const float positive = model.score(edge.rel, edge.src, edge.dst, side);
  const std::int64_t true_id = side == Side::dest ? edge.dst : edge.src;
  std::vector<float> scores;
  scores.reserve(candidates.size());
  for (auto c : candidates) {
    scores.push_back(side == Side::dest ? model.score(edge.rel, edge.src, c, side)
                                        : model.score(edge.rel, c, edge.dst, side));
  }
  std::function<bool(std::int64_t)> excluded;
  if (mode == EvalMode::filtered && known) {
    excluded = [&](std::int64_t c) {
      return side == Side::dest ? known->count({edge.src, edge.rel, c}) > 0 : known->count({c, edge.rel, edge.dst}) > 0;
    };
  }
  return rank_from_scores(positive, scores, candidates, true_id, excluded);
}

PrevalenceTable PrevalenceTable::from_buckets(const std::filesystem::path& dataset_dir, const Config& config,
                                              const DatasetMeta& meta) {
  const auto& schema = config.schema;
  PrevalenceTable table;
  std::vector<std::vector<std::int64_t>> offsets;
  for (const auto& counts : meta.entity_counts) {
    std::vector<std::int64_t> off{0};
    for (auto c : counts) off.push_back(off.back() + c);
    table.counts.emplace_back(static_cast<std::size_t>(off.back()), 0.0);
    offsets.push_back(std::move(off));
  }
  for (int i = 0; i < meta.buckets.source_partitions; ++i) {
    for (int j = 0; j < meta.buckets.dest_partitions; ++j) {
      for (const auto& e : read_bucket(bucket_path(dataset_dir, i, j), meta.buckets.count(i, j))) {
        const auto& r = schema.relations[e.rel];
        const auto st = static_cast<std::size_t>(schema.entity_index(r.source_type));
        const auto dt = static_cast<std::size_t>(schema.entity_index(r.dest_type));
        const auto sp = static_cast<std::size_t>(schema.entities[st].partitioned() ? i : 0);
        const auto dp = static_cast<std::size_t>(schema.entities[dt].partitioned() ? j : 0);
        table.counts[st][static_cast<std::size_t>(offsets[st][sp] + e.src)] += 1;
        table.counts[dt][static_cast<std::size_t>(offsets[dt][dp] + e.dst)] += 1;
      }
    }
  }
  return table;
}

namespace {

// Prevalence sampling falls back to uniform when the table is empty.
class CandidateSampler {
 public:
  CandidateSampler(std::int64_t num_entities, CandidateScheme scheme, std::span<const double> counts)
      : uniform_(0, std::max<std::int64_t>(0, num_entities - 1)) {
    if (scheme == CandidateScheme::prevalence && !counts.empty()) {
      double total = 0;
      for (double c : counts) total += c;
      if (total > 0) weighted_ = std::discrete_distribution<std::int64_t>(counts.begin(), counts.end());
    }
  }

  std::vector<std::int64_t> draw(int n, Rng& rng) {
    std::vector<std::int64_t> out(static_cast<std::size_t>(n));
    for (auto& c : out) c = weighted_ ? (*weighted_)(rng) : uniform_(rng);
    return out;
  }

 private:
  std::uniform_int_distribution<std::int64_t> uniform_;
  std::optional<std::discrete_distribution<std::int64_t>> weighted_;
};

}  // namespace

std::vector<std::int64_t> sample_candidates(std::int64_t num_entities, int n, CandidateScheme scheme,
                                            std::span<const double> counts, Rng& rng) {
  if (n <= 0) return {};
  if (num_entities <= 0) throw std::invalid_argument("cannot sample candidates from an empty entity set");
  CandidateSampler sampler(num_entities, scheme, counts);
  return sampler.draw(n, rng);
}

RankAggregates aggregate_ranks(std::span<const std::int64_t> ranks, std::span<const int> hits) {
  RankAggregates agg;
  agg.count = static_cast<std::int64_t>(ranks.size());
  agg.hits.assign(hits.size(), 0.0);
  if (ranks.empty()) return agg;
  double rr = 0, r = 0;
  std::vector<std::int64_t> within(hits.size(), 0);
  for (auto rank : ranks) {
    rr += 1.0 / static_cast<double>(rank);
    r += static_cast<double>(rank);
    for (std::size_t k = 0; k < hits.size(); ++k) within[k] += rank <= hits[k] ? 1 : 0;
  }
  const auto n = static_cast<double>(ranks.size());
  agg.mrr = rr / n;
  agg.mr = r / n;
  for (std::size_t k = 0; k < hits.size(); ++k) agg.hits[k] = static_cast<double>(within[k]) / n;
  return agg;
}

std::vector<std::int64_t> RankReport::all_ranks() const {
  std::vector<std::int64_t> ranks;
  ranks.reserve(source_ranks.size() * 2);
  for (std::size_t i = 0; i < source_ranks.size(); ++i) {
    ranks.push_back(source_ranks[i]);
    ranks.push_back(dest_ranks[i]);
  }
  return ranks;
}

std::string RankReport::summary_line() const {
  char buf[128];
  std::string line = "event=eval mode=" + std::string(to_string(mode)) + " candidates=" + candidates.str() +
                     " edges=" + std::to_string(source_ranks.size()) + " skipped=" + std::to_string(skipped);
  std::snprintf(buf, sizeof buf, " mrr=%.6f mr=%.3f", pooled.mrr, pooled.mr);
  line += buf;
  for (std::size_t k = 0; k < hits_k.size(); ++k) {
    std::snprintf(buf, sizeof buf, " hits@%d=%.6f", hits_k[k], pooled.hits[k]);
    line += buf;
  }
  return line;
}

std::string RankReport::json() const {
  nlohmann::json j{{"mode", to_string(mode)},
                   {"candidates", candidates.str()},
                   {"edges", source_ranks.size()},
                   {"skipped", skipped},
                   {"ranks", pooled.count},
                   {"mrr", pooled.mrr},
                   {"mr", pooled.mr}};
  for (std::size_t k = 0; k < hits_k.size(); ++k) j["hits@" + std::to_string(hits_k[k])] = pooled.hits[k];
  return j.dump();
}

namespace {

struct WorkItem {
  int rel;
  std::uint64_t block;
  std::vector<std::size_t> edges;
};

Rows<float> gather_rows(const Rows<float>& table, std::span<const std::int64_t> ids) {
  Rows<float> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  return out;
}

struct SideRanker {
  const EvalModel& model;
  const EvalOptions& options;
  const KnownEdges* known;
  std::vector<CandidateSampler>* samplers;  // per entity type, sampled schemes only

  // Ranks one side for a block of same-relation edges. `queries` are scored
  // against candidates with `score_block`, which must agree with the model's
  // score function for that side.
  template <typename ScoreBlock>
  void rank(const WorkItem& item, std::span<const EvalEdge> edges, Side side, int cand_type,
            const ScoreBlock& score_block, std::vector<std::int64_t>& out, Rng& rng) const {
    const auto& table = model.tables[static_cast<std::size_t>(cand_type)];
    const auto b = item.edges.size();
    std::vector<std::int64_t> truth(b);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& e = edges[item.edges[i]];
      truth[i] = side == Side::dest ? e.dst : e.src;
    }
    const bool all = options.candidates.scheme == CandidateScheme::all;
    std::vector<std::int64_t> ids;
    Rows<float> scores;
    if (all) {
      scores = score_block(table.values);
    } else {
      ids = (*samplers)[static_cast<std::size_t>(cand_type)].draw(options.candidates.count, rng);
      // True entities ride along as extra columns so the positive is scored
      // by the same arithmetic as the candidates.
      std::vector<std::int64_t> cols(ids);
      cols.insert(cols.end(), truth.begin(), truth.end());
      scores = score_block(gather_rows(table.values, cols));
    }
    const auto n_cand = all ? table.values.rows() : static_cast<Eigen::Index>(ids.size());
    for (std::size_t i = 0; i < b; ++i) {
      const auto& e = edges[item.edges[i]];
      const auto row = static_cast<Eigen::Index>(i);
      const float positive = all ? scores(row, truth[i]) : scores(row, n_cand + row);
      std::int64_t rank = 1;
      for (Eigen::Index j = 0; j < n_cand; ++j) {
        if (scores(row, j) < positive) continue;
        const std::int64_t c = all ? j : ids[static_cast<std::size_t>(j)];
        if (c == truth[i]) continue;
        if (options.mode == EvalMode::filtered && known) {
          const EdgeKey key = side == Side::dest ? EdgeKey{e.src, e.rel, c} : EdgeKey{c, e.rel, e.dst};
          if (known->count(key)) continue;
        }
        ++rank;
      }
      out[item.edges[i]] = rank;
    }
  }
};

}  // namespace

RankReport evaluate(const EvalModel& model, std::span<const EvalEdge> edges, const EvalOptions& options,
                    const KnownEdges* known, const PrevalenceTable* prevalence) {
  const auto& schema = model.config->schema;
  RankReport report;
  report.mode = options.mode;
  report.candidates = options.candidates;
  report.hits_k = options.hits;
  report.source_ranks.assign(edges.size(), 0);
  report.dest_ranks.assign(edges.size(), 0);
  if (options.mode == EvalMode::filtered && !known) throw std::invalid_argument("filtered evaluation needs known edges");

  std::map<int, std::vector<std::size_t>> by_rel;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i].rel < 0 || static_cast<std::size_t>(edges[i].rel) >= schema.relations.size()) {
      throw std::invalid_argument("evaluation edge has an unknown relation");
    }
    by_rel[edges[i].rel].push_back(i);
  }
  std::vector<WorkItem> items;
  const auto block = static_cast<std::size_t>(std::max(1, options.batch_size));
  for (auto& [rel, idx] : by_rel) {
    for (std::size_t k = 0; k < idx.size(); k += block) {
      items.push_back({rel, k / block,
                       std::vector<std::size_t>(idx.begin() + static_cast<long>(k),
                                                idx.begin() + static_cast<long>(std::min(idx.size(), k + block)))});
    }
  }

  std::vector<CandidateSampler> samplers;
  if (options.candidates.scheme != CandidateScheme::all) {
    for (std::size_t t = 0; t < model.tables.size(); ++t) {
      std::span<const double> counts;
      if (prevalence && options.candidates.scheme == CandidateScheme::prevalence) counts = prevalence->counts[t];
      if (options.candidates.scheme == CandidateScheme::prevalence && !prevalence) {
        throw std::invalid_argument("prevalence sampling needs a prevalence table");
      }
      samplers.emplace_back(model.tables[t].values.rows(), options.candidates.scheme, counts);
    }
  }
  const SideRanker ranker{model, options, known, &samplers};

  auto run_item = [&](const WorkItem& item) {
    const auto& decl = schema.relations[static_cast<std::size_t>(item.rel)];
    const auto& params = model.relations.params[static_cast<std::size_t>(item.rel)];
    const auto& src_table = model.source_table(item.rel);
    const auto& dst_table = model.dest_table(item.rel);
    std::vector<std::int64_t> src_ids, dst_ids;
    for (auto i : item.edges) {
      src_ids.push_back(edges[i].src);
      dst_ids.push_back(edges[i].dst);
    }
    // Per-block copy of the sampler so blocks stay independent of scheduling.
    auto local_samplers = samplers;
    SideRanker local = ranker;
    local.samplers = &local_samplers;
    Rng rng(derive_seed(options.seed, 0xe7a1u, item.rel, item.block));

    // Destination corruption: sim(x_s, g_fwd(x_c)).
    const Rows<float> xs = gather_rows(src_table.values, src_ids);
    const auto fwd = params.for_side(Side::dest);
    Rows<float> folded;
    Vec<float> bias;
    const bool dot = fold_query<float>(decl.op, fwd, decl.similarity, xs, folded, bias);
    auto dest_scores = [&](const Rows<float>& cand) -> Rows<float> {
      if (dot) {
        Rows<float> s = folded * cand.transpose();
        s.colwise() += bias;
        return s;
      }
      Rows<float> transformed;
      apply_operator<float>(decl.op, fwd, cand, transformed);
      return score_matrix<float>(xs, transformed, decl.similarity);
    };
    local.rank(item, edges, Side::dest, schema.entity_index(decl.dest_type), dest_scores, report.dest_ranks, rng);

    // Source corruption: sim(x_c, g_side(x_d)).
    const Rows<float> xd = gather_rows(dst_table.values, dst_ids);
    Rows<float> query;
    apply_operator<float>(decl.op, params.for_side(Side::source), xd, query);
    auto source_scores = [&](const Rows<float>& cand) { return score_matrix<float>(query, cand, decl.similarity); };
    local.rank(item, edges, Side::source, schema.entity_index(decl.source_type), source_scores, report.source_ranks,
               rng);
  };

  const auto workers = static_cast<std::size_t>(std::max(1, options.num_workers));
  if (workers == 1) {
    for (const auto& item : items) run_item(item);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t k; (k = next++) < items.size();) run_item(items[k]);
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
  const auto ranks = report.all_ranks();
  report.pooled = aggregate_ranks(ranks, report.hits_k);
  return report;
}

ResolvedEdges resolve_edges(const EdgeSource& source, const Config& config, const EntityDictionary& dict) {
  const auto& schema = config.schema;
  std::vector<std::vector<std::int64_t>> offsets;
  for (std::size_t t = 0; t < dict.types.size(); ++t) {
    std::vector<std::int64_t> off{0};
    for (int p = 0; p < dict.types[t].num_partitions; ++p) off.push_back(off.back() + dict.count(static_cast<int>(t), p));
    offsets.push_back(std::move(off));
  }
  std::vector<int> src_type, dst_type;
  for (const auto& r : schema.relations) {
    src_type.push_back(schema.entity_index(r.source_type));
    dst_type.push_back(schema.entity_index(r.dest_type));
  }
  ResolvedEdges out;
  source([&](std::string_view s, std::string_view r, std::string_view d) {
    const auto rel = schema.find_relation(r);
    if (!rel) {
      ++out.skipped;
      return;
    }
    const int st = src_type[static_cast<std::size_t>(*rel)];
    const int dt = dst_type[static_cast<std::size_t>(*rel)];
    const auto sl = dict.find(st, s);
    const auto dl = dict.find(dt, d);
    if (!sl || !dl) {
      ++out.skipped;
      return;
    }
    out.edges.push_back({*rel, offsets[static_cast<std::size_t>(st)][static_cast<std::size_t>(sl->partition)] + sl->local,
                         offsets[static_cast<std::size_t>(dt)][static_cast<std::size_t>(dl->partition)] + dl->local});
    out.names.push_back({std::string(s), std::string(r), std::string(d)});
  });
  return out;
}

void add_known(KnownEdges& known, std::span<const EvalEdge> edges) {
  for (const auto& e : edges) known.insert({e.src, e.rel, e.dst});
}

void export_embeddings(const EvalModel& model, const EntityDictionary& dict, int type, std::ostream& out) {
  const auto& table = model.tables[static_cast<std::size_t>(type)];
  const auto& entries = dict.types[static_cast<std::size_t>(type)];
  char buf[32];
  std::string line;
  for (std::size_t p = 0; p < entries.ids.size(); ++p) {
    for (std::size_t l = 0; l < entries.ids[p].size(); ++l) {
      line = entries.ids[p][l];
      const auto row = table.offsets[p] + static_cast<std::int64_t>(l);
      for (Eigen::Index k = 0; k < table.values.cols(); ++k) {
        auto [end, ec] = std::to_chars(buf, buf + sizeof buf, table.values(row, k));
        line += '\t';
        line.append(buf, end);
      }
      line += '\n';
      out << line;
    }
  }
}

}  // namespace gfe

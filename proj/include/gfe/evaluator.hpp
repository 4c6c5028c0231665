#pragma once

// Link-prediction ranking: MRR, MR and Hits@k over source- and
// destination-corruption ranks, pooled.
//
// Ties count against the model: rank = 1 + #{c != true : score(c) >= score(true)}.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "gfe/checkpoint.hpp"
#include "gfe/config.hpp"
#include "gfe/ingest.hpp"
#include "gfe/negatives.hpp"

namespace gfe {

enum class EvalMode { raw, filtered };
enum class CandidateScheme { all, prevalence, uniform };

struct CandidateSpec {
  CandidateScheme scheme = CandidateScheme::all;
  int count = 0;  // sampled schemes only
  std::string str() const;
};

// "all", "sampled:N:prevalence" or "sampled:N:uniform".
CandidateSpec parse_candidates(std::string_view text);
EvalMode parse_mode(std::string_view text);
std::string_view to_string(EvalMode mode);

// Entities addressed by flattened per-type index: offset[p] + local.
struct EvalEdge {
  int rel = 0;
  std::int64_t src = 0;
  std::int64_t dst = 0;
};

struct EdgeKey {
  std::int64_t src;
  int rel;
  std::int64_t dst;
  bool operator==(const EdgeKey&) const = default;
};
struct EdgeKeyHash {
  std::size_t operator()(const EdgeKey& k) const noexcept;
};
using KnownEdges = std::unordered_set<EdgeKey, EdgeKeyHash>;

// rank = 1 + #{j : ids[j] != true_id, !excluded(ids[j]), scores[j] >= positive}.
std::int64_t rank_from_scores(double positive, std::span<const float> scores, std::span<const std::int64_t> ids,
                              std::int64_t true_id, const std::function<bool(std::int64_t)>& excluded = {});

struct EvalModel {
  const Config* config = nullptr;
  std::vector<FlatEmbeddings> tables;  // per entity type
  RelationState relations;

  static EvalModel load(const std::filesystem::path& checkpoint_dir, const Config& config, const DatasetMeta& meta);

  const FlatEmbeddings& source_table(int rel) const;
  const FlatEmbeddings& dest_table(int rel) const;
  // Score used when ranking corruptions of `side`; differs from the other
  // side only with reciprocal relations.
  float score(int rel, std::int64_t src, std::int64_t dst, Side side) const;
};

// Per-edge path: scores the true edge and every candidate one pair at a time.
std::int64_t rank_edge(const EvalModel& model, const EvalEdge& edge, Side side,
                       std::span<const std::int64_t> candidates, EvalMode mode, const KnownEdges* known);

// Occurrence counts per entity (source + destination) in the training split.
struct PrevalenceTable {
  std::vector<std::vector<double>> counts;  // [type][flat index]
  static PrevalenceTable from_buckets(const std::filesystem::path& dataset_dir, const Config& config,
                                      const DatasetMeta& meta);
};

std::vector<std::int64_t> sample_candidates(std::int64_t num_entities, int n, CandidateScheme scheme,
                                            std::span<const double> counts, Rng& rng);

struct EvalOptions {
  EvalMode mode = EvalMode::raw;
  CandidateSpec candidates;
  std::vector<int> hits{1, 10, 50};
  std::uint64_t seed = 0;
  int num_workers = 1;
  int batch_size = 1000;  // edges that share one sampled candidate set
};

struct RankAggregates {
  std::int64_t count = 0;
  double mrr = 0, mr = 0;
  std::vector<double> hits;  // aligned with the requested k values
};
RankAggregates aggregate_ranks(std::span<const std::int64_t> ranks, std::span<const int> hits);

struct RankReport {
  EvalMode mode = EvalMode::raw;
  CandidateSpec candidates;
  std::vector<int> hits_k;
  // Per evaluated edge, in input order.
  std::vector<std::int64_t> source_ranks, dest_ranks;
  RankAggregates pooled;
  std::int64_t skipped = 0;  // edges whose entities are unknown

  std::vector<std::int64_t> all_ranks() const;
  std::string summary_line() const;
  std::string json() const;
};

// Batched path: scores a group of same-relation edges against the candidate
// set with one matrix product per side.
RankReport evaluate(const EvalModel& model, std::span<const EvalEdge> edges, const EvalOptions& options,
                    const KnownEdges* known = nullptr, const PrevalenceTable* prevalence = nullptr);

// Maps external-id edges through the dictionary. Edges with unknown
// entities or relations are counted in `skipped`.
struct ResolvedEdges {
  std::vector<EvalEdge> edges;
  std::vector<std::array<std::string, 3>> names;
  std::int64_t skipped = 0;
};
ResolvedEdges resolve_edges(const EdgeSource& source, const Config& config, const EntityDictionary& dict);
void add_known(KnownEdges& known, std::span<const EvalEdge> edges);

// Writes `external_id \t v_1 ... v_d` lines for every entity of `type`.
void export_embeddings(const EvalModel& model, const EntityDictionary& dict, int type, std::ostream& out);

}  // namespace gfe

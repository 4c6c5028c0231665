#include "gfe/negatives.hpp"

namespace gfe {

Mask induced_positive_mask(std::span<const std::int64_t> true_entities, std::span<const std::int64_t> candidates) {
  Mask mask(static_cast<Eigen::Index>(true_entities.size()), static_cast<Eigen::Index>(candidates.size()));
  for (std::size_t i = 0; i < true_entities.size(); ++i) {
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = candidates[j] == true_entities[i];
    }
  }
  return mask;
}

NegativeSet build_negative_set(std::span<const std::int64_t> true_entities, Side side, int uniform_count,
                               std::int64_t partition_entity_count, Rng& rng) {
  if (partition_entity_count < 1) throw std::invalid_argument("negative sampling from an empty partition");
  if (true_entities.empty()) throw std::invalid_argument("negative sampling for an empty chunk");
  NegativeSet set;
  set.side = side;
  set.chunk_size = static_cast<int>(true_entities.size());
  set.candidates.assign(true_entities.begin(), true_entities.end());
  std::uniform_int_distribution<std::int64_t> pick(0, partition_entity_count - 1);
  for (int k = 0; k < uniform_count; ++k) set.candidates.push_back(pick(rng));
  set.mask = induced_positive_mask(true_entities, set.candidates);
  return set;
}

}  // namespace gfe

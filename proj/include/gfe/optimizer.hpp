#pragma once

// Adagrad. Embedding rows keep a single accumulator per row, holding the
// running sum over steps of mean(grad^2) across the row's d entries.
//
// Updates are plain loads and stores. Concurrent workers may race on the
// same row (HOGWILD); only single-worker runs are deterministic.

#include <cassert>
#include <cmath>
#include <span>

namespace gfe {

inline constexpr float kAdagradEpsilon = 1e-10f;

// acc += mean(grad^2); row -= lr * grad / (sqrt(acc) + eps).
inline void row_update(std::span<float> row, std::span<const float> grad, float& acc, float lr,
                       float eps = kAdagradEpsilon) {
  assert(row.size() == grad.size());
  double sq = 0;
  for (float g : grad) {
    assert(std::isfinite(g));
    sq += static_cast<double>(g) * g;
  }
  if (sq == 0) return;
  acc += static_cast<float>(sq / static_cast<double>(grad.size()));
  const float step = lr / (std::sqrt(acc) + eps);
  for (std::size_t k = 0; k < row.size(); ++k) row[k] -= step * grad[k];
}

// Elementwise Adagrad: acc_k += g_k^2; p_k -= lr * g_k / (sqrt(acc_k) + eps).
inline void dense_update(std::span<float> params, std::span<const float> grad, std::span<float> acc, float lr,
                         float eps = kAdagradEpsilon) {
  assert(params.size() == grad.size() && acc.size() == grad.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const float g = grad[k];
    if (g == 0) continue;
    acc[k] += g * g;
    params[k] -= lr * g / (std::sqrt(acc[k]) + eps);
  }
}

}  // namespace gfe

#pragma once

// Losses over one block of positives (n) and their candidate negatives
// (n x m). mask(i, j) != 0 marks an induced positive: the entry is skipped
// entirely and gets zero gradient.
//
// All three losses push positive scores up and negative scores down. The
// ranking loss is the score-maximizing hinge max(margin - f(e) + f(e'), 0).

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "gfe/config.hpp"
#include "gfe/scoring.hpp"

namespace gfe {

using Mask = Eigen::Array<unsigned char, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;
  Vec<Scalar> grad_pos;
  Rows<Scalar> grad_neg;
};

namespace detail {
template <typename Scalar>
LossResult<Scalar> zero_result(const Vec<Scalar>& pos, const Rows<Scalar>& neg) {
  LossResult<Scalar> r;
  r.grad_pos = Vec<Scalar>::Zero(pos.size());
  r.grad_neg = Rows<Scalar>::Zero(neg.rows(), neg.cols());
  return r;
}

// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}
}  // namespace detail

template <typename Scalar>
LossResult<Scalar> margin_loss(const Vec<Scalar>& pos, const Rows<Scalar>& neg, const Mask& mask, Scalar margin) {
  auto r = detail::zero_result(pos, neg);
  for (Eigen::Index i = 0; i < neg.rows(); ++i) {
    for (Eigen::Index j = 0; j < neg.cols(); ++j) {
      if (mask(i, j)) continue;
      const Scalar v = margin - pos[i] + neg(i, j);
      // Subgradient 0 at the hinge point.
      if (v > 0) {
        r.loss += v;
        r.grad_neg(i, j) = 1;
        r.grad_pos[i] -= 1;
      }
    }
  }
  return r;
}

// Binary cross-entropy on logistic scores: label 1 for each positive, 0 for
// each unmasked negative.
template <typename Scalar>
LossResult<Scalar> logistic_loss(const Vec<Scalar>& pos, const Rows<Scalar>& neg, const Mask& mask) {
  auto r = detail::zero_result(pos, neg);
  for (Eigen::Index i = 0; i < pos.size(); ++i) {
    r.loss += detail::softplus(-pos[i]);
    r.grad_pos[i] = -detail::sigmoid(-pos[i]);
  }
  for (Eigen::Index i = 0; i < neg.rows(); ++i) {
    for (Eigen::Index j = 0; j < neg.cols(); ++j) {
      if (mask(i, j)) continue;
      r.loss += detail::softplus(neg(i, j));
      r.grad_neg(i, j) = detail::sigmoid(neg(i, j));
    }
  }
  return r;
}

// Per positive: -log(exp f(e) / (exp f(e) + sum_unmasked exp f(e'))), with
// max-subtraction.
template <typename Scalar>
LossResult<Scalar> softmax_loss(const Vec<Scalar>& pos, const Rows<Scalar>& neg, const Mask& mask) {
  auto r = detail::zero_result(pos, neg);
  for (Eigen::Index i = 0; i < neg.rows(); ++i) {
    Scalar hi = pos[i];
    for (Eigen::Index j = 0; j < neg.cols(); ++j) {
      if (!mask(i, j)) hi = std::max(hi, neg(i, j));
    }
    const Scalar ep = std::exp(pos[i] - hi);
    Scalar total = ep;
    for (Eigen::Index j = 0; j < neg.cols(); ++j) {
      if (!mask(i, j)) total += std::exp(neg(i, j) - hi);
    }
    r.loss += std::log(total) + hi - pos[i];
    r.grad_pos[i] = ep / total - Scalar(1);
    for (Eigen::Index j = 0; j < neg.cols(); ++j) {
      if (!mask(i, j)) r.grad_neg(i, j) = std::exp(neg(i, j) - hi) / total;
    }
  }
  return r;
}

template <typename Scalar>
LossResult<Scalar> compute_loss(LossKind kind, const Vec<Scalar>& pos, const Rows<Scalar>& neg, const Mask& mask,
                                Scalar margin) {
  switch (kind) {
    case LossKind::margin:
      return margin_loss<Scalar>(pos, neg, mask, margin);
    case LossKind::logistic:
      return logistic_loss<Scalar>(pos, neg, mask);
    case LossKind::softmax:
      return softmax_loss<Scalar>(pos, neg, mask);
  }
  return detail::zero_result(pos, neg);
}

}  // namespace gfe

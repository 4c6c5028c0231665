#pragma once

// Chunked batched negative sampling.
//
// A batch of positives is cut into chunks of C edges. For each chunk and
// each side, the candidate list is the chunk's own C entities on that side
// (data-prevalence negatives) followed by C_u entities drawn uniformly, with
// replacement, from the resident partition of that side. Every positive is
// scored against every candidate with one matrix multiply; candidates equal
// to the positive's own entity on that side are masked out. With C == C_u
// half the pool follows the data distribution and half is uniform.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "gfe/loss.hpp"
#include "gfe/scoring.hpp"

namespace gfe {

using Rng = std::mt19937_64;

struct NegativeSet {
  Side side = Side::dest;
  int chunk_size = 0;                // number of positives in the chunk
  std::vector<std::int64_t> candidates;  // chunk's own entities, then uniform draws
  Mask mask;                         // chunk_size x candidates.size()

  std::int64_t usable() const { return static_cast<std::int64_t>(mask.size()) - static_cast<std::int64_t>(mask.count()); }
};

// `true_entities` are the chunk's entities on `side` (indices into the
// loaded partition of that side's entity type).
NegativeSet build_negative_set(std::span<const std::int64_t> true_entities, Side side, int uniform_count,
                               std::int64_t partition_entity_count, Rng& rng);

// mask(i, j) = candidates[j] == true_entities[i].
Mask induced_positive_mask(std::span<const std::int64_t> true_entities, std::span<const std::int64_t> candidates);

// Embedding rows of one chunk, gathered into dense blocks.
template <typename Scalar>
struct ChunkInput {
  Rows<Scalar> src;          // c x d
  Rows<Scalar> dst;          // c x d
  Rows<Scalar> src_uniform;  // u_s x d
  Rows<Scalar> dst_uniform;  // u_d x d
  std::vector<std::int64_t> src_ids, dst_ids, src_uniform_ids, dst_uniform_ids;
};

template <typename Scalar>
struct ChunkOutput {
  Scalar loss = 0;
  std::int64_t negatives = 0;  // unmasked negatives over both sides
  Rows<Scalar> grad_src, grad_dst, grad_src_uniform, grad_dst_uniform;
  Vec<Scalar> grad_forward;     // operator params used for destination corruption
  Vec<Scalar> grad_reciprocal;  // source corruption; empty unless reciprocal
};

struct ChunkModel {
  OperatorKind op = OperatorKind::identity;
  SimilarityKind sim = SimilarityKind::dot;
  LossKind loss = LossKind::margin;
  double margin = 0.1;
  bool reciprocal = false;
};

// Loss and gradients for one chunk, both corruption sides.
// Destination corruption scores sim(s, g(d', fwd)); source corruption scores
// sim(s', g(d, rev)) where rev == fwd unless reciprocal.
template <typename Scalar>
ChunkOutput<Scalar> chunk_forward_backward(const ChunkInput<Scalar>& in, const ChunkModel& model,
                                           std::span<const Scalar> fwd, std::span<const Scalar> rev) {
  const Eigen::Index c = in.src.rows();
  const Eigen::Index d = in.src.cols();
  if (in.dst.rows() != c || in.dst.cols() != d) throw std::invalid_argument("chunk: src/dst shape mismatch");
  ChunkOutput<Scalar> out;
  out.grad_src = Rows<Scalar>::Zero(c, d);
  out.grad_dst = Rows<Scalar>::Zero(c, d);
  out.grad_src_uniform = Rows<Scalar>::Zero(in.src_uniform.rows(), d);
  out.grad_dst_uniform = Rows<Scalar>::Zero(in.dst_uniform.rows(), d);
  out.grad_forward = Vec<Scalar>::Zero(static_cast<Eigen::Index>(fwd.size()));
  if (model.reciprocal) out.grad_reciprocal = Vec<Scalar>::Zero(static_cast<Eigen::Index>(rev.size()));
  if (c == 0) return out;
  const Scalar margin = static_cast<Scalar>(model.margin);
  std::span<Scalar> gfwd(out.grad_forward.data(), static_cast<std::size_t>(out.grad_forward.size()));

  // Destination corruption.
  {
    Rows<Scalar> cand_in(c + in.dst_uniform.rows(), d);
    cand_in.topRows(c) = in.dst;
    cand_in.bottomRows(in.dst_uniform.rows()) = in.dst_uniform;
    Rows<Scalar> cand;
    apply_operator<Scalar>(model.op, fwd, cand_in, cand);
    const Rows<Scalar> rhs = cand.topRows(c);

    std::vector<std::int64_t> ids(in.dst_ids);
    ids.insert(ids.end(), in.dst_uniform_ids.begin(), in.dst_uniform_ids.end());
    const Mask mask = induced_positive_mask(in.dst_ids, ids);

    const Vec<Scalar> pos = score_rows<Scalar>(in.src, rhs, model.sim);
    const Rows<Scalar> neg = score_matrix<Scalar>(in.src, cand, model.sim);
    const auto l = compute_loss<Scalar>(model.loss, pos, neg, mask, margin);
    out.loss += l.loss;
    out.negatives += static_cast<std::int64_t>(mask.size()) - static_cast<std::int64_t>(mask.count());

    Rows<Scalar> g_cand = Rows<Scalar>::Zero(cand.rows(), d);
    Rows<Scalar> g_rhs = Rows<Scalar>::Zero(c, d);
    score_rows_backward<Scalar>(in.src, rhs, model.sim, l.grad_pos, out.grad_src, g_rhs);
    score_matrix_backward<Scalar>(in.src, cand, model.sim, l.grad_neg, out.grad_src, g_cand);
    g_cand.topRows(c) += g_rhs;
    Rows<Scalar> g_cand_in = Rows<Scalar>::Zero(cand.rows(), d);
    operator_backward<Scalar>(model.op, fwd, cand_in, g_cand, g_cand_in, gfwd);
    out.grad_dst += g_cand_in.topRows(c);
    out.grad_dst_uniform += g_cand_in.bottomRows(in.dst_uniform.rows());
  }

  // Source corruption.
  {
    std::span<const Scalar> params = model.reciprocal ? rev : fwd;
    std::span<Scalar> gparams =
        model.reciprocal
            ? std::span<Scalar>(out.grad_reciprocal.data(), static_cast<std::size_t>(out.grad_reciprocal.size()))
            : gfwd;
    Rows<Scalar> query;
    apply_operator<Scalar>(model.op, params, in.dst, query);

    Rows<Scalar> cand(c + in.src_uniform.rows(), d);
    cand.topRows(c) = in.src;
    cand.bottomRows(in.src_uniform.rows()) = in.src_uniform;
    std::vector<std::int64_t> ids(in.src_ids);
    ids.insert(ids.end(), in.src_uniform_ids.begin(), in.src_uniform_ids.end());
    const Mask mask = induced_positive_mask(in.src_ids, ids);

    const Vec<Scalar> pos = score_rows<Scalar>(in.src, query, model.sim);
    // Both similarities are symmetric, so sim(s'_j, q_i) = scores(i, j).
    const Rows<Scalar> neg = score_matrix<Scalar>(query, cand, model.sim);
    const auto l = compute_loss<Scalar>(model.loss, pos, neg, mask, margin);
    out.loss += l.loss;
    out.negatives += static_cast<std::int64_t>(mask.size()) - static_cast<std::int64_t>(mask.count());

    Rows<Scalar> g_query = Rows<Scalar>::Zero(c, d);
    Rows<Scalar> g_cand = Rows<Scalar>::Zero(cand.rows(), d);
    score_rows_backward<Scalar>(in.src, query, model.sim, l.grad_pos, out.grad_src, g_query);
    score_matrix_backward<Scalar>(query, cand, model.sim, l.grad_neg, g_query, g_cand);
    out.grad_src += g_cand.topRows(c);
    out.grad_src_uniform += g_cand.bottomRows(in.src_uniform.rows());
    operator_backward<Scalar>(model.op, params, in.dst, g_query, out.grad_dst, gparams);
  }
  return out;
}

}  // namespace gfe

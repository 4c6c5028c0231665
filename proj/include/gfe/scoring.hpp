#pragma once

// Relation operators, similarity functions and batched score matrices.
//
// Entities are scored as sim(x_s, g(x_d, theta_r)): the relation operator is
// applied on the destination side only. For complex_diagonal a d-dim real
// vector holds d/2 complex numbers, real parts in the first half and
// imaginary parts in the second. Under that encoding the plain real dot
// product of two vectors equals Re{<a, conj(b)>}, so ComplEx scoring is
// complex_diagonal + dot and needs no separate conjugating similarity:
// sim(s, theta * d) = Re{sum_k s_k conj(theta_k) conj(d_k)}, the ComplEx
// score with relation vector conj(theta).
//
// Everything here is templated on the compute scalar: training instantiates
// float, gradient and oracle tests instantiate double.

#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "gfe/config.hpp"

namespace gfe {

template <typename Scalar>
using Rows = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Side { source, dest };

// Number of operator parameters for one relation (and one side).
std::size_t parameter_count(OperatorKind kind, int dim);

// Initial values: translation 0, diagonal 1, complex_diagonal 1+0i, linear I.
std::vector<float> initial_parameters(OperatorKind kind, int dim);

// Operator parameters of one relation. When reciprocal relations are on,
// `reciprocal` holds a second parameter set used when scoring
// source-corrupted edges; otherwise both sides share `forward`.
struct RelationParameters {
  OperatorKind kind = OperatorKind::identity;
  int dim = 0;
  std::vector<float> forward;
  std::vector<float> reciprocal;

  static RelationParameters initial(OperatorKind kind, int dim, bool reciprocal);
  bool has_reciprocal() const { return !reciprocal.empty(); }
  std::span<const float> for_side(Side side) const {
    return side == Side::source && has_reciprocal() ? std::span<const float>(reciprocal)
                                                    : std::span<const float>(forward);
  }
  std::span<float> for_side(Side side) {
    return side == Side::source && has_reciprocal() ? std::span<float>(reciprocal) : std::span<float>(forward);
  }
};

namespace detail {
inline void check_shape(OperatorKind kind, std::size_t params, long cols, int dim) {
  if (cols != dim || params != parameter_count(kind, dim)) throw std::invalid_argument("operator shape mismatch");
  if (kind == OperatorKind::complex_diagonal && dim % 2 != 0) {
    throw std::invalid_argument("complex_diagonal requires an even dimension");
  }
}

template <typename Scalar>
Eigen::Map<const Vec<Scalar>> param_vec(std::span<const Scalar> p) {
  return {p.data(), static_cast<Eigen::Index>(p.size())};
}
}  // namespace detail

// out.row(i) = g(in.row(i)). `in` and `out` may not alias.
template <typename Scalar>
void apply_operator(OperatorKind kind, std::span<const Scalar> params, const Rows<Scalar>& in, Rows<Scalar>& out) {
  const int dim = static_cast<int>(in.cols());
  detail::check_shape(kind, params.size(), in.cols(), dim);
  out.resize(in.rows(), in.cols());
  const auto theta = detail::param_vec<Scalar>(params);
  switch (kind) {
    case OperatorKind::identity:
      out = in;
      break;
    case OperatorKind::translation:
      out = in.rowwise() + theta.transpose();
      break;
    case OperatorKind::diagonal:
      out = in.array().rowwise() * theta.transpose().array();
      break;
    case OperatorKind::complex_diagonal: {
      const int h = dim / 2;
      const auto re_t = theta.head(h).transpose().array();
      const auto im_t = theta.tail(h).transpose().array();
      const auto re = in.leftCols(h).array();
      const auto im = in.rightCols(h).array();
      out.leftCols(h) = (re.rowwise() * re_t - im.rowwise() * im_t).matrix();
      out.rightCols(h) = (re.rowwise() * im_t + im.rowwise() * re_t).matrix();
      break;
    }
    case OperatorKind::linear: {
      Eigen::Map<const Rows<Scalar>> a(params.data(), dim, dim);
      out.noalias() = in * a.transpose();
      break;
    }
  }
}

// Single-vector convenience.
template <typename Scalar>
Vec<Scalar> apply_operator(OperatorKind kind, std::span<const Scalar> params, const Vec<Scalar>& x) {
  Rows<Scalar> in = x.transpose();
  Rows<Scalar> out;
  apply_operator<Scalar>(kind, params, in, out);
  return out.row(0).transpose();
}

// Backward pass of apply_operator: given dL/d(out), accumulates dL/d(in)
// into grad_in and dL/d(params) into grad_params (both must be sized).
template <typename Scalar>
void operator_backward(OperatorKind kind, std::span<const Scalar> params, const Rows<Scalar>& in,
                       const Rows<Scalar>& grad_out, Rows<Scalar>& grad_in, std::span<Scalar> grad_params) {
  const int dim = static_cast<int>(in.cols());
  const auto theta = detail::param_vec<Scalar>(params);
  Eigen::Map<Vec<Scalar>> gp(grad_params.data(), static_cast<Eigen::Index>(grad_params.size()));
  switch (kind) {
    case OperatorKind::identity:
      grad_in += grad_out;
      break;
    case OperatorKind::translation:
      grad_in += grad_out;
      gp += grad_out.colwise().sum().transpose();
      break;
    case OperatorKind::diagonal:
      grad_in.array() += grad_out.array().rowwise() * theta.transpose().array();
      gp += grad_out.cwiseProduct(in).colwise().sum().transpose();
      break;
    case OperatorKind::complex_diagonal: {
      const int h = dim / 2;
      const auto re_t = theta.head(h).transpose().array();
      const auto im_t = theta.tail(h).transpose().array();
      const auto g_re = grad_out.leftCols(h).array();
      const auto g_im = grad_out.rightCols(h).array();
      const auto re = in.leftCols(h).array();
      const auto im = in.rightCols(h).array();
      grad_in.leftCols(h).array() += g_re.rowwise() * re_t + g_im.rowwise() * im_t;
      grad_in.rightCols(h).array() += g_im.rowwise() * re_t - g_re.rowwise() * im_t;
      gp.head(h) += (g_re * re + g_im * im).matrix().colwise().sum().transpose();
      gp.tail(h) += (g_im * re - g_re * im).matrix().colwise().sum().transpose();
      break;
    }
    case OperatorKind::linear: {
      Eigen::Map<const Rows<Scalar>> a(params.data(), dim, dim);
      grad_in.noalias() += grad_out * a;
      Eigen::Map<Rows<Scalar>> ga(grad_params.data(), dim, dim);
      ga.noalias() += grad_out.transpose() * in;
      break;
    }
  }
}

// Real-valued similarity. With conjugate=true both vectors are read as
// complex (first half real, second half imaginary) and the result is
// Re{sum a_k * conj(b_k)}, which equals the real dot product; the flag
// exists so callers can state ComplEx intent and tests can check the identity.
template <typename Scalar>
Scalar similarity(const Vec<Scalar>& a, const Vec<Scalar>& b, SimilarityKind kind, bool conjugate = false) {
  if (a.size() != b.size()) throw std::invalid_argument("similarity: length mismatch");
  if (conjugate) {
    if (a.size() % 2 != 0) throw std::invalid_argument("similarity: conjugate needs even length");
    const auto h = a.size() / 2;
    Scalar acc = 0;
    for (Eigen::Index k = 0; k < h; ++k) {
      std::complex<Scalar> ca(a[k], a[k + h]);
      std::complex<Scalar> cb(b[k], b[k + h]);
      acc += (ca * std::conj(cb)).real();
    }
    if (kind == SimilarityKind::dot) return acc;
    const Scalar na = a.norm(), nb = b.norm();
    return na == 0 || nb == 0 ? Scalar(0) : acc / (na * nb);
  }
  const Scalar d = a.dot(b);
  if (kind == SimilarityKind::dot) return d;
  const Scalar na = a.norm(), nb = b.norm();
  // Zero vectors score 0 rather than NaN.
  return na == 0 || nb == 0 ? Scalar(0) : d / (na * nb);
}

namespace detail {
// Row-normalizes `x`; zero rows stay zero. Returns inverse norms (0 for zero rows).
template <typename Scalar>
Vec<Scalar> normalize_rows(const Rows<Scalar>& x, Rows<Scalar>& out) {
  Vec<Scalar> inv = x.rowwise().norm();
  for (Eigen::Index i = 0; i < inv.size(); ++i) inv[i] = inv[i] > 0 ? Scalar(1) / inv[i] : Scalar(0);
  out = inv.asDiagonal() * x;
  return inv;
}
}  // namespace detail

// scores(i, j) = sim(lhs.row(i), rhs.row(j)), computed as one matrix multiply.
template <typename Scalar>
Rows<Scalar> score_matrix(const Rows<Scalar>& lhs, const Rows<Scalar>& rhs, SimilarityKind kind) {
  if (lhs.cols() != rhs.cols()) throw std::invalid_argument("score_matrix: dimension mismatch");
  if (kind == SimilarityKind::dot) return lhs * rhs.transpose();
  Rows<Scalar> ln, rn;
  detail::normalize_rows(lhs, ln);
  detail::normalize_rows(rhs, rn);
  return ln * rn.transpose();
}

// scores(i) = sim(lhs.row(i), rhs.row(i)).
template <typename Scalar>
Vec<Scalar> score_rows(const Rows<Scalar>& lhs, const Rows<Scalar>& rhs, SimilarityKind kind) {
  if (lhs.cols() != rhs.cols() || lhs.rows() != rhs.rows()) throw std::invalid_argument("score_rows: shape mismatch");
  if (kind == SimilarityKind::dot) return lhs.cwiseProduct(rhs).rowwise().sum();
  Rows<Scalar> ln, rn;
  detail::normalize_rows(lhs, ln);
  detail::normalize_rows(rhs, rn);
  return ln.cwiseProduct(rn).rowwise().sum();
}

namespace detail {
// Maps dL/d(normalized x) to dL/dx: (g - (g . xhat) xhat) / |x|.
template <typename Scalar>
void cosine_input_grad(const Rows<Scalar>& normalized, const Vec<Scalar>& inv_norm, const Rows<Scalar>& g_norm,
                       Rows<Scalar>& grad) {
  const Vec<Scalar> proj = g_norm.cwiseProduct(normalized).rowwise().sum();
  grad.noalias() += inv_norm.asDiagonal() * (g_norm - proj.asDiagonal() * normalized);
}
}  // namespace detail

// Backward of score_matrix: accumulates into grad_lhs / grad_rhs (pre-sized).
template <typename Scalar>
void score_matrix_backward(const Rows<Scalar>& lhs, const Rows<Scalar>& rhs, SimilarityKind kind,
                           const Rows<Scalar>& grad_scores, Rows<Scalar>& grad_lhs, Rows<Scalar>& grad_rhs) {
  if (kind == SimilarityKind::dot) {
    grad_lhs.noalias() += grad_scores * rhs;
    grad_rhs.noalias() += grad_scores.transpose() * lhs;
    return;
  }
  Rows<Scalar> ln, rn;
  const Vec<Scalar> li = detail::normalize_rows(lhs, ln);
  const Vec<Scalar> ri = detail::normalize_rows(rhs, rn);
  const Rows<Scalar> gl = grad_scores * rn;
  const Rows<Scalar> gr = grad_scores.transpose() * ln;
  detail::cosine_input_grad<Scalar>(ln, li, gl, grad_lhs);
  detail::cosine_input_grad<Scalar>(rn, ri, gr, grad_rhs);
}

// Backward of score_rows.
template <typename Scalar>
void score_rows_backward(const Rows<Scalar>& lhs, const Rows<Scalar>& rhs, SimilarityKind kind,
                         const Vec<Scalar>& grad_scores, Rows<Scalar>& grad_lhs, Rows<Scalar>& grad_rhs) {
  if (kind == SimilarityKind::dot) {
    grad_lhs.noalias() += grad_scores.asDiagonal() * rhs;
    grad_rhs.noalias() += grad_scores.asDiagonal() * lhs;
    return;
  }
  Rows<Scalar> ln, rn;
  const Vec<Scalar> li = detail::normalize_rows(lhs, ln);
  const Vec<Scalar> ri = detail::normalize_rows(rhs, rn);
  const Rows<Scalar> gl = grad_scores.asDiagonal() * rn;
  const Rows<Scalar> gr = grad_scores.asDiagonal() * ln;
  detail::cosine_input_grad<Scalar>(ln, li, gl, grad_lhs);
  detail::cosine_input_grad<Scalar>(rn, ri, gr, grad_rhs);
}

// For dot similarity, sim(q, g(c)) = <fold(q), c> + bias(q). Lets evaluation
// rank all candidates against raw embeddings without transforming each one.
// Returns false (leaving outputs untouched) when the similarity is cosine.
template <typename Scalar>
bool fold_query(OperatorKind kind, std::span<const Scalar> params, SimilarityKind sim, const Rows<Scalar>& queries,
                Rows<Scalar>& folded, Vec<Scalar>& bias) {
  if (sim != SimilarityKind::dot) return false;
  const int dim = static_cast<int>(queries.cols());
  const auto theta = detail::param_vec<Scalar>(params);
  bias = Vec<Scalar>::Zero(queries.rows());
  switch (kind) {
    case OperatorKind::identity:
      folded = queries;
      break;
    case OperatorKind::translation:
      folded = queries;
      bias = queries * theta;
      break;
    case OperatorKind::diagonal:
      folded = queries.array().rowwise() * theta.transpose().array();
      break;
    case OperatorKind::complex_diagonal: {
      const int h = dim / 2;
      const auto re_t = theta.head(h).transpose().array();
      const auto im_t = theta.tail(h).transpose().array();
      const auto re = queries.leftCols(h).array();
      const auto im = queries.rightCols(h).array();
      folded.resize(queries.rows(), dim);
      folded.leftCols(h) = (re.rowwise() * re_t + im.rowwise() * im_t).matrix();
      folded.rightCols(h) = (im.rowwise() * re_t - re.rowwise() * im_t).matrix();
      break;
    }
    case OperatorKind::linear: {
      Eigen::Map<const Rows<Scalar>> a(params.data(), dim, dim);
      folded.noalias() = queries * a;
      break;
    }
  }
  return true;
}

}  // namespace gfe

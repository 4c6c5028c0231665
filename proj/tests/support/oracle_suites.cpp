#include "oracle_suites.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "oracles.hpp"

namespace gfe::testing {

double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace {

std::vector<double> random_params(OperatorKind op, int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.5);
  std::vector<double> p(parameter_count(op, dim));
  for (auto& v : p) v = n(rng);
  if (op == OperatorKind::diagonal || op == OperatorKind::complex_diagonal) {
    for (std::size_t k = 0; k < p.size(); ++k) p[k] += k < static_cast<std::size_t>(dim) / 2 ? 1.0 : 0.0;
  }
  return p;
}

}  // namespace

ChunkCase random_chunk(OperatorKind op, SimilarityKind sim, LossKind loss, bool reciprocal, int dim, int c, int u,
                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  std::uniform_int_distribution<std::int64_t> id(0, c + u / 2);
  ChunkCase out;
  out.model = {op, sim, loss, 0.1, reciprocal && op != OperatorKind::identity};
  out.fwd = random_params(op, dim, rng);
  out.rev = out.model.reciprocal ? random_params(op, dim, rng) : out.fwd;

  std::map<std::int64_t, std::vector<double>> src_rows, dst_rows;
  auto row_for = [&](std::map<std::int64_t, std::vector<double>>& table, std::int64_t key) {
    auto it = table.find(key);
    if (it == table.end()) {
      std::vector<double> r(static_cast<std::size_t>(dim));
      for (auto& v : r) v = n(rng);
      it = table.emplace(key, r).first;
    }
    return it->second;
  };
  auto fill = [&](std::map<std::int64_t, std::vector<double>>& table, int rows, std::vector<std::int64_t>& ids,
                  Rows<double>& values) {
    values.resize(rows, dim);
    for (int i = 0; i < rows; ++i) {
      ids.push_back(id(rng));
      const auto r = row_for(table, ids.back());
      for (int k = 0; k < dim; ++k) values(i, k) = r[static_cast<std::size_t>(k)];
    }
  };
  auto& in = out.input;
  fill(src_rows, c, in.src_ids, in.src);
  fill(dst_rows, c, in.dst_ids, in.dst);
  fill(src_rows, u, in.src_uniform_ids, in.src_uniform);
  fill(dst_rows, u, in.dst_uniform_ids, in.dst_uniform);
  return out;
}

double batched_vs_naive(const ChunkCase& c) {
  const auto batched = chunk_forward_backward<double>(c.input, c.model, c.fwd, c.rev);
  const double naive = oracle::naive_chunk_loss(c.input, c.model, c.fwd, c.rev);
  return rel_error(batched.loss, naive, 1e-12);
}

bool near_hinge(const ChunkCase& c, double band) {
  if (c.model.loss != LossKind::margin) return false;
  const auto& in = c.input;
  const auto& m = c.model;
  const auto sp = m.reciprocal ? std::span<const double>(c.rev) : std::span<const double>(c.fwd);
  for (Eigen::Index i = 0; i < in.src.rows(); ++i) {
    const auto s = oracle::row(in.src, i), d = oracle::row(in.dst, i);
    const double pd = oracle::score(m.op, m.sim, c.fwd, s, d);
    const double ps = oracle::score(m.op, m.sim, sp, s, d);
    auto check = [&](const Rows<double>& rows, bool dest_side) {
      for (Eigen::Index j = 0; j < rows.rows(); ++j) {
        const auto v = oracle::row(rows, j);
        const double neg = dest_side ? oracle::score(m.op, m.sim, c.fwd, s, v) : oracle::score(m.op, m.sim, sp, v, d);
        if (std::abs(m.margin - (dest_side ? pd : ps) + neg) < band) return true;
      }
      return false;
    };
    if (check(in.dst, true) || check(in.dst_uniform, true) || check(in.src, false) || check(in.src_uniform, false)) {
      return true;
    }
  }
  return false;
}

GradientCheck finite_difference_check(const ChunkCase& c, double h) {
  ChunkCase work = c;
  const auto analytic = chunk_forward_backward<double>(c.input, c.model, c.fwd, c.rev);
  auto loss = [&]() {
    const auto rev = work.model.reciprocal ? std::span<const double>(work.rev) : std::span<const double>(work.fwd);
    return oracle::naive_chunk_loss(work.input, work.model, work.fwd, rev);
  };
  GradientCheck result;
  auto compare = [&](double a, double& x, const std::string& where) {
    const double numeric = oracle::central_difference(loss, x, h);
    const double e = rel_error(a, numeric);
    ++result.checked;
    if (e > result.max_error) {
      result.max_error = e;
      result.worst = where + " analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
    }
  };
  auto block = [&](Rows<double>& values, const Rows<double>& grads, const char* name) {
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
      for (Eigen::Index k = 0; k < values.cols(); ++k) {
        compare(grads(i, k), values(i, k), std::string(name) + "[" + std::to_string(i) + "," + std::to_string(k) + "]");
      }
    }
  };
  block(work.input.src, analytic.grad_src, "src");
  block(work.input.dst, analytic.grad_dst, "dst");
  block(work.input.src_uniform, analytic.grad_src_uniform, "src_uniform");
  block(work.input.dst_uniform, analytic.grad_dst_uniform, "dst_uniform");
  for (std::size_t k = 0; k < work.fwd.size(); ++k) {
    compare(analytic.grad_forward[static_cast<Eigen::Index>(k)], work.fwd[k], "fwd[" + std::to_string(k) + "]");
  }
  if (work.model.reciprocal) {
    for (std::size_t k = 0; k < work.rev.size(); ++k) {
      compare(analytic.grad_reciprocal[static_cast<Eigen::Index>(k)], work.rev[k], "rev[" + std::to_string(k) + "]");
    }
  }
  return result;
}

double score_matrix_vs_pairwise(SimilarityKind sim, int n, int m, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Rows<float> lhs(n, dim), rhs(m, dim);
  for (Eigen::Index i = 0; i < lhs.size(); ++i) lhs.data()[i] = static_cast<float>(nd(rng));
  for (Eigen::Index i = 0; i < rhs.size(); ++i) rhs.data()[i] = static_cast<float>(nd(rng));
  const Rows<float> scores = score_matrix<float>(lhs, rhs, sim);
  double worst = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      oracle::Vector a(lhs.row(i).data(), lhs.row(i).data() + dim), b(rhs.row(j).data(), rhs.row(j).data() + dim);
      worst = std::max(worst, rel_error(scores(i, j), oracle::sim(a, b, sim), 1.0));
    }
  }
  return worst;
}

}  // namespace gfe::testing

#include "gfe/scoring.hpp"

namespace gfe {

std::size_t parameter_count(OperatorKind kind, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  switch (kind) {
    case OperatorKind::identity:
      return 0;
    case OperatorKind::translation:
    case OperatorKind::diagonal:
    case OperatorKind::complex_diagonal:
      return d;
    case OperatorKind::linear:
      return d * d;
  }
  return 0;
}

std::vector<float> initial_parameters(OperatorKind kind, int dim) {
  std::vector<float> p(parameter_count(kind, dim), 0.0f);
  switch (kind) {
    case OperatorKind::identity:
    case OperatorKind::translation:
      break;
    case OperatorKind::diagonal:
      std::fill(p.begin(), p.end(), 1.0f);
      break;
    case OperatorKind::complex_diagonal:
      std::fill(p.begin(), p.begin() + dim / 2, 1.0f);
      break;
    case OperatorKind::linear:
      for (int i = 0; i < dim; ++i) p[static_cast<std::size_t>(i * dim + i)] = 1.0f;
      break;
  }
  return p;
}

RelationParameters RelationParameters::initial(OperatorKind kind, int dim, bool reciprocal) {
  RelationParameters r;
  r.kind = kind;
  r.dim = dim;
  r.forward = initial_parameters(kind, dim);
  if (reciprocal && kind != OperatorKind::identity) r.reciprocal = r.forward;
  return r;
}

}  // namespace gfe

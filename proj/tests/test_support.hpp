#pragma once

#include <cmath>
#include <random>

#include "excessmtl/model.hpp"

namespace excessmtl::testing {

struct RandomProblem {
  ModelSpec spec;
  ParamPartition params;
  DenseMatrix x;
  std::vector<Targets> targets;
};

inline DenseMatrix random_matrix(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  DenseMatrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

/// Two-layer trunk, one classification head and one regression head, random
/// parameters and random batch.
inline RandomProblem random_problem(std::uint64_t seed, Index batch = 6) {
  std::mt19937_64 rng(seed);
  ModelSpec spec;
  spec.input_dim = 4;
  spec.trunk_layers = {5, 4};
  spec.task_heads = {{3, LossKind::SoftmaxCrossEntropy}, {2, LossKind::SquaredError}};
  RandomProblem p{spec, make_parameters(spec), random_matrix(batch, 4, rng), {}};
  init_parameters(p.params, spec, seed + 1);
  // Nonzero biases so the bias gradients are exercised away from zero.
  std::normal_distribution<double> normal(0.0, 0.3);
  for (Index i = 0; i < p.params.shared().size(); ++i) p.params.shared()[i] += normal(rng);
  for (std::size_t t = 0; t < 2; ++t) {
    for (Index i = 0; i < p.params.task(t).size(); ++i) p.params.task(t)[i] += normal(rng);
  }
  std::uniform_int_distribution<int> label(0, 2);
  Labels labels(static_cast<std::size_t>(batch));
  for (auto& l : labels) l = label(rng);
  p.targets.emplace_back(std::move(labels));
  p.targets.emplace_back(random_matrix(batch, 2, rng));
  return p;
}

/// Batch-mean loss recomputed from forward outputs, independent of the
/// backprop path.
inline double reference_loss(const ParamPartition& params, const ModelSpec& spec,
                             const DenseMatrix& x, const Targets& y, std::size_t task) {
  const DenseMatrix out = forward(params, spec, x, task);
  double total = 0.0;
  for (Index r = 0; r < out.rows(); ++r) {
    if (const auto* labels = std::get_if<Labels>(&y)) {
      double sum = 0.0;
      for (Index c = 0; c < out.cols(); ++c) sum += std::exp(out(r, c));
      total += std::log(sum) - out(r, (*labels)[static_cast<std::size_t>(r)]);
    } else {
      const auto& t = std::get<DenseMatrix>(y);
      for (Index c = 0; c < out.cols(); ++c) total += (out(r, c) - t(r, c)) * (out(r, c) - t(r, c));
    }
  }
  return total / static_cast<double>(out.rows());
}

/// Central differences of reference_loss over one flat block.
inline DenseVector finite_difference(ParamPartition params, const ModelSpec& spec,
                                     const DenseMatrix& x, const Targets& y, std::size_t task,
                                     bool shared, double h = 1e-5) {
  DenseVector& block = shared ? params.shared() : params.task(task);
  DenseVector grad(block.size());
  for (Index i = 0; i < block.size(); ++i) {
    const double keep = block[i];
    block[i] = keep + h;
    const double up = reference_loss(params, spec, x, y, task);
    block[i] = keep - h;
    const double down = reference_loss(params, spec, x, y, task);
    block[i] = keep;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace excessmtl::testing

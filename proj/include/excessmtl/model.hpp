#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "excessmtl/numcore.hpp"

namespace excessmtl {

enum class LossKind { SoftmaxCrossEntropy, SquaredError };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct TaskHead {
  Index output_dim = 1;
  LossKind loss = LossKind::SquaredError;
};

/// Shared rectifier trunk of affine layers followed by one affine head per
/// task. Every trunk layer, including the last, is followed by a rectifier.
struct ModelSpec {
  Index input_dim = 0;
  std::vector<Index> trunk_layers;
  std::vector<TaskHead> task_heads;

  std::size_t num_tasks() const { return task_heads.size(); }
  Index trunk_output_dim() const { return trunk_layers.empty() ? input_dim : trunk_layers.back(); }
  void validate() const;
};

/// Class labels for classification tasks or an n x output_dim matrix for
/// regression tasks.
using Labels = std::vector<int>;
using Targets = std::variant<Labels, DenseMatrix>;

Index target_rows(const Targets& y);

struct GradientBundle {
  std::size_t task_id = 0;
  DenseVector shared_grad;
  DenseVector head_grad;
  double loss_value = 0.0;
};

// View naming used by make_parameters.
std::string trunk_weight_name(std::size_t layer);
std::string trunk_bias_name(std::size_t layer);
std::string head_weight_name(std::size_t task);
std::string head_bias_name(std::size_t task);

/// Zero-initialized parameters laid out for `spec`. Weights are stored
/// out x in, so a layer computes x * W^T + b.
ParamPartition make_parameters(const ModelSpec& spec);

/// He-scaled Gaussian weights (variance 2 / fan_in), zero biases.
void init_parameters(ParamPartition& params, const ModelSpec& spec, std::uint64_t seed);

DenseMatrix forward(const ParamPartition& params, const ModelSpec& spec, const DenseMatrix& x,
                    std::size_t task);

/// Batch-mean loss of `task` on (x, y) and its exact gradients with respect to
/// the shared block and the task's own block. Other heads are never read.
///
/// Squared error sums over output columns and averages over rows.
GradientBundle loss_and_grad(const ParamPartition& params, const ModelSpec& spec,
                             const DenseMatrix& x, const Targets& y, std::size_t task);

/// Accuracy for classification heads, mean squared error per entry for
/// regression heads.
double evaluate_metric(const ParamPartition& params, const ModelSpec& spec, const DenseMatrix& x,
                       const Targets& y, std::size_t task);

/// True iff `a` is no worse than `b` in every task and strictly better in one.
bool pareto_dominates(std::span<const double> a, std::span<const double> b);

}  // namespace excessmtl

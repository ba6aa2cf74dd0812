#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "excessmtl/data.hpp"
#include "excessmtl/model.hpp"
#include "excessmtl/weighting.hpp"

namespace excessmtl {

struct TrainConfig {
  double eta_theta = 1e-3;
  double eta_alpha = 0.1;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::size_t warmup_epochs = 3;
  double weight_decay = 0.0;
  Strategy strategy = Strategy::ExcessMTL;
  std::uint64_t seed = 0;
  /// Scale both step sizes by 1/sqrt(t) at outer step t.
  bool eta_decay = false;
  /// Weight ExcessMTL by excess risk relative to the warm-up baseline.
  bool relative_excess = true;

  void validate() const;
};

/// Observables of one outer step. `per_task_test_metric` is filled only on
/// the last step of each epoch.
struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::vector<double> per_task_train_loss;
  std::vector<double> per_task_test_metric;
  std::vector<double> alpha;
  std::vector<double> raw_excess;
  std::vector<double> relative_excess;
  double stationarity_gap = 0.0;
};

/// ||sum_i alpha_i g_i||^2.
double stationarity_gap(const std::vector<DenseVector>& grads, const DenseVector& alpha);

/// Produces the loss and gradients of one task at the given parameters.
using TaskGradientFn = std::function<GradientBundle(const ParamPartition&, std::size_t)>;

/// One outer iteration of the weighted multi-task update, for any objective:
///   per task: gradient, Fisher accumulation, excess estimate, head update;
///   then the weight update; then the shared step with the new weights.
/// Weight decay adds lambda * theta to every gradient before use.
MetricsRecord algorithm_step(ParamPartition& params, WeightingState& weighting,
                             const TaskGradientFn& task_gradient, const TrainConfig& cfg,
                             bool warmup_active);

struct Batch {
  DenseMatrix x;
  Targets y;
};

/// algorithm_step on the shared-trunk model with one mini-batch per task.
MetricsRecord train_step(ParamPartition& params, WeightingState& weighting, const ModelSpec& spec,
                         const std::vector<Batch>& batches, const TrainConfig& cfg,
                         bool warmup_active);

struct FitResult {
  ParamPartition params;
  WeightingState weighting;
  std::vector<MetricsRecord> metrics;
};

/// Runs cfg.epochs epochs of lockstep mini-batch steps from a seeded
/// initialization, evaluating the test split after every epoch.
FitResult fit(const std::vector<TaskSplits>& data, const ModelSpec& spec, const TrainConfig& cfg,
              const std::function<void(const MetricsRecord&)>& on_record = {});

/// Shortest round-trip decimal form of a double.
std::string format_double(double value);

void write_metrics_csv_header(std::ostream& out, std::size_t num_tasks);
void write_metrics_csv_row(std::ostream& out, const MetricsRecord& record);
std::string to_json_line(const MetricsRecord& record);

}  // namespace excessmtl

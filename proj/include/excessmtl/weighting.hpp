#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "excessmtl/numcore.hpp"

namespace excessmtl {

enum class Strategy { ExcessMTL, Uniform, GroupDRO, MGDA };

std::string to_string(Strategy strategy);
Strategy strategy_from_string(const std::string& name);

/// Guard added to the square-rooted Fisher accumulator before dividing.
inline constexpr double kExcessEps = 1e-12;

/// Task weights on the probability simplex.
struct WeightState {
  DenseVector alpha;
  double eta_alpha = 0.1;
  std::size_t step = 0;

  static WeightState uniform(std::size_t num_tasks, double eta_alpha);
};

/// Per-task running sum of elementwise squared shared-parameter gradients.
struct FisherAccumulator {
  std::vector<DenseVector> per_task;
  /// Number of accumulate calls seen by each task.
  std::vector<std::size_t> updates;
  /// Outer iterations completed; advanced by the caller.
  std::size_t steps = 0;

  FisherAccumulator() = default;
  FisherAccumulator(std::size_t num_tasks, Index dim);
};

/// Raw excess-risk estimates, their warm-up baseline and the relative form.
struct ExcessEstimate {
  DenseVector raw;
  DenseVector initial;
  DenseVector relative;
  /// Number of raw vectors averaged into `initial`.
  std::size_t baseline_samples = 0;

  explicit ExcessEstimate(std::size_t num_tasks = 0);
};

void accumulate_fisher(FisherAccumulator& acc, std::size_t task, const DenseVector& g);

/// g^T diag(sqrt(acc) + eps)^{-1} g, the diagonal-Fisher excess-risk estimate
/// without the 1/2 factor. `acc` must already contain g's own square.
double estimate_excess_fisher(const DenseVector& g, const DenseVector& acc,
                              double eps = kExcessEps);

/// 1/2 g^T H^{-1} g through a Cholesky solve. Exact excess risk for a
/// quadratic with Hessian H.
template <class Scalar>
Scalar estimate_excess_exact(const Vector<Scalar>& g, const Matrix<Scalar>& h) {
  if (h.rows() != h.cols() || h.rows() != g.size()) {
    throw DimensionError("estimate_excess_exact: Hessian is " + std::to_string(h.rows()) + "x" +
                         std::to_string(h.cols()) + ", gradient has length " +
                         std::to_string(g.size()));
  }
  const Scalar scale = std::max(h.cwiseAbs().maxCoeff(), Scalar(1));
  if ((h - h.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-10) * scale) {
    throw NumericError("estimate_excess_exact: Hessian is not symmetric");
  }
  Eigen::LLT<Matrix<Scalar>> llt(h);
  if (llt.info() != Eigen::Success) {
    throw NumericError("estimate_excess_exact: Hessian is not positive definite");
  }
  return Scalar(0.5) * g.dot(llt.solve(g));
}

/// Exponentiated-gradient step alpha_i <- alpha_i exp(eta * payoff_i), then
/// normalization. `eta_scale` multiplies w.eta_alpha for this step only.
WeightState update_weights_multiplicative(WeightState w, const DenseVector& payoff,
                                          double eta_scale = 1.0);

/// During warm-up folds `raw` into the running-mean baseline and returns
/// zeros. Afterwards returns raw / initial clamped to [0, 1]. A baseline that
/// was never collected is seeded from the first post-warm-up call.
DenseVector scale_process(const DenseVector& raw, ExcessEstimate& est, bool warmup_active);

/// Loss-driven exponentiated-gradient step (worst-task weighting).
WeightState groupdro_update(WeightState w, const DenseVector& losses, double eta_scale = 1.0);

/// Minimum-norm point in the convex hull of `grads`, as simplex weights.
DenseVector mgda_weights(const std::vector<DenseVector>& grads);

/// What one outer step exposes to a weighting strategy.
struct StepObservations {
  std::vector<double> losses;
  std::vector<DenseVector> shared_grads;
  bool warmup_active = false;
  double eta_scale = 1.0;
};

/// Mutable state of one strategy instance.
struct WeightingState {
  Strategy strategy = Strategy::Uniform;
  WeightState weights;
  FisherAccumulator fisher;
  ExcessEstimate excess;
  /// Divide excess risks by their warm-up baseline before the update.
  bool relative_excess = true;

  WeightingState(Strategy strategy, std::size_t num_tasks, Index shared_dim, double eta_alpha,
                 bool relative_excess = true);
};

struct StepDiagnostics {
  std::size_t step = 0;
  DenseVector alpha;
  DenseVector raw_excess;
  DenseVector relative_excess;
  /// Fisher accumulate count for each task at the moment its estimate was
  /// taken.
  std::vector<std::size_t> fisher_updates_seen;
};

/// Advances `state` by one outer step. Shared gradients drive the Fisher
/// accumulator (for every strategy, as diagnostics) and the MGDA solve;
/// losses drive GroupDRO.
StepDiagnostics strategy_step(WeightingState& state, const StepObservations& obs);

/// One JSON object: step, alpha, raw_excess, relative_excess.
std::string to_json_line(const StepDiagnostics& diag);

}  // namespace excessmtl

#include "excessmtl/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace excessmtl {

std::string to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::ExcessMTL: return "excess_mtl";
    case Strategy::Uniform: return "uniform";
    case Strategy::GroupDRO: return "groupdro";
    case Strategy::MGDA: return "mgda";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& name) {
  if (name == "excess_mtl") return Strategy::ExcessMTL;
  if (name == "uniform") return Strategy::Uniform;
  if (name == "groupdro") return Strategy::GroupDRO;
  if (name == "mgda") return Strategy::MGDA;
  throw ConfigError("unknown strategy '" + name +
                    "' (expected excess_mtl, uniform, groupdro or mgda)");
}

WeightState WeightState::uniform(std::size_t num_tasks, double eta_alpha) {
  if (num_tasks == 0) throw ConfigError("weight state needs at least one task");
  if (!(eta_alpha > 0.0)) throw ConfigError("eta_alpha must be > 0");
  WeightState w;
  w.alpha = DenseVector::Constant(static_cast<Index>(num_tasks), 1.0 / static_cast<double>(num_tasks));
  w.eta_alpha = eta_alpha;
  return w;
}

FisherAccumulator::FisherAccumulator(std::size_t num_tasks, Index dim)
    : per_task(num_tasks, DenseVector::Zero(dim)), updates(num_tasks, 0) {}

ExcessEstimate::ExcessEstimate(std::size_t num_tasks)
    : raw(DenseVector::Zero(static_cast<Index>(num_tasks))),
      initial(DenseVector::Zero(static_cast<Index>(num_tasks))),
      relative(DenseVector::Zero(static_cast<Index>(num_tasks))) {}

void accumulate_fisher(FisherAccumulator& acc, std::size_t task, const DenseVector& g) {
  if (task >= acc.per_task.size()) {
    throw LookupError("Fisher accumulator has no task " + std::to_string(task));
  }
  auto& slot = acc.per_task[task];
  if (slot.size() != g.size()) {
    throw DimensionError("accumulate_fisher: gradient length " + std::to_string(g.size()) +
                         ", accumulator length " + std::to_string(slot.size()));
  }
  slot += g.cwiseAbs2();
  ++acc.updates[task];
}

double estimate_excess_fisher(const DenseVector& g, const DenseVector& acc, double eps) {
  if (g.size() != acc.size()) {
    throw DimensionError("estimate_excess_fisher: gradient length " + std::to_string(g.size()) +
                         ", accumulator length " + std::to_string(acc.size()));
  }
  return (g.array().square() / (acc.array().sqrt() + eps)).sum();
}

namespace {

void check_payoff(const DenseVector& alpha, const DenseVector& payoff) {
  if (alpha.size() != payoff.size()) {
    throw DimensionError("weight update: " + std::to_string(payoff.size()) + " payoffs for " +
                         std::to_string(alpha.size()) + " tasks");
  }
  if (!payoff.allFinite()) throw NumericError("weight update: non-finite payoff");
}

}  // namespace

WeightState update_weights_multiplicative(WeightState w, const DenseVector& payoff,
                                          double eta_scale) {
  check_payoff(w.alpha, payoff);
  // Work in log space and subtract the max so exp never overflows.
  DenseVector logits = w.alpha.array().log() + (w.eta_alpha * eta_scale) * payoff.array();
  logits.array() -= logits.maxCoeff();
  DenseVector next = logits.array().exp();
  next /= next.sum();
  // Underflow is the only way a weight can reach zero; keep it on the open
  // simplex at the smallest normal double.
  next = next.cwiseMax(std::numeric_limits<double>::min());
  next /= next.sum();
  w.alpha = std::move(next);
  ++w.step;
  return w;
}

DenseVector scale_process(const DenseVector& raw, ExcessEstimate& est, bool warmup_active) {
  if (est.initial.size() != raw.size()) {
    throw DimensionError("scale_process: " + std::to_string(raw.size()) + " estimates for " +
                         std::to_string(est.initial.size()) + " tasks");
  }
  est.raw = raw;
  if (warmup_active) {
    ++est.baseline_samples;
    est.initial += (raw - est.initial) / static_cast<double>(est.baseline_samples);
    est.relative.setZero();
    return DenseVector::Zero(raw.size());
  }
  if (est.baseline_samples == 0) {
    est.initial = raw;
    est.baseline_samples = 1;
  }
  for (Index i = 0; i < raw.size(); ++i) {
    if (!(est.initial[i] > 0.0)) {
      throw ConfigError("task " + std::to_string(i) +
                        " has a zero initial excess risk; relative scaling is undefined");
    }
  }
  est.relative = (raw.array() / est.initial.array()).cwiseMax(0.0).cwiseMin(1.0);
  return est.relative;
}

WeightState groupdro_update(WeightState w, const DenseVector& losses, double eta_scale) {
  return update_weights_multiplicative(std::move(w), losses, eta_scale);
}

namespace {

DenseVector uniform_weights(std::size_t m) {
  return DenseVector::Constant(static_cast<Index>(m), 1.0 / static_cast<double>(m));
}

constexpr double kMgdaGapTolerance = 1e-8;
constexpr int kMgdaMaxIterations = 250;

// Pairwise Frank-Wolfe on f(a) = a^T M a over the simplex, M the Gram matrix.
DenseVector min_norm_frank_wolfe(const DenseMatrix& gram) {
  const Index m = gram.rows();
  DenseVector alpha = DenseVector::Constant(m, 1.0 / static_cast<double>(m));
  for (int it = 0; it < kMgdaMaxIterations; ++it) {
    const DenseVector m_alpha = gram * alpha;
    const double value = alpha.dot(m_alpha);
    Index toward = 0;
    m_alpha.minCoeff(&toward);
    // Duality gap of f, whose gradient is 2 M a.
    if (2.0 * (value - m_alpha[toward]) < kMgdaGapTolerance) break;
    Index away = -1;
    for (Index i = 0; i < m; ++i) {
      if (alpha[i] > 0.0 && (away < 0 || m_alpha[i] > m_alpha[away])) away = i;
    }
    if (away == toward) break;
    const double slope = m_alpha[toward] - m_alpha[away];
    const double curvature = gram(toward, toward) - 2.0 * gram(toward, away) + gram(away, away);
    double step = alpha[away];
    if (curvature > 0.0) step = std::clamp(-slope / curvature, 0.0, alpha[away]);
    if (step <= 0.0) break;
    alpha[toward] += step;
    alpha[away] -= step;
    if (alpha[away] < 0.0) alpha[away] = 0.0;
  }
  return alpha / alpha.sum();
}

}  // namespace

DenseVector mgda_weights(const std::vector<DenseVector>& grads) {
  const std::size_t m = grads.size();
  if (m < kMinTasks || m == 0) {
    throw ConfigError("mgda_weights needs at least " + std::to_string(kMinTasks) + " gradients");
  }
  for (const auto& g : grads) {
    if (g.size() != grads.front().size()) {
      throw DimensionError("mgda_weights: gradients have different lengths");
    }
  }
  if (m == 1) return DenseVector::Ones(1);
  DenseMatrix gram(static_cast<Index>(m), static_cast<Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      gram(static_cast<Index>(i), static_cast<Index>(j)) = gram(static_cast<Index>(j), static_cast<Index>(i)) =
          grads[i].dot(grads[j]);
    }
  }
  if (gram.diagonal().maxCoeff() == 0.0) return uniform_weights(m);

  if (m == 2) {
    const double denom = gram(0, 0) - 2.0 * gram(0, 1) + gram(1, 1);
    if (!(denom > 0.0)) return uniform_weights(m);
    const double gamma = std::clamp((gram(1, 1) - gram(0, 1)) / denom, 0.0, 1.0);
    DenseVector alpha(2);
    alpha << gamma, 1.0 - gamma;
    return alpha;
  }
  return min_norm_frank_wolfe(gram);
}

WeightingState::WeightingState(Strategy strategy, std::size_t num_tasks, Index shared_dim,
                               double eta_alpha, bool relative_excess)
    : strategy(strategy),
      weights(WeightState::uniform(num_tasks, eta_alpha)),
      fisher(num_tasks, shared_dim),
      excess(num_tasks),
      relative_excess(relative_excess) {}

StepDiagnostics strategy_step(WeightingState& state, const StepObservations& obs) {
  const std::size_t m = static_cast<std::size_t>(state.weights.alpha.size());
  const bool have_grads = !obs.shared_grads.empty();
  const bool have_losses = !obs.losses.empty();
  if (have_grads && obs.shared_grads.size() != m) {
    throw ConfigError("observations carry " + std::to_string(obs.shared_grads.size()) +
                      " gradients for " + std::to_string(m) + " tasks");
  }
  if (have_losses && obs.losses.size() != m) {
    throw ConfigError("observations carry " + std::to_string(obs.losses.size()) +
                      " losses for " + std::to_string(m) + " tasks");
  }
  const bool needs_grads = state.strategy == Strategy::ExcessMTL || state.strategy == Strategy::MGDA;
  if (needs_grads && !have_grads) {
    throw ConfigError(to_string(state.strategy) + " needs shared gradients in its observations");
  }
  if (state.strategy == Strategy::GroupDRO && !have_losses) {
    throw ConfigError("groupdro needs per-task losses in its observations");
  }

  StepDiagnostics diag;
  if (have_grads) {
    // Accumulate first, then estimate: the estimate at step t sees sum_{tau<=t}.
    DenseVector raw(static_cast<Index>(m));
    diag.fisher_updates_seen.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      accumulate_fisher(state.fisher, i, obs.shared_grads[i]);
      diag.fisher_updates_seen[i] = state.fisher.updates[i];
      raw[static_cast<Index>(i)] = estimate_excess_fisher(obs.shared_grads[i], state.fisher.per_task[i]);
    }
    ++state.fisher.steps;
    if (state.strategy == Strategy::ExcessMTL && state.relative_excess) {
      scale_process(raw, state.excess, obs.warmup_active);
    } else {
      // Diagnostics only: a degenerate baseline leaves the relative form at zero.
      try {
        scale_process(raw, state.excess, obs.warmup_active);
      } catch (const ConfigError&) {
        state.excess.relative.setZero();
      }
    }
  }

  switch (state.strategy) {
    case Strategy::ExcessMTL:
      if (obs.warmup_active) {
        ++state.weights.step;
      } else {
        const DenseVector& payoff = state.relative_excess ? state.excess.relative : state.excess.raw;
        state.weights = update_weights_multiplicative(std::move(state.weights), payoff, obs.eta_scale);
      }
      break;
    case Strategy::Uniform:
      state.weights.alpha = uniform_weights(m);
      ++state.weights.step;
      break;
    case Strategy::GroupDRO: {
      const DenseVector losses = Eigen::Map<const DenseVector>(obs.losses.data(), static_cast<Index>(m));
      state.weights = groupdro_update(std::move(state.weights), losses, obs.eta_scale);
      break;
    }
    case Strategy::MGDA:
      state.weights.alpha = mgda_weights(obs.shared_grads);
      ++state.weights.step;
      break;
  }

  diag.step = state.weights.step;
  diag.alpha = state.weights.alpha;
  if (have_grads) {
    diag.raw_excess = state.excess.raw;
    diag.relative_excess = state.excess.relative;
  }
  return diag;
}

std::string to_json_line(const StepDiagnostics& diag) {
  auto as_array = [](const DenseVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["step"] = diag.step;
  j["alpha"] = as_array(diag.alpha);
  j["raw_excess"] = as_array(diag.raw_excess);
  j["relative_excess"] = as_array(diag.relative_excess);
  return j.dump();
}

}  // namespace excessmtl

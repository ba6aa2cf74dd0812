#include "excessmtl/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace excessmtl {

void TrainConfig::validate() const {
  if (!(eta_theta > 0.0)) throw ConfigError("train.eta_theta must be > 0");
  if (!(eta_alpha > 0.0)) throw ConfigError("train.eta_alpha must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (epochs > 0 && warmup_epochs >= epochs) {
    throw ConfigError("train.warmup_epochs must be smaller than train.epochs");
  }
}

double stationarity_gap(const std::vector<DenseVector>& grads, const DenseVector& alpha) {
  if (grads.size() != static_cast<std::size_t>(alpha.size())) {
    throw DimensionError("stationarity_gap: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(alpha.size()) + " weights");
  }
  if (grads.empty()) return 0.0;
  DenseVector combined = DenseVector::Zero(grads.front().size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != combined.size()) {
      throw DimensionError("stationarity_gap: gradients have different lengths");
    }
    combined += alpha[static_cast<Index>(i)] * grads[i];
  }
  return combined.squaredNorm();
}

namespace {

std::vector<double> to_std(const DenseVector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

MetricsRecord algorithm_step(ParamPartition& params, WeightingState& weighting,
                             const TaskGradientFn& task_gradient, const TrainConfig& cfg,
                             bool warmup_active) {
  const std::size_t m = params.num_tasks();
  const std::size_t t = weighting.weights.step + 1;
  const double scale = cfg.eta_decay ? 1.0 / std::sqrt(static_cast<double>(t)) : 1.0;
  const double eta = cfg.eta_theta * scale;

  StepObservations obs;
  obs.warmup_active = warmup_active;
  obs.eta_scale = scale;
  obs.losses.resize(m);
  obs.shared_grads.reserve(m);

  for (std::size_t i = 0; i < m; ++i) {
    GradientBundle g = task_gradient(params, i);
    if (cfg.weight_decay > 0.0) {
      g.shared_grad += cfg.weight_decay * params.shared();
      g.head_grad += cfg.weight_decay * params.task(i);
    }
    if (!g.shared_grad.allFinite() || !g.head_grad.allFinite() || !std::isfinite(g.loss_value)) {
      throw DivergenceError("non-finite gradient for task " + std::to_string(i) + " at step " +
                            std::to_string(t));
    }
    params.task(i) -= eta * g.head_grad;
    obs.losses[i] = g.loss_value;
    obs.shared_grads.push_back(std::move(g.shared_grad));
  }

  const StepDiagnostics diag = strategy_step(weighting, obs);

  DenseVector direction = DenseVector::Zero(params.shared().size());
  for (std::size_t i = 0; i < m; ++i) direction += diag.alpha[static_cast<Index>(i)] * obs.shared_grads[i];
  params.shared() -= eta * direction;

  MetricsRecord record;
  record.step = t;
  record.per_task_train_loss = obs.losses;
  record.alpha = to_std(diag.alpha);
  record.raw_excess = to_std(diag.raw_excess);
  record.relative_excess = to_std(diag.relative_excess);
  record.stationarity_gap = direction.squaredNorm();
  return record;
}

MetricsRecord train_step(ParamPartition& params, WeightingState& weighting, const ModelSpec& spec,
                         const std::vector<Batch>& batches, const TrainConfig& cfg,
                         bool warmup_active) {
  if (batches.size() != params.num_tasks()) {
    throw InputError("train_step needs one batch per task");
  }
  return algorithm_step(
      params, weighting,
      [&](const ParamPartition& p, std::size_t task) {
        return loss_and_grad(p, spec, batches[task].x, batches[task].y, task);
      },
      cfg, warmup_active);
}

namespace {

// Endless stream of row indices for one task, reshuffled at every pass.
class RowStream {
 public:
  RowStream(Index rows, std::uint64_t seed, std::size_t task)
      : order_(static_cast<std::size_t>(rows)) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(task)};
    rng_.seed(seq);
    std::iota(order_.begin(), order_.end(), Index{0});
    reshuffle();
  }

  std::vector<Index> take(std::size_t count) {
    std::vector<Index> rows;
    rows.reserve(count);
    while (rows.size() < count) {
      if (cursor_ == order_.size()) reshuffle();
      rows.push_back(order_[cursor_++]);
    }
    return rows;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<Index> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

Batch gather(const TaskDataset& ds, const std::vector<Index>& rows) {
  Batch b;
  b.x.resize(static_cast<Index>(rows.size()), ds.x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) b.x.row(static_cast<Index>(k)) = ds.x.row(rows[k]);
  if (const auto* labels = std::get_if<Labels>(&ds.y)) {
    Labels out(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) out[k] = (*labels)[static_cast<std::size_t>(rows[k])];
    b.y = std::move(out);
  } else {
    const auto& values = std::get<DenseMatrix>(ds.y);
    DenseMatrix out(static_cast<Index>(rows.size()), values.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = values.row(rows[k]);
    b.y = std::move(out);
  }
  return b;
}

}  // namespace

FitResult fit(const std::vector<TaskSplits>& data, const ModelSpec& spec, const TrainConfig& cfg,
              const std::function<void(const MetricsRecord&)>& on_record) {
  spec.validate();
  cfg.validate();
  if (data.size() != spec.num_tasks()) {
    throw ConfigError("model has " + std::to_string(spec.num_tasks()) + " heads but data has " +
                      std::to_string(data.size()) + " tasks");
  }
  const std::size_t m = data.size();
  Index longest = 0;
  for (const auto& task : data) {
    if (task.train.rows() == 0) throw InputError("empty training split");
    longest = std::max(longest, task.train.rows());
  }

  ParamPartition params = make_parameters(spec);
  init_parameters(params, spec, cfg.seed);
  const Index shared_dim = params.shared().size();
  FitResult result{std::move(params),
                   WeightingState(cfg.strategy, m, shared_dim, cfg.eta_alpha, cfg.relative_excess),
                   {}};

  std::vector<RowStream> streams;
  for (std::size_t i = 0; i < m; ++i) streams.emplace_back(data[i].train.rows(), cfg.seed, i);

  const auto batch = static_cast<Index>(cfg.batch_size);
  const Index steps_per_epoch = (longest + batch - 1) / batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool warmup = epoch < cfg.warmup_epochs;
    for (Index s = 0; s < steps_per_epoch; ++s) {
      const auto count = static_cast<std::size_t>(std::min(batch, longest - s * batch));
      std::vector<Batch> batches;
      for (std::size_t i = 0; i < m; ++i) batches.push_back(gather(data[i].train, streams[i].take(count)));
      MetricsRecord record = train_step(result.params, result.weighting, spec, batches, cfg, warmup);
      record.epoch = epoch;
      if (s + 1 == steps_per_epoch) {
        for (std::size_t i = 0; i < m; ++i) {
          record.per_task_test_metric.push_back(
              evaluate_metric(result.params, spec, data[i].test.x, data[i].test.y, i));
        }
      }
      if (on_record) on_record(record);
      result.metrics.push_back(std::move(record));
    }
  }
  return result;
}

std::string format_double(double value) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return {buf, res.ptr};
}

void write_metrics_csv_header(std::ostream& out, std::size_t num_tasks) {
  out << "step";
  for (std::size_t i = 0; i < num_tasks; ++i) {
    out << ",task" << i << "_train_loss,task" << i << "_test_metric,task" << i << "_raw_excess,task"
        << i << "_relative_excess";
  }
  for (std::size_t i = 0; i < num_tasks; ++i) out << ",alpha" << i;
  out << ",stationarity_gap\n";
}

void write_metrics_csv_row(std::ostream& out, const MetricsRecord& r) {
  const auto cell = [](const std::vector<double>& v, std::size_t i) {
    return i < v.size() ? format_double(v[i]) : std::string{};
  };
  out << r.step;
  for (std::size_t i = 0; i < r.alpha.size(); ++i) {
    out << ',' << cell(r.per_task_train_loss, i) << ',' << cell(r.per_task_test_metric, i) << ','
        << cell(r.raw_excess, i) << ',' << cell(r.relative_excess, i);
  }
  for (double a : r.alpha) out << ',' << format_double(a);
  out << ',' << format_double(r.stationarity_gap) << '\n';
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["per_task_train_loss"] = r.per_task_train_loss;
  j["per_task_test_metric"] = r.per_task_test_metric;
  j["alpha"] = r.alpha;
  j["raw_excess"] = r.raw_excess;
  j["relative_excess"] = r.relative_excess;
  j["stationarity_gap"] = r.stationarity_gap;
  return j.dump();
}

}  // namespace excessmtl

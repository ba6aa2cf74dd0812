#include <cmath>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "excessmtl/trainer.hpp"
#include "linear_tasks.hpp"

using namespace excessmtl;
using testing::LinearTask;

namespace {

DenseVector vec(std::initializer_list<double> v) {
  DenseVector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

TaskGradientFn full_batch(const std::vector<LinearTask>& tasks) {
  return [&tasks](const ParamPartition& p, std::size_t i) {
    return testing::linear_gradient(p, i, tasks[i]);
  };
}

TrainConfig config(Strategy s, double eta_theta, double eta_alpha) {
  TrainConfig cfg;
  cfg.strategy = s;
  cfg.eta_theta = eta_theta;
  cfg.eta_alpha = eta_alpha;
  return cfg;
}

std::vector<TaskSplits> small_classification(std::uint64_t seed) {
  auto data = gen_synthetic_classification(2, 3, 8, 200, 4.0, seed);
  for (auto& t : data) {
    auto [train, stats] = standardize(t.train);
    t.train = std::move(train);
    t.test = standardize(t.test, stats).first;
  }
  return data;
}

ModelSpec classification_spec() {
  ModelSpec spec;
  spec.input_dim = 8;
  spec.trunk_layers = {6};
  spec.task_heads = {{3, LossKind::SoftmaxCrossEntropy}, {3, LossKind::SoftmaxCrossEntropy}};
  return spec;
}

}  // namespace

TEST_CASE("stationarity_gap") {
  CHECK(stationarity_gap({vec({1, -2}), vec({-1, 2})}, vec({0.5, 0.5})) == 0.0);
  CHECK(stationarity_gap({vec({1, 2}), vec({1, 2})}, vec({0.3, 0.7})) == doctest::Approx(5.0));
  CHECK(stationarity_gap({vec({1, 0}), vec({0, 1})}, vec({0.5, 0.5})) == 0.5);
  CHECK_THROWS_AS(stationarity_gap({vec({1, 0})}, vec({0.5, 0.5})), DimensionError);
  CHECK_THROWS_AS(stationarity_gap({vec({1, 0}), vec({1})}, vec({0.5, 0.5})), DimensionError);
}

TEST_CASE("train config validation") {
  auto cfg = config(Strategy::Uniform, 0.1, 0.1);
  cfg.epochs = 5;
  CHECK_NOTHROW(cfg.validate());
  cfg.warmup_epochs = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.warmup_epochs = 0;
  cfg.eta_theta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.eta_theta = 0.1;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.batch_size = 4;
  cfg.weight_decay = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("uniform strategy moves the trunk along the mean gradient") {
  const auto tasks = testing::make_linear_tasks(2, 50, 3, 0.1, false, 7);
  auto params = testing::linear_partition(2, 3);
  params.shared() = vec({0.2, -0.1, 0.4});
  const auto g1 = testing::linear_gradient(params, 0, tasks[0]);
  const auto g2 = testing::linear_gradient(params, 1, tasks[1]);
  const DenseVector before = params.shared();
  WeightingState ws(Strategy::Uniform, 2, 3, 0.1);
  const auto cfg = config(Strategy::Uniform, 0.05, 0.1);
  const auto rec = algorithm_step(params, ws, full_batch(tasks), cfg, false);
  const DenseVector expected = before - 0.05 * 0.5 * (g1.shared_grad + g2.shared_grad);
  CHECK((params.shared() - expected).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(params.task(0)[0] == doctest::Approx(-0.05 * g1.head_grad[0]));
  CHECK(rec.alpha == std::vector<double>{0.5, 0.5});
  CHECK(rec.stationarity_gap ==
        doctest::Approx(stationarity_gap({g1.shared_grad, g2.shared_grad}, vec({0.5, 0.5}))));
  CHECK(rec.per_task_train_loss[1] == g2.loss_value);
}

TEST_CASE("Fisher accumulation precedes each excess estimate") {
  const auto tasks = testing::make_linear_tasks(2, 40, 4, 0.3, false, 3);
  auto params = testing::linear_partition(2, 4);
  WeightingState ws(Strategy::ExcessMTL, 2, 4, 0.5);
  const auto cfg = config(Strategy::ExcessMTL, 0.01, 0.5);
  const DenseVector g0 = testing::linear_gradient(params, 0, tasks[0]).shared_grad;
  const DenseVector g1 = testing::linear_gradient(params, 1, tasks[1]).shared_grad;
  for (std::size_t t = 1; t <= 20; ++t) {
    const auto rec = algorithm_step(params, ws, full_batch(tasks), cfg, t <= 5);
    CHECK(rec.step == t);
    CHECK(ws.fisher.updates == std::vector<std::size_t>{t, t});
    if (t == 1) {
      // Only possible if this step's square was already accumulated.
      CHECK(rec.raw_excess[0] == doctest::Approx(g0.lpNorm<1>()).epsilon(1e-12));
      CHECK(rec.raw_excess[1] == doctest::Approx(g1.lpNorm<1>()).epsilon(1e-12));
    }
  }
}

TEST_CASE("weight decay and step decay") {
  const TaskGradientFn zero = [](const ParamPartition& p, std::size_t i) {
    return GradientBundle{i, DenseVector::Zero(p.shared().size()), DenseVector::Zero(1), 0.0};
  };
  auto params = testing::linear_partition(2, 2);
  params.shared() = vec({1, -2});
  params.task(1)[0] = 4.0;
  WeightingState ws(Strategy::Uniform, 2, 2, 0.1);
  auto cfg = config(Strategy::Uniform, 0.1, 0.1);
  cfg.weight_decay = 0.5;
  algorithm_step(params, ws, zero, cfg, false);
  CHECK(params.shared()[1] == doctest::Approx(-2.0 * 0.95));
  CHECK(params.task(1)[0] == doctest::Approx(4.0 * 0.95));

  const TaskGradientFn constant = [](const ParamPartition& p, std::size_t i) {
    return GradientBundle{i, DenseVector::Ones(p.shared().size()), DenseVector::Zero(1), 1.0};
  };
  auto decayed = testing::linear_partition(2, 2);
  WeightingState wd(Strategy::Uniform, 2, 2, 0.1);
  auto dcfg = config(Strategy::Uniform, 0.2, 0.1);
  dcfg.eta_decay = true;
  double expected = 0.0;
  for (int t = 1; t <= 4; ++t) {
    algorithm_step(decayed, wd, constant, dcfg, false);
    expected -= 0.2 / std::sqrt(static_cast<double>(t));
    CHECK(decayed.shared()[0] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("non-finite gradients abort naming the task and step") {
  const auto tasks = testing::make_linear_tasks(2, 20, 2, 0.1, true, 1);
  auto params = testing::linear_partition(2, 2);
  WeightingState ws(Strategy::ExcessMTL, 2, 2, 0.1);
  int calls = 0;
  const TaskGradientFn poisoned = [&](const ParamPartition& p, std::size_t i) {
    auto g = testing::linear_gradient(p, i, tasks[i]);
    if (++calls == 6) g.shared_grad[0] = std::nan("");
    return g;
  };
  const auto cfg = config(Strategy::ExcessMTL, 0.01, 0.1);
  algorithm_step(params, ws, poisoned, cfg, true);
  algorithm_step(params, ws, poisoned, cfg, true);
  try {
    algorithm_step(params, ws, poisoned, cfg, true);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("task 1") != std::string::npos);
    CHECK(msg.find("step 3") != std::string::npos);
  }
}

TEST_CASE("uniform weighting descends on convex quadratics") {
  const auto tasks = testing::make_linear_tasks(2, 80, 4, 0.5, false, 12);
  const double eta = 0.5 / testing::linear_lambda_max(tasks);
  auto params = testing::linear_partition(2, 4);
  WeightingState ws(Strategy::Uniform, 2, 4, 0.1);
  const auto cfg = config(Strategy::Uniform, eta, 0.1);
  double previous = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 500; ++t) {
    const auto rec = algorithm_step(params, ws, full_batch(tasks), cfg, false);
    const double weighted = 0.5 * (rec.per_task_train_loss[0] + rec.per_task_train_loss[1]);
    CHECK(weighted <= previous * (1 + 1e-14));
    previous = weighted;
  }
}

TEST_CASE("convex convergence to the per-task optima") {
  const auto tasks = testing::make_linear_tasks(2, 400, 4, 0.05, true, 31);
  const double eta = 0.5 / testing::linear_lambda_max(tasks);
  auto params = testing::linear_partition(2, 4);
  WeightingState ws(Strategy::ExcessMTL, 2, 4, 0.1);
  const auto cfg = config(Strategy::ExcessMTL, eta, 0.1);
  MetricsRecord last;
  for (int t = 0; t < 2000; ++t) last = algorithm_step(params, ws, full_batch(tasks), cfg, t < 20);
  double weighted_excess = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double excess = testing::linear_loss(params, i, tasks[i]) - testing::linear_optimum(tasks[i]);
    CHECK(excess >= -1e-12);
    weighted_excess += ws.weights.alpha[static_cast<Index>(i)] * excess;
  }
  CHECK(weighted_excess < 1e-3);
  CHECK(std::abs(ws.weights.alpha.sum() - 1.0) < 1e-12);
}

TEST_CASE("identical tasks keep equal weights") {
  ModelSpec spec = classification_spec();
  auto params = make_parameters(spec);
  init_parameters(params, spec, 4);
  params.task(1) = params.task(0);
  const auto data = small_classification(8);
  WeightingState ws(Strategy::ExcessMTL, 2, params.shared().size(), 0.5);
  const auto cfg = config(Strategy::ExcessMTL, 0.05, 0.5);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<Index> row(0, data[0].train.rows() - 1);
  const auto& labels = std::get<Labels>(data[0].train.y);
  for (int t = 0; t < 100; ++t) {
    Batch b{DenseMatrix(8, 8), Labels(8)};
    for (Index k = 0; k < 8; ++k) {
      const Index r = row(rng);
      b.x.row(k) = data[0].train.x.row(r);
      std::get<Labels>(b.y)[static_cast<std::size_t>(k)] = labels[static_cast<std::size_t>(r)];
    }
    const auto rec = train_step(params, ws, spec, {b, b}, cfg, t < 10);
    CHECK(std::abs(rec.alpha[0] - rec.alpha[1]) < 1e-9);
  }
}

TEST_CASE("fit") {
  const auto data = small_classification(3);
  const ModelSpec spec = classification_spec();
  TrainConfig cfg = config(Strategy::ExcessMTL, 0.05, 0.5);
  cfg.batch_size = 32;
  cfg.seed = 17;

  SUBCASE("zero epochs returns the initialization") {
    cfg.epochs = 0;
    const auto res = fit(data, spec, cfg);
    auto init = make_parameters(spec);
    init_parameters(init, spec, 17);
    CHECK(res.metrics.empty());
    CHECK(res.params.shared() == init.shared());
    CHECK(res.params.task(1) == init.task(1));
  }
  SUBCASE("warm-up keeps weights uniform, then they move") {
    cfg.epochs = 6;
    cfg.warmup_epochs = 2;
    std::size_t streamed = 0;
    const auto res = fit(data, spec, cfg, [&](const MetricsRecord&) { ++streamed; });
    // 160 train rows per task in batches of 32.
    REQUIRE(res.metrics.size() == 30);
    CHECK(streamed == 30);
    bool moved = false;
    for (const auto& r : res.metrics) {
      if (r.epoch < 2) {
        CHECK(r.alpha == std::vector<double>{0.5, 0.5});
      } else {
        moved |= r.alpha[0] != 0.5;
      }
      CHECK(std::abs(r.alpha[0] + r.alpha[1] - 1.0) < 1e-12);
      CHECK(r.stationarity_gap >= 0.0);
      CHECK(r.per_task_test_metric.size() == (r.step % 5 == 0 ? 2u : 0u));
    }
    CHECK(moved);
    CHECK(res.metrics.back().per_task_test_metric[0] > 0.5);
  }
  SUBCASE("same seed, same stream") {
    cfg.epochs = 4;
    cfg.warmup_epochs = 1;
    for (auto s : {Strategy::ExcessMTL, Strategy::GroupDRO, Strategy::MGDA, Strategy::Uniform}) {
      cfg.strategy = s;
      const auto a = fit(data, spec, cfg);
      const auto b = fit(data, spec, cfg);
      REQUIRE(a.metrics.size() == b.metrics.size());
      for (std::size_t k = 0; k < a.metrics.size(); ++k) {
        CHECK(to_json_line(a.metrics[k]) == to_json_line(b.metrics[k]));
      }
      CHECK(a.params.shared() == b.params.shared());
    }
    cfg.strategy = Strategy::ExcessMTL;
    auto other = cfg;
    other.seed = 18;
    CHECK(to_json_line(fit(data, spec, cfg).metrics.back()) !=
          to_json_line(fit(data, spec, other).metrics.back()));
  }
  SUBCASE("shorter tasks recycle rows") {
    auto uneven = data;
    uneven[1].train.x.conservativeResize(50, Eigen::NoChange);
    auto& y = std::get<Labels>(uneven[1].train.y);
    y.resize(50);
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    CHECK(fit(uneven, spec, cfg).metrics.size() == 10);
  }
  SUBCASE("mismatched inputs") {
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    CHECK_THROWS_AS(fit({data[0]}, spec, cfg), ConfigError);
    auto empty = data;
    empty[0].train.x.resize(0, 8);
    std::get<Labels>(empty[0].train.y).clear();
    CHECK_THROWS_AS(fit(empty, spec, cfg), InputError);
  }
}

TEST_CASE("metrics serialization") {
  MetricsRecord r;
  r.step = 3;
  r.epoch = 1;
  r.per_task_train_loss = {0.5, 0.25};
  r.alpha = {0.75, 0.25};
  r.raw_excess = {1, 2};
  r.relative_excess = {0.5, 1};
  r.stationarity_gap = 0.1;
  std::ostringstream csv;
  write_metrics_csv_header(csv, 2);
  write_metrics_csv_row(csv, r);
  CHECK(csv.str() ==
        "step,task0_train_loss,task0_test_metric,task0_raw_excess,task0_relative_excess,"
        "task1_train_loss,task1_test_metric,task1_raw_excess,task1_relative_excess,alpha0,alpha1,"
        "stationarity_gap\n"
        "3,0.5,,1,0.5,0.25,,2,1,0.75,0.25,0.1\n");
  const auto j = nlohmann::json::parse(to_json_line(r));
  CHECK(j["epoch"] == 1);
  CHECK(j["per_task_test_metric"].empty());
  CHECK(format_double(0.1) == "0.1");
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
}

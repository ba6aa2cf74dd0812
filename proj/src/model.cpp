#include "excessmtl/model.hpp"

#include <cmath>
#include <random>

namespace excessmtl {

std::string to_string(LossKind kind) {
  return kind == LossKind::SoftmaxCrossEntropy ? "softmax_cross_entropy" : "squared_error";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "softmax_cross_entropy") return LossKind::SoftmaxCrossEntropy;
  if (name == "squared_error") return LossKind::SquaredError;
  throw ConfigError("unknown loss kind '" + name + "'");
}

void ModelSpec::validate() const {
  if (input_dim < 1) throw ConfigError("model.input_dim must be >= 1");
  if (trunk_layers.empty()) throw ConfigError("model needs at least one trunk layer");
  for (auto w : trunk_layers) {
    if (w < 1) throw ConfigError("trunk layer widths must be >= 1");
  }
  if (task_heads.size() < kMinTasks) {
    throw ConfigError("model needs at least " + std::to_string(kMinTasks) + " task heads");
  }
  for (const auto& h : task_heads) {
    if (h.output_dim < 1) throw ConfigError("task head output_dim must be >= 1");
    if (h.loss == LossKind::SoftmaxCrossEntropy && h.output_dim < 2) {
      throw ConfigError("softmax cross-entropy head needs output_dim >= 2");
    }
  }
}

Index target_rows(const Targets& y) {
  return std::visit(
      [](const auto& t) -> Index {
        if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Labels>) {
          return static_cast<Index>(t.size());
        } else {
          return t.rows();
        }
      },
      y);
}

std::string trunk_weight_name(std::size_t layer) { return "trunk." + std::to_string(layer) + ".weight"; }
std::string trunk_bias_name(std::size_t layer) { return "trunk." + std::to_string(layer) + ".bias"; }
std::string head_weight_name(std::size_t task) { return "head." + std::to_string(task) + ".weight"; }
std::string head_bias_name(std::size_t task) { return "head." + std::to_string(task) + ".bias"; }

ParamPartition make_parameters(const ModelSpec& spec) {
  spec.validate();
  ParamPartition params(spec.num_tasks());
  Index fan_in = spec.input_dim;
  for (std::size_t l = 0; l < spec.trunk_layers.size(); ++l) {
    params.add_shared(trunk_weight_name(l), spec.trunk_layers[l], fan_in);
    params.add_shared(trunk_bias_name(l), 1, spec.trunk_layers[l]);
    fan_in = spec.trunk_layers[l];
  }
  for (std::size_t t = 0; t < spec.num_tasks(); ++t) {
    params.add_task(t, head_weight_name(t), spec.task_heads[t].output_dim, fan_in);
    params.add_task(t, head_bias_name(t), 1, spec.task_heads[t].output_dim);
  }
  return params;
}

void init_parameters(ParamPartition& params, const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](const std::string& weight, const std::string& bias) {
    auto w = params.view_as_matrix(weight);
    const double scale = std::sqrt(2.0 / static_cast<double>(w.cols()));
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = scale * normal(rng);
    params.view_as_matrix(bias).setZero();
  };
  for (std::size_t l = 0; l < spec.trunk_layers.size(); ++l) {
    fill(trunk_weight_name(l), trunk_bias_name(l));
  }
  for (std::size_t t = 0; t < spec.num_tasks(); ++t) fill(head_weight_name(t), head_bias_name(t));
}

namespace {

void check_task(const ModelSpec& spec, std::size_t task) {
  if (task >= spec.num_tasks()) {
    throw LookupError("task index " + std::to_string(task) + " out of range");
  }
}

void check_input(const ModelSpec& spec, const DenseMatrix& x) {
  if (x.cols() != spec.input_dim) {
    throw DimensionError("input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(spec.input_dim));
  }
}

// Pre-activations and activations of every trunk layer; acts[0] is the input.
struct TrunkPass {
  std::vector<DenseMatrix> pre;
  std::vector<DenseMatrix> acts;
};

TrunkPass run_trunk(const ParamPartition& params, const ModelSpec& spec, const DenseMatrix& x) {
  TrunkPass pass;
  pass.acts.push_back(x);
  for (std::size_t l = 0; l < spec.trunk_layers.size(); ++l) {
    const auto w = params.view_as_matrix(trunk_weight_name(l));
    const auto b = params.view_as_matrix(trunk_bias_name(l));
    DenseMatrix z = pass.acts.back() * w.transpose();
    z.rowwise() += b.row(0);
    pass.acts.push_back(z.cwiseMax(0.0));
    pass.pre.push_back(std::move(z));
  }
  return pass;
}

DenseMatrix apply_head(const ParamPartition& params, std::size_t task, const DenseMatrix& h) {
  const auto w = params.view_as_matrix(head_weight_name(task));
  const auto b = params.view_as_matrix(head_bias_name(task));
  DenseMatrix out = h * w.transpose();
  out.rowwise() += b.row(0);
  return out;
}

void check_targets(const TaskHead& head, const Targets& y, Index rows) {
  if (target_rows(y) != rows) {
    throw DimensionError("target rows " + std::to_string(target_rows(y)) +
                         " do not match input rows " + std::to_string(rows));
  }
  if (head.loss == LossKind::SoftmaxCrossEntropy) {
    const auto* labels = std::get_if<Labels>(&y);
    if (labels == nullptr) throw TargetError("classification head needs integer labels");
    for (int c : *labels) {
      if (c < 0 || c >= head.output_dim) {
        throw TargetError("class label " + std::to_string(c) + " outside [0, " +
                          std::to_string(head.output_dim) + ")");
      }
    }
  } else {
    const auto* values = std::get_if<DenseMatrix>(&y);
    if (values == nullptr) throw TargetError("regression head needs real-valued targets");
    if (values->cols() != head.output_dim) {
      throw TargetError("regression targets have " + std::to_string(values->cols()) +
                        " columns, head has " + std::to_string(head.output_dim));
    }
  }
}

// Returns the batch-mean loss and writes d(loss)/d(outputs) into `grad`.
double loss_with_output_grad(const TaskHead& head, const DenseMatrix& out, const Targets& y,
                             DenseMatrix& grad) {
  const auto n = static_cast<double>(out.rows());
  grad.resize(out.rows(), out.cols());
  double total = 0.0;
  if (head.loss == LossKind::SoftmaxCrossEntropy) {
    const auto& labels = std::get<Labels>(y);
    for (Index r = 0; r < out.rows(); ++r) {
      const double shift = out.row(r).maxCoeff();
      const auto e = (out.row(r).array() - shift).exp();
      const double sum = e.sum();
      const auto label = static_cast<Index>(labels[static_cast<std::size_t>(r)]);
      total += std::log(sum) + shift - out(r, label);
      grad.row(r) = e / sum;
      grad(r, label) -= 1.0;
    }
    grad /= n;
  } else {
    const auto& target = std::get<DenseMatrix>(y);
    const DenseMatrix diff = out - target;
    total = diff.squaredNorm();
    grad = (2.0 / n) * diff;
  }
  return total / n;
}

}  // namespace

DenseMatrix forward(const ParamPartition& params, const ModelSpec& spec, const DenseMatrix& x,
                    std::size_t task) {
  check_task(spec, task);
  check_input(spec, x);
  return apply_head(params, task, run_trunk(params, spec, x).acts.back());
}

GradientBundle loss_and_grad(const ParamPartition& params, const ModelSpec& spec,
                             const DenseMatrix& x, const Targets& y, std::size_t task) {
  check_task(spec, task);
  check_input(spec, x);
  if (x.rows() == 0) throw InputError("empty batch");
  const auto& head = spec.task_heads[task];
  check_targets(head, y, x.rows());

  const auto pass = run_trunk(params, spec, x);
  const DenseMatrix out = apply_head(params, task, pass.acts.back());

  GradientBundle bundle;
  bundle.task_id = task;
  DenseMatrix d_out;
  bundle.loss_value = loss_with_output_grad(head, out, y, d_out);

  bundle.head_grad = DenseVector::Zero(params.task(task).size());
  bundle.shared_grad = DenseVector::Zero(params.shared().size());
  auto grad_view = [&](DenseVector& flat, const std::string& name) {
    const auto& v = params.view(name);
    return MatrixMap<double>(flat.data() + v.offset, v.rows, v.cols);
  };

  grad_view(bundle.head_grad, head_weight_name(task)) = d_out.transpose() * pass.acts.back();
  grad_view(bundle.head_grad, head_bias_name(task)) = d_out.colwise().sum();

  // Backpropagate through the trunk; rectifier subgradient at 0 is 0.
  DenseMatrix d_act = d_out * params.view_as_matrix(head_weight_name(task));
  for (std::size_t l = spec.trunk_layers.size(); l-- > 0;) {
    const DenseMatrix d_pre = d_act.cwiseProduct((pass.pre[l].array() > 0.0).cast<double>().matrix());
    grad_view(bundle.shared_grad, trunk_weight_name(l)) = d_pre.transpose() * pass.acts[l];
    grad_view(bundle.shared_grad, trunk_bias_name(l)) = d_pre.colwise().sum();
    if (l > 0) d_act = d_pre * params.view_as_matrix(trunk_weight_name(l));
  }
  return bundle;
}

double evaluate_metric(const ParamPartition& params, const ModelSpec& spec, const DenseMatrix& x,
                       const Targets& y, std::size_t task) {
  check_task(spec, task);
  const auto& head = spec.task_heads[task];
  check_targets(head, y, x.rows());
  if (x.rows() == 0) throw InputError("empty evaluation set");
  const DenseMatrix out = forward(params, spec, x, task);
  if (head.loss == LossKind::SoftmaxCrossEntropy) {
    const auto& labels = std::get<Labels>(y);
    Index correct = 0;
    for (Index r = 0; r < out.rows(); ++r) {
      Index arg = 0;
      out.row(r).maxCoeff(&arg);
      if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(out.rows());
  }
  return (out - std::get<DenseMatrix>(y)).squaredNorm() / static_cast<double>(out.size());
}

bool pareto_dominates(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("pareto_dominates: profiles of length " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()));
  }
  bool strict = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) return false;
    if (a[i] < b[i]) strict = true;
  }
  return strict;
}

}  // namespace excessmtl

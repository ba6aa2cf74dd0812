#include "excessmtl/noise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace excessmtl {

std::string to_string(NoiseKind kind) {
  return kind == NoiseKind::SymmetricFlip ? "symmetric_flip" : "additive_gaussian";
}

NoiseKind noise_kind_from_string(const std::string& name) {
  if (name == "symmetric_flip") return NoiseKind::SymmetricFlip;
  if (name == "additive_gaussian") return NoiseKind::AdditiveGaussian;
  throw ConfigError("unknown noise kind '" + name + "'");
}

std::size_t noisy_row_count(std::size_t n, double level) {
  if (!(level >= 0.0 && level <= 1.0)) {
    throw ConfigError("noise level must lie in [0, 1], got " + std::to_string(level));
  }
  return static_cast<std::size_t>(std::llround(level * static_cast<double>(n)));
}

namespace {

std::vector<std::size_t> select_rows(std::size_t n, double level, std::mt19937_64& rng) {
  const std::size_t count = noisy_row_count(n, level);
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(count);
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

std::vector<std::size_t> select_noisy_rows(std::size_t n, double level, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return select_rows(n, level, rng);
}

Labels inject_symmetric_flip(const Labels& labels, std::size_t num_classes, double level,
                             std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("symmetric flip needs at least two classes");
  for (int c : labels) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw TargetError("label " + std::to_string(c) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
  std::mt19937_64 rng(seed);
  const auto rows = select_rows(labels.size(), level, rng);
  std::uniform_int_distribution<int> draw(0, static_cast<int>(num_classes) - 1);
  Labels out = labels;
  for (auto r : rows) out[r] = draw(rng);
  return out;
}

DenseMatrix inject_gaussian(const DenseMatrix& targets, double level, std::uint64_t seed) {
  if (targets.size() == 0) throw InputError("inject_gaussian: empty targets");
  std::mt19937_64 rng(seed);
  const auto rows = select_rows(static_cast<std::size_t>(targets.rows()), level, rng);
  DenseMatrix out = targets;
  if (rows.empty()) return out;
  if (targets.rows() < 2) throw ConfigError("inject_gaussian: variance needs at least two rows");

  const DenseVector mean = targets.colwise().mean();
  const DenseVector variance =
      (targets.rowwise() - mean.transpose()).colwise().squaredNorm() / static_cast<double>(targets.rows() - 1);
  for (Index c = 0; c < targets.cols(); ++c) {
    if (!(variance[c] > 0.0)) {
      throw ConfigError("inject_gaussian: target column " + std::to_string(c) +
                        " has zero variance");
    }
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto r : rows) {
    for (Index c = 0; c < targets.cols(); ++c) {
      out(static_cast<Index>(r), c) += std::sqrt(variance[c]) * normal(rng);
    }
  }
  return out;
}

void apply_noise(std::vector<TaskSplits>& tasks, const NoiseSpec& spec, std::size_t num_classes) {
  if (spec.task_id >= tasks.size()) {
    throw ConfigError("noise targets task " + std::to_string(spec.task_id) + " but only " +
                      std::to_string(tasks.size()) + " tasks exist");
  }
  auto& train = tasks[spec.task_id].train;
  if (spec.kind == NoiseKind::SymmetricFlip) {
    auto* labels = std::get_if<Labels>(&train.y);
    if (labels == nullptr) throw ConfigError("symmetric_flip noise needs a classification task");
    train.y = inject_symmetric_flip(*labels, num_classes, spec.level, spec.seed);
  } else {
    auto* values = std::get_if<DenseMatrix>(&train.y);
    if (values == nullptr) throw ConfigError("additive_gaussian noise needs a regression task");
    train.y = inject_gaussian(*values, spec.level, spec.seed);
  }
}

}  // namespace excessmtl

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "excessmtl/model.hpp"
#include "excessmtl/numcore.hpp"

namespace excessmtl {

enum class Split { Train, Test };

struct TaskDataset {
  DenseMatrix x;
  Targets y;
  Split split = Split::Train;

  Index rows() const { return x.rows(); }
  bool is_classification() const { return std::holds_alternative<Labels>(y); }
};

struct TaskSplits {
  TaskDataset train;
  TaskDataset test;
};

/// Rows assigned to the train split out of n (nearest integer to 0.8 n).
Index train_rows(Index n);

/// Shared Gaussian-cluster inputs with one independent labeling per task.
/// Each task owns `classes` orthonormal directions of a seeded random frame;
/// its class means sit on those directions, pairwise `separation` apart. A
/// row draws one label per task and adds the matching means to unit noise.
/// Requires dim >= num_tasks * classes.
std::vector<TaskSplits> gen_synthetic_classification(std::size_t num_tasks, std::size_t classes,
                                                     Index dim, Index n, double separation,
                                                     std::uint64_t seed);

/// y_t = w_t . x + b_t + noise over shared standard-normal inputs, with
/// w_t ~ weight_scale * N(0, I) and b_t ~ N(0, 1).
std::vector<TaskSplits> gen_synthetic_regression(std::size_t num_tasks, Index dim, Index n,
                                                 double noise_std, std::uint64_t seed,
                                                 double weight_scale = 1.0);

/// Unsigned-byte IDX tensor.
struct IdxTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

IdxTensor read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxTensor& tensor);

struct MultiMnistLayout {
  Index digit = 28;
  Index canvas = 36;
};

/// Overlays digit A at the top-left and a seeded partner digit B at the
/// bottom-right of each canvas, blending the overlap by pixelwise maximum.
/// Pixels are scaled to [0, 1]. Returns the (left, right) task datasets.
std::pair<TaskDataset, TaskDataset> compose_multimnist(const IdxTensor& images_a,
                                                       const IdxTensor& labels_a,
                                                       const IdxTensor& images_b,
                                                       const IdxTensor& labels_b,
                                                       std::uint64_t seed, Split split,
                                                       MultiMnistLayout layout = {});

struct Standardization {
  DenseVector mean;
  DenseVector stddev;
};

inline constexpr double kStdFloor = 1e-8;

/// (x - mean) / std per feature. Without `stats` the statistics come from
/// `ds` itself, which must then be a train split.
std::pair<TaskDataset, Standardization> standardize(
    const TaskDataset& ds, const std::optional<Standardization>& stats = std::nullopt);

/// FNV-1a digest of a dataset's features and targets.
std::uint64_t dataset_hash(const TaskDataset& ds);

}  // namespace excessmtl

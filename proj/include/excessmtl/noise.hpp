#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "excessmtl/data.hpp"

namespace excessmtl {

enum class NoiseKind { SymmetricFlip, AdditiveGaussian };

std::string to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(const std::string& name);

struct NoiseSpec {
  std::size_t task_id = 0;
  NoiseKind kind = NoiseKind::SymmetricFlip;
  /// Fraction of training rows corrupted.
  double level = 0.0;
  std::uint64_t seed = 0;
};

/// Number of rows a noise level corrupts: nearest integer to level * n.
std::size_t noisy_row_count(std::size_t n, double level);

/// Seeded uniform subset of noisy_row_count(n, level) distinct rows.
std::vector<std::size_t> select_noisy_rows(std::size_t n, double level, std::uint64_t seed);

/// Redraws the selected labels uniformly over all classes; a redraw may
/// return the original label.
Labels inject_symmetric_flip(const Labels& labels, std::size_t num_classes, double level,
                             std::uint64_t seed);

/// Adds N(0, v_c) to the selected rows, v_c the sample variance of column c.
DenseMatrix inject_gaussian(const DenseMatrix& targets, double level, std::uint64_t seed);

/// Applies `spec` to the train split of its task. Test splits are never
/// touched.
void apply_noise(std::vector<TaskSplits>& tasks, const NoiseSpec& spec,
                 std::size_t num_classes);

}  // namespace excessmtl

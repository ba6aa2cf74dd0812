#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "excessmtl/errors.hpp"

#ifndef EXCESSMTL_MIN_TASKS
#define EXCESSMTL_MIN_TASKS 2
#endif

namespace excessmtl {

using Index = Eigen::Index;

/// Smallest task count a parameter partition accepts. Test builds may lower
/// it to exercise single-task degenerations.
inline constexpr std::size_t kMinTasks = EXCESSMTL_MIN_TASKS;

// Row-major so a flat parameter slice maps onto a matrix without copies and
// serializes in reading order.
template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using MatrixMap = Eigen::Map<Matrix<Scalar>>;
template <class Scalar>
using ConstMatrixMap = Eigen::Map<const Matrix<Scalar>>;

using DenseMatrix = Matrix<double>;
using DenseVector = Vector<double>;

/// alpha * x + y.
template <class DerivedX, class DerivedY>
auto axpy(typename DerivedX::Scalar alpha, const Eigen::MatrixBase<DerivedX>& x,
          const Eigen::MatrixBase<DerivedY>& y) -> Vector<typename DerivedX::Scalar> {
  if (x.size() != y.size()) {
    throw DimensionError("axpy: length mismatch " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
  }
  return alpha * x.reshaped() + y.reshaped();
}

template <class DerivedM, class DerivedX>
auto matvec(const Eigen::MatrixBase<DerivedM>& m, const Eigen::MatrixBase<DerivedX>& x)
    -> Vector<typename DerivedM::Scalar> {
  if (m.cols() != x.size()) {
    throw DimensionError("matvec: matrix has " + std::to_string(m.cols()) +
                         " columns but vector has length " + std::to_string(x.size()));
  }
  return m * x.reshaped();
}

/// Named (offset, shape) slice of one flat parameter block. `task` is empty
/// for views into the shared block.
struct ParamView {
  std::string name;
  std::optional<std::size_t> task;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
};

/// Flat parameter storage split into a shared trunk block and one block per
/// task, with a layout of named views that tile each block exactly.
template <class Scalar>
class BasicParamPartition {
 public:
  using VectorType = Vector<Scalar>;

  explicit BasicParamPartition(std::size_t num_tasks) : per_task_(num_tasks) {
    if (num_tasks < kMinTasks) {
      throw ConfigError("parameter partition needs at least " + std::to_string(kMinTasks) +
                        " tasks, got " + std::to_string(num_tasks));
    }
  }

  std::size_t num_tasks() const { return per_task_.size(); }

  VectorType& shared() { return shared_; }
  const VectorType& shared() const { return shared_; }
  VectorType& task(std::size_t i) { return per_task_.at(i); }
  const VectorType& task(std::size_t i) const { return per_task_.at(i); }

  const std::vector<ParamView>& layout() const { return layout_; }

  /// Appends a zero-filled rows x cols view to the shared block.
  ParamView add_shared(std::string name, Index rows, Index cols) {
    return append(std::move(name), std::nullopt, rows, cols);
  }

  /// Appends a zero-filled rows x cols view to the block of `task`.
  ParamView add_task(std::size_t task, std::string name, Index rows, Index cols) {
    if (task >= per_task_.size()) {
      throw LookupError("task index " + std::to_string(task) + " out of range");
    }
    return append(std::move(name), task, rows, cols);
  }

  const ParamView& view(const std::string& name) const {
    for (const auto& v : layout_) {
      if (v.name == name) return v;
    }
    throw LookupError("no parameter view named '" + name + "'");
  }

  /// Read-write matrix handle over the named slice.
  MatrixMap<Scalar> view_as_matrix(const std::string& name) {
    const auto& v = view(name);
    return MatrixMap<Scalar>(block(v).data() + v.offset, v.rows, v.cols);
  }

  ConstMatrixMap<Scalar> view_as_matrix(const std::string& name) const {
    const auto& v = view(name);
    return ConstMatrixMap<Scalar>(block(v).data() + v.offset, v.rows, v.cols);
  }

  VectorType& block(const ParamView& v) { return v.task ? per_task_.at(*v.task) : shared_; }
  const VectorType& block(const ParamView& v) const {
    return v.task ? per_task_.at(*v.task) : shared_;
  }

  /// True when, for every block, the views cover it contiguously from 0 to
  /// its length with no overlap or gap.
  bool tiles_exactly() const {
    std::vector<Index> cursor(per_task_.size() + 1, 0);
    for (const auto& v : layout_) {
      auto& c = cursor[v.task ? *v.task + 1 : 0];
      if (v.offset != c) return false;
      c += v.size();
    }
    if (cursor[0] != shared_.size()) return false;
    for (std::size_t i = 0; i < per_task_.size(); ++i) {
      if (cursor[i + 1] != per_task_[i].size()) return false;
    }
    return true;
  }

 private:
  ParamView append(std::string name, std::optional<std::size_t> task, Index rows, Index cols) {
    if (rows < 0 || cols < 0) throw DimensionError("negative view shape for '" + name + "'");
    for (const auto& v : layout_) {
      if (v.name == name) throw ConfigError("duplicate parameter view '" + name + "'");
    }
    auto& target = task ? per_task_[*task] : shared_;
    const Index offset = target.size();
    target.conservativeResize(offset + rows * cols);
    target.tail(rows * cols).setZero();
    layout_.push_back(ParamView{std::move(name), task, offset, rows, cols});
    return layout_.back();
  }

  VectorType shared_;
  std::vector<VectorType> per_task_;
  std::vector<ParamView> layout_;
};

using ParamPartition = BasicParamPartition<double>;

}  // namespace excessmtl

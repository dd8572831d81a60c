#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

namespace mcl::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using RowVector = Eigen::RowVectorXd;
using RowVectorMap = Eigen::Map<RowVector>;
using ConstRowVectorMap = Eigen::Map<const RowVector>;

/// Storage for parameters and gradients. The fixed 64-byte base alignment
/// makes Eigen's vectorised reductions over slot maps split the same way on
/// every allocation, so results are bit-reproducible.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct TensorSlot {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const TensorSlot&) const = default;
};

/// Flat parameter storage with a parallel gradient buffer and a named layout.
/// Slots are laid out back to back in insertion order.
class ParamVector {
 public:
  ParamVector() = default;

  /// Appends a zero-initialised tensor; returns its slot index.
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  std::size_t size() const { return values_.size(); }
  const std::vector<TensorSlot>& layout() const { return layout_; }
  const TensorSlot& slot(std::size_t i) const { return layout_.at(i); }
  std::size_t find(const std::string& name) const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> grads() { return grads_; }
  std::span<const double> grads() const { return grads_; }

  MatrixMap value(std::size_t slot) { return map(values_, slot); }
  ConstMatrixMap value(std::size_t slot) const { return cmap(values_, slot); }
  MatrixMap grad(std::size_t slot) { return map(grads_, slot); }
  ConstMatrixMap grad(std::size_t slot) const { return cmap(grads_, slot); }

  RowVectorMap value_row(std::size_t slot) {
    return RowVectorMap(values_.data() + layout_[slot].offset,
                        static_cast<Eigen::Index>(layout_[slot].size()));
  }
  ConstRowVectorMap value_row(std::size_t slot) const {
    return ConstRowVectorMap(values_.data() + layout_[slot].offset,
                             static_cast<Eigen::Index>(layout_[slot].size()));
  }
  RowVectorMap grad_row(std::size_t slot) {
    return RowVectorMap(grads_.data() + layout_[slot].offset,
                        static_cast<Eigen::Index>(layout_[slot].size()));
  }

  void zero_grad();

  /// Replaces the values; length must match.
  void assign_values(std::span<const double> values);

  /// Name of the slot containing flat index `i`.
  const std::string& name_at(std::size_t i) const;

  /// FNV-1a over the raw value bytes.
  std::uint64_t value_hash() const;

  bool same_layout(const ParamVector& other) const { return layout_ == other.layout_; }

 private:
  MatrixMap map(AlignedBuffer& buf, std::size_t slot) {
    const auto& s = layout_[slot];
    return MatrixMap(buf.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                     static_cast<Eigen::Index>(s.cols));
  }
  ConstMatrixMap cmap(const AlignedBuffer& buf, std::size_t slot) const {
    const auto& s = layout_[slot];
    return ConstMatrixMap(buf.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                          static_cast<Eigen::Index>(s.cols));
  }

  std::vector<TensorSlot> layout_;
  AlignedBuffer values_;
  AlignedBuffer grads_;
};

double l2_norm(std::span<const double> v);

}  // namespace mcl::nn

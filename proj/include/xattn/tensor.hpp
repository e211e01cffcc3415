#pragma once

// Dense row-major tensor with a flat std::vector payload. Shapes are small
// vectors of extents; rank is never above 3 in this codebase. Matrix math
// goes through Eigen::Map views (see mat()/const_mat()), so Tensor itself
// stays a plain container and Eigen remains the only math dependency.

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "xattn/errors.hpp"

namespace xattn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

template <class Scalar>
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using MatMap = Eigen::Map<MatrixRM<Scalar>>;
template <class Scalar>
using ConstMatMap = Eigen::Map<const MatrixRM<Scalar>>;
template <class Scalar>
using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
template <class Scalar>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

template <class Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(static_cast<std::size_t>(shape_numel(shape_)), Scalar(0)) {}

  Tensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != shape_numel(shape_))
      throw ShapeError("payload of " + std::to_string(data_.size()) +
                       " values does not fill shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const {
    if (i < 0 || i >= rank())
      throw IndexError("dim " + std::to_string(i) + " out of range for " +
                       shape_str(shape_));
    return shape_[static_cast<std::size_t>(i)];
  }
  Index numel() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& vec() { return data_; }
  const std::vector<Scalar>& vec() const { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& at(std::initializer_list<Index> idx) {
    return data_[static_cast<std::size_t>(offset(idx))];
  }
  Scalar at(std::initializer_list<Index> idx) const {
    return data_[static_cast<std::size_t>(offset(idx))];
  }

  // Extent of the trailing axis; the usual "feature" dimension.
  Index last_dim() const {
    if (shape_.empty()) throw ShapeError("last_dim of rank-0 tensor");
    return shape_.back();
  }

  // Product of all leading extents, i.e. how many feature rows there are.
  Index lead_rows() const {
    if (shape_.empty()) throw ShapeError("lead_rows of rank-0 tensor");
    Index n = 1;
    for (std::size_t i = 0; i + 1 < shape_.size(); ++i) n *= shape_[i];
    return n;
  }

  // 2-D Eigen views. Default collapses leading axes: (B,L,d) -> (B*L, d).
  MatMap<Scalar> mat() { return MatMap<Scalar>(data(), lead_rows(), last_dim()); }
  ConstMatMap<Scalar> mat() const {
    return ConstMatMap<Scalar>(data(), lead_rows(), last_dim());
  }
  MatMap<Scalar> mat(Index rows, Index cols) {
    if (rows * cols != numel())
      throw ShapeError("cannot view " + shape_str(shape_) + " as (" +
                       std::to_string(rows) + "," + std::to_string(cols) + ")");
    return MatMap<Scalar>(data(), rows, cols);
  }
  ConstMatMap<Scalar> mat(Index rows, Index cols) const {
    if (rows * cols != numel())
      throw ShapeError("cannot view " + shape_str(shape_) + " as (" +
                       std::to_string(rows) + "," + std::to_string(cols) + ")");
    return ConstMatMap<Scalar>(data(), rows, cols);
  }

  VecMap<Scalar> flat() { return VecMap<Scalar>(data(), numel()); }
  ConstVecMap<Scalar> flat() const {
    return ConstVecMap<Scalar>(data(), numel());
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (Index i = 0; i < numel(); ++i)
      out[i] = static_cast<T>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank())
      throw IndexError("rank-" + std::to_string(idx.size()) +
                       " index into tensor of shape " + shape_str(shape_));
    Index off = 0;
    std::size_t k = 0;
    for (Index i : idx) {
      Index extent = shape_[k];
      if (i < 0 || i >= extent)
        throw IndexError("index " + std::to_string(i) + " out of range for " +
                         shape_str(shape_));
      off = off * extent + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

template <class Scalar>
void require_shape(const Tensor<Scalar>& t, const Shape& want,
                   const char* what) {
  if (t.shape() != want)
    throw ShapeError(std::string(what) + ": expected " + shape_str(want) +
                     ", got " + shape_str(t.shape()));
}

}  // namespace xattn

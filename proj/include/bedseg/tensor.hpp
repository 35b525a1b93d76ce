#pragma once

#include "bedseg/common.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace bedseg {

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline std::size_t shape_count(std::span<const std::size_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

/// Dense rank-N array, row-major (the last dimension varies fastest).
template <typename Scalar>
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape)
      : dims(std::move(shape)), data(shape_count(dims), Scalar(0)) {}

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  std::size_t rank() const { return dims.size(); }
  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return dims.at(i); }
  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  void set_zero() { std::fill(data.begin(), data.end(), Scalar(0)); }

  auto as_vector() {
    return Eigen::Map<VectorX<Scalar>>(data.data(), static_cast<Eigen::Index>(data.size()));
  }
  auto as_vector() const {
    return Eigen::Map<const VectorX<Scalar>>(data.data(), static_cast<Eigen::Index>(data.size()));
  }

  auto as_matrix(std::size_t rows, std::size_t cols) {
    if (rows * cols != data.size()) throw DimensionError("tensor: bad matrix view");
    return Eigen::Map<MatrixRM<Scalar>>(data.data(), static_cast<Eigen::Index>(rows),
                                        static_cast<Eigen::Index>(cols));
  }
  auto as_matrix(std::size_t rows, std::size_t cols) const {
    if (rows * cols != data.size()) throw DimensionError("tensor: bad matrix view");
    return Eigen::Map<const MatrixRM<Scalar>>(data.data(), static_cast<Eigen::Index>(rows),
                                              static_cast<Eigen::Index>(cols));
  }

  /// View channel `c` of a [C,H,W] tensor as an H-by-W plane.
  auto channel(std::size_t c) {
    check_chw(c);
    return Eigen::Map<Plane<Scalar>>(data.data() + c * dims[1] * dims[2],
                                     static_cast<Eigen::Index>(dims[1]),
                                     static_cast<Eigen::Index>(dims[2]));
  }
  auto channel(std::size_t c) const {
    check_chw(c);
    return Eigen::Map<const Plane<Scalar>>(data.data() + c * dims[1] * dims[2],
                                           static_cast<Eigen::Index>(dims[1]),
                                           static_cast<Eigen::Index>(dims[2]));
  }

 private:
  void check_chw(std::size_t c) const {
    if (rank() != 3 || c >= dims[0]) throw DimensionError("tensor: bad channel view");
  }
};

template <typename Scalar>
Tensor<Scalar> tensor_from_plane(const Plane<Scalar>& p) {
  Tensor<Scalar> t({static_cast<std::size_t>(p.rows()), static_cast<std::size_t>(p.cols())});
  Eigen::Map<Plane<Scalar>>(t.data.data(), p.rows(), p.cols()) = p;
  return t;
}

/// Maps a rank-2 [H,W] or rank-3 [1,H,W] tensor as a plane.
template <typename Scalar>
Eigen::Map<const Plane<Scalar>> plane_view(const Tensor<Scalar>& t) {
  if (t.rank() == 2)
    return {t.data.data(), static_cast<Eigen::Index>(t.dims[0]),
            static_cast<Eigen::Index>(t.dims[1])};
  if (t.rank() == 3 && t.dims[0] == 1)
    return {t.data.data(), static_cast<Eigen::Index>(t.dims[1]),
            static_cast<Eigen::Index>(t.dims[2])};
  throw DimensionError("tensor: expected [H,W] or [1,H,W]");
}

}  // namespace bedseg

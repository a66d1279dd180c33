// Copyright 2026 The HetAttr Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hetattr/error.hpp"

namespace hetattr {

/// Dense row-major double matrix used for every attribution computation.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

template <typename T>
using MatrixOf = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Head-stacked tensor of shape [heads, rows, cols], stored contiguously
/// in row-major order (head slowest). This is the exact in-memory image of
/// one tensor blob in a trace file when T is float.
template <typename T>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t heads, std::size_t rows, std::size_t cols, T fill = T{0})
      : heads_(heads), rows_(rows), cols_(cols), data_(heads * rows * cols, fill) {}
  Tensor3(std::size_t heads, std::size_t rows, std::size_t cols, std::vector<T> data)
      : heads_(heads), rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != heads_ * rows_ * cols_) {
      throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                       " elements, shape needs " +
                       std::to_string(heads_ * rows_ * cols_));
    }
  }

  std::size_t heads() const { return heads_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t h, std::size_t i, std::size_t j) {
    return data_[(h * rows_ + i) * cols_ + j];
  }
  const T& operator()(std::size_t h, std::size_t i, std::size_t j) const {
    return data_[(h * rows_ + i) * cols_ + j];
  }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }

  Eigen::Map<const MatrixOf<T>> head(std::size_t h) const {
    return Eigen::Map<const MatrixOf<T>>(data_.data() + h * rows_ * cols_,
                                         static_cast<Eigen::Index>(rows_),
                                         static_cast<Eigen::Index>(cols_));
  }
  Eigen::Map<MatrixOf<T>> head(std::size_t h) {
    return Eigen::Map<MatrixOf<T>>(data_.data() + h * rows_ * cols_,
                                   static_cast<Eigen::Index>(rows_),
                                   static_cast<Eigen::Index>(cols_));
  }

  bool same_shape(const Tensor3& other) const {
    return heads_ == other.heads_ && rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape_string() const {
    return "[" + std::to_string(heads_) + "," + std::to_string(rows_) + "," +
           std::to_string(cols_) + "]";
  }

  friend bool operator==(const Tensor3&, const Tensor3&) = default;

 private:
  std::size_t heads_ = 0;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Tensor3f = Tensor3<float>;
using Tensor3d = Tensor3<double>;

/// Elementwise narrowing to float (the interchange precision).
inline Tensor3f to_float(const Tensor3d& t) {
  std::vector<float> out(t.size());
  auto in = t.flat();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(in[i]);
  return Tensor3f(t.heads(), t.rows(), t.cols(), std::move(out));
}

/// Packs per-head matrices (all the same shape) into one tensor.
template <typename T>
Tensor3<T> stack_heads(const std::vector<MatrixOf<T>>& heads) {
  if (heads.empty()) throw ShapeError("cannot stack zero heads");
  const auto rows = static_cast<std::size_t>(heads.front().rows());
  const auto cols = static_cast<std::size_t>(heads.front().cols());
  Tensor3<T> out(heads.size(), rows, cols);
  for (std::size_t h = 0; h < heads.size(); ++h) {
    if (static_cast<std::size_t>(heads[h].rows()) != rows ||
        static_cast<std::size_t>(heads[h].cols()) != cols) {
      throw ShapeError("head " + std::to_string(h) + " shape differs from head 0");
    }
    out.head(h) = heads[h];
  }
  return out;
}

}  // namespace hetattr

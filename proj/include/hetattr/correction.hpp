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

#include <cmath>
#include <string>
#include <string_view>

#include "hetattr/error.hpp"
#include "hetattr/tensor.hpp"

namespace hetattr {

/// How the attention gradient modulates the attention map before the
/// head average.
enum class CorrectionMode {
  kPositive,  // max(grad, 0) * A
  kFull,      // grad * A, signed
  kAbsolute,  // |grad| * A
};

inline std::string_view to_string(CorrectionMode mode) {
  switch (mode) {
    case CorrectionMode::kPositive: return "pos";
    case CorrectionMode::kFull: return "full";
    case CorrectionMode::kAbsolute: return "abs";
  }
  return "?";
}

inline CorrectionMode parse_correction_mode(std::string_view s) {
  if (s == "pos" || s == "positive") return CorrectionMode::kPositive;
  if (s == "full") return CorrectionMode::kFull;
  if (s == "abs" || s == "absolute") return CorrectionMode::kAbsolute;
  throw ValidationError("unknown correction mode '" + std::string(s) + "'");
}

inline double apply_correction(double grad, CorrectionMode mode) {
  switch (mode) {
    case CorrectionMode::kPositive: return grad > 0.0 ? grad : 0.0;
    case CorrectionMode::kFull: return grad;
    case CorrectionMode::kAbsolute: return std::abs(grad);
  }
  return grad;
}

/// Head mean of f(gradient) ⊙ attention, where f is selected by `mode`.
/// The result is not renormalized.
template <typename T>
Matrix correct_and_average(const Tensor3<T>& attention, const Tensor3<T>& gradient,
                           CorrectionMode mode) {
  if (!attention.same_shape(gradient)) {
    throw ShapeError("attention " + attention.shape_string() + " vs gradient " +
                     gradient.shape_string());
  }
  if (attention.heads() == 0) throw ShapeError("attention has zero heads");

  const auto rows = static_cast<Eigen::Index>(attention.rows());
  const auto cols = static_cast<Eigen::Index>(attention.cols());
  Matrix sum = Matrix::Zero(rows, cols);
  for (std::size_t h = 0; h < attention.heads(); ++h) {
    const auto a = attention.head(h).template cast<double>();
    const auto g = gradient.head(h).template cast<double>();
    switch (mode) {
      case CorrectionMode::kPositive: sum += (g.cwiseMax(0.0).cwiseProduct(a)); break;
      case CorrectionMode::kFull: sum += g.cwiseProduct(a); break;
      case CorrectionMode::kAbsolute: sum += g.cwiseAbs().cwiseProduct(a); break;
    }
  }
  return sum / static_cast<double>(attention.heads());
}

}  // namespace hetattr

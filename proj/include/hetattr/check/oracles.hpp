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

// Reference computations used to cross-check the library. None of them
// call into correction, propagation or the Otsu implementation; they
// recompute the same quantities by brute force.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "hetattr/tensor.hpp"
#include "hetattr/toy_model.hpp"
#include "hetattr/trace.hpp"

namespace hetattr::check {

/// Entrywise head mean of f(grad) * att with scalar loops.
/// `mode`: 0 positive, 1 full, 2 absolute.
inline Matrix scalar_corrected_mean(const Tensor3f& att, const Tensor3f& grad, int mode) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(att.rows()), static_cast<Eigen::Index>(att.cols()));
  for (std::size_t i = 0; i < att.rows(); ++i) {
    for (std::size_t j = 0; j < att.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t h = 0; h < att.heads(); ++h) {
        double g = grad(h, i, j);
        if (mode == 0) g = g > 0.0 ? g : 0.0;
        if (mode == 2) g = g < 0.0 ? -g : g;
        acc += g * static_cast<double>(att(h, i, j));
      }
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = acc / static_cast<double>(att.heads());
    }
  }
  return out;
}

/// Triple-loop dense product.
inline Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      for (Eigen::Index j = 0; j < b.cols(); ++j) out(i, j) += a(i, k) * b(k, j);
    }
  }
  return out;
}

/// Noise link with explicit loops: subtract I, divide each row by its sum
/// (rows summing to zero untouched), add I.
inline Matrix scalar_noise_link(const Matrix& a) {
  Matrix out = a;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) s += a(i, j) - (i == j ? 1.0 : 0.0);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double added = a(i, j) - (i == j ? 1.0 : 0.0);
      out(i, j) = (s != 0.0 ? added / s : added) + (i == j ? 1.0 : 0.0);
    }
  }
  return out;
}

/// Whole-trace attribution computed as plain rollout in one concatenated
/// token space: every stream's tokens become a row block of a global state
/// with columns [source-1 tokens | source-2 tokens]. Each layer multiplies
/// the global state by a T x T matrix that is the identity except for Ā
/// placed in the (query block, key/value block) position.
struct BlockOracle {
  std::map<int, Eigen::Index> row_offset;
  std::map<int, Eigen::Index> rows;
  Eigen::Index source1_cols = 0;
  Matrix state;

  Matrix block(int stream, int source) const {
    const Eigen::Index c0 = source == 1 ? 0 : source1_cols;
    const Eigen::Index nc = source == 1 ? source1_cols : state.cols() - source1_cols;
    return state.block(row_offset.at(stream), c0, rows.at(stream), nc);
  }
};

inline BlockOracle block_oracle(const AttentionTrace& trace, int mode, bool noise = false) {
  BlockOracle o;
  Eigen::Index total = 0;
  Eigen::Index n1 = 0;
  Eigen::Index n2 = 0;
  for (const auto& t : trace.tokens) {
    o.row_offset[t.stream.id] = total;
    o.rows[t.stream.id] = static_cast<Eigen::Index>(t.count);
    total += static_cast<Eigen::Index>(t.count);
    if (t.source == 1) n1 = static_cast<Eigen::Index>(t.count);
    if (t.source == 2) n2 = static_cast<Eigen::Index>(t.count);
  }
  o.source1_cols = n1;
  o.state = Matrix::Zero(total, n1 + n2);
  for (const auto& t : trace.tokens) {
    const Eigen::Index r0 = o.row_offset[t.stream.id];
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(t.count); ++i) {
      if (t.source == 1) o.state(r0 + i, i) = 1.0;
      if (t.source == 2) o.state(r0 + i, n1 + i) = 1.0;
    }
  }

  bool noised = false;
  for (const auto& layer : trace.layers) {
    const TokenMeta& kv = trace.stream(layer.kv_stream);
    if (noise && !noised && layer.kind == LayerKind::kTypeB && kv.noise_link && kv.source != 0) {
      const Eigen::Index r0 = o.row_offset[kv.stream.id];
      const Eigen::Index c0 = kv.source == 1 ? 0 : n1;
      const Eigen::Index n = o.rows[kv.stream.id];
      const Matrix own = o.state.block(r0, c0, n, n);
      o.state.block(r0, c0, n, n) = scalar_noise_link(own);
      noised = true;
    }
    const Matrix abar = scalar_corrected_mean(layer.attention, layer.gradient, mode);
    Matrix step = Matrix::Identity(total, total);
    const Eigen::Index qr = o.row_offset[layer.query_stream];
    const Eigen::Index kr = o.row_offset[layer.kv_stream];
    for (Eigen::Index i = 0; i < abar.rows(); ++i) {
      for (Eigen::Index j = 0; j < abar.cols(); ++j) step(qr + i, kr + j) += abar(i, j);
    }
    o.state = naive_product(step, o.state);
  }
  return o;
}

/// max |a - b| over max |b|: the largest entrywise deviation measured
/// against the scale of the reference matrix.
inline double relative_difference(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  const double scale = b.cwiseAbs().maxCoeff();
  const double diff = (a - b).cwiseAbs().maxCoeff();
  if (scale == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / scale;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
  std::size_t worst_layer = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central differences of the loss with respect to every attention
/// probability, perturbing one entry at a time through the post-softmax
/// override. Relative errors use max(|analytic|, |numeric|,
/// floor_fraction * largest |analytic| in that layer) as denominator.
inline GradientCheck finite_difference_check(const toy::ToyModel& model, const toy::ToyInputs& inputs,
                                             const toy::LossSpec& loss, double eps = 1e-3,
                                             double floor_fraction = 1e-2) {
  const toy::ForwardPass pass = model.forward(inputs);
  const std::vector<Tensor3d> analytic = model.backward(pass, loss);
  const std::vector<Tensor3d> attention = pass.attention();
  GradientCheck out;
  for (std::size_t l = 0; l < attention.size(); ++l) {
    double scale = 0.0;
    for (double g : analytic[l].flat()) scale = std::max(scale, std::abs(g));
    toy::AttentionOverride overrides{{l, attention[l]}};
    Tensor3d& probe = overrides.at(l);
    for (std::size_t h = 0; h < probe.heads(); ++h) {
      for (std::size_t i = 0; i < probe.rows(); ++i) {
        for (std::size_t j = 0; j < probe.cols(); ++j) {
          const double base = probe(h, i, j);
          probe(h, i, j) = base + eps;
          const double up = model.loss_value(inputs, loss, overrides);
          probe(h, i, j) = base - eps;
          const double down = model.loss_value(inputs, loss, overrides);
          probe(h, i, j) = base;
          const double numeric = (up - down) / (2.0 * eps);
          const double a = analytic[l](h, i, j);
          const double denom = std::max({std::abs(a), std::abs(numeric), floor_fraction * scale, 1e-300});
          const double rel = std::abs(a - numeric) / denom;
          ++out.entries;
          if (rel > out.max_relative_error) {
            out.max_relative_error = rel;
            out.worst_layer = l;
            out.worst_analytic = a;
            out.worst_numeric = numeric;
          }
        }
      }
    }
  }
  return out;
}

/// Between-class variance of splitting the binned sample at boundary k,
/// recomputed from scratch (bin centers stand in for values).
inline double between_class_variance(std::span<const double> values, std::size_t bins, std::size_t k) {
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double width = (*mx - *mn) / static_cast<double>(bins);
  double n0 = 0.0, n1 = 0.0, s0 = 0.0, s1 = 0.0;
  for (double v : values) {
    std::size_t b = static_cast<std::size_t>(std::floor((v - *mn) / width));
    b = std::min(b, bins - 1);
    const double center = *mn + (static_cast<double>(b) + 0.5) * width;
    if (b < k) {
      n0 += 1.0;
      s0 += center;
    } else {
      n1 += 1.0;
      s1 += center;
    }
  }
  if (n0 == 0.0 || n1 == 0.0) return 0.0;
  const double n = n0 + n1;
  const double diff = s0 / n0 - s1 / n1;
  return (n0 / n) * (n1 / n) * diff * diff;
}

struct OtsuScan {
  std::size_t best_k = 0;
  double best_variance = -1.0;
  double threshold = 0.0;
};

/// Exhaustive scan over every interior bin boundary.
inline OtsuScan otsu_exhaustive(std::span<const double> values, std::size_t bins) {
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double width = (*mx - *mn) / static_cast<double>(bins);
  OtsuScan scan;
  for (std::size_t k = 1; k < bins; ++k) {
    const double v = between_class_variance(values, bins, k);
    if (v > scan.best_variance) {
      scan.best_variance = v;
      scan.best_k = k;
    }
  }
  scan.threshold = *mn + static_cast<double>(scan.best_k) * width;
  return scan;
}

}  // namespace hetattr::check

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

// Source-separated attention propagation.
//
// Every stream carries two attribution matrices, one toward each information
// source. Self-attention layers roll the state forward with (I + Ā); cross
// layers add Ā times the key/value stream's state to the query stream's state,
// separately per source, so the two sources never mix.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hetattr/correction.hpp"
#include "hetattr/error.hpp"
#include "hetattr/tensor.hpp"
#include "hetattr/trace.hpp"

namespace hetattr {

struct StreamState {
  StreamId stream;
  Matrix to_source1;  // [N_s, N_1]
  Matrix to_source2;  // [N_s, N_2]

  Eigen::Index tokens() const { return to_source1.rows(); }
  const Matrix& toward(int source) const { return source == 1 ? to_source1 : to_source2; }
  Matrix& toward(int source) { return source == 1 ? to_source1 : to_source2; }
};

/// Per-token attribution scores over one source stream.
struct SaliencyMap {
  StreamId stream;  // the stream whose tokens are scored
  std::vector<double> scores;
  std::optional<GridShape> grid;

  /// Scores of the grid tokens in row-major grid order.
  std::vector<double> grid_scores() const {
    if (!grid) throw ValidationError("saliency over stream " + std::to_string(stream.id) +
                                     " has no patch grid");
    return {scores.begin() + static_cast<std::ptrdiff_t>(grid->offset),
            scores.begin() + static_cast<std::ptrdiff_t>(grid->offset + grid->cells())};
  }
};

struct PropagationOptions {
  CorrectionMode mode = CorrectionMode::kPositive;
  bool noise_link = false;
};

struct PropagationResult {
  std::vector<TokenMeta> tokens;
  std::map<int, StreamState> states;
  /// State of each stream just before its first TypeB/TypeC write, i.e.
  /// the output of its homogeneous (TypeA) stretch.
  std::map<int, StreamState> homogeneous_states;
  std::vector<Matrix> layer_maps;
  bool noise_link_applied = false;

  const StreamState& state(int stream) const {
    auto it = states.find(stream);
    if (it == states.end()) throw ValidationError("no state for stream " + std::to_string(stream));
    return it->second;
  }
  const TokenMeta& meta(int stream) const {
    for (const auto& t : tokens) {
      if (t.stream.id == stream) return t;
    }
    throw ValidationError("no stream with id " + std::to_string(stream));
  }
};

namespace detail {

// residual + abar * carried; the single kernel behind both step kinds.
inline Matrix residual_product(const Matrix& residual, const Matrix& abar, const Matrix& carried) {
  Matrix out = residual;
  out.noalias() += abar * carried;
  return out;
}

inline std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace detail

/// Homogeneous step: state <- (I + Ā) state.
inline StreamState rollout_step(const StreamState& state, const Matrix& abar) {
  if (abar.rows() != abar.cols() || abar.rows() != state.tokens()) {
    throw ShapeError("rollout_step: Ā is " + detail::dims(abar) + ", stream has " +
                     std::to_string(state.tokens()) + " tokens");
  }
  return {state.stream, detail::residual_product(state.to_source1, abar, state.to_source1),
          detail::residual_product(state.to_source2, abar, state.to_source2)};
}

/// Heterogeneous step: out_s = q_s + Ā v_s for each source s.
inline StreamState hetero_step(const StreamState& q_state, const StreamState& v_state,
                               const Matrix& abar) {
  if (abar.rows() != q_state.tokens() || abar.cols() != v_state.tokens()) {
    throw ShapeError("hetero_step: Ā is " + detail::dims(abar) + ", query stream has " +
                     std::to_string(q_state.tokens()) + " tokens, key/value stream " +
                     std::to_string(v_state.tokens()));
  }
  if (q_state.to_source1.cols() != v_state.to_source1.cols() ||
      q_state.to_source2.cols() != v_state.to_source2.cols()) {
    throw ShapeError("hetero_step: query and key/value states disagree on source sizes");
  }
  return {q_state.stream, detail::residual_product(q_state.to_source1, abar, v_state.to_source1),
          detail::residual_product(q_state.to_source2, abar, v_state.to_source2)};
}

/// Removes the identity, normalizes each row of the remainder to unit sum
/// and adds the identity back. Rows whose remainder sums to zero pass
/// through unnormalized.
inline Matrix noise_link(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("noise_link: matrix is " + detail::dims(a));
  Matrix added = a - Matrix::Identity(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < added.rows(); ++i) {
    const double s = added.row(i).sum();
    if (s != 0.0) added.row(i) /= s;
  }
  return added + Matrix::Identity(a.rows(), a.cols());
}

/// Identity toward a stream's own source, zero toward the other; derived
/// streams start at zero.
inline std::map<int, StreamState> initial_states(const std::vector<TokenMeta>& tokens) {
  std::size_t n1 = 0;
  std::size_t n2 = 0;
  for (const auto& t : tokens) {
    if (t.source == 1) n1 = t.count;
    if (t.source == 2) n2 = t.count;
  }
  std::map<int, StreamState> states;
  for (const auto& t : tokens) {
    const auto n = static_cast<Eigen::Index>(t.count);
    StreamState s{t.stream, Matrix::Zero(n, static_cast<Eigen::Index>(n1)),
                  Matrix::Zero(n, static_cast<Eigen::Index>(n2))};
    if (t.source != 0) s.toward(t.source).setIdentity();
    states.emplace(t.stream.id, std::move(s));
  }
  return states;
}

/// Runs correction and propagation over the trace from explicit initial
/// states (one per declared stream).
inline PropagationResult propagate_from(const AttentionTrace& trace,
                                        std::map<int, StreamState> states,
                                        const PropagationOptions& options) {
  if (auto v = validate(trace); !v.empty()) {
    throw ValidationError("propagate: trace violates '" + v.front().invariant + "': " +
                          v.front().detail);
  }
  PropagationResult result;
  result.tokens = trace.tokens;
  result.layer_maps.reserve(trace.layers.size());

  for (const auto& layer : trace.layers) {
    Matrix abar = correct_and_average(layer.attention, layer.gradient, options.mode);
    StreamState& q = states.at(layer.query_stream);

    if (layer.kind != LayerKind::kTypeA && !result.homogeneous_states.contains(layer.query_stream)) {
      result.homogeneous_states.emplace(layer.query_stream, q);
    }
    if (layer.kind == LayerKind::kTypeB) {
      const TokenMeta& kv_meta = trace.stream(layer.kv_stream);
      StreamState& v = states.at(layer.kv_stream);
      if (options.noise_link && kv_meta.noise_link && kv_meta.source != 0 &&
          !result.noise_link_applied) {
        v.toward(kv_meta.source) = noise_link(v.toward(kv_meta.source));
        result.noise_link_applied = true;
      }
      q = hetero_step(q, v, abar);
    } else {
      q = rollout_step(q, abar);
    }
    result.layer_maps.push_back(std::move(abar));
  }
  for (const auto& [id, s] : states) {
    if (!result.homogeneous_states.contains(id)) result.homogeneous_states.emplace(id, s);
  }
  result.states = std::move(states);
  return result;
}

inline PropagationResult propagate(const AttentionTrace& trace, const PropagationOptions& options) {
  return propagate_from(trace, initial_states(trace.tokens), options);
}

inline PropagationResult propagate(const AttentionTrace& trace, CorrectionMode mode) {
  return propagate(trace, PropagationOptions{mode, false});
}

enum class Stage { kFinal, kHomogeneous };

/// Row `row` of the stream's attribution toward each source.
inline std::pair<SaliencyMap, SaliencyMap> row_interpretation(const PropagationResult& result,
                                                              int stream, std::size_t row,
                                                              Stage stage = Stage::kFinal) {
  const auto& states = stage == Stage::kFinal ? result.states : result.homogeneous_states;
  auto it = states.find(stream);
  if (it == states.end()) throw ValidationError("no state for stream " + std::to_string(stream));
  const StreamState& s = it->second;
  if (static_cast<Eigen::Index>(row) >= s.tokens()) {
    throw ShapeError("row " + std::to_string(row) + " outside stream " + std::to_string(stream));
  }
  auto make = [&](int source) {
    const TokenMeta* src = nullptr;
    for (const auto& t : result.tokens) {
      if (t.source == source) src = &t;
    }
    if (src == nullptr) throw ValidationError("no source-" + std::to_string(source) + " stream");
    const Matrix& m = s.toward(source);
    SaliencyMap map{src->stream, {}, src->grid};
    map.scores.assign(m.row(static_cast<Eigen::Index>(row)).begin(),
                      m.row(static_cast<Eigen::Index>(row)).end());
    return map;
  };
  return {make(1), make(2)};
}

/// The CLS row of the stream's attribution toward each source.
inline std::pair<SaliencyMap, SaliencyMap> cls_interpretation(const PropagationResult& result,
                                                              int stream,
                                                              Stage stage = Stage::kFinal) {
  const TokenMeta& meta = result.meta(stream);
  if (!meta.cls_index) {
    throw ValidationError("stream " + std::to_string(stream) + " (" + meta.stream.label +
                          ") has no CLS token");
  }
  return row_interpretation(result, stream, *meta.cls_index, stage);
}

/// Total attention each token of a source stream receives from its own
/// stream: column sums of the own-source attribution matrix.
inline SaliencyMap patch_total_attention(const PropagationResult& result, int stream,
                                         Stage stage = Stage::kHomogeneous) {
  const TokenMeta& meta = result.meta(stream);
  if (!meta.grid) {
    throw ValidationError("stream " + std::to_string(stream) + " (" + meta.stream.label +
                          ") has no patch grid");
  }
  if (meta.source == 0) {
    throw ValidationError("stream " + std::to_string(stream) + " is not a source stream");
  }
  const auto& states = stage == Stage::kFinal ? result.states : result.homogeneous_states;
  const Matrix& own = states.at(stream).toward(meta.source);
  const Vector sums = own.colwise().sum().transpose();
  return SaliencyMap{meta.stream, std::vector<double>(sums.begin(), sums.end()), meta.grid};
}

}  // namespace hetattr

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

// Attention trace data model: the streams of a model, their token layout,
// and one record per attention layer holding post-softmax probabilities and
// the loss gradient with respect to those probabilities.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hetattr/error.hpp"
#include "hetattr/tensor.hpp"

namespace hetattr {

struct StreamId {
  int id = 0;
  std::string label;

  friend bool operator==(const StreamId&, const StreamId&) = default;
};

/// Attention structure taxonomy.
///   TypeA: self-attention on a stream that has not been fused yet.
///   TypeB: cross/co-attention, query stream differs from key/value stream.
///   TypeC: self-attention on a stream already written by a TypeB layer.
enum class LayerKind : std::uint8_t { kTypeA, kTypeB, kTypeC };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kTypeA: return "A";
    case LayerKind::kTypeB: return "B";
    case LayerKind::kTypeC: return "C";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view s) {
  if (s == "A") return LayerKind::kTypeA;
  if (s == "B") return LayerKind::kTypeB;
  if (s == "C") return LayerKind::kTypeC;
  throw ValidationError("unknown layer kind '" + std::string(s) + "'");
}

/// Patch grid occupying tokens [offset, offset + rows * cols) of a stream.
struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t cells() const { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct TokenMeta {
  StreamId stream;
  std::size_t count = 0;
  std::optional<std::size_t> cls_index;
  std::optional<GridShape> grid;
  std::string modality;
  /// 1 or 2 for the two information sources, 0 for a derived stream.
  int source = 0;
  /// Marks the encoder-terminal stream whose attribution is renormalized
  /// before it is first read by a cross-attention layer.
  bool noise_link = false;

  friend bool operator==(const TokenMeta&, const TokenMeta&) = default;
};

struct LayerRecord {
  std::size_t index = 0;
  LayerKind kind = LayerKind::kTypeA;
  int query_stream = 0;
  int kv_stream = 0;
  Tensor3f attention;  // [H, Nq, Nk]
  Tensor3f gradient;   // dLoss / d attention, same shape

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

struct AttentionTrace {
  std::vector<TokenMeta> tokens;
  std::vector<LayerRecord> layers;
  std::string loss_descriptor;

  const TokenMeta* find_stream(int id) const {
    for (const auto& t : tokens) {
      if (t.stream.id == id) return &t;
    }
    return nullptr;
  }

  const TokenMeta& stream(int id) const {
    const TokenMeta* t = find_stream(id);
    if (t == nullptr) throw ValidationError("no stream with id " + std::to_string(id));
    return *t;
  }

  /// The stream carrying source 1 or 2.
  const TokenMeta& source_stream(int which) const {
    for (const auto& t : tokens) {
      if (t.source == which) return t;
    }
    throw ValidationError("trace has no source-" + std::to_string(which) + " stream");
  }

  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;
};

struct Violation {
  std::optional<std::size_t> layer;
  std::string invariant;
  std::string detail;
};

inline constexpr double kRowSumTolerance = 1e-5;

namespace detail {

inline void check_tensor_values(const LayerRecord& layer,
                                std::vector<Violation>& out) {
  const auto& att = layer.attention;
  const auto& grad = layer.gradient;
  bool finite = true;
  for (float v : att.flat()) finite = finite && std::isfinite(v);
  for (float v : grad.flat()) finite = finite && std::isfinite(v);
  if (!finite) {
    out.push_back({layer.index, "finite", "attention or gradient holds NaN/Inf"});
    return;
  }
  const auto negative = std::find_if(att.flat().begin(), att.flat().end(),
                                     [](float v) { return v < 0.0f; });
  if (negative != att.flat().end()) {
    const auto at = static_cast<std::size_t>(negative - att.flat().begin());
    out.push_back({layer.index, "nonnegative",
                   "flat entry " + std::to_string(at) + " is negative"});
  }
  for (std::size_t h = 0; h < att.heads(); ++h) {
    for (std::size_t i = 0; i < att.rows(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < att.cols(); ++j) sum += att(h, i, j);
      if (std::abs(sum - 1.0) > kRowSumTolerance) {
        out.push_back({layer.index, "row-stochastic",
                       "head " + std::to_string(h) + " row " + std::to_string(i) +
                           " sums to " + std::to_string(sum)});
        return;
      }
    }
  }
}

}  // namespace detail

/// Checks every trace invariant and reports violations; never throws.
inline std::vector<Violation> validate(const AttentionTrace& trace) {
  std::vector<Violation> out;

  std::set<int> ids;
  int source1 = 0;
  int source2 = 0;
  for (const auto& t : trace.tokens) {
    const std::string who = "stream " + std::to_string(t.stream.id);
    if (!ids.insert(t.stream.id).second) {
      out.push_back({std::nullopt, "stream-id-unique", who + " declared twice"});
    }
    if (t.source == 1) ++source1;
    if (t.source == 2) ++source2;
    if (t.source < 0 || t.source > 2) {
      out.push_back({std::nullopt, "source-streams", who + " has source " +
                                                         std::to_string(t.source)});
    }
    if (t.cls_index && *t.cls_index >= t.count) {
      out.push_back({std::nullopt, "cls-index",
                     who + " cls_index " + std::to_string(*t.cls_index) +
                         " >= count " + std::to_string(t.count)});
    }
    if (t.noise_link && t.source == 0) {
      out.push_back({std::nullopt, "noise-link", who + " is flagged but is not a source"});
    }
    if (t.grid && (t.grid->cells() == 0 || t.grid->offset + t.grid->cells() > t.count)) {
      out.push_back({std::nullopt, "grid", who + " grid does not fit its tokens"});
    }
  }
  if (source1 != 1 || source2 != 1) {
    out.push_back({std::nullopt, "source-streams",
                   "need exactly one source-1 and one source-2 stream"});
  }

  std::set<int> fused;
  for (std::size_t pos = 0; pos < trace.layers.size(); ++pos) {
    const LayerRecord& layer = trace.layers[pos];
    if (layer.index != pos) {
      out.push_back({layer.index, "layer-index",
                     "record at position " + std::to_string(pos) + " has index " +
                         std::to_string(layer.index)});
    }
    const TokenMeta* q = trace.find_stream(layer.query_stream);
    const TokenMeta* kv = trace.find_stream(layer.kv_stream);
    if (q == nullptr || kv == nullptr) {
      out.push_back({layer.index, "stream-reference", "layer names an undeclared stream"});
      continue;
    }

    const bool self = layer.query_stream == layer.kv_stream;
    if (layer.kind == LayerKind::kTypeB && self) {
      out.push_back({layer.index, "layer-kind", "TypeB layer attends to its own stream"});
    } else if (layer.kind != LayerKind::kTypeB && !self) {
      out.push_back({layer.index, "layer-kind", "self-attention layer spans two streams"});
    } else if (layer.kind == LayerKind::kTypeC && !fused.contains(layer.query_stream)) {
      out.push_back({layer.index, "fusion-ordering",
                     "TypeC layer precedes any TypeB layer writing stream " +
                         std::to_string(layer.query_stream)});
    } else if (layer.kind == LayerKind::kTypeA && fused.contains(layer.query_stream)) {
      out.push_back({layer.index, "fusion-ordering",
                     "TypeA layer on stream " + std::to_string(layer.query_stream) +
                         " after it was fused"});
    }
    if (layer.kind == LayerKind::kTypeB) fused.insert(layer.query_stream);

    const auto& att = layer.attention;
    if (att.heads() == 0 || !att.same_shape(layer.gradient) || att.rows() != q->count ||
        att.cols() != kv->count) {
      out.push_back({layer.index, "shape",
                     "attention " + att.shape_string() + ", gradient " +
                         layer.gradient.shape_string() + ", streams need [H," +
                         std::to_string(q->count) + "," + std::to_string(kv->count) + "]"});
      continue;
    }
    detail::check_tensor_values(layer, out);
  }
  return out;
}

}  // namespace hetattr

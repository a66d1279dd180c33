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

// XATR interchange format.
//
//   bytes 0..3   magic "XATR"
//   u32 LE       format version (kTraceFormatVersion)
//   u32 LE       manifest length in bytes
//   ...          UTF-8 JSON manifest
//   ...          blob: row-major little-endian float32 tensors
//
// Tensor offsets in the manifest are byte offsets from the blob start.
// See docs/trace_format.md for the manifest schema.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "hetattr/error.hpp"
#include "hetattr/trace.hpp"

namespace hetattr {

inline constexpr std::string_view kTraceMagic = "XATR";
inline constexpr std::uint32_t kTraceFormatVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  }
  return v;
}

inline void put_floats(std::string& out, std::span<const float> values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

inline nlohmann::json stream_to_json(const TokenMeta& t) {
  nlohmann::json j = {{"id", t.stream.id},     {"label", t.stream.label},
                      {"count", t.count},      {"source", t.source},
                      {"modality", t.modality}, {"noise_link", t.noise_link}};
  if (t.cls_index) j["cls_index"] = *t.cls_index;
  if (t.grid) {
    j["grid"] = {{"rows", t.grid->rows}, {"cols", t.grid->cols}, {"offset", t.grid->offset}};
  }
  return j;
}

template <typename T>
T required(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw IoError("manifest: " + where + ": missing '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest: " + where + ": bad '" + key + "': " + e.what());
  }
}

}  // namespace detail

/// Serializes a trace to the XATR byte layout. The trace must validate.
inline std::string encode_trace(const AttentionTrace& trace) {
  if (auto v = validate(trace); !v.empty()) {
    std::string msg = "refusing to write invalid trace: " + v.front().invariant;
    if (v.front().layer) msg += " at layer " + std::to_string(*v.front().layer);
    throw ValidationError(msg + " (" + v.front().detail + ")");
  }

  nlohmann::json manifest;
  manifest["loss"] = trace.loss_descriptor;
  manifest["streams"] = nlohmann::json::array();
  for (const auto& t : trace.tokens) manifest["streams"].push_back(detail::stream_to_json(t));

  std::string blob;
  manifest["layers"] = nlohmann::json::array();
  for (const auto& layer : trace.layers) {
    const auto& a = layer.attention;
    nlohmann::json j = {{"index", layer.index},
                        {"kind", std::string(to_string(layer.kind))},
                        {"query_stream", layer.query_stream},
                        {"kv_stream", layer.kv_stream},
                        {"shape", {a.heads(), a.rows(), a.cols()}}};
    j["attention_offset"] = blob.size();
    detail::put_floats(blob, a.flat());
    j["gradient_offset"] = blob.size();
    detail::put_floats(blob, layer.gradient.flat());
    manifest["layers"].push_back(std::move(j));
  }
  manifest["blob_bytes"] = blob.size();

  const std::string text = manifest.dump(2);
  std::string out(kTraceMagic);
  detail::put_u32(out, kTraceFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += blob;
  return out;
}

/// Parses the XATR byte layout. Structural problems raise IoError with the
/// offending location; semantic invariants are left to validate().
inline AttentionTrace decode_trace(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != kTraceMagic) {
    throw IoError("header: missing XATR magic");
  }
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kTraceFormatVersion) {
    throw IoError("header: unknown format version " + std::to_string(version));
  }
  const std::uint32_t manifest_len = detail::get_u32(bytes, 8);
  if (12 + static_cast<std::size_t>(manifest_len) > bytes.size()) {
    throw IoError("header: manifest length " + std::to_string(manifest_len) +
                  " exceeds file size " + std::to_string(bytes.size()));
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(12, manifest_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("manifest: malformed JSON: ") + e.what());
  }
  const std::string_view blob = bytes.substr(12 + manifest_len);

  AttentionTrace trace;
  trace.loss_descriptor = detail::required<std::string>(manifest, "loss", "root");
  const auto streams = detail::required<nlohmann::json>(manifest, "streams", "root");
  if (!streams.is_array()) throw IoError("manifest: root: 'streams' is not an array");
  for (std::size_t s = 0; s < streams.size(); ++s) {
    const auto& j = streams[s];
    const std::string where = "stream " + std::to_string(s);
    TokenMeta t;
    t.stream.id = detail::required<int>(j, "id", where);
    t.stream.label = detail::required<std::string>(j, "label", where);
    t.count = detail::required<std::size_t>(j, "count", where);
    t.source = detail::required<int>(j, "source", where);
    t.modality = detail::required<std::string>(j, "modality", where);
    t.noise_link = detail::required<bool>(j, "noise_link", where);
    if (j.contains("cls_index")) t.cls_index = detail::required<std::size_t>(j, "cls_index", where);
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      t.grid = GridShape{detail::required<std::size_t>(g, "rows", where + " grid"),
                         detail::required<std::size_t>(g, "cols", where + " grid"),
                         detail::required<std::size_t>(g, "offset", where + " grid")};
    }
    trace.tokens.push_back(std::move(t));
  }

  const auto layers = detail::required<nlohmann::json>(manifest, "layers", "root");
  if (!layers.is_array()) throw IoError("manifest: root: 'layers' is not an array");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& j = layers[l];
    const std::string where = "layer " + std::to_string(l);
    LayerRecord rec;
    rec.index = detail::required<std::size_t>(j, "index", where);
    try {
      rec.kind = parse_layer_kind(detail::required<std::string>(j, "kind", where));
    } catch (const Error& e) {
      throw IoError("manifest: " + where + ": " + e.what());
    }
    rec.query_stream = detail::required<int>(j, "query_stream", where);
    rec.kv_stream = detail::required<int>(j, "kv_stream", where);
    const auto shape = detail::required<std::vector<std::size_t>>(j, "shape", where);
    if (shape.size() != 3) throw IoError("manifest: " + where + ": shape must have 3 dims");
    const std::size_t count = shape[0] * shape[1] * shape[2];

    auto read_tensor = [&](const char* key) {
      const auto offset = detail::required<std::size_t>(j, key, where);
      const std::size_t end = offset + 4 * count;
      if (offset % 4 != 0 || end > blob.size()) {
        throw IoError(where + ": " + key + " range [" + std::to_string(offset) + ", " +
                      std::to_string(end) + ") does not fit blob of " +
                      std::to_string(blob.size()) + " bytes");
      }
      std::vector<float> data(count);
      for (std::size_t i = 0; i < count; ++i) {
        data[i] = std::bit_cast<float>(detail::get_u32(blob, offset + 4 * i));
      }
      return Tensor3f(shape[0], shape[1], shape[2], std::move(data));
    };
    rec.attention = read_tensor("attention_offset");
    rec.gradient = read_tensor("gradient_offset");
    trace.layers.push_back(std::move(rec));
  }

  const auto blob_bytes = detail::required<std::size_t>(manifest, "blob_bytes", "root");
  if (blob_bytes != blob.size()) {
    throw IoError("blob: manifest declares " + std::to_string(blob_bytes) +
                  " bytes, file holds " + std::to_string(blob.size()));
  }
  return trace;
}

inline void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
  const std::string bytes = encode_trace(trace);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline AttentionTrace read_trace(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  try {
    return decode_trace(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

}  // namespace hetattr

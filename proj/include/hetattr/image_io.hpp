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

// Heatmap rendering to binary PGM (unsigned maps) and PPM (signed maps).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hetattr/error.hpp"
#include "hetattr/evaluation.hpp"
#include "hetattr/propagation.hpp"

namespace hetattr {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 = gray, 3 = RGB
  std::vector<std::uint8_t> pixels;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Grayscale heatmap of the grid tokens, scaled so the largest score is
/// white; each patch becomes an upsample x upsample block.
inline Image render_gray(const SaliencyMap& map, std::size_t upsample) {
  const auto values = map.grid_scores();
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, std::abs(v));
  Image img{map.grid->cols * upsample, map.grid->rows * upsample, 1, {}};
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = values[(y / upsample) * map.grid->cols + x / upsample];
      img.pixels[y * img.width + x] = to_byte(hi > 0.0 ? v / hi : 0.0);
    }
  }
  return img;
}

/// Diverging heatmap for signed scores: red for positive, blue for
/// negative, white at zero, symmetric around zero.
inline Image render_diverging(const SaliencyMap& map, std::size_t upsample) {
  const auto values = map.grid_scores();
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, std::abs(v));
  Image img{map.grid->cols * upsample, map.grid->rows * upsample, 3, {}};
  img.pixels.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = values[(y / upsample) * map.grid->cols + x / upsample];
      const double t = hi > 0.0 ? v / hi : 0.0;
      std::uint8_t* px = &img.pixels[(y * img.width + x) * 3];
      px[0] = t >= 0.0 ? 255 : to_byte(1.0 + t);
      px[1] = to_byte(1.0 - std::abs(t));
      px[2] = t <= 0.0 ? 255 : to_byte(1.0 - t);
    }
  }
  return img;
}

inline Image render_mask(const BinaryMask& mask) {
  Image img{mask.cols, mask.rows, 1, {}};
  img.pixels.reserve(mask.data.size());
  for (auto v : mask.data) img.pixels.push_back(v ? 255 : 0);
  return img;
}

inline void write_pnm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  Image img;
  in >> magic >> img.width >> img.height >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255) {
    throw IoError(path.string() + ": not an 8-bit binary PGM/PPM");
  }
  in.get();
  img.channels = magic == "P6" ? 3 : 1;
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

}  // namespace hetattr

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

// Deterministic desk-scale transformers that emit real attention traces.
//
// lxmert_mini: image and text streams, per-stream self-attention, then
//   cross blocks (text<-image, image<-text, text self, image self); the
//   classifier reads the text CLS token.
// detr_mini: image encoder, then decoder layers over a learned query stream
//   (query self-attention, queries<-image cross-attention); a shared class
//   head scores every query.
//
// Every attention sublayer is  y = x_q + concat_h(P_h V_h) W_o,
// out = y + tanh(y W_1) W_2  with P_h = softmax(Q_h K_h^T / sqrt(d_h)).
// All arithmetic is double precision; gradients are taken with respect to
// the post-softmax probabilities P_h.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hetattr/error.hpp"
#include "hetattr/tensor.hpp"
#include "hetattr/trace.hpp"

namespace hetattr::toy {

enum class Topology { kLxmertMini, kDetrMini };

inline std::string_view to_string(Topology t) {
  return t == Topology::kLxmertMini ? "lxmert_mini" : "detr_mini";
}

inline Topology parse_topology(std::string_view s) {
  if (s == "lxmert_mini") return Topology::kLxmertMini;
  if (s == "detr_mini") return Topology::kDetrMini;
  throw ValidationError("unknown topology '" + std::string(s) + "'");
}

inline constexpr int kImageStream = 0;
/// Text stream (lxmert_mini) or query stream (detr_mini).
inline constexpr int kSecondStream = 1;

struct ToyConfig {
  Topology topology = Topology::kLxmertMini;
  std::size_t width = 16;
  std::size_t heads = 2;
  std::size_t image_layers = 2;  // image self layers / encoder layers
  std::size_t text_layers = 2;   // text self layers (lxmert_mini only)
  std::size_t cross_layers = 2;  // cross blocks / decoder layers
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t text_tokens = 8;  // CLS is token 0
  std::size_t queries = 3;
  std::size_t classes = 4;
  std::uint64_t seed = 0;
  double attention_gain = 1.5;
  double value_gain = 0.5;
  double ffn_gain = 0.5;
  double plant_strength = 3.0;
  double background_noise = 0.5;
  bool wire_classifier = true;

  std::size_t image_tokens() const { return grid_rows * grid_cols; }
  std::size_t second_tokens() const {
    return topology == Topology::kLxmertMini ? text_tokens : queries;
  }
  std::size_t head_width() const { return width / heads; }

  void check() const {
    if (heads == 0 || width == 0 || width % heads != 0) {
      throw ValidationError("width " + std::to_string(width) + " not divisible by heads " +
                            std::to_string(heads));
    }
    if (image_layers == 0 || cross_layers == 0 ||
        (topology == Topology::kLxmertMini && text_layers == 0)) {
      throw ValidationError("every layer count must be at least 1");
    }
    if (image_tokens() == 0 || second_tokens() == 0 || classes < 2) {
      throw ValidationError("config needs tokens in both streams and at least 2 classes");
    }
  }
};

struct LayerSpec {
  LayerKind kind;
  int query_stream;
  int kv_stream;
};

inline std::vector<LayerSpec> layer_schedule(const ToyConfig& config) {
  std::vector<LayerSpec> out;
  constexpr int img = kImageStream;
  constexpr int snd = kSecondStream;
  if (config.topology == Topology::kLxmertMini) {
    for (std::size_t i = 0; i < config.image_layers; ++i) out.push_back({LayerKind::kTypeA, img, img});
    for (std::size_t i = 0; i < config.text_layers; ++i) out.push_back({LayerKind::kTypeA, snd, snd});
    for (std::size_t i = 0; i < config.cross_layers; ++i) {
      out.push_back({LayerKind::kTypeB, snd, img});
      out.push_back({LayerKind::kTypeB, img, snd});
      out.push_back({LayerKind::kTypeC, snd, snd});
      out.push_back({LayerKind::kTypeC, img, img});
    }
  } else {
    for (std::size_t i = 0; i < config.image_layers; ++i) out.push_back({LayerKind::kTypeA, img, img});
    for (std::size_t i = 0; i < config.cross_layers; ++i) {
      out.push_back({i == 0 ? LayerKind::kTypeA : LayerKind::kTypeC, snd, snd});
      out.push_back({LayerKind::kTypeB, snd, img});
    }
  }
  return out;
}

/// Scalar objective whose gradient drives the correction.
struct LossSpec {
  enum class Kind { kSingleLogit, kDifference, kRatio, kNormalizedDifference };

  Kind kind = Kind::kSingleLogit;
  std::size_t target1 = 0;
  std::size_t target2 = 0;
  std::size_t query = 0;  // scored output row (detr_mini query); 0 for lxmert_mini

  static LossSpec single(std::size_t target, std::size_t query = 0) {
    return {Kind::kSingleLogit, target, 0, query};
  }
  static LossSpec difference(std::size_t a, std::size_t b, std::size_t query = 0) {
    return {Kind::kDifference, a, b, query};
  }
  static LossSpec ratio(std::size_t a, std::size_t b, std::size_t query = 0) {
    return {Kind::kRatio, a, b, query};
  }
  static LossSpec normalized_difference(std::size_t a, std::size_t b, std::size_t query = 0) {
    return {Kind::kNormalizedDifference, a, b, query};
  }

  bool binary() const { return kind != Kind::kSingleLogit; }

  /// "single:3", "diff:1,2", "ratio:1,2" or "normdiff:1,2", optionally
  /// followed by "@q" selecting the scored query row.
  std::string describe() const {
    std::string s;
    switch (kind) {
      case Kind::kSingleLogit: s = "single:" + std::to_string(target1); break;
      case Kind::kDifference: s = "diff:"; break;
      case Kind::kRatio: s = "ratio:"; break;
      case Kind::kNormalizedDifference: s = "normdiff:"; break;
    }
    if (binary()) s += std::to_string(target1) + "," + std::to_string(target2);
    if (query != 0) s += "@" + std::to_string(query);
    return s;
  }

  static LossSpec parse(std::string_view text) {
    LossSpec spec;
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw ValidationError("loss spec needs 'kind:targets'");
    const std::string_view kind = text.substr(0, colon);
    std::string_view rest = text.substr(colon + 1);
    if (const auto at = rest.find('@'); at != std::string_view::npos) {
      spec.query = std::stoul(std::string(rest.substr(at + 1)));
      rest = rest.substr(0, at);
    }
    if (kind == "single") {
      spec.kind = Kind::kSingleLogit;
      spec.target1 = std::stoul(std::string(rest));
      return spec;
    }
    if (kind == "diff") spec.kind = Kind::kDifference;
    else if (kind == "ratio") spec.kind = Kind::kRatio;
    else if (kind == "normdiff") spec.kind = Kind::kNormalizedDifference;
    else throw ValidationError("unknown loss kind '" + std::string(kind) + "'");
    const auto comma = rest.find(',');
    if (comma == std::string_view::npos) throw ValidationError("binary loss needs two targets");
    spec.target1 = std::stoul(std::string(rest.substr(0, comma)));
    spec.target2 = std::stoul(std::string(rest.substr(comma + 1)));
    return spec;
  }

  void check(std::size_t classes, std::size_t rows) const {
    if (target1 >= classes || (binary() && target2 >= classes)) {
      throw ValidationError("loss target out of range for " + std::to_string(classes) + " classes");
    }
    if (query >= rows) throw ValidationError("loss query row " + std::to_string(query) + " out of range");
  }

  double value(const Eigen::Ref<const Eigen::RowVectorXd>& logits) const {
    const double z1 = logits(static_cast<Eigen::Index>(target1));
    const double z2 = binary() ? logits(static_cast<Eigen::Index>(target2)) : 0.0;
    switch (kind) {
      case Kind::kSingleLogit: return z1;
      case Kind::kDifference: return z1 - z2;
      case Kind::kRatio: return z1 / nonzero(z2);
      case Kind::kNormalizedDifference: return (z1 - z2) / nonzero(z2);
    }
    return z1;
  }

  Eigen::RowVectorXd gradient(const Eigen::Ref<const Eigen::RowVectorXd>& logits) const {
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(logits.size());
    const auto t1 = static_cast<Eigen::Index>(target1);
    const auto t2 = static_cast<Eigen::Index>(target2);
    switch (kind) {
      case Kind::kSingleLogit: g(t1) = 1.0; break;
      case Kind::kDifference:
        g(t1) += 1.0;
        g(t2) -= 1.0;
        break;
      case Kind::kRatio:
      case Kind::kNormalizedDifference: {
        // (z1 - z2) / z2 = z1 / z2 - 1, so both share one gradient.
        const double z2 = nonzero(logits(t2));
        g(t1) += 1.0 / z2;
        g(t2) -= logits(t1) / (z2 * z2);
        break;
      }
    }
    return g;
  }

 private:
  static double nonzero(double z) {
    if (z == 0.0) throw NumericalError("loss denominator logit is zero");
    return z;
  }
};

/// Inputs of one forward pass. `text` is empty for detr_mini (its second
/// stream is the learned query embedding). Keep masks select which tokens
/// may be attended to; empty means all.
struct ToyInputs {
  Matrix image;
  Matrix text;
  std::vector<std::uint8_t> image_keep;
  std::vector<std::uint8_t> second_keep;
};

/// Post-softmax attention substitutes, keyed by layer index.
using AttentionOverride = std::map<std::size_t, Tensor3d>;

struct LayerCache {
  Matrix xq;
  Matrix xkv;
  std::vector<Matrix> q, k, v, p;
  Matrix y;  // after attention residual
  Matrix t;  // tanh(y W1)
  bool overridden = false;
};

struct ForwardPass {
  std::vector<LayerCache> layers;
  std::array<Matrix, 2> final;
  std::array<std::vector<std::uint8_t>, 2> keep;
  Matrix logits;  // [1, C] (lxmert_mini) or [queries, C] (detr_mini)

  std::vector<Tensor3d> attention() const {
    std::vector<Tensor3d> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back(stack_heads(l.p));
    return out;
  }
};

/// splitmix64 finalizer, used to derive independent RNG streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

/// Class feature directions scaled by plant_strength, one row per class;
/// orthogonal whenever width >= classes.
inline Matrix class_features(const ToyConfig& config) {
  std::mt19937_64 rng(derive_seed(config.seed, 101));
  Matrix p = gaussian(rng, static_cast<Eigen::Index>(config.classes),
                      static_cast<Eigen::Index>(config.width), 1.0);
  if (p.rows() <= p.cols()) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(p.transpose());
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(p.cols(), p.rows());
    p = q.transpose();
  }
  for (Eigen::Index c = 0; c < p.rows(); ++c) p.row(c) *= config.plant_strength / p.row(c).norm();
  return p;
}

/// Embedding of the text CLS token.
inline Eigen::RowVectorXd cls_embedding(const ToyConfig& config) {
  std::mt19937_64 rng(derive_seed(config.seed, 102));
  return gaussian(rng, 1, static_cast<Eigen::Index>(config.width), 1.0).row(0);
}

struct PlantedObject {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 0;  // square block side in patches
  std::size_t label = 0;

  bool covers(std::size_t r, std::size_t c) const {
    return r >= row && r < row + size && c >= col && c < col + size;
  }
};

struct PlantedSample {
  ToyInputs inputs;
  std::vector<PlantedObject> objects;
  std::size_t label = 0;  // label of the first object

  /// Ground-truth mask (row-major over the patch grid) of one object.
  std::vector<std::uint8_t> object_mask(const ToyConfig& config, std::size_t i) const {
    std::vector<std::uint8_t> m(config.image_tokens(), 0);
    for (std::size_t r = 0; r < config.grid_rows; ++r) {
      for (std::size_t c = 0; c < config.grid_cols; ++c) {
        m[r * config.grid_cols + c] = objects.at(i).covers(r, c) ? 1 : 0;
      }
    }
    return m;
  }

  /// Union of all object masks.
  std::vector<std::uint8_t> mask(const ToyConfig& config) const {
    std::vector<std::uint8_t> m(config.image_tokens(), 0);
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto om = object_mask(config, i);
      for (std::size_t k = 0; k < m.size(); ++k) m[k] |= om[k];
    }
    return m;
  }
};

/// Builds an input whose image holds one square block of class-prototype
/// patches per requested label, on a noisy background. Blocks never overlap.
inline PlantedSample plant_objects(const ToyConfig& config, std::uint64_t seed,
                                   const std::vector<std::size_t>& labels, std::size_t block) {
  config.check();
  if (block == 0 || block > config.grid_rows || block > config.grid_cols) {
    throw ValidationError("block side " + std::to_string(block) + " does not fit the grid");
  }
  std::mt19937_64 rng(derive_seed(seed, 7));
  const auto n = static_cast<Eigen::Index>(config.image_tokens());
  const auto d = static_cast<Eigen::Index>(config.width);
  const Matrix features = class_features(config);

  PlantedSample sample;
  sample.inputs.image = gaussian(rng, n, d, config.background_noise / std::sqrt(double(d)));
  for (std::size_t label : labels) {
    if (label >= config.classes) throw ValidationError("planted label out of range");
  }
  // Each object picks uniformly among positions free of earlier objects;
  // a dead end restarts the whole layout.
  for (int attempt = 0; attempt < 64 && sample.objects.size() != labels.size(); ++attempt) {
    sample.objects.clear();
    for (std::size_t label : labels) {
      std::vector<PlantedObject> free;
      for (std::size_t r = 0; r + block <= config.grid_rows; ++r) {
        for (std::size_t c = 0; c + block <= config.grid_cols; ++c) {
          const PlantedObject obj{r, c, block, label};
          bool apart = true;
          for (const auto& other : sample.objects) {
            apart = apart && (obj.row + block <= other.row || other.row + other.size <= obj.row ||
                              obj.col + block <= other.col || other.col + other.size <= obj.col);
          }
          if (apart) free.push_back(obj);
        }
      }
      if (free.empty()) break;
      std::uniform_int_distribution<std::size_t> pick(0, free.size() - 1);
      sample.objects.push_back(free[pick(rng)]);
    }
  }
  if (sample.objects.size() != labels.size()) {
    throw ValidationError("cannot place " + std::to_string(labels.size()) + " blocks of side " +
                          std::to_string(block));
  }
  const Matrix jitter = gaussian(rng, n, d, 0.2 / std::sqrt(double(d)));
  for (const auto& obj : sample.objects) {
    for (std::size_t r = obj.row; r < obj.row + obj.size; ++r) {
      for (std::size_t c = obj.col; c < obj.col + obj.size; ++c) {
        const auto k = static_cast<Eigen::Index>(r * config.grid_cols + c);
        sample.inputs.image.row(k) =
            features.row(static_cast<Eigen::Index>(obj.label)) + jitter.row(k);
      }
    }
  }
  if (config.topology == Topology::kLxmertMini) {
    const auto t = static_cast<Eigen::Index>(config.text_tokens);
    sample.inputs.text = gaussian(rng, t, d, 1.0 / std::sqrt(double(d)));
    sample.inputs.text.row(0) = cls_embedding(config);
  }
  sample.label = labels.empty() ? 0 : labels.front();
  return sample;
}

/// One planted object of a seed-chosen class at a seed-chosen location.
inline PlantedSample plant_task(const ToyConfig& config, std::uint64_t seed, std::size_t block = 2) {
  std::mt19937_64 rng(derive_seed(seed, 3));
  std::uniform_int_distribution<std::size_t> pick(0, config.classes - 1);
  return plant_objects(config, seed, {pick(rng)}, block);
}

class ToyModel {
 public:
  explicit ToyModel(ToyConfig config) : config_(std::move(config)) {
    config_.check();
    schedule_ = layer_schedule(config_);
    init_parameters();
    if (config_.wire_classifier) wire_classifier();
  }

  const ToyConfig& config() const { return config_; }
  const std::vector<LayerSpec>& schedule() const { return schedule_; }

  ForwardPass forward(const ToyInputs& inputs, const AttentionOverride& overrides = {}) const {
    check_inputs(inputs);
    ForwardPass pass;
    pass.keep[kImageStream] = keep_or_all(inputs.image_keep, config_.image_tokens());
    pass.keep[kSecondStream] = keep_or_all(inputs.second_keep, config_.second_tokens());
    std::array<Matrix, 2> x = {inputs.image, config_.topology == Topology::kLxmertMini
                                                 ? inputs.text
                                                 : query_embedding_};
    for (const auto& [index, tensor] : overrides) {
      if (index >= schedule_.size()) throw ShapeError("override for missing layer " + std::to_string(index));
      const auto& spec = schedule_[index];
      if (tensor.heads() != config_.heads || tensor.rows() != stream_tokens(spec.query_stream) ||
          tensor.cols() != stream_tokens(spec.kv_stream)) {
        throw ShapeError("override for layer " + std::to_string(index) + " has shape " +
                         tensor.shape_string());
      }
    }

    pass.layers.reserve(schedule_.size());
    for (std::size_t l = 0; l < schedule_.size(); ++l) {
      const auto& spec = schedule_[l];
      auto it = overrides.find(l);
      pass.layers.push_back(attend(l, x[spec.query_stream], x[spec.kv_stream],
                                   pass.keep[spec.kv_stream],
                                   it == overrides.end() ? nullptr : &it->second));
      x[spec.query_stream] = output_of(l, pass.layers.back());
    }
    pass.final = x;
    pass.logits = readout(x[kSecondStream]);
    return pass;
  }

  /// d loss / d P for every layer, in schedule order.
  std::vector<Tensor3d> backward(const ForwardPass& pass, const LossSpec& loss) const {
    loss.check(config_.classes, static_cast<std::size_t>(pass.logits.rows()));
    const auto q = static_cast<Eigen::Index>(loss.query);
    const Eigen::RowVectorXd dlogits = loss.gradient(pass.logits.row(q));

    std::array<Matrix, 2> dx = {Matrix::Zero(pass.final[0].rows(), pass.final[0].cols()),
                                Matrix::Zero(pass.final[1].rows(), pass.final[1].cols())};
    const auto row = config_.topology == Topology::kLxmertMini ? 0 : q;
    dx[kSecondStream].row(row) = dlogits * classifier_;

    const std::size_t dh = config_.head_width();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor3d> grads(schedule_.size());
    for (std::size_t l = schedule_.size(); l-- > 0;) {
      const auto& spec = schedule_[l];
      const auto& cache = pass.layers[l];
      const auto& w = layers_[l];

      const Matrix dout = dx[spec.query_stream];
      const Matrix dt = dout * w.w2.transpose();
      const Matrix dpre = (dt.array() * (1.0 - cache.t.array().square())).matrix();
      const Matrix dy = dout + dpre * w.w1.transpose();
      const Matrix dconcat = dy * w.wo.transpose();

      Matrix dxq = dy;
      Matrix dxkv = Matrix::Zero(cache.xkv.rows(), cache.xkv.cols());
      std::vector<Matrix> dp(config_.heads);
      for (std::size_t h = 0; h < config_.heads; ++h) {
        const Matrix d_o = dconcat.middleCols(static_cast<Eigen::Index>(h * dh),
                                              static_cast<Eigen::Index>(dh));
        dp[h] = d_o * cache.v[h].transpose();
        const Matrix dv = cache.p[h].transpose() * d_o;
        dxkv.noalias() += dv * w.wv[h].transpose();
        if (!cache.overridden) {
          const Matrix& p = cache.p[h];
          const Eigen::VectorXd inner = (dp[h].array() * p.array()).rowwise().sum();
          Matrix ds = (p.array() * (dp[h].colwise() - inner).array()).matrix() * scale;
          dxq.noalias() += (ds * cache.k[h]) * w.wq[h].transpose();
          dxkv.noalias() += (ds.transpose() * cache.q[h]) * w.wk[h].transpose();
        }
      }
      grads[l] = stack_heads(dp);

      if (spec.query_stream == spec.kv_stream) {
        dx[spec.query_stream] = dxq + dxkv;
      } else {
        dx[spec.query_stream] = dxq;
        dx[spec.kv_stream] += dxkv;
      }
    }
    return grads;
  }

  std::vector<Tensor3d> attention_gradients(const ToyInputs& inputs, const LossSpec& loss) const {
    return backward(forward(inputs), loss);
  }

  double loss_value(const ToyInputs& inputs, const LossSpec& loss,
                    const AttentionOverride& overrides = {}) const {
    const ForwardPass pass = forward(inputs, overrides);
    loss.check(config_.classes, static_cast<std::size_t>(pass.logits.rows()));
    return loss.value(pass.logits.row(static_cast<Eigen::Index>(loss.query)));
  }

  /// Arg-max class of output row `row`.
  std::size_t predict(const ToyInputs& inputs, std::size_t row = 0) const {
    const ForwardPass pass = forward(inputs);
    Eigen::Index best = 0;
    pass.logits.row(static_cast<Eigen::Index>(row)).maxCoeff(&best);
    return static_cast<std::size_t>(best);
  }

  /// Softmax class probabilities for each output row.
  static Matrix probabilities(const Matrix& logits) {
    Matrix p = logits;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double m = p.row(i).maxCoeff();
      p.row(i) = (p.row(i).array() - m).exp().matrix();
      p.row(i) /= p.row(i).sum();
    }
    return p;
  }

  /// Runs forward and backward and packs the result as a trace (float32).
  AttentionTrace make_trace(const ToyInputs& inputs, const LossSpec& loss) const {
    const ForwardPass pass = forward(inputs);
    const std::vector<Tensor3d> grads = backward(pass, loss);
    return assemble_trace(pass, grads, loss);
  }

  AttentionTrace assemble_trace(const ForwardPass& pass, const std::vector<Tensor3d>& grads,
                                const LossSpec& loss) const {
    AttentionTrace trace;
    TokenMeta image;
    image.stream = {kImageStream, "image"};
    image.count = config_.image_tokens();
    image.grid = GridShape{config_.grid_rows, config_.grid_cols, 0};
    image.modality = "image";
    image.source = 1;
    TokenMeta second;
    second.count = config_.second_tokens();
    second.source = 2;
    if (config_.topology == Topology::kLxmertMini) {
      second.stream = {kSecondStream, "text"};
      second.modality = "text";
      second.cls_index = 0;
    } else {
      second.stream = {kSecondStream, "queries"};
      second.modality = "query";
      second.cls_index = loss.query;
      image.noise_link = true;
    }
    trace.tokens = {image, second};
    trace.loss_descriptor = loss.describe() + " topology=" + std::string(to_string(config_.topology)) +
                            " seed=" + std::to_string(config_.seed);
    for (std::size_t l = 0; l < schedule_.size(); ++l) {
      LayerRecord rec;
      rec.index = l;
      rec.kind = schedule_[l].kind;
      rec.query_stream = schedule_[l].query_stream;
      rec.kv_stream = schedule_[l].kv_stream;
      rec.attention = to_float(stack_heads(pass.layers[l].p));
      rec.gradient = to_float(grads[l]);
      trace.layers.push_back(std::move(rec));
    }
    return trace;
  }

 private:
  struct LayerParams {
    std::vector<Matrix> wq, wk, wv;
    Matrix wo, w1, w2;
  };

  std::size_t stream_tokens(int stream) const {
    return stream == kImageStream ? config_.image_tokens() : config_.second_tokens();
  }

  static std::vector<std::uint8_t> keep_or_all(const std::vector<std::uint8_t>& keep, std::size_t n) {
    if (keep.empty()) return std::vector<std::uint8_t>(n, 1);
    if (keep.size() != n) throw ShapeError("keep mask has " + std::to_string(keep.size()) +
                                           " entries for " + std::to_string(n) + " tokens");
    return keep;
  }

  void check_inputs(const ToyInputs& in) const {
    const auto d = static_cast<Eigen::Index>(config_.width);
    if (in.image.rows() != static_cast<Eigen::Index>(config_.image_tokens()) || in.image.cols() != d) {
      throw ShapeError("image input is " + std::to_string(in.image.rows()) + "x" +
                       std::to_string(in.image.cols()) + ", expected " +
                       std::to_string(config_.image_tokens()) + "x" + std::to_string(d));
    }
    if (config_.topology == Topology::kLxmertMini) {
      if (in.text.rows() != static_cast<Eigen::Index>(config_.text_tokens) || in.text.cols() != d) {
        throw ShapeError("text input is " + std::to_string(in.text.rows()) + "x" +
                         std::to_string(in.text.cols()) + ", expected " +
                         std::to_string(config_.text_tokens) + "x" + std::to_string(d));
      }
    } else if (in.text.size() != 0) {
      throw ShapeError("detr_mini takes no text input");
    }
  }

  void init_parameters() {
    std::mt19937_64 rng(derive_seed(config_.seed, 1));
    const auto d = static_cast<Eigen::Index>(config_.width);
    const auto dh = static_cast<Eigen::Index>(config_.head_width());
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < schedule_.size(); ++l) {
      LayerParams p;
      for (std::size_t h = 0; h < config_.heads; ++h) {
        p.wq.push_back(gaussian(rng, d, dh, s * config_.attention_gain));
        p.wk.push_back(gaussian(rng, d, dh, s * config_.attention_gain));
        p.wv.push_back(gaussian(rng, d, dh, s * config_.value_gain));
      }
      p.wo = gaussian(rng, d, d, s);
      p.w1 = gaussian(rng, d, d, s * config_.ffn_gain);
      p.w2 = gaussian(rng, d, d, 0.5 * s);
      layers_.push_back(std::move(p));
    }
    if (config_.topology == Topology::kDetrMini) {
      query_embedding_ = gaussian(rng, static_cast<Eigen::Index>(config_.queries), d, 1.0);
    }
    classifier_ = Matrix::Zero(static_cast<Eigen::Index>(config_.classes), d);
    bias_ = Matrix::Zero(static_cast<Eigen::Index>(config_.topology == Topology::kLxmertMini ? 1 : config_.queries),
                         static_cast<Eigen::Index>(config_.classes));
  }

  // Class row c is the unit direction in which planting class c moves the
  // readout away from the object-free readout. Each output row gets the
  // bias that zeroes its own object-free logits.
  void wire_classifier() {
    constexpr int kProbes = 6;
    const auto classes = static_cast<Eigen::Index>(config_.classes);
    const std::size_t block = std::min<std::size_t>(2, std::min(config_.grid_rows, config_.grid_cols));
    auto mean_readout = [&](const std::vector<std::size_t>& labels, std::uint64_t tag) {
      Matrix sum;
      for (int k = 0; k < kProbes; ++k) {
        const auto sample = plant_objects(config_, derive_seed(config_.seed, tag + k), labels, block);
        const Matrix out = readout_rows(forward(sample.inputs).final[kSecondStream]);
        sum = k == 0 ? out : Matrix(sum + out);
      }
      return Matrix(sum / kProbes);
    };
    const Matrix empty = mean_readout({}, 1000);
    Matrix response(classes, static_cast<Eigen::Index>(config_.width));
    double scale = 0.0;
    for (Eigen::Index c = 0; c < classes; ++c) {
      const Matrix shift = mean_readout({static_cast<std::size_t>(c)}, 1000 + 16 * (c + 1)) - empty;
      response.row(c) = shift.colwise().mean();
      scale += response.row(c).norm();
    }
    scale /= static_cast<double>(classes);
    constexpr double kMargin = 8.0;
    for (Eigen::Index c = 0; c < classes; ++c) {
      classifier_.row(c) = response.row(c) * (kMargin / (scale * response.row(c).norm()));
    }
    bias_ = -(empty * classifier_.transpose());
  }

  LayerCache attend(std::size_t l, const Matrix& xq, const Matrix& xkv,
                    const std::vector<std::uint8_t>& keep, const Tensor3d* override_p) const {
    const auto& w = layers_[l];
    const std::size_t dh = config_.head_width();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    LayerCache c;
    c.xq = xq;
    c.xkv = xkv;
    c.overridden = override_p != nullptr;
    Matrix concat(xq.rows(), static_cast<Eigen::Index>(config_.width));
    for (std::size_t h = 0; h < config_.heads; ++h) {
      c.q.push_back(xq * w.wq[h]);
      c.k.push_back(xkv * w.wk[h]);
      c.v.push_back(xkv * w.wv[h]);
      Matrix p;
      if (override_p != nullptr) {
        p = override_p->head(h);
      } else {
        p = masked_softmax(c.q[h] * c.k[h].transpose() * scale, keep);
      }
      concat.middleCols(static_cast<Eigen::Index>(h * dh), static_cast<Eigen::Index>(dh)) = p * c.v[h];
      c.p.push_back(std::move(p));
    }
    c.y = xq + concat * w.wo;
    c.t = (c.y * w.w1).array().tanh().matrix();
    return c;
  }

  Matrix output_of(std::size_t l, const LayerCache& c) const { return c.y + c.t * layers_[l].w2; }

  static Matrix masked_softmax(const Matrix& scores, const std::vector<std::uint8_t>& keep) {
    Matrix p = Matrix::Zero(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < scores.cols(); ++j) {
        if (keep[static_cast<std::size_t>(j)]) m = std::max(m, scores(i, j));
      }
      if (!std::isfinite(m)) throw ValidationError("every key token of an attention layer is masked");
      double sum = 0.0;
      for (Eigen::Index j = 0; j < scores.cols(); ++j) {
        if (keep[static_cast<std::size_t>(j)]) {
          p(i, j) = std::exp(scores(i, j) - m);
          sum += p(i, j);
        }
      }
      p.row(i) /= sum;
    }
    return p;
  }

  // Rows of the second stream that feed the classifier: the CLS token for
  // lxmert_mini, every query for detr_mini.
  Matrix readout_rows(const Matrix& second) const {
    if (config_.topology == Topology::kLxmertMini) return second.topRows(1);
    return second;
  }

  Matrix readout(const Matrix& second) const {
    return readout_rows(second) * classifier_.transpose() + bias_;
  }

  ToyConfig config_;
  std::vector<LayerSpec> schedule_;
  std::vector<LayerParams> layers_;
  Matrix query_embedding_;
  Matrix classifier_;  // [C, d]
  Matrix bias_;  // [readout rows, C]
};

}  // namespace hetattr::toy

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

// Planted evaluation suites built on the toy model: a segmentation suite
// (detr_mini, one trace per confident query) and a perturbation suite
// (lxmert_mini, one trace per sample), plus the fixed trace set used for
// fixtures and self-checks.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hetattr/evaluation.hpp"
#include "hetattr/propagation.hpp"
#include "hetattr/toy_model.hpp"
#include "hetattr/trace.hpp"

namespace hetattr::suites {

using toy::LossSpec;
using toy::PlantedObject;
using toy::ToyConfig;
using toy::ToyModel;
using toy::Topology;

inline nlohmann::json config_to_json(const ToyConfig& c) {
  return {{"topology", std::string(to_string(c.topology))},
          {"width", c.width},
          {"heads", c.heads},
          {"image_layers", c.image_layers},
          {"text_layers", c.text_layers},
          {"cross_layers", c.cross_layers},
          {"grid_rows", c.grid_rows},
          {"grid_cols", c.grid_cols},
          {"text_tokens", c.text_tokens},
          {"queries", c.queries},
          {"classes", c.classes},
          {"seed", c.seed},
          {"attention_gain", c.attention_gain},
          {"value_gain", c.value_gain},
          {"ffn_gain", c.ffn_gain},
          {"plant_strength", c.plant_strength},
          {"background_noise", c.background_noise},
          {"wire_classifier", c.wire_classifier}};
}

inline ToyConfig config_from_json(const nlohmann::json& j) {
  try {
    ToyConfig c;
    c.topology = toy::parse_topology(j.at("topology").get<std::string>());
    c.width = j.at("width").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.image_layers = j.at("image_layers").get<std::size_t>();
    c.text_layers = j.at("text_layers").get<std::size_t>();
    c.cross_layers = j.at("cross_layers").get<std::size_t>();
    c.grid_rows = j.at("grid_rows").get<std::size_t>();
    c.grid_cols = j.at("grid_cols").get<std::size_t>();
    c.text_tokens = j.at("text_tokens").get<std::size_t>();
    c.queries = j.at("queries").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.attention_gain = j.at("attention_gain").get<double>();
    c.value_gain = j.at("value_gain").get<double>();
    c.ffn_gain = j.at("ffn_gain").get<double>();
    c.plant_strength = j.at("plant_strength").get<double>();
    c.background_noise = j.at("background_noise").get<double>();
    c.wire_classifier = j.at("wire_classifier").get<bool>();
    c.check();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("model config: ") + e.what());
  }
}

inline nlohmann::json object_to_json(const PlantedObject& o) {
  return {{"row", o.row}, {"col", o.col}, {"size", o.size}, {"label", o.label}};
}

inline PlantedObject object_from_json(const nlohmann::json& j) {
  try {
    return {j.at("row").get<std::size_t>(), j.at("col").get<std::size_t>(),
            j.at("size").get<std::size_t>(), j.at("label").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("planted object: ") + e.what());
  }
}

/// Patch mask of one planted object, upsampled to pixels.
inline BinaryMask object_pixels(const PlantedObject& o, std::size_t grid_rows, std::size_t grid_cols,
                                std::size_t upsample) {
  BinaryMask patches(grid_rows, grid_cols);
  for (std::size_t r = 0; r < grid_rows; ++r) {
    for (std::size_t c = 0; c < grid_cols; ++c) patches(r, c) = o.covers(r, c) ? 1 : 0;
  }
  return upsample_nearest(patches, grid_rows * upsample, grid_cols * upsample);
}

// ---------------------------------------------------------------------------
// Named traces covering every layer kind and loss family

struct NamedTrace {
  std::string name;
  AttentionTrace trace;
};

inline ToyConfig lxmert_config(std::uint64_t seed) {
  ToyConfig c;
  c.topology = Topology::kLxmertMini;
  c.seed = seed;
  return c;
}

inline ToyConfig detr_config(std::uint64_t seed) {
  ToyConfig c;
  c.topology = Topology::kDetrMini;
  c.seed = seed;
  return c;
}

/// Two planted objects of classes 0 and 1 explained with the logit
/// difference between them.
struct SignFixture {
  ToyConfig config;
  std::uint64_t sample_seed = 0;
  toy::PlantedSample sample;
  AttentionTrace trace;
};

inline SignFixture sign_fixture(std::uint64_t seed) {
  SignFixture f;
  f.config = lxmert_config(seed);
  f.sample_seed = toy::derive_seed(seed, 4000);
  const ToyModel model(f.config);
  f.sample = toy::plant_objects(f.config, f.sample_seed, {0, 1}, 2);
  f.trace = model.make_trace(f.sample.inputs, LossSpec::difference(0, 1));
  return f;
}

inline std::vector<NamedTrace> core_traces(std::uint64_t seed) {
  std::vector<NamedTrace> out;
  {
    const ToyConfig config = lxmert_config(seed);
    const ToyModel model(config);
    const auto sample = toy::plant_task(config, toy::derive_seed(seed, 4001));
    const std::size_t other = (sample.label + 1) % config.classes;
    out.push_back({"lxmert_single", model.make_trace(sample.inputs, LossSpec::single(sample.label))});
    out.push_back({"lxmert_diff", model.make_trace(sample.inputs, LossSpec::difference(sample.label, other))});
    out.push_back({"lxmert_ratio", model.make_trace(sample.inputs, LossSpec::ratio(sample.label, other))});
    out.push_back({"lxmert_normdiff",
                   model.make_trace(sample.inputs, LossSpec::normalized_difference(sample.label, other))});
  }
  {
    const ToyConfig config = detr_config(seed);
    const ToyModel model(config);
    const auto sample = toy::plant_task(config, toy::derive_seed(seed, 4002));
    const std::size_t other = (sample.label + 1) % config.classes;
    out.push_back({"detr_single", model.make_trace(sample.inputs, LossSpec::single(sample.label, 0))});
    out.push_back({"detr_diff", model.make_trace(sample.inputs, LossSpec::difference(sample.label, other, 1))});
  }
  out.push_back({"two_object_diff", sign_fixture(seed).trace});
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation suite

inline constexpr double kQueryConfidence = 0.5;

struct SegQuery {
  std::size_t query = 0;
  std::size_t label = 0;
  double confidence = 0.0;
  AttentionTrace trace;
};

struct SegSample {
  std::vector<PlantedObject> objects;
  std::vector<SegQuery> queries;  // only queries above kQueryConfidence
};

struct SegSuite {
  ToyConfig config;
  std::size_t upsample = 8;
  std::vector<SegSample> samples;
};

struct SegSuiteOptions {
  std::size_t samples = 24;
  std::size_t grid = 6;
  std::size_t upsample = 8;
};

inline SegSuite build_seg_suite(std::uint64_t seed, const SegSuiteOptions& opt = {}) {
  SegSuite suite;
  suite.config = detr_config(seed);
  suite.config.grid_rows = opt.grid;
  suite.config.grid_cols = opt.grid;
  suite.upsample = opt.upsample;
  const ToyModel model(suite.config);
  for (std::size_t i = 0; i < opt.samples; ++i) {
    const std::uint64_t sample_seed = toy::derive_seed(seed, 5000 + i);
    std::mt19937_64 rng(sample_seed);
    std::uniform_int_distribution<std::size_t> count(1, 2);
    std::uniform_int_distribution<std::size_t> block(1, 3);
    std::uniform_int_distribution<std::size_t> label(0, suite.config.classes - 1);
    std::vector<std::size_t> labels(count(rng));
    for (auto& l : labels) l = label(rng);
    const auto planted = toy::plant_objects(suite.config, sample_seed, labels, block(rng));

    SegSample sample;
    sample.objects = planted.objects;
    const toy::ForwardPass pass = model.forward(planted.inputs);
    const Matrix probs = ToyModel::probabilities(pass.logits);
    for (Eigen::Index q = 0; q < probs.rows(); ++q) {
      Eigen::Index best = 0;
      const double p = probs.row(q).maxCoeff(&best);
      if (!(p > kQueryConfidence)) continue;
      const auto loss = LossSpec::single(static_cast<std::size_t>(best), static_cast<std::size_t>(q));
      sample.queries.push_back({static_cast<std::size_t>(q), static_cast<std::size_t>(best), p,
                                model.assemble_trace(pass, model.backward(pass, loss), loss)});
    }
    suite.samples.push_back(std::move(sample));
  }
  return suite;
}

/// One evaluated configuration of the segmentation suite.
struct SegMethod {
  std::string name;
  PropagationOptions options;
};

inline std::vector<SegMethod> default_seg_methods() {
  return {{"pos", {CorrectionMode::kPositive, false}},
          {"abs", {CorrectionMode::kAbsolute, false}},
          {"noised", {CorrectionMode::kPositive, true}}};
}

/// Saliency of a query toward the image: its row of the image attribution.
inline SaliencyMap query_saliency(const AttentionTrace& trace, const PropagationOptions& options) {
  const PropagationResult result = propagate(trace, options);
  return cls_interpretation(result, toy::kSecondStream).first;
}

/// Binarizes a saliency map; a constant map yields an empty mask.
inline BinaryMask predicted_mask(const SaliencyMap& map, const BinarizationConfig& cfg,
                                 std::size_t upsample) {
  const std::size_t rows = map.grid->rows * upsample;
  const std::size_t cols = map.grid->cols * upsample;
  try {
    return binarize_and_upsample(map, cfg, rows, cols);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumerical) throw;
    return BinaryMask(rows, cols);
  }
}

inline SegmentationScore evaluate_seg(const SegSuite& suite, const PropagationOptions& options,
                                      const BinarizationConfig& cfg, double iou_min = 0.2) {
  std::vector<ImageInstances> images;
  for (const auto& sample : suite.samples) {
    ImageInstances image;
    for (const auto& obj : sample.objects) {
      image.ground_truths.push_back(
          object_pixels(obj, suite.config.grid_rows, suite.config.grid_cols, suite.upsample));
    }
    for (const auto& q : sample.queries) {
      image.predictions.push_back(
          {predicted_mask(query_saliency(q.trace, options), cfg, suite.upsample), q.confidence});
    }
    images.push_back(std::move(image));
  }
  return score_masks(images, iou_min, SizeBuckets::for_patch(suite.upsample, suite.upsample));
}

// ---------------------------------------------------------------------------
// Perturbation suite

struct PerturbSample {
  std::uint64_t seed = 0;  // plant_task seed
  std::size_t label = 0;
  std::size_t predicted = 0;
  AttentionTrace trace;    // single-logit loss on the predicted class
};

struct PerturbSuite {
  ToyConfig config;
  std::vector<PerturbSample> samples;
};

inline PerturbSuite build_perturb_suite(std::uint64_t seed, std::size_t count = 24) {
  PerturbSuite suite;
  suite.config = lxmert_config(seed);
  const ToyModel model(suite.config);
  for (std::size_t i = 0; i < count; ++i) {
    PerturbSample s;
    s.seed = toy::derive_seed(seed, 6000 + i);
    const auto planted = toy::plant_task(suite.config, s.seed);
    s.label = planted.label;
    const toy::ForwardPass pass = model.forward(planted.inputs);
    Eigen::Index best = 0;
    pass.logits.row(0).maxCoeff(&best);
    s.predicted = static_cast<std::size_t>(best);
    const auto loss = LossSpec::single(s.predicted);
    s.trace = model.assemble_trace(pass, model.backward(pass, loss), loss);
    suite.samples.push_back(std::move(s));
  }
  return suite;
}

struct PerturbCurve {
  std::string stream;  // "image" or "text"
  std::string scores;  // "saliency" or "random"
  PerturbationResult result;
};

struct PerturbReport {
  std::string mode;
  double unperturbed_accuracy = 0.0;
  // Saliency curves in panel order: negative image, positive image,
  // negative text, positive text.
  std::vector<PerturbCurve> curves;
  // Same four curves with uniform-random scores.
  std::vector<PerturbCurve> random;

  const PerturbCurve& find(const std::vector<PerturbCurve>& set, std::string_view stream,
                           Polarity polarity) const {
    for (const auto& c : set) {
      if (c.stream == stream && c.result.polarity == polarity) return c;
    }
    throw ValidationError("no " + std::string(stream) + " curve");
  }
};

inline PerturbReport evaluate_perturb(const PerturbSuite& suite, CorrectionMode mode,
                                      std::uint64_t random_seed = 0) {
  if (suite.samples.empty()) throw ValidationError("perturbation suite is empty");
  const ToyModel model(suite.config);
  std::vector<toy::ToyInputs> inputs;
  std::vector<PerturbationTarget> image_targets;
  std::vector<PerturbationTarget> text_targets;
  std::vector<PerturbationTarget> image_random;
  std::vector<PerturbationTarget> text_random;
  std::mt19937_64 rng(toy::derive_seed(random_seed, 7000));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  auto random_scores = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(rng);
    return v;
  };

  PerturbReport report;
  report.mode = std::string(to_string(mode));
  std::size_t hits = 0;
  for (const auto& s : suite.samples) {
    inputs.push_back(toy::plant_task(suite.config, s.seed).inputs);
    hits += model.predict(inputs.back()) == s.label ? 1 : 0;
    const PropagationResult result = propagate(s.trace, mode);
    const auto [image, text] = cls_interpretation(result, toy::kSecondStream);
    std::vector<std::uint8_t> text_locked(text.scores.size(), 0);
    text_locked[*s.trace.stream(toy::kSecondStream).cls_index] = 1;
    image_targets.push_back({image.scores, {}});
    text_targets.push_back({text.scores, text_locked});
    image_random.push_back({random_scores(image.scores.size()), {}});
    text_random.push_back({random_scores(text.scores.size()), text_locked});
  }
  report.unperturbed_accuracy = static_cast<double>(hits) / static_cast<double>(suite.samples.size());

  auto image_correct = [&](std::size_t i, const std::vector<std::uint8_t>& keep) {
    toy::ToyInputs in = inputs[i];
    in.image_keep = keep;
    return model.predict(in) == suite.samples[i].label;
  };
  auto text_correct = [&](std::size_t i, const std::vector<std::uint8_t>& keep) {
    toy::ToyInputs in = inputs[i];
    in.second_keep = keep;
    return model.predict(in) == suite.samples[i].label;
  };
  for (Polarity p : {Polarity::kNegative, Polarity::kPositive}) {
    report.curves.push_back({"image", "saliency", perturbation_curve(image_targets, image_correct, p)});
    report.random.push_back({"image", "random", perturbation_curve(image_random, image_correct, p)});
  }
  for (Polarity p : {Polarity::kNegative, Polarity::kPositive}) {
    report.curves.push_back({"text", "saliency", perturbation_curve(text_targets, text_correct, p)});
    report.random.push_back({"text", "random", perturbation_curve(text_random, text_correct, p)});
  }
  return report;
}

}  // namespace hetattr::suites

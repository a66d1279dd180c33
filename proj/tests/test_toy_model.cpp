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

#include <gtest/gtest.h>

#include <algorithm>

#include "hetattr/check/oracles.hpp"
#include "hetattr/propagation.hpp"
#include "hetattr/toy_model.hpp"

namespace hetattr::toy {
namespace {

ToyConfig config_for(Topology topology, std::uint64_t seed = 0) {
  ToyConfig c;
  c.topology = topology;
  c.seed = seed;
  return c;
}

double max_abs_diff(const std::vector<Tensor3d>& a, const std::vector<Tensor3d>& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t i = 0; i < a[l].size(); ++i) {
      worst = std::max(worst, std::abs(a[l].flat()[i] - b[l].flat()[i]));
    }
  }
  return worst;
}

TEST(ScheduleTest, LxmertMiniKinds) {
  const auto s = layer_schedule(config_for(Topology::kLxmertMini));
  std::string kinds;
  for (const auto& l : s) kinds += std::string(to_string(l.kind));
  EXPECT_EQ(kinds, "AAAABBCCBBCC");
  EXPECT_EQ(s[4].query_stream, kSecondStream);  // text reads image first
  EXPECT_EQ(s[4].kv_stream, kImageStream);
}

TEST(ScheduleTest, DetrMiniKinds) {
  const auto s = layer_schedule(config_for(Topology::kDetrMini));
  std::string kinds;
  for (const auto& l : s) kinds += std::string(to_string(l.kind));
  EXPECT_EQ(kinds, "AAABCB");
}

TEST(ToyModelTest, DeterministicForSeed) {
  const auto config = config_for(Topology::kLxmertMini, 3);
  const ToyModel a(config), b(config);
  const auto sample = plant_task(config, 11);
  EXPECT_EQ(a.forward(sample.inputs).logits, b.forward(sample.inputs).logits);
  const ToyModel c(config_for(Topology::kLxmertMini, 4));
  EXPECT_NE(a.forward(sample.inputs).logits, c.forward(sample.inputs).logits);
}

TEST(ToyModelTest, OwnAttentionOverrideIsFixedPoint) {
  for (auto topology : {Topology::kLxmertMini, Topology::kDetrMini}) {
    const auto config = config_for(topology);
    const ToyModel model(config);
    const auto sample = plant_task(config, 5);
    const ForwardPass pass = model.forward(sample.inputs);
    const auto att = pass.attention();
    AttentionOverride all;
    for (std::size_t l = 0; l < att.size(); ++l) all.emplace(l, att[l]);
    EXPECT_EQ(model.forward(sample.inputs, all).logits, pass.logits);
  }
}

TEST(ToyModelTest, UniformOverrideChangesLogits) {
  const auto config = config_for(Topology::kLxmertMini);
  const ToyModel model(config);
  const auto sample = plant_task(config, 5);
  const ForwardPass pass = model.forward(sample.inputs);
  const auto& p = pass.attention()[4];
  AttentionOverride o{{4, Tensor3d(p.heads(), p.rows(), p.cols(), 1.0 / static_cast<double>(p.cols()))}};
  EXPECT_GT((model.forward(sample.inputs, o).logits - pass.logits).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ToyModelTest, GradientsMatchFiniteDifferences) {
  for (auto topology : {Topology::kLxmertMini, Topology::kDetrMini}) {
    for (std::uint64_t seed : {0u, 1u}) {
      const auto config = config_for(topology, seed);
      const ToyModel model(config);
      const auto sample = plant_task(config, 100 + seed);
      for (const auto& loss : {LossSpec::single(sample.label), LossSpec::difference(0, 1)}) {
        const auto report = check::finite_difference_check(model, sample.inputs, loss);
        EXPECT_LE(report.max_relative_error, 1e-4)
            << to_string(topology) << " seed " << seed << " " << loss.describe() << " layer "
            << report.worst_layer << " analytic " << report.worst_analytic << " numeric "
            << report.worst_numeric;
        EXPECT_GT(report.entries, 100u);
      }
    }
  }
}

TEST(ToyModelTest, DifferenceGradientIsDifferenceOfSingles) {
  const auto config = config_for(Topology::kLxmertMini, 2);
  const ToyModel model(config);
  const auto sample = plant_task(config, 9);
  const auto g1 = model.attention_gradients(sample.inputs, LossSpec::single(1));
  const auto g3 = model.attention_gradients(sample.inputs, LossSpec::single(3));
  const auto diff = model.attention_gradients(sample.inputs, LossSpec::difference(1, 3));
  std::vector<Tensor3d> expect = g1;
  for (std::size_t l = 0; l < expect.size(); ++l) {
    for (std::size_t i = 0; i < expect[l].size(); ++i) expect[l].flat()[i] -= g3[l].flat()[i];
  }
  EXPECT_LE(max_abs_diff(diff, expect), 1e-10);
  EXPECT_GT(max_abs_diff(diff, g1), 1e-6);
}

TEST(ToyModelTest, LayersAfterLastTextReadHaveZeroGradient) {
  // The last B(image<-text) and C(image) layers never reach the text CLS.
  const auto config = config_for(Topology::kLxmertMini);
  const ToyModel model(config);
  const auto sample = plant_task(config, 1);
  const auto grads = model.attention_gradients(sample.inputs, LossSpec::single(sample.label));
  ASSERT_EQ(grads.size(), 12u);
  for (std::size_t l : {9u, 11u}) {
    for (double g : grads[l].flat()) EXPECT_EQ(g, 0.0) << "layer " << l;
  }
  double reach = 0.0;
  for (double g : grads[10].flat()) reach = std::max(reach, std::abs(g));
  EXPECT_GT(reach, 0.0);
}

TEST(ToyModelTest, TraceMetadata) {
  const auto lx = config_for(Topology::kLxmertMini);
  const auto lx_trace = ToyModel(lx).make_trace(plant_task(lx, 0).inputs, LossSpec::single(2));
  EXPECT_TRUE(validate(lx_trace).empty());
  EXPECT_EQ(lx_trace.stream(kSecondStream).cls_index, 0u);
  EXPECT_FALSE(lx_trace.stream(kImageStream).noise_link);
  EXPECT_EQ(lx_trace.stream(kImageStream).grid->cells(), 16u);

  const auto detr = config_for(Topology::kDetrMini);
  const auto detr_trace = ToyModel(detr).make_trace(plant_task(detr, 0).inputs, LossSpec::single(1, 2));
  EXPECT_TRUE(validate(detr_trace).empty());
  EXPECT_TRUE(detr_trace.stream(kImageStream).noise_link);
  EXPECT_EQ(detr_trace.stream(kSecondStream).cls_index, 2u);
  EXPECT_NE(detr_trace.loss_descriptor.find("single:1@2"), std::string::npos);
}

TEST(PlantedTaskTest, BlockCoversExpectedCells) {
  const auto config = config_for(Topology::kLxmertMini);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto sample = plant_task(config, seed, 2);
    const auto mask = sample.mask(config);
    EXPECT_EQ(std::count(mask.begin(), mask.end(), 1), 4);
  }
}

TEST(PlantedTaskTest, TwoObjectsDoNotOverlap) {
  const auto config = config_for(Topology::kLxmertMini);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto sample = plant_objects(config, seed, {0, 1}, 2);
    const auto a = sample.object_mask(config, 0);
    const auto b = sample.object_mask(config, 1);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_FALSE(a[i] && b[i]);
  }
  EXPECT_THROW(plant_objects(config, 0, {0, 1, 2, 3, 0}, 2), Error);
}

TEST(PlantedTaskTest, ModelPredictsPlantedClass) {
  for (auto topology : {Topology::kLxmertMini, Topology::kDetrMini}) {
    const auto config = config_for(topology);
    const ToyModel model(config);
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const auto sample = plant_task(config, 500 + seed);
      hits += model.predict(sample.inputs) == sample.label ? 1 : 0;
    }
    EXPECT_GE(hits, 36) << to_string(topology);
  }
}

TEST(PlantedTaskTest, SaliencyRanksPlantedPatchesAboveMedian) {
  const auto config = config_for(Topology::kLxmertMini);
  const ToyModel model(config);
  int good = 0;
  constexpr int kSamples = 30;
  for (std::uint64_t seed = 0; seed < kSamples; ++seed) {
    const auto sample = plant_task(config, 900 + seed);
    const auto trace = model.make_trace(sample.inputs, LossSpec::single(sample.label));
    const auto map = cls_interpretation(propagate(trace, CorrectionMode::kPositive), kSecondStream).first;
    const auto mask = sample.mask(config);
    std::vector<double> background;
    double planted = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) planted += map.scores[i] / 4.0;
      else background.push_back(map.scores[i]);
    }
    std::nth_element(background.begin(), background.begin() + background.size() / 2, background.end());
    good += planted > background[background.size() / 2] ? 1 : 0;
  }
  EXPECT_GE(good, 25);
}

TEST(LossSpecTest, DescribeParseRoundTrip) {
  for (const auto& l : {LossSpec::single(3), LossSpec::difference(1, 2), LossSpec::ratio(0, 3, 2),
                        LossSpec::normalized_difference(2, 1)}) {
    const auto back = LossSpec::parse(l.describe());
    EXPECT_EQ(back.describe(), l.describe());
    EXPECT_EQ(back.kind, l.kind);
    EXPECT_EQ(back.query, l.query);
  }
  EXPECT_THROW(LossSpec::parse("softmax:1"), Error);
  EXPECT_THROW(LossSpec::parse("diff:1"), Error);
}

TEST(LossSpecTest, RatioWithZeroDenominator) {
  Eigen::RowVectorXd z(3);
  z << 1.0, 0.0, 2.0;
  try {
    LossSpec::ratio(0, 1).value(z);
    FAIL() << "expected a numerical error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumerical);
  }
  EXPECT_THROW(LossSpec::normalized_difference(0, 1).gradient(z), Error);
  EXPECT_DOUBLE_EQ(LossSpec::ratio(0, 2).value(z), 0.5);
  EXPECT_DOUBLE_EQ(LossSpec::normalized_difference(0, 2).value(z), -0.5);
}

TEST(LossSpecTest, TargetsChecked) {
  EXPECT_THROW(LossSpec::single(4).check(4, 1), Error);
  EXPECT_THROW(LossSpec::single(0, 3).check(4, 3), Error);
  EXPECT_NO_THROW(LossSpec::difference(0, 3, 2).check(4, 3));
}

}  // namespace
}  // namespace hetattr::toy

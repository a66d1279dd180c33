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

#include <random>

#include "hetattr/check/oracles.hpp"
#include "hetattr/propagation.hpp"
#include "test_support.hpp"

namespace hetattr {
namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, bool nonneg = true) {
  std::uniform_real_distribution<double> u(nonneg ? 0.0 : -1.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

StreamState random_state(std::mt19937_64& rng, Eigen::Index n, Eigen::Index n1, Eigen::Index n2) {
  return {{0, "s"}, random_matrix(rng, n, n1), random_matrix(rng, n, n2)};
}

// Trace with an image source (grid) and a text source (CLS 0), no layers.
AttentionTrace two_source_trace(std::size_t rows, std::size_t cols, std::size_t text) {
  AttentionTrace t;
  TokenMeta image;
  image.stream = {0, "image"};
  image.count = rows * cols;
  image.grid = GridShape{rows, cols, 0};
  image.source = 1;
  TokenMeta words;
  words.stream = {1, "text"};
  words.count = text;
  words.cls_index = 0;
  words.source = 2;
  t.tokens = {image, words};
  return t;
}

Tensor3f single_head(const Matrix& m) {
  Tensor3f t(1, static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      t(0, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = static_cast<float>(m(i, j));
    }
  }
  return t;
}

Tensor3f ones(std::size_t r, std::size_t c) { return Tensor3f(1, r, c, 1.0f); }

TEST(RolloutTest, OneLayerFromIdentity) {
  Matrix abar(2, 2);
  abar << 0.5, 0.5, 0.0, 1.0;
  StreamState s{{0, "x"}, Matrix::Identity(2, 2), Matrix::Zero(2, 3)};
  const StreamState out = rollout_step(s, abar);
  Matrix want(2, 2);
  want << 1.5, 0.5, 0.0, 2.0;
  EXPECT_EQ(out.to_source1, want);
  EXPECT_EQ(out.to_source2, Matrix::Zero(2, 3));
}

TEST(RolloutTest, TwoLayersComposeLeftToRight) {
  std::mt19937_64 rng(1);
  const Matrix a1 = random_matrix(rng, 4, 4);
  const Matrix a2 = random_matrix(rng, 4, 4);
  StreamState s{{0, "x"}, Matrix::Identity(4, 4), Matrix::Zero(4, 2)};
  const StreamState out = rollout_step(rollout_step(s, a1), a2);
  const Matrix i4 = Matrix::Identity(4, 4);
  const Matrix want = check::naive_product(i4 + a2, i4 + a1);
  EXPECT_LE(check::relative_difference(out.to_source1, want), 1e-14);
}

TEST(RolloutTest, RejectsWrongShape) {
  StreamState s{{0, "x"}, Matrix::Identity(3, 3), Matrix::Zero(3, 2)};
  EXPECT_THROW(rollout_step(s, Matrix::Zero(2, 2)), Error);
  EXPECT_THROW(hetero_step(s, s, Matrix::Zero(3, 4)), Error);
}

TEST(HeteroStepTest, IdenticalStatesMatchRolloutBitwise) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index n = 2 + trial % 7;
    const StreamState s = random_state(rng, n, 3 + trial % 4, 1 + trial % 5);
    const Matrix abar = random_matrix(rng, n, n, trial % 2 == 0);
    const StreamState a = hetero_step(s, s, abar);
    const StreamState b = rollout_step(s, abar);
    EXPECT_EQ(a.to_source1, b.to_source1);
    EXPECT_EQ(a.to_source2, b.to_source2);
  }
}

TEST(HeteroStepTest, ZeroQueryStateIsPlainProduct) {
  std::mt19937_64 rng(3);
  const StreamState v = random_state(rng, 5, 5, 3);
  const StreamState q{{1, "q"}, Matrix::Zero(2, 5), Matrix::Zero(2, 3)};
  const Matrix abar = random_matrix(rng, 2, 5);
  const StreamState out = hetero_step(q, v, abar);
  EXPECT_LE(check::relative_difference(out.to_source1, check::naive_product(abar, v.to_source1)), 1e-14);
  EXPECT_LE(check::relative_difference(out.to_source2, check::naive_product(abar, v.to_source2)), 1e-14);
}

TEST(HeteroStepTest, ZeroMapKeepsQueryState) {
  std::mt19937_64 rng(4);
  const StreamState q = random_state(rng, 3, 4, 2);
  const StreamState v = random_state(rng, 6, 4, 2);
  const StreamState out = hetero_step(q, v, Matrix::Zero(3, 6));
  EXPECT_EQ(out.to_source1, q.to_source1);
  EXPECT_EQ(out.to_source2, q.to_source2);
}

TEST(NoiseLinkTest, HandExample) {
  Matrix a(2, 2);
  a << 2.0, 0.5, 0.25, 1.5;
  Matrix want(2, 2);
  want << 5.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 5.0 / 3.0;
  EXPECT_LE((noise_link(a) - want).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(NoiseLinkTest, IdentityPassesThrough) {
  EXPECT_EQ(noise_link(Matrix::Identity(4, 4)), Matrix::Identity(4, 4));
}

TEST(NoiseLinkTest, RowsOfRemainderSumToOne) {
  std::mt19937_64 rng(5);
  const Matrix a = Matrix::Identity(6, 6) + random_matrix(rng, 6, 6);
  const Matrix out = noise_link(a) - Matrix::Identity(6, 6);
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_NEAR(out.row(i).sum(), 1.0, 1e-14);
}

TEST(NoiseLinkTest, MatchesScalarLoops) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = Matrix::Identity(6, 6) + random_matrix(rng, 6, 6);
    if (trial % 5 == 0) a.row(2) = Matrix::Identity(6, 6).row(2);  // zero-sum remainder row
    EXPECT_LE((noise_link(a) - check::scalar_noise_link(a)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(InitialStatesTest, IdentityTowardOwnSource) {
  AttentionTrace t = two_source_trace(2, 2, 3);
  TokenMeta fused;
  fused.stream = {2, "fused"};
  fused.count = 5;
  t.tokens.push_back(fused);
  const auto states = initial_states(t.tokens);
  EXPECT_EQ(states.at(0).to_source1, Matrix::Identity(4, 4));
  EXPECT_EQ(states.at(0).to_source2, Matrix::Zero(4, 3));
  EXPECT_EQ(states.at(1).to_source1, Matrix::Zero(3, 4));
  EXPECT_EQ(states.at(1).to_source2, Matrix::Identity(3, 3));
  EXPECT_EQ(states.at(2).to_source1, Matrix::Zero(5, 4));
  EXPECT_EQ(states.at(2).to_source2, Matrix::Zero(5, 3));
}

TEST(PropagateTest, UniformSelfAttentionGivesColumnSumsOfTwo) {
  // One uniform self layer with unit gradients: Ā = J/N, state = I + J/N,
  // every column sums to 1 + 1.
  AttentionTrace t = two_source_trace(3, 3, 2);
  t.layers.push_back({0, LayerKind::kTypeA, 0, 0, Tensor3f(1, 9, 9, 1.0f / 9.0f), ones(9, 9)});
  const auto result = propagate(t, CorrectionMode::kPositive);
  const SaliencyMap total = patch_total_attention(result, 0);
  ASSERT_EQ(total.scores.size(), 9u);
  for (double v : total.scores) EXPECT_NEAR(v, 2.0, 1e-7);
}

TEST(PropagateTest, ClsRowAfterOneCrossLayer) {
  AttentionTrace t = two_source_trace(2, 2, 3);
  Matrix att(3, 4);
  att << 0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1;
  t.layers.push_back({0, LayerKind::kTypeB, 1, 0, single_head(att), ones(3, 4)});
  const auto result = propagate(t, CorrectionMode::kAbsolute);
  const auto [image, text] = cls_interpretation(result, 1);
  ASSERT_EQ(image.scores.size(), 4u);
  EXPECT_NEAR(image.scores[0], 0.1, 1e-7);
  EXPECT_NEAR(image.scores[3], 0.4, 1e-7);
  EXPECT_EQ(text.scores, (std::vector<double>{1.0, 0.0, 0.0}));
  EXPECT_TRUE(image.grid.has_value());
  EXPECT_EQ(image.grid_scores().size(), 4u);
}

TEST(PropagateTest, SourceSeparationWithoutCrossIntoImage) {
  std::mt19937_64 rng(7);
  AttentionTrace t = two_source_trace(2, 3, 4);
  t.layers.push_back({0, LayerKind::kTypeA, 0, 0, testing::random_attention(rng, 2, 6, 6),
                      testing::random_gradient(rng, 2, 6, 6)});
  t.layers.push_back({1, LayerKind::kTypeB, 1, 0, testing::random_attention(rng, 2, 4, 6),
                      testing::random_gradient(rng, 2, 4, 6)});
  t.layers.push_back({2, LayerKind::kTypeC, 1, 1, testing::random_attention(rng, 2, 4, 4),
                      testing::random_gradient(rng, 2, 4, 4)});
  for (auto mode : {CorrectionMode::kPositive, CorrectionMode::kFull, CorrectionMode::kAbsolute}) {
    const auto result = propagate(t, mode);
    EXPECT_EQ(result.state(0).to_source2, Matrix::Zero(6, 4));
  }
}

TEST(PropagateTest, ZeroGradientsLeaveInitialStates) {
  auto t = testing::random_trace(8, {.derived_stream = true});
  for (auto& l : t.layers) l.gradient = Tensor3f(l.gradient.heads(), l.gradient.rows(), l.gradient.cols());
  const auto result = propagate(t, CorrectionMode::kFull);
  const auto init = initial_states(t.tokens);
  for (const auto& [id, s] : init) {
    EXPECT_EQ(result.state(id).to_source1, s.to_source1);
    EXPECT_EQ(result.state(id).to_source2, s.to_source2);
  }
}

TEST(PropagateTest, NonnegativeUnderPositiveAndAbsolute) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto t = testing::random_trace(seed, {seed % 2 == 0, seed % 3 == 0, 10});
    for (auto mode : {CorrectionMode::kPositive, CorrectionMode::kAbsolute}) {
      for (bool noise : {false, true}) {
        const auto result = propagate(t, PropagationOptions{mode, noise});
        for (const auto& [id, s] : result.states) {
          EXPECT_GE(s.to_source1.minCoeff(), 0.0);
          EXPECT_GE(s.to_source2.minCoeff(), 0.0);
        }
      }
    }
  }
}

TEST(PropagateTest, MatchesBlockOracle) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const bool noise = seed % 3 == 0;
    const auto t = testing::random_trace(seed, {seed % 2 == 0, noise, 12});
    for (int mode = 0; mode < 3; ++mode) {
      const auto cmode = std::array{CorrectionMode::kPositive, CorrectionMode::kFull,
                                    CorrectionMode::kAbsolute}[mode];
      const auto result = propagate(t, PropagationOptions{cmode, noise});
      const auto oracle = check::block_oracle(t, mode, noise);
      for (const auto& meta : t.tokens) {
        for (int source : {1, 2}) {
          EXPECT_LE(check::relative_difference(result.state(meta.stream.id).toward(source),
                                               oracle.block(meta.stream.id, source)),
                    1e-10)
              << "seed " << seed << " mode " << mode << " stream " << meta.stream.id;
        }
      }
    }
  }
}

TEST(PropagateTest, NoiseLinkAppliedOnceBeforeFirstCrossRead) {
  std::mt19937_64 rng(9);
  AttentionTrace t = two_source_trace(2, 2, 3);
  t.tokens[0].noise_link = true;
  t.layers.push_back({0, LayerKind::kTypeA, 0, 0, testing::random_attention(rng, 1, 4, 4),
                      testing::random_gradient(rng, 1, 4, 4)});
  EXPECT_FALSE(propagate(t, PropagationOptions{CorrectionMode::kPositive, true}).noise_link_applied);

  t.layers.push_back({1, LayerKind::kTypeB, 1, 0, testing::random_attention(rng, 1, 3, 4), ones(3, 4)});
  t.layers.push_back({2, LayerKind::kTypeB, 1, 0, testing::random_attention(rng, 1, 3, 4), ones(3, 4)});
  const auto noised = propagate(t, PropagationOptions{CorrectionMode::kPositive, true});
  EXPECT_TRUE(noised.noise_link_applied);
  // Applied once: the image state equals noise_link of its un-noised state.
  const auto plain = propagate(t, PropagationOptions{CorrectionMode::kPositive, false});
  EXPECT_LE(check::relative_difference(noised.state(0).to_source1, noise_link(plain.state(0).to_source1)),
            1e-14);
  const auto oracle = check::block_oracle(t, 0, true);
  EXPECT_LE(check::relative_difference(noised.state(1).to_source1, oracle.block(1, 1)), 1e-12);
}

TEST(PropagateTest, NoiseLinkWithoutFlagIsNoOp) {
  const auto t = testing::random_trace(10, {.layers = 10});
  const auto a = propagate(t, PropagationOptions{CorrectionMode::kPositive, true});
  const auto b = propagate(t, PropagationOptions{CorrectionMode::kPositive, false});
  EXPECT_FALSE(a.noise_link_applied);
  EXPECT_EQ(a.state(1).to_source1, b.state(1).to_source1);
}

TEST(PropagateTest, HomogeneousStageIsStateBeforeFirstHeteroWrite) {
  std::mt19937_64 rng(11);
  AttentionTrace t = two_source_trace(2, 2, 3);
  t.layers.push_back({0, LayerKind::kTypeA, 0, 0, testing::random_attention(rng, 1, 4, 4), ones(4, 4)});
  const Matrix after_self = propagate(t, CorrectionMode::kPositive).state(0).to_source1;
  t.layers.push_back({1, LayerKind::kTypeB, 0, 1, testing::random_attention(rng, 1, 4, 3), ones(4, 3)});
  t.layers.push_back({2, LayerKind::kTypeC, 0, 0, testing::random_attention(rng, 1, 4, 4), ones(4, 4)});
  const auto result = propagate(t, CorrectionMode::kPositive);
  EXPECT_EQ(result.homogeneous_states.at(0).to_source1, after_self);
  const auto total = patch_total_attention(result, 0);
  const Vector sums = after_self.colwise().sum().transpose();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(total.scores[j], sums(static_cast<Eigen::Index>(j)));
}

TEST(PropagateTest, InterpretationErrors) {
  AttentionTrace t = two_source_trace(2, 2, 3);
  const auto result = propagate(t, CorrectionMode::kPositive);
  EXPECT_THROW(cls_interpretation(result, 0), Error);   // image has no CLS
  EXPECT_THROW(patch_total_attention(result, 1), Error);  // text has no grid
  EXPECT_THROW(row_interpretation(result, 1, 3), Error);
}

TEST(PropagateTest, RejectsInvalidTrace) {
  auto t = testing::random_trace(12);
  t.layers[0].attention(0, 0, 0) = 2.0f;
  try {
    propagate(t, CorrectionMode::kPositive);
    FAIL() << "expected a validation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kValidation);
  }
}

}  // namespace
}  // namespace hetattr

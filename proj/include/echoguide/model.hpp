/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The echoguide Authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoguide/demo.hpp"
#include "echoguide/nn.hpp"
#include "echoguide/phantom.hpp"
#include "echoguide/se3.hpp"

namespace echoguide::model {

using nn::Tensor;
using phantom::PlaneId;
using se3::Pose6;

/// Guidance-layer widths of the full-scale reference network (ResNet-34
/// features); the desk-scale model keeps the same three-layer structure.
inline constexpr std::array<int, 3> kFullScaleGuideDims = {2048, 512, 6};

/// Per-axis action scale (mm, mm, mm, deg, deg, deg). Network outputs are
/// produced in these units and action inputs to the dreamer are divided by them.
inline constexpr std::array<double, 6> kActionScale = {60.0, 60.0, 60.0, 45.0, 45.0, 45.0};

struct ModelConfig {
  int h = phantom::kDefaultImageSize;
  int w = phantom::kDefaultImageSize;
  std::array<int, 4> conv_channels = {8, 16, 32, 64};
  int feature_dim = 128;
  std::array<int, 2> guide_hidden = {256, 64};
  int num_planes = phantom::kNumPlanes;
  int query_dim = 16;
  bool with_dreamer = false;
  int attn_blocks = 2;
  int attn_heads = 4;
  int ff_dim = 256;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

/// Encoder E, guidance layer G with plane queries, and optionally the latent
/// world model I. Parameters live in one ParamStore.
class GuidanceModel {
 public:
  GuidanceModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  bool has_dreamer() const { return cfg_.with_dreamer; }

  /// frames[B, H, W, 1] -> features[B, d]
  Tensor encode(const Tensor& frames) const;
  /// features[B, d], plane per row -> actions[B, 6] in mm / degrees.
  Tensor guide(const Tensor& features, std::span<const int> planes) const;
  /// The query embedding rows selected by a one-hot plane matrix.
  Tensor plane_queries(std::span<const int> planes) const;
  /// features[B, d], actions[B, 6] (mm / degrees) -> predicted features[B, d].
  /// Throws std::logic_error when the model was built without a dreamer.
  Tensor dream(const Tensor& features, const Tensor& actions) const;

  // Single-sample conveniences.
  std::vector<double> encode(const phantom::Frame& frame) const;
  Pose6 guide(std::span<const double> feature, PlaneId plane) const;
  std::vector<double> dream(std::span<const double> feature, const Pose6& action) const;
  /// guide(encode(frame), plane)
  Pose6 predict(const phantom::Frame& frame, PlaneId plane) const;

 private:
  Tensor param(const std::string& name) const { return store_.get(name); }
  Tensor attention_block(const Tensor& x, int block) const;

  ModelConfig cfg_;
  nn::ParamStore store_;
};

/// Stacks frames into a [B, H, W, 1] constant. Throws nn::ShapeError when a
/// frame does not match the configured size.
Tensor frames_to_tensor(std::span<const phantom::FramePtr> frames, int h, int w);
Tensor poses_to_tensor(std::span<const Pose6> poses);

struct LossOptions {
  double beta = 1.0;
  std::array<double, 6> axis_weights = {1, 1, 1, 1, 1, 1};
  std::vector<double> row_weights;  // optional, one per sample
  bool direct_policy_term = true;   // see dreamer_loss
};

/// Baseline batch objective: mean smooth-L1 between guide(encode(frame)) and
/// the target-relative action.
Tensor baseline_loss(const GuidanceModel& model, std::span<const demo::GuidanceSample> batch,
                     const LossOptions& opts = {});

/// Differentiable action combination: a_1 = from_matrix(U(a_12) * U(a_2))
/// applied per row of a_2[N, 6] with constant a_12. Rows whose result hits
/// gimbal lock are flagged in `skipped` (value falls back to the canonical
/// decomposition, Jacobian zeroed).
Tensor combine_actions(std::span<const Pose6> a_12, const Tensor& a_2, std::vector<bool>* skipped = nullptr);

struct DreamerLoss {
  Tensor loss;
  Tensor a1_pred;  // [B, 6]
  Tensor a2_pred;  // [B, 6]
  int skipped = 0;
};

/// Joint objective on permutation samples:
///   f1 = E(S1), f2' = I(f1, a_12), a2' = G(f2', q), a1' = a_12 (+) a2'
///   L = SL1(a1', a_1T) + SL1(a2', a_2T) [+ SL1(G(f1, q), a_1T) if direct_policy_term]
DreamerLoss dreamer_loss(const GuidanceModel& model, std::span<const demo::PermutationSample> batch,
                         const LossOptions& opts = {});

// ---- persistence ---------------------------------------------------------

/// Metadata stored in the checkpoint header next to the model config.
struct CheckpointMeta {
  std::string variant;          // "baseline" or "dreamer"
  std::string train_manifest;   // manifest hash of the training split
  std::string train_config;     // JSON of the training configuration
  int epochs_completed = 0;
  std::vector<std::uint64_t> train_subjects;
};

void save_model(const std::filesystem::path& path, const GuidanceModel& model, const CheckpointMeta& meta);

struct LoadedModel {
  GuidanceModel model;
  CheckpointMeta meta;
};

/// Restores parameters and optimizer moments. Throws nn::CheckpointError.
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace echoguide::model

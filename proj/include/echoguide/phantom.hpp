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
#include <memory>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "echoguide/se3.hpp"

namespace echoguide::phantom {

/// Number of target planes.
inline constexpr int kNumPlanes = 3;

/// Index of a target standard plane: 0 = long-axis, 1 = short-axis at the
/// aortic valve, 2 = short-axis at the mitral valve (synthetic analogues).
class PlaneId {
 public:
  /// Throws std::out_of_range for indices outside [0, kNumPlanes).
  explicit PlaneId(int index);
  int index() const { return index_; }
  std::string_view name() const;
  friend bool operator==(const PlaneId&, const PlaneId&) = default;

 private:
  int index_;
};

/// Grayscale slice image, row-major, intensities in [0, 1].
struct Frame {
  int h = 0;
  int w = 0;
  double spacing = 1.0;  // mm per pixel
  std::vector<float> pixels;

  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * w + c]; }
  friend bool operator==(const Frame&, const Frame&) = default;
};

using FramePtr = std::shared_ptr<const Frame>;

inline constexpr double kBlobCore = 0.75;

/// Blend weight of a blob at squared normalized radius r2.
double blob_weight(double r2);

/// Smooth ellipsoidal inclusion. The weight is 1 inside the core radius,
/// falls to 0 at the boundary along a cubic smoothstep and is 0 outside
/// (r = normalized radius). It is continuously differentiable.
struct Blob {
  Eigen::Vector3d center;      // mm
  Eigen::Vector3d semi_axes;   // mm
  Eigen::Vector3d angles_deg;  // rx, ry, rz of the ellipsoid frame
  double intensity = 0.5;
};

/// Immutable procedural volume. Blobs are blended in order:
/// value <- value + (intensity - value) * weight.
class Phantom {
 public:
  Phantom(std::uint64_t subject_seed, std::vector<Blob> blobs, double background, double noise_sigma);

  std::uint64_t subject_seed() const { return subject_seed_; }
  const std::vector<Blob>& blobs() const { return blobs_; }
  double background() const { return background_; }
  double noise_sigma() const { return noise_sigma_; }

  /// Noise-free field value at a point in phantom coordinates (mm), clamped to [0, 1].
  double field(const Eigen::Vector3d& p) const;

  /// Copy with a different speckle strength.
  Phantom with_noise(double sigma) const;

 private:
  std::uint64_t subject_seed_;
  std::vector<Blob> blobs_;
  // Per-blob world-to-blob rotation scaled by inverse semi-axes.
  std::vector<Eigen::Matrix3d> to_unit_;
  double background_;
  double noise_sigma_;
};

inline constexpr double kDefaultNoiseSigma = 0.08;
inline constexpr int kDefaultImageSize = 64;
inline constexpr double kDefaultSpacing = 1.5;

/// Blob indices anchoring the three target planes.
inline constexpr std::array<int, kNumPlanes> kAnchorBlobs = {1, 6, 5};

/// Deterministic in the seed; seed 0 is the unjittered template.
Phantom generate_phantom(std::uint64_t subject_seed);

/// Target probe pose per plane: the anchor blob center plus a fixed offset,
/// with a fixed orientation.
std::array<se3::Pose6, kNumPlanes> standard_plane_poses(const Phantom& phantom);

struct SliceGeometry {
  int h = kDefaultImageSize;
  int w = kDefaultImageSize;
  double spacing = kDefaultSpacing;
};

/// Phantom-space position of pixel (r, c) for a probe at `pose`.
Eigen::Vector3d pixel_position(const se3::HomTransform& pose, const SliceGeometry& geom, int r, int c);

/// Samples the field on the probe plane and applies multiplicative
/// log-normal speckle (mean 1, strength phantom.noise_sigma()) drawn from
/// `noise_seed`. Throws std::invalid_argument for h or w < 16.
Frame render_slice(const Phantom& phantom, const se3::Pose6& probe_pose, const SliceGeometry& geom,
                   std::uint64_t noise_seed);

/// Normalized cross-correlation of two equally sized frames.
double normalized_cross_correlation(const Frame& a, const Frame& b);

}  // namespace echoguide::phantom

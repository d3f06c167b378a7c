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

#include "echoguide/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "echoguide/random.hpp"

namespace echoguide::phantom {

PlaneId::PlaneId(int index) : index_(index) {
  if (index < 0 || index >= kNumPlanes) throw std::out_of_range("unknown plane id " + std::to_string(index));
}

std::string_view PlaneId::name() const {
  static constexpr std::array<std::string_view, kNumPlanes> kNames = {"PLAX", "PSAX-AV", "PSAX-MV"};
  return kNames[static_cast<std::size_t>(index_)];
}

double blob_weight(double r2) {
  if (r2 >= 1.0) return 0.0;
  const double r = std::sqrt(r2);
  if (r <= kBlobCore) return 1.0;
  const double t = (r - kBlobCore) / (1.0 - kBlobCore);
  return 1.0 - t * t * (3.0 - 2.0 * t);
}

Phantom::Phantom(std::uint64_t subject_seed, std::vector<Blob> blobs, double background, double noise_sigma)
    : subject_seed_(subject_seed), blobs_(std::move(blobs)), background_(background), noise_sigma_(noise_sigma) {
  if (noise_sigma < 0.0) throw std::invalid_argument("noise sigma must be >= 0");
  to_unit_.reserve(blobs_.size());
  for (const Blob& b : blobs_) {
    const se3::Pose6 orient{0.0, 0.0, 0.0, b.angles_deg.x(), b.angles_deg.y(), b.angles_deg.z()};
    const Eigen::Matrix3d r = se3::to_matrix(orient).rotation();
    to_unit_.push_back(b.semi_axes.cwiseInverse().asDiagonal() * r.transpose());
  }
}

double Phantom::field(const Eigen::Vector3d& p) const {
  double value = background_;
  for (std::size_t i = 0; i < blobs_.size(); ++i) {
    const Eigen::Vector3d q = to_unit_[i] * (p - blobs_[i].center);
    const double r2 = q.squaredNorm();
    if (r2 >= 1.0) continue;
    value += (blobs_[i].intensity - value) * blob_weight(r2);
  }
  return std::clamp(value, 0.0, 1.0);
}

Phantom Phantom::with_noise(double sigma) const { return Phantom(subject_seed_, blobs_, background_, sigma); }

namespace {

constexpr double kBackground = 0.02;
constexpr double kJitterCenterMm = 5.0;
constexpr double kJitterAxisFrac = 0.10;
constexpr double kJitterAngleDeg = 4.0;
constexpr double kJitterIntensity = 0.0015;
constexpr double kHalfCube = 60.0;
constexpr int kNumScatterers = 160;
constexpr std::uint64_t kScattererLayoutSeed = 0x5ca77e7ULL;

// Intensities come from a grid with 0.0035 spacing; jitter stays below half
// the spacing so blob intensities remain pairwise distinct. Anatomical blobs
// use every eighth level and scatterers use the remaining ones.
constexpr int kNumLevels = 256;
double level_intensity(int j) { return 0.05 + 0.0035 * j; }
double grid_intensity(int k) { return level_intensity(8 * k); }

Blob blob(Eigen::Vector3d c, Eigen::Vector3d a, Eigen::Vector3d ang, int k) {
  return Blob{c, a, ang, grid_intensity(k)};
}

std::vector<Blob> template_blobs() {
  using V = Eigen::Vector3d;
  std::vector<Blob> b = {
      blob(V(0, 0, 0), V(52, 38, 36), V(0, 0, 30), 20),        // 0 myocardium
      blob(V(10, -5, 0), V(28, 14, 15), V(5, 0, 30), 1),       // 1 left ventricle
      blob(V(-6, 20, 6), V(24, 9, 17), V(10, 0, 20), 3),       // 2 right ventricle
      blob(V(-32, -18, -4), V(15, 12, 12), V(0, 20, 10), 2),   // 3 left atrium
      blob(V(-22, 6, 12), V(7, 7, 18), V(30, 10, 0), 5),       // 4 aortic root
      blob(V(-12, -10, 0), V(3, 12, 10), V(0, 0, 30), 30),     // 5 mitral valve
      blob(V(-18, 2, 6), V(5, 5, 3), V(30, 10, 0), 31),        // 6 aortic valve
      blob(V(0, 0, 48), V(70, 60, 9), V(0, 0, 10), 15),        // 7 chest wall
      blob(V(20, -10, -6), V(6, 4, 4), V(0, 0, 0), 25),        // 8 papillary muscle
      blob(V(2, 8, 0), V(30, 4, 14), V(0, 0, 30), 27),         // 9 septum
      blob(V(-26, 26, -10), V(13, 11, 12), V(0, 0, -20), 4),   // 10 right atrium
      blob(V(28, 30, -46), V(40, 28, 14), V(0, 10, 0), 10),    // 11 liver edge
  };
  std::vector<int> free_levels;
  for (int j = 0; j < kNumLevels; ++j) {
    if (std::none_of(b.begin(), b.end(), [&](const Blob& x) { return x.intensity == level_intensity(j); })) {
      free_levels.push_back(j);
    }
  }
  // Small scatterers give tilts a visible signature away from the slice center.
  Rng layout(kScattererLayoutSeed);
  for (int i = 0; i < kNumScatterers; ++i) {
    V c(layout.uniform(-50, 50), layout.uniform(-50, 50), layout.uniform(-50, 50));
    V a(layout.uniform(2.5, 7), layout.uniform(2.5, 7), layout.uniform(2.5, 7));
    V ang(layout.uniform(-90, 90), layout.uniform(-60, 60), layout.uniform(-90, 90));
    b.push_back(Blob{c, a, ang, level_intensity(free_levels.at(static_cast<std::size_t>(i)))});
  }
  return b;
}

struct PlaneTemplate {
  Eigen::Vector3d offset;
  se3::Pose6 rotation;  // translation part unused
};

const std::array<PlaneTemplate, kNumPlanes>& plane_templates() {
  static const std::array<PlaneTemplate, kNumPlanes> kTemplates = {{
      {Eigen::Vector3d(0, 0, 0), se3::Pose6{0, 0, 0, 8, 6, 30}},
      {Eigen::Vector3d(0, 0, 0), se3::Pose6{0, 0, 0, -10, 50, 30}},
      {Eigen::Vector3d(6, 0, 0), se3::Pose6{0, 0, 0, 5, 40, 20}},
  }};
  return kTemplates;
}

}  // namespace

Phantom generate_phantom(std::uint64_t subject_seed) {
  std::vector<Blob> blobs = template_blobs();
  if (subject_seed != 0) {
    Rng rng(derive_seed({0x70ba7707ULL, subject_seed}));
    for (Blob& b : blobs) {
      for (int k = 0; k < 3; ++k) {
        b.center[k] = std::clamp(b.center[k] + rng.uniform(-kJitterCenterMm, kJitterCenterMm), -kHalfCube, kHalfCube);
        b.semi_axes[k] *= rng.uniform(1.0 - kJitterAxisFrac, 1.0 + kJitterAxisFrac);
        b.angles_deg[k] += rng.uniform(-kJitterAngleDeg, kJitterAngleDeg);
      }
      b.intensity += rng.uniform(-kJitterIntensity, kJitterIntensity);
    }
  }
  return Phantom(subject_seed, std::move(blobs), kBackground, kDefaultNoiseSigma);
}

std::array<se3::Pose6, kNumPlanes> standard_plane_poses(const Phantom& phantom) {
  std::array<se3::Pose6, kNumPlanes> poses{};
  for (int i = 0; i < kNumPlanes; ++i) {
    const PlaneTemplate& t = plane_templates()[static_cast<std::size_t>(i)];
    const Eigen::Vector3d c = phantom.blobs().at(static_cast<std::size_t>(kAnchorBlobs[static_cast<std::size_t>(i)])).center + t.offset;
    se3::Pose6 p = t.rotation;
    p.x = c.x();
    p.y = c.y();
    p.z = c.z();
    poses[static_cast<std::size_t>(i)] = p;
  }
  return poses;
}

Eigen::Vector3d pixel_position(const se3::HomTransform& pose, const SliceGeometry& geom, int r, int c) {
  const Eigen::Vector3d local((c - geom.w / 2.0) * geom.spacing, (r - geom.h / 2.0) * geom.spacing, 0.0);
  return pose.rotation() * local + pose.translation();
}

Frame render_slice(const Phantom& phantom, const se3::Pose6& probe_pose, const SliceGeometry& geom,
                   std::uint64_t noise_seed) {
  if (geom.h < 16 || geom.w < 16) throw std::invalid_argument("render_slice: h and w must be >= 16");
  if (!(geom.spacing > 0.0)) throw std::invalid_argument("render_slice: spacing must be > 0");
  const se3::HomTransform t = se3::to_matrix(probe_pose);
  Frame f;
  f.h = geom.h;
  f.w = geom.w;
  f.spacing = geom.spacing;
  f.pixels.resize(static_cast<std::size_t>(geom.h) * geom.w);

  const double sigma = phantom.noise_sigma();
  Rng rng(noise_seed);
  std::size_t idx = 0;
  for (int r = 0; r < geom.h; ++r) {
    for (int c = 0; c < geom.w; ++c, ++idx) {
      double v = phantom.field(pixel_position(t, geom, r, c));
      if (sigma > 0.0) v *= std::exp(sigma * rng.normal() - 0.5 * sigma * sigma);
      f.pixels[idx] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return f;
}

double normalized_cross_correlation(const Frame& a, const Frame& b) {
  if (a.pixels.size() != b.pixels.size()) throw std::invalid_argument("NCC: frame sizes differ");
  const double n = static_cast<double>(a.pixels.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    ma += a.pixels[i];
    mb += b.pixels[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double da = a.pixels[i] - ma;
    const double db = b.pixels[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 && sbb == 0.0) return 1.0;
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace echoguide::phantom

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

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "echoguide/phantom.hpp"

using namespace echoguide;
using phantom::Frame;
using phantom::PlaneId;
using se3::Pose6;

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

Eigen::Matrix3d oracle_rotation(double rx, double ry, double rz) {
  return (Eigen::AngleAxisd(rz * kDeg, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(ry * kDeg, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(rx * kDeg, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

// Flat core, cubic smoothstep rim.
double oracle_weight(double r) {
  if (r <= phantom::kBlobCore) return 1.0;
  const double t = (r - phantom::kBlobCore) / (1.0 - phantom::kBlobCore);
  return 1.0 - (3.0 * t * t - 2.0 * t * t * t);
}

// Direct evaluation of the blended ellipsoid field from the blob list.
double oracle_field(const phantom::Phantom& ph, const Eigen::Vector3d& p) {
  double v = ph.background();
  for (const auto& b : ph.blobs()) {
    const Eigen::Matrix3d r = oracle_rotation(b.angles_deg.x(), b.angles_deg.y(), b.angles_deg.z());
    const Eigen::Vector3d local = r.transpose() * (p - b.center);
    const double r2 = local.cwiseQuotient(b.semi_axes).squaredNorm();
    if (r2 < 1.0) v += (b.intensity - v) * oracle_weight(std::sqrt(r2));
  }
  return std::clamp(v, 0.0, 1.0);
}

Eigen::Vector3d oracle_pixel(const Pose6& pose, const phantom::SliceGeometry& g, int r, int c) {
  const Eigen::Vector3d local((c - g.w / 2.0) * g.spacing, (r - g.h / 2.0) * g.spacing, 0.0);
  return oracle_rotation(pose.rx, pose.ry, pose.rz) * local + Eigen::Vector3d(pose.x, pose.y, pose.z);
}

}  // namespace

TEST_CASE("plane ids") {
  CHECK(PlaneId(0).name() == "PLAX");
  CHECK(PlaneId(1).name() == "PSAX-AV");
  CHECK(PlaneId(2).name() == "PSAX-MV");
  CHECK_THROWS_AS(PlaneId(3), std::out_of_range);
  CHECK_THROWS_AS(PlaneId(-1), std::out_of_range);
}

TEST_CASE("phantom generation is deterministic and subject dependent") {
  const auto a = phantom::generate_phantom(42);
  const auto b = phantom::generate_phantom(42);
  const auto c = phantom::generate_phantom(43);
  REQUIRE(a.blobs().size() == b.blobs().size());
  for (std::size_t i = 0; i < a.blobs().size(); ++i) {
    CHECK(a.blobs()[i].center == b.blobs()[i].center);
    CHECK(a.blobs()[i].intensity == b.blobs()[i].intensity);
  }
  bool differs = false;
  for (std::size_t i = 0; i < a.blobs().size(); ++i) differs |= a.blobs()[i].center != c.blobs()[i].center;
  CHECK(differs);
}

TEST_CASE("blob invariants hold for many subjects") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto ph = phantom::generate_phantom(seed);
    REQUIRE(ph.blobs().size() >= 6);
    std::vector<double> levels;
    for (const auto& b : ph.blobs()) {
      levels.push_back(b.intensity);
      CHECK(b.center.cwiseAbs().maxCoeff() <= 60.0);
      CHECK(b.intensity >= 0.0);
      CHECK(b.intensity <= 1.0);
    }
    std::sort(levels.begin(), levels.end());
    CHECK(std::adjacent_find(levels.begin(), levels.end()) == levels.end());
  }
}

TEST_CASE("field matches the blend oracle") {
  const auto ph = phantom::generate_phantom(7);
  for (int i = -40; i <= 40; i += 4) {
    for (int j = -40; j <= 40; j += 8) {
      const Eigen::Vector3d p(i, j, 0.5 * i - 0.25 * j);
      CHECK(ph.field(p) == doctest::Approx(oracle_field(ph, p)).epsilon(1e-12));
    }
  }
}

TEST_CASE("noise-free render samples the field at the slice pixels") {
  const auto ph = phantom::generate_phantom(11).with_noise(0.0);
  const phantom::SliceGeometry g{24, 20, 2.0};
  const Pose6 pose{3.0, -4.0, 5.0, 10.0, -20.0, 35.0};
  const Frame f = phantom::render_slice(ph, pose, g, 99);
  REQUIRE(f.h == 24);
  REQUIRE(f.w == 20);
  for (int r = 0; r < g.h; ++r) {
    for (int c = 0; c < g.w; ++c) {
      const float expect = static_cast<float>(oracle_field(ph, oracle_pixel(pose, g, r, c)));
      CHECK(std::abs(f.at(r, c) - expect) < 1e-6f);
    }
  }
}

TEST_CASE("target planes cut through their anatomy") {
  const auto ph = phantom::generate_phantom(0).with_noise(0.0);
  const auto targets = phantom::standard_plane_poses(ph);
  for (int p = 0; p < phantom::kNumPlanes; ++p) {
    const Frame f = phantom::render_slice(ph, targets[static_cast<std::size_t>(p)], {}, 0);
    float lo = 1.0f, hi = 0.0f;
    for (float v : f.pixels) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(hi - lo > 0.2f);
  }
}

TEST_CASE("speckle is repeatable per seed with unit mean") {
  const auto ph = phantom::generate_phantom(3);
  const auto clean = ph.with_noise(0.0);
  const Pose6 pose = phantom::standard_plane_poses(ph)[0];
  const phantom::SliceGeometry g{64, 64, 1.5};
  const Frame a = phantom::render_slice(ph, pose, g, 5);
  const Frame b = phantom::render_slice(ph, pose, g, 5);
  const Frame c = phantom::render_slice(ph, pose, g, 6);
  const Frame ref = phantom::render_slice(clean, pose, g, 5);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  double ratio = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    if (ref.pixels[i] > 0.05f && ref.pixels[i] < 0.8f) {
      ratio += a.pixels[i] / ref.pixels[i];
      ++n;
    }
  }
  REQUIRE(n > 500);
  CHECK(ratio / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("blob weight is smooth and bounded") {
  CHECK(phantom::blob_weight(0.0) == 1.0);
  CHECK(phantom::blob_weight(1.0) == 0.0);
  CHECK(phantom::blob_weight(4.0) == 0.0);
  const double h = 1e-6;
  double prev = 1.0;
  for (double r = 0.01; r < 1.0; r += 0.01) {
    const double w = phantom::blob_weight(r * r);
    CHECK(w <= prev + 1e-15);
    CHECK(w == doctest::Approx(oracle_weight(r)).epsilon(1e-12));
    prev = w;
  }
  // Derivative vanishes at both ends of the rim.
  for (double r : {phantom::kBlobCore, 1.0}) {
    const double slope = (phantom::blob_weight((r + h) * (r + h)) - phantom::blob_weight((r - h) * (r - h))) / (2 * h);
    CHECK(std::abs(slope) < 1e-4);
  }
}

TEST_CASE("small probe motions change the image") {
  const auto ph = phantom::generate_phantom(0).with_noise(0.0);
  std::mt19937_64 g(17);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int p = 0; p < phantom::kNumPlanes; ++p) {
    for (int k = 0; k < 12; ++k) {
      Pose6 t = phantom::standard_plane_poses(ph)[static_cast<std::size_t>(p)];
      if (k > 0) {
        for (std::size_t a = 0; a < 6; ++a) t[a] += u(g);
      }
      const Frame base = phantom::render_slice(ph, t, {}, 0);
      for (int axis = 0; axis < 6; ++axis) {
        for (double step : {-2.0, 2.0}) {
          Pose6 moved = t;
          moved[static_cast<std::size_t>(axis)] += step;
          const Frame f = phantom::render_slice(ph, moved, {}, 0);
          CHECK(phantom::normalized_cross_correlation(base, f) < 0.999);
        }
      }
    }
  }
}

TEST_CASE("render argument checks") {
  const auto ph = phantom::generate_phantom(1);
  CHECK_THROWS_AS(phantom::render_slice(ph, {}, {8, 64, 1.5}, 0), std::invalid_argument);
  CHECK_THROWS_AS(phantom::render_slice(ph, {}, {64, 64, 0.0}, 0), std::invalid_argument);
}

TEST_CASE("normalized cross correlation") {
  Frame a{16, 16, 1.0, std::vector<float>(256)};
  for (std::size_t i = 0; i < 256; ++i) a.pixels[i] = static_cast<float>(i % 17) / 17.0f;
  Frame b = a;
  for (auto& v : b.pixels) v = 0.5f * v + 0.1f;
  CHECK(phantom::normalized_cross_correlation(a, a) == doctest::Approx(1.0));
  CHECK(phantom::normalized_cross_correlation(a, b) == doctest::Approx(1.0));
  Frame c = a;
  for (auto& v : c.pixels) v = 1.0f - v;
  CHECK(phantom::normalized_cross_correlation(a, c) == doctest::Approx(-1.0));
}

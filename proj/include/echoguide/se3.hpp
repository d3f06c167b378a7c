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
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/LU>

namespace echoguide::se3 {

/// Six-component probe pose or relative action.
///
/// Translation in millimetres, rotation as fixed-axis roll/pitch/yaw in
/// degrees. The rotation block of the corresponding transform is
/// Rz(rz) * Ry(ry) * Rx(rx).
struct Pose6 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double rx = 0.0;
  double ry = 0.0;
  double rz = 0.0;

  static Pose6 from_array(const std::array<double, 6>& v) { return {v[0], v[1], v[2], v[3], v[4], v[5]}; }
  std::array<double, 6> to_array() const { return {x, y, z, rx, ry, rz}; }

  double operator[](std::size_t i) const;
  double& operator[](std::size_t i);

  bool is_finite() const;

  friend bool operator==(const Pose6&, const Pose6&) = default;
};

inline constexpr Pose6 kZeroPose{};

/// Raised when matrix-to-vector conversion hits pitch = +-90 degrees.
class GimbalLock : public std::runtime_error {
 public:
  explicit GimbalLock(double cos_pitch)
      : std::runtime_error("gimbal lock: |cos(pitch)| = " + std::to_string(std::abs(cos_pitch))),
        cos_pitch_(cos_pitch) {}
  double cos_pitch() const noexcept { return cos_pitch_; }

 private:
  double cos_pitch_;
};

inline constexpr double kGimbalThreshold = 1e-6;

/// 4x4 rigid transform with an orthonormal, right-handed rotation block.
class HomTransform {
 public:
  HomTransform() : m_(Eigen::Matrix4d::Identity()) {}

  /// Throws std::invalid_argument if `m` is not a rigid transform (tolerance 1e-9).
  explicit HomTransform(const Eigen::Matrix4d& m);

  static HomTransform identity() { return HomTransform(); }

  const Eigen::Matrix4d& matrix() const { return m_; }
  Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return m_.topRightCorner<3, 1>(); }

  HomTransform operator*(const HomTransform& rhs) const;
  HomTransform inverse() const;

  /// Checks bottom row, orthonormality and determinant.
  static bool is_rigid(const Eigen::Matrix4d& m, double tol = 1e-9);

 private:
  struct Unchecked {};
  HomTransform(const Eigen::Matrix4d& m, Unchecked) : m_(m) {}
  friend HomTransform to_matrix(const Pose6&);

  Eigen::Matrix4d m_;
};

/// Wraps an angle in degrees into (-180, 180].
double wrap_degrees(double deg);

/// Returns `a` with all three angles wrapped into (-180, 180].
Pose6 canonical(const Pose6& a);

HomTransform to_matrix(const Pose6& a);

/// Matrix-to-vector conversion. Throws GimbalLock when |cos(ry)| < 1e-6.
Pose6 from_matrix(const HomTransform& t);

/// Matrix-to-vector conversion that never throws: at gimbal lock it sets
/// rx := 0 and folds the remaining rotation into rz.
Pose6 from_matrix_or_fallback(const HomTransform& t);

Pose6 invert(const Pose6& a);
/// U(a) * U(b) as a vector. Composing with the exact zero pose returns the
/// other operand canonicalized (when its pitch is inside (-90, 90)).
Pose6 compose(const Pose6& a, const Pose6& b);

/// Motion taking pose `p1` to pose `p2`, expressed in the frame of `p1`.
Pose6 relative(const Pose6& p1, const Pose6& p2);

/// Chains an inter-frame action with a frame-to-target action; with exact
/// inputs this telescopes to relative(p1, pT).
Pose6 combine_through_intermediate(const Pose6& a_12, const Pose6& a_2T);

/// Largest componentwise absolute difference, with angle differences wrapped.
double pose_distance_inf(const Pose6& a, const Pose6& b);

namespace kernel {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

// Scalar-generic versions of the conversions, shared by the double API and
// the forward-mode differentiated action combination in the model.

template <typename T>
using Mat4 = std::array<std::array<T, 4>, 4>;

template <typename T>
Mat4<T> to_matrix(const std::array<T, 6>& a) {
  using std::cos;
  using std::sin;
  const T ax = a[3] * kDegToRad;
  const T ay = a[4] * kDegToRad;
  const T az = a[5] * kDegToRad;
  const T cx = cos(ax), sx = sin(ax);
  const T cy = cos(ay), sy = sin(ay);
  const T cz = cos(az), sz = sin(az);
  Mat4<T> m{};
  m[0][0] = cz * cy;
  m[0][1] = cz * sy * sx - sz * cx;
  m[0][2] = cz * sy * cx + sz * sx;
  m[1][0] = sz * cy;
  m[1][1] = sz * sy * sx + cz * cx;
  m[1][2] = sz * sy * cx - cz * sx;
  m[2][0] = -sy;
  m[2][1] = cy * sx;
  m[2][2] = cy * cx;
  m[0][3] = a[0];
  m[1][3] = a[1];
  m[2][3] = a[2];
  m[3][0] = T(0.0);
  m[3][1] = T(0.0);
  m[3][2] = T(0.0);
  m[3][3] = T(1.0);
  return m;
}

template <typename T>
Mat4<T> multiply(const Mat4<T>& a, const Mat4<T>& b) {
  Mat4<T> c{};
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      T s = a[i][0] * b[0][j];
      for (int k = 1; k < 4; ++k) s = s + a[i][k] * b[k][j];
      c[i][j] = s;
    }
  }
  return c;
}

/// Angle extraction without the singularity check; callers check cos(ry).
template <typename T>
std::array<T, 6> from_matrix_unchecked(const Mat4<T>& m) {
  using std::asin;
  using std::atan2;
  T s = -m[2][0];
  // Rounding can push |sin| marginally past 1 near the singularity.
  if (s > T(1.0)) s = T(1.0);
  if (s < T(-1.0)) s = T(-1.0);
  std::array<T, 6> out{};
  out[0] = m[0][3];
  out[1] = m[1][3];
  out[2] = m[2][3];
  out[3] = atan2(m[2][1], m[2][2]) * kRadToDeg;
  out[4] = asin(s) * kRadToDeg;
  out[5] = atan2(m[1][0], m[0][0]) * kRadToDeg;
  return out;
}

}  // namespace kernel

}  // namespace echoguide::se3

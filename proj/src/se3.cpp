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

#include "echoguide/se3.hpp"

#include <algorithm>
#include <cmath>

namespace echoguide::se3 {

double Pose6::operator[](std::size_t i) const {
  switch (i) {
    case 0: return x;
    case 1: return y;
    case 2: return z;
    case 3: return rx;
    case 4: return ry;
    case 5: return rz;
    default: throw std::out_of_range("Pose6 index " + std::to_string(i));
  }
}

double& Pose6::operator[](std::size_t i) {
  switch (i) {
    case 0: return x;
    case 1: return y;
    case 2: return z;
    case 3: return rx;
    case 4: return ry;
    case 5: return rz;
    default: throw std::out_of_range("Pose6 index " + std::to_string(i));
  }
}

bool Pose6::is_finite() const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(z) && std::isfinite(rx) && std::isfinite(ry) &&
         std::isfinite(rz);
}

HomTransform::HomTransform(const Eigen::Matrix4d& m) : m_(m) {
  if (!is_rigid(m)) throw std::invalid_argument("HomTransform: matrix is not a rigid transform");
}

bool HomTransform::is_rigid(const Eigen::Matrix4d& m, double tol) {
  if (!m.allFinite()) return false;
  if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0) return false;
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  const Eigen::Matrix3d err = r.transpose() * r - Eigen::Matrix3d::Identity();
  if (err.cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

HomTransform HomTransform::operator*(const HomTransform& rhs) const {
  Eigen::Matrix4d p = m_ * rhs.m_;
  p.row(3) << 0.0, 0.0, 0.0, 1.0;
  return HomTransform(p, Unchecked{});
}

HomTransform HomTransform::inverse() const {
  Eigen::Matrix4d inv = Eigen::Matrix4d::Identity();
  const Eigen::Matrix3d rt = rotation().transpose();
  inv.topLeftCorner<3, 3>() = rt;
  inv.topRightCorner<3, 1>() = -rt * translation();
  return HomTransform(inv, Unchecked{});
}

double wrap_degrees(double deg) {
  double w = std::fmod(deg, 360.0);
  if (w <= -180.0) w += 360.0;
  if (w > 180.0) w -= 360.0;
  return w;
}

Pose6 canonical(const Pose6& a) {
  Pose6 out = a;
  out.rx = wrap_degrees(a.rx);
  out.ry = wrap_degrees(a.ry);
  out.rz = wrap_degrees(a.rz);
  return out;
}

HomTransform to_matrix(const Pose6& a) {
  const auto k = kernel::to_matrix<double>(a.to_array());
  Eigen::Matrix4d m;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m(i, j) = k[i][j];
  return HomTransform(m, HomTransform::Unchecked{});
}

namespace {

kernel::Mat4<double> to_kernel(const HomTransform& t) {
  kernel::Mat4<double> k{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) k[i][j] = t.matrix()(i, j);
  return k;
}

Pose6 wrapped(const std::array<double, 6>& v) { return canonical(Pose6::from_array(v)); }

}  // namespace

Pose6 from_matrix(const HomTransform& t) {
  const Eigen::Matrix4d& m = t.matrix();
  const double cos_pitch = std::hypot(m(0, 0), m(1, 0));
  if (cos_pitch < kGimbalThreshold) throw GimbalLock(cos_pitch);
  return wrapped(kernel::from_matrix_unchecked(to_kernel(t)));
}

Pose6 from_matrix_or_fallback(const HomTransform& t) {
  const Eigen::Matrix4d& m = t.matrix();
  if (std::hypot(m(0, 0), m(1, 0)) >= kGimbalThreshold) return from_matrix(t);
  // With rx = 0 and sin(ry) = +-1, R[0][1] = -sin(rz) and R[1][1] = cos(rz).
  Pose6 out;
  out.x = m(0, 3);
  out.y = m(1, 3);
  out.z = m(2, 3);
  out.rx = 0.0;
  out.ry = m(2, 0) < 0.0 ? 90.0 : -90.0;
  out.rz = std::atan2(-m(0, 1), m(1, 1)) * kernel::kRadToDeg;
  return canonical(out);
}

Pose6 invert(const Pose6& a) { return from_matrix(to_matrix(a).inverse()); }

Pose6 compose(const Pose6& a, const Pose6& b) {
  // An exact identity operand leaves the other one untouched instead of
  // picking up rounding from the matrix round trip.
  if (b == kZeroPose && std::abs(a.ry) < 90.0) return canonical(a);
  if (a == kZeroPose && std::abs(b.ry) < 90.0) return canonical(b);
  return from_matrix(to_matrix(a) * to_matrix(b));
}

Pose6 relative(const Pose6& p1, const Pose6& p2) { return from_matrix(to_matrix(p1).inverse() * to_matrix(p2)); }

Pose6 combine_through_intermediate(const Pose6& a_12, const Pose6& a_2T) { return compose(a_12, a_2T); }

double pose_distance_inf(const Pose6& a, const Pose6& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < 3; ++i) d = std::max(d, std::abs(a[i] - b[i]));
  for (std::size_t i = 3; i < 6; ++i) d = std::max(d, std::abs(wrap_degrees(a[i] - b[i])));
  return d;
}

}  // namespace echoguide::se3

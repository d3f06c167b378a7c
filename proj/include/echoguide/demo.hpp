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

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "echoguide/phantom.hpp"
#include "echoguide/se3.hpp"

namespace echoguide::demo {

using phantom::FramePtr;
using phantom::PlaneId;
using se3::Pose6;

/// Parameters of the synthetic expert trajectory.
struct ScanConfig {
  phantom::SliceGeometry geom;
  double max_offset_mm = 60.0;   // per-axis translation offset from the target
  double max_offset_deg = 45.0;  // per-axis angle offset from the target
  double max_abs_pitch_deg = 60.0;
  double step_min = 0.1;  // fraction of the remaining offset removed per step
  double step_max = 0.4;
  double jitter_mm = 1.5;  // standard deviation of per-step jitter
  double jitter_deg = 1.5;
};

/// One synthetic acquisition: frames with probe poses, ending at the target.
struct DemoSequence {
  std::uint64_t subject_seed = 0;
  PlaneId plane{0};
  std::uint64_t scan_seed = 0;
  std::vector<FramePtr> frames;
  std::vector<Pose6> poses;

  std::size_t size() const { return poses.size(); }
  const Pose6& target() const { return poses.back(); }
};

/// Element of the target-relative dataset: a frame and its action to the target.
struct GuidanceSample {
  FramePtr frame;
  PlaneId plane{0};
  Pose6 action_gt;
  std::size_t sequence_index = 0;
};

/// Element of the permutation dataset built from ordered frame pairs.
struct PermutationSample {
  FramePtr frame1;
  FramePtr frame2;
  PlaneId plane{0};
  Pose6 a_12;  // frame1 -> frame2
  Pose6 a_1T;  // frame1 -> target
  Pose6 a_2T;  // frame2 -> target
  int t1 = 0;
  int t2 = 0;
  std::size_t sequence_index = 0;
};

/// Componentwise offset of `pose` from `target` with angle differences wrapped.
Pose6 pose_offset(const Pose6& pose, const Pose6& target);

/// Clamps a pose into the per-axis sampling box around `target` and the
/// absolute pitch limit.
Pose6 clamp_to_region(const Pose6& pose, const Pose6& target, const ScanConfig& cfg);

/// Uniform draw from the sampling box around `target`.
Pose6 sample_start_pose(const Pose6& target, std::uint64_t seed, const ScanConfig& cfg);

/// Noisy contraction toward the plane's target pose; the last pose is the
/// target exactly. Throws std::invalid_argument for length < 8.
DemoSequence generate_scan(const phantom::Phantom& phantom, PlaneId plane, std::uint64_t scan_seed, int length,
                           const ScanConfig& cfg = {});

/// One sample per non-terminal frame.
std::vector<GuidanceSample> build_guidance_dataset(std::span<const DemoSequence> sequences);

/// k ordered pairs (t1 != t2), distinct while k <= n(n-1).
std::vector<PermutationSample> sample_permutation_pairs(const DemoSequence& sequence, int k, std::uint64_t rng_seed,
                                                        std::size_t sequence_index = 0);

// ---- on-disk datasets ----------------------------------------------------

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string split;  // "train", "test" or free-form
  phantom::SliceGeometry geom;
  std::vector<std::uint64_t> subjects;
  std::vector<std::uint64_t> held_out_subjects;  // subjects that must not appear here
  std::vector<DemoSequence> scans;
};

/// Directory with a `manifest` (JSON) and one `scan_NNNNN.bin` per scan.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
/// Throws DatasetError on I/O failure, version mismatch or checksum mismatch.
Dataset load_dataset(const std::filesystem::path& dir);

/// Hex digest identifying a dataset directory's manifest contents.
std::string manifest_hash(const std::filesystem::path& dir);

/// Encodes one scan blob ("DPL1" layout).
std::vector<unsigned char> encode_scan(const DemoSequence& seq);
DemoSequence decode_scan(std::span<const unsigned char> bytes, double spacing = phantom::kDefaultSpacing);

struct GenerateConfig {
  int train_subjects = 12;
  int test_subjects = 3;
  int scans_per_plane = 2;
  int frames = 50;
  std::uint64_t seed = 1;
  ScanConfig scan;
};

/// Subject seeds for the split; disjoint, never 0 (the template).
std::vector<std::uint64_t> subject_seeds(const GenerateConfig& cfg, bool test);

/// Generates the scans of one split in memory.
Dataset generate_dataset(const GenerateConfig& cfg, bool test);

/// Writes `out/train` and `out/test`.
void generate_split_datasets(const GenerateConfig& cfg, const std::filesystem::path& out);

}  // namespace echoguide::demo

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

#include "echoguide/demo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "echoguide/binio.hpp"
#include "echoguide/random.hpp"
#include "json.hpp"

namespace echoguide::demo {

using nlohmann::json;

Pose6 pose_offset(const Pose6& pose, const Pose6& target) {
  Pose6 o;
  for (std::size_t i = 0; i < 3; ++i) o[i] = pose[i] - target[i];
  for (std::size_t i = 3; i < 6; ++i) o[i] = se3::wrap_degrees(pose[i] - target[i]);
  return o;
}

Pose6 clamp_to_region(const Pose6& pose, const Pose6& target, const ScanConfig& cfg) {
  const Pose6 o = pose_offset(pose, target);
  Pose6 out = pose;  // axes inside the box keep their exact value
  for (std::size_t i = 0; i < 6; ++i) {
    const double limit = i < 3 ? cfg.max_offset_mm : cfg.max_offset_deg;
    if (std::abs(o[i]) > limit) out[i] = target[i] + std::clamp(o[i], -limit, limit);
  }
  out.ry = std::clamp(out.ry, -cfg.max_abs_pitch_deg, cfg.max_abs_pitch_deg);
  return se3::canonical(out);
}

Pose6 sample_start_pose(const Pose6& target, std::uint64_t seed, const ScanConfig& cfg) {
  Rng rng(seed);
  Pose6 p;
  for (std::size_t i = 0; i < 3; ++i) p[i] = target[i] + rng.uniform(-cfg.max_offset_mm, cfg.max_offset_mm);
  for (std::size_t i = 3; i < 6; ++i) p[i] = target[i] + rng.uniform(-cfg.max_offset_deg, cfg.max_offset_deg);
  return clamp_to_region(p, target, cfg);
}

DemoSequence generate_scan(const phantom::Phantom& ph, PlaneId plane, std::uint64_t scan_seed, int length,
                           const ScanConfig& cfg) {
  if (length < 8) throw std::invalid_argument("generate_scan: length must be >= 8");
  const Pose6 target = phantom::standard_plane_poses(ph)[static_cast<std::size_t>(plane.index())];
  DemoSequence seq;
  seq.subject_seed = ph.subject_seed();
  seq.plane = plane;
  seq.scan_seed = scan_seed;

  const std::uint64_t base = derive_seed({ph.subject_seed(), static_cast<std::uint64_t>(plane.index()), scan_seed});
  Rng rng(derive_seed({base, 1}));
  Pose6 pose = sample_start_pose(target, derive_seed({base, 0}), cfg);
  for (int t = 0; t < length; ++t) {
    if (t == length - 1) pose = target;
    seq.poses.push_back(pose);
    const std::uint64_t noise_seed = derive_seed({base, 2, static_cast<std::uint64_t>(t)});
    seq.frames.push_back(std::make_shared<const phantom::Frame>(phantom::render_slice(ph, pose, cfg.geom, noise_seed)));
    // Contract toward the target on every axis, then jitter.
    const Pose6 o = pose_offset(pose, target);
    Pose6 next;
    for (std::size_t i = 0; i < 6; ++i) {
      const double frac = rng.uniform(cfg.step_min, cfg.step_max);
      const double jitter = (i < 3 ? cfg.jitter_mm : cfg.jitter_deg) * rng.normal();
      next[i] = target[i] + o[i] * (1.0 - frac) + jitter;
    }
    pose = clamp_to_region(next, target, cfg);
  }
  return seq;
}

std::vector<GuidanceSample> build_guidance_dataset(std::span<const DemoSequence> sequences) {
  std::vector<GuidanceSample> out;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const DemoSequence& seq = sequences[s];
    if (seq.size() < 1) continue;
    for (std::size_t t = 0; t + 1 < seq.size(); ++t)
      out.push_back(GuidanceSample{seq.frames[t], seq.plane, se3::relative(seq.poses[t], seq.target()), s});
  }
  return out;
}

std::vector<PermutationSample> sample_permutation_pairs(const DemoSequence& seq, int k, std::uint64_t rng_seed,
                                                        std::size_t sequence_index) {
  if (k < 1) throw std::invalid_argument("sample_permutation_pairs: k must be >= 1");
  const std::size_t n = seq.size();
  if (n < 2) throw std::invalid_argument("sample_permutation_pairs: sequence needs >= 2 frames");
  const std::size_t total = n * (n - 1);
  Rng rng(rng_seed);
  std::vector<std::size_t> picks;
  picks.reserve(static_cast<std::size_t>(k));
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::size_t remaining = static_cast<std::size_t>(k);
  while (remaining > 0) {
    // Partial Fisher-Yates: each round draws without replacement.
    const std::size_t take = std::min(remaining, total);
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.below(total - i);
      std::swap(pool[i], pool[j]);
      picks.push_back(pool[i]);
    }
    remaining -= take;
  }
  const Pose6& target = seq.target();
  std::vector<PermutationSample> out;
  out.reserve(picks.size());
  for (std::size_t idx : picks) {
    const std::size_t t1 = idx / (n - 1);
    const std::size_t r = idx % (n - 1);
    const std::size_t t2 = r < t1 ? r : r + 1;
    PermutationSample s;
    s.frame1 = seq.frames[t1];
    s.frame2 = seq.frames[t2];
    s.plane = seq.plane;
    s.a_12 = se3::relative(seq.poses[t1], seq.poses[t2]);
    s.a_1T = se3::relative(seq.poses[t1], target);
    s.a_2T = se3::relative(seq.poses[t2], target);
    s.t1 = static_cast<int>(t1);
    s.t2 = static_cast<int>(t2);
    s.sequence_index = sequence_index;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- on-disk datasets ----------------------------------------------------

namespace {

constexpr std::string_view kScanMagic = "DPL1";
constexpr const char* kManifestName = "manifest";

std::string scan_file_name(std::size_t i) {
  std::ostringstream os;
  os << "scan_" << std::setw(5) << std::setfill('0') << i << ".bin";
  return os.str();
}

}  // namespace

std::vector<unsigned char> encode_scan(const DemoSequence& seq) {
  if (seq.frames.size() != seq.poses.size()) throw DatasetError("scan has mismatched frame/pose counts");
  if (seq.frames.empty()) throw DatasetError("cannot encode an empty scan");
  const int h = seq.frames.front()->h, w = seq.frames.front()->w;
  binio::Writer wr;
  wr.str(kScanMagic);
  wr.u32(static_cast<std::uint32_t>(h));
  wr.u32(static_cast<std::uint32_t>(w));
  wr.u32(static_cast<std::uint32_t>(seq.size()));
  for (const auto& f : seq.frames) {
    if (f->h != h || f->w != w) throw DatasetError("scan frames differ in size");
    wr.bytes(f->pixels.data(), f->pixels.size() * sizeof(float));
  }
  for (const Pose6& p : seq.poses)
    for (std::size_t i = 0; i < 6; ++i) wr.f64(p[i]);
  auto& buf = wr.buffer();
  wr.u32(binio::crc32_of(buf.data() + kScanMagic.size(), buf.size() - kScanMagic.size()));
  return std::move(buf);
}

DemoSequence decode_scan(std::span<const unsigned char> bytes, double spacing) {
  if (bytes.size() < kScanMagic.size() + 16 ||
      std::memcmp(bytes.data(), kScanMagic.data(), kScanMagic.size()) != 0)
    throw DatasetError("scan blob: bad magic or format version");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (binio::crc32_of(bytes.data() + kScanMagic.size(), body - kScanMagic.size()) != stored)
    throw DatasetError("scan blob: checksum mismatch");
  DemoSequence seq;
  try {
    binio::Reader r(bytes.data() + kScanMagic.size(), body - kScanMagic.size());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    const std::size_t n = r.u32();
    const std::size_t px = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    if (n * (px * 4 + 48) != r.remaining()) throw DatasetError("scan blob: size does not match header");
    for (std::size_t i = 0; i < n; ++i) {
      phantom::Frame f;
      f.h = h;
      f.w = w;
      f.spacing = spacing;
      f.pixels.resize(px);
      r.bytes(f.pixels.data(), px * sizeof(float));
      seq.frames.push_back(std::make_shared<const phantom::Frame>(std::move(f)));
    }
    for (std::size_t i = 0; i < n; ++i) {
      Pose6 p;
      for (std::size_t k = 0; k < 6; ++k) p[k] = r.f64();
      seq.poses.push_back(p);
    }
  } catch (const binio::FormatError& e) {
    throw DatasetError(std::string("scan blob: ") + e.what());
  }
  return seq;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = std::string(kScanMagic);
  manifest["split"] = ds.split;
  manifest["h"] = ds.geom.h;
  manifest["w"] = ds.geom.w;
  manifest["spacing"] = ds.geom.spacing;
  manifest["subjects"] = ds.subjects;
  manifest["held_out_subjects"] = ds.held_out_subjects;
  std::set<int> planes;
  std::size_t total_frames = 0;
  json scans = json::array();
  for (std::size_t i = 0; i < ds.scans.size(); ++i) {
    const DemoSequence& s = ds.scans[i];
    const std::string name = scan_file_name(i);
    binio::write_file_atomic((dir / name).string(), encode_scan(s));
    scans.push_back({{"file", name},
                     {"subject_seed", s.subject_seed},
                     {"plane", s.plane.index()},
                     {"scan_seed", s.scan_seed},
                     {"frames", s.size()}});
    planes.insert(s.plane.index());
    total_frames += s.size();
  }
  manifest["planes"] = std::vector<int>(planes.begin(), planes.end());
  manifest["count"] = ds.scans.size();
  manifest["total_frames"] = total_frames;
  manifest["scans"] = std::move(scans);
  const std::string text = manifest.dump(2) + "\n";
  binio::write_file_atomic((dir / kManifestName).string(), std::vector<unsigned char>(text.begin(), text.end()));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  json manifest;
  try {
    const auto bytes = binio::read_file((dir / kManifestName).string());
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const std::exception& e) {
    throw DatasetError("cannot read manifest in " + dir.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format").get<std::string>() != kScanMagic)
      throw DatasetError("dataset format version mismatch: " + manifest.at("format").get<std::string>());
    Dataset ds;
    ds.split = manifest.value("split", "");
    ds.geom.h = manifest.at("h").get<int>();
    ds.geom.w = manifest.at("w").get<int>();
    ds.geom.spacing = manifest.at("spacing").get<double>();
    ds.subjects = manifest.at("subjects").get<std::vector<std::uint64_t>>();
    ds.held_out_subjects = manifest.value("held_out_subjects", std::vector<std::uint64_t>{});
    const auto& scans = manifest.at("scans");
    if (scans.size() != manifest.at("count").get<std::size_t>()) throw DatasetError("manifest count mismatch");
    for (const auto& entry : scans) {
      const std::string file = entry.at("file").get<std::string>();
      std::vector<unsigned char> bytes;
      try {
        bytes = binio::read_file((dir / file).string());
      } catch (const std::exception& e) {
        throw DatasetError(e.what());
      }
      DemoSequence seq = decode_scan(bytes, ds.geom.spacing);
      if (seq.size() != entry.at("frames").get<std::size_t>())
        throw DatasetError(file + ": frame count differs from manifest");
      if (!seq.frames.empty() && (seq.frames.front()->h != ds.geom.h || seq.frames.front()->w != ds.geom.w))
        throw DatasetError(file + ": image size differs from manifest");
      seq.subject_seed = entry.at("subject_seed").get<std::uint64_t>();
      seq.plane = PlaneId(entry.at("plane").get<int>());
      seq.scan_seed = entry.at("scan_seed").get<std::uint64_t>();
      ds.scans.push_back(std::move(seq));
    }
    return ds;
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed manifest: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw DatasetError(std::string("malformed manifest: ") + e.what());
  }
}

std::string manifest_hash(const std::filesystem::path& dir) {
  std::vector<unsigned char> bytes;
  try {
    bytes = binio::read_file((dir / kManifestName).string());
  } catch (const std::exception& e) {
    throw DatasetError(e.what());
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<std::uint64_t> subject_seeds(const GenerateConfig& cfg, bool test) {
  const int first = test ? cfg.train_subjects : 0;
  const int count = test ? cfg.test_subjects : cfg.train_subjects;
  std::vector<std::uint64_t> out;
  for (int i = 0; i < count; ++i) {
    std::uint64_t s = derive_seed({cfg.seed, 0x5eb1ec7ULL, static_cast<std::uint64_t>(first + i)});
    if (s == 0) s = 1;
    out.push_back(s);
  }
  return out;
}

Dataset generate_dataset(const GenerateConfig& cfg, bool test) {
  if (cfg.frames < 8) throw std::invalid_argument("frames per scan must be >= 8");
  if (cfg.scans_per_plane < 1) throw std::invalid_argument("scans per plane must be >= 1");
  Dataset ds;
  ds.split = test ? "test" : "train";
  ds.geom = cfg.scan.geom;
  ds.subjects = subject_seeds(cfg, test);
  ds.held_out_subjects = subject_seeds(cfg, !test);
  for (std::uint64_t subject : ds.subjects) {
    const phantom::Phantom ph = phantom::generate_phantom(subject);
    for (int plane = 0; plane < phantom::kNumPlanes; ++plane) {
      for (int s = 0; s < cfg.scans_per_plane; ++s) {
        const std::uint64_t scan_seed = derive_seed({cfg.seed, subject, static_cast<std::uint64_t>(plane),
                                                     static_cast<std::uint64_t>(s)});
        ds.scans.push_back(generate_scan(ph, PlaneId(plane), scan_seed, cfg.frames, cfg.scan));
      }
    }
  }
  return ds;
}

void generate_split_datasets(const GenerateConfig& cfg, const std::filesystem::path& out) {
  save_dataset(generate_dataset(cfg, false), out / "train");
  save_dataset(generate_dataset(cfg, true), out / "test");
}

}  // namespace echoguide::demo

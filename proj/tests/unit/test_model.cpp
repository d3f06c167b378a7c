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

#include <cmath>
#include <random>

#include "../common/gradient_cases.hpp"
#include "doctest.h"
#include "echoguide/model.hpp"
#include "test_util.hpp"

using namespace echoguide;
using model::GuidanceModel;
using nn::Tensor;
using se3::Pose6;

namespace {

demo::DemoSequence small_sequence(std::uint64_t subject, int plane, int length = 10) {
  demo::ScanConfig cfg;
  cfg.geom = {16, 16, 4.0};
  return demo::generate_scan(phantom::generate_phantom(subject), phantom::PlaneId(plane), 3, length, cfg);
}

}  // namespace

TEST_CASE("full-scale guidance dims are recorded") {
  CHECK(model::kFullScaleGuideDims == std::array<int, 3>{2048, 512, 6});
}

TEST_CASE("output shapes") {
  const auto cfg = gradient_cases::tiny_model_config();
  GuidanceModel m(cfg, 1);
  const auto seq = small_sequence(1, 0);
  const std::vector<phantom::FramePtr> frames(seq.frames.begin(), seq.frames.begin() + 3);
  const Tensor f = m.encode(model::frames_to_tensor(frames, 16, 16));
  CHECK(f.shape() == nn::Shape{3, cfg.feature_dim});
  const std::vector<int> planes = {0, 1, 2};
  CHECK(m.guide(f, planes).shape() == nn::Shape{3, 6});
  CHECK(m.dream(f, nn::zeros({3, 6})).shape() == nn::Shape{3, cfg.feature_dim});
  CHECK_THROWS_AS(model::frames_to_tensor(frames, 32, 32), nn::ShapeError);

  auto no_dream = cfg;
  no_dream.with_dreamer = false;
  GuidanceModel b(no_dream, 1);
  CHECK_THROWS_AS(b.dream(f, nn::zeros({3, 6})), std::logic_error);
  CHECK(b.params().size() < m.params().size());
}

TEST_CASE("plane query is live") {
  GuidanceModel m(gradient_cases::tiny_model_config(), 2);
  const auto seq = small_sequence(2, 1);
  const std::vector<double> f = m.encode(*seq.frames[0]);
  const Pose6 a0 = m.guide(f, phantom::PlaneId(0));
  const Pose6 a1 = m.guide(f, phantom::PlaneId(1));
  CHECK(se3::pose_distance_inf(a0, a1) > 1e-6);

  m.params().zero_grad();
  const std::vector<int> planes = {1};
  nn::backward(gradient_cases::probe(m.guide(nn::constant({1, 8}, f), planes), 5));
  const auto g = m.params().get("guide.queries").grad();
  double row1 = 0.0, row0 = 0.0;
  for (int j = 0; j < 4; ++j) {
    row0 += std::abs(g[static_cast<std::size_t>(j)]);
    row1 += std::abs(g[static_cast<std::size_t>(4 + j)]);
  }
  CHECK(row1 > 0.0);
  CHECK(row0 == 0.0);
  CHECK_THROWS_AS(m.plane_queries(std::vector<int>{3}), std::out_of_range);
}

TEST_CASE("initialization is seeded") {
  const auto cfg = gradient_cases::tiny_model_config();
  GuidanceModel a(cfg, 9), b(cfg, 9), c(cfg, 10);
  const auto seq = small_sequence(3, 2);
  CHECK(a.predict(*seq.frames[0], phantom::PlaneId(2)) == b.predict(*seq.frames[0], phantom::PlaneId(2)));
  CHECK_FALSE(a.predict(*seq.frames[0], phantom::PlaneId(2)) == c.predict(*seq.frames[0], phantom::PlaneId(2)));
}

TEST_CASE("action combination agrees with the pose library") {
  std::mt19937_64 g(4);
  std::vector<Pose6> a12;
  std::vector<double> a2;
  std::vector<Pose6> a2_poses;
  for (int i = 0; i < 200; ++i) {
    a12.push_back(gradient_cases::random_action(g));
    a2_poses.push_back(gradient_cases::random_action(g));
    const auto v = a2_poses.back().to_array();
    a2.insert(a2.end(), v.begin(), v.end());
  }
  std::vector<bool> skipped;
  const Tensor out = model::combine_actions(a12, nn::constant({200, 6}, a2), &skipped);
  for (std::size_t i = 0; i < a12.size(); ++i) {
    if (std::abs(se3::compose(a12[i], a2_poses[i]).ry) > 80.0) continue;
    CHECK_FALSE(skipped[i]);
    const Pose6 ref = se3::combine_through_intermediate(a12[i], a2_poses[i]);
    for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(out.values()[i * 6 + k] - ref[k]) < 1e-9);
  }
  for (std::uint64_t s = 1; s <= 3; ++s) CHECK(gradient_cases::combine_actions_case(s) < 1e-4);
}

TEST_CASE("ground-truth intermediate actions telescope exactly") {
  const auto seq = small_sequence(5, 0, 12);
  const auto pairs = demo::sample_permutation_pairs(seq, 12 * 11, 1);
  std::vector<Pose6> a12, a1t;
  std::vector<double> a2t;
  for (const auto& p : pairs) {
    a12.push_back(p.a_12);
    a1t.push_back(p.a_1T);
    const auto v = p.a_2T.to_array();
    a2t.insert(a2t.end(), v.begin(), v.end());
  }
  const Tensor out = model::combine_actions(a12, nn::constant({static_cast<int>(a12.size()), 6}, a2t));
  const auto flat = [&] {
    std::vector<double> v;
    for (const auto& p : a1t) {
      const auto a = p.to_array();
      v.insert(v.end(), a.begin(), a.end());
    }
    return v;
  }();
  CHECK(nn::smooth_l1(out, flat, 1.0).item() < 1e-9);
}

TEST_CASE("gimbal lock rows are flagged") {
  const std::vector<Pose6> a12 = {{0, 0, 0, 0, 45, 0}, {0, 0, 0, 0, 10, 0}};
  const Tensor a2 = nn::leaf({2, 6}, {0, 0, 0, 0, 45, 0, 0, 0, 0, 0, 10, 0});
  std::vector<bool> skipped;
  const Tensor out = model::combine_actions(a12, a2, &skipped);
  CHECK(skipped[0]);
  CHECK_FALSE(skipped[1]);
  CHECK(out.values()[10] == doctest::Approx(20.0));
  nn::backward(nn::mean(out));
  for (int k = 0; k < 6; ++k) CHECK(a2.grad()[static_cast<std::size_t>(k)] == 0.0);
}

TEST_CASE("losses") {
  const auto cfg = gradient_cases::tiny_model_config();
  GuidanceModel m(cfg, 6);
  const auto seq = small_sequence(6, 1, 12);
  const std::vector<demo::DemoSequence> seqs = {seq};
  const auto samples = demo::build_guidance_dataset(seqs);
  const double lb = model::baseline_loss(m, samples).item();
  CHECK(std::isfinite(lb));
  CHECK(lb >= 0.0);

  const auto pairs = demo::sample_permutation_pairs(seq, 16, 2);
  model::LossOptions with, without;
  without.direct_policy_term = false;
  const auto dl = model::dreamer_loss(m, pairs, with);
  const auto dn = model::dreamer_loss(m, pairs, without);
  CHECK(dl.skipped == 0);
  CHECK(std::isfinite(dl.loss.item()));
  CHECK(dn.loss.item() >= 0.0);
  // The direct term equals the baseline objective on (frame1, a_1T).
  std::vector<demo::GuidanceSample> direct;
  for (const auto& p : pairs) direct.push_back({p.frame1, p.plane, p.a_1T, 0});
  CHECK(dl.loss.item() - dn.loss.item() == doctest::Approx(model::baseline_loss(m, direct).item()).epsilon(1e-10));
  // Without the direct term the loss is the sum of the two smooth-L1 terms.
  auto flat = [](const std::vector<demo::PermutationSample>& ps, bool first) {
    std::vector<double> v;
    for (const auto& p : ps) {
      const auto a = (first ? p.a_1T : p.a_2T).to_array();
      v.insert(v.end(), a.begin(), a.end());
    }
    return v;
  };
  const double manual =
      nn::smooth_l1(dn.a1_pred, flat(pairs, true), 1.0).item() + nn::smooth_l1(dn.a2_pred, flat(pairs, false), 1.0).item();
  CHECK(dn.loss.item() == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("dream and guide gradients") {
  for (std::uint64_t s = 1; s <= 2; ++s) {
    CHECK(gradient_cases::dream_case(s) < 1e-4);
    CHECK(gradient_cases::guide_case(s) < 1e-4);
  }
}

TEST_CASE("model checkpoint round trip") {
  test_util::TempDir dir("model_ckpt");
  const auto cfg = gradient_cases::tiny_model_config();
  GuidanceModel m(cfg, 8);
  model::CheckpointMeta meta{"dreamer", "abc", R"({"epochs":3})", 2, {11, 12}};
  const auto path = dir.path() / "m.ckpt";
  model::save_model(path, m, meta);
  const auto loaded = model::load_model(path);
  CHECK(loaded.model.config() == cfg);
  CHECK(loaded.meta.variant == "dreamer");
  CHECK(loaded.meta.train_manifest == "abc");
  CHECK(loaded.meta.epochs_completed == 2);
  CHECK(loaded.meta.train_subjects == std::vector<std::uint64_t>{11, 12});
  for (const auto& name : m.params().names()) {
    const auto a = m.params().get(name).values();
    const auto b = loaded.model.params().get(name).values();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  const auto seq = small_sequence(8, 0);
  CHECK(m.predict(*seq.frames[1], phantom::PlaneId(0)) == loaded.model.predict(*seq.frames[1], phantom::PlaneId(0)));
  test_util::flip_byte(path, 30);
  CHECK_THROWS_AS(model::load_model(path), nn::CheckpointError);
}

TEST_CASE("model config json round trip") {
  auto cfg = gradient_cases::tiny_model_config();
  CHECK(model::config_from_json(model::config_to_json(cfg)) == cfg);
}

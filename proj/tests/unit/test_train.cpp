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

#include "../common/gradient_cases.hpp"
#include "doctest.h"
#include "echoguide/train.hpp"
#include "test_util.hpp"

using namespace echoguide;
using train::TrainConfig;
using train::Variant;

namespace {

demo::Dataset tiny_split(bool test = false) {
  demo::GenerateConfig g;
  g.train_subjects = 2;
  g.test_subjects = 1;
  g.scans_per_plane = 1;
  g.frames = 8;
  g.scan.geom = {16, 16, 4.0};
  return demo::generate_dataset(g, test);
}

TrainConfig tiny_config(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.epochs = 4;
  c.batch_size = 8;
  c.base_lr = 1e-3;
  c.seed = 3;
  c.model = gradient_cases::tiny_model_config();
  return c;
}

std::vector<double> losses(const train::TrainReport& r) {
  std::vector<double> out;
  for (const auto& e : r.epochs) out.push_back(e.mean_loss);
  return out;
}

std::vector<std::vector<double>> params_of(const std::filesystem::path& ckpt) {
  const auto m = model::load_model(ckpt);
  std::vector<std::vector<double>> out;
  for (const auto& e : m.model.params().entries()) out.emplace_back(e.param.values().begin(), e.param.values().end());
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.base_lr = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(train::parse_variant("both"), std::invalid_argument);
  c = tiny_config(Variant::kDreamer);
  c.weight_by_scan = true;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("training is reproducible and follows the cosine schedule") {
  test_util::TempDir dir("train_det");
  const auto data = tiny_split();
  for (Variant v : {Variant::kBaseline, Variant::kDreamer}) {
    const auto cfg = tiny_config(v);
    const auto r1 = train::train(cfg, data, "m", dir.path() / "a.ckpt");
    const auto r2 = train::train(cfg, data, "m", dir.path() / "b.ckpt");
    CHECK(losses(r1) == losses(r2));
    CHECK(params_of(dir.path() / "a.ckpt") == params_of(dir.path() / "b.ckpt"));
    REQUIRE(r1.epochs.size() == 4);
    CHECK(r1.leakage_check_passed);
    CHECK(r1.steps_per_epoch == train::steps_per_epoch(cfg, data));
    REQUIRE(r1.step_lrs.size() == static_cast<std::size_t>(r1.total_steps));
    for (std::size_t s = 0; s < r1.step_lrs.size(); ++s) {
      const double expect = cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * double(s) / double(r1.total_steps)));
      CHECK(std::abs(r1.step_lrs[s] - expect) < 1e-12);
    }
    for (const auto& e : r1.epochs) CHECK(e.skipped_samples == 0);
  }
}

TEST_CASE("steps per epoch") {
  const auto data = tiny_split();
  auto cfg = tiny_config(Variant::kBaseline);
  // 6 scans x 7 samples = 42 -> ceil(42 / 8).
  CHECK(train::steps_per_epoch(cfg, data) == 6);
  cfg.variant = Variant::kDreamer;
  cfg.pairs_per_sequence = 8;
  CHECK(train::steps_per_epoch(cfg, data) == 6);
  cfg.pairs_per_sequence = 0;
  CHECK(train::steps_per_epoch(cfg, data) == 6);
}

TEST_CASE("split resume equals one run") {
  test_util::TempDir dir("train_resume");
  const auto data = tiny_split();
  for (Variant v : {Variant::kBaseline, Variant::kDreamer}) {
    const auto cfg = tiny_config(v);
    const auto full = train::train(cfg, data, "m", dir.path() / "full.ckpt");
    const auto first = train::train(cfg, data, "m", dir.path() / "half.ckpt", 2);
    CHECK(first.epochs.size() == 2);
    CHECK(model::load_model(dir.path() / "half.ckpt").meta.epochs_completed == 2);
    const auto second = train::resume(dir.path() / "half.ckpt", cfg, data, "m", dir.path() / "rest.ckpt");
    REQUIRE(second.epochs.size() == 2);
    CHECK(second.epochs[0].epoch == 3);
    for (int i = 0; i < 2; ++i) {
      CHECK(std::abs(second.epochs[static_cast<std::size_t>(i)].mean_loss -
                     full.epochs[static_cast<std::size_t>(i + 2)].mean_loss) < 1e-9);
    }
    const auto a = params_of(dir.path() / "full.ckpt");
    const auto b = params_of(dir.path() / "rest.ckpt");
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("resume rejects mismatches and corruption") {
  test_util::TempDir dir("train_reject");
  const auto data = tiny_split();
  const auto cfg = tiny_config(Variant::kBaseline);
  train::train(cfg, data, "m", dir.path() / "half.ckpt", 2);
  auto other = cfg;
  other.batch_size = 4;
  CHECK_THROWS_AS(train::resume(dir.path() / "half.ckpt", other, data, "m", dir.path() / "x.ckpt"), train::TrainError);
  CHECK_THROWS_AS(train::resume(dir.path() / "half.ckpt", cfg, data, "other", dir.path() / "x.ckpt"),
                  train::TrainError);
  test_util::flip_byte(dir.path() / "half.ckpt", 64);
  CHECK_THROWS_AS(train::resume(dir.path() / "half.ckpt", cfg, data, "m", dir.path() / "x.ckpt"), nn::CheckpointError);
}

TEST_CASE("leakage and data checks") {
  test_util::TempDir dir("train_leak");
  const auto cfg = tiny_config(Variant::kBaseline);
  CHECK_THROWS_AS(train::train(cfg, tiny_split(true), "m", dir.path() / "x.ckpt"), train::TrainError);
  auto leaky = tiny_split();
  leaky.scans[0].subject_seed = leaky.held_out_subjects.at(0);
  CHECK_THROWS_AS(train::train(cfg, leaky, "m", dir.path() / "x.ckpt"), train::TrainError);
  auto empty = tiny_split();
  empty.scans.clear();
  CHECK_THROWS_AS(train::train(cfg, empty, "m", dir.path() / "x.ckpt"), train::TrainError);
  auto zero = cfg;
  zero.epochs = 0;
  CHECK_THROWS_AS(train::train(zero, tiny_split(), "m", dir.path() / "x.ckpt"), std::invalid_argument);
  auto too_many = tiny_config(Variant::kDreamer);
  too_many.pairs_per_sequence = 57;  // 8 frames -> 56 ordered pairs
  CHECK_THROWS_AS(train::train(too_many, tiny_split(), "m", dir.path() / "x.ckpt"), train::TrainError);
}

TEST_CASE("scan weighting keeps the loss scale") {
  test_util::TempDir dir("train_weight");
  const auto data = tiny_split();
  auto cfg = tiny_config(Variant::kBaseline);
  cfg.epochs = 1;
  const auto plain = train::train(cfg, data, "m", dir.path() / "a.ckpt");
  cfg.weight_by_scan = true;
  const auto weighted = train::train(cfg, data, "m", dir.path() / "b.ckpt");
  // Equal-length scans: every weight is 1, so nothing changes.
  CHECK(losses(plain) == losses(weighted));
}

TEST_CASE("report json") {
  test_util::TempDir dir("train_report");
  auto cfg = tiny_config(Variant::kDreamer);
  cfg.epochs = 1;
  const auto r = train::train(cfg, tiny_split(), "m", dir.path() / "a.ckpt");
  const std::string j = r.to_json();
  CHECK(j.find("\"leakage_check\": \"passed\"") != std::string::npos);
  CHECK(j.find("\"mean_loss\"") != std::string::npos);
  CHECK(j.find("\"wall_seconds\"") != std::string::npos);
}

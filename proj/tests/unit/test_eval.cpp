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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "../common/gradient_cases.hpp"
#include "doctest.h"
#include "echoguide/eval.hpp"
#include "echoguide/train.hpp"
#include "test_util.hpp"

using namespace echoguide;
using se3::Pose6;

namespace {

demo::GenerateConfig tiny_gen() {
  demo::GenerateConfig g;
  g.train_subjects = 2;
  g.test_subjects = 1;
  g.scans_per_plane = 1;
  g.frames = 10;
  g.scan.geom = {16, 16, 4.0};
  return g;
}

std::vector<demo::GuidanceSample> test_samples() {
  const auto test = demo::generate_dataset(tiny_gen(), true);
  return demo::build_guidance_dataset(test.scans);
}

std::vector<Pose6> truth(const std::vector<demo::GuidanceSample>& s) {
  std::vector<Pose6> out;
  for (const auto& x : s) out.push_back(x.action_gt);
  return out;
}

}  // namespace

TEST_CASE("perfect predictor has zero error") {
  const auto s = test_samples();
  const auto t = eval::mae_table(s, truth(s));
  for (const auto& row : t.rows) {
    CHECK(row.count == 9);
    for (double v : row.mae) CHECK(v == 0.0);
  }
  CHECK(t.overall.count == s.size());
}

TEST_CASE("zero predictor error equals mean absolute action") {
  const auto s = test_samples();
  const std::vector<Pose6> zero(s.size());
  const auto t = eval::mae_table(s, zero);
  for (int p = 0; p < phantom::kNumPlanes; ++p) {
    for (std::size_t a = 0; a < 6; ++a) {
      double sum = 0.0;
      int n = 0;
      for (const auto& x : s) {
        if (x.plane.index() != p) continue;
        sum += std::abs(x.action_gt[a]);
        ++n;
      }
      CHECK(t.rows[static_cast<std::size_t>(p)].mae[a] == doctest::Approx(sum / n).epsilon(1e-12));
    }
  }
}

TEST_CASE("missing planes give empty rows") {
  auto s = test_samples();
  s.erase(std::remove_if(s.begin(), s.end(), [](const auto& x) { return x.plane.index() == 1; }), s.end());
  const auto t = eval::mae_table(s, truth(s));
  CHECK(t.rows[1].empty());
  CHECK_FALSE(t.rows[0].empty());
  CHECK_THROWS_AS(eval::mae_table(s, std::vector<Pose6>(1)), std::invalid_argument);
}

TEST_CASE("mae is invariant under shuffling") {
  auto s = test_samples();
  std::mt19937_64 g(1);
  std::vector<Pose6> pred;
  for (std::size_t i = 0; i < s.size(); ++i) pred.push_back(gradient_cases::random_action(g));
  const auto t1 = eval::mae_table(s, pred);
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), g);
  std::vector<demo::GuidanceSample> s2;
  std::vector<Pose6> p2;
  for (auto i : idx) {
    s2.push_back(s[i]);
    p2.push_back(pred[i]);
  }
  const auto t2 = eval::mae_table(s2, p2);
  for (std::size_t p = 0; p < t1.rows.size(); ++p)
    for (std::size_t a = 0; a < 6; ++a) CHECK(std::abs(t1.rows[p].mae[a] - t2.rows[p].mae[a]) < 1e-12);
}

TEST_CASE("stability bins partition the samples") {
  const auto s = test_samples();
  const std::vector<Pose6> zero(s.size());
  const auto c = eval::stability_curve(s, zero, 5);
  REQUIRE(c.edges.size() == 6);
  for (std::size_t i = 1; i < c.edges.size(); ++i) CHECK(c.edges[i] > c.edges[i - 1]);
  std::size_t total = 0;
  for (const auto& b : c.bins) total += b.count;
  CHECK(total == s.size());
  CHECK(c.total == s.size());
  // For the zero predictor the error is the distance itself, so it lies inside the bin.
  for (const auto& b : c.bins) {
    if (b.count == 0) continue;
    CHECK(b.mean_ae >= b.lo - 1e-12);
    CHECK(b.mean_ae <= b.hi + 1e-12);
  }
  double last = -1.0;
  for (const auto& b : c.bins) {
    if (b.count == 0) continue;
    CHECK(b.mean_ae > last);
    last = b.mean_ae;
  }
  CHECK_THROWS_AS(eval::stability_curve(s, zero, 0), std::invalid_argument);
}

TEST_CASE("single bin gives the global mean and std") {
  const auto s = test_samples();
  std::mt19937_64 g(2);
  std::vector<Pose6> pred;
  for (std::size_t i = 0; i < s.size(); ++i) pred.push_back(gradient_cases::random_action(g));
  const auto c = eval::stability_curve(s, pred, 1);
  std::vector<double> ae;
  for (std::size_t i = 0; i < s.size(); ++i) ae.push_back(eval::absolute_error(pred[i], s[i].action_gt));
  const double mean = std::accumulate(ae.begin(), ae.end(), 0.0) / ae.size();
  double var = 0.0;
  for (double v : ae) var += (v - mean) * (v - mean) / ae.size();
  CHECK(c.bins[0].mean_ae == doctest::Approx(mean).epsilon(1e-12));
  CHECK(c.bins[0].std_ae == doctest::Approx(std::sqrt(var)).epsilon(1e-9));
  CHECK(c.pooled_std_ae == doctest::Approx(std::sqrt(var)).epsilon(1e-9));
  const auto again = eval::stability_curve(s, pred, 1);
  CHECK(again.bins[0].mean_ae == c.bins[0].mean_ae);
}

TEST_CASE("compensated summation") {
  eval::CompensatedSum s;
  s.add(1e16);
  for (int i = 0; i < 1000; ++i) s.add(1.0);
  s.add(-1e16);
  CHECK(s.value() == 1000.0);
}

TEST_CASE("percent change formatting") {
  CHECK(eval::format_percent(eval::percent_change(7.85, 6.10)) == "-22.3%");
  CHECK(eval::format_percent(eval::percent_change(2.0, 3.0)) == "+50.0%");
  CHECK(eval::format_percent(eval::percent_change(4.0, 4.0)) == "+0.0%");
  CHECK(eval::percent_change(0.0, 0.0) == 0.0);
  CHECK(std::isnan(eval::percent_change(0.0, 1.0)));
  CHECK(eval::format_percent(std::nan("")) == "n/a");
  const double pct = eval::percent_change(3.217, 2.911);
  CHECK(std::abs(std::stod(eval::format_percent(pct)) - pct) <= 0.05);
}

TEST_CASE("compare identical checkpoints and refuse split mismatch") {
  test_util::TempDir dir("eval_cmp");
  auto gen = tiny_gen();
  const auto train_split = demo::generate_dataset(gen, false);
  const auto test = demo::generate_dataset(gen, true);
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.model = gradient_cases::tiny_model_config();
  train::train(cfg, train_split, "hash-a", dir.path() / "a.ckpt");
  const auto a = model::load_model(dir.path() / "a.ckpt");
  const auto r = eval::compare(a, a, test, 4);
  for (const auto& row : r.percent)
    for (double v : row) CHECK(v == 0.0);
  CHECK(r.to_text().find("+0.0%") != std::string::npos);
  CHECK(r.to_text().find("-0.0%") == std::string::npos);

  eval::write_compare(r, dir.path() / "out");
  for (const char* f : {"compare.csv", "compare.txt", "stability.csv", "stability_PLAX.svg", "stability_PSAX-AV.svg",
                        "stability_PSAX-MV.svg"}) {
    CHECK(std::filesystem::exists(dir.path() / "out" / f));
  }
  const auto e = eval::evaluate(a, test, 4);
  eval::write_eval(e, dir.path() / "single");
  CHECK(std::filesystem::exists(dir.path() / "single" / "mae.csv"));

  train::train(cfg, train_split, "hash-b", dir.path() / "b.ckpt");
  const auto b = model::load_model(dir.path() / "b.ckpt");
  CHECK_THROWS_AS(eval::compare(a, b, test, 4), eval::EvalError);
  // Evaluating on the training subjects is refused.
  CHECK_THROWS_AS(eval::evaluate(a, train_split, 4), eval::EvalError);
}

TEST_CASE("batched prediction matches single-sample prediction") {
  model::GuidanceModel m(gradient_cases::tiny_model_config(), 4);
  const auto s = test_samples();
  const auto batched = eval::predict(m, s, 7);
  for (std::size_t i = 0; i < s.size(); i += 5) {
    const Pose6 one = m.predict(*s[i].frame, s[i].plane);
    CHECK(se3::pose_distance_inf(one, batched[i]) < 1e-12);
  }
}

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
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "echoguide/demo.hpp"
#include "echoguide/model.hpp"

namespace echoguide::eval {

using se3::Pose6;

inline constexpr std::array<const char*, 6> kAxisNames = {"x", "y", "z", "rx", "ry", "rz"};
inline constexpr std::array<const char*, 6> kAxisUnits = {"mm", "mm", "mm", "deg", "deg", "deg"};

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Compensated (Neumaier) running sum.
class CompensatedSum {
 public:
  void add(double v);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct MaeRow {
  std::array<double, 6> mae{};
  std::size_t count = 0;

  bool empty() const { return count == 0; }
  double mean_over_axes() const;
};

struct MaeTable {
  std::array<MaeRow, phantom::kNumPlanes> rows{};
  MaeRow overall;
};

struct StabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  double mean_ae = 0.0;
  double std_ae = 0.0;
  std::size_t count = 0;

  double center() const { return 0.5 * (lo + hi); }
};

struct StabilityCurve {
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<StabilityBin> bins;
  double pooled_mean_ae = 0.0;
  double pooled_std_ae = 0.0;
  std::size_t total = 0;
};

/// Mean of the six absolute components (mm and degrees taken as commensurate).
double distance_proxy(const Pose6& a);
/// Mean of the six componentwise absolute errors.
double absolute_error(const Pose6& pred, const Pose6& gt);

/// guide(encode(frame), plane) for every sample, batched.
std::vector<Pose6> predict(const model::GuidanceModel& model, std::span<const demo::GuidanceSample> samples,
                           int batch = 64);

MaeTable mae_table(std::span<const demo::GuidanceSample> samples, std::span<const Pose6> predictions);

/// Equal-width bins over [0, max_distance]; max_distance defaults to the
/// largest distance proxy in `samples`. `plane` restricts to one plane.
/// Throws std::invalid_argument for bins < 1.
StabilityCurve stability_curve(std::span<const demo::GuidanceSample> samples, std::span<const Pose6> predictions,
                               int bins, std::optional<double> max_distance = std::nullopt,
                               std::optional<int> plane = std::nullopt);

/// (new - old) / old in percent; 0 when both are 0, NaN when only old is 0.
double percent_change(double old_value, double new_value);
/// One decimal with explicit sign, e.g. "-22.3%".
std::string format_percent(double pct);

struct ModelEval {
  std::string variant;
  MaeTable table;
  StabilityCurve curve;                                     // pooled over planes
  std::array<StabilityCurve, phantom::kNumPlanes> per_plane;
};

/// Loads a checkpoint and evaluates it on a test split directory.
/// Refuses test splits that share subjects with the checkpoint's training run.
ModelEval evaluate(const model::LoadedModel& ckpt, const demo::Dataset& test, int bins = 8,
                   std::optional<double> max_distance = std::nullopt);

struct CompareReport {
  ModelEval baseline;
  ModelEval dreamer;
  std::array<std::array<double, 6>, phantom::kNumPlanes> percent{};
  std::array<double, phantom::kNumPlanes> percent_mean{};
  double pooled_std_percent = 0.0;

  /// Table rendered as aligned text, one row per plane.
  std::string to_text() const;
  /// plane,axis,unit,baseline,dreamer,percent
  std::string to_csv() const;
};

/// Throws EvalError when the checkpoints come from different training splits.
CompareReport compare(const model::LoadedModel& baseline, const model::LoadedModel& dreamer,
                      const demo::Dataset& test, int bins = 8);

// ---- output files ----------------------------------------------------------

std::string mae_csv(const MaeTable& table);
/// plane,bin,lo,hi,count,mean_ae,std_ae[,series]
std::string stability_csv(const ModelEval& e);

struct PlotSeries {
  std::string label;
  std::string color;
  const StabilityCurve* curve;
};

/// Mean line and one-standard-deviation band per series.
std::string stability_svg(const std::string& title, std::span<const PlotSeries> series);

/// Writes mae.csv, stability.csv and stability.svg into `out`.
void write_eval(const ModelEval& e, const std::filesystem::path& out);
/// Writes compare.csv, compare.txt, stability.csv and stability_<PLANE>.svg.
void write_compare(const CompareReport& r, const std::filesystem::path& out);

}  // namespace echoguide::eval

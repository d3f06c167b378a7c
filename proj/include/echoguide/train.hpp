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
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "echoguide/demo.hpp"
#include "echoguide/model.hpp"

namespace echoguide::train {

enum class Variant { kBaseline, kDreamer };

std::string to_string(Variant v);
/// Throws std::invalid_argument for anything but "baseline" / "dreamer".
Variant parse_variant(const std::string& s);

struct TrainConfig {
  Variant variant = Variant::kBaseline;
  int epochs = 40;
  int batch_size = 32;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  /// Permutation pairs drawn per sequence per epoch (dreamer only);
  /// 0 means one pair per non-terminal frame.
  int pairs_per_sequence = 0;
  std::uint64_t seed = 1;
  bool weight_by_scan = false;
  double beta = 1.0;
  std::array<double, 6> axis_weights = {1, 1, 1, 1, 1, 1};
  /// Adds the policy's own target-relative term to the dreamer objective.
  bool direct_policy_term = true;
  model::ModelConfig model;

  /// Throws std::invalid_argument when epochs < 1, lr <= 0, batch < 1, ...
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr_first = 0.0;
  double lr_last = 0.0;
  double wall_seconds = 0.0;
  int steps = 0;
  int skipped_samples = 0;
};

struct TrainReport {
  std::string variant;
  std::string train_manifest;
  std::vector<std::uint64_t> train_subjects;
  std::vector<std::uint64_t> held_out_subjects;
  bool leakage_check_passed = false;
  std::int64_t total_steps = 0;
  int steps_per_epoch = 0;
  std::vector<EpochLog> epochs;
  std::vector<double> step_lrs;  // learning rate used at each optimizer step of this run

  std::string to_json() const;
};

/// Called after every epoch; used by the CLI for progress output.
using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from scratch on an in-memory training split. When `stop_after` is
/// set, stops after that many epochs (the schedule still spans cfg.epochs).
TrainReport train(const TrainConfig& cfg, const demo::Dataset& data, const std::string& manifest,
                  const std::filesystem::path& out_checkpoint, std::optional<int> stop_after = std::nullopt,
                  const EpochCallback& on_epoch = {});

/// Loads the split from disk and trains.
TrainReport train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                  const std::filesystem::path& out_checkpoint, std::optional<int> stop_after = std::nullopt,
                  const EpochCallback& on_epoch = {});

/// Continues a run from a checkpoint written by train/resume. The
/// configuration must equal the one stored in the checkpoint; otherwise
/// throws TrainError. Corrupted checkpoints raise nn::CheckpointError.
TrainReport resume(const std::filesystem::path& checkpoint, const TrainConfig& cfg, const demo::Dataset& data,
                   const std::string& manifest, const std::filesystem::path& out_checkpoint,
                   std::optional<int> stop_after = std::nullopt, const EpochCallback& on_epoch = {});

TrainReport resume(const std::filesystem::path& checkpoint, const TrainConfig& cfg,
                   const std::filesystem::path& data_dir, const std::filesystem::path& out_checkpoint,
                   std::optional<int> stop_after = std::nullopt, const EpochCallback& on_epoch = {});

/// Optimizer steps per epoch for a split under the given configuration.
int steps_per_epoch(const TrainConfig& cfg, const demo::Dataset& data);

}  // namespace echoguide::train

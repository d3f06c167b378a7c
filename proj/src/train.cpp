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

#include "echoguide/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "echoguide/random.hpp"
#include "json.hpp"

namespace echoguide::train {

using nlohmann::json;

namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kShuffleTag = 0x5401;
constexpr std::uint64_t kPairTag = 0x9a12;

json config_json(const TrainConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"pairs_per_sequence", c.pairs_per_sequence},
          {"seed", c.seed},
          {"weight_by_scan", c.weight_by_scan},
          {"beta", c.beta},
          {"axis_weights", c.axis_weights},
          {"direct_policy_term", c.direct_policy_term},
          {"model", json::parse(model::config_to_json(c.model))}};
}

// The model shape follows the data and the variant, so two configs that only
// differ there describe the same run.
TrainConfig effective_config(TrainConfig cfg, const demo::Dataset& data) {
  cfg.model.h = data.geom.h;
  cfg.model.w = data.geom.w;
  cfg.model.with_dreamer = cfg.variant == Variant::kDreamer;
  return cfg;
}

void check_data(const TrainConfig& cfg, const demo::Dataset& data) {
  if (data.split == "test") throw TrainError("refusing to train on a test split");
  if (data.scans.empty()) throw TrainError("training split has no scans");
  const std::set<std::uint64_t> held(data.held_out_subjects.begin(), data.held_out_subjects.end());
  const std::set<std::uint64_t> listed(data.subjects.begin(), data.subjects.end());
  for (std::uint64_t s : data.subjects) {
    if (held.contains(s)) throw TrainError("subject " + std::to_string(s) + " is listed as train and held out");
  }
  for (const auto& scan : data.scans) {
    if (held.contains(scan.subject_seed) || !listed.contains(scan.subject_seed)) {
      throw TrainError("scan from subject " + std::to_string(scan.subject_seed) + " is not a training subject");
    }
    if (scan.size() < 2) throw TrainError("scan with fewer than 2 frames");
    if (cfg.variant == Variant::kDreamer && cfg.pairs_per_sequence > 0 &&
        static_cast<std::size_t>(cfg.pairs_per_sequence) > scan.size() * (scan.size() - 1)) {
      throw TrainError("pairs_per_sequence exceeds the ordered pairs of a scan");
    }
  }
}

int pairs_for(const TrainConfig& cfg, const demo::DemoSequence& seq) {
  return cfg.pairs_per_sequence > 0 ? cfg.pairs_per_sequence : static_cast<int>(seq.size()) - 1;
}

std::size_t samples_per_epoch(const TrainConfig& cfg, const demo::Dataset& data) {
  std::size_t n = 0;
  for (const auto& s : data.scans) {
    n += cfg.variant == Variant::kDreamer ? static_cast<std::size_t>(pairs_for(cfg, s)) : s.size() - 1;
  }
  return n;
}

// Row weights that give every scan the same total weight.
std::vector<double> scan_weights(const TrainConfig& cfg, const demo::Dataset& data) {
  std::vector<double> w(data.scans.size(), 1.0);
  if (!cfg.weight_by_scan) return w;
  const double mean = static_cast<double>(samples_per_epoch(cfg, data)) / static_cast<double>(data.scans.size());
  for (std::size_t i = 0; i < data.scans.size(); ++i) {
    const int n = cfg.variant == Variant::kDreamer ? pairs_for(cfg, data.scans[i])
                                                   : static_cast<int>(data.scans[i].size()) - 1;
    w[i] = mean / n;
  }
  return w;
}

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const demo::Dataset& data, model::GuidanceModel& m)
      : cfg_(cfg), data_(data), model_(m), weights_(scan_weights(cfg, data)) {
    opts_.beta = cfg.beta;
    opts_.axis_weights = cfg.axis_weights;
    opts_.direct_policy_term = cfg.direct_policy_term;
    if (cfg.variant == Variant::kBaseline) guidance_ = demo::build_guidance_dataset(data.scans);
    steps_per_epoch_ = steps_per_epoch(cfg, data);
  }

  int steps_per_epoch_count() const { return steps_per_epoch_; }

  EpochLog run_epoch(int epoch, std::int64_t& global_step, std::vector<double>& lrs) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t total = static_cast<std::int64_t>(cfg_.epochs) * steps_per_epoch_;
    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    auto take_step = [&](double batch_loss, std::size_t n) {
      const double lr = nn::cosine_lr(global_step, total, cfg_.base_lr);
      nn::optimizer_step(model_.params(), lr, cfg_.weight_decay);
      if (log.steps == 0) log.lr_first = lr;
      log.lr_last = lr;
      lrs.push_back(lr);
      ++log.steps;
      ++global_step;
      loss_sum += batch_loss * static_cast<double>(n);
      seen += n;
    };
    const auto ep = static_cast<std::uint64_t>(epoch);
    Rng shuffle_rng(derive_seed({cfg_.seed, ep, kShuffleTag}));
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);

    if (cfg_.variant == Variant::kBaseline) {
      std::vector<std::size_t> order(guidance_.size());
      std::iota(order.begin(), order.end(), 0);
      shuffle_rng.shuffle(order.begin(), order.end());
      std::vector<demo::GuidanceSample> batch;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        batch.clear();
        model::LossOptions opts = opts_;
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
          batch.push_back(guidance_[order[i]]);
          if (cfg_.weight_by_scan) opts.row_weights.push_back(weights_[batch.back().sequence_index]);
        }
        model_.params().zero_grad();
        nn::Tensor loss = model::baseline_loss(model_, batch, opts);
        nn::backward(loss);
        take_step(loss.item(), batch.size());
      }
    } else {
      std::vector<demo::PermutationSample> pairs;
      for (std::size_t i = 0; i < data_.scans.size(); ++i) {
        auto p = demo::sample_permutation_pairs(data_.scans[i], pairs_for(cfg_, data_.scans[i]),
                                                derive_seed({cfg_.seed, ep, kPairTag, i}), i);
        pairs.insert(pairs.end(), p.begin(), p.end());
      }
      shuffle_rng.shuffle(pairs.begin(), pairs.end());
      std::vector<demo::PermutationSample> batch;
      for (std::size_t start = 0; start < pairs.size(); start += bs) {
        batch.assign(pairs.begin() + static_cast<std::ptrdiff_t>(start),
                     pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), start + bs)));
        model::LossOptions opts = opts_;
        if (cfg_.weight_by_scan) {
          for (const auto& s : batch) opts.row_weights.push_back(weights_[s.sequence_index]);
        }
        model_.params().zero_grad();
        model::DreamerLoss out = model::dreamer_loss(model_, batch, opts);
        nn::backward(out.loss);
        log.skipped_samples += out.skipped;
        take_step(out.loss.item(), batch.size());
      }
    }
    log.mean_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

 private:
  const TrainConfig& cfg_;
  const demo::Dataset& data_;
  model::GuidanceModel& model_;
  std::vector<double> weights_;
  model::LossOptions opts_;
  std::vector<demo::GuidanceSample> guidance_;
  int steps_per_epoch_ = 0;
};

TrainReport run(const TrainConfig& cfg, const demo::Dataset& data, const std::string& manifest,
                model::GuidanceModel& m, int epochs_done, const std::filesystem::path& out_checkpoint,
                std::optional<int> stop_after, const EpochCallback& on_epoch) {
  TrainReport report;
  report.variant = to_string(cfg.variant);
  report.train_manifest = manifest;
  report.train_subjects = data.subjects;
  report.held_out_subjects = data.held_out_subjects;
  report.leakage_check_passed = true;  // check_data threw otherwise

  Trainer trainer(cfg, data, m);
  report.steps_per_epoch = trainer.steps_per_epoch_count();
  report.total_steps = static_cast<std::int64_t>(cfg.epochs) * report.steps_per_epoch;
  std::int64_t global_step = static_cast<std::int64_t>(epochs_done) * report.steps_per_epoch;

  int last = cfg.epochs;
  if (stop_after) {
    if (*stop_after < 1) throw std::invalid_argument("stop_after must be >= 1");
    last = std::min(cfg.epochs, epochs_done + *stop_after);
  }
  int completed = epochs_done;
  for (int epoch = epochs_done + 1; epoch <= last; ++epoch) {
    report.epochs.push_back(trainer.run_epoch(epoch, global_step, report.step_lrs));
    completed = epoch;
    if (on_epoch) on_epoch(report.epochs.back());
  }

  model::CheckpointMeta meta;
  meta.variant = report.variant;
  meta.train_manifest = manifest;
  meta.train_config = cfg.to_json();
  meta.epochs_completed = completed;
  meta.train_subjects = data.subjects;
  model::save_model(out_checkpoint, m, meta);
  return report;
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::kBaseline ? "baseline" : "dreamer"; }

Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "dreamer") return Variant::kDreamer;
  throw std::invalid_argument("unknown variant '" + s + "' (expected baseline or dreamer)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("base_lr must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (pairs_per_sequence < 0) throw std::invalid_argument("pairs_per_sequence must be >= 0");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
}

std::string TrainConfig::to_json() const { return config_json(*this).dump(); }

TrainConfig TrainConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.base_lr = j.at("base_lr");
  c.weight_decay = j.at("weight_decay");
  c.pairs_per_sequence = j.at("pairs_per_sequence");
  c.seed = j.at("seed");
  c.weight_by_scan = j.at("weight_by_scan");
  c.beta = j.at("beta");
  c.axis_weights = j.at("axis_weights").get<std::array<double, 6>>();
  c.direct_policy_term = j.at("direct_policy_term");
  c.model = model::config_from_json(j.at("model").dump());
  return c;
}

std::string TrainReport::to_json() const {
  json epochs_j = json::array();
  for (const auto& e : epochs) {
    epochs_j.push_back({{"epoch", e.epoch},
                        {"mean_loss", e.mean_loss},
                        {"lr_first", e.lr_first},
                        {"lr_last", e.lr_last},
                        {"wall_seconds", e.wall_seconds},
                        {"steps", e.steps},
                        {"skipped_samples", e.skipped_samples}});
  }
  json j = {{"variant", variant},
            {"train_manifest", train_manifest},
            {"train_subjects", train_subjects},
            {"held_out_subjects", held_out_subjects},
            {"leakage_check", leakage_check_passed ? "passed" : "failed"},
            {"steps_per_epoch", steps_per_epoch},
            {"total_steps", total_steps},
            {"epochs", epochs_j},
            {"step_lr", step_lrs}};
  return j.dump(2);
}

int steps_per_epoch(const TrainConfig& cfg, const demo::Dataset& data) {
  const std::size_t n = samples_per_epoch(cfg, data);
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  return static_cast<int>((n + b - 1) / b);
}

TrainReport train(const TrainConfig& cfg_in, const demo::Dataset& data, const std::string& manifest,
                  const std::filesystem::path& out_checkpoint, std::optional<int> stop_after,
                  const EpochCallback& on_epoch) {
  cfg_in.validate();
  const TrainConfig cfg = effective_config(cfg_in, data);
  check_data(cfg, data);
  model::GuidanceModel m(cfg.model, derive_seed({cfg.seed, kInitTag}));
  return run(cfg, data, manifest, m, 0, out_checkpoint, stop_after, on_epoch);
}

TrainReport train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                  const std::filesystem::path& out_checkpoint, std::optional<int> stop_after,
                  const EpochCallback& on_epoch) {
  const demo::Dataset data = demo::load_dataset(data_dir);
  return train(cfg, data, demo::manifest_hash(data_dir), out_checkpoint, stop_after, on_epoch);
}

TrainReport resume(const std::filesystem::path& checkpoint, const TrainConfig& cfg_in, const demo::Dataset& data,
                   const std::string& manifest, const std::filesystem::path& out_checkpoint,
                   std::optional<int> stop_after, const EpochCallback& on_epoch) {
  cfg_in.validate();
  const TrainConfig cfg = effective_config(cfg_in, data);
  check_data(cfg, data);
  model::LoadedModel loaded = model::load_model(checkpoint);

  const json stored = json::parse(loaded.meta.train_config);
  const json wanted = config_json(cfg);
  if (stored != wanted) {
    std::string fields;
    for (const auto& [key, value] : wanted.items()) {
      if (!stored.contains(key) || stored.at(key) != value) fields += (fields.empty() ? "" : ", ") + key;
    }
    throw TrainError("configuration differs from the checkpoint in: " + (fields.empty() ? "<extra keys>" : fields));
  }
  if (loaded.meta.train_manifest != manifest) {
    throw TrainError("checkpoint was trained on a different split (manifest " + loaded.meta.train_manifest + ")");
  }
  if (loaded.meta.epochs_completed >= cfg.epochs) throw TrainError("checkpoint already completed all epochs");
  return run(cfg, data, manifest, loaded.model, loaded.meta.epochs_completed, out_checkpoint, stop_after, on_epoch);
}

TrainReport resume(const std::filesystem::path& checkpoint, const TrainConfig& cfg,
                   const std::filesystem::path& data_dir, const std::filesystem::path& out_checkpoint,
                   std::optional<int> stop_after, const EpochCallback& on_epoch) {
  const demo::Dataset data = demo::load_dataset(data_dir);
  return resume(checkpoint, cfg, data, demo::manifest_hash(data_dir), out_checkpoint, stop_after, on_epoch);
}

}  // namespace echoguide::train

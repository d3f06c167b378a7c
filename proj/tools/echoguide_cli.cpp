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
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "echoguide/demo.hpp"
#include "echoguide/eval.hpp"
#include "echoguide/model.hpp"
#include "echoguide/service.hpp"
#include "echoguide/train.hpp"

namespace eg = echoguide;

namespace {

eg::service::Server* g_server = nullptr;

void on_signal(int) {
  // stop() joins threads; hand it to a detached helper instead of running it in the handler.
  if (g_server) std::thread([] { g_server->stop(); }).detach();
}

int gen_data(const eg::demo::GenerateConfig& cfg, const std::string& out) {
  eg::demo::generate_split_datasets(cfg, out);
  std::printf("wrote %s/train and %s/test\n", out.c_str(), out.c_str());
  return 0;
}

int run_train(const eg::train::TrainConfig& cfg, const std::string& data, const std::string& out,
              const std::string& resume_from, int stop_after, const std::string& report_path) {
  auto progress = [](const eg::train::EpochLog& e) {
    std::printf("epoch %3d  loss %.6f  lr %.3e..%.3e  %.2fs\n", e.epoch, e.mean_loss, e.lr_first, e.lr_last,
                e.wall_seconds);
    std::fflush(stdout);
  };
  std::optional<int> stop;
  if (stop_after > 0) stop = stop_after;
  const eg::train::TrainReport report =
      resume_from.empty() ? eg::train::train(cfg, data, out, stop, progress)
                          : eg::train::resume(resume_from, cfg, data, out, stop, progress);
  const std::string text = report.to_json();
  if (report_path.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream(report_path) << text << '\n';
    std::printf("report written to %s\n", report_path.c_str());
  }
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& out, int bins) {
  const auto model = eg::model::load_model(ckpt);
  const auto test = eg::demo::load_dataset(data);
  const auto e = eg::eval::evaluate(model, test, bins);
  eg::eval::write_eval(e, out);
  std::cout << eg::eval::mae_csv(e.table);
  std::printf("pooled std of absolute error: %.4f\n", e.curve.pooled_std_ae);
  return 0;
}

int run_compare(const std::string& baseline, const std::string& dreamer, const std::string& data,
                const std::string& out, int bins) {
  const auto b = eg::model::load_model(baseline);
  const auto d = eg::model::load_model(dreamer);
  const auto test = eg::demo::load_dataset(data);
  const auto r = eg::eval::compare(b, d, test, bins);
  eg::eval::write_compare(r, out);
  std::cout << r.to_text();
  return 0;
}

int run_serve(const std::string& baseline, const std::string& dreamer, const std::string& address,
              unsigned short port, bool fresh_noise) {
  eg::service::ServiceOptions opts;
  opts.fresh_noise_per_step = fresh_noise;
  auto service = eg::service::GuidanceService::from_files(baseline, dreamer, opts);
  eg::service::Server server(*service, address, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.start();
  std::printf("listening on %s:%u (websocket on /, POST /api)\n", address.c_str(), server.port());
  std::fflush(stdout);
  server.wait();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probe guidance from synthetic echocardiography demonstrations"};
  app.require_subcommand(1);

  eg::demo::GenerateConfig gen;
  std::string gen_out;
  auto* g = app.add_subcommand("gen-data", "Generate train/test demonstration splits");
  g->add_option("--out", gen_out, "Output directory")->required();
  int total_subjects = 0;
  auto* subjects_opt = g->add_option("--subjects", total_subjects, "Total subjects, split 80/20 into train/test")
                           ->check(CLI::Range(2, 100000));
  g->add_option("--train-subjects", gen.train_subjects)->capture_default_str()->excludes(subjects_opt);
  g->add_option("--test-subjects", gen.test_subjects)->capture_default_str()->excludes(subjects_opt);
  g->add_option("--scans-per-plane", gen.scans_per_plane)->capture_default_str();
  g->add_option("--frames", gen.frames, "Frames per scan")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();

  eg::train::TrainConfig tc;
  std::string variant = "baseline", data, out, resume_from, report_path;
  int stop_after = 0;
  bool no_direct = false;
  auto* t = app.add_subcommand("train", "Train the baseline or dreamer model");
  t->add_option("--variant", variant)->check(CLI::IsMember({"baseline", "dreamer"}))->capture_default_str();
  t->add_option("--data", data, "Training split directory")->required();
  t->add_option("--epochs", tc.epochs)->capture_default_str();
  t->add_option("--seed", tc.seed)->capture_default_str();
  t->add_option("--out", out, "Checkpoint path")->required();
  t->add_option("--batch-size", tc.batch_size)->capture_default_str();
  t->add_option("--lr", tc.base_lr)->capture_default_str();
  t->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
  t->add_option("--pairs-per-seq", tc.pairs_per_sequence, "Dreamer pairs per scan per epoch (0: one per frame)")
      ->capture_default_str();
  t->add_flag("--weight-by-scan", tc.weight_by_scan, "Give every scan equal total weight");
  t->add_flag("--no-direct-term", no_direct, "Dreamer: drop the policy's own target-relative loss term");
  t->add_option("--resume", resume_from, "Continue from this checkpoint");
  t->add_option("--stop-after", stop_after, "Stop after this many epochs of this run");
  t->add_option("--report", report_path, "Write the JSON report here instead of stdout");

  std::string ckpt;
  int bins = 8;
  auto* e = app.add_subcommand("eval", "MAE table and stability curve for one checkpoint");
  e->add_option("--ckpt", ckpt)->required();
  e->add_option("--data", data, "Test split directory")->required();
  e->add_option("--out", out)->required();
  e->add_option("--bins", bins)->check(CLI::PositiveNumber)->capture_default_str();

  std::string baseline, dreamer;
  auto* c = app.add_subcommand("compare", "Baseline vs dreamer comparison");
  c->add_option("--baseline", baseline)->required();
  c->add_option("--dreamer", dreamer)->required();
  c->add_option("--data", data, "Test split directory")->required();
  c->add_option("--out", out)->required();
  c->add_option("--bins", bins)->check(CLI::PositiveNumber)->capture_default_str();

  std::string address = "127.0.0.1";
  unsigned short port = 8765;
  bool fresh_noise = false;
  auto* s = app.add_subcommand("serve", "Run the guidance session server");
  s->add_option("--ckpt-baseline", baseline);
  s->add_option("--ckpt-dreamer", dreamer);
  s->add_option("--port", port)->capture_default_str();
  s->add_option("--address", address)->capture_default_str();
  s->add_flag("--fresh-noise", fresh_noise, "New speckle on every step");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) {
      if (*subjects_opt) {
        gen.test_subjects = std::max(1, static_cast<int>(std::lround(total_subjects / 5.0)));
        gen.train_subjects = total_subjects - gen.test_subjects;
      }
      return gen_data(gen, gen_out);
    }
    if (*t) {
      tc.variant = eg::train::parse_variant(variant);
      tc.direct_policy_term = !no_direct;
      return run_train(tc, data, out, resume_from, stop_after, report_path);
    }
    if (*e) return run_eval(ckpt, data, out, bins);
    if (*c) return run_compare(baseline, dreamer, data, out, bins);
    if (*s) {
      if (baseline.empty() && dreamer.empty()) throw std::invalid_argument("serve needs at least one checkpoint");
      return run_serve(baseline, dreamer, address, port, fresh_noise);
    }
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}

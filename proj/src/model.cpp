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

#include "echoguide/model.hpp"

#include <cmath>
#include <stdexcept>

#include "echoguide/random.hpp"
#include "json.hpp"

namespace echoguide::model {

using nlohmann::json;

namespace {

// ---- forward-mode scalar for the action-combination Jacobian -------------

struct Dual {
  double v = 0.0;
  std::array<double, 6> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constants are the point

  friend Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (int i = 0; i < 6; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (int i = 0; i < 6; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a) {
    Dual r(-a.v);
    for (int i = 0; i < 6; ++i) r.d[i] = -a.d[i];
    return r;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < 6; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }

  Dual chain(double value, double slope) const {
    Dual r(value);
    for (int i = 0; i < 6; ++i) r.d[i] = slope * d[i];
    return r;
  }
};

Dual sin(const Dual& a) { return a.chain(std::sin(a.v), std::cos(a.v)); }
Dual cos(const Dual& a) { return a.chain(std::cos(a.v), -std::sin(a.v)); }
Dual asin(const Dual& a) { return a.chain(std::asin(a.v), 1.0 / std::sqrt(1.0 - a.v * a.v)); }
Dual atan2(const Dual& y, const Dual& x) {
  const double r2 = x.v * x.v + y.v * y.v;
  Dual r(std::atan2(y.v, x.v));
  for (int i = 0; i < 6; ++i) r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / r2;
  return r;
}

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return derive_seed({seed, h});
}

std::vector<double> uniform_init(std::uint64_t seed, const std::string& name, std::size_t n, double bound) {
  Rng rng(name_seed(seed, name));
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

constexpr int kConvKernel = 3;
constexpr int kConvStride = 2;
constexpr int kConvPad = 1;

int conv_out(int n) { return (n + 2 * kConvPad - kConvKernel) / kConvStride + 1; }

}  // namespace

// ---- config ----------------------------------------------------------------

std::string config_to_json(const ModelConfig& c) {
  json j = {{"h", c.h},
            {"w", c.w},
            {"conv_channels", c.conv_channels},
            {"feature_dim", c.feature_dim},
            {"guide_hidden", c.guide_hidden},
            {"num_planes", c.num_planes},
            {"query_dim", c.query_dim},
            {"with_dreamer", c.with_dreamer},
            {"attn_blocks", c.attn_blocks},
            {"attn_heads", c.attn_heads},
            {"ff_dim", c.ff_dim}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.h = j.at("h");
  c.w = j.at("w");
  c.conv_channels = j.at("conv_channels");
  c.feature_dim = j.at("feature_dim");
  c.guide_hidden = j.at("guide_hidden");
  c.num_planes = j.at("num_planes");
  c.query_dim = j.at("query_dim");
  c.with_dreamer = j.at("with_dreamer");
  c.attn_blocks = j.at("attn_blocks");
  c.attn_heads = j.at("attn_heads");
  c.ff_dim = j.at("ff_dim");
  return c;
}

// ---- network ----------------------------------------------------------------

GuidanceModel::GuidanceModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.h < 16 || cfg.w < 16) throw std::invalid_argument("model: image must be at least 16x16");
  if (cfg.num_planes < 1) throw std::invalid_argument("model: num_planes must be >= 1");
  if (cfg.feature_dim % cfg.attn_heads != 0) throw std::invalid_argument("model: feature_dim % attn_heads != 0");

  auto add_dense = [&](const std::string& name, int in, int out, double gain) {
    const double bound = gain * std::sqrt(3.0 / in);
    store_.add(name + ".w", {in, out}, uniform_init(seed, name + ".w", static_cast<std::size_t>(in) * out, bound));
    store_.add(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
  };
  const double kRelu = std::sqrt(2.0);

  int h = cfg.h, w = cfg.w, c = 1;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    const int co = cfg.conv_channels[i];
    const std::string name = "encoder.conv" + std::to_string(i);
    const int fan_in = kConvKernel * kConvKernel * c;
    store_.add(name + ".k", {kConvKernel, kConvKernel, c, co},
               uniform_init(seed, name + ".k", static_cast<std::size_t>(fan_in) * co, kRelu * std::sqrt(3.0 / fan_in)));
    store_.add(name + ".b", {co}, std::vector<double>(static_cast<std::size_t>(co), 0.0));
    h = conv_out(h);
    w = conv_out(w);
    c = co;
  }
  add_dense("encoder.fc", h * w * c, cfg.feature_dim, 1.0);

  store_.add("guide.queries", {cfg.num_planes, cfg.query_dim},
             uniform_init(seed, "guide.queries", static_cast<std::size_t>(cfg.num_planes) * cfg.query_dim, 1.0));
  add_dense("guide.fc0", cfg.feature_dim + cfg.query_dim, cfg.guide_hidden[0], kRelu);
  add_dense("guide.fc1", cfg.guide_hidden[0], cfg.guide_hidden[1], kRelu);
  add_dense("guide.fc2", cfg.guide_hidden[1], 6, 0.1);

  if (cfg.with_dreamer) {
    const int d = cfg.feature_dim;
    add_dense("dreamer.action", 6, d, 1.0);
    store_.add("dreamer.pos", {2, d}, uniform_init(seed, "dreamer.pos", 2 * static_cast<std::size_t>(d), 0.1));
    for (int b = 0; b < cfg.attn_blocks; ++b) {
      const std::string p = "dreamer.blk" + std::to_string(b);
      for (const char* m : {".q", ".k", ".v", ".o"}) add_dense(p + m, d, d, 1.0);
      store_.add(p + ".ln1.g", {d}, std::vector<double>(static_cast<std::size_t>(d), 1.0));
      store_.add(p + ".ln1.b", {d}, std::vector<double>(static_cast<std::size_t>(d), 0.0));
      add_dense(p + ".ff1", d, cfg.ff_dim, kRelu);
      add_dense(p + ".ff2", cfg.ff_dim, d, 1.0);
      store_.add(p + ".ln2.g", {d}, std::vector<double>(static_cast<std::size_t>(d), 1.0));
      store_.add(p + ".ln2.b", {d}, std::vector<double>(static_cast<std::size_t>(d), 0.0));
    }
    add_dense("dreamer.head", d, d, 0.1);
  }
}

Tensor GuidanceModel::encode(const Tensor& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != cfg_.h || frames.dim(2) != cfg_.w || frames.dim(3) != 1)
    throw nn::ShapeError("encode: expected [B," + std::to_string(cfg_.h) + "," + std::to_string(cfg_.w) +
                         ",1], got " + nn::shape_str(frames.shape()));
  Tensor x = frames;
  for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
    const std::string name = "encoder.conv" + std::to_string(i);
    x = nn::relu(nn::conv2d(x, param(name + ".k"), param(name + ".b"), kConvStride, kConvPad));
  }
  return nn::dense(nn::flatten(x), param("encoder.fc.w"), param("encoder.fc.b"));
}

Tensor GuidanceModel::plane_queries(std::span<const int> planes) const {
  std::vector<double> onehot(planes.size() * static_cast<std::size_t>(cfg_.num_planes), 0.0);
  for (std::size_t i = 0; i < planes.size(); ++i) {
    if (planes[i] < 0 || planes[i] >= cfg_.num_planes)
      throw std::out_of_range("unknown plane id " + std::to_string(planes[i]));
    onehot[i * static_cast<std::size_t>(cfg_.num_planes) + static_cast<std::size_t>(planes[i])] = 1.0;
  }
  return nn::matmul(nn::constant({static_cast<int>(planes.size()), cfg_.num_planes}, std::move(onehot)),
                    param("guide.queries"));
}

Tensor GuidanceModel::guide(const Tensor& features, std::span<const int> planes) const {
  if (features.rank() != 2 || features.dim(1) != cfg_.feature_dim ||
      static_cast<std::size_t>(features.dim(0)) != planes.size())
    throw nn::ShapeError("guide: features " + nn::shape_str(features.shape()) + " vs " +
                         std::to_string(planes.size()) + " planes");
  Tensor x = nn::concat(features, plane_queries(planes));
  x = nn::relu(nn::dense(x, param("guide.fc0.w"), param("guide.fc0.b")));
  x = nn::relu(nn::dense(x, param("guide.fc1.w"), param("guide.fc1.b")));
  x = nn::dense(x, param("guide.fc2.w"), param("guide.fc2.b"));
  return nn::scale_last(x, kActionScale);
}

Tensor GuidanceModel::attention_block(const Tensor& x, int block) const {
  const std::string p = "dreamer.blk" + std::to_string(block);
  const Tensor q = nn::dense(x, param(p + ".q.w"), param(p + ".q.b"));
  const Tensor k = nn::dense(x, param(p + ".k.w"), param(p + ".k.b"));
  const Tensor v = nn::dense(x, param(p + ".v.w"), param(p + ".v.b"));
  const Tensor att = nn::dense(nn::softmax_attention(q, k, v, cfg_.attn_heads), param(p + ".o.w"), param(p + ".o.b"));
  Tensor y = nn::layer_norm(nn::add(x, att), param(p + ".ln1.g"), param(p + ".ln1.b"));
  const Tensor ff = nn::dense(nn::relu(nn::dense(y, param(p + ".ff1.w"), param(p + ".ff1.b"))), param(p + ".ff2.w"),
                              param(p + ".ff2.b"));
  return nn::layer_norm(nn::add(y, ff), param(p + ".ln2.g"), param(p + ".ln2.b"));
}

Tensor GuidanceModel::dream(const Tensor& features, const Tensor& actions) const {
  if (!cfg_.with_dreamer) throw std::logic_error("dream: model has no world-model parameters");
  if (features.rank() != 2 || features.dim(1) != cfg_.feature_dim || actions.rank() != 2 || actions.dim(1) != 6 ||
      actions.dim(0) != features.dim(0))
    throw nn::ShapeError("dream: features " + nn::shape_str(features.shape()) + ", actions " +
                         nn::shape_str(actions.shape()));
  std::array<double, 6> inv{};
  for (std::size_t i = 0; i < 6; ++i) inv[i] = 1.0 / kActionScale[i];
  const Tensor a = nn::dense(nn::scale_last(actions, inv), param("dreamer.action.w"), param("dreamer.action.b"));
  const std::array<Tensor, 2> tokens = {features, a};
  Tensor x = nn::add_broadcast(nn::stack_tokens(tokens), param("dreamer.pos"));
  for (int b = 0; b < cfg_.attn_blocks; ++b) x = attention_block(x, b);
  const Tensor delta = nn::dense(nn::select_token(x, 0), param("dreamer.head.w"), param("dreamer.head.b"));
  return nn::add(features, delta);
}

std::vector<double> GuidanceModel::encode(const phantom::Frame& frame) const {
  const phantom::FramePtr ptr(std::shared_ptr<const phantom::Frame>{}, &frame);
  const std::array<phantom::FramePtr, 1> one = {ptr};
  const Tensor f = encode(frames_to_tensor(one, cfg_.h, cfg_.w));
  return {f.values().begin(), f.values().end()};
}

Pose6 GuidanceModel::guide(std::span<const double> feature, PlaneId plane) const {
  if (feature.size() != static_cast<std::size_t>(cfg_.feature_dim))
    throw nn::ShapeError("guide: feature has " + std::to_string(feature.size()) + " values");
  const std::array<int, 1> planes = {plane.index()};
  const Tensor a = guide(nn::constant({1, cfg_.feature_dim}, {feature.begin(), feature.end()}), planes);
  return Pose6{a.values()[0], a.values()[1], a.values()[2], a.values()[3], a.values()[4], a.values()[5]};
}

std::vector<double> GuidanceModel::dream(std::span<const double> feature, const Pose6& action) const {
  const auto av = action.to_array();
  const Tensor f2 = dream(nn::constant({1, cfg_.feature_dim}, {feature.begin(), feature.end()}),
                          nn::constant({1, 6}, {av.begin(), av.end()}));
  return {f2.values().begin(), f2.values().end()};
}

Pose6 GuidanceModel::predict(const phantom::Frame& frame, PlaneId plane) const { return guide(encode(frame), plane); }

// ---- losses ------------------------------------------------------------------

Tensor frames_to_tensor(std::span<const phantom::FramePtr> frames, int h, int w) {
  std::vector<double> v;
  v.reserve(frames.size() * static_cast<std::size_t>(h) * w);
  for (const auto& f : frames) {
    if (!f || f->h != h || f->w != w)
      throw nn::ShapeError("frame size does not match model input " + std::to_string(h) + "x" + std::to_string(w));
    v.insert(v.end(), f->pixels.begin(), f->pixels.end());
  }
  return nn::constant({static_cast<int>(frames.size()), h, w, 1}, std::move(v));
}

Tensor poses_to_tensor(std::span<const Pose6> poses) {
  std::vector<double> v;
  v.reserve(poses.size() * 6);
  for (const Pose6& p : poses)
    for (std::size_t i = 0; i < 6; ++i) v.push_back(p[i]);
  return nn::constant({static_cast<int>(poses.size()), 6}, std::move(v));
}

namespace {

std::vector<double> flat_targets(std::span<const Pose6> poses) {
  std::vector<double> v;
  v.reserve(poses.size() * 6);
  for (const Pose6& p : poses)
    for (std::size_t i = 0; i < 6; ++i) v.push_back(p[i]);
  return v;
}

}  // namespace

Tensor baseline_loss(const GuidanceModel& model, std::span<const demo::GuidanceSample> batch,
                     const LossOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("baseline_loss: empty batch");
  std::vector<phantom::FramePtr> frames;
  std::vector<int> planes;
  std::vector<Pose6> targets;
  for (const auto& s : batch) {
    frames.push_back(s.frame);
    planes.push_back(s.plane.index());
    targets.push_back(s.action_gt);
  }
  const auto& cfg = model.config();
  const Tensor pred = model.guide(model.encode(frames_to_tensor(frames, cfg.h, cfg.w)), planes);
  return nn::smooth_l1(pred, flat_targets(targets), opts.beta, opts.axis_weights, opts.row_weights);
}

Tensor combine_actions(std::span<const Pose6> a_12, const Tensor& a_2, std::vector<bool>* skipped) {
  if (a_2.rank() != 2 || a_2.dim(1) != 6 || static_cast<std::size_t>(a_2.dim(0)) != a_12.size())
    throw nn::ShapeError("combine_actions: a_2 " + nn::shape_str(a_2.shape()) + " vs " +
                         std::to_string(a_12.size()) + " inter-frame actions");
  if (skipped) skipped->assign(a_12.size(), false);
  std::vector<se3::kernel::Mat4<Dual>> lhs;
  lhs.reserve(a_12.size());
  for (const Pose6& a : a_12) {
    const auto m = se3::kernel::to_matrix<double>(a.to_array());
    se3::kernel::Mat4<Dual> md{};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) md[i][j] = Dual(m[i][j]);
    lhs.push_back(md);
  }
  return nn::rowwise_map(a_2, 6, [&](std::size_t row, std::span<const double> in, std::span<double> out,
                                     std::span<double> jac) {
    std::array<Dual, 6> x{};
    for (int i = 0; i < 6; ++i) {
      x[i] = Dual(in[static_cast<std::size_t>(i)]);
      x[i].d[i] = 1.0;
    }
    const auto m = se3::kernel::multiply(lhs[row], se3::kernel::to_matrix(x));
    const double cos_pitch = std::hypot(m[0][0].v, m[1][0].v);
    if (cos_pitch < se3::kGimbalThreshold) {
      Eigen::Matrix4d em;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) em(i, j) = m[i][j].v;
      em.row(3) << 0, 0, 0, 1;
      const Pose6 fb = se3::from_matrix_or_fallback(se3::HomTransform(em));
      for (std::size_t i = 0; i < 6; ++i) out[i] = fb[i];
      std::fill(jac.begin(), jac.end(), 0.0);
      if (skipped) (*skipped)[row] = true;
      return;
    }
    const auto r = se3::kernel::from_matrix_unchecked(m);
    for (std::size_t o = 0; o < 6; ++o) {
      out[o] = o < 3 ? r[o].v : se3::wrap_degrees(r[o].v);
      for (std::size_t i = 0; i < 6; ++i) jac[o * 6 + i] = r[o].d[i];
    }
  });
}

DreamerLoss dreamer_loss(const GuidanceModel& model, std::span<const demo::PermutationSample> batch,
                         const LossOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("dreamer_loss: empty batch");
  if (!model.has_dreamer()) throw std::logic_error("dreamer_loss: model has no world model");
  std::vector<phantom::FramePtr> frames;
  std::vector<int> planes;
  std::vector<Pose6> a12, a1t, a2t;
  for (const auto& s : batch) {
    frames.push_back(s.frame1);
    planes.push_back(s.plane.index());
    a12.push_back(s.a_12);
    a1t.push_back(s.a_1T);
    a2t.push_back(s.a_2T);
  }
  const auto& cfg = model.config();
  const Tensor f1 = model.encode(frames_to_tensor(frames, cfg.h, cfg.w));
  const Tensor f2 = model.dream(f1, poses_to_tensor(a12));
  DreamerLoss out;
  out.a2_pred = model.guide(f2, planes);
  std::vector<bool> skipped;
  out.a1_pred = combine_actions(a12, out.a2_pred, &skipped);

  std::vector<double> rows = opts.row_weights.empty() ? std::vector<double>(batch.size(), 1.0) : opts.row_weights;
  if (rows.size() != batch.size()) throw std::invalid_argument("dreamer_loss: row weight count mismatch");
  for (std::size_t i = 0; i < skipped.size(); ++i)
    if (skipped[i]) {
      rows[i] = 0.0;
      ++out.skipped;
    }
  out.loss = nn::add(nn::smooth_l1(out.a1_pred, flat_targets(a1t), opts.beta, opts.axis_weights, rows),
                     nn::smooth_l1(out.a2_pred, flat_targets(a2t), opts.beta, opts.axis_weights, rows));
  if (opts.direct_policy_term) {
    const Tensor direct = model.guide(f1, planes);
    out.loss = nn::add(out.loss, nn::smooth_l1(direct, flat_targets(a1t), opts.beta, opts.axis_weights, rows));
  }
  return out;
}

// ---- persistence -------------------------------------------------------------

void save_model(const std::filesystem::path& path, const GuidanceModel& model, const CheckpointMeta& meta) {
  json header = {{"model", json::parse(config_to_json(model.config()))},
                 {"variant", meta.variant},
                 {"train_manifest", meta.train_manifest},
                 {"train_config", meta.train_config.empty() ? json::object() : json::parse(meta.train_config)},
                 {"epochs_completed", meta.epochs_completed},
                 {"train_subjects", meta.train_subjects}};
  nn::Checkpoint ckpt{header.dump(), nn::store_to_records(model.params())};
  nn::save_checkpoint(path, ckpt);
}

LoadedModel load_model(const std::filesystem::path& path) {
  nn::Checkpoint ckpt = nn::load_checkpoint(path);
  json header;
  try {
    header = json::parse(ckpt.header);
    const ModelConfig cfg = config_from_json(header.at("model").dump());
    LoadedModel out{GuidanceModel(cfg, 0), {}};
    nn::records_to_store(ckpt.records, out.model.params());
    out.meta.variant = header.at("variant");
    out.meta.train_manifest = header.at("train_manifest");
    out.meta.train_config = header.at("train_config").dump();
    out.meta.epochs_completed = header.at("epochs_completed");
    out.meta.train_subjects = header.at("train_subjects").get<std::vector<std::uint64_t>>();
    return out;
  } catch (const json::exception& e) {
    throw nn::CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
}

}  // namespace echoguide::model

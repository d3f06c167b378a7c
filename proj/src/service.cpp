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

#include "echoguide/service.hpp"

#include <algorithm>
#include <cmath>

#include <boost/beast/core/detail/base64.hpp>

#include "echoguide/random.hpp"
#include "json.hpp"

namespace echoguide::service {

using nlohmann::json;

namespace {

constexpr std::uint64_t kNoiseTag = 0x5e55;

json pose_json(const Pose6& p) { return json::array({p.x, p.y, p.z, p.rx, p.ry, p.rz}); }

Pose6 parse_pose(const json& j, const char* field) {
  if (!j.is_array() || j.size() != 6) throw ServiceError(std::string(field) + " must be an array of 6 numbers");
  Pose6 p;
  for (std::size_t i = 0; i < 6; ++i) {
    if (!j[i].is_number()) throw ServiceError(std::string(field) + " must be an array of 6 numbers");
    p[i] = j[i].get<double>();
  }
  if (!p.is_finite()) throw ServiceError(std::string(field) + " has non-finite components");
  return p;
}

const json& field(const json& msg, const char* name) {
  auto it = msg.find(name);
  if (it == msg.end()) throw ServiceError(std::string("missing field '") + name + "'");
  return *it;
}

std::uint64_t parse_u64(const json& msg, const char* name) {
  const json& v = field(msg, name);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ServiceError(std::string("'") + name + "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

std::string parse_session(const json& msg) {
  const json& v = field(msg, "session");
  if (!v.is_string()) throw ServiceError("'session' must be a string");
  return v.get<std::string>();
}

json state_json(const SessionState& s, const char* type) {
  json guidance = json::object();
  for (const auto& [name, a] : s.guidance) guidance[name] = pose_json(a);
  return {{"type", type},
          {"session", s.session},
          {"step", s.step},
          {"pose", pose_json(s.pose)},
          {"frame", {{"h", s.frame.h}, {"w", s.frame.w}, {"pixels_b64", encode_pixels(s.frame)}}},
          {"guidance", guidance},
          {"remaining", pose_json(s.remaining)}};
}

}  // namespace

struct GuidanceService::Session {
  std::mutex mu;
  std::string id;
  std::shared_ptr<const phantom::Phantom> phantom;
  phantom::PlaneId plane{0};
  std::vector<std::string> models;
  Pose6 target;
  Pose6 start;
  Pose6 pose;
  std::uint64_t noise_seed = 0;
  std::uint64_t step = 0;
};

std::vector<unsigned char> quantize_pixels(const phantom::Frame& frame) {
  std::vector<unsigned char> out(frame.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(frame.pixels[i]), 0.0, 1.0);
    out[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  return out;
}

std::string encode_pixels(const phantom::Frame& frame) {
  namespace b64 = boost::beast::detail::base64;
  const auto bytes = quantize_pixels(frame);
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

GuidanceService::GuidanceService(std::shared_ptr<const model::LoadedModel> baseline,
                                 std::shared_ptr<const model::LoadedModel> dreamer, ServiceOptions opts)
    : opts_(opts) {
  if (!baseline && !dreamer) throw ServiceError("at least one checkpoint is required");
  std::optional<std::pair<int, int>> size;
  for (auto& [name, m] : {std::pair{std::string("baseline"), baseline}, std::pair{std::string("dreamer"), dreamer}}) {
    if (!m) continue;
    const auto& c = m->model.config();
    if (size && *size != std::pair{c.h, c.w}) throw ServiceError("checkpoints disagree on the frame size");
    size = std::pair{c.h, c.w};
    models_[name] = m;
  }
  opts_.geom.h = size->first;
  opts_.geom.w = size->second;
}

std::unique_ptr<GuidanceService> GuidanceService::from_files(const std::filesystem::path& baseline,
                                                             const std::filesystem::path& dreamer,
                                                             ServiceOptions opts) {
  auto load = [](const std::filesystem::path& p) -> std::shared_ptr<const model::LoadedModel> {
    if (p.empty()) return nullptr;
    return std::make_shared<const model::LoadedModel>(model::load_model(p));
  };
  return std::make_unique<GuidanceService>(load(baseline), load(dreamer), opts);
}

std::vector<std::string> GuidanceService::loaded_models() const {
  std::vector<std::string> out;
  for (const auto& [name, m] : models_) out.push_back(name);
  return out;
}

std::shared_ptr<const phantom::Phantom> GuidanceService::phantom_for(std::uint64_t subject_seed) {
  std::lock_guard lock(mu_);
  auto it = phantoms_.find(subject_seed);
  if (it != phantoms_.end()) return it->second;
  auto p = std::make_shared<const phantom::Phantom>(
      phantom::generate_phantom(subject_seed).with_noise(opts_.noise_sigma));
  phantoms_.emplace(subject_seed, p);
  return p;
}

std::shared_ptr<GuidanceService::Session> GuidanceService::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError("unknown session '" + id + "'");
  return it->second;
}

SessionState GuidanceService::snapshot(Session& s) const {
  SessionState out;
  out.session = s.id;
  out.step = s.step;
  out.pose = s.pose;
  const std::uint64_t seed = opts_.fresh_noise_per_step ? derive_seed({s.noise_seed, s.step}) : s.noise_seed;
  out.noise_seed = seed;
  out.frame = phantom::render_slice(*s.phantom, s.pose, opts_.geom, seed);
  for (const auto& name : s.models) out.guidance[name] = models_.at(name)->model.predict(out.frame, s.plane);
  out.remaining = se3::relative(s.pose, s.target);
  return out;
}

SessionState GuidanceService::create(const CreateRequest& req) {
  if (req.plane < 0 || req.plane >= phantom::kNumPlanes) {
    throw ServiceError("unknown plane id " + std::to_string(req.plane));
  }
  for (const auto& m : req.models) {
    if (!models_.contains(m)) throw ServiceError("model '" + m + "' is not loaded");
  }
  auto s = std::make_shared<Session>();
  s->phantom = phantom_for(req.subject_seed);
  s->plane = phantom::PlaneId(req.plane);
  s->models = req.models;
  s->target = phantom::standard_plane_poses(*s->phantom)[static_cast<std::size_t>(req.plane)];
  s->start = demo::sample_start_pose(s->target, req.start_seed, opts_.region);
  s->pose = s->start;
  s->noise_seed = derive_seed({req.subject_seed, static_cast<std::uint64_t>(req.plane), req.start_seed, kNoiseTag});
  {
    std::lock_guard lock(mu_);
    s->id = "s" + std::to_string(next_id_++);
    sessions_[s->id] = s;
  }
  std::lock_guard lock(s->mu);
  return snapshot(*s);
}

SessionState GuidanceService::step(const std::string& session, const Pose6& delta) {
  if (!delta.is_finite()) throw ServiceError("delta has non-finite components");
  auto s = find(session);
  std::lock_guard lock(s->mu);
  s->pose = demo::clamp_to_region(se3::compose(s->pose, delta), s->target, opts_.region);
  ++s->step;
  return snapshot(*s);
}

SessionState GuidanceService::reset(const std::string& session) {
  auto s = find(session);
  std::lock_guard lock(s->mu);
  s->pose = s->start;
  s->step = 0;
  return snapshot(*s);
}

void GuidanceService::close(const std::string& session) {
  std::lock_guard lock(mu_);
  if (sessions_.erase(session) == 0) throw ServiceError("unknown session '" + session + "'");
}

std::vector<std::string> GuidanceService::list() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, s] : sessions_) out.push_back(id);
  return out;
}

Pose6 GuidanceService::target(const std::string& session) const { return find(session)->target; }

std::string GuidanceService::handle(const std::string& message) {
  std::string type;
  try {
    json msg;
    try {
      msg = json::parse(message);
    } catch (const json::parse_error& e) {
      throw ServiceError(std::string("malformed message: ") + e.what());
    }
    if (!msg.is_object()) throw ServiceError("message must be a JSON object");
    const json& t = field(msg, "type");
    if (!t.is_string()) throw ServiceError("'type' must be a string");
    type = t.get<std::string>();

    if (type == "create") {
      CreateRequest req;
      req.subject_seed = parse_u64(msg, "subject_seed");
      const json& plane = field(msg, "plane");
      if (!plane.is_number_integer()) throw ServiceError("'plane' must be an integer");
      req.plane = plane.get<int>();
      const json& models = field(msg, "models");
      if (!models.is_array()) throw ServiceError("'models' must be an array");
      for (const auto& m : models) {
        if (!m.is_string()) throw ServiceError("'models' entries must be strings");
        req.models.push_back(m.get<std::string>());
      }
      req.start_seed = parse_u64(msg, "start_seed");
      return state_json(create(req), "created").dump();
    }
    if (type == "step") {
      const std::string id = parse_session(msg);
      const Pose6 delta = parse_pose(field(msg, "delta"), "delta");
      return state_json(step(id, delta), "state").dump();
    }
    if (type == "reset") return state_json(reset(parse_session(msg)), "state").dump();
    if (type == "close") {
      const std::string id = parse_session(msg);
      close(id);
      return json{{"type", "closed"}, {"session", id}}.dump();
    }
    if (type == "list") return json{{"type", "sessions"}, {"sessions", list()}}.dump();
    throw ServiceError("unknown message type '" + type + "'");
  } catch (const std::exception& e) {
    json err = {{"type", "error"}, {"message", e.what()}};
    if (!type.empty()) err["request"] = type;
    return err.dump();
  }
}

}  // namespace echoguide::service

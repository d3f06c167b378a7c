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

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "echoguide/demo.hpp"
#include "echoguide/model.hpp"
#include "echoguide/phantom.hpp"

namespace echoguide::service {

using se3::Pose6;

class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServiceOptions {
  phantom::SliceGeometry geom;             // h and w are taken from the loaded checkpoints
  double noise_sigma = phantom::kDefaultNoiseSigma;
  bool fresh_noise_per_step = false;       // default: fixed noise seed per session
  demo::ScanConfig region;                 // safety box around the target
};

struct CreateRequest {
  std::uint64_t subject_seed = 1;
  int plane = 0;
  std::vector<std::string> models;
  std::uint64_t start_seed = 0;
};

struct SessionState {
  std::string session;
  std::uint64_t step = 0;
  Pose6 pose;
  phantom::Frame frame;
  std::uint64_t noise_seed = 0;  // speckle seed the frame was rendered with
  std::map<std::string, Pose6> guidance;
  Pose6 remaining;  // relative(pose, target)
};

/// Row-major 8-bit quantization of [0, 1] pixels, base64 encoded.
std::string encode_pixels(const phantom::Frame& frame);
std::vector<unsigned char> quantize_pixels(const phantom::Frame& frame);

/// Guidance sessions over one or two frozen checkpoints. All methods are
/// thread-safe; operations on one session are serialized.
class GuidanceService {
 public:
  GuidanceService(std::shared_ptr<const model::LoadedModel> baseline, std::shared_ptr<const model::LoadedModel> dreamer,
                  ServiceOptions opts = {});

  /// Loads checkpoints from disk; either path may be empty.
  static std::unique_ptr<GuidanceService> from_files(const std::filesystem::path& baseline,
                                                     const std::filesystem::path& dreamer, ServiceOptions opts = {});

  SessionState create(const CreateRequest& req);
  SessionState step(const std::string& session, const Pose6& delta);
  SessionState reset(const std::string& session);
  void close(const std::string& session);
  std::vector<std::string> list() const;

  /// Target pose of a session (for tests and scripted clients).
  Pose6 target(const std::string& session) const;

  /// Wire protocol entry point: one JSON message in, one JSON message out.
  /// Failures are answered with {"type":"error","message":...}.
  std::string handle(const std::string& message);

  std::vector<std::string> loaded_models() const;
  const ServiceOptions& options() const { return opts_; }

 private:
  struct Session;
  std::shared_ptr<Session> find(const std::string& id) const;
  SessionState snapshot(Session& s) const;
  std::shared_ptr<const phantom::Phantom> phantom_for(std::uint64_t subject_seed);

  std::map<std::string, std::shared_ptr<const model::LoadedModel>> models_;
  ServiceOptions opts_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::uint64_t, std::shared_ptr<const phantom::Phantom>> phantoms_;
  std::uint64_t next_id_ = 1;
};

/// Websocket endpoint on "/" and a request/response mirror at POST /api,
/// served from one port. One thread per connection.
class Server {
 public:
  /// Binds immediately; port 0 picks a free port.
  Server(GuidanceService& service, const std::string& address, unsigned short port);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const { return port_; }
  /// Starts the accept loop on a background thread.
  void start();
  /// Blocks until stop() is called from elsewhere.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  unsigned short port_ = 0;
};

}  // namespace echoguide::service

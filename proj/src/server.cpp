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

#include <sys/socket.h>

#include <condition_variable>
#include <list>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/version.hpp>
#include <boost/beast/websocket.hpp>

#include "echoguide/service.hpp"

namespace echoguide::service {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

struct Server::Impl {
  GuidanceService& service;
  asio::io_context ioc;
  tcp::acceptor acceptor;
  std::thread accept_thread;

  std::mutex mu;
  std::condition_variable stopped_cv;
  bool stopping = false;
  bool stopped = false;
  struct Conn {
    tcp::socket socket;
    std::thread thread;
    bool done = false;
  };
  std::list<Conn> conns;

  Impl(GuidanceService& s, const std::string& address, unsigned short port)
      : service(s), acceptor(ioc, tcp::endpoint(asio::ip::make_address(address), port)) {}

  void accept_loop() {
    for (;;) {
      tcp::socket socket(ioc);
      beast::error_code ec;
      acceptor.accept(socket, ec);
      std::lock_guard lock(mu);
      if (stopping) return;
      if (ec) continue;
      reap_locked();
      auto& c = conns.emplace_back(Conn{std::move(socket), {}, false});
      c.thread = std::thread([this, &c] {
        serve(c.socket);
        std::lock_guard inner(mu);
        c.done = true;
      });
    }
  }

  // Joins finished connection threads; caller holds `mu`.
  void reap_locked() {
    for (auto it = conns.begin(); it != conns.end();) {
      if (it->done) {
        it->thread.join();
        it = conns.erase(it);
      } else {
        ++it;
      }
    }
  }

  void serve(tcp::socket& socket) {
    beast::flat_buffer buffer;
    beast::error_code ec;
    for (;;) {
      http::request<http::string_body> req;
      http::read(socket, buffer, req, ec);
      if (ec) return;
      if (websocket::is_upgrade(req)) {
        serve_websocket(socket, std::move(req));
        return;
      }
      http::response<http::string_body> res = respond(req);
      const bool keep = res.keep_alive();
      http::write(socket, res, ec);
      if (ec || !keep) break;
    }
    socket.shutdown(tcp::socket::shutdown_send, ec);
  }

  http::response<http::string_body> respond(const http::request<http::string_body>& req) {
    http::response<http::string_body> res;
    res.version(req.version());
    res.keep_alive(req.keep_alive());
    res.set(http::field::server, "echoguide");
    res.set(http::field::access_control_allow_origin, "*");
    if (req.target() == "/api" && req.method() == http::verb::post) {
      res.result(http::status::ok);
      res.set(http::field::content_type, "application/json");
      res.body() = service.handle(req.body());
    } else if (req.target() == "/health" && req.method() == http::verb::get) {
      res.result(http::status::ok);
      res.set(http::field::content_type, "text/plain");
      res.body() = "ok\n";
    } else {
      res.result(http::status::not_found);
      res.set(http::field::content_type, "text/plain");
      res.body() = "use POST /api or a websocket on /\n";
    }
    res.prepare_payload();
    return res;
  }

  void serve_websocket(tcp::socket& socket, http::request<http::string_body> req) {
    websocket::stream<tcp::socket&> ws(socket);
    beast::error_code ec;
    ws.accept(req, ec);
    if (ec) return;
    beast::flat_buffer buffer;
    for (;;) {
      buffer.clear();
      ws.read(buffer, ec);
      if (ec) return;
      const std::string reply = service.handle(beast::buffers_to_string(buffer.data()));
      ws.text(true);
      ws.write(asio::buffer(reply), ec);
      if (ec) return;
    }
  }

  void stop() {
    {
      std::lock_guard lock(mu);
      if (stopping) return;
      stopping = true;
    }
    beast::error_code ec;
    // Wake the blocking accept and every blocking connection read.
    ::shutdown(acceptor.native_handle(), SHUT_RDWR);
    if (accept_thread.joinable()) accept_thread.join();
    acceptor.close(ec);
    std::list<Conn> remaining;
    {
      std::lock_guard lock(mu);
      for (auto& c : conns) ::shutdown(c.socket.native_handle(), SHUT_RDWR);
      remaining.splice(remaining.end(), conns);
    }
    for (auto& c : remaining) {
      if (c.thread.joinable()) c.thread.join();
    }
    std::lock_guard lock(mu);
    stopped = true;
    stopped_cv.notify_all();
  }
};

Server::Server(GuidanceService& service, const std::string& address, unsigned short port)
    : impl_(std::make_unique<Impl>(service, address, port)) {
  port_ = impl_->acceptor.local_endpoint().port();
}

Server::~Server() { stop(); }

void Server::start() {
  if (impl_->accept_thread.joinable()) return;
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
}

void Server::wait() {
  std::unique_lock lock(impl_->mu);
  impl_->stopped_cv.wait(lock, [this] { return impl_->stopped; });
}

void Server::stop() { impl_->stop(); }

}  // namespace echoguide::service

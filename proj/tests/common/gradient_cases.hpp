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

// Finite-difference gradient cases shared by the unit and acceptance suites.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "echoguide/model.hpp"
#include "echoguide/nn.hpp"

namespace gradient_cases {

using echoguide::nn::Shape;
using echoguide::nn::Tensor;
namespace nn = echoguide::nn;

inline std::vector<double> randn(std::mt19937_64& g, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

inline Tensor rand_leaf(std::mt19937_64& g, Shape s, double scale = 1.0) {
  return nn::leaf(s, randn(g, nn::numel(s), scale));
}

// Reduces any tensor to a scalar through a fixed random linear functional.
inline Tensor probe(const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 g(seed ^ 0xabcdef);
  const int n = static_cast<int>(x.size());
  const Tensor flat = nn::reshape(x, {1, n});
  return nn::mean(nn::dense(flat, nn::constant({n, 1}, randn(g, static_cast<std::size_t>(n))), nn::zeros({1})));
}

struct Case {
  std::string name;
  std::function<double(std::uint64_t seed)> run;  // returns the worst relative error
};

inline double check(const std::function<Tensor(std::span<const Tensor>)>& fn, std::vector<Tensor> inputs,
                    double eps = 1e-5) {
  return nn::grad_check(fn, inputs, eps);
}

inline echoguide::model::ModelConfig tiny_model_config() {
  echoguide::model::ModelConfig c;
  c.h = 16;
  c.w = 16;
  c.conv_channels = {2, 3, 4, 4};
  c.feature_dim = 8;
  c.guide_hidden = {12, 6};
  c.query_dim = 4;
  c.with_dreamer = true;
  c.attn_blocks = 2;
  c.attn_heads = 2;
  c.ff_dim = 10;
  return c;
}

// Relative action inside the sampling region (|ry| well below 90 degrees).
inline echoguide::se3::Pose6 random_action(std::mt19937_64& g) {
  std::uniform_real_distribution<double> t(-60, 60), a(-45, 45);
  return {t(g), t(g), t(g), a(g), a(g), a(g)};
}

inline std::vector<Case> kernel_cases() {
  std::vector<Case> cases;
  cases.push_back({"dense", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {3, 4}), w = rand_leaf(g, {4, 5}), b = rand_leaf(g, {5});
                     return check([s](auto in) { return probe(nn::dense(in[0], in[1], in[2]), s); }, {x, w, b});
                   }});
  cases.push_back({"matmul", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto a = rand_leaf(g, {3, 4}), b = rand_leaf(g, {4, 2});
                     return check([s](auto in) { return probe(nn::matmul(in[0], in[1]), s); }, {a, b});
                   }});
  for (int stride : {1, 2}) {
    cases.push_back({"conv2d_s" + std::to_string(stride), [stride](std::uint64_t s) {
                       std::mt19937_64 g(s);
                       auto x = rand_leaf(g, {2, 6, 5, 2}), k = rand_leaf(g, {3, 3, 2, 3}), b = rand_leaf(g, {3});
                       return check([s, stride](auto in) { return probe(nn::conv2d(in[0], in[1], in[2], stride, 1), s); },
                                    {x, k, b});
                     }});
  }
  cases.push_back({"relu", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {4, 5});
                     // Keep inputs away from the kink.
                     for (auto& v : x.mutable_values()) v += v >= 0 ? 0.1 : -0.1;
                     return check([s](auto in) { return probe(nn::relu(in[0]), s); }, {x});
                   }});
  cases.push_back({"layer_norm", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {3, 6}), ga = rand_leaf(g, {6}), be = rand_leaf(g, {6});
                     return check([s](auto in) { return probe(nn::layer_norm(in[0], in[1], in[2]), s); }, {x, ga, be});
                   }});
  cases.push_back({"softmax_attention", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto q = rand_leaf(g, {2, 3, 4}), k = rand_leaf(g, {2, 3, 4}), v = rand_leaf(g, {2, 3, 4});
                     return check([s](auto in) { return probe(nn::softmax_attention(in[0], in[1], in[2], 2), s); },
                                  {q, k, v});
                   }});
  cases.push_back({"concat", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto a = rand_leaf(g, {3, 2}), b = rand_leaf(g, {3, 4});
                     return check([s](auto in) { return probe(nn::concat(in[0], in[1]), s); }, {a, b});
                   }});
  cases.push_back({"stack_select", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto a = rand_leaf(g, {2, 3}), b = rand_leaf(g, {2, 3});
                     return check(
                         [s](auto in) {
                           const std::vector<Tensor> toks = {in[0], in[1]};
                           const Tensor st = nn::stack_tokens(toks);
                           return nn::add(probe(nn::select_token(st, 1), s), probe(st, s + 1));
                         },
                         {a, b});
                   }});
  cases.push_back({"reshape_flatten", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {2, 3, 2});
                     return check([s](auto in) { return probe(nn::flatten(nn::reshape(in[0], {2, 2, 3})), s); }, {x});
                   }});
  cases.push_back({"add", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto a = rand_leaf(g, {3, 2}), b = rand_leaf(g, {3, 2});
                     return check([s](auto in) { return probe(nn::add(in[0], in[1]), s); }, {a, b});
                   }});
  cases.push_back({"add_broadcast", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto a = rand_leaf(g, {2, 3, 4}), b = rand_leaf(g, {3, 4});
                     return check([s](auto in) { return probe(nn::add_broadcast(in[0], in[1]), s); }, {a, b});
                   }});
  cases.push_back({"scale_last", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {3, 4});
                     const std::vector<double> sc = randn(g, 4);
                     return check([s, sc](auto in) { return probe(nn::scale_last(in[0], sc), s); }, {x});
                   }});
  cases.push_back({"mean", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {3, 4});
                     return check([s](auto in) { return nn::mean(nn::relu(nn::add(in[0], in[0]))); }, {x});
                   }});
  cases.push_back({"smooth_l1", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {4, 6}, 2.0);
                     std::vector<double> target = randn(g, 24, 2.0);
                     // Keep |pred - target| away from the quadratic/linear switch at beta.
                     for (std::size_t i = 0; i < 24; ++i) {
                       const double d = x.values()[i] - target[i];
                       if (std::abs(std::abs(d) - 1.0) < 0.05) target[i] += 0.2;
                     }
                     std::uniform_real_distribution<double> u(0.5, 2.0);
                     std::vector<double> cw(6), rw(4);
                     for (auto& v : cw) v = u(g);
                     for (auto& v : rw) v = u(g);
                     return check([=](auto in) { return nn::smooth_l1(in[0], target, 1.0, cw, rw); }, {x});
                   }});
  cases.push_back({"rowwise_map", [](std::uint64_t s) {
                     std::mt19937_64 g(s);
                     auto x = rand_leaf(g, {3, 2});
                     // (a, b) -> (sin a * b, a^2, exp(b / 2))
                     const nn::RowJacobianFn f = [](std::size_t, std::span<const double> in, std::span<double> out,
                                                    std::span<double> jac) {
                       out[0] = std::sin(in[0]) * in[1];
                       out[1] = in[0] * in[0];
                       out[2] = std::exp(in[1] / 2);
                       jac[0] = std::cos(in[0]) * in[1];
                       jac[1] = std::sin(in[0]);
                       jac[2] = 2 * in[0];
                       jac[3] = 0;
                       jac[4] = 0;
                       jac[5] = std::exp(in[1] / 2) / 2;
                     };
                     return check([s, f](auto in) { return probe(nn::rowwise_map(in[0], 3, f), s); }, {x});
                   }});
  return cases;
}

// The differentiable action combination a_2 -> a_12 (+) a_2.
inline double combine_actions_case(std::uint64_t s) {
  std::mt19937_64 g(s);
  std::vector<echoguide::se3::Pose6> a12;
  std::vector<double> a2;
  for (int i = 0; i < 4; ++i) {
    a12.push_back(random_action(g));
    const auto a = random_action(g).to_array();
    a2.insert(a2.end(), a.begin(), a.end());
  }
  const Tensor x = nn::leaf({4, 6}, a2);
  return check([s, a12](auto in) { return probe(echoguide::model::combine_actions(a12, in[0]), s); }, {x}, 1e-5);
}

// Gradients of the dreamer through its input feature, action and a sample of its parameters.
inline double dream_case(std::uint64_t s) {
  std::mt19937_64 g(s);
  echoguide::model::GuidanceModel m(tiny_model_config(), s);
  const Tensor f1 = rand_leaf(g, {3, 8});
  std::vector<double> av;
  for (int i = 0; i < 3; ++i) {
    const auto a = random_action(g).to_array();
    av.insert(av.end(), a.begin(), a.end());
  }
  const Tensor act = nn::leaf({3, 6}, av);
  std::vector<Tensor> inputs = {f1, act};
  for (const char* p : {"dreamer.action.w", "dreamer.pos", "dreamer.blk0.q.w", "dreamer.blk1.ln1.g",
                        "dreamer.blk1.ff1.w", "dreamer.head.w"}) {
    inputs.push_back(m.params().get(p));
  }
  return check([&m, s](auto in) { return probe(m.dream(in[0], in[1]), s); }, inputs, 1e-4);
}

// Gradients of the guidance layer through features, plane queries and weights.
inline double guide_case(std::uint64_t s) {
  std::mt19937_64 g(s);
  echoguide::model::GuidanceModel m(tiny_model_config(), s);
  const Tensor f = rand_leaf(g, {3, 8});
  const std::vector<int> planes = {0, 2, 1};
  std::vector<Tensor> inputs = {f, m.params().get("guide.queries"), m.params().get("guide.fc0.w"),
                                m.params().get("guide.fc2.w")};
  return check([&m, s, planes](auto in) { return probe(m.guide(in[0], planes), s); }, inputs, 1e-4);
}

}  // namespace gradient_cases

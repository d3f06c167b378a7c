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

#include "echoguide/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "echoguide/binio.hpp"

namespace echoguide::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat cmat(const Buffer& v, Eigen::Index rows, Eigen::Index cols) { return {v.data(), rows, cols}; }
MapMat mmat(Buffer& v, Eigen::Index rows, Eigen::Index cols) { return {v.data(), rows, cols}; }
MapMat mmat(double* p, Eigen::Index rows, Eigen::Index cols) { return {p, rows, cols}; }

std::shared_ptr<Node> make_node(Shape shape, Buffer value, std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

int last_dim(const Tensor& t) { return t.shape().back(); }

std::size_t leading(const Tensor& t) { return t.size() / static_cast<std::size_t>(last_dim(t)); }

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

double* Node::grad_data() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

int Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dim index out of range");
  return node_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor constant(Shape shape, std::vector<double> values) {
  require(numel(shape) == values.size(), "constant: value count does not match " + shape_str(shape));
  return Tensor(make_node(std::move(shape), Buffer(values.begin(), values.end()), {}));
}

Tensor zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return Tensor(make_node(std::move(shape), Buffer(n, 0.0), {}));
}

Tensor leaf(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node()->requires_grad = true;
  return t;
}

void backward(const Tensor& scalar) {
  require(scalar.size() == 1, "backward: expects a scalar, got " + shape_str(scalar.shape()));
  if (!scalar.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(scalar.node().get(), 0);
  seen.insert(scalar.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  scalar.node()->grad_data()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

void zero_grad(std::span<Tensor> leaves) {
  for (Tensor& t : leaves) {
    auto& g = t.node()->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
}

// ---- kernels -------------------------------------------------------------

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2 && b.rank() == 1, "dense: weight must be [in,out] and bias [out]");
  const int in = w.dim(0), out = w.dim(1);
  require(last_dim(x) == in, "dense: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  require(b.dim(0) == out, "dense: bias size mismatch");
  const auto n = static_cast<Eigen::Index>(leading(x));
  Buffer y(static_cast<std::size_t>(n) * out);
  auto ym = mmat(y, n, out);
  ym.noalias() = cmat(x.node()->value, n, in) * cmat(w.node()->value, in, out);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.node()->value.data(), out);
  Shape shape = x.shape();
  shape.back() = out;
  auto node = make_node(std::move(shape), std::move(y), {x.node(), w.node(), b.node()});
  node->backward_fn = [n, in, out](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    auto gy = cmat(self.grad, n, out);
    if (xn.requires_grad) mmat(xn.grad_data(), n, in).noalias() += gy * cmat(wn.value, in, out).transpose();
    if (wn.requires_grad) mmat(wn.grad_data(), in, out).noalias() += cmat(xn.value, n, in).transpose() * gy;
    if (bn.requires_grad) Eigen::Map<Eigen::RowVectorXd>(bn.grad_data(), out) += gy.colwise().sum();
  };
  return Tensor(node);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Buffer y(static_cast<std::size_t>(n) * m);
  mmat(y, n, m).noalias() = cmat(a.node()->value, n, k) * cmat(b.node()->value, k, m);
  auto node = make_node({n, m}, std::move(y), {a.node(), b.node()});
  node->backward_fn = [n, k, m](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    auto gy = cmat(self.grad, n, m);
    if (an.requires_grad) mmat(an.grad_data(), n, k).noalias() += gy * cmat(bn.value, k, m).transpose();
    if (bn.requires_grad) mmat(bn.grad_data(), k, m).noalias() += cmat(an.value, n, k).transpose() * gy;
  };
  return Tensor(node);
}

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad) {
  require(x.rank() == 4 && k.rank() == 4 && b.rank() == 1, "conv2d: expects x[B,H,W,C], k[kh,kw,Cin,Cout], b[Cout]");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int KH = k.dim(0), KW = k.dim(1), CO = k.dim(3);
  require(k.dim(2) == C, "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(k.shape()));
  require(b.dim(0) == CO, "conv2d: bias size mismatch");
  const int HO = (H + 2 * pad - KH) / stride + 1;
  const int WO = (W + 2 * pad - KW) / stride + 1;
  require(HO > 0 && WO > 0, "conv2d: kernel larger than padded input");
  const Eigen::Index rows = static_cast<Eigen::Index>(B) * HO * WO;
  const Eigen::Index kdim = static_cast<Eigen::Index>(KH) * KW * C;

  auto cols = std::make_shared<Buffer>(static_cast<std::size_t>(rows * kdim), 0.0);
  const double* xv = x.node()->value.data();
  for (int bi = 0; bi < B; ++bi) {
    for (int oy = 0; oy < HO; ++oy) {
      for (int ox = 0; ox < WO; ++ox) {
        double* row = cols->data() + ((static_cast<std::size_t>(bi) * HO + oy) * WO + ox) * kdim;
        for (int ky = 0; ky < KH; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < KW; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const double* src = xv + ((static_cast<std::size_t>(bi) * H + iy) * W + ix) * C;
            std::copy(src, src + C, row + (static_cast<std::size_t>(ky) * KW + kx) * C);
          }
        }
      }
    }
  }
  Buffer y(static_cast<std::size_t>(rows) * CO);
  auto ym = mmat(y, rows, CO);
  ym.noalias() = cmat(*cols, rows, kdim) * cmat(k.node()->value, kdim, CO);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.node()->value.data(), CO);

  auto node = make_node({B, HO, WO, CO}, std::move(y), {x.node(), k.node(), b.node()});
  node->backward_fn = [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& kn = *self.parents[1];
    Node& bn = *self.parents[2];
    auto gy = cmat(self.grad, rows, CO);
    if (kn.requires_grad) mmat(kn.grad_data(), kdim, CO).noalias() += cmat(*cols, rows, kdim).transpose() * gy;
    if (bn.requires_grad) Eigen::Map<Eigen::RowVectorXd>(bn.grad_data(), CO) += gy.colwise().sum();
    if (!xn.requires_grad) return;
    Buffer gcols(static_cast<std::size_t>(rows * kdim));
    mmat(gcols, rows, kdim).noalias() = gy * cmat(kn.value, kdim, CO).transpose();
    double* gx = xn.grad_data();
    for (int bi = 0; bi < B; ++bi) {
      for (int oy = 0; oy < HO; ++oy) {
        for (int ox = 0; ox < WO; ++ox) {
          const double* row = gcols.data() + ((static_cast<std::size_t>(bi) * HO + oy) * WO + ox) * kdim;
          for (int ky = 0; ky < KH; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              double* dst = gx + ((static_cast<std::size_t>(bi) * H + iy) * W + ix) * C;
              const double* src = row + (static_cast<std::size_t>(ky) * KW + kx) * C;
              for (int c = 0; c < C; ++c) dst[c] += src[c];
            }
          }
        }
      }
    }
  };
  return Tensor(node);
}

Tensor relu(const Tensor& x) {
  Buffer y(x.size());
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto node = make_node(x.shape(), std::move(y), {x.node()});
  node->backward_fn = [](Node& self) {
    Node& xn = *self.parents[0];
    double* gx = xn.grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xn.value[i] > 0.0) gx[i] += self.grad[i];
  };
  return Tensor(node);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = last_dim(x);
  require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
          "layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  const std::size_t n = leading(x);
  auto xhat = std::make_shared<Buffer>(x.size());
  auto inv_std = std::make_shared<Buffer>(n);
  Buffer y(x.size());
  const auto& xv = x.node()->value;
  const auto& g = gamma.node()->value;
  const auto& bt = beta.node()->value;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      y[r * d + j] = g[j] * h + bt[j];
    }
  }
  auto node = make_node(x.shape(), std::move(y), {x.node(), gamma.node(), beta.node()});
  node->backward_fn = [n, d, xhat, inv_std](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    const auto& gy = self.grad;
    if (gn.requires_grad || bn.requires_grad) {
      double* gg = gn.requires_grad ? gn.grad_data() : nullptr;
      double* gb = bn.requires_grad ? bn.grad_data() : nullptr;
      for (std::size_t r = 0; r < n; ++r)
        for (int j = 0; j < d; ++j) {
          if (gg) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
          if (gb) gb[j] += gy[r * d + j];
        }
    }
    if (!xn.requires_grad) return;
    double* gx = xn.grad_data();
    const auto& gamma_v = gn.value;
    for (std::size_t r = 0; r < n; ++r) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (int j = 0; j < d; ++j) {
        const double dh = gy[r * d + j] * gamma_v[j];
        mean_dh += dh;
        mean_dh_h += dh * (*xhat)[r * d + j];
      }
      mean_dh /= d;
      mean_dh_h /= d;
      for (int j = 0; j < d; ++j) {
        const double dh = gy[r * d + j] * gamma_v[j];
        gx[r * d + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
      }
    }
  };
  return Tensor(node);
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  require(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
          "attention: q, k, v must share shape [B,T,D]");
  const int B = q.dim(0), T = q.dim(1), D = q.dim(2);
  require(heads >= 1 && D % heads == 0, "attention: D must be divisible by heads");
  const int dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[b][h][i][j]
  auto probs = std::make_shared<Buffer>(static_cast<std::size_t>(B) * heads * T * T);
  Buffer out(q.size(), 0.0);
  const auto& qv = q.node()->value;
  const auto& kv = k.node()->value;
  const auto& vv = v.node()->value;
  auto at = [T, D](int b, int t, int c) { return (static_cast<std::size_t>(b) * T + t) * D + c; };
  Buffer s(static_cast<std::size_t>(T));
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * dh;
      for (int i = 0; i < T; ++i) {
        double mx = -INFINITY;
        for (int j = 0; j < T; ++j) {
          double dot = 0.0;
          for (int c = 0; c < dh; ++c) dot += qv[at(b, i, c0 + c)] * kv[at(b, j, c0 + c)];
          s[static_cast<std::size_t>(j)] = dot * scale;
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < T; ++j) z += (s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - mx));
        double* p = probs->data() + ((static_cast<std::size_t>(b) * heads + h) * T + i) * T;
        for (int j = 0; j < T; ++j) p[j] = s[static_cast<std::size_t>(j)] / z;
        for (int j = 0; j < T; ++j)
          for (int c = 0; c < dh; ++c) out[at(b, i, c0 + c)] += p[j] * vv[at(b, j, c0 + c)];
      }
    }
  }
  auto node = make_node(q.shape(), std::move(out), {q.node(), k.node(), v.node()});
  node->backward_fn = [=](Node& self) {
    Node& qn = *self.parents[0];
    Node& kn = *self.parents[1];
    Node& vn = *self.parents[2];
    const auto& go = self.grad;
    double* gq = qn.requires_grad ? qn.grad_data() : nullptr;
    double* gk = kn.requires_grad ? kn.grad_data() : nullptr;
    double* gv = vn.requires_grad ? vn.grad_data() : nullptr;
    Buffer dp(static_cast<std::size_t>(T));
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * dh;
        for (int i = 0; i < T; ++i) {
          const double* p = probs->data() + ((static_cast<std::size_t>(b) * heads + h) * T + i) * T;
          double row_dot = 0.0;
          for (int j = 0; j < T; ++j) {
            double acc = 0.0;
            for (int c = 0; c < dh; ++c) acc += go[at(b, i, c0 + c)] * vn.value[at(b, j, c0 + c)];
            dp[static_cast<std::size_t>(j)] = acc;
            row_dot += acc * p[j];
            if (gv)
              for (int c = 0; c < dh; ++c) gv[at(b, j, c0 + c)] += p[j] * go[at(b, i, c0 + c)];
          }
          for (int j = 0; j < T; ++j) {
            const double ds = p[j] * (dp[static_cast<std::size_t>(j)] - row_dot) * scale;
            if (ds == 0.0) continue;
            for (int c = 0; c < dh; ++c) {
              if (gq) gq[at(b, i, c0 + c)] += ds * kn.value[at(b, j, c0 + c)];
              if (gk) gk[at(b, j, c0 + c)] += ds * qn.value[at(b, i, c0 + c)];
            }
          }
        }
      }
    }
  };
  return Tensor(node);
}

Tensor concat(const Tensor& a, const Tensor& b) {
  require(a.rank() == b.rank() && a.rank() >= 1, "concat: rank mismatch");
  for (int i = 0; i + 1 < a.rank(); ++i) require(a.dim(i) == b.dim(i), "concat: leading dims differ");
  const int da = last_dim(a), db = last_dim(b);
  const std::size_t n = leading(a);
  Buffer y(n * static_cast<std::size_t>(da + db));
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.node()->value.data() + r * da, da, y.data() + r * (da + db));
    std::copy_n(b.node()->value.data() + r * db, db, y.data() + r * (da + db) + da);
  }
  Shape shape = a.shape();
  shape.back() = da + db;
  auto node = make_node(std::move(shape), std::move(y), {a.node(), b.node()});
  node->backward_fn = [n, da, db](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    double* ga = an.requires_grad ? an.grad_data() : nullptr;
    double* gb = bn.requires_grad ? bn.grad_data() : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      const double* g = self.grad.data() + r * (da + db);
      if (ga)
        for (int j = 0; j < da; ++j) ga[r * da + j] += g[j];
      if (gb)
        for (int j = 0; j < db; ++j) gb[r * db + j] += g[da + j];
    }
  };
  return Tensor(node);
}

Tensor stack_tokens(std::span<const Tensor> tokens) {
  require(!tokens.empty(), "stack_tokens: no tokens");
  const Shape& s0 = tokens[0].shape();
  require(s0.size() == 2, "stack_tokens: tokens must be [B,D]");
  for (const Tensor& t : tokens) require(t.shape() == s0, "stack_tokens: token shapes differ");
  const int B = s0[0], D = s0[1], T = static_cast<int>(tokens.size());
  Buffer y(static_cast<std::size_t>(B) * T * D);
  std::vector<std::shared_ptr<Node>> parents;
  for (int t = 0; t < T; ++t) {
    const auto& tv = tokens[static_cast<std::size_t>(t)].node()->value;
    for (int b = 0; b < B; ++b)
      std::copy_n(tv.data() + static_cast<std::size_t>(b) * D, D, y.data() + (static_cast<std::size_t>(b) * T + t) * D);
    parents.push_back(tokens[static_cast<std::size_t>(t)].node());
  }
  auto node = make_node({B, T, D}, std::move(y), std::move(parents));
  node->backward_fn = [B, T, D](Node& self) {
    for (int t = 0; t < T; ++t) {
      Node& pn = *self.parents[static_cast<std::size_t>(t)];
      if (!pn.requires_grad) continue;
      double* g = pn.grad_data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < D; ++c)
          g[static_cast<std::size_t>(b) * D + c] += self.grad[(static_cast<std::size_t>(b) * T + t) * D + c];
    }
  };
  return Tensor(node);
}

Tensor select_token(const Tensor& x, int t) {
  require(x.rank() == 3, "select_token: expects [B,T,D]");
  const int B = x.dim(0), T = x.dim(1), D = x.dim(2);
  require(t >= 0 && t < T, "select_token: index out of range");
  Buffer y(static_cast<std::size_t>(B) * D);
  for (int b = 0; b < B; ++b)
    std::copy_n(x.node()->value.data() + (static_cast<std::size_t>(b) * T + t) * D, D,
                y.data() + static_cast<std::size_t>(b) * D);
  auto node = make_node({B, D}, std::move(y), {x.node()});
  node->backward_fn = [B, T, D, t](Node& self) {
    double* g = self.parents[0]->grad_data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < D; ++c)
        g[(static_cast<std::size_t>(b) * T + t) * D + c] += self.grad[static_cast<std::size_t>(b) * D + c];
  };
  return Tensor(node);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto node = make_node(std::move(shape), x.node()->value, {x.node()});
  node->backward_fn = [](Node& self) {
    double* g = self.parents[0]->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  };
  return Tensor(node);
}

Tensor flatten(const Tensor& x) {
  require(x.rank() >= 1, "flatten: scalar input");
  const int b = x.dim(0);
  return reshape(x, {b, static_cast<int>(x.size() / static_cast<std::size_t>(b))});
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Buffer y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.node()->value[i] + b.node()->value[i];
  auto node = make_node(a.shape(), std::move(y), {a.node(), b.node()});
  node->backward_fn = [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      double* g = p->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  };
  return Tensor(node);
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  require(b.rank() <= a.rank(), "add_broadcast: rhs rank too large");
  for (int i = 0; i < b.rank(); ++i)
    require(a.dim(a.rank() - b.rank() + i) == b.dim(i),
            "add_broadcast: " + shape_str(b.shape()) + " is not a suffix of " + shape_str(a.shape()));
  const std::size_t m = b.size();
  const std::size_t reps = a.size() / m;
  Buffer y(a.node()->value);
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < m; ++i) y[r * m + i] += b.node()->value[i];
  auto node = make_node(a.shape(), std::move(y), {a.node(), b.node()});
  node->backward_fn = [m, reps](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    if (an.requires_grad) {
      double* g = an.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      double* g = bn.grad_data();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) g[i] += self.grad[r * m + i];
    }
  };
  return Tensor(node);
}

Tensor scale_last(const Tensor& x, std::span<const double> scale) {
  const int d = last_dim(x);
  require(scale.size() == static_cast<std::size_t>(d), "scale_last: scale size mismatch");
  Buffer s(scale.begin(), scale.end());
  Buffer y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.node()->value[i] * s[i % static_cast<std::size_t>(d)];
  auto node = make_node(x.shape(), std::move(y), {x.node()});
  node->backward_fn = [s = std::move(s), d](Node& self) {
    double* g = self.parents[0]->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s[i % static_cast<std::size_t>(d)];
  };
  return Tensor(node);
}

Tensor mean(const Tensor& x) {
  require(x.size() > 0, "mean: empty tensor");
  const double n = static_cast<double>(x.size());
  const double s = std::accumulate(x.node()->value.begin(), x.node()->value.end(), 0.0);
  auto node = make_node({}, {s / n}, {x.node()});
  node->backward_fn = [n](Node& self) {
    Node& xn = *self.parents[0];
    double* g = xn.grad_data();
    for (std::size_t i = 0; i < xn.value.size(); ++i) g[i] += self.grad[0] / n;
  };
  return Tensor(node);
}

Tensor smooth_l1(const Tensor& pred, std::span<const double> target, double beta,
                 std::span<const double> component_weights, std::span<const double> row_weights) {
  require(pred.rank() == 2, "smooth_l1: pred must be [N,C]");
  require(beta > 0.0, "smooth_l1: beta must be > 0");
  require(target.size() == pred.size(), "smooth_l1: target size mismatch");
  const int n = pred.dim(0), c = pred.dim(1);
  require(component_weights.empty() || component_weights.size() == static_cast<std::size_t>(c),
          "smooth_l1: component weight count mismatch");
  require(row_weights.empty() || row_weights.size() == static_cast<std::size_t>(n),
          "smooth_l1: row weight count mismatch");
  const double denom = static_cast<double>(n) * c;
  Buffer dgrad(pred.size());
  double loss = 0.0;
  const auto& pv = pred.node()->value;
  for (int r = 0; r < n; ++r) {
    const double rw = row_weights.empty() ? 1.0 : row_weights[static_cast<std::size_t>(r)];
    for (int j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * c + j;
      const double w = rw * (component_weights.empty() ? 1.0 : component_weights[static_cast<std::size_t>(j)]);
      const double d = pv[i] - target[i];
      const double ad = std::abs(d);
      if (ad < beta) {
        loss += w * 0.5 * d * d / beta;
        dgrad[i] = w * d / beta / denom;
      } else {
        loss += w * (ad - 0.5 * beta);
        dgrad[i] = w * (d > 0.0 ? 1.0 : -1.0) / denom;
      }
    }
  }
  auto node = make_node({}, {loss / denom}, {pred.node()});
  node->backward_fn = [dgrad = std::move(dgrad)](Node& self) {
    double* g = self.parents[0]->grad_data();
    for (std::size_t i = 0; i < dgrad.size(); ++i) g[i] += self.grad[0] * dgrad[i];
  };
  return Tensor(node);
}

Tensor rowwise_map(const Tensor& x, int out_dim, const RowJacobianFn& fn) {
  require(x.rank() == 2, "rowwise_map: expects [N,in]");
  const int n = x.dim(0), in = x.dim(1);
  Buffer y(static_cast<std::size_t>(n) * out_dim);
  auto jac = std::make_shared<Buffer>(static_cast<std::size_t>(n) * out_dim * in);
  for (int r = 0; r < n; ++r) {
    fn(static_cast<std::size_t>(r),
       std::span<const double>(x.node()->value.data() + static_cast<std::size_t>(r) * in, static_cast<std::size_t>(in)),
       std::span<double>(y.data() + static_cast<std::size_t>(r) * out_dim, static_cast<std::size_t>(out_dim)),
       std::span<double>(jac->data() + static_cast<std::size_t>(r) * out_dim * in,
                         static_cast<std::size_t>(out_dim) * in));
  }
  auto node = make_node({n, out_dim}, std::move(y), {x.node()});
  node->backward_fn = [n, in, out_dim, jac](Node& self) {
    double* g = self.parents[0]->grad_data();
    for (int r = 0; r < n; ++r) {
      const double* j = jac->data() + static_cast<std::size_t>(r) * out_dim * in;
      const double* gy = self.grad.data() + static_cast<std::size_t>(r) * out_dim;
      double* gx = g + static_cast<std::size_t>(r) * in;
      for (int o = 0; o < out_dim; ++o)
        for (int i = 0; i < in; ++i) gx[i] += gy[o] * j[static_cast<std::size_t>(o) * in + i];
    }
  };
  return Tensor(node);
}

// ---- parameters and optimization ----------------------------------------

Tensor& ParamStore::add(const std::string& name, Shape shape, std::vector<double> init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  const std::size_t n = init.size();
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, leaf(std::move(shape), std::move(init)), std::vector<double>(n, 0.0),
                           std::vector<double>(n, 0.0)});
  return entries_.back().param;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].param;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].param;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.param.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) {
    auto& g = e.param.node()->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
}

void optimizer_step(ParamStore& store, double lr, double weight_decay) {
  const AdamWConfig cfg;
  ++store.step_;
  const double t = static_cast<double>(store.step_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& e : store.entries_) {
    Node& n = *e.param.node();
    const bool has_grad = !n.grad.empty();
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      const double g = has_grad ? n.grad[i] : 0.0;
      n.value[i] *= 1.0 - lr * weight_decay;
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      n.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
  const std::int64_t s = std::clamp<std::int64_t>(step, 0, total_steps);
  if (s == total_steps) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(s) / static_cast<double>(total_steps)));
}

// ---- gradient checking ---------------------------------------------------

double grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, double eps, double floor) {
  for (const Tensor& t : inputs) {
    auto& g = t.node()->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
  backward(fn(inputs));
  double worst = 0.0;
  for (const Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    Node& n = *t.node();
    Buffer analytic = n.grad;
    if (analytic.empty()) analytic.assign(n.value.size(), 0.0);
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      const double orig = n.value[i];
      auto at = [&](double offset) {
        n.value[i] = orig + offset;
        return fn(inputs).item();
      };
      // Fourth-order central difference.
      const double numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      n.value[i] = orig;
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

// ---- checkpoints ---------------------------------------------------------

namespace {
constexpr std::string_view kCkptMagic = "CKPT1";
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  binio::Writer w;
  w.str(kCkptMagic);
  w.u32(static_cast<std::uint32_t>(ckpt.header.size()));
  w.str(ckpt.header);
  w.u32(static_cast<std::uint32_t>(ckpt.records.size()));
  for (const Record& r : ckpt.records) {
    if (numel(r.shape) != r.values.size()) throw CheckpointError("record " + r.name + ": shape/value mismatch");
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (int d : r.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : r.values) w.f64(v);
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = binio::crc32_of(buf.data() + kCkptMagic.size(), buf.size() - kCkptMagic.size());
  w.u32(crc);
  binio::write_file_atomic(path.string(), buf);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<unsigned char> data;
  try {
    data = binio::read_file(path.string());
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  if (data.size() < kCkptMagic.size() + 4 ||
      std::string_view(reinterpret_cast<const char*>(data.data()), kCkptMagic.size()) != kCkptMagic)
    throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  const std::size_t body = data.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, data.data() + body, 4);
  if (binio::crc32_of(data.data() + kCkptMagic.size(), body - kCkptMagic.size()) != stored)
    throw CheckpointError("checksum mismatch: " + path.string());
  Checkpoint ckpt;
  try {
    binio::Reader r(data.data() + kCkptMagic.size(), body - kCkptMagic.size());
    ckpt.header = r.str(r.u32());
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      Record rec;
      rec.name = r.str(r.u32());
      const std::uint32_t rank = r.u32();
      for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(static_cast<int>(r.u32()));
      const std::size_t n = numel(rec.shape);
      if (n * 8 > r.remaining()) throw binio::FormatError("record " + rec.name + " truncated");
      rec.values.resize(n);
      for (double& v : rec.values) v = r.f64();
      ckpt.records.push_back(std::move(rec));
    }
    if (r.remaining() != 0) throw binio::FormatError("trailing bytes");
  } catch (const binio::FormatError& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  return ckpt;
}

std::vector<Record> store_to_records(const ParamStore& store) {
  std::vector<Record> out;
  for (const auto& e : store.entries()) {
    const auto& v = e.param.node()->value;
    out.push_back({"p/" + e.name, e.param.shape(), std::vector<double>(v.begin(), v.end())});
  }
  for (const auto& e : store.entries()) out.push_back({"m/" + e.name, e.param.shape(), e.m});
  for (const auto& e : store.entries()) out.push_back({"v/" + e.name, e.param.shape(), e.v});
  out.push_back({"adam_step", {}, {static_cast<double>(store.step())}});
  return out;
}

void records_to_store(const std::vector<Record>& records, ParamStore& store) {
  std::map<std::string, const Record*> by_name;
  for (const Record& r : records) by_name[r.name] = &r;
  auto fetch = [&](const std::string& key, const Shape& shape) -> const Record& {
    auto it = by_name.find(key);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks record " + key);
    if (it->second->shape != shape)
      throw CheckpointError("record " + key + " has shape " + shape_str(it->second->shape) + ", expected " +
                            shape_str(shape));
    return *it->second;
  };
  for (auto& e : store.entries()) {
    const auto& p = fetch("p/" + e.name, e.param.shape()).values;
    e.param.node()->value.assign(p.begin(), p.end());
    e.m = fetch("m/" + e.name, e.param.shape()).values;
    e.v = fetch("v/" + e.name, e.param.shape()).values;
  }
  store.set_step(static_cast<std::int64_t>(fetch("adam_step", {}).values.at(0)));
}

}  // namespace echoguide::nn

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
#include <functional>
#include <map>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace echoguide::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Cache-line aligned allocator. Eigen's vectorized loops peel differently
/// depending on buffer alignment, so fixed alignment keeps results bit-identical.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// One value in the computation graph. Values are row-major doubles.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until backward touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(Node&)> backward_fn;

  double* grad_data();  // allocates zeros on first use
};

/// Shared handle to a graph node. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Tensor constant(Shape shape, std::vector<double> values);
Tensor zeros(Shape shape);
/// Leaf that accumulates gradients.
Tensor leaf(Shape shape, std::vector<double> values);

/// Reverse-mode pass from a scalar. Each reachable node's backward runs once,
/// in reverse topological order.
void backward(const Tensor& scalar);

/// Clears accumulated gradients of the given leaves.
void zero_grad(std::span<Tensor> leaves);

// ---- kernels -------------------------------------------------------------

/// x[..., in] * w[in, out] + b[out]
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
/// a[n, k] * b[k, m]
Tensor matmul(const Tensor& a, const Tensor& b);
/// NHWC convolution: x[B, H, W, Cin], k[kh, kw, Cin, Cout], b[Cout], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad);
Tensor relu(const Tensor& x);
/// Normalizes over the last dimension, then scales by gamma and shifts by beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Multi-head scaled dot-product attention over q, k, v of shape [B, T, D].
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
/// Concatenates along the last dimension; leading dimensions must agree.
Tensor concat(const Tensor& a, const Tensor& b);
/// [B, D] tokens -> [B, T, D]
Tensor stack_tokens(std::span<const Tensor> tokens);
/// [B, T, D] -> [B, D]
Tensor select_token(const Tensor& x, int t);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);  // [B, ...] -> [B, prod(...)]
Tensor add(const Tensor& a, const Tensor& b);
/// a[..., S...] + b[S...] with b broadcast over the leading dimensions of a.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
/// x[..., D] * scale[D] with a constant scale.
Tensor scale_last(const Tensor& x, std::span<const double> scale);
Tensor mean(const Tensor& x);

/// Smooth-L1 between pred[N, C] and a constant target[N, C]:
/// 0.5 d^2 / beta if |d| < beta else |d| - 0.5 beta, weighted per component
/// and per row, averaged over all N * C entries.
Tensor smooth_l1(const Tensor& pred, std::span<const double> target, double beta,
                 std::span<const double> component_weights = {}, std::span<const double> row_weights = {});

/// Row function with its Jacobian: writes f(in) into `out` and df/din into
/// `jac` (row-major, out_dim x in_dim).
using RowJacobianFn =
    std::function<void(std::size_t row, std::span<const double> in, std::span<double> out, std::span<double> jac)>;

/// Applies a differentiable per-row map x[N, in] -> y[N, out].
Tensor rowwise_map(const Tensor& x, int out_dim, const RowJacobianFn& fn);

// ---- parameters and optimization ----------------------------------------

/// Named trainable tensors plus AdamW moments.
class ParamStore {
 public:
  /// Throws std::invalid_argument on a duplicate name.
  Tensor& add(const std::string& name, Shape shape, std::vector<double> init);

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;
  std::size_t num_values() const;

  void zero_grad();

  std::int64_t step() const { return step_; }

  struct Entry {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::span<Entry> entries() { return entries_; }
  std::span<const Entry> entries() const { return entries_; }
  void set_step(std::int64_t s) { step_ = s; }

 private:
  friend void optimizer_step(ParamStore&, double, double);
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::int64_t step_ = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update using the gradients accumulated on the stored leaves.
/// Weight decay is decoupled: p <- p - lr * wd * p before the moment step.
void optimizer_step(ParamStore& store, double lr, double weight_decay);

/// Cosine annealing to zero: base_lr * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr);

// ---- gradient checking ---------------------------------------------------

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

/// Compares reverse-mode gradients of `fn` w.r.t. every input that requires
/// grad against central differences. Returns the largest elementwise
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, double eps = 1e-4, double floor = 1e-6);

// ---- checkpoints ---------------------------------------------------------

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> values;
  friend bool operator==(const Record&, const Record&) = default;
};

struct Checkpoint {
  std::string header;  // free-form text, JSON by convention
  std::vector<Record> records;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Layout: "CKPT1", u32 header length, header bytes, u32 record count, then
/// per record: u32 name length, name, u32 rank, u32 dims, f64 values; then
/// a CRC-32 of everything after the magic. Integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and optimizer moments as records ("p/<name>", "m/<name>",
/// "v/<name>", "adam_step").
std::vector<Record> store_to_records(const ParamStore& store);
/// Overwrites values and moments of an existing store; shapes must match.
void records_to_store(const std::vector<Record>& records, ParamStore& store);

}  // namespace echoguide::nn

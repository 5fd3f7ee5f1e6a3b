// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace synhat::nn {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// One value in the computation graph. Gradients are allocated lazily on the
/// first accumulation; `backward_fn` pushes `grad` into the inputs' grads.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

/// Shared handle to a graph node. Copies alias the same storage, so a
/// parameter held by a layer, an optimizer and an EMA tracker is one tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double item() const;
  double at(std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  /// Empty span if no gradient has reached this tensor yet.
  std::span<double> grad() { return node_->grad; }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  /// Reverse-mode sweep from a scalar.
  void backward();

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime (sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. History is attached only when recording is on and
/// some input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn);

/// Multiply-accumulate counter fed by conv1d, linear and attention.
/// Thread-local; reset before a measured forward pass.
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

}  // namespace synhat::nn

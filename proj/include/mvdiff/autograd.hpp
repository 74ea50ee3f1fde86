#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mvdiff/tensor.hpp"

// Small reverse-mode automatic differentiation engine. A Var is a handle to a
// graph node; operations record closures that push output gradients back to
// their inputs. Leaves created with requires_grad=true accumulate gradients
// across backward() calls until zero_grad().
namespace mvdiff::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-initialized gradient buffer matching value's shape.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  // Leaf mutation hook for optimizers and tests.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient, or zeros when none has been accumulated.
  Tensor grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  friend Var make_op(Tensor, const std::vector<Var>&, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. The closure is dropped when no input needs a gradient
// or gradient recording is disabled.
Var make_op(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward);

// Seeds d(root)/d(root) = 1 (root must hold a single element).
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

}  // namespace mvdiff::ad

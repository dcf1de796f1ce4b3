#include "gazeprior/numerics/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "gazeprior/error.hpp"

namespace gazeprior::num {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (num::numel(shape) != values.size()) {
    fail(ErrorKind::kDimension, "shape " + shape_str(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = num::numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = num::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    fail(ErrorKind::kDimension, "axis " + std::to_string(axis) + " out of range for shape " +
                                    shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf()) fail(ErrorKind::kConfig, "cannot mutate a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorKind::kDimension, "item() on tensor of shape " + shape_str(node_->shape));
  }
  return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace {
template <typename Parents>
Tensor build(Shape shape, std::vector<double> value, std::string_view op, const Parents& parents,
             BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor& p : parents) any = any || (p.defined() && p.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const Tensor& p : parents) {
        if (p.defined()) node->parents.push_back(p.ptr());
      }
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> value, std::string_view op,
                   std::initializer_list<Tensor> parents, BackwardFn backward) {
  return build(std::move(shape), std::move(value), op, parents, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> value, std::string_view op,
                   const std::vector<Tensor>& parents, BackwardFn backward) {
  return build(std::move(shape), std::move(value), op, parents, std::move(backward));
}

GradTape::GradTape(const Tensor& root) : root_(root) {
  if (!root.defined()) fail(ErrorKind::kConfig, "backward on undefined tensor");
  // Iterative post-order DFS; yields parents before children.
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void GradTape::replay() {
  Node* root = root_.node();
  if (root->value.size() != 1) {
    fail(ErrorKind::kDimension, "backward needs a scalar root, got " + shape_str(root->shape));
  }
  if (!root->requires_grad) return;
  for (Node* n : order_) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

void backward(const Tensor& root) {
  GradTape tape(root);
  tape.replay();
}

}  // namespace gazeprior::num

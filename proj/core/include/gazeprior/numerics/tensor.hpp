#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gazeprior::num {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(const Node& out)>;

// One vertex of the dynamic graph. Values are written once when the op runs;
// only leaf parameters are mutated afterwards (by optimizers).
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward_fn;

  bool is_leaf() const noexcept { return parents.empty(); }
  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Mutating access is for leaves only (parameter init, optimizer updates).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return node_->value[flat_index]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  // Leaf copy of the current value with no graph history.
  Tensor detach() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording is on by default. Evaluation paths disable it.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the result of an op; attaches parents and the backward closure only
// when recording is on and some parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> value, std::string_view op,
                   std::initializer_list<Tensor> parents, BackwardFn backward);
Tensor make_result(Shape shape, std::vector<double> value, std::string_view op,
                   const std::vector<Tensor>& parents, BackwardFn backward);

// Ordered record of the ops reachable from a scalar root, in execution order.
class GradTape {
 public:
  explicit GradTape(const Tensor& root);

  std::size_t size() const noexcept { return order_.size(); }
  const std::vector<Node*>& order() const noexcept { return order_; }

  // Seeds d(root)/d(root) = 1 and runs every backward closure in reverse
  // order. Leaf gradients accumulate; interior gradients are reset first.
  void replay();

 private:
  Tensor root_;
  std::vector<Node*> order_;
};

void backward(const Tensor& root);

}  // namespace gazeprior::num

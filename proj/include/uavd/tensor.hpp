#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uavd {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class AlignmentError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor of rank <= 4. A Tensor is a shared handle to a graph
/// node; copying a Tensor aliases the node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor from(const Shape& shape, std::vector<T> data);
  /// Leaf that participates in differentiation.
  static Tensor leaf(const Shape& shape, std::vector<T> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index size() const { return static_cast<Index>(node_->value.size()); }
  std::span<const T> data() const { return node_->value; }
  /// Only leaves may be mutated (optimizer steps, checkpoint loads, tests).
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const;
  Tensor<double> to_double() const;
  Tensor<float> to_float() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Rejects NaN/Inf in every op result. On by default in debug builds.
void set_finite_checks(bool enabled);

/// Builds a result node. Inputs and the backward closure are attached only
/// when recording is on and some input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::string op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

/// Topologically ordered record of the primitive applications reachable from a
/// root. Rebuilt for every forward pass.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  const std::vector<Node<T>*>& nodes() const { return nodes_; }
  /// Seeds d(root)/d(root) = 1 and runs every backward closure once, in
  /// reverse topological order.
  void backward();

 private:
  Tensor<T> root_;
  std::vector<Node<T>*> nodes_;
};

/// Named trainable leaf. Insertion order is the checkpoint order.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, const Shape& shape, std::vector<T> init);
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Index size() const { return static_cast<Index>(entries_.size()); }
  Index parameter_count() const;

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Back-propagates a scalar loss and returns a gradient for every parameter in
/// the store; parameters the loss does not reach get zeros. Gradients also stay
/// accumulated on the parameter leaves for the optimizer.
template <typename T>
GradMap<T> backward(const Tensor<T>& loss, ParameterStore<T>& params);

/// Back-propagates without collecting a map.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace uavd

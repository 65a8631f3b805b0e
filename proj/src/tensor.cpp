#include "uavd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace uavd {

namespace {

thread_local bool g_grad_enabled = true;

#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return from(shape, std::vector<T>(static_cast<std::size_t>(numel(shape)), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  return from(shape, std::vector<T>(static_cast<std::size_t>(numel(shape)), value));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> data) {
  if (shape.size() > 4) throw ConfigError("tensor rank exceeds 4: " + to_string(shape));
  for (Index e : shape) {
    if (e < 0) throw ConfigError("negative extent in shape " + to_string(shape));
  }
  if (numel(shape) != static_cast<Index>(data.size())) {
    throw ConfigError("shape " + to_string(shape) + " does not match " +
                      std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(data);
  node->op = "const";
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::leaf(const Shape& shape, std::vector<T> data) {
  Tensor t = from(shape, std::move(data));
  t.node_->requires_grad = true;
  t.node_->op = "leaf";
  return t;
}

template <typename T>
Index Tensor<T>::dim(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ConfigError("axis out of range for shape " + to_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->inputs.empty()) throw UsageError("only leaf tensors are mutable");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<Index> idx) const {
  if (static_cast<Index>(idx.size()) != rank()) throw UsageError("index rank mismatch");
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : idx) {
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value);
}

template <typename T>
Tensor<double> Tensor<T>::to_double() const {
  return Tensor<double>::from(shape(), std::vector<double>(node_->value.begin(), node_->value.end()));
}

template <typename T>
Tensor<float> Tensor<T>::to_float() const {
  std::vector<float> out(node_->value.size());
  std::transform(node_->value.begin(), node_->value.end(), out.begin(),
                 [](T v) { return static_cast<float>(v); });
  return Tensor<float>::from(shape(), std::move(out));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::string op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  if (g_finite_checks) {
    for (T v : node->value) {
      if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + node->op);
    }
  }
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  tape.root_ = root;
  std::unordered_set<const Node<T>*> seen;
  // Iterative post-order DFS keeps deep graphs off the call stack.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  if (root.requires_grad()) seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void Tape<T>::backward() {
  if (nodes_.empty()) return;
  auto& seed = root_.node()->grad_buffer();
  std::fill(seed.begin(), seed.end(), T(0));
  seed[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node<T>* node : nodes_) {
    if (!node->inputs.empty()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, const Shape& shape,
                                  std::vector<T> init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, Tensor<T>::leaf(shape, std::move(init)));
  entries_.back().second.node()->op = name;
  return entries_.back().second;
}

template <typename T>
const Tensor<T>& ParameterStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
Tensor<T>& ParameterStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
Index ParameterStore<T>::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw UsageError("backward needs a scalar loss, got " + to_string(loss.shape()));
  Tape<T>::record(loss).backward();
}

template <typename T>
GradMap<T> backward(const Tensor<T>& loss, ParameterStore<T>& params) {
  backward(loss);
  GradMap<T> out;
  for (const auto& [name, t] : params.entries()) {
    auto g = t.grad();
    if (g.empty()) {
      out.emplace(name, Tensor<T>::zeros(t.shape()));
    } else {
      out.emplace(name, Tensor<T>::from(t.shape(), std::vector<T>(g.begin(), g.end())));
    }
  }
  return out;
}

#define UAVD_INSTANTIATE(T)                                                            \
  template class Tensor<T>;                                                            \
  template class Tape<T>;                                                              \
  template class ParameterStore<T>;                                                    \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::string,                \
                                    std::vector<Tensor<T>>, std::function<void(Node<T>&)>); \
  template void backward<T>(const Tensor<T>&);                                         \
  template GradMap<T> backward<T>(const Tensor<T>&, ParameterStore<T>&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)

}  // namespace uavd

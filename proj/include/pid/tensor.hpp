#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pid {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Thread-local switch that suspends graph recording. Ops executed while
// disabled produce leaves regardless of input flags.
class GradMode {
public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;
  bool leaf = true;
  // Set once this node's backward closure has fired; guards against running
  // a released graph a second time, which would silently drop gradients.
  bool consumed = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
  }
};

template <typename S>
class Tensor {
public:
  using value_type = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, true);
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    std::vector<S> d(static_cast<std::size_t>(shape_numel(shape)), value);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<S> data,
                          bool requires_grad = false, bool zero_fill = false) {
    const auto n = shape_numel(shape);
    if (n < 0) throw std::invalid_argument("tensor: negative extent in " + shape_str(shape));
    if (zero_fill) data.assign(static_cast<std::size_t>(n), S(0));
    if (static_cast<std::int64_t>(data.size()) != n) {
      throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.n_ = std::make_shared<TensorNode<S>>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }

  const Shape& shape() const { return node_ref().shape; }
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return node_ref().numel(); }

  const std::vector<S>& data() const { return node_ref().data; }
  // Direct mutation is reserved for optimizers and finite-difference probes;
  // it bypasses the graph, so never call it on a node that other live graphs
  // captured as an activation.
  std::vector<S>& mutable_data() { return node_ref().data; }

  bool requires_grad() const { return node_ref().requires_grad; }
  bool leaf() const { return node_ref().leaf; }

  void set_requires_grad(bool on) {
    auto& n = node_ref();
    if (!n.leaf) throw std::logic_error("set_requires_grad: only valid on leaf tensors");
    n.requires_grad = on;
  }

  bool has_grad() const { return !node_ref().grad.empty(); }

  const std::vector<S>& grad() const {
    const auto& n = node_ref();
    if (n.grad.empty()) throw std::logic_error("grad: no gradient accumulated");
    return n.grad;
  }

  void zero_grad() {
    auto& n = node_ref();
    n.grad.assign(n.data.size(), S(0));
  }

  S item() const {
    const auto& n = node_ref();
    if (n.numel() != 1) {
      throw std::logic_error("item: tensor has " + std::to_string(n.numel()) + " elements");
    }
    return n.data[0];
  }

  // New leaf sharing no graph history with this value.
  Tensor detach() const {
    const auto& n = node_ref();
    return from_data(n.shape, n.data, false);
  }

  std::shared_ptr<TensorNode<S>>& node() { return n_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return n_; }

  static Tensor adopt(std::shared_ptr<TensorNode<S>> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

private:
  TensorNode<S>& node_ref() {
    if (!n_) throw std::logic_error("tensor: use of undefined tensor");
    return *n_;
  }
  const TensorNode<S>& node_ref() const {
    if (!n_) throw std::logic_error("tensor: use of undefined tensor");
    return *n_;
  }

  std::shared_ptr<TensorNode<S>> n_;
};

// Builds the result node of an op. When grad mode is off or no input needs
// gradients the result is a plain leaf and the closure is dropped.
template <typename S>
Tensor<S> make_result(Shape shape, std::vector<S> data,
                      std::vector<Tensor<S>> inputs,
                      std::function<void(TensorNode<S>&)> backward_fn) {
  bool track = GradMode::enabled();
  if (track) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    track = any;
  }
  auto out = Tensor<S>::from_data(std::move(shape), std::move(data), false);
  if (track) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.leaf = false;
    n.parents.reserve(inputs.size());
    for (const auto& in : inputs) n.parents.push_back(in.node());
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss)=1, fires each
// recorded closure in reverse topological order, then releases interior grad
// buffers, closures, and parent links so activations free eagerly. Leaf
// gradients accumulate across calls until zero_grad.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined()) throw std::logic_error("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw std::logic_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root->requires_grad || root->leaf) {
    throw std::logic_error("backward: no graph recorded for this tensor");
  }

  // The order list holds shared ownership so interior nodes outlive the
  // release of their consumers' parent links during the sweep.
  std::vector<std::shared_ptr<TensorNode<S>>> order;
  std::unordered_set<TensorNode<S>*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode<S>>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (node->consumed) {
      throw std::logic_error("backward: graph already consumed by a previous backward call");
    }
    if (idx < node->parents.size()) {
      std::shared_ptr<TensorNode<S>> p = node->parents[idx++];
      if (p->requires_grad && !p->leaf && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>& n = **it;
    if (n.backward_fn) n.backward_fn(n);
    n.consumed = true;
    n.grad.clear();
    n.backward_fn = nullptr;
    n.parents.clear();
  }
}

}  // namespace pid

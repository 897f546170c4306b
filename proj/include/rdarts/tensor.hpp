#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rdarts/errors.hpp"

namespace rdarts {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <typename S>
struct Node;

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until a backward pass writes into it
  bool requires_grad = false;
  std::shared_ptr<Node<S>> grad_fn;  // null for leaves

  bool is_leaf() const { return grad_fn == nullptr; }

  std::vector<S>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    return grad;
  }
};

// One recorded primitive application. `seq` is drawn from a process-wide
// counter, so sorting by it yields a topological order of the graph.
template <typename S>
struct Node {
  std::uint64_t seq = 0;
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<S>>> inputs;
  TensorImpl<S>* output = nullptr;
  std::function<void(const std::vector<S>& grad_out)> backward;
  bool released = false;
};

namespace detail {

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<S>>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor", "zero-sized dimension in " + dims_to_string(shape));
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<S>>()) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor", "shape " + dims_to_string(shape) + " does not hold " +
                                     std::to_string(values.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }
  static Tensor from(std::vector<S> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<S> data() { return impl_->data; }
  std::span<const S> data() const { return impl_->data; }
  std::vector<S>& values() { return impl_->data; }
  const std::vector<S>& values() const { return impl_->data; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<S> grad() { return impl_->grad; }
  std::span<const S> grad() const { return impl_->grad; }
  std::vector<S>& grad_buffer() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!impl_->is_leaf()) throw GraphError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = v;
  }
  bool is_leaf() const { return impl_->is_leaf(); }

  S item() const {
    if (numel() != 1) throw ShapeError("item", "tensor of shape " + dims_to_string(shape()) + " is not a scalar");
    return impl_->data[0];
  }
  S& operator[](std::size_t i) { return impl_->data[i]; }
  S operator[](std::size_t i) const { return impl_->data[i]; }

  // Copy of the values with no graph attached.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl<S>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  bool same(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

// Builds the output of a primitive and, when grad mode is on and any input
// requires grad, attaches a node whose closure maps the output gradient onto
// the inputs.
template <typename S>
Tensor<S> make_result(const char* op, Shape shape, std::vector<S> values,
                      std::vector<Tensor<S>> inputs,
                      std::function<void(const std::vector<S>&)> backward) {
  Tensor<S> out(std::move(shape), std::move(values));
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node<S>>();
  node->seq = detail::next_seq();
  node->op = op;
  for (auto& in : inputs) node->inputs.push_back(in.impl());
  node->output = out.impl().get();
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

// Accumulation target for an input gradient, or nullptr when the input does
// not take part in differentiation.
template <typename S>
S* grad_target(const Tensor<S>& t) {
  if (!t.requires_grad()) return nullptr;
  return t.impl()->ensure_grad().data();
}

// The ordered record of primitive applications reachable from a tensor.
template <typename S>
class Tape {
 public:
  struct Entry {
    std::uint64_t seq;
    std::string op;
    std::vector<const TensorImpl<S>*> inputs;
    const TensorImpl<S>* output;
  };

  static Tape collect(const Tensor<S>& root) {
    Tape tape;
    tape.nodes_ = reachable(root);
    return tape;
  }

  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    for (auto* n : nodes_) {
      Entry e{n->seq, n->op, {}, n->output};
      for (auto& in : n->inputs) e.inputs.push_back(in.get());
      out.push_back(std::move(e));
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node<S>*>& nodes() const { return nodes_; }

  // Ascending sequence order: every producer precedes its consumers.
  static std::vector<Node<S>*> reachable(const Tensor<S>& root) {
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<Node<S>*> stack;
    if (root.impl()->grad_fn) stack.push_back(root.impl()->grad_fn.get());
    while (!stack.empty()) {
      Node<S>* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      order.push_back(n);
      for (auto& in : n->inputs)
        if (in->grad_fn) stack.push_back(in->grad_fn.get());
    }
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
    return order;
  }

 private:
  std::vector<Node<S>*> nodes_;
};

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; the graph
// is released afterwards, so a second sweep over it is an error.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw GraphError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? dims_to_string(loss.shape()) : std::string("<undefined>")));
  auto* root = loss.impl()->grad_fn.get();
  if (root == nullptr) {
    if (loss.requires_grad()) {
      loss.impl()->ensure_grad()[0] += S(1);
      return;
    }
    throw GraphError("backward: loss is not connected to any tensor requiring grad (empty tape)");
  }
  if (root->released) throw GraphError("backward: graph already consumed; rebuild it with a new forward pass");

  auto order = Tape<S>::reachable(loss);
  for (auto* n : order)
    if (n->released) throw GraphError("backward: graph already consumed; rebuild it with a new forward pass");

  loss.impl()->ensure_grad()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    auto& gout = n->output->ensure_grad();
    n->backward(gout);
    n->backward = nullptr;
    n->released = true;
    if (n->output != loss.impl().get()) {
      std::vector<S>().swap(n->output->grad);
    }
  }
}

template <typename S>
std::string shape_str(const Tensor<S>& t) {
  return dims_to_string(t.shape());
}

}  // namespace rdarts

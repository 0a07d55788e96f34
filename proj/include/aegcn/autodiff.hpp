#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <utility>

#include "aegcn/error.hpp"
#include "aegcn/tensor.hpp"

namespace aegcn {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in forward order; backward() walks
// them in reverse and each node pushes its output gradient to its parents.
// A tape is confined to one thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Records an op output. fn is dropped when no parent needs a gradient.
  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false,
                          requires_grad ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of a node, zero-initialised on first touch during backward.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      if (n.grad.shape() != n.value.shape()) {
        n.grad = Tensor<T>(n.value.shape());
      } else {
        n.grad.fill(T{0});
      }
      n.has_grad = true;
    }
    return n.grad;
  }

  // Gradient of v after backward(); exactly zero when v did not reach the loss.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.has_grad) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  // Recomputes every gradient from scratch, so calling it twice on the same
  // tape yields identical buffers.
  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw UsageError("backward: loss belongs to another tape");
    if (loss.size() != 1) {
      throw UsageError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) n.has_grad = false;
    if (!requires_grad(loss.id())) return;
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    bool has_grad;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
};

}  // namespace aegcn

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <vector>

#include "wiflex/tensor.hpp"

namespace wiflex {

template <class T>
class GradTape;

/// Handle to a value recorded on a GradTape.
template <class T>
struct Var {
  GradTape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Every op appends a node holding its output and, when
/// any input requires a gradient, a closure that pushes the output gradient
/// back to its inputs. Nodes are stored in a deque so references stay valid
/// while the tape grows. Single owner; not thread-safe.
template <class T>
class GradTape {
 public:
  using Backward = std::function<void(GradTape&, std::size_t self)>;

  explicit GradTape(bool record_grad = true, std::uint64_t seed = 0)
      : record_(record_grad), rng_(seed) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), record_, {}); }

  /// Records an op output. `backward` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    if (record_) {
      for (const Var<T>& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Output gradient of a node (zero tensor if nothing flowed into it).
  const Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  const Tensor<T>& grad(Var<T> v) { return grad(v.id); }

  /// Mutable gradient buffer for accumulation, or nullptr when `v` does not
  /// need one.
  T* grad_sink(Var<T> v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad.data();
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  void backward(Var<T> loss) {
    if (value(loss).size() != 1) throw ValidationError("backward expects a scalar loss");
    if (!nodes_[loss.id].requires_grad) return;
    grad_sink(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  bool recording() const noexcept { return record_; }
  std::mt19937_64& rng() noexcept { return rng_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(backward)});
    return Var<T>{this, nodes_.size() - 1};
  }

  bool record_;
  std::mt19937_64 rng_;
  std::deque<Node> nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

}  // namespace wiflex

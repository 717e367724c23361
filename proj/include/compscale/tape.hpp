#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "compscale/errors.hpp"
#include "compscale/tensor.hpp"

namespace compscale {

// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t index = 0;
};

// Ordered record of executed ops for reverse-mode accumulation. Not
// thread-safe; one tape per thread.
template <typename T>
class Tape {
 public:
  // Called with the op's own handle and output gradient; accumulates into
  // the op's inputs.
  using BackwardFn = std::function<void(Tape&, Var, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  Var leaf(Tensor<T> value) { return push(std::move(value), true, nullptr); }
  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  // Records an op result. requires_grad should be the OR of the inputs'.
  Var record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : nullptr);
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!n.has_grad) throw Error("gradient requested before backward() or for a constant");
    return n.grad;
  }

  // Accumulation target for backward functions.
  Tensor<T>& grad_buffer(Var v) { return node(v).grad; }

  // Reverse-mode sweep from a scalar output. Buffers are zeroed first, so
  // calling backward twice yields the same gradients.
  void backward(Var output) {
    if (value(output).size() != 1) {
      throw ShapeError("backward() needs a scalar output, got " +
                       shape_string(value(output).shape()));
    }
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        n.grad = Tensor<T>(n.value.shape());
        n.has_grad = true;
      }
    }
    if (!node(output).requires_grad) return;
    node(output).grad[0] = T{1};
    for (std::size_t i = output.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, Var{static_cast<std::uint32_t>(i)}, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backward), requires_grad, false});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (v.index >= nodes_.size()) throw Error("Var does not belong to this tape");
    return nodes_[v.index];
  }
  const Node& node(Var v) const {
    if (v.index >= nodes_.size()) throw Error("Var does not belong to this tape");
    return nodes_[v.index];
  }

  std::vector<Node> nodes_;
};

}  // namespace compscale

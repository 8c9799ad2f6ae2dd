#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "causalvln/diffcore/tensor.hpp"

namespace causalvln {

/// Trainable tensor together with its gradient and AdamW moments.
struct Parameter {
  Parameter() = default;
  explicit Parameter(Tensor init)
      : value(std::move(init)),
        grad(value.rows(), value.cols()),
        first_moment(value.rows(), value.cols()),
        second_moment(value.rows(), value.cols()) {}

  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
  std::uint64_t steps = 0;

  void zero_grad() { grad.fill(0.0); }
};

/// Parameters with stable names, used for checkpoints and optimizer steps.
using ParamList = std::vector<std::pair<std::string, Parameter*>>;

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr; }
};

/// Ordered record of differentiable operations. Values are kept for the
/// lifetime of the tape; backward() replays the record in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf for a trainable parameter. Repeated calls return the same node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    Var v = push(p.value, true, {});
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  /// Records an op output. `backward` receives the gradient of the output
  /// and must accumulate into its inputs through accumulate().
  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(backward), nullptr, requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient slot of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Mutable gradient slot, allocated on demand.
  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Reverse-mode sweep from a scalar loss. Parameter gradients are added to
  /// Parameter::grad so several tapes can contribute to one optimizer step.
  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("loss recorded on a different tape");
    const Tensor& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw DimensionError("backward requires a scalar loss, got " + lv.shape_string());
    for (auto& n : nodes_) n.grad = Tensor{};
    nodes_[loss.id].grad = Tensor(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (!n.grad.all_finite()) throw NumericError("non-finite gradient during backward");
      if (n.param) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      } else if (n.backward) {
        n.backward(*this, n.grad);
      }
    }
  }

  /// Gradient accumulated at node `id` by the last backward() (empty if none reached it).
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;  // stable references across push()
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace causalvln

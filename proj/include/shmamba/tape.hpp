#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shmamba/error.hpp"
#include "shmamba/tensor.hpp"

namespace shmamba {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(int axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Called once during the reverse sweep. `grads[i]` is null when input i
/// does not need a gradient; otherwise the callee must accumulate into it.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grads)>;

/// Gradients of a scalar loss with respect to the leaves that requested them.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor>> slots) : slots_(std::move(slots)) {}

  bool has(Var v) const { return v.id() < slots_.size() && slots_[v.id()].has_value(); }

  /// Gradient of a leaf; leaves the loss does not depend on report zeros.
  Tensor of(Var v) const {
    if (has(v)) return *slots_[v.id()];
    if (!v.requires_grad()) throw Error("gradient requested for a node that does not require grad");
    return Tensor::zeros_like(v.value());
  }

 private:
  std::vector<std::optional<Tensor>> slots_;
};

/// Linear record of forward operations, replayed in reverse for gradients.
/// Confined to one thread; not copyable or movable since Vars point into it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{"leaf", {}, std::move(value), requires_grad, true, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends a derived node. Its inputs must already be on this tape, which
  /// keeps the node list in topological order by construction.
  Var record(std::string op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    check_finite(op, value);
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape() != this) throw Error("operation '" + op + "' mixes values from different tapes");
      ids.push_back(v.id());
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(op), std::move(ids), std::move(value), needs, false,
                          needs ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  /// Reverse sweep from a scalar node; each reachable node is visited once and
  /// fan-in contributions are summed.
  Gradients backward(Var loss) {
    if (loss.tape() != this) throw Error("backward: loss belongs to another tape");
    const Node& root = nodes_[loss.id()];
    if (root.value.numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    if (!root.requires_grad) return Gradients(std::move(grads));
    grads[loss.id()] = Tensor(root.value.shape(), 1.0);

    std::vector<Tensor*> input_grads;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!grads[id] || node.is_leaf || !node.backward) continue;
      input_grads.assign(node.inputs.size(), nullptr);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const std::size_t in = node.inputs[i];
        if (!nodes_[in].requires_grad) continue;
        if (!grads[in]) grads[in] = Tensor::zeros_like(nodes_[in].value);
        input_grads[i] = &*grads[in];
      }
      node.backward(*grads[id], input_grads);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (input_grads[i] && !input_grads[i]->all_finite()) {
          throw NumericalError("non-finite gradient flowing out of '" + node.op + "'");
        }
      }
      grads[id].reset();
    }
    return Gradients(std::move(grads));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad;
    bool is_leaf;
    BackwardFn backward;
  };

  static void check_finite(const std::string& op, const Tensor& t) {
    if (!t.all_finite()) throw NumericalError("non-finite value produced by '" + op + "'");
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

inline bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

}  // namespace shmamba

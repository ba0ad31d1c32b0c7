#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "nsfpn/tensor.hpp"

namespace nsfpn {

/// A named learnable array together with its accumulated gradient.
struct Param {
  std::string name;
  Tensor4 value;
  Tensor4 grad;

  void zero_grad() { grad = Tensor4::zeros_like(value); }
};

/// Owns parameters in insertion order. References returned by add() stay valid.
class ParamStore {
 public:
  Param& add(std::string name, Tensor4 value);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;

  void zero_grad();
  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Param> params_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor4& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording. Each primitive pushes its output value and a closure that maps the
/// output gradient onto the gradients of its inputs. Nodes are replayed in reverse insertion
/// order, which is a valid topological order since inputs always precede outputs.
class Tape {
 public:
  using Backward = std::function<void(const Tensor4& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor4 value, bool requires_grad = false);
  Var constant(Tensor4 value) { return input(std::move(value), false); }
  /// Leaf bound to `p`; backward() adds the leaf gradient into p.grad.
  Var param(Param& p);

  /// Records a primitive. When no input requires a gradient the closure is dropped.
  Var record(std::string_view op, Tensor4 value, std::initializer_list<Var> inputs,
             Backward backward);

  const Tensor4& value(Var v) const { return nodes_[v.id_].value; }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  const std::string& op_name(Var v) const { return nodes_[v.id_].op; }

  /// Gradient buffer to accumulate into, or nullptr when v needs no gradient.
  Tensor4* grad_target(Var v);
  /// Accumulated gradient of v (zeros if none reached it).
  Tensor4 grad(Var v) const;

  /// Seeds d(out)/d(out) = 1 for a 1x1x1x1 output and replays the tape.
  void backward(Var out);
  void backward(Var out, const Tensor4& seed);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    Tensor4 value;
    Tensor4 grad;
    bool requires_grad = false;
    Param* param = nullptr;
    Backward backward;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

inline const Tensor4& Var::value() const { return tape_->value(*this); }

namespace debug {
/// Test fixture hook: scales the backward pass of every primitive named `op` by 1.5.
/// An empty name disables the corruption.
void set_corrupted_backward(std::string op);
const std::string& corrupted_backward();
}  // namespace debug

}  // namespace nsfpn

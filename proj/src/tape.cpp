#include "nsfpn/tape.hpp"

#include <cmath>

namespace nsfpn {

namespace {
std::string& corrupted_op() {
  static std::string op;
  return op;
}

std::string first_non_finite(const Tensor4& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      return "element " + std::to_string(i) + " = " + std::to_string(t[i]) + " (shape " +
             t.shape().str() + ")";
    }
  }
  return {};
}
}  // namespace

namespace debug {
void set_corrupted_backward(std::string op) { corrupted_op() = std::move(op); }
const std::string& corrupted_backward() { return corrupted_op(); }
}  // namespace debug

Param& ParamStore::add(std::string name, Tensor4 value) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
  Param p{std::move(name), std::move(value), {}};
  p.zero_grad();
  params_.push_back(std::move(p));
  return params_.back();
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Param& ParamStore::get(const std::string& name) {
  Param* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter: " + name);
  return *p;
}

const Param& ParamStore::get(const std::string& name) const {
  const Param* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter: " + name);
  return *p;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::input(Tensor4 value, bool requires_grad) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::param(Param& p) {
  Node n;
  n.op = "param:" + p.name;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::record(std::string_view op, Tensor4 value, std::initializer_list<Var> inputs,
                 Backward backward) {
  std::string detail = first_non_finite(value);
  if (!detail.empty()) throw NonFiniteError(std::string(op), detail);
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  for (Var in : inputs) {
    if (in.tape_ != this) throw std::logic_error("Tape::record: input from a different tape");
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor4* Tape::grad_target(Var v) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor4::zeros_like(n.value);
  return &n.grad;
}

Tensor4 Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.empty()) return Tensor4::zeros_like(n.value);
  return n.grad;
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) {
    throw ShapeError("backward() without seed needs a scalar output, got " +
                     value(out).shape().str());
  }
  backward(out, Tensor4(value(out).shape(), 1.0));
}

void Tape::backward(Var out, const Tensor4& seed) {
  require_same_shape(value(out), seed, "Tape::backward seed");
  Tensor4* g = grad_target(out);
  if (g == nullptr) return;
  *g += seed;
  const std::string& corrupt = debug::corrupted_backward();
  for (int i = out.id_; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) {
      if (!corrupt.empty() && n.op == corrupt) {
        Tensor4 scaled = n.grad;
        scaled *= 1.5;
        n.backward(scaled);
      } else {
        n.backward(n.grad);
      }
    }
    if (n.param != nullptr) {
      std::string detail = first_non_finite(n.grad);
      if (!detail.empty()) throw NonFiniteError("gradient of " + n.param->name, detail);
      n.param->grad += n.grad;
    }
  }
}

}  // namespace nsfpn

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "lorahar/numerics/errors.hpp"
#include "lorahar/numerics/matrix.hpp"

namespace lorahar {

/// Storage class of a parameter; drives memory accounting and quantization.
enum class PrecisionClass { Full, HighPrecisionException, QuantizedNf4 };

inline const char* to_string(PrecisionClass p) noexcept {
  switch (p) {
    case PrecisionClass::Full: return "full";
    case PrecisionClass::HighPrecisionException: return "high_precision_exception";
    case PrecisionClass::QuantizedNf4: return "quantized_nf4";
  }
  return "full";
}

inline PrecisionClass precision_from_string(const std::string& s) {
  if (s == "full") return PrecisionClass::Full;
  if (s == "high_precision_exception") return PrecisionClass::HighPrecisionException;
  if (s == "quantized_nf4") return PrecisionClass::QuantizedNf4;
  throw DataError("unknown precision class '" + s + "'");
}

/// A named weight with its gradient accumulator.
///
/// The tape only writes `grad` when `trainable` is set, and only the optimizer
/// writes `value`.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
  PrecisionClass precision = PrecisionClass::Full;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool is_trainable = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()), trainable(is_trainable) {}

  std::size_t count() const noexcept { return value.size(); }
  void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode gradient tape.
///
/// Each forward pass records nodes in order; `backward` walks them in reverse.
/// A node needs a gradient iff one of its inputs does; constants and frozen
/// parameters never do, so no gradient work is spent on them.
class Tape {
 public:
  /// Receives the upstream gradient and the node's own value; accumulates into inputs via `grad_ref`.
  using BackwardFn = std::function<void(Tape&, const Matrix& grad, const Matrix& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf referencing `p` without copying it; `p` must outlive the tape's use.
  Var parameter(Parameter& p) {
    nodes_.push_back(Node{{}, &p.value, {}, {}, &p, p.trainable});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || needs_grad(v);
    return record_with(std::move(value), needs, std::move(fn));
  }

  Var record(Matrix value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || needs_grad(v);
    return record_with(std::move(value), needs, std::move(fn));
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id()).get(); }
  bool needs_grad(Var v) const { return nodes_.at(v.id()).needs_grad; }

  /// Gradient buffer of `v`, zero-allocated on first use.
  Matrix& grad_ref(Var v) {
    Node& n = nodes_.at(v.id());
    if (n.grad.empty() && !n.get().empty()) n.grad = Matrix(n.get().rows(), n.get().cols());
    return n.grad;
  }

  const Matrix& grad(Var v) const { return nodes_.at(v.id()).grad; }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }

  void backward(Var loss) {
    if (backward_done_) throw TapeError("backward called twice on the same tape without reset()");
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw TapeError("backward needs a 1x1 loss, got " + lv.shape_string());
    backward_done_ = true;
    if (!needs_grad(loss)) return;
    grad_ref(loss)(0, 0) = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad, n.get());
      if (n.param != nullptr && n.param->trainable) n.param->grad += n.grad;
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* external;
    Matrix grad;
    BackwardFn backward;
    Parameter* param;
    bool needs_grad;

    const Matrix& get() const { return external != nullptr ? *external : value; }
  };

  Var record_with(Matrix value, bool needs, BackwardFn fn) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on the tape (node " + std::to_string(nodes_.size()) + ")");
    nodes_.push_back(Node{std::move(value), nullptr, {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps references to earlier nodes valid while new ones are recorded
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

}  // namespace lorahar

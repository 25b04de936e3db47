#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "coughvit/error.hpp"

namespace coughvit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Most kernels view it as a matrix of
/// rows() x cols(), where cols() is the last extent.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw InputError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t r, std::size_t c, double fill = 0.0) { return Tensor(Shape{r, c}, fill); }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
  [[nodiscard]] std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  [[nodiscard]] std::size_t rows() const noexcept {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }
  std::vector<double>& storage() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

  void reshape(Shape s) {
    if (shape_size(s) != data_.size())
      throw InputError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
  }
  void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // subject to decoupled weight decay

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(wd) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
};

/// Records the forward computation so that backward() can visit it in reverse.
/// Nodes live in a deque, so pointers to node values stay valid while recording.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool recording() const noexcept { return recording_; }

  Var constant(Tensor t) { return push(std::move(t), false, {}); }

  /// Leaf whose gradient can be read back with grad() after backward().
  Var variable(Tensor t) { return push(std::move(t), recording_, {}); }

  /// Leaf bound to a Parameter; backward() adds into Parameter::grad. The
  /// leaf reads the parameter's storage in place, so the parameter must not
  /// change while this tape is in use.
  Var param(Parameter& p) {
    Var v = push(Tensor(), recording_, {});
    nodes_[v.id].ref = &p.value;
    if (recording_) nodes_[v.id].param = &p;
    return v;
  }

  [[nodiscard]] const Tensor& value(Var v) const { return nodes_.at(v.id).val(); }
  [[nodiscard]] const Tensor& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.val().empty()) throw InputError("no gradient recorded for this value");
    return n.grad;
  }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar. Node gradients are recomputed from zero on
  /// every call; Parameter gradients accumulate (+=).
  void backward(Var loss) {
    if (loss.tape != this || loss.id >= nodes_.size())
      throw InputError("backward: loss is not recorded on this tape");
    if (nodes_[loss.id].val().size() != 1)
      throw InputError("backward: loss must be a scalar, got shape " +
                       shape_str(nodes_[loss.id].val().shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    Node& root = nodes_[loss.id];
    if (!root.needs_grad) return;
    root.grad = Tensor(root.val().shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(n.val(), n.grad);
      if (n.param) {
        auto& g = n.param->grad.storage();
        const auto& src = n.grad.storage();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      }
    }
  }

  // ---- op-authoring interface -------------------------------------------

  [[nodiscard]] bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer of an input, allocated (zeroed) on first touch.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.val().shape());
    return n.grad;
  }

  using BackwardFn = std::function<void(const Tensor& out_value, const Tensor& out_grad)>;

  Var push(Tensor value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), needs_grad && recording_,
                          recording_ ? std::move(fn) : BackwardFn{}, nullptr});
    return Var{this, nodes_.size() - 1};
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
    const Tensor* ref = nullptr;  // parameter leaves read their parameter in place

    [[nodiscard]] const Tensor& val() const { return ref ? *ref : value; }
  };
  std::deque<Node> nodes_;
  bool recording_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

}  // namespace coughvit

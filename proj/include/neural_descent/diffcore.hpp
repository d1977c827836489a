#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape records primitives as they are evaluated. Each recorded node keeps
// its value and, when any input requires a gradient, a closure that maps the
// output adjoint onto the input adjoints. Tape::gradient replays the closures
// in reverse record order. Only first-order derivatives are supported.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace neural_descent {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Rejected operand shapes. The message names the primitive.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const std::string& detail);
};

/// Dense row-major n-dimensional array of doubles. A rank-0 array holds one
/// element.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v);
  static Array matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// The single element; throws unless size() == 1.
  double item() const;
  Array reshaped(Shape shape) const;

  friend bool operator==(const Array& a, const Array& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Everything a backward rule may read or write.
struct GradContext {
  std::span<const Array* const> inputs;
  const Array& output;
  const Array& grad;
  /// Accumulators for input adjoints; null where the input needs no gradient.
  std::span<Array* const> input_grads;
};

using BackwardFn = std::function<void(const GradContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Array value);
  Var constant(Array value);
  Var constant(double value) { return constant(Array::scalar(value)); }

  /// Appends a primitive. `backward` is dropped when no input requires grad.
  Var record(const char* op, Array value, std::vector<Var> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar output. Inputs that do not influence the
  /// output receive zero arrays. The tape itself is not modified.
  std::vector<Array> gradient(const Var& output, std::span<const Var> inputs) const;
  std::vector<Array> gradient(const Var& output, std::initializer_list<Var> inputs) const {
    return gradient(output, std::span<const Var>(inputs.begin(), inputs.size()));
  }

  std::size_t size() const { return nodes_.size(); }
  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    Array value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };
  std::vector<Node> nodes_;
};

// Elementwise arithmetic. Broadcasting: equal shapes, a single-element operand,
// or one operand whose shape is a trailing suffix of the other's.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
/// Elementwise min/max; ties select the first operand.
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator+(const Var& a, double b);
Var operator+(double a, const Var& b);
Var operator-(const Var& a, double b);
Var operator-(double a, const Var& b);
Var operator*(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator/(const Var& a, double b);
Var operator-(const Var& a);

Var exp(const Var& x);
Var log(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
/// Derivative at 0 is taken as 0.
Var sqrt(const Var& x);
/// Subgradient 0 at 0.
Var abs(const Var& x);
Var square(const Var& x);
Var power(const Var& x, double exponent);

Var sum(const Var& x);
Var sum(const Var& x, std::size_t axis);
Var mean(const Var& x);

/// (m,k)x(k,n) -> (m,n) or (m,k)x(k) -> (m).
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis = 0);
Var concat(std::initializer_list<Var> parts, std::size_t axis = 0);
/// Stacks equally shaped values along a new leading axis.
Var stack(std::span<const Var> parts);
Var stack(std::initializer_list<Var> parts);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Row-wise cross product of (...,3) arrays.
Var cross(const Var& a, const Var& b);
/// Unit vectors along the last axis; zero-length rows are rejected.
Var normalize(const Var& x);
/// Euclidean norm along the last axis, with subgradient 0 at the origin.
Var norm_rows(const Var& x);

/// Rodrigues map from an axis-angle 3-vector to a 3x3 rotation matrix.
Var axis_angle_to_matrix(const Var& axis_angle);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// `fn` must build its result on the tape of its argument.
double check_gradient(const std::function<Var(const Var&)>& fn, const Array& point, double step);

}  // namespace neural_descent

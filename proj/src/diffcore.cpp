#include "neural_descent/diffcore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

namespace neural_descent {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

Tape& common_tape(const char* op, const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return a.tape();
}

Array& ensure(Array* grad) { return *grad; }

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  const std::size_t na = shape_size(a);
  const std::size_t nb = shape_size(b);
  if (na == 1 && nb == 1) return a.size() >= b.size() ? a : b;
  if (na == 1 && nb >= 1) return b;
  if (nb == 1) return a;
  if (is_suffix(a, b)) return b;
  if (is_suffix(b, a)) return a;
  throw ShapeError(op, shape_string(a) + " vs " + shape_string(b));
}

// f(x, y) -> out; dfa(x, y, out) and dfb(x, y, out) are the local partials.
template <class F, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, F f, DA dfa, DB dfb) {
  Tape& tape = common_tape(op, a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(broadcast_shape(op, av.shape(), bv.shape()));
  const std::size_t na = av.size();
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i % na], bv[i % nb]);
  return tape.record(op, std::move(out), {a, b}, [dfa, dfb](const GradContext& c) {
    const Array& x = *c.inputs[0];
    const Array& y = *c.inputs[1];
    const std::size_t nx = x.size();
    const std::size_t ny = y.size();
    for (std::size_t i = 0; i < c.output.size(); ++i) {
      const double g = c.grad[i];
      if (g == 0.0) continue;
      const double xv = x[i % nx];
      const double yv = y[i % ny];
      if (c.input_grads[0]) (*c.input_grads[0])[i % nx] += g * dfa(xv, yv, c.output[i]);
      if (c.input_grads[1]) (*c.input_grads[1])[i % ny] += g * dfb(xv, yv, c.output[i]);
    }
  });
}

// f(x) -> y; df(x, y) is the local derivative.
template <class F, class D>
Var unary(const char* op, const Var& x, F f, D df) {
  const Array& xv = x.value();
  Array out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return x.tape().record(op, std::move(out), {x}, [df](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    const Array& xv = *c.inputs[0];
    for (std::size_t i = 0; i < c.output.size(); ++i) {
      if (c.grad[i] != 0.0) gx[i] += c.grad[i] * df(xv[i], c.output[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// outer = product of dims before axis, inner = product after.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Var make_var(Tape& tape, const char* op, Array value, std::vector<Var> inputs, BackwardFn fn) {
  return tape.record(op, std::move(value), std::move(inputs), std::move(fn));
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

ShapeError::ShapeError(std::string_view op, const std::string& detail)
    : std::invalid_argument(std::string(op) + ": shape mismatch " + detail) {}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("Array", shape_string(shape_) + " holds " + std::to_string(data_.size()) + " values");
  }
}

Array Array::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Array(Shape{n}, std::move(v));
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Array(Shape{rows, cols}, std::vector<double>(values));
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item", shape_string(shape_) + " is not a single element");
  return data_[0];
}

Array Array::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) throw ShapeError("reshape", shape_string(shape_) + " -> " + shape_string(shape));
  return Array(std::move(shape), data_);
}

const Array& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::variable(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, "variable"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Array value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::invalid_argument(std::string(op) + ": input from another tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::vector<Array> Tape::gradient(const Var& output, std::span<const Var> inputs) const {
  if (&output.tape() != this) throw std::invalid_argument("gradient: output belongs to another tape");
  if (output.size() != 1) throw ShapeError("gradient", "output " + shape_string(output.shape()) + " is not scalar");

  std::vector<Array> grads(output.id() + 1);
  grads[output.id()] = Array(output.shape(), 1.0);
  std::vector<const Array*> in_values;
  std::vector<Array*> in_grads;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.requires_grad || !node.backward || grads[id].empty()) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (grads[in].empty()) grads[in] = Array(nodes_[in].value.shape(), 0.0);
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(GradContext{in_values, node.value, grads[id], in_grads});
  }

  std::vector<Array> result;
  result.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::invalid_argument("gradient: input belongs to another tape");
    if (v.id() < grads.size() && !grads[v.id()].empty()) {
      result.push_back(grads[v.id()]);
    } else {
      result.emplace_back(v.shape(), 0.0);
    }
  }
  return result;
}

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double, double y, double) { return 1.0 / y; },
                [](double, double y, double out) { return -out / y; });
}

Var minimum(const Var& a, const Var& b) {
  return binary("minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
                [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
                [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Var maximum(const Var& a, const Var& b) {
  return binary("maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
                [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
                [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }
Var operator+(const Var& a, double b) { return add(a, a.tape().constant(b)); }
Var operator+(double a, const Var& b) { return add(b.tape().constant(a), b); }
Var operator-(const Var& a, double b) { return sub(a, a.tape().constant(b)); }
Var operator-(double a, const Var& b) { return sub(b.tape().constant(a), b); }
Var operator*(const Var& a, double b) { return mul(a, a.tape().constant(b)); }
Var operator*(double a, const Var& b) { return mul(b.tape().constant(a), b); }
Var operator/(const Var& a, double b) { return mul(a, a.tape().constant(1.0 / b)); }

Var operator-(const Var& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var exp(const Var& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var tanh(const Var& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
  return unary("softplus", x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Var sqrt(const Var& x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var abs(const Var& x) {
  return unary("abs", x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var power(const Var& x, double exponent) {
  return unary("power", x, [exponent](double v) { return std::pow(v, exponent); },
               [exponent](double v, double) { return exponent * std::pow(v, exponent - 1.0); });
}

// --- reductions ------------------------------------------------------------

Var sum(const Var& x) {
  const Array& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  return make_var(x.tape(), "sum", Array::scalar(total), {x}, [](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    const double g = c.grad[0];
    for (double& v : gx.values()) v += g;
  });
}

Var sum(const Var& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("sum", "axis " + std::to_string(axis) + " of " + shape_string(shape));
  const AxisSplit s = split_axis(shape, axis);
  Shape out_shape = shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Array out(out_shape, 0.0);
  const Array& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.extent + k) * s.inner + i];
  return make_var(x.tape(), "sum_axis", std::move(out), {x}, [s](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.extent; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.extent + k) * s.inner + i] += c.grad[o * s.inner + i];
  });
}

Var mean(const Var& x) {
  if (x.size() == 0) throw ShapeError("mean", "empty input");
  return sum(x) * (1.0 / static_cast<double>(x.size()));
}

// --- linear algebra and shape ---------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = common_tape("matmul", a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || (bs.size() != 1 && bs.size() != 2) || as[1] != bs[0]) {
    throw ShapeError("matmul", shape_string(as) + " x " + shape_string(bs));
  }
  const std::size_t m = as[0];
  const std::size_t k = as[1];
  const std::size_t n = bs.size() == 2 ? bs[1] : 1;
  Array out(bs.size() == 2 ? Shape{m, n} : Shape{m});
  MatrixMap(out.data(), m, n).noalias() = ConstMatrixMap(a.value().data(), m, k) * ConstMatrixMap(b.value().data(), k, n);
  return tape.record("matmul", std::move(out), {a, b}, [m, k, n](const GradContext& c) {
    ConstMatrixMap g(c.grad.data(), m, n);
    if (c.input_grads[0]) {
      MatrixMap(c.input_grads[0]->data(), m, k).noalias() += g * ConstMatrixMap(c.inputs[1]->data(), k, n).transpose();
    }
    if (c.input_grads[1]) {
      MatrixMap(c.input_grads[1]->data(), k, n).noalias() += ConstMatrixMap(c.inputs[0]->data(), m, k).transpose() * g;
    }
  });
}

Var transpose(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("transpose", shape_string(s) + " is not a matrix");
  const std::size_t r = s[0];
  const std::size_t cdim = s[1];
  Array out(Shape{cdim, r});
  MatrixMap(out.data(), cdim, r) = ConstMatrixMap(x.value().data(), r, cdim).transpose();
  return make_var(x.tape(), "transpose", std::move(out), {x}, [r, cdim](const GradContext& c) {
    MatrixMap(c.input_grads[0]->data(), r, cdim) += ConstMatrixMap(c.grad.data(), cdim, r).transpose();
  });
}

Var reshape(const Var& x, Shape shape) {
  Array out = x.value().reshaped(std::move(shape));
  return make_var(x.tape(), "reshape", std::move(out), {x}, [](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c.grad[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Tape& tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis " + std::to_string(axis) + " of " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (&p.tape() != &tape) throw std::invalid_argument("concat: inputs live on different tapes");
    if (s.size() != first.size()) throw ShapeError("concat", shape_string(first) + " vs " + shape_string(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) throw ShapeError("concat", shape_string(first) + " vs " + shape_string(s));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit total = split_axis(out_shape, axis);
  Array out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Array& v = parts[p].value();
    const std::size_t e = extents[p];
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(v.data() + o * e * total.inner, e * total.inner,
                  out.data() + (o * total.extent + offset) * total.inner);
    }
    offset += e;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record("concat", std::move(out), std::move(inputs), [total, extents](const GradContext& c) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      const std::size_t e = extents[p];
      if (Array* gp = c.input_grads[p]) {
        for (std::size_t o = 0; o < total.outer; ++o) {
          const double* src = c.grad.data() + (o * total.extent + offset) * total.inner;
          double* dst = gp->data() + o * e * total.inner;
          for (std::size_t i = 0; i < e * total.inner; ++i) dst[i] += src[i];
        }
      }
      offset += e;
    }
  });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack", "no inputs");
  std::vector<Var> rows;
  rows.reserve(parts.size());
  for (const Var& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    rows.push_back(reshape(p, std::move(s)));
  }
  return concat(rows, 0);
}

Var stack(std::initializer_list<Var> parts) { return stack(std::span<const Var>(parts.begin(), parts.size())); }

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& shape = x.shape();
  if (axis >= shape.size() || begin > end || end > shape[axis]) {
    throw ShapeError("slice", shape_string(shape) + " axis " + std::to_string(axis) + " [" + std::to_string(begin) +
                                  ", " + std::to_string(end) + ")");
  }
  const AxisSplit s = split_axis(shape, axis);
  const std::size_t e = end - begin;
  Shape out_shape = shape;
  out_shape[axis] = e;
  Array out(out_shape);
  const Array& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data() + (o * s.extent + begin) * s.inner, e * s.inner, out.data() + o * e * s.inner);
  }
  return make_var(x.tape(), "slice", std::move(out), {x}, [s, begin, e](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = c.grad.data() + o * e * s.inner;
      double* dst = gx.data() + (o * s.extent + begin) * s.inner;
      for (std::size_t i = 0; i < e * s.inner; ++i) dst[i] += src[i];
    }
  });
}

// --- geometry --------------------------------------------------------------

namespace {

void cross3(const double* a, const double* b, double* out) {
  out[0] = a[1] * b[2] - a[2] * b[1];
  out[1] = a[2] * b[0] - a[0] * b[2];
  out[2] = a[0] * b[1] - a[1] * b[0];
}

}  // namespace

Var cross(const Var& a, const Var& b) {
  Tape& tape = common_tape("cross", a, b);
  if (a.shape() != b.shape() || a.shape().empty() || a.shape().back() != 3) {
    throw ShapeError("cross", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t rows = a.size() / 3;
  Array out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) cross3(a.value().data() + 3 * r, b.value().data() + 3 * r, out.data() + 3 * r);
  return tape.record("cross", std::move(out), {a, b}, [rows](const GradContext& c) {
    double tmp[3];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = c.grad.data() + 3 * r;
      if (c.input_grads[0]) {
        cross3(c.inputs[1]->data() + 3 * r, g, tmp);
        for (int i = 0; i < 3; ++i) (*c.input_grads[0])[3 * r + i] += tmp[i];
      }
      if (c.input_grads[1]) {
        cross3(g, c.inputs[0]->data() + 3 * r, tmp);
        for (int i = 0; i < 3; ++i) (*c.input_grads[1])[3 * r + i] += tmp[i];
      }
    }
  });
}

Var normalize(const Var& x) {
  const Shape& shape = x.shape();
  if (shape.empty()) throw ShapeError("normalize", "scalar input");
  const std::size_t n = shape.back();
  const std::size_t rows = x.size() / n;
  Array out(shape);
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* v = x.value().data() + r * n;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += v[i] * v[i];
    const double len = std::sqrt(sq);
    if (!(len > 0.0)) throw std::domain_error("normalize: zero-length vector");
    (*norms)[r] = len;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = v[i] / len;
  }
  return make_var(x.tape(), "normalize", std::move(out), {x}, [n, rows, norms](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = c.output.data() + r * n;
      const double* g = c.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += y[i] * g[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += (g[i] - y[i] * dot) / (*norms)[r];
    }
  });
}

Var norm_rows(const Var& x) {
  const Shape& shape = x.shape();
  if (shape.empty()) throw ShapeError("norm_rows", "scalar input");
  const std::size_t n = shape.back();
  const std::size_t rows = x.size() / n;
  Shape out_shape(shape.begin(), shape.end() - 1);
  Array out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += x.value()[r * n + i] * x.value()[r * n + i];
    out[r] = std::sqrt(sq);
  }
  return make_var(x.tape(), "norm_rows", std::move(out), {x}, [n, rows](const GradContext& c) {
    Array& gx = ensure(c.input_grads[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double len = c.output[r];
      if (len == 0.0 || c.grad[r] == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += c.grad[r] * (*c.inputs[0])[r * n + i] / len;
    }
  });
}

Var axis_angle_to_matrix(const Var& axis_angle) {
  if (axis_angle.size() != 3) throw ShapeError("axis_angle_to_matrix", shape_string(axis_angle.shape()));
  const double* w = axis_angle.value().data();
  const double th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  const double th = std::sqrt(th2);

  // R = I + A K + B K^2 with K = skew(w). dA, dB are (dA/dtheta)/theta, (dB/dtheta)/theta.
  double A, B, dA, dB;
  if (th < 1e-2) {
    const double th4 = th2 * th2;
    A = 1.0 - th2 / 6.0 + th4 / 120.0;
    B = 0.5 - th2 / 24.0 + th4 / 720.0;
    dA = -1.0 / 3.0 + th2 / 30.0 - th4 / 840.0;
    dB = -1.0 / 12.0 + th2 / 180.0 - th4 / 6720.0;
  } else {
    const double s = std::sin(th);
    const double co = std::cos(th);
    A = s / th;
    B = (1.0 - co) / th2;
    dA = (th * co - s) / (th2 * th);
    dB = (th * s - 2.0 * (1.0 - co)) / (th2 * th2);
  }
  Eigen::Matrix3d K;
  K << 0, -w[2], w[1], w[2], 0, -w[0], -w[1], w[0], 0;
  const Eigen::Matrix3d K2 = K * K;
  const Eigen::Matrix3d R = Eigen::Matrix3d::Identity() + A * K + B * K2;

  // Partials dR/dw_k, precomputed for the backward pass.
  std::array<Eigen::Matrix3d, 3> dR;
  for (int k = 0; k < 3; ++k) {
    Eigen::Matrix3d E = Eigen::Matrix3d::Zero();
    Eigen::Vector3d e = Eigen::Vector3d::Zero();
    e[k] = 1.0;
    E << 0, -e[2], e[1], e[2], 0, -e[0], -e[1], e[0], 0;
    dR[k] = dA * w[k] * K + A * E + dB * w[k] * K2 + B * (E * K + K * E);
  }

  Array out(Shape{3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out(r, c) = R(r, c);
  return make_var(axis_angle.tape(), "axis_angle_to_matrix", std::move(out), {axis_angle}, [dR](const GradContext& c) {
    Array& gw = ensure(c.input_grads[0]);
    for (int k = 0; k < 3; ++k) {
      double acc = 0.0;
      for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) acc += c.grad[r * 3 + col] * dR[k](r, col);
      gw[k] += acc;
    }
  });
}

double check_gradient(const std::function<Var(const Var&)>& fn, const Array& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");
  auto evaluate = [&](const Array& at) {
    Tape tape;
    const Var y = fn(tape.variable(at));
    const double v = y.item();
    if (!std::isfinite(v)) throw std::domain_error("check_gradient: non-finite function value");
    return v;
  };

  Tape tape;
  const Var x = tape.variable(point);
  const Var y = fn(x);
  if (!std::isfinite(y.item())) throw std::domain_error("check_gradient: non-finite function value");
  const Array analytic = tape.gradient(y, {x})[0];

  double worst = 0.0;
  Array probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double fp = evaluate(probe);
    probe[i] = point[i] - step;
    const double fm = evaluate(probe);
    probe[i] = point[i];
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace neural_descent

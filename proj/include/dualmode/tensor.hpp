#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a new Tensor whose node remembers its parents and a
// backward closure, but only when gradient recording is enabled and at least
// one input requires a gradient. Leaves created with requires_grad=true are the
// only values backward() reports gradients for.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dualmode {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline ShapeError shape_error(std::string_view op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << to_string(a) << " and " << to_string(b);
  return ShapeError(os.str());
}

inline ShapeError shape_error(std::string_view op, const Shape& a, std::string_view what) {
  std::ostringstream os;
  os << op << ": shape " << to_string(a) << ' ' << what;
  return ShapeError(os.str());
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

// parent_grads[i] is null when parent i does not take part in differentiation.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> parent_grads)>;

struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      std::ostringstream os;
      os << "tensor: shape " << to_string(shape) << " needs " << numel(shape)
         << " values, got " << data.size();
      throw ShapeError(os.str());
    }
    auto n = std::make_shared<Node>();
    n->op = "leaf";
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return from(std::move(s), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (node_->value.size() != 1) throw shape_error("item", shape(), "is not a scalar");
    return node_->value[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  const Node* id() const { return node_.get(); }
  const NodePtr& node() const { return node_; }

  // In-place mutation is reserved for leaves (parameters between steps).
  std::span<double> mutable_data() {
    if (!node_->parents.empty()) throw std::logic_error("mutable_data on a non-leaf tensor");
    return node_->value;
  }

 private:
  NodePtr node_;
};

namespace detail {

inline Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) rg = rg || in.requires_grad();
  }
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void accumulate(std::vector<double>* dst, std::span<const double> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// Maps every flat output index to the flat index of `in` under numpy-style
// right-aligned broadcasting. Empty result means identity.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  if (in == out) return {};
  const std::size_t r = out.size();
  std::vector<std::size_t> in_strides(r, 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t axis_in = in.size() - 1 - i;
      const std::size_t axis_out = r - 1 - i;
      in_strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
      stride *= in[axis_in];
    }
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = offset;
    for (std::size_t axis = r; axis-- > 0;) {
      ++counter[axis];
      offset += in_strides[axis];
      if (counter[axis] < out[axis]) break;
      offset -= in_strides[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return map;
}

inline std::size_t normalize_axis(std::string_view op, const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw shape_error(op, shape, "has no axis " + std::to_string(axis));
  return static_cast<std::size_t>(a);
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

inline Shape broadcast_shapes(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) throw shape_error(op, a, b);
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.

namespace detail {

template <class Fwd, class GradA, class GradB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  Shape out_shape = broadcast_shapes(name, a.shape(), b.shape());
  auto ia = broadcast_index(a.shape(), out_shape);
  auto ib = broadcast_index(b.shape(), out_shape);
  const std::size_t n = numel(out_shape);
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[ia.empty() ? i : ia[i]], bv[ib.empty() ? i : ib[i]]);
  }
  return make_result(
      name, out_shape, std::move(out), {a, b},
      [ia = std::move(ia), ib = std::move(ib), ga, gb](const Node& self, std::span<const double> g,
                                                       std::span<std::vector<double>* const> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ja = ia.empty() ? i : ia[i];
          const std::size_t jb = ib.empty() ? i : ib[i];
          if (pg[0]) (*pg[0])[ja] += g[i] * ga(av[ja], bv[jb], self.value[i]);
          if (pg[1]) (*pg[1])[jb] += g[i] * gb(av[ja], bv[jb], self.value[i]);
        }
      });
}

template <class Fwd, class Grad>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Grad grad) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(name, x.shape(), std::move(out), {x},
                     [grad](const Node& self, std::span<const double> g,
                            std::span<std::vector<double>* const> pg) {
                       const auto& xv = self.parents[0]->value;
                       auto& dst = *pg[0];
                       for (std::size_t i = 0; i < g.size(); ++i)
                         dst[i] += g[i] * grad(xv[i], self.value[i]);
                     });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }
inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}
inline Tensor square(const Tensor& x) {
  return detail::unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x, detail::sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor swish(const Tensor& x) {
  return detail::unary(
      "swish", x, [](double v) { return v * detail::sigmoid_scalar(v); },
      [](double v, double) {
        const double s = detail::sigmoid_scalar(v);
        return s + v * s * (1.0 - s);
      });
}

// Identity in value, a constant to differentiation.
inline Tensor stop_gradient(const Tensor& x) {
  auto n = std::make_shared<Node>();
  n->op = "stop_gradient";
  n->shape = x.shape();
  n->value = x.node()->value;
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Shape ops.

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) throw shape_error("reshape", x.shape(), shape);
  std::vector<double> v(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(v), {x},
                             [](const Node&, std::span<const double> g,
                                std::span<std::vector<double>* const> pg) {
                               detail::accumulate(pg[0], g);
                             });
}

inline Tensor broadcast_to(const Tensor& x, Shape shape) {
  Shape check = broadcast_shapes("broadcast_to", x.shape(), shape);
  if (check != shape) throw shape_error("broadcast_to", x.shape(), shape);
  auto idx = detail::broadcast_index(x.shape(), shape);
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[idx.empty() ? i : idx[i]];
  return detail::make_result("broadcast_to", std::move(shape), std::move(out), {x},
                             [idx = std::move(idx)](const Node&, std::span<const double> g,
                                                    std::span<std::vector<double>* const> pg) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 (*pg[0])[idx.empty() ? i : idx[i]] += g[i];
                             });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw shape_error("transpose", x.shape(), "is not rank 2");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return detail::make_result("transpose", Shape{c, r}, std::move(out), {x},
                             [r, c](const Node&, std::span<const double> g,
                                    std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
                             });
}

inline Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t a = detail::normalize_axis("slice", x.shape(), axis);
  if (start + length > x.dim(a)) {
    throw shape_error("slice", x.shape(),
                      "cannot slice [" + std::to_string(start) + ", " +
                          std::to_string(start + length) + ") on axis " + std::to_string(a));
  }
  const auto s = detail::split_at(x.shape(), a);
  Shape shape = x.shape();
  shape[a] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = xv.data() + (o * s.extent + start) * s.inner;
    std::copy(src, src + length * s.inner, out.begin() + o * length * s.inner);
  }
  return detail::make_result("slice", std::move(shape), std::move(out), {x},
                             [s, start, length](const Node&, std::span<const double> g,
                                                std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 const std::size_t base = (o * s.extent + start) * s.inner;
                                 const std::size_t gbase = o * length * s.inner;
                                 for (std::size_t i = 0; i < length * s.inner; ++i)
                                   d[base + i] += g[gbase + i];
                               }
                             });
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const std::size_t a = detail::normalize_axis("concat", xs[0].shape(), axis);
  Shape shape = xs[0].shape();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != shape.size()) throw shape_error("concat", shape, x.shape());
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (i != a && x.dim(i) != shape[i]) throw shape_error("concat", shape, x.shape());
    extents.push_back(x.dim(a));
    total += x.dim(a);
  }
  shape[a] = total;
  const auto s = detail::split_at(shape, a);
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto xv = xs[k].data();
    const std::size_t chunk = extents[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy(xv.begin() + o * chunk, xv.begin() + (o + 1) * chunk,
                out.begin() + (o * s.extent + offset) * s.inner);
    offset += extents[k];
  }
  return detail::make_result(
      "concat", std::move(shape), std::move(out), xs,
      [s, extents](const Node&, std::span<const double> g,
                   std::span<std::vector<double>* const> pg) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          const std::size_t chunk = extents[k] * s.inner;
          if (pg[k]) {
            auto& d = *pg[k];
            for (std::size_t o = 0; o < s.outer; ++o)
              for (std::size_t i = 0; i < chunk; ++i)
                d[o * chunk + i] += g[(o * s.extent + offset) * s.inner + i];
          }
          offset += extents[k];
        }
      });
}

// Rows of `table` selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw shape_error("embedding", table.shape(), "is not rank 2");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * cols);
  const auto tv = table.data();
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= rows)
      throw ShapeError("embedding: id " + std::to_string(idv[i]) + " outside table of " +
                       std::to_string(rows) + " rows");
    std::copy_n(tv.begin() + idv[i] * cols, cols, out.begin() + i * cols);
  }
  return detail::make_result("embedding", Shape{idv.size(), cols}, std::move(out), {table},
                             [idv, cols](const Node&, std::span<const double> g,
                                         std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t c = 0; c < cols; ++c)
                                   d[idv[i] * cols + c] += g[i * cols + c];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return detail::make_result(
      "matmul", Shape{m, n}, std::move(out), {a, b},
      [m, k, n](const Node& self, std::span<const double> g,
                std::span<std::vector<double>* const> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (pg[0]) {
          auto& da = *pg[0];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              da[i * k + p] += acc;
            }
        }
        if (pg[1]) {
          auto& db = *pg[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double s = av[i * k + p];
              if (s == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) db[p * n + j] += s * g[i * n + j];
            }
        }
      });
}

// Cross-correlation through time. x: [T, Cin], kernel: [k, Cin, Cout].
// out[t] = sum_j x[t - pad_left + j] . kernel[j], zero outside [0, T).
// Output length is T + pad_left + pad_right - k + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t pad_left,
                     std::size_t pad_right) {
  if (x.rank() != 2 || kernel.rank() != 3 || kernel.dim(1) != x.dim(1))
    throw shape_error("conv1d", x.shape(), kernel.shape());
  const std::size_t T = x.dim(0), cin = x.dim(1), k = kernel.dim(0), cout = kernel.dim(2);
  if (T + pad_left + pad_right < k) throw shape_error("conv1d", x.shape(), "too short for kernel");
  const std::size_t out_len = T + pad_left + pad_right - k + 1;
  std::vector<double> out(out_len * cout, 0.0);
  const auto xv = x.data();
  const auto wv = kernel.data();
  for (std::size_t t = 0; t < out_len; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      for (std::size_t i = 0; i < cin; ++i) {
        const double xval = xv[src * cin + i];
        const double* w = wv.data() + (j * cin + i) * cout;
        for (std::size_t o = 0; o < cout; ++o) out[t * cout + o] += xval * w[o];
      }
    }
  }
  return detail::make_result(
      "conv1d", Shape{out_len, cout}, std::move(out), {x, kernel},
      [T, cin, k, cout, out_len, pad_left](const Node& self, std::span<const double> g,
                                           std::span<std::vector<double>* const> pg) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        for (std::size_t t = 0; t < out_len; ++t) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t i = 0; i < cin; ++i) {
              const std::size_t xi = src * cin + i;
              const std::size_t wi = (j * cin + i) * cout;
              double acc = 0.0;
              for (std::size_t o = 0; o < cout; ++o) {
                acc += g[t * cout + o] * wv[wi + o];
                if (pg[1]) (*pg[1])[wi + o] += g[t * cout + o] * xv[xi];
              }
              if (pg[0]) (*pg[0])[xi] += acc;
            }
          }
        }
      });
}

// Per-channel temporal convolution. x: [T, C], kernel: [k, C].
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, std::size_t pad_left,
                               std::size_t pad_right) {
  if (x.rank() != 2 || kernel.rank() != 2 || kernel.dim(1) != x.dim(1))
    throw shape_error("depthwise_conv1d", x.shape(), kernel.shape());
  const std::size_t T = x.dim(0), C = x.dim(1), k = kernel.dim(0);
  if (T + pad_left + pad_right < k)
    throw shape_error("depthwise_conv1d", x.shape(), "too short for kernel");
  const std::size_t out_len = T + pad_left + pad_right - k + 1;
  std::vector<double> out(out_len * C, 0.0);
  const auto xv = x.data();
  const auto wv = kernel.data();
  for (std::size_t t = 0; t < out_len; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      for (std::size_t c = 0; c < C; ++c) out[t * C + c] += xv[src * C + c] * wv[j * C + c];
    }
  }
  return detail::make_result(
      "depthwise_conv1d", Shape{out_len, C}, std::move(out), {x, kernel},
      [T, C, k, out_len, pad_left](const Node& self, std::span<const double> g,
                                   std::span<std::vector<double>* const> pg) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        for (std::size_t t = 0; t < out_len; ++t) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t c = 0; c < C; ++c) {
              const double gv = g[t * C + c];
              if (pg[0]) (*pg[0])[src * C + c] += gv * wv[j * C + c];
              if (pg[1]) (*pg[1])[j * C + c] += gv * xv[src * C + c];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and scans.

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("reduce_sum", Shape{}, {s}, {x},
                             [](const Node&, std::span<const double> g,
                                std::span<std::vector<double>* const> pg) {
                               for (auto& d : *pg[0]) d += g[0];
                             });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw shape_error("reduce_mean", x.shape(), "is empty");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// Sum over one axis; the axis is kept with extent 1.
inline Tensor sum(const Tensor& x, int axis) {
  const std::size_t a = detail::normalize_axis("reduce_sum", x.shape(), axis);
  const auto s = detail::split_at(x.shape(), a);
  Shape shape = x.shape();
  shape[a] = 1;
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += xv[(o * s.extent + e) * s.inner + i];
  return detail::make_result("reduce_sum", std::move(shape), std::move(out), {x},
                             [s](const Node&, std::span<const double> g,
                                 std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t e = 0; e < s.extent; ++e)
                                   for (std::size_t i = 0; i < s.inner; ++i)
                                     d[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i];
                             });
}

inline Tensor mean(const Tensor& x, int axis) {
  const std::size_t a = detail::normalize_axis("reduce_mean", x.shape(), axis);
  if (x.dim(a) == 0) throw shape_error("reduce_mean", x.shape(), "has an empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(a)));
}

inline Tensor cumsum(const Tensor& x, int axis) {
  const std::size_t a = detail::normalize_axis("cumulative_sum", x.shape(), axis);
  const auto s = detail::split_at(x.shape(), a);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 1; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * s.extent + e) * s.inner + i] += out[(o * s.extent + e - 1) * s.inner + i];
  return detail::make_result("cumulative_sum", x.shape(), std::move(out), {x},
                             [s](const Node&, std::span<const double> g,
                                 std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t i = 0; i < s.inner; ++i) {
                                   double acc = 0.0;
                                   for (std::size_t e = s.extent; e-- > 0;) {
                                     const std::size_t idx = (o * s.extent + e) * s.inner + i;
                                     acc += g[idx];
                                     d[idx] += acc;
                                   }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Softmax family over the last axis. Softmax subtracts the row max.

// `keep` (optional, same size as x) selects admissible entries; excluded
// entries get probability exactly 0 and receive no gradient.
inline Tensor softmax(const Tensor& x, std::span<const std::uint8_t> keep = {}) {
  if (x.rank() == 0) throw shape_error("softmax", x.shape(), "is a scalar");
  if (!keep.empty() && keep.size() != x.size())
    throw shape_error("softmax", x.shape(), "does not match mask size");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const auto xv = x.data();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (keep.empty() || keep[i]) mx = std::max(mx, xv[i]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (keep.empty() || keep[i]) {
        out[i] = std::exp(xv[i] - mx);
        z += out[i];
      }
    }
    if (z > 0)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x},
                             [rows, cols](const Node& self, std::span<const double> g,
                                          std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               const auto& y = self.value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c)
                                   dot += g[r * cols + c] * y[r * cols + c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   const std::size_t i = r * cols + c;
                                   d[i] += y[i] * (g[i] - dot);
                                 }
                               }
                             });
}

inline Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw shape_error("log_softmax", x.shape(), "is a scalar");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const auto xv = x.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, xv[r * cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xv[r * cols + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] - lse;
  }
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x},
                             [rows, cols](const Node& self, std::span<const double> g,
                                          std::span<std::vector<double>* const> pg) {
                               auto& d = *pg[0];
                               const auto& y = self.value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   const std::size_t i = r * cols + c;
                                   d[i] += g[i] - std::exp(y[i]) * gs;
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Backward pass.

// Reverse-topological traversal of everything that feeds a root and
// participates in differentiation.
class Graph {
 public:
  explicit Graph(const Tensor& root) {
    if (!root.defined() || !root.requires_grad()) return;
    std::unordered_map<const Node*, bool> seen;
    std::vector<std::pair<const Node*, std::size_t>> stack;
    stack.emplace_back(root.id(), 0);
    seen[root.id()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const Node* p = node->parents[next++].get();
        if (p->requires_grad && !seen[p]) {
          seen[p] = true;
          stack.emplace_back(p, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
    for (std::size_t i = 0; i < order_.size(); ++i) index_[order_[i]] = i;
  }

  // Topological order: parents before children, root last.
  const std::vector<const Node*>& order() const { return order_; }
  std::size_t index_of(const Node* n) const { return index_.at(n); }

 private:
  std::vector<const Node*> order_;
  std::unordered_map<const Node*, std::size_t> index_;
};

class GradientMap {
 public:
  // Gradient for a leaf; zeros when the leaf is not on any path to the loss.
  Tensor of(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) return Tensor::zeros(leaf.shape());
    return Tensor::from(leaf.shape(), it->second);
  }
  const std::vector<double>* find(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    return it == grads_.end() ? nullptr : &it->second;
  }
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) > 0; }
  std::size_t size() const { return grads_.size(); }

  void set(const Node* n, std::vector<double> g) { grads_[n] = std::move(g); }

 private:
  std::unordered_map<const Node*, std::vector<double>> grads_;
};

// Differentiates a scalar loss with respect to every leaf that requires a
// gradient. Gradient buffers live in this call only, so parameters may be
// shared by graphs differentiated on other threads.
inline GradientMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw shape_error("backward", loss.defined() ? loss.shape() : Shape{}, "is not a scalar loss");
  GradientMap result;
  Graph graph(loss);
  const auto& order = graph.order();
  if (order.empty()) return result;
  std::vector<std::vector<double>> grads(order.size());
  grads.back().assign(1, 1.0);
  std::vector<std::vector<double>*> parent_slots;
  for (std::size_t i = order.size(); i-- > 0;) {
    const Node* n = order[i];
    if (grads[i].empty()) continue;
    if (n->parents.empty()) {
      result.set(n, std::move(grads[i]));
      continue;
    }
    parent_slots.assign(n->parents.size(), nullptr);
    for (std::size_t p = 0; p < n->parents.size(); ++p) {
      const Node* parent = n->parents[p].get();
      if (!parent->requires_grad) continue;
      auto& slot = grads[graph.index_of(parent)];
      if (slot.empty()) slot.assign(parent->value.size(), 0.0);
      parent_slots[p] = &slot;
    }
    n->backward(*n, grads[i], parent_slots);
    grads[i].clear();
    grads[i].shrink_to_fit();
  }
  return result;
}

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                         const Tensor& x, double h = 1e-4) {
  std::vector<double> base(x.data().begin(), x.data().end());
  std::vector<double> g(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor::from(x.shape(), std::move(plus)));
    const double fm = f(Tensor::from(x.shape(), std::move(minus)));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(g));
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace dualmode

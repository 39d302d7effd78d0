#include "smdt/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <sstream>

namespace smdt::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != numel(shape)) {
    throw InputError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
  }
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (tape_->has_grad(id_)) return tape_->grad(id_);
  return Tensor<T>(tape_->value(id_).shape);
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::push(Node node) {
  if (consumed_) throw InputError("tape already differentiated; start a new tape");
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t id) { return nodes_[id].requires_grad; });
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape);
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (root.tape() != this) throw InputError("backward root belongs to another tape");
  if (consumed_) throw InputError("backward called twice on the same tape");
  if (value(root.id()).size() != 1) {
    throw InputError("backward root must be a scalar, got shape " +
                     to_string(value(root.id()).shape));
  }
  consumed_ = true;
  if (!nodes_[root.id()].requires_grad) return;
  grad_buffer(root.id()).data[0] = T{1};
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (!a.valid() || a.tape() != b.tape()) throw InputError("operands live on different tapes");
  return *a.tape();
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw InputError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

void require_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw InputError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     to_string(s));
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Applies a unary elementwise map with derivative expressed through the
// input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  Tape<T>& tape = *a.tape();
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia}, [ia, dfdx](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

// Broadcast-aware binary op: b matches a exactly or a suffix of a.
template <typename T, typename F, typename DA, typename DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, bool allow_broadcast, F f,
              DA dfda, DB dfdb) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& z = b.value();
  if (x.shape != z.shape && !(allow_broadcast && is_suffix(x.shape, z.shape))) {
    throw InputError(std::string(name) + ": incompatible shapes " + to_string(x.shape) + " and " +
                     to_string(z.shape));
  }
  const std::size_t period = z.size();
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i], z[i % period]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(y), {ia, ib},
                     [ia, ib, period, dfda, dfdb](Tape<T>& t, std::size_t self) {
                       const Tensor<T>& g = t.grad(self);
                       const Tensor<T>& x = t.value(ia);
                       const Tensor<T>& z = t.value(ib);
                       if (t.requires_grad(ia)) {
                         Tensor<T>& ga = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           ga[i] += g[i] * dfda(x[i], z[i % period]);
                       }
                       if (t.requires_grad(ib)) {
                         Tensor<T>& gb = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gb[i % period] += g[i] * dfdb(x[i], z[i % period]);
                       }
                     });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, "add", true, [](T x, T z) { return x + z; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, "sub", true, [](T x, T z) { return x - z; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, "mul", true, [](T x, T z) { return x * z; }, [](T, T z) { return z; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, "div", false, [](T x, T z) { return x / z; }, [](T, T z) { return T{1} / z; },
      [](T x, T z) { return -x / (z * z); });
}

template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  // Ties route the gradient to `a`.
  return binary(
      a, b, "minimum", false, [](T x, T z) { return x <= z ? x : z; },
      [](T x, T z) { return x <= z ? T{1} : T{0}; }, [](T x, T z) { return x <= z ? T{0} : T{1}; });
}

template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  return binary(
      a, b, "maximum", false, [](T x, T z) { return x >= z ? x : z; },
      [](T x, T z) { return x >= z ? T{1} : T{0}; }, [](T x, T z) { return x >= z ? T{0} : T{1}; });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  return unary(a, [offset](T x) { return x + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a, [](T x) { return T{1} / (T{1} + std::exp(-x)); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T{1} : T{0}; });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary(
      a, [](T x) { return T(0.5) * x * (T{1} + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T{1} + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra.

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  const Shape& sa = a.value().shape;
  const Shape& sb = b.value().shape;
  if (sa.size() < 2 || sb.size() < 2) throw InputError("matmul: operands must have rank >= 2");

  const bool batched = sb.size() == 3;
  if (batched && (sa.size() != 3 || sa[0] != sb[0])) {
    throw InputError("matmul: batched operands need matching leading dims, got " + to_string(sa) +
                     " and " + to_string(sb));
  }
  if (!batched && sb.size() != 2) throw InputError("matmul: right operand must be rank 2 or 3");

  const std::size_t k = sa.back();
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t n = sb.back();
  if (k != kb) {
    throw InputError("matmul: inner dims differ " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t batches = batched ? sa[0] : 1;
  const std::size_t m = batched ? sa[1] : numel(sa) / k;

  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor<T> y(out_shape);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    ConstMatMap<T> A(a.value().data.data() + bi * m * k, m, k);
    ConstMatMap<T> B(b.value().data.data() + (batched ? bi * k * n : 0), k, n);
    MatMap<T> C(y.data.data() + bi * m * n, m, n);
    C.noalias() = A * B;
  }

  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(y), {ia, ib},
                     [ia, ib, batches, batched, m, k, n](Tape<T>& t, std::size_t self) {
                       const Tensor<T>& g = t.grad(self);
                       for (std::size_t bi = 0; bi < batches; ++bi) {
                         ConstMatMap<T> G(g.data.data() + bi * m * n, m, n);
                         const std::size_t boff = batched ? bi * k * n : 0;
                         if (t.requires_grad(ia)) {
                           ConstMatMap<T> B(t.value(ib).data.data() + boff, k, n);
                           MatMap<T> GA(t.grad_buffer(ia).data.data() + bi * m * k, m, k);
                           GA.noalias() += G * B.transpose();
                         }
                         if (t.requires_grad(ib)) {
                           ConstMatMap<T> A(t.value(ia).data.data() + bi * m * k, m, k);
                           MatMap<T> GB(t.grad_buffer(ib).data.data() + boff, k, n);
                           GB.noalias() += A.transpose() * G;
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tape<T>& tape = *a.tape();
  if (numel(shape) != a.value().size()) {
    throw InputError("reshape: cannot view " + to_string(a.value().shape) + " as " +
                     to_string(shape));
  }
  Tensor<T> y(std::move(shape), a.value().data);
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace {

// For every output element, the flat index of the corresponding input element.
std::vector<std::size_t> permutation_map(const Shape& in, std::span<const std::size_t> axes,
                                         Shape& out) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  out.resize(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  std::vector<std::size_t> map(numel(in));
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < map.size(); ++dst) {
    map[dst] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += stride[d];
      if (idx[d] < out[d]) break;
      src -= stride[d] * out[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& a, std::span<const std::size_t> axes) {
  Tape<T>& tape = *a.tape();
  const Shape& in = a.value().shape;
  std::vector<bool> seen(in.size(), false);
  if (axes.size() != in.size()) throw InputError("permute: axis count does not match rank");
  for (std::size_t ax : axes) {
    if (ax >= in.size() || seen[ax]) throw InputError("permute: axes are not a permutation");
    seen[ax] = true;
  }
  Shape out_shape;
  auto map = permutation_map(in, axes, out_shape);
  Tensor<T> y(out_shape);
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < map.size(); ++i) y[i] = x[map[i]];
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia}, [ia, map = std::move(map)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < map.size(); ++i) ga[map[i]] += g[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t r = a.value().rank();
  if (r < 2) throw InputError("transpose: rank must be >= 2");
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, std::span<const std::size_t>(axes));
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw InputError("concat: no inputs");
  Tape<T>& tape = *parts[0].tape();
  Shape out_shape = parts[0].value().shape;
  require_axis(out_shape, axis, "concat");
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw InputError("concat: operands live on different tapes");
    Shape s = p.value().shape;
    if (s.size() != out_shape.size()) throw InputError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != out_shape[d]) {
        throw InputError("concat: shape mismatch off the concatenation axis: " + to_string(s));
      }
    }
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    widths.push_back(s[axis]);
  }
  const AxisSplit sp = split_at(out_shape, axis);
  Tensor<T> y(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& x = parts[p].value().data;
    const std::size_t chunk = widths[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  y.data.begin() + static_cast<std::ptrdiff_t>(o * sp.n * sp.inner + offset));
    }
    offset += chunk;
  }
  return tape.record(std::move(y), ids, [ids, widths, sp](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t chunk = widths[p] * sp.inner;
      if (t.requires_grad(ids[p])) {
        Tensor<T>& gp = t.grad_buffer(ids[p]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < chunk; ++i) {
            gp[o * chunk + i] += g[o * sp.n * sp.inner + offset + i];
          }
        }
      }
      offset += chunk;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape<T>& tape = *a.tape();
  const Shape& in = a.value().shape;
  require_axis(in, axis, "slice");
  if (begin > end || end > in[axis]) {
    throw InputError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside axis of size " + std::to_string(in[axis]));
  }
  const AxisSplit sp = split_at(in, axis);
  Shape out_shape = in;
  out_shape[axis] = end - begin;
  Tensor<T> y(out_shape);
  const std::size_t chunk = (end - begin) * sp.inner;
  const auto& x = a.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * sp.n * sp.inner + begin * sp.inner),
                chunk, y.data.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia}, [ia, sp, chunk, begin](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < chunk; ++i) {
        ga[o * sp.n * sp.inner + begin * sp.inner + i] += g[o * chunk + i];
      }
    }
  });
}

template <typename T>
Var<T> index_select(const Var<T>& a, std::span<const std::size_t> rows) {
  Tape<T>& tape = *a.tape();
  const Shape& in = a.value().shape;
  if (in.empty()) throw InputError("index_select: scalar input");
  const std::size_t row = numel(in) / in[0];
  for (std::size_t r : rows) {
    if (r >= in[0]) throw InputError("index_select: row " + std::to_string(r) + " out of range");
  }
  Shape out_shape = in;
  out_shape[0] = rows.size();
  Tensor<T> y(out_shape);
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                y.data.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record(std::move(y), {ia}, [ia, row, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < row; ++c) ga[idx[i] * row + c] += g[i * row + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  T total{0};
  for (T v : a.value().data) total += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor<T>(Shape{}, std::vector<T>{total}), {ia},
                     [ia](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0];
                       for (T& v : t.grad_buffer(ia).data) v += g;
                     });
}

namespace {

template <typename T>
Var<T> reduce_linear(const Var<T>& a, std::size_t axis, T weight, const char* name) {
  Tape<T>& tape = *a.tape();
  const Shape& in = a.value().shape;
  require_axis(in, axis, name);
  const AxisSplit sp = split_at(in, axis);
  Shape out_shape = in;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> y(out_shape);
  const auto& x = a.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j) {
      const std::size_t base = (o * sp.n + j) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += x[base + i];
    }
  }
  for (T& v : y.data) v *= weight;
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia}, [ia, sp, weight](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t base = (o * sp.n + j) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) ga[base + i] += weight * g[o * sp.inner + i];
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> sum(const Var<T>& a, std::size_t axis) {
  return reduce_linear(a, axis, T{1}, "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a, std::size_t axis) {
  require_axis(a.value().shape, axis, "mean");
  const std::size_t n = a.value().shape[axis];
  if (n == 0) throw InputError("mean: empty axis");
  return reduce_linear(a, axis, T{1} / static_cast<T>(n), "mean");
}

template <typename T>
Var<T> max(const Var<T>& a, std::size_t axis) {
  Tape<T>& tape = *a.tape();
  const Shape& in = a.value().shape;
  require_axis(in, axis, "max");
  if (in[axis] == 0) throw InputError("max: empty axis");
  const AxisSplit sp = split_at(in, axis);
  Shape out_shape = in;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> y(out_shape);
  std::vector<std::size_t> argmax(y.size());
  const auto& x = a.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.n * sp.inner + i;
      for (std::size_t j = 1; j < sp.n; ++j) {
        const std::size_t at = (o * sp.n + j) * sp.inner + i;
        if (x[at] > x[best]) best = at;  // strict: first index wins ties
      }
      y[o * sp.inner + i] = x[best];
      argmax[o * sp.inner + i] = best;
    }
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia},
                     [ia, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                       const Tensor<T>& g = t.grad(self);
                       Tensor<T>& ga = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < argmax.size(); ++i) ga[argmax[i]] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Normalisation.

template <typename T>
Var<T> softmax(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  const Shape& in = a.value().shape;
  if (in.empty() || in.back() == 0) throw InputError("softmax: empty last axis");
  const std::size_t n = in.back();
  const std::size_t rows = numel(in) / n;
  Tensor<T> y(in);
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* yr = y.data.data() + r * n;
    const T hi = *std::max_element(xr, xr + n);
    T z{0};
    for (std::size_t c = 0; c < n; ++c) z += (yr[c] = std::exp(xr[c] - hi));
    for (std::size_t c = 0; c < n; ++c) yr[c] /= z;
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(y), {ia}, [ia, rows, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps) {
  Tape<T>& tape = same_tape(x, gain);
  same_tape(x, shift);
  const Shape& in = x.value().shape;
  if (in.empty()) throw InputError("layer_norm: scalar input");
  const std::size_t n = in.back();
  if (gain.value().shape != Shape{n} || shift.value().shape != Shape{n}) {
    throw InputError("layer_norm: gain/shift must have shape [" + std::to_string(n) + "]");
  }
  const std::size_t rows = numel(in) / n;
  Tensor<T> y(in);
  // Normalised input and inverse std are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<T>>(x.value().size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const auto& xv = x.value().data;
  const auto& g = gain.value().data;
  const auto& b = shift.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * n;
    T mu{0};
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xr[c] - mu) * is;
      (*xhat)[r * n + c] = h;
      y[r * n + c] = h * g[c] + b[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = shift.id();
  return tape.record(std::move(y), {ix, ig, ib},
                     [ix, ig, ib, rows, n, xhat, inv_std](Tape<T>& t, std::size_t self) {
                       const Tensor<T>& dy = t.grad(self);
                       const auto& g = t.value(ig).data;
                       if (t.requires_grad(ig) || t.requires_grad(ib)) {
                         Tensor<T>& gg = t.grad_buffer(ig);
                         Tensor<T>& gb = t.grad_buffer(ib);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < n; ++c) {
                             gg[c] += dy[r * n + c] * (*xhat)[r * n + c];
                             gb[c] += dy[r * n + c];
                           }
                         }
                       }
                       if (!t.requires_grad(ix)) return;
                       Tensor<T>& gx = t.grad_buffer(ix);
                       const T inv_n = T{1} / static_cast<T>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T mean_d{0}, mean_dh{0};
                         for (std::size_t c = 0; c < n; ++c) {
                           const T d = dy[r * n + c] * g[c];
                           mean_d += d;
                           mean_dh += d * (*xhat)[r * n + c];
                         }
                         mean_d *= inv_n;
                         mean_dh *= inv_n;
                         for (std::size_t c = 0; c < n; ++c) {
                           const T d = dy[r * n + c] * g[c];
                           gx[r * n + c] +=
                               (*inv_std)[r] * (d - mean_d - (*xhat)[r * n + c] * mean_dh);
                         }
                       }
                     });
}

template <typename T>
Var<T> scaled_dot_product_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const Shape& sq = q.value().shape;
  const Shape& sk = k.value().shape;
  if (sq.size() != 3 || sk.size() != 3 || v.value().shape != sk || sq[0] != sk[0] ||
      sq[2] != sk[2]) {
    throw InputError("attention: expected q [H,Lq,d], k/v [H,Lk,d]; got " + to_string(sq) + ", " +
                     to_string(sk) + ", " + to_string(v.value().shape));
  }
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(sq[2]));
  Var<T> scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax(scores), v);
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ScalarFunction& fn, std::vector<Tensor<double>> parameters,
                           const GradCheckOptions& opts) {
  const double eps = opts.eps;
  if (!(eps > 0.0) || !(opts.floor > 0.0)) throw InputError("grad_check: eps and floor must be positive");
  auto evaluate = [&](const std::vector<Tensor<double>>& ps, bool differentiate,
                      std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(ps.size());
    for (const auto& p : ps) leaves.push_back(tape.leaf(p));
    Var<double> out = fn(tape, leaves);
    if (out.value().size() != 1) throw InputError("grad_check: function must return a scalar");
    const double f = out.value()[0];
    if (differentiate) {
      tape.backward(out);
      for (const auto& l : leaves) grads->push_back(l.grad());
    }
    return f;
  };

  std::vector<Tensor<double>> analytic;
  evaluate(parameters, true, &analytic);

  GradCheckReport report;
  for (std::size_t p = 0; p < parameters.size(); ++p) {
    const std::size_t n = parameters[p].size();
    const std::size_t count = opts.max_entries_per_tensor ? std::min(n, opts.max_entries_per_tensor) : n;
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t i = count == n ? j : j * n / count;
      ++report.entries_checked;
      const double saved = parameters[p][i];
      parameters[p][i] = saved + eps;
      const double fp = evaluate(parameters, false, nullptr);
      parameters[p][i] = saved - eps;
      const double fm = evaluate(parameters, false, nullptr);
      parameters[p][i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      const double err = std::abs(a - numeric) / denom;
      if (err > report.max_relative_error) {
        report = {err, p, i, a, numeric, report.entries_checked};
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

#define SMDT_INSTANTIATE(T)                                                                   \
  template struct Tensor<T>;                                                                  \
  template class Var<T>;                                                                      \
  template class Tape<T>;                                                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                          \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                          \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                          \
  template Var<T> div(const Var<T>&, const Var<T>&);                                          \
  template Var<T> scale(const Var<T>&, T);                                                    \
  template Var<T> add_scalar(const Var<T>&, T);                                               \
  template Var<T> minimum(const Var<T>&, const Var<T>&);                                      \
  template Var<T> maximum(const Var<T>&, const Var<T>&);                                      \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                       \
  template Var<T> reshape(const Var<T>&, Shape);                                              \
  template Var<T> permute(const Var<T>&, std::span<const std::size_t>);                       \
  template Var<T> transpose(const Var<T>&);                                                   \
  template Var<T> concat(std::span<const Var<T>>, std::size_t);                               \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                \
  template Var<T> index_select(const Var<T>&, std::span<const std::size_t>);                  \
  template Var<T> sum(const Var<T>&);                                                         \
  template Var<T> sum(const Var<T>&, std::size_t);                                            \
  template Var<T> mean(const Var<T>&, std::size_t);                                           \
  template Var<T> max(const Var<T>&, std::size_t);                                            \
  template Var<T> softmax(const Var<T>&);                                                     \
  template Var<T> sigmoid(const Var<T>&);                                                     \
  template Var<T> log(const Var<T>&);                                                         \
  template Var<T> exp(const Var<T>&);                                                         \
  template Var<T> abs(const Var<T>&);                                                         \
  template Var<T> clamp(const Var<T>&, T, T);                                                 \
  template Var<T> gelu(const Var<T>&);                                                        \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
  template Var<T> scaled_dot_product_attention(const Var<T>&, const Var<T>&, const Var<T>&);

SMDT_INSTANTIATE(float)
SMDT_INSTANTIATE(double)

#undef SMDT_INSTANTIATE

}  // namespace smdt::ad

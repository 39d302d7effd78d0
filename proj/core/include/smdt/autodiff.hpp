#pragma once

// Tape-based reverse-mode differentiation over dense row-major tensors.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape pointer + node id). Operations append a node holding the
// forward value and a closure that scatters the node's gradient into its
// inputs. backward() walks nodes in reverse creation order, which is a valid
// topological order because inputs always precede outputs.
//
// Instantiated for float (training) and double (gradient verification).

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "smdt/errors.hpp"

namespace smdt::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0});
  Tensor(Shape s, std::vector<T> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  /// Accumulated gradient; an all-zero tensor when nothing flowed here.
  Tensor<T> grad() const;

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  /// Receives the tape and the node's own id; reads grad(self) and
  /// accumulates into the inputs' gradient buffers.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> leaf(Tensor<T> value);

  /// Appends a node computed from `inputs`. The node requires a gradient iff
  /// any input does; otherwise `fn` is dropped.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1 and propagates. A tape can be differentiated
  /// once; a second call, or a root that is not a scalar, throws InputError.
  void backward(const Var<T>& root);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Zero-initialised on first access.
  Tensor<T>& grad_buffer(std::size_t id);

  Var<T> var(std::size_t id) { return Var<T>(this, id); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Shape errors throw smdt::InputError.

/// Elementwise; `b` may also match a suffix of `a`'s shape (bias broadcast).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
/// Broadcasts like add.
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
/// Elementwise; `b` may also match a suffix of `a`'s shape.
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);
template <typename T> Var<T> minimum(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> maximum(const Var<T>& a, const Var<T>& b);

/// [.., m, k] x [k, n] -> [.., m, n], or batched [B, m, k] x [B, k, n].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> permute(const Var<T>& a, std::span<const std::size_t> axes);
/// Swaps the last two axes.
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Gathers rows along axis 0.
template <typename T> Var<T> index_select(const Var<T>& a, std::span<const std::size_t> rows);

/// Sum of all entries, shape {}.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> sum(const Var<T>& a, std::size_t axis);
template <typename T> Var<T> mean(const Var<T>& a, std::size_t axis);
/// Gradient is routed to the first maximal entry along `axis`.
template <typename T> Var<T> max(const Var<T>& a, std::size_t axis);

/// Over the last axis.
template <typename T> Var<T> softmax(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> abs(const Var<T>& a);
/// Gradient passes only where lo < a < hi.
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
/// Exact (erf) form.
template <typename T> Var<T> gelu(const Var<T>& a);
/// Normalises the last axis, then applies gain and shift of that width.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps = T(1e-5));

/// softmax(q k^T / sqrt(d)) v for q [H, Lq, d], k and v [H, Lk, d].
template <typename T>
Var<T> scaled_dot_product_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Builds a scalar from the given leaves on a fresh tape.
using ScalarFunction =
    std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Denominator floor of the relative error.
  double floor = 1e-8;
  /// Entries checked per tensor, spread evenly; 0 checks all of them.
  std::size_t max_entries_per_tensor = 0;
};

/// Compares reverse-mode gradients against central differences, entry by
/// entry: |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckReport grad_check(const ScalarFunction& fn, std::vector<Tensor<double>> parameters,
                           const GradCheckOptions& opts);
inline GradCheckReport grad_check(const ScalarFunction& fn, std::vector<Tensor<double>> parameters,
                                  double eps = 1e-5) {
  return grad_check(fn, std::move(parameters), GradCheckOptions{eps});
}

}  // namespace smdt::ad

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gmvit/common.hpp"

namespace gmvit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

/// Records the backward rules of one forward pass. Operations append their
/// rule as they execute, so the entry order is a topological order by
/// construction; backward() replays the rules exactly once in reverse.
/// A tape is confined to one thread.
template <typename T>
class Tape;

/// Dense n-dimensional array participating in reverse-mode differentiation.
/// Copying a Tensor shares the underlying node (handle semantics).
template <typename T>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<std::size_t>(numel_of(t.node_->shape)), T(0));
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    detail::require(numel_of(shape) == static_cast<std::int64_t>(data.size()),
                    "tensor: shape " + shape_str(shape) + " does not match data length " +
                        detail::str(static_cast<std::int64_t>(data.size())));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  std::int64_t rows() const { return node_->shape[0]; }
  std::int64_t cols() const { return node_->shape[1]; }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  T item() const {
    detail::require(numel() == 1, "item: tensor is not scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on)
      node_->grad.assign(node_->value.size(), T(0));
    else
      node_->grad.clear();
  }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill_uniform(std::mt19937_64& rng, T lo, T hi) {
    std::uniform_real_distribution<T> d(lo, hi);
    for (auto& v : node_->value) v = d(rng);
  }
  void fill_normal(std::mt19937_64& rng, T mean, T stddev) {
    std::normal_distribution<T> d(mean, stddev);
    for (auto& v : node_->value) v = d(rng);
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_slot(); }

  void push(std::function<void()> rule) { entries_.push_back(std::move(rule)); }
  void register_output(std::shared_ptr<TensorNode<T>> node) {
    outputs_.push_back(std::move(node));
  }
  std::size_t size() const { return entries_.size(); }
  void clear() {
    entries_.clear();
    outputs_.clear();
  }

  /// Seeds d(loss)/d(loss) = 1 and replays every recorded rule once, in
  /// reverse record order. Intermediate (op-output) gradients are reset
  /// before each replay, so repeated calls without a leaf-gradient reset
  /// accumulate exactly one contribution per call.
  void backward(const Tensor<T>& loss) {
    detail::require(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    detail::require(loss.has_grad(), "backward: loss was not recorded on a tape");
    for (auto& node : outputs_) std::fill(node->grad.begin(), node->grad.end(), T(0));
    loss.node()->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  static Tape*& current_slot() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

private:
  std::vector<std::function<void()>> entries_;
  std::vector<std::shared_ptr<TensorNode<T>>> outputs_;
};

/// Makes a tape the active recorder for the current scope.
template <typename T>
class TapeScope {
public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current_slot()) {
    Tape<T>::current_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::current_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

private:
  Tape<T>* prev_;
};

/// Suspends recording (teacher forward passes, evaluation inside a
/// training step).
template <typename T>
class NoGradScope {
public:
  NoGradScope() : prev_(Tape<T>::current_slot()) { Tape<T>::current_slot() = nullptr; }
  ~NoGradScope() { Tape<T>::current_slot() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

private:
  Tape<T>* prev_;
};

/// Runs `loss`'s backward rules on the active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::current();
  detail::require(tape != nullptr, "backward: no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::current()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
void enable_out_grad(Tensor<T>& out) {
  out.node()->requires_grad = true;
  out.node()->grad.assign(out.node()->value.size(), T(0));
  Tape<T>::current()->register_output(out.node());
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
EMap<T> mat(std::vector<T>& v, std::int64_t r, std::int64_t c) {
  return EMap<T>(v.data(), r, c);
}
template <typename T>
ECMap<T> cmat(const std::vector<T>& v, std::int64_t r, std::int64_t c) {
  return ECMap<T>(v.data(), r, c);
}

// Fault-injection hook for the gradcheck mutation test: flips the sign of
// the relu backward rule when set.
inline bool& relu_backward_sign_fault() {
  static bool fault = false;
  return fault;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::tracking<T>({&a, &b})) {
    detail::enable_out_grad(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::current()->push([an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::tracking<T>({&a, &b})) {
    detail::enable_out_grad(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::current()->push([an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::tracking<T>({&a, &b})) {
    detail::enable_out_grad(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::current()->push([an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] + s;
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) {
  return add(a, -s);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] * s;
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, s] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
    });
  }
  return out;
}

/// Multiplies every element by a live scalar tensor (shape [1]).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  detail::require(s.numel() == 1, "scale_by: scale must be scalar, got " + shape_str(s.shape()));
  const T sv = s.data()[0];
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] * sv;
  if (detail::tracking<T>({&a, &s})) {
    detail::enable_out_grad(out);
    auto an = a.node(), sn = s.node(), on = out.node();
    Tape<T>::current()->push([an, sn, on] {
      if (an->requires_grad) {
        const T sv2 = sn->value[0];
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * sv2;
      }
      if (sn->requires_grad) {
        T acc = T(0);
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * an->value[i];
        sn->grad[0] += acc;
      }
    });
  }
  return out;
}

/// Adds a length-c bias vector to every row of an [r x c] matrix.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require(a.rank() == 2, "add_rowwise: lhs must be rank 2");
  detail::require(bias.numel() == a.cols(), "add_rowwise: bias length " + detail::str(bias.numel()) +
                                                " != columns " + detail::str(a.cols()));
  const std::int64_t r = a.rows(), c = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out.data()[i * c + j] = a.data()[i * c + j] + bias.data()[j];
  if (detail::tracking<T>({&a, &bias})) {
    detail::enable_out_grad(out);
    auto an = a.node(), bn = bias.node(), on = out.node();
    Tape<T>::current()->push([an, bn, on, r, c] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) bn->grad[j] += on->grad[i * c + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be rank 2");
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions " + detail::str(a.cols()) + " and " +
                                            detail::str(b.rows()) + " disagree");
  const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::mat(out.data(), m, n).noalias() =
      detail::cmat(a.data(), m, k) * detail::cmat(b.data(), k, n);
  if (detail::tracking<T>({&a, &b})) {
    detail::enable_out_grad(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::current()->push([an, bn, on, m, k, n] {
      auto g = detail::cmat(on->grad, m, n);
      if (an->requires_grad)
        detail::mat(an->grad, m, k).noalias() += g * detail::cmat(bn->value, k, n).transpose();
      if (bn->requires_grad)
        detail::mat(bn->grad, k, n).noalias() += detail::cmat(an->value, m, k).transpose() * g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose: operand must be rank 2");
  const std::int64_t r = a.rows(), c = a.cols();
  Tensor<T> out = Tensor<T>::zeros({c, r});
  detail::mat(out.data(), c, r).noalias() = detail::cmat(a.data(), r, c).transpose();
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, r, c] {
      detail::mat(an->grad, r, c).noalias() += detail::cmat(on->grad, c, r).transpose();
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel_of(shape) == a.numel(), "reshape: element count mismatch between " +
                                                    shape_str(a.shape()) + " and " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.data());
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing / gathering / concatenation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t r0, std::int64_t r1) {
  detail::require(a.rank() == 2, "slice_rows: operand must be rank 2");
  detail::require(0 <= r0 && r0 < r1 && r1 <= a.rows(), "slice_rows: range [" + detail::str(r0) + "," +
                                                            detail::str(r1) + ") out of bounds");
  const std::int64_t c = a.cols();
  Tensor<T> out = Tensor<T>::zeros({r1 - r0, c});
  std::copy(a.data().begin() + r0 * c, a.data().begin() + r1 * c, out.data().begin());
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, r0, c] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[r0 * c + i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t c0, std::int64_t c1) {
  detail::require(a.rank() == 2, "slice_cols: operand must be rank 2");
  detail::require(0 <= c0 && c0 < c1 && c1 <= a.cols(), "slice_cols: range [" + detail::str(c0) + "," +
                                                            detail::str(c1) + ") out of bounds");
  const std::int64_t r = a.rows(), c = a.cols(), w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({r, w});
  for (std::int64_t i = 0; i < r; ++i)
    std::copy(a.data().begin() + i * c + c0, a.data().begin() + i * c + c1,
              out.data().begin() + i * w);
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, r, c, c0, w] {
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < w; ++j) an->grad[i * c + c0 + j] += on->grad[i * w + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: empty input");
  const std::int64_t c = parts[0].rank() == 2 ? parts[0].cols() : parts[0].numel();
  std::int64_t r = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.cols() == c,
                    "concat_rows: all parts must be rank 2 with equal columns");
    r += p.rows();
  }
  Tensor<T> out = Tensor<T>::zeros({r, c});
  std::int64_t row = 0;
  bool track = detail::tracking<T>({});
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::int64_t>> spans;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + row * c);
    if (Tape<T>::current() && p.requires_grad()) track = true;
    spans.emplace_back(p.node(), row);
    row += p.rows();
  }
  if (track) {
    detail::enable_out_grad(out);
    auto on = out.node();
    Tape<T>::current()->push([spans, on, c] {
      for (const auto& [pn, at] : spans) {
        if (!pn->requires_grad) continue;
        for (std::size_t i = 0; i < pn->grad.size(); ++i) pn->grad[i] += on->grad[at * c + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: empty input");
  const std::int64_t r = parts[0].rows();
  std::int64_t c = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.rows() == r,
                    "concat_cols: all parts must be rank 2 with equal rows");
    c += p.cols();
  }
  Tensor<T> out = Tensor<T>::zeros({r, c});
  std::int64_t col = 0;
  bool track = false;
  std::vector<std::tuple<std::shared_ptr<TensorNode<T>>, std::int64_t, std::int64_t>> spans;
  for (const auto& p : parts) {
    const std::int64_t w = p.cols();
    for (std::int64_t i = 0; i < r; ++i)
      std::copy(p.data().begin() + i * w, p.data().begin() + (i + 1) * w,
                out.data().begin() + i * c + col);
    if (Tape<T>::current() && p.requires_grad()) track = true;
    spans.emplace_back(p.node(), col, w);
    col += w;
  }
  if (track) {
    detail::enable_out_grad(out);
    auto on = out.node();
    Tape<T>::current()->push([spans, on, r, c] {
      for (const auto& [pn, at, w] : spans) {
        if (!pn->requires_grad) continue;
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < w; ++j) pn->grad[i * w + j] += on->grad[i * c + at + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(std::initializer_list<Tensor<T>> parts) {
  return concat_rows(std::vector<Tensor<T>>(parts));
}

template <typename T>
Tensor<T> concat_cols(std::initializer_list<Tensor<T>> parts) {
  return concat_cols(std::vector<Tensor<T>>(parts));
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& a, const std::vector<std::int64_t>& idx) {
  detail::require(a.rank() == 2, "select_rows: operand must be rank 2");
  detail::require(!idx.empty(), "select_rows: empty index list");
  const std::int64_t c = a.cols();
  Tensor<T> out = Tensor<T>::zeros({static_cast<std::int64_t>(idx.size()), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(0 <= idx[i] && idx[i] < a.rows(), "select_rows: index out of range");
    std::copy(a.data().begin() + idx[i] * c, a.data().begin() + (idx[i] + 1) * c,
              out.data().begin() + static_cast<std::int64_t>(i) * c);
  }
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, idx, c] {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t j = 0; j < c; ++j)
          an->grad[idx[i] * c + j] += on->grad[static_cast<std::int64_t>(i) * c + j];
    });
  }
  return out;
}

/// Builds an [m x c] matrix whose row idx[i] is input row i; all other rows
/// are exact zeros. Indices must be unique.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& a, const std::vector<std::int64_t>& idx, std::int64_t m) {
  detail::require(a.rank() == 2, "scatter_rows: operand must be rank 2");
  detail::require(static_cast<std::int64_t>(idx.size()) == a.rows(),
                  "scatter_rows: index count != row count");
  const std::int64_t c = a.cols();
  Tensor<T> out = Tensor<T>::zeros({m, c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(0 <= idx[i] && idx[i] < m, "scatter_rows: index out of range");
    std::copy(a.data().begin() + static_cast<std::int64_t>(i) * c,
              a.data().begin() + static_cast<std::int64_t>(i + 1) * c,
              out.data().begin() + idx[i] * c);
  }
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, idx, c] {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::int64_t j = 0; j < c; ++j)
          an->grad[static_cast<std::int64_t>(i) * c + j] += on->grad[idx[i] * c + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on] {
      const T g = on->grad[0];
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  detail::require(a.numel() > 0, "mean_all: empty tensor");
  T acc = T(0);
  for (T v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, inv] {
      const T g = on->grad[0] * inv;
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on] {
      const T sign = detail::relu_backward_sign_fault() ? T(-1) : T(1);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > T(0)) an->grad[i] += sign * on->grad[i];
    });
  }
  return out;
}

namespace detail {
template <typename T>
T stable_sigmoid(T x) {
  T y;
  if (x >= T(0)) {
    const T e = std::exp(-x);
    y = T(1) / (T(1) + e);
  } else {
    const T e = std::exp(x);
    y = e / (T(1) + e);
  }
  // keep the output strictly inside (0,1) even where exp saturates
  const T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  return std::min(std::max(y, lo), hi);
}
}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = detail::stable_sigmoid(a.data()[i]);
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T y = on->value[i];
        an->grad[i] += on->grad[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    out.data()[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on] {
      constexpr double kInvSqrt2pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double x = static_cast<double>(an->value[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2pi * std::exp(-0.5 * x * x);
        an->grad[i] += on->grad[i] * static_cast<T>(cdf + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row softmax with temperature
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, T temperature = T(1)) {
  detail::require(a.rank() == 2, "softmax_rows: operand must be rank 2");
  detail::require(temperature > T(0), "softmax_rows: temperature must be positive");
  const std::int64_t r = a.rows(), c = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T invT = T(1) / temperature;
  for (std::int64_t i = 0; i < r; ++i) {
    const T* x = a.data().data() + i * c;
    T* y = out.data().data() + i * c;
    T mx = x[0] * invT;
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j] * invT);
    T sum = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] * invT - mx);
      sum += y[j];
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < c; ++j) y[j] *= inv;
  }
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, r, c, invT] {
      for (std::int64_t i = 0; i < r; ++i) {
        const T* y = on->value.data() + i * c;
        const T* g = on->grad.data() + i * c;
        T dot = T(0);
        for (std::int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (std::int64_t j = 0; j < c; ++j) an->grad[i * c + j] += invT * y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

/// Columnwise maximum over a [k x d] set of rows; k >= 1. The gradient flows
/// only to each column's argmax row, ties resolved to the lowest row index.
template <typename T>
Tensor<T> max_over_set(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "max_over_set: operand must be rank 2");
  detail::require(a.rows() >= 1, "max_over_set: need at least one row");
  const std::int64_t k = a.rows(), d = a.cols();
  Tensor<T> out = Tensor<T>::zeros({d});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(d), 0);
  for (std::int64_t j = 0; j < d; ++j) {
    T best = a.data()[j];
    std::int64_t row = 0;
    for (std::int64_t i = 1; i < k; ++i) {
      const T v = a.data()[i * d + j];
      if (v > best) {
        best = v;
        row = i;
      }
    }
    out.data()[j] = best;
    argmax[static_cast<std::size_t>(j)] = row;
  }
  if (detail::tracking<T>({&a})) {
    detail::enable_out_grad(out);
    auto an = a.node(), on = out.node();
    Tape<T>::current()->push([an, on, argmax, d] {
      for (std::int64_t j = 0; j < d; ++j)
        an->grad[argmax[static_cast<std::size_t>(j)] * d + j] += on->grad[j];
    });
  }
  return out;
}

}  // namespace gmvit

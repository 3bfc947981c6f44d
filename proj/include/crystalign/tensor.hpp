#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Tensors are shared handles: copying a Tensor aliases the same storage, which
// is what parameters and tape closures rely on. Every op that sees an input
// with requires_grad records a backward closure on the calling thread's tape;
// backward(loss) replays the tape in reverse and clears it.
//
// Only rank-0/1/2 tensors are used by the encoders. Broadcasting is limited to
// adding a rank-1 bias to every row of a matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "crystalign/error.hpp"

namespace crystalign::tensor {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw Error(Errc::ShapeMismatch, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {

// 64-byte aligned storage. Eigen peels unaligned heads before its vector loops,
// so with malloc's 16-byte alignment the summation order (and scalar vs packet
// exp) would depend on where a buffer happened to land.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

struct Adopt {};

template <class T>
struct Node {
  Shape shape;
  detail::Buffer<T> value;
  detail::Buffer<T> grad;
  bool requires_grad = false;

  detail::Buffer<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

struct ThreadFlags {
  bool grad_enabled = true;
  bool checked = false;
  std::uint64_t numerical_warnings = 0;
};

inline ThreadFlags& flags() {
  thread_local ThreadFlags f;
  return f;
}

}  // namespace detail

/// Count of zero-norm rows seen by l2_normalize / cosine_rows on this thread.
inline std::uint64_t numerical_warnings() { return detail::flags().numerical_warnings; }

/// In checked mode every op output is scanned for NaN/Inf.
inline void set_checked_mode(bool on) { detail::flags().checked = on; }

/// Disables tape recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::flags().grad_enabled) { detail::flags().grad_enabled = false; }
  ~NoGradGuard() { detail::flags().grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void replay() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

 private:
  std::vector<std::function<void()>> ops_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : Tensor(std::move(shape), detail::Buffer<T>(data.begin(), data.end()), requires_grad, detail::Adopt{}) {}

  Tensor(Shape shape, detail::Buffer<T> data, bool requires_grad, detail::Adopt)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (numel_of(shape) != data.size()) {
      throw Error(Errc::ShapeMismatch, "shape " + shape_str(shape) + " holds " +
                                           std::to_string(numel_of(shape)) + " elements, data has " +
                                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), detail::Buffer<T>(n, T(0)), requires_grad, detail::Adopt{});
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({}, detail::Buffer<T>{v}, requires_grad, detail::Adopt{}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  /// Gradient buffer; empty until something flowed into it.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw Error(Errc::NotScalar, "item() on shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Deep copy without gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value, false, detail::Adopt{}); }

  detail::NodePtr<T> node() const { return node_; }

 private:
  detail::NodePtr<T> node_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
ConstMap<T> as_matrix(const detail::Buffer<T>& v, std::size_t r, std::size_t c) {
  return ConstMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
MutMap<T> as_mut_matrix(detail::Buffer<T>& v, std::size_t r, std::size_t c) {
  return MutMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!flags().grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <class T>
Tensor<T> make_output(Shape shape, detail::Buffer<T> value, bool requires_grad, const char* op) {
  if (flags().checked) {
    for (const T& v : value) {
      if (!std::isfinite(v)) throw Error(Errc::NumericalWarning, std::string(op) + " produced a non-finite value");
    }
  }
  return Tensor<T>(std::move(shape), std::move(value), requires_grad, Adopt{});
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw Error(Errc::ShapeMismatch, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv, const char* name) {
  detail::Buffer<T> out(x.numel());
  const auto& in = x.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  const bool rg = any_requires_grad<T>({&x});
  Tensor<T> y = make_output<T>(x.shape(), std::move(out), rg, name);
  if (rg) {
    Tape<T>::current().record([xn = x.node(), yn = y.node(), deriv] {
      if (!yn->has_grad()) return;
      auto& gx = xn->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yn->grad[i] * deriv(xn->value[i], yn->value[i]);
    });
  }
  return y;
}

}  // namespace detail

enum class Transpose { None, B };

/// a[m,k] · b[k,n], or a[m,k] · b[n,k]ᵀ with Transpose::B.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose tb = Transpose::None) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const bool trans = tb == Transpose::B;
  const std::size_t bk = trans ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans ? b.shape()[0] : b.shape()[1];
  if (bk != k) shape_error("matmul", a.shape(), b.shape());
  detail::Buffer<T> out(m * n);
  {
    auto A = detail::as_matrix(a.node()->value, m, k);
    auto B = detail::as_matrix(b.node()->value, b.shape()[0], b.shape()[1]);
    auto C = detail::as_mut_matrix(out, m, n);
    if (trans) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
  }
  const bool rg = detail::any_requires_grad<T>({&a, &b});
  Tensor<T> y = detail::make_output<T>({m, n}, std::move(out), rg, "matmul");
  if (rg) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), yn = y.node(), m, k, n, trans] {
      if (!yn->has_grad()) return;
      auto G = detail::as_matrix(yn->grad, m, n);
      if (an->requires_grad) {
        auto B = detail::as_matrix(bn->value, bn->shape[0], bn->shape[1]);
        auto GA = detail::as_mut_matrix(an->ensure_grad(), m, k);
        if (trans) {
          GA.noalias() += G * B;
        } else {
          GA.noalias() += G * B.transpose();
        }
      }
      if (!bn->requires_grad) return;
      auto A = detail::as_matrix(an->value, m, k);
      auto GB = detail::as_mut_matrix(bn->ensure_grad(), bn->shape[0], bn->shape[1]);
      if (trans) {
        GB.noalias() += G.transpose() * A;
      } else {
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return y;
}

/// Elementwise a + b for equal shapes, or matrix a plus rank-1 bias b added to every row.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bias = a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1];
  if (!bias && a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  detail::Buffer<T> out = a.node()->value;
  const auto& bv = b.node()->value;
  const std::size_t c = a.cols();
  if (bias) {
    for (std::size_t r = 0; r < out.size(); r += c) {
      T* row = out.data() + r;
      for (std::size_t k = 0; k < c; ++k) row[k] += bv[k];
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  }
  const bool rg = detail::any_requires_grad<T>({&a, &b});
  Tensor<T> y = detail::make_output<T>(a.shape(), std::move(out), rg, "add");
  if (rg) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), yn = y.node(), bias, c] {
      if (!yn->has_grad()) return;
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += yn->grad[i];
      auto& gb = bn->ensure_grad();
      if (bias) {
        for (std::size_t r = 0; r < yn->grad.size(); r += c) {
          const T* row = yn->grad.data() + r;
          for (std::size_t k = 0; k < c; ++k) gb[k] += row[k];
        }
      } else {
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  detail::Buffer<T> out = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const bool rg = detail::any_requires_grad<T>({&a, &b});
  Tensor<T> y = detail::make_output<T>(a.shape(), std::move(out), rg, "sub");
  if (rg) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      auto& ga = an->ensure_grad();
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += yn->grad[i];
        gb[i] -= yn->grad[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  detail::Buffer<T> out = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool rg = detail::any_requires_grad<T>({&a, &b});
  Tensor<T> y = detail::make_output<T>(a.shape(), std::move(out), rg, "mul");
  if (rg) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      auto& ga = an->ensure_grad();
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += yn->grad[i] * bn->value[i];
        gb[i] += yn->grad[i] * an->value[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary<T>(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; }, "scale");
}

/// Column-wise concatenation of matrices with equal row counts.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw Error(Errc::ShapeMismatch, "concat_cols: no inputs");
  const std::size_t rows = parts.front().shape().at(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.shape()[0] != rows) shape_error("concat_cols", parts.front().shape(), p.shape());
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
    rg = rg || p.requires_grad();
  }
  rg = rg && detail::flags().grad_enabled;
  detail::Buffer<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].node()->value;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * widths[p]), widths[p],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += widths[p];
  }
  Tensor<T> y = detail::make_output<T>({rows, total}, std::move(out), rg, "concat_cols");
  if (rg) {
    std::vector<detail::NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    Tape<T>::current().record([nodes, widths, rows, total, yn = y.node()] {
      if (!yn->has_grad()) return;
      std::size_t off = 0;
      for (std::size_t p = 0; p < nodes.size(); ++p) {
        if (!nodes[p]->requires_grad) {
          off += widths[p];
          continue;
        }
        auto& g = nodes[p]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[p]; ++c) g[r * widths[p] + c] += yn->grad[r * total + off + c];
        }
        off += widths[p];
      }
    });
  }
  return y;
}

namespace detail {

template <class T>
using ArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using MutArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
ArrayMap<T> as_array(const detail::Buffer<T>& v) {
  return ArrayMap<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}
template <class T>
MutArrayMap<T> as_mut_array(detail::Buffer<T>& v) {
  return MutArrayMap<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  detail::Buffer<T> out(x.numel());
  detail::as_mut_array(out) = detail::as_array(x.node()->value).logistic();
  const bool rg = detail::any_requires_grad<T>({&x});
  Tensor<T> y = detail::make_output<T>(x.shape(), std::move(out), rg, "sigmoid");
  if (rg) {
    Tape<T>::current().record([xn = x.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto yv = detail::as_array(yn->value);
      detail::as_mut_array(xn->ensure_grad()) += detail::as_array(yn->grad) * yv * (T(1) - yv);
    });
  }
  return y;
}

/// log(1 + e^x), evaluated without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  const auto xv = detail::as_array(x.node()->value);
  detail::Buffer<T> out(x.numel());
  detail::as_mut_array(out) = xv.max(T(0)) + (-xv.abs()).exp().log1p();
  const bool rg = detail::any_requires_grad<T>({&x});
  Tensor<T> y = detail::make_output<T>(x.shape(), std::move(out), rg, "softplus");
  if (rg) {
    Tape<T>::current().record([xn = x.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      detail::as_mut_array(xn->ensure_grad()) += detail::as_array(yn->grad) * detail::as_array(xn->value).logistic();
    });
  }
  return y;
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  const bool rg = detail::any_requires_grad<T>({&x});
  Tensor<T> y = detail::make_output<T>({}, {total}, rg, "sum");
  if (rg) {
    Tape<T>::current().record([xn = x.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      auto& g = xn->ensure_grad();
      for (T& v : g) v += yn->grad[0];
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Rows of a matrix selected (with repetition) by index.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::uint32_t> index) {
  detail::require_rank2(x, "gather_rows");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  detail::Buffer<T> out(index.size() * c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw Error(Errc::ShapeMismatch, "gather_rows: index " + std::to_string(index[r]) + " out of " + std::to_string(n));
    }
    std::copy_n(x.node()->value.begin() + static_cast<std::ptrdiff_t>(index[r] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  const bool rg = detail::any_requires_grad<T>({&x});
  Tensor<T> y = detail::make_output<T>({index.size(), c}, std::move(out), rg, "gather_rows");
  if (rg) {
    Tape<T>::current().record(
        [xn = x.node(), yn = y.node(), idx = std::vector<std::uint32_t>(index.begin(), index.end()), c] {
          if (!yn->has_grad()) return;
          auto& g = xn->ensure_grad();
          for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t k = 0; k < c; ++k) g[idx[r] * c + k] += yn->grad[r * c + k];
          }
        });
  }
  return y;
}

/// out[s] = sum of rows r with segment[r] == s, for s < num_segments.
template <class T>
Tensor<T> segment_sum(const Tensor<T>& x, std::span<const std::uint32_t> segment, std::size_t num_segments) {
  detail::require_rank2(x, "segment_sum");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (segment.size() != n) shape_error("segment_sum", x.shape(), Shape{segment.size()});
  detail::Buffer<T> out(num_segments * c, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    if (segment[r] >= num_segments) throw Error(Errc::ShapeMismatch, "segment_sum: segment id out of range");
    for (std::size_t k = 0; k < c; ++k) out[segment[r] * c + k] += x.node()->value[r * c + k];
  }
  const bool rg = detail::any_requires_grad<T>({&x});
  Tensor<T> y = detail::make_output<T>({num_segments, c}, std::move(out), rg, "segment_sum");
  if (rg) {
    Tape<T>::current().record(
        [xn = x.node(), yn = y.node(), seg = std::vector<std::uint32_t>(segment.begin(), segment.end()), c] {
          if (!yn->has_grad()) return;
          auto& g = xn->ensure_grad();
          for (std::size_t r = 0; r < seg.size(); ++r) {
            for (std::size_t k = 0; k < c; ++k) g[r * c + k] += yn->grad[seg[r] * c + k];
          }
        });
  }
  return y;
}

/// Per-segment mean of rows; empty segments yield zero rows.
template <class T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::uint32_t> segment, std::size_t num_segments) {
  Tensor<T> summed = segment_sum(x, segment, num_segments);
  detail::Buffer<T> inv(num_segments, T(0));
  for (auto s : segment) inv[s] += T(1);
  for (T& v : inv) v = v > T(0) ? T(1) / v : T(0);
  const std::size_t c = summed.cols();
  detail::Buffer<T> out(summed.data().begin(), summed.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv[i / c];
  const bool rg = summed.requires_grad();
  Tensor<T> y = detail::make_output<T>(summed.shape(), std::move(out), rg, "segment_mean");
  if (rg) {
    Tape<T>::current().record([sn = summed.node(), yn = y.node(), inv, c] {
      if (!yn->has_grad()) return;
      auto& g = sn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * inv[i / c];
    });
  }
  return y;
}

/// Rows scaled to unit L2 norm. Zero rows stay zero and bump numerical_warnings().
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  detail::Buffer<T> out(x.numel());
  detail::Buffer<T> inv_norm(r);
  const auto& in = x.node()->value;
  for (std::size_t i = 0; i < r; ++i) {
    T sq = T(0);
    for (std::size_t k = 0; k < c; ++k) sq += in[i * c + k] * in[i * c + k];
    const T nrm = std::sqrt(sq);
    if (nrm > T(0)) {
      inv_norm[i] = T(1) / nrm;
    } else {
      inv_norm[i] = T(0);
      ++detail::flags().numerical_warnings;
    }
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = in[i * c + k] * inv_norm[i];
  }
  const bool rg = detail::any_requires_grad<T>({&x});
  Tensor<T> y = detail::make_output<T>(x.shape(), std::move(out), rg, "l2_normalize");
  if (rg) {
    Tape<T>::current().record([xn = x.node(), yn = y.node(), inv_norm, r, c] {
      if (!yn->has_grad()) return;
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        if (inv_norm[i] == T(0)) continue;
        T dot = T(0);
        for (std::size_t k = 0; k < c; ++k) dot += yn->value[i * c + k] * yn->grad[i * c + k];
        for (std::size_t k = 0; k < c; ++k) {
          g[i * c + k] += (yn->grad[i * c + k] - yn->value[i * c + k] * dot) * inv_norm[i];
        }
      }
    });
  }
  return y;
}

/// Row-wise cosine similarity of two equally shaped matrices, shape [rows].
template <class T>
Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("cosine_rows", a.shape(), b.shape());
  const std::size_t r = a.rows(), c = a.cols();
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  detail::Buffer<T> out(r), na(r), nb(r);
  for (std::size_t i = 0; i < r; ++i) {
    T dot = T(0), sa = T(0), sb = T(0);
    for (std::size_t k = 0; k < c; ++k) {
      dot += av[i * c + k] * bv[i * c + k];
      sa += av[i * c + k] * av[i * c + k];
      sb += bv[i * c + k] * bv[i * c + k];
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    if (na[i] > T(0) && nb[i] > T(0)) {
      out[i] = dot / (na[i] * nb[i]);
    } else {
      out[i] = T(0);
      ++detail::flags().numerical_warnings;
    }
  }
  const bool rg = detail::any_requires_grad<T>({&a, &b});
  Tensor<T> y = detail::make_output<T>({r}, std::move(out), rg, "cosine_rows");
  if (rg) {
    Tape<T>::current().record([an = a.node(), bn = b.node(), yn = y.node(), na, nb, r, c] {
      if (!yn->has_grad()) return;
      auto& ga = an->ensure_grad();
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        if (!(na[i] > T(0) && nb[i] > T(0))) continue;
        const T cosv = yn->value[i];
        const T g = yn->grad[i];
        const T inv_ab = T(1) / (na[i] * nb[i]);
        for (std::size_t k = 0; k < c; ++k) {
          const T ak = an->value[i * c + k];
          const T bk = bn->value[i * c + k];
          ga[i * c + k] += g * (bk * inv_ab - cosv * ak / (na[i] * na[i]));
          gb[i * c + k] += g * (ak * inv_ab - cosv * bk / (nb[i] * nb[i]));
        }
      }
    });
  }
  return y;
}

/// Mean softmax cross-entropy of logits[N,C] against target class per row,
/// stabilized by subtracting each row's maximum.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint32_t> targets) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (targets.size() != n) shape_error("cross_entropy", logits.shape(), Shape{targets.size()});
  const auto& z = logits.node()->value;
  detail::Buffer<T> softmax(n * c);
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= c) throw Error(Errc::ShapeMismatch, "cross_entropy: target out of range");
    T mx = z[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[i * c + j]);
    T denom = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      softmax[i * c + j] = std::exp(z[i * c + j] - mx);
      denom += softmax[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) softmax[i * c + j] /= denom;
    total += (mx + std::log(denom)) - z[i * c + targets[i]];
  }
  const bool rg = detail::any_requires_grad<T>({&logits});
  Tensor<T> y = detail::make_output<T>({}, {total / static_cast<T>(n)}, rg, "cross_entropy");
  if (rg) {
    Tape<T>::current().record([ln = logits.node(), yn = y.node(), softmax = std::move(softmax),
                               tg = std::vector<std::uint32_t>(targets.begin(), targets.end()), n, c] {
      if (!yn->has_grad()) return;
      auto& g = ln->ensure_grad();
      const T scale_by = yn->grad[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const T target = j == tg[i] ? T(1) : T(0);
          g[i * c + j] += scale_by * (softmax[i * c + j] - target);
        }
      }
    });
  }
  return y;
}

/// Reverse pass from a scalar loss into every requires_grad leaf; clears the tape.
template <class T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1) throw Error(Errc::NotScalar, "backward on shape " + shape_str(loss.shape()));
  auto& tape = Tape<T>::current();
  if (!loss.requires_grad()) {
    tape.clear();
    return;
  }
  loss.node()->ensure_grad()[0] += T(1);
  tape.replay();
}

}  // namespace crystalign::tensor

#pragma once

// Differentiable primitives over Tensor<T>. Every op computes its forward
// value eagerly and, when recording, pushes one backward closure that
// accumulates into the gradients of inputs that require them.
//
// Broadcasting is deliberately narrow: binary ops accept equal shapes, a
// scalar operand, or an operand whose shape (ignoring leading 1s) is a
// trailing suffix of the other. Anything else goes through broadcast_to.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "refformer/tensor.hpp"

namespace refformer {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T, class Fn>
void record(Tape<T>* tape, Tensor<T>& out, Fn&& fn) {
  out.node()->requires_grad = true;
  tape->record(out.node_ptr(), std::forward<Fn>(fn));
}

inline Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i + 1 < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

/// True if `small` broadcasts into `big` as a scalar or trailing suffix.
inline bool is_trailing_broadcast(const Shape& small, const Shape& big) {
  if (shape_numel(small) == 1) return true;
  const Shape s = strip_leading_ones(small);
  if (s.size() > big.size()) return false;
  return std::equal(s.rbegin(), s.rend(), big.rbegin());
}

/// Visits (out, a, b) flat indices where the smaller operand repeats with
/// period equal to its size; avoids a division per element.
template <class Fn>
void for_each_broadcast(std::size_t n, std::size_t na, std::size_t nb, Fn&& fn) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
  } else if (na == n) {
    for (std::size_t base = 0; base < n; base += nb)
      for (std::size_t j = 0; j < nb; ++j) fn(base + j, base + j, j);
  } else {
    for (std::size_t base = 0; base < n; base += na)
      for (std::size_t j = 0; j < na; ++j) fn(base + j, j, base + j);
  }
}

template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb) {
  const std::size_t na = a.numel(), nb = b.numel();
  Shape out_shape;
  if (a.shape() == b.shape() || (na >= nb && is_trailing_broadcast(b.shape(), a.shape()))) {
    out_shape = a.shape();
  } else if (nb > na && is_trailing_broadcast(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  Tensor<T> out(out_shape);
  const std::size_t n = out.numel();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.mutable_data().data();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  } else {
    for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = f(pa[ia], pb[ib]); });
  }
  if (Tape<T>* tape = recording_tape<T>({&a, &b})) {
    record(tape, out, [an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(), dfa, dfb] {
      if (on->grad.empty()) return;
      const std::size_t n = on->data.size(), na = an->data.size(), nb = bn->data.size();
      const T* g = on->grad.data();
      const T* pa = an->data.data();
      const T* pb = bn->data.data();
      const T* po = on->data.data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* ga = an->grad.data();
        for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          ga[ia] += g[i] * dfa(pa[ia], pb[ib], po[i]);
        });
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
        for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          gb[ib] += g[i] * dfb(pa[ia], pb[ib], po[i]);
        });
      }
    });
  }
  return out;
}

/// Pointwise op; `df(x, y)` returns dy/dx given input x and output y.
template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.mutable_data().data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = f(px[i]);
  if (Tape<T>* tape = recording_tape<T>({&x})) {
    record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), df] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      const std::size_t n = on->data.size();
      for (std::size_t i = 0; i < n; ++i)
        xn->grad[i] += on->grad[i] * df(xn->data[i], on->data[i]);
    });
  }
  return out;
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* name) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimensionError(std::string(name) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

/// Split a shape around `axis` into (outer, extent, inner) element counts.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

/// Elementwise min; ties send the gradient to the first operand.
template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "minimum", a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y, T) { return x <= y ? T(1) : T(0); },
      [](T x, T y, T) { return x <= y ? T(0) : T(1); });
}

/// Elementwise max; ties send the gradient to the first operand.
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Unary elementwise

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::unary_op<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

/// Clamp to [lo, hi]; the gradient is zero where the clamp is active.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary_op<T>(
      x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v < lo || v > hi) ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      const T g = on->grad[0];
      for (T& v : xn->grad) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over the last axis; a rank-1 input reduces to shape [1].
template <class T>
Tensor<T> sum_last(const Tensor<T>& x) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  T* po = out.mutable_data().data();
  const T* px = x.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t j = 0; j < len; ++j) acc += px[r * len + j];
    po[r] = acc;
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), len, rows] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) xn->grad[r * len + j] += on->grad[r];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_last(const Tensor<T>& x) {
  return scale(sum_last(x), T(1) / static_cast<T>(x.shape().back()));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are flattened into rows.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.shape().back() != b.dim(0))
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  {
    detail::ConstMatMap<T> A(a.ptr(), m, k);
    detail::ConstMatMap<T> B(b.ptr(), k, n);
    detail::MatMap<T> C(out.mutable_data().data(), m, n);
    C.noalias() = A * B;
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    detail::record(tape, out, [an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(), m, k, n] {
      if (on->grad.empty()) return;
      detail::ConstMatMap<T> dC(on->grad.data(), m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::MatMap<T> dA(an->grad.data(), m, k);
        dA.noalias() += dC * detail::ConstMatMap<T>(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::MatMap<T> dB(bn->grad.data(), k, n);
        dB.noalias() += detail::ConstMatMap<T>(an->data.data(), m, k).transpose() * dC;
      }
    });
  }
  return out;
}

/// Batched a[..., m, k] x b[..., n, k]^T -> [..., m, n] over identical leading axes.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != a.rank() || a.shape().back() != b.shape().back() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 2);
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape[r - 1] = n;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMatMap<T> A(a.ptr() + i * m * k, m, k);
    detail::ConstMatMap<T> B(b.ptr() + i * n * k, n, k);
    detail::MatMap<T> C(out.mutable_data().data() + i * m * n, m, n);
    C.noalias() = A * B.transpose();
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    detail::record(tape, out,
                   [an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(), batch, m, k, n] {
                     if (on->grad.empty()) return;
                     if (an->requires_grad) an->ensure_grad();
                     if (bn->requires_grad) bn->ensure_grad();
                     for (std::size_t i = 0; i < batch; ++i) {
                       detail::ConstMatMap<T> dC(on->grad.data() + i * m * n, m, n);
                       if (an->requires_grad) {
                         detail::MatMap<T> dA(an->grad.data() + i * m * k, m, k);
                         dA.noalias() += dC * detail::ConstMatMap<T>(bn->data.data() + i * n * k, n, k);
                       }
                       if (bn->requires_grad) {
                         detail::MatMap<T> dB(bn->grad.data() + i * n * k, n, k);
                         dB.noalias() +=
                             dC.transpose() * detail::ConstMatMap<T>(an->data.data() + i * m * k, m, k);
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis` with max-subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), ax, outer, len, inner);
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.mutable_data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        po[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) po[base + j * inner] /= total;
    }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), outer, len, inner] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t j = 0; j < len; ++j)
            dot += on->grad[base + j * inner] * on->data[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            xn->grad[idx] += on->data[idx] * (on->grad[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Layer normalization over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: gain/bias extent must equal last extent of " +
                         shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  auto normalized = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.ptr();
  const T* pg = gain.ptr();
  const T* pb = bias.ptr();
  T* po = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (row[j] - mu) * rs;
      (*normalized)[r * d + j] = xh;
      po[r * d + j] = xh * pg[j] + pb[j];
    }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x, &gain, &bias})) {
    detail::record(tape, out,
                   [xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(),
                    on = out.node_ptr(), normalized, rstd, rows, d] {
                     if (on->grad.empty()) return;
                     const T* dy = on->grad.data();
                     const T* xh = normalized->data();
                     if (gn->requires_grad) {
                       gn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[r * d + j] * xh[r * d + j];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[r * d + j];
                     }
                     if (xn->requires_grad) {
                       xn->ensure_grad();
                       const T inv_d = T(1) / static_cast<T>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T mean_dxh = T(0), mean_dxh_xh = T(0);
                         for (std::size_t j = 0; j < d; ++j) {
                           const T dxh = dy[r * d + j] * gn->data[j];
                           mean_dxh += dxh;
                           mean_dxh_xh += dxh * xh[r * d + j];
                         }
                         mean_dxh *= inv_d;
                         mean_dxh_xh *= inv_d;
                         for (std::size_t j = 0; j < d; ++j) {
                           const T dxh = dy[r * d + j] * gn->data[j];
                           xn->grad[r * d + j] +=
                               (*rstd)[r] * (dxh - mean_dxh - xh[r * d + j] * mean_dxh_xh);
                         }
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention over `heads` heads.
///   q [B, Nq, D], k [B, Nk, D], v [B, Nk, Dv] -> [B, Nq, Dv]
/// `key_mask` (size B*Nk, nonzero = attend) removes padded keys. When
/// `probs_out` is given it receives the head-averaged weights [B, Nq, Nk]
/// (detached).
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const std::vector<std::uint8_t>* key_mask = nullptr,
                    Tensor<T>* probs_out = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) ||
      k.dim(0) != v.dim(0) || k.dim(1) != v.dim(1) || q.dim(2) != k.dim(2))
    throw DimensionError("attention: incompatible shapes q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
  const std::size_t B = q.dim(0), Nq = q.dim(1), Nk = k.dim(1), D = q.dim(2), Dv = v.dim(2);
  if (heads == 0 || D % heads != 0 || Dv % heads != 0)
    throw DimensionError("attention: widths " + std::to_string(D) + "/" + std::to_string(Dv) +
                         " not divisible by " + std::to_string(heads) + " heads");
  if (key_mask && key_mask->size() != B * Nk)
    throw DimensionError("attention: key mask size " + std::to_string(key_mask->size()) +
                         " != " + std::to_string(B * Nk));
  const std::size_t dh = D / heads, dvh = Dv / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(B * heads * Nq * Nk);
  Tensor<T> out(Shape{B, Nq, Dv});
  T* po = out.mutable_data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      detail::ConstStridedMap<T> Qh(q.ptr() + b * Nq * D + h * dh, Nq, dh, Eigen::OuterStride<>(D));
      detail::ConstStridedMap<T> Kh(k.ptr() + b * Nk * D + h * dh, Nk, dh, Eigen::OuterStride<>(D));
      detail::ConstStridedMap<T> Vh(v.ptr() + b * Nk * Dv + h * dvh, Nk, dvh,
                                    Eigen::OuterStride<>(Dv));
      detail::MatMap<T> P(probs->data() + (b * heads + h) * Nq * Nk, Nq, Nk);
      P.noalias() = (Qh * Kh.transpose()) * scale_factor;
      for (std::size_t i = 0; i < Nq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < Nk; ++j) {
          if (key_mask && !(*key_mask)[b * Nk + j]) {
            P(i, j) = -std::numeric_limits<T>::infinity();
          } else {
            mx = std::max(mx, P(i, j));
          }
        }
        if (mx == -std::numeric_limits<T>::infinity())
          throw ContractError("attention: every key is masked");
        T total = T(0);
        for (std::size_t j = 0; j < Nk; ++j) {
          const T e = std::exp(P(i, j) - mx);
          P(i, j) = e;
          total += e;
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < Nk; ++j) P(i, j) *= inv;
      }
      detail::StridedMap<T> Oh(po + b * Nq * Dv + h * dvh, Nq, dvh, Eigen::OuterStride<>(Dv));
      Oh.noalias() = P * Vh;
    }
  }
  if (probs_out) {
    Tensor<T> avg(Shape{B, Nq, Nk});
    T* pa = avg.mutable_data().data();
    const T inv_heads = T(1) / static_cast<T>(heads);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* p = probs->data() + (b * heads + h) * Nq * Nk;
        for (std::size_t i = 0; i < Nq * Nk; ++i) pa[b * Nq * Nk + i] += p[i] * inv_heads;
      }
    *probs_out = avg;
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&q, &k, &v})) {
    detail::record(tape, out,
                   [qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr(), on = out.node_ptr(),
                    probs, B, Nq, Nk, D, Dv, heads, dh, dvh, scale_factor] {
                     if (on->grad.empty()) return;
                     if (qn->requires_grad) qn->ensure_grad();
                     if (kn->requires_grad) kn->ensure_grad();
                     if (vn->requires_grad) vn->ensure_grad();
                     detail::RowMat<T> dP(Nq, Nk);
                     for (std::size_t b = 0; b < B; ++b) {
                       for (std::size_t h = 0; h < heads; ++h) {
                         detail::ConstMatMap<T> P(probs->data() + (b * heads + h) * Nq * Nk, Nq, Nk);
                         detail::ConstStridedMap<T> dO(on->grad.data() + b * Nq * Dv + h * dvh, Nq,
                                                       dvh, Eigen::OuterStride<>(Dv));
                         detail::ConstStridedMap<T> Vh(vn->data.data() + b * Nk * Dv + h * dvh, Nk,
                                                       dvh, Eigen::OuterStride<>(Dv));
                         if (vn->requires_grad) {
                           detail::StridedMap<T> dV(vn->grad.data() + b * Nk * Dv + h * dvh, Nk, dvh,
                                                    Eigen::OuterStride<>(Dv));
                           dV.noalias() += P.transpose() * dO;
                         }
                         if (!qn->requires_grad && !kn->requires_grad) continue;
                         dP.noalias() = dO * Vh.transpose();
                         for (std::size_t i = 0; i < Nq; ++i) {
                           T dot = T(0);
                           for (std::size_t j = 0; j < Nk; ++j) dot += dP(i, j) * P(i, j);
                           for (std::size_t j = 0; j < Nk; ++j)
                             dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale_factor;
                         }
                         if (qn->requires_grad) {
                           detail::ConstStridedMap<T> Kh(kn->data.data() + b * Nk * D + h * dh, Nk,
                                                         dh, Eigen::OuterStride<>(D));
                           detail::StridedMap<T> dQ(qn->grad.data() + b * Nq * D + h * dh, Nq, dh,
                                                    Eigen::OuterStride<>(D));
                           dQ.noalias() += dP * Kh;
                         }
                         if (kn->requires_grad) {
                           detail::ConstStridedMap<T> Qh(qn->data.data() + b * Nq * D + h * dh, Nq,
                                                         dh, Eigen::OuterStride<>(D));
                           detail::StridedMap<T> dK(kn->grad.data() + b * Nk * D + h * dh, Nk, dh,
                                                    Eigen::OuterStride<>(D));
                           dK.noalias() += dP.transpose() * Qh;
                         }
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i)
      if (i != ax && p.dim(i) != first[i]) ok = false;
    if (!ok)
      throw DimensionError("concat: shape " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(first) + " along axis " + std::to_string(ax));
    out_shape[ax] += p.dim(ax);
  }
  std::size_t outer, len, inner;
  detail::axis_split(out_shape, ax, outer, len, inner);
  Tensor<T> out(out_shape);
  T* po = out.mutable_data().data();
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t plen = p.dim(ax) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.ptr() + o * plen, plen, po + o * len * inner + off * inner);
    off += p.dim(ax);
  }
  if (Tape<T>* tape = detail::recording_tape<T>(parts)) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    detail::record(tape, out,
                   [nodes = std::move(nodes), offsets, on = out.node_ptr(), outer, len, inner] {
                     if (on->grad.empty()) return;
                     for (std::size_t i = 0; i < nodes.size(); ++i) {
                       auto& n = nodes[i];
                       if (!n->requires_grad) continue;
                       n->ensure_grad();
                       const std::size_t plen = n->data.size() / outer;
                       for (std::size_t o = 0; o < outer; ++o) {
                         const T* src = on->grad.data() + o * len * inner + offsets[i] * inner;
                         T* dst = n->grad.data() + o * plen;
                         for (std::size_t j = 0; j < plen; ++j) dst[j] += src[j];
                       }
                     }
                   });
  }
  return out;
}

/// Half-open slice [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "slice");
  if (begin >= end || end > x.dim(ax))
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for extent " + std::to_string(x.dim(ax)));
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), ax, outer, len, inner);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t span_len = (end - begin) * inner;
  T* po = out.mutable_data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.ptr() + o * len * inner + begin * inner, span_len, po + o * span_len);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), outer, len, inner, begin, span_len] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        T* dst = xn->grad.data() + o * len * inner + begin * inner;
        const T* src = on->grad.data() + o * span_len;
        for (std::size_t j = 0; j < span_len; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

/// Numpy-style expansion of size-1 (or missing leading) axes to `shape`.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (x.rank() > shape.size())
    throw DimensionError("broadcast_to: cannot expand " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  const std::size_t pad = shape.size() - x.rank();
  std::vector<std::size_t> src_stride(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > pad;) {
    const std::size_t xd = x.dim(i - pad);
    if (xd != shape[i] && xd != 1)
      throw DimensionError("broadcast_to: cannot expand " + shape_str(x.shape()) + " to " +
                           shape_str(shape));
    src_stride[i] = xd == 1 ? 0 : stride;
    stride *= xd;
  }
  Tensor<T> out(shape);
  const std::size_t n = out.numel();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> coord(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) src += coord[d] * src_stride[d];
    (*index)[i] = src;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++coord[d] < shape[d]) break;
      coord[d] = 0;
    }
  }
  T* po = out.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = x.ptr()[(*index)[i]];
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), index] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < index->size(); ++i) xn->grad[(*index)[i]] += on->grad[i];
    });
  }
  return out;
}

/// Gathers rows of `x` viewed as [rows, width] (width = product of trailing
/// axes after the first). Result shape: [indices.size(), trailing...].
template <class T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("index_select: empty index list");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  for (std::size_t idx : indices)
    if (idx >= rows)
      throw DimensionError("index_select: row " + std::to_string(idx) + " out of range for " +
                           shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  Tensor<T> out(out_shape);
  T* po = out.mutable_data().data();
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(x.ptr() + indices[i] * width, width, po + i * width);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), indices, width] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < width; ++j)
          xn->grad[indices[i] * width + j] += on->grad[i * width + j];
    });
  }
  return out;
}

enum class UpsampleMode { kBilinear, kNearest };

namespace detail {

/// 1-D interpolation taps (half-pixel centers, edge clamped).
struct InterpTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

inline InterpTaps interp_taps(std::size_t in, std::size_t out, UpsampleMode mode) {
  InterpTaps taps;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.w_hi.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (mode == UpsampleMode::kNearest) {
      const auto idx = std::min(in - 1, static_cast<std::size_t>(std::floor(o * ratio)));
      taps.lo[o] = taps.hi[o] = idx;
      taps.w_hi[o] = 0.0;
      continue;
    }
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps.lo[o] = i0;
    taps.hi[o] = std::min(i0 + 1, in - 1);
    taps.w_hi[o] = src - static_cast<double>(i0);
  }
  return taps;
}

}  // namespace detail

/// Resizes the two trailing axes of x[..., h, w] to [..., out_h, out_w].
template <class T>
Tensor<T> upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w,
                   UpsampleMode mode = UpsampleMode::kBilinear) {
  if (x.rank() < 2) throw DimensionError("upsample: need at least 2 axes, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  auto ty = std::make_shared<detail::InterpTaps>(detail::interp_taps(h, out_h, mode));
  auto tx = std::make_shared<detail::InterpTaps>(detail::interp_taps(w, out_w, mode));
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = out_h;
  out_shape[x.rank() - 1] = out_w;
  Tensor<T> out(out_shape);
  T* po = out.mutable_data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = po + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy1 = static_cast<T>(ty->w_hi[oy]), wy0 = T(1) - wy1;
      const T* r0 = src + ty->lo[oy] * w;
      const T* r1 = src + ty->hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx1 = static_cast<T>(tx->w_hi[ox]), wx0 = T(1) - wx1;
        const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
        dst[oy * out_w + ox] =
            wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
      }
    }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::record(tape, out, [xn = x.node_ptr(), on = out.node_ptr(), ty, tx, planes, h, w, out_h, out_w] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        T* gsrc = xn->grad.data() + p * h * w;
        const T* gdst = on->grad.data() + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const T wy1 = static_cast<T>(ty->w_hi[oy]), wy0 = T(1) - wy1;
          T* r0 = gsrc + ty->lo[oy] * w;
          T* r1 = gsrc + ty->hi[oy] * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const T wx1 = static_cast<T>(tx->w_hi[ox]), wx0 = T(1) - wx1;
            const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
            const T g = gdst[oy * out_w + ox];
            r0[x0] += g * wy0 * wx0;
            r0[x1] += g * wy0 * wx1;
            r1[x0] += g * wy1 * wx0;
            r1[x1] += g * wy1 * wx1;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conversions

template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> values(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) values[i] = static_cast<To>(x.ptr()[i]);
  return Tensor<To>(x.shape(), std::move(values));
}

}  // namespace refformer

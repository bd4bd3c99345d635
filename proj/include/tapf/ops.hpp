#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tapf/tensor.hpp"

namespace tapf {

namespace detail {

template <class T>
Tape<T>* pick_tape(const char* op, std::initializer_list<Tensor<T>> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.requires_grad()) continue;
    if (t.tape() == nullptr)
      throw ContractError(std::string(op) +
                          ": gradient-carrying input has no tape");
    if (tape && tape != t.tape())
      throw ContractError(std::string(op) + ": inputs live on different tapes");
    tape = t.tape();
  }
  return tape;
}

template <class T>
void same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline double round_half_away(double v) { return std::round(v); }

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tape<T>* tape = detail::pick_tape("add", {a, b});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    tape->record([ai, bi, yi] {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] += yi->grad[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Tape<T>* tape = detail::pick_tape("sub", {a, b});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    tape->record([ai, bi, yi] {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] -= yi->grad[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tape<T>* tape = detail::pick_tape("mul", {a, b});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    tape->record([ai, bi, yi] {
      if (ai->requires_grad)
        for (std::size_t i = 0; i < yi->grad.size(); ++i)
          ai->grad[i] += yi->grad[i] * bi->data[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < yi->grad.size(); ++i)
          bi->grad[i] += yi->grad[i] * ai->data[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  Tape<T>* tape = detail::pick_tape("scale", {a});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi, c] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i] * c;
    });
  }
  return y;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  Tape<T>* tape = detail::pick_tape("add_scalar", {a});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <class T, class Fwd, class Dydx>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Dydx dydx) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  Tape<T>* tape = detail::pick_tape(name, {a});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi, dydx] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i)
        ai->grad[i] += yi->grad[i] * dydx(ai->data[i], yi->data[i]);
    });
  }
  return y;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary_op(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      "sigmoid", a,
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                 : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(
      "log", a, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

// max(x, c); ties get zero gradient
template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T c) {
  return unary_op(
      "clamp_min", a, [c](T x) { return x > c ? x : c; },
      [c](T x, T) { return x > c ? T(1) : T(0); });
}

// Forward rounds half away from zero; backward passes the gradient through
// unchanged. Under the surrogate guard the forward is the identity too.
template <class T>
Tensor<T> round_ste(const Tensor<T>& a) {
  bool surrogate = ste_surrogate_flag();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = surrogate ? a.data()[i] : T(detail::round_half_away(double(a.data()[i])));
  Tape<T>* tape = detail::pick_tape("round_ste", {a});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
    });
  }
  return y;
}

// Forward takes the caller-computed values verbatim; backward routes the
// upstream gradient into grad_path unchanged. The exact value copy keeps
// quantized outputs bit-identical to their value-side computation.
template <class T>
Tensor<T> straight_through(std::vector<T> values, const Tensor<T>& grad_path) {
  if (values.size() != grad_path.numel())
    throw ShapeError("straight_through: value length " +
                     std::to_string(values.size()) + " vs path " +
                     shape_str(grad_path.shape()));
  Tape<T>* tape = detail::pick_tape("straight_through", {grad_path});
  auto y = make_op_result(grad_path.shape(), std::move(values), tape != nullptr, tape);
  if (tape) {
    auto pi = grad_path.impl(), yi = y.impl();
    tape->record([pi, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) pi->grad[i] += yi->grad[i];
    });
  }
  return y;
}

// ---- reductions ------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tape<T>* tape = detail::pick_tape("sum", {a});
  auto y = make_op_result<T>({1}, {acc}, tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi] {
      T g = yi->grad[0];
      for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), T(1) / T(a.numel()));
}

// axis 0 collapses rows (output {cols}); axis 1 collapses cols (output {rows})
template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
  if (a.rank() != 2) throw ShapeError("sum_axis: need rank 2, got " + shape_str(a.shape()));
  std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<T> out;
  if (axis == 0) {
    out.assign(m, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[j] += a.data()[i * m + j];
  } else if (axis == 1) {
    out.assign(n, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i] += a.data()[i * m + j];
  } else {
    throw ContractError("sum_axis: axis must be 0 or 1");
  }
  Tape<T>* tape = detail::pick_tape("sum_axis", {a});
  Shape oshape = {axis == 0 ? m : n};
  auto y = make_op_result(oshape, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi, n, m, axis] {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          ai->grad[i * m + j] += yi->grad[axis == 0 ? j : i];
    });
  }
  return y;
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
  std::size_t denom = axis == 0 ? a.dim(0) : a.dim(1);
  return scale(sum_axis(a, axis), T(1) / T(denom));
}

// Sum of absolute values. sign(0) contributes zero gradient.
template <class T>
Tensor<T> l1(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += std::abs(v);
  Tape<T>* tape = detail::pick_tape("l1", {a});
  auto y = make_op_result<T>({1}, {acc}, tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi] {
      T g = yi->grad[0];
      for (std::size_t i = 0; i < ai->grad.size(); ++i) {
        T x = ai->data[i];
        ai->grad[i] += g * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
      }
    });
  }
  return y;
}

// Euclidean norm; the zero vector gets zero gradient.
template <class T>
Tensor<T> l2norm(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v * v;
  T nrm = std::sqrt(acc);
  Tape<T>* tape = detail::pick_tape("l2norm", {a});
  auto y = make_op_result<T>({1}, {nrm}, tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi] {
      T v = yi->data[0];
      if (v <= T(0)) return;
      T g = yi->grad[0] / v;
      for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g * ai->data[i];
    });
  }
  return y;
}

// ---- softmax ----------------------------------------------------------------

// Rowwise over the last axis (a 1D tensor is one row).
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() > 2) throw ShapeError("softmax: need rank <= 2, got " + shape_str(a.shape()));
  std::size_t rows = a.rank() == 2 ? a.dim(0) : 1;
  std::size_t cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  if (cols == 0) throw ContractError("softmax: empty row");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* x = a.data().data() + i * cols;
    T* y = out.data() + i * cols;
    T mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T denom = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= denom;
  }
  Tape<T>* tape = detail::pick_tape("softmax", {a});
  auto y = make_op_result(a.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi, rows, cols] {
      for (std::size_t i = 0; i < rows; ++i) {
        const T* yv = yi->data.data() + i * cols;
        const T* gy = yi->grad.data() + i * cols;
        T dot = 0;
        for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * yv[j];
        T* gx = ai->grad.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) gx[j] += yv[j] * (gy[j] - dot);
      }
    });
  }
  return y;
}

// ---- matmul ------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      T av = a.data()[i * k + kk];
      const T* brow = b.data().data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tape<T>* tape = detail::pick_tape("matmul", {a, b});
  auto y = make_op_result<T>({m, n}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    tape->record([ai, bi, yi, m, k, n] {
      if (ai->requires_grad) {
        for (std::size_t i = 0; i < m; ++i) {
          const T* gyrow = yi->grad.data() + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = bi->data.data() + kk * n;
            T acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += gyrow[j] * brow[j];
            ai->grad[i * k + kk] += acc;
          }
        }
      }
      if (bi->requires_grad) {
        for (std::size_t i = 0; i < m; ++i) {
          const T* gyrow = yi->grad.data() + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            T av = ai->data[i * k + kk];
            T* gbrow = bi->grad.data() + kk * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * gyrow[j];
          }
        }
      }
    });
  }
  return y;
}

// ---- layout ops ----------------------------------------------------------------

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(a.shape()));
  std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a.data()[i * m + j];
  Tape<T>* tape = detail::pick_tape("transpose", {a});
  auto y = make_op_result<T>({m, n}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi, n, m] {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ai->grad[i * m + j] += yi->grad[j * n + i];
    });
  }
  return y;
}

// Same values under a new shape; gradient maps back element for element.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  Tape<T>* tape = detail::pick_tape("reshape", {a});
  auto y = make_op_result<T>(std::move(shape), a.data(), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i)
        ai->grad[i] += yi->grad[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> row_slice(const Tensor<T>& a, std::size_t start, std::size_t len) {
  if (a.rank() != 2) throw ShapeError("row_slice: need rank 2, got " + shape_str(a.shape()));
  if (start + len > a.dim(0))
    throw ShapeError("row_slice: rows [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " +
                     std::to_string(a.dim(0)));
  std::size_t m = a.dim(1);
  std::vector<T> out(a.data().begin() + start * m, a.data().begin() + (start + len) * m);
  Tape<T>* tape = detail::pick_tape("row_slice", {a});
  auto y = make_op_result<T>({len, m}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), yi = y.impl();
    tape->record([ai, yi, start, len, m] {
      for (std::size_t i = 0; i < len * m; ++i) ai->grad[start * m + i] += yi->grad[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_cols: no inputs");
  std::size_t n = xs[0].rank() == 2 ? xs[0].dim(0) : 1;
  std::size_t total = 0;
  for (const auto& x : xs) {
    std::size_t rows = x.rank() == 2 ? x.dim(0) : 1;
    if (rows != n)
      throw ShapeError("concat_cols: row mismatch " + shape_str(x.shape()));
    total += x.rank() == 2 ? x.dim(1) : x.dim(0);
  }
  std::vector<T> out(n * total);
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::size_t w = x.rank() == 2 ? x.dim(1) : x.dim(0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = x.data()[i * w + j];
    off += w;
  }
  Tape<T>* tape = nullptr;
  for (const auto& x : xs) {
    Tape<T>* t = detail::pick_tape("concat_cols", {x});
    if (t) {
      if (tape && tape != t)
        throw ContractError("concat_cols: inputs live on different tapes");
      tape = t;
    }
  }
  auto y = make_op_result<T>({n, total}, std::move(out), tape != nullptr, tape);
  if (tape) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& x : xs) impls.push_back(x.impl());
    auto yi = y.impl();
    tape->record([impls, yi, n, total] {
      std::size_t off = 0;
      for (const auto& xi : impls) {
        std::size_t w = xi->shape.size() == 2 ? xi->shape[1] : xi->shape[0];
        if (xi->requires_grad)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j)
              xi->grad[i * w + j] += yi->grad[i * total + off + j];
        off += w;
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no inputs");
  std::size_t d = rows[0].numel();
  std::vector<T> out;
  out.reserve(rows.size() * d);
  Tape<T>* tape = nullptr;
  for (const auto& r : rows) {
    if (r.numel() != d)
      throw ShapeError("stack_rows: width mismatch " + shape_str(r.shape()));
    out.insert(out.end(), r.data().begin(), r.data().end());
    Tape<T>* t = detail::pick_tape("stack_rows", {r});
    if (t) {
      if (tape && tape != t)
        throw ContractError("stack_rows: inputs live on different tapes");
      tape = t;
    }
  }
  auto y = make_op_result<T>({rows.size(), d}, std::move(out), tape != nullptr, tape);
  if (tape) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& r : rows) impls.push_back(r.impl());
    auto yi = y.impl();
    tape->record([impls, yi, d] {
      for (std::size_t r = 0; r < impls.size(); ++r)
        if (impls[r]->requires_grad)
          for (std::size_t j = 0; j < d; ++j)
            impls[r]->grad[j] += yi->grad[r * d + j];
    });
  }
  return y;
}

// x (N x D) + v (D) broadcast over rows
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() != 2 || v.numel() != x.dim(1))
    throw ShapeError("add_rowvec: shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(v.shape()));
  std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x.data()[i * m + j] + v.data()[j];
  Tape<T>* tape = detail::pick_tape("add_rowvec", {x, v});
  auto y = make_op_result(x.shape(), std::move(out), tape != nullptr, tape);
  if (tape) {
    auto xi = x.impl(), vi = v.impl(), yi = y.impl();
    tape->record([xi, vi, yi, n, m] {
      if (xi->requires_grad)
        for (std::size_t i = 0; i < n * m; ++i) xi->grad[i] += yi->grad[i];
      if (vi->requires_grad)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) vi->grad[j] += yi->grad[i * m + j];
    });
  }
  return y;
}

// ---- indexing ----------------------------------------------------------------

template <class T>
Tensor<T> gather(const Tensor<T>& table, const std::vector<int>& indices) {
  if (table.rank() != 2) throw ShapeError("gather: table must be rank 2, got " + shape_str(table.shape()));
  std::size_t k = table.dim(0), d = table.dim(1);
  std::vector<T> out(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    int idx = indices[r];
    if (idx < 0 || std::size_t(idx) >= k)
      throw IndexError("gather: index " + std::to_string(idx) +
                       " outside [0," + std::to_string(k) + ")");
    std::copy_n(table.data().begin() + std::size_t(idx) * d, d, out.begin() + r * d);
  }
  Tape<T>* tape = detail::pick_tape("gather", {table});
  auto y = make_op_result<T>({indices.size(), d}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ti = table.impl(), yi = y.impl();
    tape->record([ti, yi, indices, d] {
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < d; ++j)
          ti->grad[std::size_t(indices[r]) * d + j] += yi->grad[r * d + j];
    });
  }
  return y;
}

template <class T>
Tensor<T> scatter_add(const Tensor<T>& src, const std::vector<int>& indices,
                      std::size_t rows) {
  if (src.rank() != 2 || src.dim(0) != indices.size())
    throw ShapeError("scatter_add: src " + shape_str(src.shape()) + " vs " +
                     std::to_string(indices.size()) + " indices");
  std::size_t d = src.dim(1);
  std::vector<T> out(rows * d, T(0));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    int idx = indices[r];
    if (idx < 0 || std::size_t(idx) >= rows)
      throw IndexError("scatter_add: index " + std::to_string(idx) +
                       " outside [0," + std::to_string(rows) + ")");
    for (std::size_t j = 0; j < d; ++j) out[std::size_t(idx) * d + j] += src.data()[r * d + j];
  }
  Tape<T>* tape = detail::pick_tape("scatter_add", {src});
  auto y = make_op_result<T>({rows, d}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto si = src.impl(), yi = y.impl();
    tape->record([si, yi, indices, d] {
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < d; ++j)
          si->grad[r * d + j] += yi->grad[std::size_t(indices[r]) * d + j];
    });
  }
  return y;
}

// ---- cosine similarity ---------------------------------------------------------

// Rowwise over the last axis. b may be a single row broadcast against a.
// A zero-norm row yields similarity 0 and zero gradient. The denominator is
// sqrt(|a|^2 * |b|^2) so cosine_similarity(x, x) is exactly 1, and the result
// is clamped to [-1, 1] to keep 1 - cos nonnegative.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  std::size_t rows = a.rank() == 2 ? a.dim(0) : 1;
  std::size_t d = a.rank() == 2 ? a.dim(1) : a.dim(0);
  std::size_t brows = b.rank() == 2 ? b.dim(0) : 1;
  std::size_t bd = b.rank() == 2 ? b.dim(1) : b.dim(0);
  bool broadcast = brows == 1 && rows > 1;
  if (bd != d || (!broadcast && brows != rows))
    throw ShapeError("cosine_similarity: shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  std::vector<T> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* ar = a.data().data() + i * d;
    const T* br = b.data().data() + (broadcast ? 0 : i * d);
    T na = 0, nb = 0, dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      na += ar[j] * ar[j];
      nb += br[j] * br[j];
      dot += ar[j] * br[j];
    }
    if (na == T(0) || nb == T(0)) {
      out[i] = T(0);
    } else {
      T c = dot / std::sqrt(na * nb);
      out[i] = std::min(T(1), std::max(T(-1), c));
    }
  }
  Tape<T>* tape = detail::pick_tape("cosine_similarity", {a, b});
  auto y = make_op_result<T>({rows}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    tape->record([ai, bi, yi, rows, d, broadcast] {
      for (std::size_t i = 0; i < rows; ++i) {
        T g = yi->grad[i];
        if (g == T(0)) continue;
        const T* ar = ai->data.data() + i * d;
        const T* br = bi->data.data() + (broadcast ? 0 : i * d);
        T na = 0, nb = 0, dot = 0;
        for (std::size_t j = 0; j < d; ++j) {
          na += ar[j] * ar[j];
          nb += br[j] * br[j];
          dot += ar[j] * br[j];
        }
        if (na == T(0) || nb == T(0)) continue;
        T denom = std::sqrt(na * nb);
        T c = dot / denom;
        if (ai->requires_grad) {
          T* ga = ai->grad.data() + i * d;
          for (std::size_t j = 0; j < d; ++j)
            ga[j] += g * (br[j] / denom - c * ar[j] / na);
        }
        if (bi->requires_grad) {
          T* gb = bi->grad.data() + (broadcast ? 0 : i * d);
          for (std::size_t j = 0; j < d; ++j)
            gb[j] += g * (ar[j] / denom - c * br[j] / nb);
        }
      }
    });
  }
  return y;
}

// ---- convolutions ---------------------------------------------------------------

namespace detail {

inline std::ptrdiff_t floordiv(std::ptrdiff_t a, std::ptrdiff_t b) {
  std::ptrdiff_t q = a / b, r = a % b;
  return r != 0 && (r < 0) != (b < 0) ? q - 1 : q;
}

// valid t range so that 0 <= t*stride + k - pad < limit
inline void conv_t_bounds(std::size_t k, std::size_t pad, std::size_t stride,
                          std::size_t limit, std::size_t t_count,
                          std::size_t& t_lo, std::size_t& t_hi) {
  std::ptrdiff_t off = std::ptrdiff_t(k) - std::ptrdiff_t(pad);
  std::ptrdiff_t s = std::ptrdiff_t(stride);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = floordiv(std::ptrdiff_t(limit) - 1 - off, s) + 1;
  t_lo = std::size_t(std::max<std::ptrdiff_t>(0, lo));
  t_hi = std::size_t(std::clamp<std::ptrdiff_t>(hi, 0, std::ptrdiff_t(t_count)));
}

}  // namespace detail

// x (C_in x T), w (C_out x C_in x K), b (C_out). T_out = (T + 2p - K)/stride + 1.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
    throw ShapeError("conv1d: ranks " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(b.shape()));
  std::size_t cin = x.dim(0), tin = x.dim(1);
  std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || b.dim(0) != cout)
    throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()) + " and bias " + shape_str(b.shape()));
  if (stride == 0) throw ContractError("conv1d: stride must be positive");
  if (tin + 2 * pad < k)
    throw ShapeError("conv1d: input length " + std::to_string(tin) +
                     " too short for kernel " + std::to_string(k));
  std::size_t tout = (tin + 2 * pad - k) / stride + 1;
  std::vector<T> out(cout * tout);
  for (std::size_t co = 0; co < cout; ++co)
    std::fill_n(out.begin() + co * tout, tout, b.data()[co]);
  for (std::size_t co = 0; co < cout; ++co) {
    T* orow = out.data() + co * tout;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xrow = x.data().data() + ci * tin;
      const T* wrow = w.data().data() + (co * cin + ci) * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        T wv = wrow[kk];
        std::size_t t_lo, t_hi;
        detail::conv_t_bounds(kk, pad, stride, tin, tout, t_lo, t_hi);
        std::ptrdiff_t off = std::ptrdiff_t(kk) - std::ptrdiff_t(pad);
        for (std::size_t t = t_lo; t < t_hi; ++t)
          orow[t] += wv * xrow[std::size_t(std::ptrdiff_t(t * stride) + off)];
      }
    }
  }
  Tape<T>* tape = detail::pick_tape("conv1d", {x, w, b});
  auto y = make_op_result<T>({cout, tout}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), yi = y.impl();
    tape->record([xi, wi, bi, yi, cin, tin, cout, k, tout, stride, pad] {
      for (std::size_t co = 0; co < cout; ++co) {
        const T* gyrow = yi->grad.data() + co * tout;
        if (bi->requires_grad) {
          T acc = 0;
          for (std::size_t t = 0; t < tout; ++t) acc += gyrow[t];
          bi->grad[co] += acc;
        }
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T* xrow = xi->data.data() + ci * tin;
          const T* wrow = wi->data.data() + (co * cin + ci) * k;
          T* gxrow = xi->requires_grad ? xi->grad.data() + ci * tin : nullptr;
          T* gwrow = wi->requires_grad ? wi->grad.data() + (co * cin + ci) * k : nullptr;
          for (std::size_t kk = 0; kk < k; ++kk) {
            std::size_t t_lo, t_hi;
            detail::conv_t_bounds(kk, pad, stride, tin, tout, t_lo, t_hi);
            std::ptrdiff_t off = std::ptrdiff_t(kk) - std::ptrdiff_t(pad);
            // Fused single pass; each accumulator keeps its own t order.
            if (gwrow && gxrow) {
              T wv = wrow[kk];
              T acc = 0;
              for (std::size_t t = t_lo; t < t_hi; ++t) {
                std::size_t xj = std::size_t(std::ptrdiff_t(t * stride) + off);
                T gy = gyrow[t];
                acc += gy * xrow[xj];
                gxrow[xj] += wv * gy;
              }
              gwrow[kk] += acc;
            } else if (gwrow) {
              T acc = 0;
              for (std::size_t t = t_lo; t < t_hi; ++t)
                acc += gyrow[t] * xrow[std::size_t(std::ptrdiff_t(t * stride) + off)];
              gwrow[kk] += acc;
            } else if (gxrow) {
              T wv = wrow[kk];
              for (std::size_t t = t_lo; t < t_hi; ++t)
                gxrow[std::size_t(std::ptrdiff_t(t * stride) + off)] += wv * gyrow[t];
            }
          }
        }
      }
    });
  }
  return y;
}

// x (C_in x T), w (C_in x C_out x K), b (C_out).
// T_out = (T - 1)*stride + K - 2p + out_pad.
template <class T>
Tensor<T> conv1d_transpose(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, std::size_t stride,
                           std::size_t pad, std::size_t out_pad) {
  if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
    throw ShapeError("conv1d_transpose: ranks " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(b.shape()));
  std::size_t cin = x.dim(0), tin = x.dim(1);
  std::size_t cout = w.dim(1), k = w.dim(2);
  if (w.dim(0) != cin || b.dim(0) != cout)
    throw ShapeError("conv1d_transpose: weight " + shape_str(w.shape()) +
                     " vs input " + shape_str(x.shape()) + " and bias " +
                     shape_str(b.shape()));
  if (stride == 0) throw ContractError("conv1d_transpose: stride must be positive");
  if (out_pad >= stride)
    throw ContractError("conv1d_transpose: out_pad must be < stride");
  std::ptrdiff_t tout_s = std::ptrdiff_t((tin - 1) * stride + k + out_pad) - 2 * std::ptrdiff_t(pad);
  if (tout_s <= 0) throw ShapeError("conv1d_transpose: nonpositive output length");
  std::size_t tout = std::size_t(tout_s);
  std::vector<T> out(cout * tout);
  for (std::size_t co = 0; co < cout; ++co)
    std::fill_n(out.begin() + co * tout, tout, b.data()[co]);
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T* xrow = x.data().data() + ci * tin;
    for (std::size_t co = 0; co < cout; ++co) {
      T* orow = out.data() + co * tout;
      const T* wrow = w.data().data() + (ci * cout + co) * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        T wv = wrow[kk];
        std::size_t t_lo, t_hi;
        detail::conv_t_bounds(kk, pad, stride, tout, tin, t_lo, t_hi);
        std::ptrdiff_t off = std::ptrdiff_t(kk) - std::ptrdiff_t(pad);
        for (std::size_t t = t_lo; t < t_hi; ++t)
          orow[std::size_t(std::ptrdiff_t(t * stride) + off)] += wv * xrow[t];
      }
    }
  }
  Tape<T>* tape = detail::pick_tape("conv1d_transpose", {x, w, b});
  auto y = make_op_result<T>({cout, tout}, std::move(out), tape != nullptr, tape);
  if (tape) {
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), yi = y.impl();
    tape->record([xi, wi, bi, yi, cin, tin, cout, k, tout, stride, pad] {
      if (bi->requires_grad) {
        for (std::size_t co = 0; co < cout; ++co) {
          const T* gyrow = yi->grad.data() + co * tout;
          T acc = 0;
          for (std::size_t t = 0; t < tout; ++t) acc += gyrow[t];
          bi->grad[co] += acc;
        }
      }
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* xrow = xi->data.data() + ci * tin;
        T* gxrow = xi->requires_grad ? xi->grad.data() + ci * tin : nullptr;
        for (std::size_t co = 0; co < cout; ++co) {
          const T* gyrow = yi->grad.data() + co * tout;
          const T* wrow = wi->data.data() + (ci * cout + co) * k;
          T* gwrow = wi->requires_grad ? wi->grad.data() + (ci * cout + co) * k : nullptr;
          for (std::size_t kk = 0; kk < k; ++kk) {
            std::size_t t_lo, t_hi;
            detail::conv_t_bounds(kk, pad, stride, tout, tin, t_lo, t_hi);
            std::ptrdiff_t off = std::ptrdiff_t(kk) - std::ptrdiff_t(pad);
            // Fused single pass; each accumulator keeps its own t order.
            if (gwrow && gxrow) {
              T wv = wrow[kk];
              T acc = 0;
              for (std::size_t t = t_lo; t < t_hi; ++t) {
                T gy = gyrow[std::size_t(std::ptrdiff_t(t * stride) + off)];
                acc += xrow[t] * gy;
                gxrow[t] += wv * gy;
              }
              gwrow[kk] += acc;
            } else if (gwrow) {
              T acc = 0;
              for (std::size_t t = t_lo; t < t_hi; ++t)
                acc += xrow[t] * gyrow[std::size_t(std::ptrdiff_t(t * stride) + off)];
              gwrow[kk] += acc;
            } else if (gxrow) {
              T wv = wrow[kk];
              for (std::size_t t = t_lo; t < t_hi; ++t)
                gxrow[t] += wv * gyrow[std::size_t(std::ptrdiff_t(t * stride) + off)];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---- dispatcher -----------------------------------------------------------------

// Uniform entry point over the canonical op set, used by the property tests.
// Convolutions run with stride 1 and no padding; gather/scatter_add read
// their integer arguments from the trailing tensor.
template <class T>
Tensor<T> forward_op(const std::string& name, const std::vector<Tensor<T>>& in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw ContractError("forward_op(" + name + "): expected " +
                          std::to_string(n) + " inputs, got " +
                          std::to_string(in.size()));
  };
  auto to_indices = [](const Tensor<T>& t) {
    std::vector<int> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(std::llround(double(t.data()[i])));
    return idx;
  };
  if (name == "add") { need(2); return add(in[0], in[1]); }
  if (name == "sub") { need(2); return sub(in[0], in[1]); }
  if (name == "mul") { need(2); return mul(in[0], in[1]); }
  if (name == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (name == "conv1d") { need(3); return conv1d(in[0], in[1], in[2], 1, 0); }
  if (name == "conv1d_transpose") { need(3); return conv1d_transpose(in[0], in[1], in[2], 1, 0, 0); }
  if (name == "relu") { need(1); return relu(in[0]); }
  if (name == "tanh") { need(1); return tanh(in[0]); }
  if (name == "sigmoid") { need(1); return sigmoid(in[0]); }
  if (name == "softmax") { need(1); return softmax(in[0]); }
  if (name == "log") { need(1); return log(in[0]); }
  if (name == "exp") { need(1); return exp(in[0]); }
  if (name == "sum") { need(1); return sum(in[0]); }
  if (name == "mean") { need(1); return mean(in[0]); }
  if (name == "l1") { need(1); return l1(in[0]); }
  if (name == "l2norm") { need(1); return l2norm(in[0]); }
  if (name == "cosine_similarity") { need(2); return cosine_similarity(in[0], in[1]); }
  if (name == "gather") { need(2); return gather(in[0], to_indices(in[1])); }
  if (name == "scatter_add") { need(3); return scatter_add(in[0], to_indices(in[1]), std::size_t(std::llround(double(in[2].item())))); }
  if (name == "round_ste") { need(1); return round_ste(in[0]); }
  throw ContractError("forward_op: unknown op '" + name + "'");
}

// ---- grad_check -----------------------------------------------------------------

// Central-difference verification of the recorded backward pass. Both the
// analytic and the numeric evaluation run under the straight-through
// surrogate so round_ste and the quantizers differentiate the same smooth
// function the finite differences probe. Returns the max relative error
// |analytic - numeric| / (|numeric| + 1e-12).
template <class T>
double grad_check(const std::function<Tensor<T>(Tape<T>&, Tensor<T>&)>& f,
                  const Shape& shape, const std::vector<T>& x0, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw ContractError("grad_check: eps " + std::to_string(eps) +
                        " outside [1e-7, 1e-3]");
  SteSurrogateGuard guard;
  std::vector<T> analytic;
  {
    Tape<T> tape;
    auto x = Tensor<T>::param(tape, shape, x0);
    auto loss = f(tape, x);
    if (loss.numel() != 1)
      throw ContractError("grad_check: f must return a scalar, got shape " +
                          shape_str(loss.shape()));
    tape.backward(loss);
    analytic = x.grad();
  }
  auto eval = [&](const std::vector<T>& xv) {
    Tape<T> tape;
    auto x = Tensor<T>::param(tape, shape, xv);
    return double(f(tape, x).item());
  };
  double worst = 0;
  std::vector<T> xv = x0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    T keep = xv[i];
    xv[i] = keep + T(eps);
    double up = eval(xv);
    xv[i] = keep - T(eps);
    double dn = eval(xv);
    xv[i] = keep;
    double numeric = (up - dn) / (2 * eps);
    double rel = std::abs(double(analytic[i]) - numeric) / (std::abs(numeric) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace tapf

#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "causalvln/diffcore/tape.hpp"

namespace causalvln {

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands recorded on different tapes");
  return *a.tape;
}

// out(n x m) += a(n x k) * b(k x m)
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// out(n x m) += a(n x k) * b(m x k)^T
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = A + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      C[i * m + j] += s;
    }
  }
}

// out(k x m) += a(n x k)^T * b(n x m)
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = B + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      double* crow = C + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a(n x k) * b(k x m)
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.cols() == B.rows(), "matmul: " + A.shape_string() + " * " + B.shape_string());
  Tensor out(A.rows(), B.cols());
  detail::gemm_nn(A, B, out);
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), rg, [ai = a.id, bi = b.id](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) detail::gemm_nt(g, tp.value(bi), tp.grad_slot(ai));
    if (tp.requires_grad(bi)) detail::gemm_tn(tp.value(ai), g, tp.grad_slot(bi));
  });
}

/// a(n x k) * b(m x k)^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.cols() == B.cols(), "matmul_nt: " + A.shape_string() + " * (" + B.shape_string() + ")^T");
  Tensor out(A.rows(), B.rows());
  detail::gemm_nt(A, B, out);
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), rg, [ai = a.id, bi = b.id](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) detail::gemm_nn(g, tp.value(bi), tp.grad_slot(ai));
    if (tp.requires_grad(bi)) detail::gemm_tn(g, tp.value(ai), tp.grad_slot(bi));
  });
}

/// a(n x k)^T * b(n x m)
inline Var matmul_tn(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require(A.rows() == B.rows(), "matmul_tn: (" + A.shape_string() + ")^T * " + B.shape_string());
  Tensor out(A.cols(), B.cols());
  detail::gemm_tn(A, B, out);
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), rg, [ai = a.id, bi = b.id](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) detail::gemm_nt(tp.value(bi), g, tp.grad_slot(ai));
    if (tp.requires_grad(bi)) detail::gemm_nn(tp.value(ai), g, tp.grad_slot(bi));
  });
}

/// Adds a 1 x m row to every row of x(n x m).
inline Var add_row(Var x, Var r) {
  Tape& t = detail::same_tape(x, r);
  const Tensor& X = x.value();
  const Tensor& R = r.value();
  detail::require(R.rows() == 1 && R.cols() == X.cols(), "add_row: " + X.shape_string() + " + " + R.shape_string());
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += R[j];
  const bool rg = t.requires_grad(x.id) || t.requires_grad(r.id);
  return t.push(std::move(out), rg, [xi = x.id, ri = r.id](Tape& tp, const Tensor& g) {
    tp.accumulate(xi, g);
    if (tp.requires_grad(ri)) {
      Tensor& gr = tp.grad_slot(ri);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
    }
  });
}

/// x W (+ b): x(L x d_in), W(d_in x d_out), b(1 x d_out).
inline Var linear(Var x, Var W, std::optional<Var> b = std::nullopt) {
  detail::require(x.cols() == W.rows(), "linear: input " + x.value().shape_string() + " vs weight " +
                                            W.value().shape_string());
  Var y = matmul(x, W);
  if (b) y = add_row(y, *b);
  return y;
}

inline Var transpose(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  Tensor out(X.cols(), X.rows());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(j, i) = X(i, j);
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(j, i) += g(i, j);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require(a.value().same_shape(b.value()), "add: " + a.value().shape_string() + " + " + b.value().shape_string());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), rg, [ai = a.id, bi = b.id](Tape& tp, const Tensor& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require(a.value().same_shape(b.value()), "sub: " + a.value().shape_string() + " - " + b.value().shape_string());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), rg, [ai = a.id, bi = b.id](Tape& tp, const Tensor& g) {
    tp.accumulate(ai, g);
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_slot(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require(a.value().same_shape(b.value()), "mul: " + a.value().shape_string() + " * " + b.value().shape_string());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), rg, [ai = a.id, bi = b.id](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_slot(ai);
      const Tensor& B = tp.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_slot(bi);
      const Tensor& A = tp.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

inline Var scale(Var x, double s) {
  Tape& t = *x.tape;
  Tensor out = detail::map(x.value(), [s](double v) { return v * s; });
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, s](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

/// 1 - x
inline Var one_minus(Var x) {
  Tape& t = *x.tape;
  Tensor out = detail::map(x.value(), [](double v) { return 1.0 - v; });
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
  });
}

inline Var tanh(Var x) {
  Tape& t = *x.tape;
  Tensor out = detail::map(x.value(), [](double v) { return std::tanh(v); });
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, out_id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    const Tensor& y = tp.value(out_id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  Tape& t = *x.tape;
  Tensor out = detail::map(x.value(), sigmoid_scalar);
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, out_id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    const Tensor& y = tp.value(out_id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

/// GELU, tanh approximation.
inline Var gelu(Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  Tape& t = *x.tape;
  Tensor out = detail::map(x.value(), [](double v) {
    return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  });
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    const Tensor& X = tp.value(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = X[i];
      const double u = c * (v + 0.044715 * v * v * v);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Repeats a 1 x m row n times.
inline Var broadcast_rows(Var r, std::size_t n) {
  Tape& t = *r.tape;
  const Tensor& R = r.value();
  detail::require(R.rows() == 1, "broadcast_rows expects a single row, got " + R.shape_string());
  detail::require(n > 0, "broadcast_rows: zero rows");
  Tensor out(n, R.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < R.cols(); ++j) out(i, j) = R[j];
  return t.push(std::move(out), t.requires_grad(r.id), [ri = r.id](Tape& tp, const Tensor& g) {
    Tensor& gr = tp.grad_slot(ri);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
  });
}

/// Repeats an n x 1 column m times.
inline Var broadcast_cols(Var c, std::size_t m) {
  Tape& t = *c.tape;
  const Tensor& C = c.value();
  detail::require(C.cols() == 1, "broadcast_cols expects a single column, got " + C.shape_string());
  detail::require(m > 0, "broadcast_cols: zero columns");
  Tensor out(C.rows(), m);
  for (std::size_t i = 0; i < C.rows(); ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = C[i];
  return t.push(std::move(out), t.requires_grad(c.id), [ci = c.id](Tape& tp, const Tensor& g) {
    Tensor& gc = tp.grad_slot(ci);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gc[i] += g(i, j);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat_rows: mixed tapes");
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || t.requires_grad(p.id);
  }
  Tensor out(rows, cols);
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + off * cols);
    off += v.rows();
    ids.push_back(p.id);
  }
  return t.push(std::move(out), rg, [ids = std::move(ids)](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t n = tp.value(id).size();
      if (tp.requires_grad(id)) {
        Tensor& gi = tp.grad_slot(id);
        for (std::size_t k = 0; k < n; ++k) gi[k] += g[off + k];
      }
      off += n;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat_cols: mixed tapes");
    detail::require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || t.requires_grad(p.id);
  }
  Tensor out(rows, cols);
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    off += v.cols();
    ids.push_back(p.id);
  }
  return t.push(std::move(out), rg, [ids = std::move(ids)](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t c = tp.value(id).cols();
      if (tp.requires_grad(id)) {
        Tensor& gi = tp.grad_slot(id);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) gi(i, j) += g(i, off + j);
      }
      off += c;
    }
  });
}

/// Rows [begin, end).
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require(begin < end && end <= X.rows(), "slice_rows: bad range");
  const std::size_t cols = X.cols();
  Tensor out(end - begin, cols,
             std::vector<double>(X.data().begin() + begin * cols, X.data().begin() + end * cols));
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, begin, cols](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[begin * cols + k] += g[k];
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require(begin < end && end <= X.cols(), "slice_cols: bad range for " + X.shape_string());
  Tensor out(X.rows(), end - begin);
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = X(i, j);
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, begin](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j + begin) += g(i, j);
  });
}

inline Var row(Var x, std::size_t i) { return slice_rows(x, i, i + 1); }

/// Selects rows of a table by index (embedding lookup). Repeated indices accumulate.
inline Var gather_rows(Var table, const std::vector<std::size_t>& idx) {
  Tape& t = *table.tape;
  const Tensor& T = table.value();
  detail::require(!idx.empty(), "gather_rows: empty index list");
  Tensor out(idx.size(), T.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= T.rows()) throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    for (std::size_t j = 0; j < T.cols(); ++j) out(i, j) = T(idx[i], j);
  }
  return t.push(std::move(out), t.requires_grad(table.id), [ti = table.id, idx](Tape& tp, const Tensor& g) {
    Tensor& gt = tp.grad_slot(ti);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gt(idx[i], j) += g(i, j);
  });
}

/// Selects columns of a 1 x n row by index.
inline Var gather_cols(Var x, const std::vector<std::size_t>& idx) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require(X.rows() == 1, "gather_cols expects a row vector");
  detail::require(!idx.empty(), "gather_cols: empty index list");
  Tensor out(1, idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= X.cols()) throw std::out_of_range("gather_cols: index out of range");
    out[i] = X[idx[i]];
  }
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, idx](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
  });
}

inline Var sum(Var x) {
  Tape& t = *x.tape;
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return t.push(Tensor(1, 1, s), t.requires_grad(x.id), [xi = x.id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

// ---------------------------------------------------------------------------
// Normalization and probability

using Mask = std::vector<bool>;  // true = admitted

/// Row-wise softmax. `mask` (length = cols) excludes columns; a row with no
/// admitted column is an error.
inline Var softmax_rows(Var x, const Mask* mask = nullptr) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  if (mask) detail::require(mask->size() == X.cols(), "softmax mask length mismatch");
  Tensor out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < X.cols(); ++j)
      if (!mask || (*mask)[j]) mx = std::max(mx, X(i, j));
    if (!std::isfinite(mx)) throw std::domain_error("softmax: every entry of a row is masked");
    double z = 0.0;
    for (std::size_t j = 0; j < X.cols(); ++j) {
      const double e = (!mask || (*mask)[j]) ? std::exp(X(i, j) - mx) : 0.0;
      out(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) /= z;
  }
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.requires_grad(x.id), [xi = x.id, out_id](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(xi);
    const Tensor& y = tp.value(out_id);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

/// Row-wise layer normalization with per-column gain and bias (both 1 x m).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::require(gain.rows() == 1 && gain.cols() == X.cols(), "layer_norm gain shape");
  detail::require(bias.rows() == 1 && bias.cols() == X.cols(), "layer_norm bias shape");
  const std::size_t n = X.rows(), m = X.cols();
  Tensor xhat(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += X(i, j);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (X(i, j) - mean) * (X(i, j) - mean);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) xhat(i, j) = (X(i, j) - mean) * inv_std[i];
  }
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = xhat(i, j) * G[j] + B[j];
  const bool rg = t.requires_grad(x.id) || t.requires_grad(gain.id) || t.requires_grad(bias.id);
  return t.push(std::move(out), rg,
                [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape& tp, const Tensor& g) {
                  const std::size_t n = g.rows(), m = g.cols();
                  const Tensor& G = tp.value(gi);
                  if (tp.requires_grad(gi)) {
                    Tensor& gg = tp.grad_slot(gi);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j) gg[j] += g(i, j) * xhat(i, j);
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor& gb = tp.grad_slot(bi);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j) gb[j] += g(i, j);
                  }
                  if (tp.requires_grad(xi)) {
                    Tensor& gx = tp.grad_slot(xi);
                    for (std::size_t i = 0; i < n; ++i) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < m; ++j) {
                        const double d = g(i, j) * G[j];
                        s1 += d;
                        s2 += d * xhat(i, j);
                      }
                      s1 /= static_cast<double>(m);
                      s2 /= static_cast<double>(m);
                      for (std::size_t j = 0; j < m; ++j)
                        gx(i, j) += inv_std[i] * (g(i, j) * G[j] - s1 - xhat(i, j) * s2);
                    }
                  }
                });
}

/// Negative log-likelihood of `target` under softmax(logits) for a 1 x n row.
/// Masked-out columns are excluded from the normalizer.
inline Var cross_entropy(Var logits, std::size_t target, const Mask* mask = nullptr) {
  Tape& t = *logits.tape;
  const Tensor& X = logits.value();
  detail::require(X.rows() == 1, "cross_entropy expects a single row of logits");
  if (target >= X.cols()) throw std::out_of_range("cross_entropy: target index out of range");
  if (mask) {
    detail::require(mask->size() == X.cols(), "cross_entropy mask length mismatch");
    if (!(*mask)[target]) throw std::domain_error("cross_entropy: target is masked out");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < X.cols(); ++j)
    if (!mask || (*mask)[j]) mx = std::max(mx, X[j]);
  double z = 0.0;
  Tensor prob(1, X.cols());
  for (std::size_t j = 0; j < X.cols(); ++j) {
    prob[j] = (!mask || (*mask)[j]) ? std::exp(X[j] - mx) : 0.0;
    z += prob[j];
  }
  for (std::size_t j = 0; j < X.cols(); ++j) prob[j] /= z;
  const double loss = -(X[target] - mx - std::log(z));
  return t.push(Tensor(1, 1, loss), t.requires_grad(logits.id),
                [xi = logits.id, target, prob = std::move(prob)](Tape& tp, const Tensor& g) {
                  Tensor& gx = tp.grad_slot(xi);
                  for (std::size_t j = 0; j < prob.size(); ++j)
                    gx[j] += g[0] * (prob[j] - (j == target ? 1.0 : 0.0));
                });
}

/// softmax(Q K^T / sqrt(d_h)) V with an optional key mask (length M).
inline Var attention(Var Q, Var K, Var V, const Mask* mask = nullptr) {
  detail::require(Q.cols() == K.cols(), "attention: query width " + std::to_string(Q.cols()) +
                                            " differs from key width " + std::to_string(K.cols()));
  detail::require(K.rows() == V.rows(), "attention: key and value counts differ");
  if (mask) detail::require(mask->size() == K.rows(), "attention: mask length mismatch");
  Var logits = scale(matmul_nt(Q, K), 1.0 / std::sqrt(static_cast<double>(Q.cols())));
  return matmul(softmax_rows(logits, mask), V);
}

}  // namespace causalvln

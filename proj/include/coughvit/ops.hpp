#pragma once

// Differentiable operations on Tape-recorded values. Every op checks its
// operand shapes, rejects non-finite results and registers an exact gradient.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "coughvit/tensor.hpp"

namespace coughvit::ops {

inline constexpr double kLayerNormEps = 1e-6;
// sqrt(2/pi), the tanh-approximation constant for GELU.
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
}

inline void check_shape(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) throw InputError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline Tape& tape_of(std::initializer_list<Var> in) {
  Tape* t = in.begin()->tape;
  for (const Var& v : in)
    if (v.tape != t) throw InputError("operands recorded on different tapes");
  return *t;
}

inline Var emit(const char* op, Tensor out, std::initializer_list<Var> in, Tape::BackwardFn fn) {
  check_finite(out, op);
  Tape& t = tape_of(in);
  bool ng = false;
  for (const Var& v : in) ng = ng || t.needs_grad(v);
  return t.push(std::move(out), ng, ng ? std::move(fn) : Tape::BackwardFn{});
}

template <int Order>
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Order>>;
template <int Order>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Order>>;
using RowMap = MatMap<Eigen::RowMajor>;
using ConstRowMap = ConstMatMap<Eigen::RowMajor>;

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  RowMap(c, M, N).noalias() += ConstRowMap(a, M, K) * ConstRowMap(b, K, N);
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  RowMap(c, M, N).noalias() += ConstRowMap(a, M, K) * ConstRowMap(b, N, K).transpose();
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  RowMap(c, M, N).noalias() += ConstRowMap(a, K, M).transpose() * ConstRowMap(b, K, N);
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw InputError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- linear algebra --------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  detail::check_shape(A.shape()[1] == B.shape()[0], "matmul", A.shape(), B.shape());
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  Tensor out = Tensor::matrix(m, n);
  detail::gemm_nn(A.data().data(), B.data().data(), out.data().data(), m, k, n);
  Tape& t = *a.tape;
  return detail::emit("matmul", std::move(out), {a, b}, [&t, a, b, m, k, n](const Tensor&, const Tensor& g) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (t.needs_grad(a)) detail::gemm_nt(g.data().data(), B.data().data(), t.grad_buffer(a.id).data().data(), m, n, k);
    if (t.needs_grad(b)) detail::gemm_tn(A.data().data(), g.data().data(), t.grad_buffer(b.id).data().data(), m, k, n);
  });
}

/// [m,k] x [n,k]^T -> [m,n]
inline Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_matrix(A, "matmul_nt");
  detail::require_matrix(B, "matmul_nt");
  detail::check_shape(A.shape()[1] == B.shape()[1], "matmul_nt", A.shape(), B.shape());
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[0];
  Tensor out = Tensor::matrix(m, n);
  detail::gemm_nt(A.data().data(), B.data().data(), out.data().data(), m, k, n);
  Tape& t = *a.tape;
  return detail::emit("matmul_nt", std::move(out), {a, b}, [&t, a, b, m, k, n](const Tensor&, const Tensor& g) {
    // dA = G B, dB = G^T A
    if (t.needs_grad(a)) detail::gemm_nn(g.data().data(), b.value().data().data(), t.grad_buffer(a.id).data().data(), m, n, k);
    if (t.needs_grad(b)) detail::gemm_tn(g.data().data(), a.value().data().data(), t.grad_buffer(b.id).data().data(), m, n, k);
  });
}

/// x[m,k] W[k,n] + bias[n]
inline Var linear(Var x, Var w, Var bias) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& B = bias.value();
  detail::require_matrix(X, "linear");
  detail::require_matrix(W, "linear");
  detail::check_shape(X.shape()[1] == W.shape()[0], "linear", X.shape(), W.shape());
  detail::check_shape(B.size() == W.shape()[1], "linear", W.shape(), B.shape());
  const std::size_t m = X.shape()[0], k = X.shape()[1], n = W.shape()[1];
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = B[j];
  detail::gemm_nn(X.data().data(), W.data().data(), out.data().data(), m, k, n);
  Tape& t = *x.tape;
  return detail::emit("linear", std::move(out), {x, w, bias}, [&t, x, w, bias, m, k, n](const Tensor&, const Tensor& g) {
    if (t.needs_grad(x)) detail::gemm_nt(g.data().data(), w.value().data().data(), t.grad_buffer(x.id).data().data(), m, n, k);
    if (t.needs_grad(w)) detail::gemm_tn(x.value().data().data(), g.data().data(), t.grad_buffer(w.id).data().data(), m, k, n);
    if (t.needs_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_matrix(A, "transpose");
  const std::size_t m = A.shape()[0], n = A.shape()[1];
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
  Tape& t = *a.tape;
  return detail::emit("transpose", std::move(out), {a}, [&t, a, m, n](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
  });
}

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::check_shape(A.shape() == B.shape(), "add", A.shape(), B.shape());
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  Tape& t = *a.tape;
  return detail::emit("add", std::move(out), {a, b}, [&t, a, b](const Tensor&, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      Tensor& gv = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::check_shape(A.shape() == B.shape(), "sub", A.shape(), B.shape());
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  Tape& t = *a.tape;
  return detail::emit("sub", std::move(out), {a, b}, [&t, a, b](const Tensor&, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::check_shape(A.shape() == B.shape(), "mul", A.shape(), B.shape());
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  Tape& t = *a.tape;
  return detail::emit("mul", std::move(out), {a, b}, [&t, a, b](const Tensor&, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      const Tensor& B = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      const Tensor& A = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

/// a[..., n] + row[n], broadcast over all leading positions.
inline Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  detail::check_shape(R.size() == A.cols(), "add_row", A.shape(), R.shape());
  Tensor out = A;
  const std::size_t n = A.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += R[i % n];
  Tape& t = *a.tape;
  return detail::emit("add_row", std::move(out), {a, row}, [&t, a, row, n](const Tensor&, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(row)) {
      Tensor& gr = t.grad_buffer(row.id);
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % n] += g[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  Tape& t = *a.tape;
  return detail::emit("scale", std::move(out), {a}, [&t, a, s](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var square(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= v;
  Tape& t = *a.tape;
  return detail::emit("square", std::move(out), {a}, [&t, a](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    const Tensor& A = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * A[i] * g[i];
  });
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3))).
inline Var gelu(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double x = A[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluCubic * x * x * x)));
  }
  Tape& t = *a.tape;
  return detail::emit("gelu", std::move(out), {a}, [&t, a](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    const Tensor& A = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = A[i];
      const double th = std::tanh(kGeluC * (x + kGeluCubic * x * x * x));
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluCubic * x * x);
      ga[i] += d * g[i];
    }
  });
}

// ---- reductions ------------------------------------------------------------

// Extended-precision accumulator: scalar losses are means over thousands of
// terms, and plain double summation leaves enough rounding noise to swamp
// finite-difference checks of small gradients.
inline Var sum(Var a) {
  long double s = 0.0L;
  for (double v : a.value().data()) s += v;
  Tape& t = *a.tape;
  return detail::emit("sum", Tensor::scalar(static_cast<double>(s)), {a}, [&t, a](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (double& v : ga.data()) v += g[0];
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw InputError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Mean over rows: [m,n] -> [1,n].
inline Var mean_rows(Var a) {
  const Tensor& A = a.value();
  detail::require_matrix(A, "mean_rows");
  const std::size_t m = A.shape()[0], n = A.shape()[1];
  if (m == 0) throw InputError("mean_rows: no rows");
  Tensor out = Tensor::matrix(1, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += A.at(i, j);
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.data()) v *= inv;
  Tape& t = *a.tape;
  return detail::emit("mean_rows", std::move(out), {a}, [&t, a, m, n, inv](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g[j] * inv;
  });
}

/// Single element as a scalar.
inline Var select(Var a, std::size_t index) {
  const Tensor& A = a.value();
  if (index >= A.size()) throw InputError("select: index out of range");
  Tape& t = *a.tape;
  return detail::emit("select", Tensor::scalar(A[index]), {a}, [&t, a, index](const Tensor&, const Tensor& g) {
    t.grad_buffer(a.id)[index] += g[0];
  });
}

// ---- structural ------------------------------------------------------------

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value();
  out.reshape(std::move(shape));
  Tape& t = *a.tape;
  return detail::emit("reshape", std::move(out), {a}, [&t, a](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Stack matrices with equal column counts vertically.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InputError("concat_rows: no operands");
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    detail::require_matrix(p.value(), "concat_rows");
    detail::check_shape(p.value().cols() == n, "concat_rows", parts.front().shape(), p.shape());
    if (p.tape != parts.front().tape) throw InputError("operands recorded on different tapes");
    m += p.value().rows();
  }
  Tensor out = Tensor::matrix(m, n);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  detail::check_finite(out, "concat_rows");
  Tape& t = *parts.front().tape;
  bool ng = false;
  for (const Var& p : parts) ng = ng || t.needs_grad(p);
  return t.push(std::move(out), ng, [&t, parts](const Tensor&, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t sz = p.value().size();
      if (t.needs_grad(p)) {
        Tensor& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
      }
      off += sz;
    }
  });
}

/// Place matrices with equal row counts side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InputError("concat_cols: no operands");
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    detail::check_shape(p.value().rows() == m, "concat_cols", parts.front().shape(), p.shape());
    if (p.tape != parts.front().tape) throw InputError("operands recorded on different tapes");
    n += p.value().cols();
  }
  Tensor out = Tensor::matrix(m, n);
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out.at(i, c0 + j) = P.at(i, j);
    c0 += P.cols();
  }
  Tape& t = *parts.front().tape;
  bool ng = false;
  for (const Var& p : parts) ng = ng || t.needs_grad(p);
  return t.push(std::move(out), ng, [&t, parts, m](const Tensor&, const Tensor& g) {
    std::size_t c0 = 0;
    for (const Var& p : parts) {
      const std::size_t pc = p.value().cols();
      if (t.needs_grad(p)) {
        Tensor& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp.at(i, j) += g.at(i, c0 + j);
      }
      c0 += pc;
    }
  });
}

/// Columns [start, start+count) of a matrix.
inline Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  detail::require_matrix(A, "slice_cols");
  if (start + count > A.cols()) throw InputError("slice_cols: range exceeds " + shape_str(A.shape()));
  const std::size_t m = A.rows();
  Tensor out = Tensor::matrix(m, count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = A.at(i, start + j);
  Tape& t = *a.tape;
  return detail::emit("slice_cols", std::move(out), {a}, [&t, a, start, count, m](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) ga.at(i, start + j) += g.at(i, j);
  });
}

/// out[i] = a[index[i]]; repeated indices are allowed and their gradients add.
inline Var gather_rows(Var a, const std::vector<std::size_t>& index) {
  const Tensor& A = a.value();
  detail::require_matrix(A, "gather_rows");
  const std::size_t n = A.cols();
  Tensor out = Tensor::matrix(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= A.rows()) throw InputError("gather_rows: index out of range");
    std::copy_n(A.row(index[i]).begin(), n, out.row(i).begin());
  }
  Tape& t = *a.tape;
  return detail::emit("gather_rows", std::move(out), {a}, [&t, a, index, n](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at(index[i], j) += g.at(i, j);
  });
}

/// Zero matrix of n_rows with row i of `a` written to row index[i].
inline Var scatter_rows(Var a, const std::vector<std::size_t>& index, std::size_t n_rows) {
  const Tensor& A = a.value();
  detail::require_matrix(A, "scatter_rows");
  if (index.size() != A.rows()) throw InputError("scatter_rows: index count does not match rows");
  const std::size_t n = A.cols();
  Tensor out = Tensor::matrix(n_rows, n);
  std::vector<bool> seen(n_rows, false);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n_rows || seen[index[i]]) throw InputError("scatter_rows: indices must be distinct and in range");
    seen[index[i]] = true;
    std::copy_n(A.row(i).begin(), n, out.row(index[i]).begin());
  }
  Tape& t = *a.tape;
  return detail::emit("scatter_rows", std::move(out), {a}, [&t, a, index, n](const Tensor&, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(index[i], j);
  });
}

// ---- normalizations --------------------------------------------------------

namespace detail {

inline void softmax_rows(const Tensor& x, Tensor& out, const std::vector<std::uint8_t>* allow) {
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (allow && !(*allow)[i * n + j]) continue;
      mx = std::max(mx, x.at(i, j));
      any = true;
    }
    if (!any) throw InputError("softmax: row " + std::to_string(i) + " has no admissible entries");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = (allow && !(*allow)[i * n + j]) ? 0.0 : std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= s;
  }
}

inline void softmax_backward(const Tensor& p, const Tensor& g, Tensor& gx) {
  const std::size_t m = p.rows(), n = p.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * p.at(i, j);
    for (std::size_t j = 0; j < n; ++j) gx.at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
  }
}

}  // namespace detail

/// Softmax over the last axis, max-subtracted.
inline Var softmax(Var a) {
  Tensor out(a.value().shape());
  detail::softmax_rows(a.value(), out, nullptr);
  Tape& t = *a.tape;
  return detail::emit("softmax", std::move(out), {a}, [&t, a](const Tensor& p, const Tensor& g) {
    detail::softmax_backward(p, g, t.grad_buffer(a.id));
  });
}

/// Softmax restricted to entries with allow[i*cols+j] != 0. Excluded entries
/// get probability exactly 0; every row needs at least one admissible entry.
inline Var masked_softmax(Var a, std::vector<std::uint8_t> allow) {
  const Tensor& A = a.value();
  detail::check_shape(allow.size() == A.size(), "masked_softmax", A.shape(), Shape{allow.size()});
  Tensor out(A.shape());
  detail::softmax_rows(A, out, &allow);
  Tape& t = *a.tape;
  return detail::emit("masked_softmax", std::move(out), {a}, [&t, a](const Tensor& p, const Tensor& g) {
    detail::softmax_backward(p, g, t.grad_buffer(a.id));
  });
}

inline Var log_softmax(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, A.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(A.at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = A.at(i, j) - lse;
  }
  Tape& t = *a.tape;
  return detail::emit("log_softmax", std::move(out), {a}, [&t, a, m, n](const Tensor& y, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g.at(i, j);
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gs;
    }
  });
}

/// Layer normalization over the last axis with learnable gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  detail::check_shape(gain.value().size() == n && bias.value().size() == n, "layer_norm", X.shape(), gain.shape());
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  Tensor out(X.shape());
  Tensor xhat(X.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = X.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat.at(i, j) = (X.at(i, j) - mu) * inv_std[i];
      out.at(i, j) = xhat.at(i, j) * G[j] + B[j];
    }
  }
  Tape& t = *x.tape;
  return detail::emit("layer_norm", std::move(out), {x, gain, bias},
                      [&t, x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                          const Tensor&, const Tensor& g) {
    const Tensor& G = gain.value();
    if (t.needs_grad(gain) || t.needs_grad(bias)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (t.needs_grad(gain)) t.grad_buffer(gain.id)[j] += g.at(i, j) * xhat.at(i, j);
          if (t.needs_grad(bias)) t.grad_buffer(bias.id)[j] += g.at(i, j);
        }
    }
    if (!t.needs_grad(x)) return;
    Tensor& gx = t.grad_buffer(x.id);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double dxh = g.at(i, j) * G[j];
        s1 += dxh;
        s2 += dxh * xhat.at(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double dxh = g.at(i, j) * G[j];
        gx.at(i, j) += inv_std[i] * (dxh - s1 * inv_n - xhat.at(i, j) * s2 * inv_n);
      }
    }
  });
}

/// Negative log-likelihood of `label` under softmax(logits[1,C]).
inline Var cross_entropy(Var logits, std::size_t label) {
  if (label >= logits.value().cols()) throw InputError("cross_entropy: label out of range");
  return scale(select(log_softmax(logits), label), -1.0);
}

}  // namespace coughvit::ops

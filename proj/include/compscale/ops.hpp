#pragma once

// Differentiable ops over Tape. Every op validates shapes, checks that its
// forward output is finite and records a backward closure that accumulates
// into the gradient buffers of its inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "compscale/errors.hpp"
#include "compscale/tape.hpp"
#include "compscale/tensor.hpp"

namespace compscale {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMatrix<T>> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename T>
Eigen::Map<const RowMatrix<T>> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> as_array(Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> as_array(const Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

enum class Broadcast { kSame, kScalar, kRow };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (b.rank() == 1 && b.size() == a.cols()) return Broadcast::kRow;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                   shape_string(a.shape()));
}

template <typename T>
std::size_t broadcast_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame:
      return i;
    case Broadcast::kScalar:
      return 0;
    case Broadcast::kRow:
      return i % cols;
  }
  return i;
}

}  // namespace detail

// a[m x k] . b[k x n]
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_string(A.shape()) + " x " +
                     shape_string(B.shape()));
  }
  Tensor<T> out({m, n}, Uninitialized{});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(A, m, k) * detail::as_matrix(B, k, n);
  detail::check_finite(out, "matmul");
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b, m, k, n](Tape<T>& t, Var, const Tensor<T>& g) {
    const auto G = detail::as_matrix(g, m, n);
    if (t.requires_grad(a)) {
      detail::as_matrix(t.grad_buffer(a), m, k).noalias() +=
          G * detail::as_matrix(t.value(b), k, n).transpose();
    }
    if (t.requires_grad(b)) {
      detail::as_matrix(t.grad_buffer(b), k, n).noalias() +=
          detail::as_matrix(t.value(a), m, k).transpose() * G;
    }
  });
}

// x[m x k] . w[n x k]^T, the layout of a linear layer with n output rows.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& W = tape.value(w);
  detail::require_rank2(X, "linear");
  detail::require_rank2(W, "linear");
  const std::size_t m = X.dim(0), k = X.dim(1), n = W.dim(0);
  if (W.dim(1) != k) {
    throw ShapeError("linear: input width " + std::to_string(k) + " does not match weight " +
                     shape_string(W.shape()));
  }
  Tensor<T> out({m, n}, Uninitialized{});
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(X, m, k) * detail::as_matrix(W, n, k).transpose();
  detail::check_finite(out, "linear");
  const bool rg = tape.requires_grad(x) || tape.requires_grad(w);
  return tape.record(std::move(out), rg, [x, w, m, k, n](Tape<T>& t, Var, const Tensor<T>& g) {
    const auto G = detail::as_matrix(g, m, n);
    if (t.requires_grad(x)) {
      detail::as_matrix(t.grad_buffer(x), m, k).noalias() += G * detail::as_matrix(t.value(w), n, k);
    }
    if (t.requires_grad(w)) {
      detail::as_matrix(t.grad_buffer(w), n, k).noalias() +=
          G.transpose() * detail::as_matrix(t.value(x), m, k);
    }
  });
}

namespace detail {

// Shared body of add/sub: out = a + sign * b with b broadcast.
template <typename T>
Var add_signed(Tape<T>& tape, Var a, Var b, T sign, const char* op) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  const Broadcast kind = broadcast_kind(A, B, op);
  const std::size_t cols = A.cols();
  Tensor<T> out(A.shape(), Uninitialized{});
  if (kind == Broadcast::kSame) {
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + sign * B[i];
  } else {
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + sign * B[broadcast_index<T>(kind, i, cols)];
  }
  check_finite(out, op);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b, kind, cols, sign](Tape<T>& t, Var, const Tensor<T>& g) {
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_buffer(b);
      if (kind == Broadcast::kSame) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast_index<T>(kind, i, cols)] += sign * g[i];
      }
    }
  });
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  return detail::add_signed(tape, a, b, T{1}, "add");
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  return detail::add_signed(tape, a, b, T{-1}, "sub");
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  const auto kind = detail::broadcast_kind(A, B, "mul");
  const std::size_t cols = A.cols();
  Tensor<T> out(A.shape(), Uninitialized{});
  if (kind == detail::Broadcast::kSame) {
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  } else {
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[detail::broadcast_index<T>(kind, i, cols)];
  }
  detail::check_finite(out, "mul");
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(std::move(out), rg, [a, b, kind, cols](Tape<T>& t, Var, const Tensor<T>& g) {
    const Tensor<T>& A = t.value(a);
    const Tensor<T>& B = t.value(b);
    const bool same = kind == detail::Broadcast::kSame;
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad_buffer(a);
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[detail::broadcast_index<T>(kind, i, cols)];
      }
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_buffer(b);
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gb[detail::broadcast_index<T>(kind, i, cols)] += g[i] * A[i];
      }
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  const Tensor<T>& A = tape.value(a);
  Tensor<T> out(A.shape(), Uninitialized{});
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = factor * A[i];
  detail::check_finite(out, "scale");
  return tape.record(std::move(out), tape.requires_grad(a), [a, factor](Tape<T>& t, Var, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

// x * sigmoid(x)
template <typename T>
Var silu(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> out(X.shape(), Uninitialized{});
  const auto xa = detail::as_array(X);
  detail::as_array(out) = xa / (T{1} + (-xa).exp());
  detail::check_finite(out, "silu");
  return tape.record(std::move(out), tape.requires_grad(x), [x](Tape<T>& t, Var, const Tensor<T>& g) {
    const auto xa = detail::as_array(t.value(x));
    const auto s = (T{1} / (T{1} + (-xa).exp())).eval();
    detail::as_array(t.grad_buffer(x)) += detail::as_array(g) * s * (T{1} + xa * (T{1} - s));
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const Tensor<T>& A = tape.value(a);
  T total{0};
  for (T v : A.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::check_finite(out, "sum");
  return tape.record(std::move(out), tape.requires_grad(a), [a](Tape<T>& t, Var, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Var mean(Tape<T>& tape, Var a) {
  const std::size_t n = tape.value(a).size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(tape, sum(tape, a), T{1} / static_cast<T>(n));
}

// y = gain * x / sqrt(mean(x^2) + epsilon), per row.
template <typename T>
Var rmsnorm(Tape<T>& tape, Var x, Var gain, T epsilon) {
  if (!(epsilon >= T{0})) throw DomainError("rmsnorm: epsilon must be non-negative");
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& G = tape.value(gain);
  const std::size_t d = X.cols(), rows = X.rows();
  if (G.size() != d) {
    throw ShapeError("rmsnorm: gain " + shape_string(G.shape()) + " does not match width " +
                     std::to_string(d));
  }
  auto inv_rms = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(X.shape(), Uninitialized{});
  for (std::size_t r = 0; r < rows; ++r) {
    const auto xr = X.row(r);
    T ms{0};
    for (T v : xr) ms += v * v;
    ms /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(ms + epsilon);
    (*inv_rms)[r] = inv;
    auto yr = out.row(r);
    for (std::size_t j = 0; j < d; ++j) yr[j] = G[j] * xr[j] * inv;
  }
  detail::check_finite(out, "rmsnorm");
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gain);
  return tape.record(std::move(out), rg, [x, gain, d, rows, inv_rms](Tape<T>& t, Var, const Tensor<T>& g) {
    const Tensor<T>& X = t.value(x);
    const Tensor<T>& G = t.value(gain);
    const bool want_x = t.requires_grad(x), want_gain = t.requires_grad(gain);
    for (std::size_t r = 0; r < rows; ++r) {
      const T inv = (*inv_rms)[r];
      const auto xr = X.row(r);
      const auto gr = g.row(r);
      if (want_x) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * G[j] * xr[j];
        const T coeff = inv * inv * inv * dot / static_cast<T>(d);
        auto dx = t.grad_buffer(x).row(r);
        for (std::size_t j = 0; j < d; ++j) dx[j] += inv * gr[j] * G[j] - coeff * xr[j];
      }
      if (want_gain) {
        Tensor<T>& dg = t.grad_buffer(gain);
        for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xr[j] * inv;
      }
    }
  });
}

// Gathers rows of table[V x d] for each id.
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const std::uint32_t> ids) {
  const Tensor<T>& E = tape.value(table);
  detail::require_rank2(E, "embedding");
  const std::size_t vocab = E.dim(0), d = E.dim(1);
  Tensor<T> out({ids.size(), d}, Uninitialized{});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DomainError("embedding: token id " + std::to_string(ids[i]) + " outside vocab " +
                        std::to_string(vocab));
    }
    std::copy_n(E.row(ids[i]).begin(), d, out.row(i).begin());
  }
  detail::check_finite(out, "embedding");
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return tape.record(std::move(out), tape.requires_grad(table),
                     [table, d, saved = std::move(saved)](Tape<T>& t, Var, const Tensor<T>& g) {
                       Tensor<T>& ge = t.grad_buffer(table);
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         auto dst = ge.row(saved[i]);
                         const auto src = g.row(i);
                         for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                     });
}

// Mean over rows of -log softmax(logits)[target]; logits[t x V].
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::uint32_t> targets) {
  const Tensor<T>& L = tape.value(logits);
  detail::require_rank2(L, "cross_entropy");
  const std::size_t rows = L.dim(0), vocab = L.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  if (rows == 0) throw ShapeError("cross_entropy: no rows");
  auto probs = std::make_shared<Tensor<T>>(L.shape());
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= vocab) {
      throw DomainError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocab " +
                        std::to_string(vocab));
    }
    const auto lr = L.row(r);
    const T mx = *std::max_element(lr.begin(), lr.end());
    T z{0};
    auto pr = probs->row(r);
    using Row = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<Row> prow(pr.data(), static_cast<Eigen::Index>(vocab));
    prow = (Eigen::Map<const Row>(lr.data(), static_cast<Eigen::Index>(vocab)) - mx).exp();
    // Plain loop: Eigen's reductions peel by address alignment, which would
    // make the summation order (and the bits) depend on the allocation.
    for (std::size_t j = 0; j < vocab; ++j) z += pr[j];
    prow /= z;
    total += std::log(z) - (lr[targets[r]] - mx);
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(rows));
  detail::check_finite(out, "cross_entropy");
  std::vector<std::uint32_t> saved(targets.begin(), targets.end());
  return tape.record(std::move(out), tape.requires_grad(logits),
                     [logits, rows, vocab, probs, saved = std::move(saved)](Tape<T>& t, Var, const Tensor<T>& g) {
                       Tensor<T>& gl = t.grad_buffer(logits);
                       const T coeff = g[0] / static_cast<T>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const auto pr = probs->row(r);
                         auto dr = gl.row(r);
                         for (std::size_t j = 0; j < vocab; ++j) dr[j] += coeff * pr[j];
                         dr[saved[r]] -= coeff;
                       }
                     });
}

// Forward returns forward_value; backward hands the incoming gradient
// unchanged to passthrough and nothing to forward_value.
template <typename T>
Var custom_grad(Tape<T>& tape, Var forward_value, Var passthrough) {
  const Tensor<T>& F = tape.value(forward_value);
  const Tensor<T>& P = tape.value(passthrough);
  if (F.shape() != P.shape()) {
    throw ShapeError("custom_grad: forward " + shape_string(F.shape()) + " vs passthrough " +
                     shape_string(P.shape()));
  }
  Tensor<T> out = F;
  detail::check_finite(out, "custom_grad");
  return tape.record(std::move(out), tape.requires_grad(passthrough),
                     [passthrough](Tape<T>& t, Var, const Tensor<T>& g) {
                       Tensor<T>& gp = t.grad_buffer(passthrough);
                       for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
                     });
}

namespace detail {

// Strided view of per-(batch, head) [t x dh] blocks inside a flat buffer.
struct HeadLayout {
  std::size_t batch = 1, heads = 1, t = 0, dh = 0;
  std::size_t batch_stride = 0, head_stride = 0, row_stride = 0;

  std::size_t offset(std::size_t b, std::size_t h, std::size_t i) const {
    return b * batch_stride + h * head_stride + i * row_stride;
  }
};

template <typename T>
struct RopeTable {
  std::vector<T> cos, sin;  // [t x dh/2]
  std::size_t half = 0;

  RopeTable(std::size_t t, std::size_t dh, double theta) : cos(t * (dh / 2)), sin(t * (dh / 2)), half(dh / 2) {
    for (std::size_t pos = 0; pos < t; ++pos) {
      for (std::size_t p = 0; p < half; ++p) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(p) / static_cast<double>(dh));
        const double angle = static_cast<double>(pos) * freq;
        cos[pos * half + p] = static_cast<T>(std::cos(angle));
        sin[pos * half + p] = static_cast<T>(std::sin(angle));
      }
    }
  }

  // inverse = true applies the transpose rotation (used for gradients).
  void rotate(RowMatrix<T>& m, bool inverse) const {
    for (Eigen::Index pos = 0; pos < m.rows(); ++pos) {
      for (std::size_t p = 0; p < half; ++p) {
        const T c = cos[pos * half + p];
        const T s = inverse ? -sin[pos * half + p] : sin[pos * half + p];
        const T x0 = m(pos, 2 * p), x1 = m(pos, 2 * p + 1);
        m(pos, 2 * p) = x0 * c - x1 * s;
        m(pos, 2 * p + 1) = x0 * s + x1 * c;
      }
    }
  }
};

template <typename T>
RowMatrix<T> gather_head(std::span<const T> src, const HeadLayout& lay, std::size_t b, std::size_t h) {
  RowMatrix<T> m(lay.t, lay.dh);
  for (std::size_t i = 0; i < lay.t; ++i) {
    const T* row = src.data() + lay.offset(b, h, i);
    for (std::size_t j = 0; j < lay.dh; ++j) m(i, j) = row[j];
  }
  return m;
}

template <typename T>
void scatter_head(std::span<T> dst, const HeadLayout& lay, std::size_t b, std::size_t h,
                  const RowMatrix<T>& m, bool accumulate) {
  for (std::size_t i = 0; i < lay.t; ++i) {
    T* row = dst.data() + lay.offset(b, h, i);
    for (std::size_t j = 0; j < lay.dh; ++j) row[j] = accumulate ? row[j] + m(i, j) : m(i, j);
  }
}

template <typename T>
Var attention_impl(Tape<T>& tape, Var q, Var k, Var v, const HeadLayout& lay, double rope_theta) {
  const Tensor<T>& Q = tape.value(q);
  const Tensor<T>& K = tape.value(k);
  const Tensor<T>& V = tape.value(v);
  if (Q.shape() != K.shape() || Q.shape() != V.shape()) {
    throw ShapeError("causal_attention: q, k, v shapes differ");
  }
  if (lay.dh % 2 != 0) throw ShapeError("causal_attention: head dimension must be even for rotary embedding");
  if (!(rope_theta > 0.0)) throw DomainError("causal_attention: rope_theta must be positive");
  const auto rope = std::make_shared<RopeTable<T>>(lay.t, lay.dh, rope_theta);
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(lay.dh));
  const std::size_t blocks = lay.batch * lay.heads;
  auto probs = std::make_shared<std::vector<RowMatrix<T>>>(blocks);
  Tensor<T> out(Q.shape(), Uninitialized{});
  for (std::size_t b = 0; b < lay.batch; ++b) {
    for (std::size_t h = 0; h < lay.heads; ++h) {
      RowMatrix<T> qh = gather_head(Q.data(), lay, b, h);
      RowMatrix<T> kh = gather_head(K.data(), lay, b, h);
      const RowMatrix<T> vh = gather_head(V.data(), lay, b, h);
      rope->rotate(qh, false);
      rope->rotate(kh, false);
      RowMatrix<T> p = (qh * kh.transpose()) * inv_sqrt;
      for (std::size_t i = 0; i < lay.t; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, p(i, j));
        auto live = p.row(static_cast<Eigen::Index>(i)).head(static_cast<Eigen::Index>(i + 1)).array();
        live = (live - mx).exp();
        T z{0};
        for (std::size_t j = 0; j <= i; ++j) z += p(i, j);
        live /= z;
        for (std::size_t j = i + 1; j < lay.t; ++j) p(i, j) = T{0};
      }
      const RowMatrix<T> oh = p * vh;
      scatter_head(out.data(), lay, b, h, oh, false);
      (*probs)[b * lay.heads + h] = std::move(p);
    }
  }
  check_finite(out, "causal_attention");
  const bool rg = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
  return tape.record(std::move(out), rg, [q, k, v, lay, rope, probs, inv_sqrt](Tape<T>& t, Var, const Tensor<T>& g) {
    const Tensor<T>& Q = t.value(q);
    const Tensor<T>& K = t.value(k);
    const Tensor<T>& V = t.value(v);
    const bool want_q = t.requires_grad(q), want_k = t.requires_grad(k), want_v = t.requires_grad(v);
    for (std::size_t b = 0; b < lay.batch; ++b) {
      for (std::size_t h = 0; h < lay.heads; ++h) {
        const RowMatrix<T>& p = (*probs)[b * lay.heads + h];
        const RowMatrix<T> go = gather_head(g.data(), lay, b, h);
        if (want_v) {
          const RowMatrix<T> gv = p.transpose() * go;
          scatter_head(t.grad_buffer(v).data(), lay, b, h, gv, true);
        }
        if (!want_q && !want_k) continue;
        const RowMatrix<T> vh = gather_head(V.data(), lay, b, h);
        RowMatrix<T> ds = go * vh.transpose();
        for (std::size_t i = 0; i < lay.t; ++i) {
          T dot{0};
          for (std::size_t j = 0; j <= i; ++j) dot += ds(i, j) * p(i, j);
          for (std::size_t j = 0; j < lay.t; ++j) ds(i, j) = j <= i ? p(i, j) * (ds(i, j) - dot) * inv_sqrt : T{0};
        }
        if (want_q) {
          RowMatrix<T> kh = gather_head(K.data(), lay, b, h);
          rope->rotate(kh, false);
          RowMatrix<T> gq = ds * kh;
          rope->rotate(gq, true);
          scatter_head(t.grad_buffer(q).data(), lay, b, h, gq, true);
        }
        if (want_k) {
          RowMatrix<T> qh = gather_head(Q.data(), lay, b, h);
          rope->rotate(qh, false);
          RowMatrix<T> gk = ds.transpose() * qh;
          rope->rotate(gk, true);
          scatter_head(t.grad_buffer(k).data(), lay, b, h, gk, true);
        }
      }
    }
  });
}

}  // namespace detail

// q, k, v: [heads x t x dh]. Rotary embedding is applied to q and k before
// the scores; position j > i is masked out of row i.
template <typename T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, double rope_theta = 10000.0) {
  const Tensor<T>& Q = tape.value(q);
  if (Q.rank() != 3) throw ShapeError("causal_attention: expected [heads x t x dh], got " + shape_string(Q.shape()));
  detail::HeadLayout lay;
  lay.batch = 1;
  lay.heads = Q.dim(0);
  lay.t = Q.dim(1);
  lay.dh = Q.dim(2);
  lay.head_stride = lay.t * lay.dh;
  lay.row_stride = lay.dh;
  return detail::attention_impl(tape, q, k, v, lay, rope_theta);
}

// Batched multi-head form used by the model: q, k, v are [batch*t x heads*dh]
// with sequences stacked along rows and heads along columns.
template <typename T>
Var multihead_causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t heads,
                               double rope_theta = 10000.0) {
  const Tensor<T>& Q = tape.value(q);
  detail::require_rank2(Q, "multihead_causal_attention");
  if (batch == 0 || heads == 0 || Q.dim(0) % batch != 0 || Q.dim(1) % heads != 0) {
    throw ShapeError("multihead_causal_attention: " + shape_string(Q.shape()) + " not divisible into " +
                     std::to_string(batch) + " sequences and " + std::to_string(heads) + " heads");
  }
  detail::HeadLayout lay;
  lay.batch = batch;
  lay.heads = heads;
  lay.t = Q.dim(0) / batch;
  lay.dh = Q.dim(1) / heads;
  lay.row_stride = Q.dim(1);
  lay.head_stride = lay.dh;
  lay.batch_stride = lay.t * Q.dim(1);
  return detail::attention_impl(tape, q, k, v, lay, rope_theta);
}

}  // namespace compscale

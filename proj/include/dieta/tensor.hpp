#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dieta/common.hpp"

namespace dieta {

namespace detail {

// Shared row kernels. Batched forward, incremental decode and the optimizer
// all call these exact functions, and they are kept out of line so the
// compiler emits a single instance: two code paths feeding identical inputs
// through the same kernel produce identical bits.

template <typename S>
[[gnu::noinline]] void linear_row(const S* x, const S* w, S* out, size_t k,
                                  size_t n) {
  std::fill(out, out + n, S(0));
  for (size_t kk = 0; kk < k; ++kk) {
    const S a = x[kk];
    const S* wrow = w + kk * n;
    for (size_t j = 0; j < n; ++j) out[j] += a * wrow[j];
  }
}

// Four rows per pass: one streaming read of w serves four outputs. Each row
// accumulates in exactly the order linear_row uses, so results are
// bit-identical to four single-row calls.
template <typename S>
[[gnu::noinline]] void linear_rows4(const S* x, S* out, const S* w, size_t k,
                                    size_t n) {
  std::fill(out, out + 4 * n, S(0));
  for (size_t kk = 0; kk < k; ++kk) {
    const S a0 = x[0 * k + kk], a1 = x[1 * k + kk];
    const S a2 = x[2 * k + kk], a3 = x[3 * k + kk];
    const S* wrow = w + kk * n;
    S* o0 = out;
    S* o1 = out + n;
    S* o2 = out + 2 * n;
    S* o3 = out + 3 * n;
    for (size_t j = 0; j < n; ++j) {
      const S wv = wrow[j];
      o0[j] += a0 * wv;
      o1[j] += a1 * wv;
      o2[j] += a2 * wv;
      o3[j] += a3 * wv;
    }
  }
}

template <typename S>
[[gnu::noinline]] void linear_rows4_acc(const S* x, S* out, const S* w,
                                        size_t k, size_t n) {
  for (size_t kk = 0; kk < k; ++kk) {
    const S a0 = x[0 * k + kk], a1 = x[1 * k + kk];
    const S a2 = x[2 * k + kk], a3 = x[3 * k + kk];
    const S* wrow = w + kk * n;
    S* o0 = out;
    S* o1 = out + n;
    S* o2 = out + 2 * n;
    S* o3 = out + 3 * n;
    for (size_t j = 0; j < n; ++j) {
      const S wv = wrow[j];
      o0[j] += a0 * wv;
      o1[j] += a1 * wv;
      o2[j] += a2 * wv;
      o3[j] += a3 * wv;
    }
  }
}

// Eight independent partial sums in a fixed order: deterministic and wide
// enough for the vector units.
template <typename S>
[[gnu::noinline]] S dot(const S* a, const S* b, size_t n) {
  S acc[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  S tail = S(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  const S s01 = acc[0] + acc[1], s23 = acc[2] + acc[3];
  const S s45 = acc[4] + acc[5], s67 = acc[6] + acc[7];
  return ((s01 + s23) + (s45 + s67)) + tail;
}

template <typename S>
[[gnu::noinline]] void axpy(S alpha, const S* x, S* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// out[j] += sum_k x[k] * w[k*n + j], accumulating row-major like linear_row.
template <typename S>
[[gnu::noinline]] void linear_row_acc(const S* x, const S* w, S* out, size_t k,
                                      size_t n) {
  for (size_t kk = 0; kk < k; ++kk) {
    const S a = x[kk];
    const S* wrow = w + kk * n;
    for (size_t j = 0; j < n; ++j) out[j] += a * wrow[j];
  }
}

// Row-major matrix product into `out` (rows independent, k-order fixed).
template <typename S>
void matmul_rows(const S* a, const S* b, S* out, size_t m, size_t k, size_t n) {
  size_t i = 0;
  for (; i + 4 <= m; i += 4) linear_rows4(a + i * k, out + i * n, b, k, n);
  for (; i < m; ++i) linear_row(a + i * k, b, out + i * n, k, n);
}

template <typename S>
void matmul_rows_acc(const S* a, const S* b, S* out, size_t m, size_t k,
                     size_t n) {
  size_t i = 0;
  for (; i + 4 <= m; i += 4) linear_rows4_acc(a + i * k, out + i * n, b, k, n);
  for (; i < m; ++i) linear_row_acc(a + i * k, b, out + i * n, k, n);
}

// dst[j*rows + i] = src[i*cols + j], tiled for cache friendliness.
template <typename S>
[[gnu::noinline]] void transpose_into(const S* src, S* dst, size_t rows,
                                      size_t cols) {
  constexpr size_t tile = 32;
  for (size_t i0 = 0; i0 < rows; i0 += tile)
    for (size_t j0 = 0; j0 < cols; j0 += tile) {
      const size_t imax = std::min(rows, i0 + tile);
      const size_t jmax = std::min(cols, j0 + tile);
      for (size_t i = i0; i < imax; ++i)
        for (size_t j = j0; j < jmax; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

template <typename S>
[[gnu::noinline]] void softmax_row(const S* x, S* out, size_t n) {
  S m = x[0];
  for (size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  S sum = S(0);
  for (size_t i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - m);
    sum += out[i];
  }
  const S inv = S(1) / sum;
  for (size_t i = 0; i < n; ++i) out[i] *= inv;
}

template <typename S>
[[gnu::noinline]] void layer_norm_row(const S* x, const S* gain, const S* bias,
                                      S eps, S* out, S* x_hat, S* rstd_out,
                                      size_t n) {
  S mean = S(0);
  for (size_t i = 0; i < n; ++i) mean += x[i];
  mean /= S(n);
  S var = S(0);
  for (size_t i = 0; i < n; ++i) {
    const S d = x[i] - mean;
    var += d * d;
  }
  var /= S(n);
  const S rstd = S(1) / std::sqrt(var + eps);
  for (size_t i = 0; i < n; ++i) {
    const S h = (x[i] - mean) * rstd;
    x_hat[i] = h;
    out[i] = h * gain[i] + bias[i];
  }
  *rstd_out = rstd;
}

template <typename S>
[[gnu::noinline]] void l2_normalize_row(const S* x, S* out, S* scale_out,
                                        size_t n, S eps) {
  const S sq = dot(x, x, n);
  const S s = std::sqrt(sq + eps * eps);
  const S inv = S(1) / s;
  for (size_t i = 0; i < n; ++i) out[i] = x[i] * inv;
  *scale_out = s;
}

// Rotates dimension pairs (2i, 2i+1) by pos * base^(-2i/d). `inverse` applies
// the opposite rotation (used by the backward pass).
template <typename S>
[[gnu::noinline]] void rope_row(const S* x, S* out, size_t d, double pos,
                                double base, bool inverse) {
  for (size_t i = 0; i + 1 < d; i += 2) {
    const double theta =
        pos * std::pow(base, -static_cast<double>(i) / static_cast<double>(d));
    const S c = static_cast<S>(std::cos(theta));
    const S s = static_cast<S>(inverse ? -std::sin(theta) : std::sin(theta));
    const S x0 = x[i];
    const S x1 = x[i + 1];
    out[i] = x0 * c - x1 * s;
    out[i + 1] = x0 * s + x1 * c;
  }
}

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

}  // namespace detail

template <typename S>
struct TensorImpl {
  std::vector<size_t> shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty means "all zeros"
  bool requires_grad = false;
};

// Value-semantic handle onto a dense n-dimensional array. Copying a Tensor
// aliases the underlying storage; ops never mutate their inputs.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : impl_(std::make_shared<TensorImpl<S>>()) {}
  explicit Tensor(std::shared_ptr<TensorImpl<S>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<size_t> shape) {
    auto impl = std::make_shared<TensorImpl<S>>();
    impl->shape = std::move(shape);
    impl->data.assign(detail::shape_numel(impl->shape), S(0));
    return Tensor(std::move(impl));
  }

  static Tensor from_data(std::vector<size_t> shape, std::vector<S> data) {
    if (detail::shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + detail::shape_str(shape));
    auto impl = std::make_shared<TensorImpl<S>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  static Tensor scalar(S v) { return from_data({}, {v}); }

  static Tensor randn(std::vector<size_t> shape, Xorshift64Star& rng,
                      double stddev) {
    Tensor t = zeros(std::move(shape));
    for (S& v : t.data()) v = static_cast<S>(rng.next_gaussian() * stddev);
    return t;
  }

  const std::vector<size_t>& shape() const { return impl_->shape; }
  size_t rank() const { return impl_->shape.size(); }
  size_t numel() const { return impl_->data.size(); }
  size_t rows() const { return impl_->shape.at(0); }
  size_t cols() const { return impl_->shape.at(1); }

  std::vector<S>& data() { return impl_->data; }
  const std::vector<S>& data() const { return impl_->data; }
  S& at(size_t i) { return impl_->data.at(i); }
  S at(size_t i) const { return impl_->data.at(i); }
  S& at(size_t i, size_t j) { return impl_->data.at(i * cols() + j); }
  S at(size_t i, size_t j) const { return impl_->data.at(i * cols() + j); }
  S item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<S>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  std::shared_ptr<TensorImpl<S>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

// Ordered record of executed ops. Reverse iteration visits every node after
// all of its consumers. Each backward() call re-zeroes the adjoints of op
// outputs and accumulates additively into leaf grads, so calling backward
// twice doubles a leaf's grad, and backward(a) + backward(b) matches
// backward(a + b).
template <typename S>
class Tape {
 public:
  struct Node {
    std::shared_ptr<TensorImpl<S>> out;
    std::function<void()> backward;
  };

  void record(std::shared_ptr<TensorImpl<S>> out, std::function<void()> fn) {
    nodes_.push_back(Node{std::move(out), std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward_from(const Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          detail::shape_str(loss.shape()));
    bool found = false;
    for (auto& n : nodes_) {
      n.out->grad.clear();
      if (n.out == loss.impl()) found = true;
    }
    if (!found)
      throw ContractError("backward: loss tensor was not produced on this tape");
    loss.impl()->grad.assign(1, S(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // not on the loss path
      it->backward();
    }
  }

  static Tape*& active() {
    thread_local Tape* t = nullptr;
    return t;
  }

 private:
  std::vector<Node> nodes_;
};

// RAII activation of a tape for the current thread.
template <typename S>
class TapeScope {
 public:
  TapeScope() {
    prev_ = Tape<S>::active();
    Tape<S>::active() = &tape_;
  }
  ~TapeScope() { Tape<S>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape<S>& tape() { return tape_; }

 private:
  Tape<S> tape_;
  Tape<S>* prev_;
};

template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>* t = Tape<S>::active();
  if (!t) throw ContractError("backward called with no active tape");
  t->backward_from(loss);
}

namespace detail {

template <typename S>
void ensure_grad(const std::shared_ptr<TensorImpl<S>>& impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), S(0));
}

template <typename S>
void record_if_needed(const Tensor<S>& out, std::function<void()> fn) {
  Tape<S>* t = Tape<S>::active();
  if (t && out.requires_grad()) t->record(out.impl(), std::move(fn));
}

template <typename S>
void require_rank(const Tensor<S>& t, size_t r, const char* what) {
  if (t.rank() != r)
    throw DimensionError(std::string(what) + ": expected rank " +
                         std::to_string(r) + " tensor, got shape " +
                         shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree, " +
                         detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<S> out = Tensor<S>::zeros({m, n});
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  detail::matmul_rows(a.data().data(), b.data().data(), out.data().data(), m,
                      k, n);
  detail::record_if_needed(out, [ai = a.impl(), bi = b.impl(), oi = out.impl(),
                                 m, k, n]() {
    const S* g = oi->grad.data();
    if (ai->requires_grad) {
      detail::ensure_grad(ai);
      // dA = dC * B^T with B transposed once so the inner loops stream
      std::vector<S> bt(k * n);
      detail::transpose_into(bi->data.data(), bt.data(), k, n);
      detail::matmul_rows_acc(g, bt.data(), ai->grad.data(), m, n, k);
    }
    if (bi->requires_grad) {
      detail::ensure_grad(bi);
      // dB = A^T * dC, one accumulating pass per dB row
      std::vector<S> at(m * k);
      detail::transpose_into(ai->data.data(), at.data(), m, k);
      detail::matmul_rows_acc(at.data(), g, bi->grad.data(), k, m, n);
    }
  });
  return out;
}

// a [m x k] times transpose(b [n x k]) -> [m x n]; rows of both operands are
// contiguous, which is what attention score computation wants.
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank(a, 2, "matmul_nt lhs");
  detail::require_rank(b, 2, "matmul_nt rhs");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner dimensions disagree, " +
                         detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  const size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<S> out = Tensor<S>::zeros({m, n});
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      out.at(i, j) =
          detail::dot(a.data().data() + i * k, b.data().data() + j * k, k);
  detail::record_if_needed(out, [ai = a.impl(), bi = b.impl(), oi = out.impl(),
                                 m, k, n]() {
    const S* g = oi->grad.data();
    if (ai->requires_grad) {
      detail::ensure_grad(ai);
      detail::matmul_rows_acc(g, bi->data.data(), ai->grad.data(), m, n, k);
    }
    if (bi->requires_grad) {
      detail::ensure_grad(bi);
      std::vector<S> gt(m * n);
      detail::transpose_into(g, gt.data(), m, n);
      detail::matmul_rows_acc(gt.data(), ai->data.data(), bi->grad.data(), n,
                              m, k);
    }
  });
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch, " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < a.numel(); ++i)
    out.at(i) = a.at(i) + b.at(i);
  detail::record_if_needed(out, [ai = a.impl(), bi = b.impl(), oi = out.impl()]() {
    for (auto& in : {ai, bi}) {
      if (!in->requires_grad) continue;
      detail::ensure_grad(in);
      for (size_t i = 0; i < oi->grad.size(); ++i) in->grad[i] += oi->grad[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch, " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * b.at(i);
  detail::record_if_needed(out, [ai = a.impl(), bi = b.impl(), oi = out.impl()]() {
    if (ai->requires_grad) {
      detail::ensure_grad(ai);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[i] += oi->grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      detail::ensure_grad(bi);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        bi->grad[i] += oi->grad[i] * ai->data[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.set_requires_grad(a.requires_grad());
  for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * c;
  detail::record_if_needed(out, [ai = a.impl(), oi = out.impl(), c]() {
    detail::ensure_grad(ai);
    for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
  });
  return out;
}

// Broadcast multiply by a one-element tensor (the per-head attention scale).
template <typename S>
Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& s) {
  if (s.numel() != 1)
    throw DimensionError("scale_by: scale must have one element, got " +
                         detail::shape_str(s.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.set_requires_grad(a.requires_grad() || s.requires_grad());
  const S sv = s.at(0);
  for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * sv;
  detail::record_if_needed(out, [ai = a.impl(), si = s.impl(), oi = out.impl()]() {
    if (ai->requires_grad) {
      detail::ensure_grad(ai);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[i] += oi->grad[i] * si->data[0];
    }
    if (si->requires_grad) {
      detail::ensure_grad(si);
      S acc = S(0);
      for (size_t i = 0; i < oi->grad.size(); ++i)
        acc += oi->grad[i] * ai->data[i];
      si->grad[0] += acc;
    }
  });
  return out;
}

// One element of a tensor as a scalar tensor on the tape.
template <typename S>
Tensor<S> select(const Tensor<S>& t, size_t index) {
  if (index >= t.numel())
    throw IndexError("select: index " + std::to_string(index) +
                     " out of range for tensor with " +
                     std::to_string(t.numel()) + " elements");
  Tensor<S> out = Tensor<S>::scalar(t.at(index));
  out.set_requires_grad(t.requires_grad());
  detail::record_if_needed(out, [ti = t.impl(), oi = out.impl(), index]() {
    detail::ensure_grad(ti);
    ti->grad[index] += oi->grad[0];
  });
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& t) {
  S acc = S(0);
  for (size_t i = 0; i < t.numel(); ++i) acc += t.at(i);
  Tensor<S> out = Tensor<S>::scalar(acc);
  out.set_requires_grad(t.requires_grad());
  detail::record_if_needed(out, [ti = t.impl(), oi = out.impl()]() {
    detail::ensure_grad(ti);
    const S g = oi->grad[0];
    for (size_t i = 0; i < ti->grad.size(); ++i) ti->grad[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizers
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (x.rank() == 0 || x.rank() > 2)
    throw DimensionError("softmax: expected rank 1 or 2, got " +
                         detail::shape_str(x.shape()));
  const int max_axis = static_cast<int>(x.rank()) - 1;
  if (axis < 0 || axis > max_axis)
    throw ContractError("softmax: axis " + std::to_string(axis) +
                        " invalid for shape " + detail::shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  const bool rowwise = (x.rank() == 1) || axis == 1;
  const size_t r = x.rank() == 1 ? 1 : x.rows();
  const size_t c = x.rank() == 1 ? x.numel() : x.cols();
  if (rowwise) {
    for (size_t i = 0; i < r; ++i)
      detail::softmax_row(x.data().data() + i * c, out.data().data() + i * c, c);
  } else {
    std::vector<S> col(r), sm(r);
    for (size_t j = 0; j < c; ++j) {
      for (size_t i = 0; i < r; ++i) col[i] = x.at(i, j);
      detail::softmax_row(col.data(), sm.data(), r);
      for (size_t i = 0; i < r; ++i) out.at(i, j) = sm[i];
    }
  }
  detail::record_if_needed(out, [xi = x.impl(), oi = out.impl(), rowwise, r, c]() {
    detail::ensure_grad(xi);
    auto vec_back = [&](size_t base, size_t stride, size_t len) {
      S dot_gy = S(0);
      for (size_t i = 0; i < len; ++i)
        dot_gy += oi->grad[base + i * stride] * oi->data[base + i * stride];
      for (size_t i = 0; i < len; ++i) {
        const size_t idx = base + i * stride;
        xi->grad[idx] += (oi->grad[idx] - dot_gy) * oi->data[idx];
      }
    };
    if (rowwise) {
      for (size_t i = 0; i < r; ++i) vec_back(i * c, 1, c);
    } else {
      for (size_t j = 0; j < c; ++j) vec_back(j, c, r);
    }
  });
  return out;
}

template <typename S>
Tensor<S> squared_relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  for (size_t i = 0; i < x.numel(); ++i) {
    const S r = std::max(S(0), x.at(i));
    out.at(i) = r * r;
  }
  detail::record_if_needed(out, [xi = x.impl(), oi = out.impl()]() {
    detail::ensure_grad(xi);
    for (size_t i = 0; i < oi->grad.size(); ++i) {
      const S r = std::max(S(0), xi->data[i]);
      xi->grad[i] += oi->grad[i] * S(2) * r;
    }
  });
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps) {
  const size_t c = x.rank() == 1 ? x.numel() : x.shape().back();
  const size_t r = x.numel() / c;
  if (x.rank() > 2)
    throw DimensionError("layer_norm: expected rank 1 or 2 input");
  if (gain.numel() != c || bias.numel() != c)
    throw DimensionError("layer_norm: gain/bias must match last axis extent " +
                         std::to_string(c));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad() || gain.requires_grad() ||
                        bias.requires_grad());
  auto x_hat = std::make_shared<std::vector<S>>(x.numel());
  auto rstd = std::make_shared<std::vector<S>>(r);
  for (size_t i = 0; i < r; ++i)
    detail::layer_norm_row(x.data().data() + i * c, gain.data().data(),
                           bias.data().data(), eps, out.data().data() + i * c,
                           x_hat->data() + i * c, rstd->data() + i, c);
  detail::record_if_needed(out, [xi = x.impl(), gi = gain.impl(),
                                 bi = bias.impl(), oi = out.impl(), x_hat,
                                 rstd, r, c]() {
    if (gi->requires_grad) detail::ensure_grad(gi);
    if (bi->requires_grad) detail::ensure_grad(bi);
    if (xi->requires_grad) detail::ensure_grad(xi);
    for (size_t i = 0; i < r; ++i) {
      const S* g = oi->grad.data() + i * c;
      const S* h = x_hat->data() + i * c;
      if (gi->requires_grad)
        for (size_t j = 0; j < c; ++j) gi->grad[j] += g[j] * h[j];
      if (bi->requires_grad)
        for (size_t j = 0; j < c; ++j) bi->grad[j] += g[j];
      if (xi->requires_grad) {
        S mean_dh = S(0), mean_dhh = S(0);
        for (size_t j = 0; j < c; ++j) {
          const S dh = g[j] * gi->data[j];
          mean_dh += dh;
          mean_dhh += dh * h[j];
        }
        mean_dh /= S(c);
        mean_dhh /= S(c);
        const S rs = (*rstd)[i];
        for (size_t j = 0; j < c; ++j) {
          const S dh = g[j] * gi->data[j];
          xi->grad[i * c + j] += rs * (dh - mean_dh - h[j] * mean_dhh);
        }
      }
    }
  });
  return out;
}

// Rows are L2-normalized with a small epsilon folded into the norm:
// y = x / sqrt(sum(x^2) + eps^2), so the zero vector maps to zero.
template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x, S eps) {
  const size_t c = x.rank() == 1 ? x.numel() : x.shape().back();
  const size_t r = x.numel() / c;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  auto scales = std::make_shared<std::vector<S>>(r);
  for (size_t i = 0; i < r; ++i)
    detail::l2_normalize_row(x.data().data() + i * c, out.data().data() + i * c,
                             scales->data() + i, c, eps);
  detail::record_if_needed(out, [xi = x.impl(), oi = out.impl(), scales, r, c]() {
    detail::ensure_grad(xi);
    for (size_t i = 0; i < r; ++i) {
      const S* g = oi->grad.data() + i * c;
      const S* y = oi->data.data() + i * c;
      S gy = S(0);
      for (size_t j = 0; j < c; ++j) gy += g[j] * y[j];
      const S inv = S(1) / (*scales)[i];
      for (size_t j = 0; j < c; ++j)
        xi->grad[i * c + j] += (g[j] - gy * y[j]) * inv;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Position and masking ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> rope_apply(const Tensor<S>& x, const std::vector<int32_t>& positions,
                     double rope_base) {
  detail::require_rank(x, 2, "rope_apply");
  const size_t t = x.rows(), d = x.cols();
  if (d % 2 != 0)
    throw ConfigError("rope_apply: head dimension must be even, got " +
                      std::to_string(d));
  if (positions.size() != t)
    throw DimensionError("rope_apply: positions length " +
                         std::to_string(positions.size()) +
                         " does not match row count " + std::to_string(t));
  for (int32_t p : positions)
    if (p < 0) throw ContractError("rope_apply: positions must be nonnegative");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  for (size_t i = 0; i < t; ++i)
    detail::rope_row(x.data().data() + i * d, out.data().data() + i * d, d,
                     static_cast<double>(positions[i]), rope_base, false);
  detail::record_if_needed(out, [xi = x.impl(), oi = out.impl(), positions,
                                 rope_base, t, d]() {
    detail::ensure_grad(xi);
    std::vector<S> tmp(d);
    for (size_t i = 0; i < t; ++i) {
      detail::rope_row(oi->grad.data() + i * d, tmp.data(), d,
                       static_cast<double>(positions[i]), rope_base, true);
      for (size_t j = 0; j < d; ++j) xi->grad[i * d + j] += tmp[j];
    }
  });
  return out;
}

// Strictly-future entries of a square score matrix are set to -inf; they
// carry no gradient.
template <typename S>
Tensor<S> causal_mask(const Tensor<S>& x) {
  detail::require_rank(x, 2, "causal_mask");
  if (x.rows() != x.cols())
    throw DimensionError("causal_mask: expected square matrix, got " +
                         detail::shape_str(x.shape()));
  const size_t t = x.rows();
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(x.requires_grad());
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (size_t i = 0; i < t; ++i)
    for (size_t j = 0; j < t; ++j)
      out.at(i, j) = j > i ? neg_inf : x.at(i, j);
  detail::record_if_needed(out, [xi = x.impl(), oi = out.impl(), t]() {
    detail::ensure_grad(xi);
    for (size_t i = 0; i < t; ++i)
      for (size_t j = 0; j <= i; ++j)
        xi->grad[i * t + j] += oi->grad[i * t + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> embedding_rows(const Tensor<S>& table,
                         const std::vector<int32_t>& ids) {
  detail::require_rank(table, 2, "embedding_rows");
  const size_t v = table.rows(), d = table.cols();
  for (int32_t id : ids)
    if (id < 0 || static_cast<size_t>(id) >= v)
      throw IndexError("embedding_rows: token id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
  Tensor<S> out = Tensor<S>::zeros({ids.size(), d});
  out.set_requires_grad(table.requires_grad());
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  detail::record_if_needed(out, [ti = table.impl(), oi = out.impl(), ids, d]() {
    detail::ensure_grad(ti);
    for (size_t i = 0; i < ids.size(); ++i)
      detail::axpy(S(1), oi->grad.data() + i * d,
                   ti->grad.data() + static_cast<size_t>(ids[i]) * d, d);
  });
  return out;
}

template <typename S>
Tensor<S> block(const Tensor<S>& x, size_t r0, size_t nr, size_t c0, size_t nc) {
  detail::require_rank(x, 2, "block");
  if (r0 + nr > x.rows() || c0 + nc > x.cols())
    throw IndexError("block: region out of range for " +
                     detail::shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({nr, nc});
  out.set_requires_grad(x.requires_grad());
  const size_t xc = x.cols();
  for (size_t i = 0; i < nr; ++i)
    std::copy_n(x.data().data() + (r0 + i) * xc + c0, nc,
                out.data().data() + i * nc);
  detail::record_if_needed(out, [xi = x.impl(), oi = out.impl(), r0, nr, c0, nc,
                                 xc]() {
    detail::ensure_grad(xi);
    for (size_t i = 0; i < nr; ++i)
      for (size_t j = 0; j < nc; ++j)
        xi->grad[(r0 + i) * xc + c0 + j] += oi->grad[i * nc + j];
  });
  return out;
}

template <typename S>
struct BlockPlacement {
  Tensor<S> tensor;
  size_t r0;
  size_t c0;
};

// Assembles disjoint blocks into an [rows x cols] matrix (zeros elsewhere).
template <typename S>
Tensor<S> paste_blocks(size_t rows, size_t cols,
                       const std::vector<BlockPlacement<S>>& parts) {
  Tensor<S> out = Tensor<S>::zeros({rows, cols});
  bool rg = false;
  for (const auto& p : parts) {
    if (p.r0 + p.tensor.rows() > rows || p.c0 + p.tensor.cols() > cols)
      throw IndexError("paste_blocks: part exceeds target extent");
    rg = rg || p.tensor.requires_grad();
    for (size_t i = 0; i < p.tensor.rows(); ++i)
      std::copy_n(p.tensor.data().data() + i * p.tensor.cols(),
                  p.tensor.cols(),
                  out.data().data() + (p.r0 + i) * cols + p.c0);
  }
  out.set_requires_grad(rg);
  if (rg) {
    std::vector<std::shared_ptr<TensorImpl<S>>> impls;
    std::vector<std::pair<size_t, size_t>> at;
    for (const auto& p : parts) {
      impls.push_back(p.tensor.impl());
      at.emplace_back(p.r0, p.c0);
    }
    detail::record_if_needed(out, [impls, at, oi = out.impl(), cols]() {
      for (size_t pi = 0; pi < impls.size(); ++pi) {
        auto& in = impls[pi];
        if (!in->requires_grad) continue;
        detail::ensure_grad(in);
        const size_t nr = in->shape[0], nc = in->shape[1];
        for (size_t i = 0; i < nr; ++i)
          for (size_t j = 0; j < nc; ++j)
            in->grad[i * nc + j] +=
                oi->grad[(at[pi].first + i) * cols + at[pi].second + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over masked positions of -log softmax(logits)[target]. The softmax is
// recomputed in the backward pass rather than stored.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>& mask) {
  detail::require_rank(logits, 2, "cross_entropy");
  const size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n || mask.size() != n)
    throw DimensionError("cross_entropy: targets/mask length must equal " +
                         std::to_string(n));
  size_t active = 0;
  for (size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<size_t>(targets[i]) >= v)
      throw IndexError("cross_entropy: target id " +
                       std::to_string(targets[i]) + " out of range [0," +
                       std::to_string(v) + ")");
    if (mask[i]) ++active;
  }
  if (active == 0)
    throw ContractError("cross_entropy: no unmasked positions");
  // Per-row probabilities are kept for the backward pass.
  auto probs = std::make_shared<std::vector<S>>();
  const bool keep = logits.requires_grad() && Tape<S>::active() != nullptr;
  if (keep) probs->assign(n * v, S(0));
  S total = S(0);
  std::vector<S> sm(v);
  for (size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const S* row = logits.data().data() + i * v;
    S m = row[0];
    for (size_t j = 1; j < v; ++j) m = std::max(m, row[j]);
    S sum = S(0);
    for (size_t j = 0; j < v; ++j) {
      sm[j] = std::exp(row[j] - m);
      sum += sm[j];
    }
    total += m + std::log(sum) - row[static_cast<size_t>(targets[i])];
    if (keep) {
      const S inv = S(1) / sum;
      for (size_t j = 0; j < v; ++j) (*probs)[i * v + j] = sm[j] * inv;
    }
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(active));
  out.set_requires_grad(logits.requires_grad());
  detail::record_if_needed(out, [li = logits.impl(), oi = out.impl(), targets,
                                 mask, n, v, active, probs]() {
    detail::ensure_grad(li);
    const S g = oi->grad[0] / static_cast<S>(active);
    for (size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      const S* sm_row = probs->data() + i * v;
      for (size_t j = 0; j < v; ++j) li->grad[i * v + j] += g * sm_row[j];
      li->grad[i * v + static_cast<size_t>(targets[i])] -= g;
    }
  });
  return out;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dieta

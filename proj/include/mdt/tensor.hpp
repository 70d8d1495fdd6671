#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mdt/common.hpp"
#include "mdt/rng.hpp"

namespace mdt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense contiguous array. Copies share the buffer; tensors are treated as
// immutable once handed to another module, so no copy-on-write is needed.
template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<S>>(shape_numel(shape_), S(0))) {
    check_shape();
  }
  Tensor(Shape shape, std::vector<S> values)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<S>>(std::move(values))) {
    check_shape();
    if (static_cast<int64_t>(buf_->size()) != shape_numel(shape_))
      throw ShapeError("tensor: value count " + std::to_string(buf_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.buf_->begin(), t.buf_->end(), v);
    return t;
  }
  static Tensor scalar(S v) { return full({}, v); }
  static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
    Tensor t(std::move(shape));
    for (S& x : *t.buf_) x = static_cast<S>(rng.normal()) * stddev;
    return t;
  }
  static Tensor rand_uniform(Shape shape, Rng& rng, S lo, S hi) {
    Tensor t(std::move(shape));
    for (S& x : *t.buf_) x = lo + static_cast<S>(rng.uniform()) * (hi - lo);
    return t;
  }

  bool defined() const { return buf_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return buf_ ? static_cast<int64_t>(buf_->size()) : 0; }

  S* data() { return buf_->data(); }
  const S* data() const { return buf_->data(); }
  S& operator[](int64_t i) { return (*buf_)[static_cast<size_t>(i)]; }
  const S& operator[](int64_t i) const { return (*buf_)[static_cast<size_t>(i)]; }

  // Shares the buffer; only the shape changes.
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                       shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.buf_ = buf_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<S>>(*buf_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const S& x : *buf_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  S max_abs() const {
    S m = 0;
    for (const S& x : *buf_) m = std::max(m, static_cast<S>(std::abs(x)));
    return m;
  }

 private:
  void check_shape() const {
    for (int64_t d : shape_)
      if (d <= 0)
        throw ShapeError("tensor: non-positive extent in " + shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<std::vector<S>> buf_;
};

// Integer index array (mask kept-lists, bias offset tables, labels).
struct ITensor {
  Shape shape;
  std::vector<int32_t> v;

  ITensor() = default;
  ITensor(Shape s, std::vector<int32_t> vals) : shape(std::move(s)), v(std::move(vals)) {
    if (static_cast<int64_t>(v.size()) != shape_numel(shape))
      throw ShapeError("itensor: value count does not match shape");
  }
  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
};

// ---------------------------------------------------------------------------
// Kernels. Forward-only numeric routines on tensors; the tape in tape.hpp
// pairs them with their adjoints.
// ---------------------------------------------------------------------------

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;
template <class S>
using EArr = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using ECArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

namespace k {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast axes, aligned to `out` rank.
inline std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t acc = 1;
  for (size_t i = 0; i < in.size(); ++i) {
    size_t j = in.size() - 1 - i;
    size_t oj = out.size() - 1 - i;
    st[oj] = (in[j] == 1 && out[oj] != 1) ? 0 : acc;
    acc *= in[j];
  }
  return st;
}

template <class S, class F>
Tensor<S> binary_bcast(const Tensor<S>& a, const Tensor<S>& b, F f, const char* op) {
  if (a.same_shape(b)) {
    Tensor<S> out(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  Shape os = broadcast_shape(a.shape(), b.shape(), op);
  Tensor<S> out(os);
  auto sa = bcast_strides(a.shape(), os);
  auto sb = bcast_strides(b.shape(), os);
  int r = static_cast<int>(os.size());
  std::vector<int64_t> idx(os.size(), 0);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  int64_t n = out.numel();
  int64_t inner = os.empty() ? 1 : os.back();
  int64_t sa_in = os.empty() ? 0 : sa.back();
  int64_t sb_in = os.empty() ? 0 : sb.back();
  int64_t oa = 0, ob = 0;
  for (int64_t base = 0; base < n; base += inner) {
    for (int64_t i = 0; i < inner; ++i)
      po[base + i] = f(pa[oa + i * sa_in], pb[ob + i * sb_in]);
    // advance multi-index over all but the innermost axis
    for (int d = r - 2; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      oa += sa[static_cast<size_t>(d)];
      ob += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      oa -= sa[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      ob -= sb[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return out;
}

// Sum-reduce `g` down to `target` shape (adjoint of broadcasting).
template <class S>
Tensor<S> reduce_to_shape(const Tensor<S>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<S> out(target);
  auto st = bcast_strides(target, g.shape());
  const Shape& gs = g.shape();
  int r = static_cast<int>(gs.size());
  std::vector<int64_t> idx(gs.size(), 0);
  const S* pg = g.data();
  S* po = out.data();
  int64_t n = g.numel();
  int64_t inner = gs.empty() ? 1 : gs.back();
  int64_t st_in = gs.empty() ? 0 : st.back();
  int64_t ot = 0;
  for (int64_t base = 0; base < n; base += inner) {
    for (int64_t i = 0; i < inner; ++i) po[ot + i * st_in] += pg[base + i];
    for (int d = r - 2; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      ot += st[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < gs[static_cast<size_t>(d)]) break;
      ot -= st[static_cast<size_t>(d)] * gs[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return out;
}

template <class S>
void axpy(Tensor<S>& acc, const Tensor<S>& x, S alpha = S(1)) {
  EArr<S>(acc.data(), acc.numel()) += ECArr<S>(x.data(), x.numel()) * alpha;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_bcast(a, b, [](S x, S y) { return x + y; }, "add");
}
template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_bcast(a, b, [](S x, S y) { return x - y; }, "sub");
}
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_bcast(a, b, [](S x, S y) { return x * y; }, "mul");
}
template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_bcast(a, b, [](S x, S y) { return x / y; }, "div");
}

template <class S>
Tensor<S> affine(const Tensor<S>& a, S scale, S shift) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0, n = a.numel(); i < n; ++i) po[i] = pa[i] * scale + shift;
  return out;
}

// Batched matmul: (..., m, k) x (..., k, n) with equal leading dims, or a
// rank-2 rhs broadcast across the lhs batch.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: ranks " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int64_t m = a.dim(a.rank() - 2), ka = a.dim(a.rank() - 1);
  int64_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  bool rhs2d = b.rank() == 2 && a.rank() > 2;
  if (ka != kb ||
      (!rhs2d && !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                             b.shape().end() - 2)) ||
      (!rhs2d && a.rank() != b.rank()))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are incompatible");
  Shape os(a.shape().begin(), a.shape().end() - 2);
  int64_t batch = shape_numel(os);
  os.push_back(m);
  os.push_back(n);
  Tensor<S> out(os);
  if (rhs2d) {
    ECMap<S> A(a.data(), batch * m, ka);
    ECMap<S> B(b.data(), kb, n);
    EMap<S>(out.data(), batch * m, n).noalias() = A * B;
    return out;
  }
  for (int64_t i = 0; i < batch; ++i) {
    ECMap<S> A(a.data() + i * m * ka, m, ka);
    ECMap<S> B(b.data() + i * kb * n, kb, n);
    EMap<S>(out.data() + i * m * n, m, n).noalias() = A * B;
  }
  return out;
}

template <class S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: rank < 2");
  Shape os = a.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  int64_t m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
  int64_t batch = a.numel() / (m * n);
  Tensor<S> out(os);
  for (int64_t i = 0; i < batch; ++i) {
    ECMap<S> A(a.data() + i * m * n, m, n);
    EMap<S>(out.data() + i * m * n, n, m) = A.transpose();
  }
  return out;
}

template <class S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
  int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: bad perm size");
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i) + 1] * a.dim(i + 1);
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  Tensor<S> out(os);
  const S* pa = a.data();
  S* po = out.data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t off = 0;
  int64_t n = a.numel();
  int64_t inner = r > 0 ? os[static_cast<size_t>(r - 1)] : 1;
  int64_t inner_stride = r > 0 ? src_stride[static_cast<size_t>(r - 1)] : 0;
  for (int64_t base = 0; base < n; base += inner) {
    for (int64_t i = 0; i < inner; ++i) po[base + i] = pa[off + i * inner_stride];
    for (int d = r - 2; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      off += src_stride[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      off -= src_stride[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != os[static_cast<size_t>(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()));
    total += p.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  Tensor<S> out(os);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];
  int64_t out_row = total * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t rows = p.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(p.data() + o * rows, p.data() + (o + 1) * rows,
                out.data() + o * out_row + off);
    off += rows;
  }
  return out;
}

template <class S>
std::vector<Tensor<S>> split(const Tensor<S>& a, int axis, const std::vector<int64_t>& sizes) {
  int r = a.rank();
  if (axis < 0 || axis >= r) throw ShapeError("split: bad axis");
  int64_t total = 0;
  for (int64_t s : sizes) total += s;
  if (total != a.dim(axis)) throw ShapeError("split: sizes do not cover axis");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
  int64_t in_row = a.dim(axis) * inner;
  std::vector<Tensor<S>> parts;
  int64_t off = 0;
  for (int64_t s : sizes) {
    Shape ps = a.shape();
    ps[static_cast<size_t>(axis)] = s;
    Tensor<S> p(ps);
    int64_t rows = s * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(a.data() + o * in_row + off, a.data() + o * in_row + off + rows,
                p.data() + o * rows);
    parts.push_back(std::move(p));
    off += rows;
  }
  return parts;
}

// Gather rows along the second-to-last axis: (N,d) + idx(n) -> (n,d), or
// batched (B,N,d) + idx(B,n) -> (B,n,d).
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, const ITensor& idx) {
  if (a.rank() == 2 && idx.rank() == 1) {
    int64_t d = a.dim(1), n = idx.numel();
    Tensor<S> out({n, d});
    for (int64_t i = 0; i < n; ++i)
      std::copy(a.data() + idx.v[static_cast<size_t>(i)] * d,
                a.data() + (idx.v[static_cast<size_t>(i)] + 1) * d, out.data() + i * d);
    return out;
  }
  if (a.rank() == 3 && idx.rank() == 2 && a.dim(0) == idx.dim(0)) {
    int64_t B = a.dim(0), N = a.dim(1), d = a.dim(2), n = idx.dim(1);
    Tensor<S> out({B, n, d});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i) {
        int64_t r = idx.v[static_cast<size_t>(b * n + i)];
        std::copy(a.data() + (b * N + r) * d, a.data() + (b * N + r + 1) * d,
                  out.data() + (b * n + i) * d);
      }
    return out;
  }
  throw ShapeError("gather_rows: shapes " + shape_str(a.shape()) + " idx " +
                   shape_str(idx.shape));
}

// Scatter-add rows into an (N,d) (or (B,N,d)) zero tensor at `idx`.
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& a, const ITensor& idx, int64_t N) {
  if (a.rank() == 2 && idx.rank() == 1) {
    int64_t d = a.dim(1), n = a.dim(0);
    Tensor<S> out({N, d});
    for (int64_t i = 0; i < n; ++i) {
      int64_t r = idx.v[static_cast<size_t>(i)];
      for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] += a.data()[i * d + j];
    }
    return out;
  }
  if (a.rank() == 3 && idx.rank() == 2 && a.dim(0) == idx.dim(0)) {
    int64_t B = a.dim(0), n = a.dim(1), d = a.dim(2);
    Tensor<S> out({B, N, d});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i) {
        int64_t r = idx.v[static_cast<size_t>(b * n + i)];
        for (int64_t j = 0; j < d; ++j)
          out.data()[(b * N + r) * d + j] += a.data()[(b * n + i) * d + j];
      }
    return out;
  }
  throw ShapeError("scatter_rows: shapes " + shape_str(a.shape()) + " idx " +
                   shape_str(idx.shape));
}

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
  int64_t d = a.dim(a.rank() - 1);
  int64_t rows = a.numel() / d;
  Tensor<S> out(a.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = a.data() + r * d;
    S* y = out.data() + r * d;
    S mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    S sum = 0;
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    S inv = S(1) / sum;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  return out;
}

// Normalizes the last axis; also emits per-row mean and reciprocal stddev for
// the adjoint.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& a, S eps, Tensor<S>* mean_out, Tensor<S>* rstd_out) {
  int64_t d = a.dim(a.rank() - 1);
  int64_t rows = a.numel() / d;
  Tensor<S> out(a.shape());
  Tensor<S> mean({rows}), rstd({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = a.data() + r * d;
    S* y = out.data() + r * d;
    S m = 0;
    for (int64_t i = 0; i < d; ++i) m += x[i];
    m /= static_cast<S>(d);
    S v = 0;
    for (int64_t i = 0; i < d; ++i) v += (x[i] - m) * (x[i] - m);
    v /= static_cast<S>(d);
    S rs = S(1) / std::sqrt(v + eps);
    for (int64_t i = 0; i < d; ++i) y[i] = (x[i] - m) * rs;
    mean[r] = m;
    rstd[r] = rs;
  }
  if (mean_out) *mean_out = std::move(mean);
  if (rstd_out) *rstd_out = std::move(rstd);
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  const S* x = a.data();
  S* y = out.data();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0, n = a.numel(); i < n; ++i) {
    double xi = static_cast<double>(x[i]);
    y[i] = static_cast<S>(xi * 0.5 * (1.0 + std::erf(xi * inv_sqrt2)));
  }
  return out;
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  const S* x = a.data();
  S* y = out.data();
  for (int64_t i = 0, n = a.numel(); i < n; ++i) {
    S s = S(1) / (S(1) + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
  return out;
}

template <class S>
S sum_all(const Tensor<S>& a) {
  S s = 0;
  const S* x = a.data();
  for (int64_t i = 0, n = a.numel(); i < n; ++i) s += x[i];
  return s;
}

// Reduce the trailing `k` axes; result keeps the leading axes.
template <class S>
Tensor<S> sum_lastdims(const Tensor<S>& a, int kdims) {
  int r = a.rank();
  if (kdims <= 0 || kdims > r) throw ShapeError("sum_lastdims: bad k");
  Shape os(a.shape().begin(), a.shape().end() - kdims);
  int64_t inner = 1;
  for (int i = r - kdims; i < r; ++i) inner *= a.dim(i);
  int64_t outer = a.numel() / inner;
  Tensor<S> out(os);
  for (int64_t o = 0; o < outer; ++o) {
    S s = 0;
    const S* x = a.data() + o * inner;
    for (int64_t i = 0; i < inner; ++i) s += x[i];
    out.data()[o] = s;
  }
  return out;
}

// table (H, L) indexed by an (n, n) or (B, n, n) offset matrix.
template <class S>
Tensor<S> table_lookup(const Tensor<S>& table, const ITensor& idx) {
  int64_t H = table.dim(0), L = table.dim(1);
  int64_t cells = idx.numel();
  Shape os;
  os.push_back(H);
  for (int64_t d : idx.shape) os.push_back(d);
  if (idx.rank() == 3) {  // (B,n,n) -> (B,H,n,n)
    os = Shape{idx.dim(0), H, idx.dim(1), idx.dim(2)};
    int64_t B = idx.dim(0), nn = idx.dim(1) * idx.dim(2);
    Tensor<S> out(os);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < nn; ++i) {
          int32_t t = idx.v[static_cast<size_t>(b * nn + i)];
          if (t < 0 || t >= L) throw ShapeError("table_lookup: offset out of range");
          out.data()[(b * H + h) * nn + i] = table.data()[h * L + t];
        }
    return out;
  }
  Tensor<S> out(os);
  for (int64_t h = 0; h < H; ++h)
    for (int64_t i = 0; i < cells; ++i) {
      int32_t t = idx.v[static_cast<size_t>(i)];
      if (t < 0 || t >= L) throw ShapeError("table_lookup: offset out of range");
      out.data()[h * cells + i] = table.data()[h * L + t];
    }
  return out;
}

}  // namespace k

}  // namespace mdt

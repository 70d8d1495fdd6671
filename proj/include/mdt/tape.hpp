#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mdt/tensor.hpp"

namespace mdt {

// Set to make every primitive verify its output is finite (slow; used by
// tests and the trainer's abort-with-diagnostics path).
inline bool& tape_check_finite() {
  static bool flag = false;
  return flag;
}

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int32_t id = -1;
  bool defined() const { return tape != nullptr; }
  const Tensor<S>& val() const;
  const Shape& shape() const { return val().shape(); }
  int64_t dim(int i) const { return val().dim(i); }
  int rank() const { return val().rank(); }
};

// Record of primitive applications. Creation order is a topological order, so
// the backward sweep is a reverse scan running per-node adjoint closures.
template <class S>
class Tape {
 public:
  Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, "leaf");
  }
  Var<S> constant(Tensor<S> value) { return leaf(std::move(value), false); }

  const Tensor<S>& val(Var<S> v) const { return nodes_[size_t(v.id)].value; }
  bool requires_grad(Var<S> v) const { return nodes_[size_t(v.id)].requires_grad; }

  // Gradient of the last backward() target w.r.t. v; exact zeros if v never
  // participated in the scalar's history.
  Tensor<S> grad(Var<S> v) const {
    const Node& n = nodes_[size_t(v.id)];
    if (n.grad.defined()) return n.grad;
    return Tensor<S>::zeros(n.value.shape());
  }

  void backward(Var<S> root) {
    Node& r = nodes_[size_t(root.id)];
    if (r.value.numel() != 1) throw ShapeError("backward: root is not a scalar");
    if (!r.requires_grad) return;
    accum(root.id, Tensor<S>::full(r.value.shape(), S(1)));
    for (int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.grad.defined() && n.back) n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  // --- used by op implementations ---

  Var<S> push(Tensor<S> value, bool requires_grad, const char* opname) {
    if (tape_check_finite() && !value.all_finite())
      throw NumericError(std::string("non-finite output of primitive '") + opname + "'");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<S>{this, int32_t(nodes_.size() - 1)};
  }

  void set_back(Var<S> v, std::function<void(Tape&, const Tensor<S>&)> fn) {
    if (!nodes_[size_t(v.id)].requires_grad) return;
    int32_t self = v.id;
    nodes_[size_t(v.id)].back = [self, fn = std::move(fn)](Tape& tp) {
      fn(tp, tp.nodes_[size_t(self)].grad);
    };
  }

  void accum(int32_t id, const Tensor<S>& g) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad.defined()) {
      n.grad = g.clone();
    } else {
      k::axpy(n.grad, g);
    }
  }

  // Accumulate into the sub-range [offset, offset+extent) of `axis`.
  void accum_slice(int32_t id, const Tensor<S>& g, int axis, int64_t offset) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad.defined()) n.grad = Tensor<S>::zeros(n.value.shape());
    int64_t outer = 1, inner = 1;
    int r = n.value.rank();
    for (int i = 0; i < axis; ++i) outer *= n.value.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= n.value.dim(i);
    int64_t full_row = n.value.dim(axis) * inner;
    int64_t part_row = g.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o) {
      S* dst = n.grad.data() + o * full_row + offset * inner;
      const S* src = g.data() + o * part_row;
      for (int64_t i = 0; i < part_row; ++i) dst[i] += src[i];
    }
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void(Tape&)> back;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

template <class S>
const Tensor<S>& Var<S>::val() const {
  return tape->val(*this);
}

// ---------------------------------------------------------------------------
// Primitives. Each wraps a kernel and registers the adjoint.
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
void bcast_accum(Tape<S>& t, int32_t id, const Tensor<S>& g, const Shape& in_shape) {
  if (g.shape() == in_shape) {
    t.accum(id, g);
  } else {
    t.accum(id, k::reduce_to_shape(g, in_shape));
  }
}
}  // namespace detail

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  bool ga = t.requires_grad(a), gb = t.requires_grad(b);
  Var<S> v = t.push(k::add(a.val(), b.val()), ga || gb, "add");
  t.set_back(v, [a, b, ga, gb, sa = a.shape(), sb = b.shape()](Tape<S>& tp, const Tensor<S>& g) {
    if (ga) detail::bcast_accum(tp, a.id, g, sa);
    if (gb) detail::bcast_accum(tp, b.id, g, sb);
  });
  return v;
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  bool ga = t.requires_grad(a), gb = t.requires_grad(b);
  Var<S> v = t.push(k::sub(a.val(), b.val()), ga || gb, "sub");
  t.set_back(v, [a, b, ga, gb, sa = a.shape(), sb = b.shape()](Tape<S>& tp, const Tensor<S>& g) {
    if (ga) detail::bcast_accum(tp, a.id, g, sa);
    if (gb) {
      Tensor<S> neg = k::affine(g, S(-1), S(0));
      detail::bcast_accum(tp, b.id, neg, sb);
    }
  });
  return v;
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  bool ga = t.requires_grad(a), gb = t.requires_grad(b);
  Var<S> v = t.push(k::mul(a.val(), b.val()), ga || gb, "mul");
  t.set_back(v, [a, b, ga, gb, sa = a.shape(), sb = b.shape()](Tape<S>& tp, const Tensor<S>& g) {
    if (ga) detail::bcast_accum(tp, a.id, k::mul(g, b.val()), sa);
    if (gb) detail::bcast_accum(tp, b.id, k::mul(g, a.val()), sb);
  });
  return v;
}

template <class S>
Var<S> div(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  bool ga = t.requires_grad(a), gb = t.requires_grad(b);
  Var<S> v = t.push(k::div(a.val(), b.val()), ga || gb, "div");
  t.set_back(v, [a, b, ga, gb, sa = a.shape(), sb = b.shape()](Tape<S>& tp, const Tensor<S>& g) {
    if (ga) detail::bcast_accum(tp, a.id, k::div(g, b.val()), sa);
    if (gb) {
      // d/db (a/b) = -a / b^2
      Tensor<S> bb = k::mul(b.val(), b.val());
      Tensor<S> gb_full = k::affine(k::mul(g, k::div(a.val(), bb)), S(-1), S(0));
      detail::bcast_accum(tp, b.id, gb_full, sb);
    }
  });
  return v;
}

template <class S>
Var<S> affine(Var<S> a, S scale, S shift) {
  Tape<S>& t = *a.tape;
  bool ga = t.requires_grad(a);
  Var<S> v = t.push(k::affine(a.val(), scale, shift), ga, "affine");
  t.set_back(v, [a, scale](Tape<S>& tp, const Tensor<S>& g) {
    tp.accum(a.id, k::affine(g, scale, S(0)));
  });
  return v;
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  return affine(a, c, S(0));
}
template <class S>
Var<S> neg(Var<S> a) {
  return affine(a, S(-1), S(0));
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  bool ga = t.requires_grad(a), gb = t.requires_grad(b);
  Var<S> v = t.push(k::matmul(a.val(), b.val()), ga || gb, "matmul");
  t.set_back(v, [a, b, ga, gb](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& A = a.val();
    const Tensor<S>& B = b.val();
    int64_t m = A.dim(A.rank() - 2), kk = A.dim(A.rank() - 1), n = B.dim(B.rank() - 1);
    int64_t batch = A.numel() / (m * kk);
    bool rhs2d = B.rank() == 2 && A.rank() > 2;
    if (rhs2d) {
      if (ga) {
        Tensor<S> dA(A.shape());
        ECMap<S> G(g.data(), batch * m, n);
        ECMap<S> Bm(B.data(), kk, n);
        EMap<S>(dA.data(), batch * m, kk).noalias() = G * Bm.transpose();
        tp.accum(a.id, dA);
      }
      if (gb) {
        Tensor<S> dB(B.shape());
        ECMap<S> G(g.data(), batch * m, n);
        ECMap<S> Am(A.data(), batch * m, kk);
        EMap<S>(dB.data(), kk, n).noalias() = Am.transpose() * G;
        tp.accum(b.id, dB);
      }
      return;
    }
    if (ga) {
      Tensor<S> dA(A.shape());
      for (int64_t i = 0; i < batch; ++i) {
        ECMap<S> G(g.data() + i * m * n, m, n);
        ECMap<S> Bm(B.data() + i * kk * n, kk, n);
        EMap<S>(dA.data() + i * m * kk, m, kk).noalias() = G * Bm.transpose();
      }
      tp.accum(a.id, dA);
    }
    if (gb) {
      Tensor<S> dB(B.shape());
      for (int64_t i = 0; i < batch; ++i) {
        ECMap<S> G(g.data() + i * m * n, m, n);
        ECMap<S> Am(A.data() + i * m * kk, m, kk);
        EMap<S>(dB.data() + i * kk * n, kk, n).noalias() = Am.transpose() * G;
      }
      tp.accum(b.id, dB);
    }
  });
  return v;
}

template <class S>
Var<S> transpose_last2(Var<S> a) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::transpose_last2(a.val()), t.requires_grad(a), "transpose");
  t.set_back(v, [a](Tape<S>& tp, const Tensor<S>& g) {
    tp.accum(a.id, k::transpose_last2(g));
  });
  return v;
}

template <class S>
Var<S> permute(Var<S> a, std::vector<int> perm) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::permute(a.val(), perm), t.requires_grad(a), "permute");
  t.set_back(v, [a, inv = k::inverse_perm(perm)](Tape<S>& tp, const Tensor<S>& g) {
    tp.accum(a.id, k::permute(g, inv));
  });
  return v;
}

template <class S>
Var<S> reshape(Var<S> a, Shape shape) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(a.val().reshaped(std::move(shape)), t.requires_grad(a), "reshape");
  t.set_back(v, [a, sa = a.shape()](Tape<S>& tp, const Tensor<S>& g) {
    tp.accum(a.id, g.reshaped(sa));
  });
  return v;
}

template <class S>
Var<S> concat(const std::vector<Var<S>>& parts, int axis) {
  Tape<S>& t = *parts.at(0).tape;
  std::vector<Tensor<S>> vals;
  bool rg = false;
  for (const auto& p : parts) {
    vals.push_back(p.val());
    rg = rg || t.requires_grad(p);
  }
  Var<S> v = t.push(k::concat(vals, axis), rg, "concat");
  t.set_back(v, [parts, axis](Tape<S>& tp, const Tensor<S>& g) {
    std::vector<int64_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.dim(axis));
    auto gs = k::split(g, axis, sizes);
    for (size_t i = 0; i < parts.size(); ++i)
      if (tp.requires_grad(parts[i])) tp.accum(parts[i].id, gs[i]);
  });
  return v;
}

template <class S>
std::vector<Var<S>> split(Var<S> a, int axis, const std::vector<int64_t>& sizes) {
  Tape<S>& t = *a.tape;
  auto parts = k::split(a.val(), axis, sizes);
  std::vector<Var<S>> out;
  int64_t offset = 0;
  for (auto& p : parts) {
    int64_t extent = p.dim(axis);
    Var<S> v = t.push(std::move(p), t.requires_grad(a), "split");
    t.set_back(v, [a, axis, offset](Tape<S>& tp, const Tensor<S>& g) {
      tp.accum_slice(a.id, g, axis, offset);
    });
    out.push_back(v);
    offset += extent;
  }
  return out;
}

template <class S>
Var<S> gather_rows(Var<S> a, const ITensor& idx) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::gather_rows(a.val(), idx), t.requires_grad(a), "gather_rows");
  t.set_back(v, [a, idx, sa = a.shape()](Tape<S>& tp, const Tensor<S>& g) {
    int64_t N = sa[sa.size() - 2];
    tp.accum(a.id, k::scatter_rows(g, idx, N));
  });
  return v;
}

template <class S>
Var<S> scatter_rows(Var<S> a, const ITensor& idx, int64_t N) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::scatter_rows(a.val(), idx, N), t.requires_grad(a), "scatter_rows");
  t.set_back(v, [a, idx](Tape<S>& tp, const Tensor<S>& g) {
    tp.accum(a.id, k::gather_rows(g, idx));
  });
  return v;
}

template <class S>
Var<S> softmax_lastdim(Var<S> a) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::softmax_lastdim(a.val()), t.requires_grad(a), "softmax");
  t.set_back(v, [a, v](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& y = v.val();
    int64_t d = y.dim(y.rank() - 1);
    int64_t rows = y.numel() / d;
    Tensor<S> dx(y.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const S* yr = y.data() + r * d;
      const S* gr = g.data() + r * d;
      S dot = 0;
      for (int64_t i = 0; i < d; ++i) dot += yr[i] * gr[i];
      S* o = dx.data() + r * d;
      for (int64_t i = 0; i < d; ++i) o[i] = (gr[i] - dot) * yr[i];
    }
    tp.accum(a.id, dx);
  });
  return v;
}

// Non-affine layer norm over the last axis.
template <class S>
Var<S> layer_norm(Var<S> a, S eps = S(1e-6)) {
  Tape<S>& t = *a.tape;
  Tensor<S> mean, rstd;
  Tensor<S> out = k::layer_norm(a.val(), eps, &mean, &rstd);
  Var<S> v = t.push(std::move(out), t.requires_grad(a), "layer_norm");
  t.set_back(v, [a, v, mean, rstd](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& y = v.val();  // y = (x - m) * rstd
    int64_t d = y.dim(y.rank() - 1);
    int64_t rows = y.numel() / d;
    Tensor<S> dx(y.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const S* yr = y.data() + r * d;
      const S* gr = g.data() + r * d;
      S gmean = 0, gymean = 0;
      for (int64_t i = 0; i < d; ++i) {
        gmean += gr[i];
        gymean += gr[i] * yr[i];
      }
      gmean /= S(d);
      gymean /= S(d);
      S rs = rstd[r];
      S* o = dx.data() + r * d;
      for (int64_t i = 0; i < d; ++i) o[i] = rs * (gr[i] - gmean - yr[i] * gymean);
    }
    tp.accum(a.id, dx);
  });
  return v;
}

// Layer norm with learnable scale/shift (rank-1 gain/bias over the last axis).
template <class S>
Var<S> layer_norm_affine(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-6)) {
  return add(mul(layer_norm(a, eps), gain), bias);
}

template <class S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::gelu(a.val()), t.requires_grad(a), "gelu");
  t.set_back(v, [a](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& x = a.val();
    Tensor<S> dx(x.shape());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (int64_t i = 0, n = x.numel(); i < n; ++i) {
      double xi = double(x[i]);
      double cdf = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
      dx[i] = g[i] * S(cdf + xi * pdf);
    }
    tp.accum(a.id, dx);
  });
  return v;
}

template <class S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::silu(a.val()), t.requires_grad(a), "silu");
  t.set_back(v, [a](Tape<S>& tp, const Tensor<S>& g) {
    const Tensor<S>& x = a.val();
    Tensor<S> dx(x.shape());
    for (int64_t i = 0, n = x.numel(); i < n; ++i) {
      S s = S(1) / (S(1) + std::exp(-x[i]));
      dx[i] = g[i] * (s * (S(1) + x[i] * (S(1) - s)));
    }
    tp.accum(a.id, dx);
  });
  return v;
}

template <class S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(Tensor<S>::scalar(k::sum_all(a.val())), t.requires_grad(a), "sum");
  t.set_back(v, [a](Tape<S>& tp, const Tensor<S>& g) {
    tp.accum(a.id, Tensor<S>::full(a.shape(), g[0]));
  });
  return v;
}

template <class S>
Var<S> mean_all(Var<S> a) {
  return scale(sum_all(a), S(1) / S(a.val().numel()));
}

template <class S>
Var<S> sum_lastdims(Var<S> a, int kdims) {
  Tape<S>& t = *a.tape;
  Var<S> v = t.push(k::sum_lastdims(a.val(), kdims), t.requires_grad(a), "sum_lastdims");
  t.set_back(v, [a, kdims](Tape<S>& tp, const Tensor<S>& g) {
    const Shape& sa = a.shape();
    int64_t inner = 1;
    for (int i = a.rank() - kdims; i < a.rank(); ++i) inner *= sa[size_t(i)];
    Tensor<S> dx(sa);
    int64_t outer = g.numel();
    for (int64_t o = 0; o < outer; ++o) {
      S gv = g[o];
      S* p = dx.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) p[i] = gv;
    }
    tp.accum(a.id, dx);
  });
  return v;
}

template <class S>
Var<S> mean_lastdims(Var<S> a, int kdims) {
  int64_t inner = 1;
  for (int i = a.rank() - kdims; i < a.rank(); ++i) inner *= a.dim(i);
  return scale(sum_lastdims(a, kdims), S(1) / S(inner));
}

// Relative-bias style lookup: table (H, L) indexed by an (n, n) or (B, n, n)
// integer offset matrix.
template <class S>
Var<S> table_lookup(Var<S> table, const ITensor& idx) {
  Tape<S>& t = *table.tape;
  Var<S> v = t.push(k::table_lookup(table.val(), idx), t.requires_grad(table), "table_lookup");
  t.set_back(v, [table, idx](Tape<S>& tp, const Tensor<S>& g) {
    const Shape& ts = table.shape();
    int64_t H = ts[0], L = ts[1];
    Tensor<S> dt(ts);
    if (idx.rank() == 3) {
      int64_t B = idx.dim(0), nn = idx.dim(1) * idx.dim(2);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t i = 0; i < nn; ++i)
            dt.data()[h * L + idx.v[size_t(b * nn + i)]] += g.data()[(b * H + h) * nn + i];
    } else {
      int64_t nn = idx.numel();
      for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < nn; ++i)
          dt.data()[h * L + idx.v[size_t(i)]] += g.data()[h * nn + i];
    }
    tp.accum(table.id, dt);
  });
  return v;
}

// Detaches the value from the gradient history.
template <class S>
Var<S> stop_grad(Var<S> a) {
  return a.tape->constant(a.val());
}

}  // namespace mdt

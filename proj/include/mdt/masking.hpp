#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "mdt/common.hpp"
#include "mdt/rng.hpp"
#include "mdt/tensor.hpp"

namespace mdt {

// Grid bookkeeping between a c x h x w latent and its token sequence.
struct TokenGridGeometry {
  int64_t c = 0, h = 0, w = 0, p = 0;
  int64_t g_h = 0, g_w = 0;

  TokenGridGeometry() = default;
  TokenGridGeometry(int64_t c_, int64_t h_, int64_t w_, int64_t p_)
      : c(c_), h(h_), w(w_), p(p_) {
    if (p <= 0 || h % p != 0 || w % p != 0)
      throw ConfigError("patch size " + std::to_string(p) +
                        " does not divide latent extents " + std::to_string(h) + "x" +
                        std::to_string(w));
    g_h = h / p;
    g_w = w / p;
  }
  int64_t tokens() const { return g_h * g_w; }
  int64_t raw_dim() const { return c * p * p; }
};

// Token k holds the patch at grid position (k / g_w, k % g_w); features are
// flattened channels-then-rows-then-cols.
template <class S>
Tensor<S> patchify(const Tensor<S>& z, const TokenGridGeometry& g) {
  if (z.rank() != 3 || z.dim(0) != g.c || z.dim(1) != g.h || z.dim(2) != g.w)
    throw ConfigError("patchify: latent " + shape_str(z.shape()) +
                      " does not match geometry");
  Tensor<S> out({g.tokens(), g.raw_dim()});
  for (int64_t k = 0; k < g.tokens(); ++k) {
    int64_t gr = k / g.g_w, gc = k % g.g_w;
    S* row = out.data() + k * g.raw_dim();
    for (int64_t ch = 0; ch < g.c; ++ch)
      for (int64_t pr = 0; pr < g.p; ++pr)
        for (int64_t pc = 0; pc < g.p; ++pc)
          row[(ch * g.p + pr) * g.p + pc] =
              z[(ch * g.h + gr * g.p + pr) * g.w + gc * g.p + pc];
  }
  return out;
}

template <class S>
Tensor<S> unpatchify(const Tensor<S>& tokens, const TokenGridGeometry& g) {
  if (tokens.rank() != 2 || tokens.dim(0) != g.tokens() || tokens.dim(1) != g.raw_dim())
    throw ConfigError("unpatchify: tokens " + shape_str(tokens.shape()) +
                      " do not match geometry");
  Tensor<S> z({g.c, g.h, g.w});
  for (int64_t k = 0; k < g.tokens(); ++k) {
    int64_t gr = k / g.g_w, gc = k % g.g_w;
    const S* row = tokens.data() + k * g.raw_dim();
    for (int64_t ch = 0; ch < g.c; ++ch)
      for (int64_t pr = 0; pr < g.p; ++pr)
        for (int64_t pc = 0; pc < g.p; ++pc)
          z[(ch * g.h + gr * g.p + pr) * g.w + gc * g.p + pc] =
              row[(ch * g.p + pr) * g.p + pc];
  }
  return z;
}

// One masking draw: M[i]=1 marks a masked token, `kept` lists the zeros of M
// in ascending order. Exactly round_half_up(rho*N) tokens are masked.
struct MaskSpec {
  int64_t N = 0;
  double rho = 0.0;
  std::vector<uint8_t> M;
  std::vector<int32_t> kept;

  int64_t masked_count() const { return N - int64_t(kept.size()); }
  int64_t kept_count() const { return int64_t(kept.size()); }
};

inline MaskSpec sample_mask(int64_t N, double rho, Rng& rng) {
  if (!(rho >= 0.0) || rho >= 1.0) throw ConfigError("mask ratio must be in [0,1)");
  MaskSpec m;
  m.N = N;
  m.rho = rho;
  m.M.assign(size_t(N), 0);
  int64_t n_masked = round_half_up(rho * double(N));
  // partial Fisher-Yates over token indices; first n_masked become masked
  std::vector<int32_t> perm(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) perm[size_t(i)] = int32_t(i);
  for (int64_t i = 0; i < n_masked; ++i) {
    int64_t j = rng.uniform_int(i, N - 1);
    std::swap(perm[size_t(i)], perm[size_t(j)]);
  }
  for (int64_t i = 0; i < n_masked; ++i) m.M[size_t(perm[size_t(i)])] = 1;
  m.kept.reserve(size_t(N - n_masked));
  for (int64_t i = 0; i < N; ++i)
    if (!m.M[size_t(i)]) m.kept.push_back(int32_t(i));
  return m;
}

inline double sample_mask_ratio(double lo, double hi, Rng& rng) {
  if (!(lo >= 0.0) || lo > hi || hi >= 1.0)
    throw ConfigError("mask ratio range must satisfy 0 <= lo <= hi < 1");
  if (lo == hi) return lo;
  return lo + rng.uniform() * (hi - lo);
}

// Rows gathered at kept indices, order preserved.
template <class S>
Tensor<S> apply_mask(const Tensor<S>& tokens, const MaskSpec& m) {
  if (tokens.rank() != 2 || tokens.dim(0) != m.N)
    throw ShapeError("apply_mask: tokens " + shape_str(tokens.shape()) +
                     " vs N=" + std::to_string(m.N));
  ITensor idx({m.kept_count()}, m.kept);
  return k::gather_rows(tokens, idx);
}

// k = (1-M) . q + M . k_hat, selecting whole rows.
template <class S>
Tensor<S> masked_shortcut(const Tensor<S>& q, const Tensor<S>& k_hat, const MaskSpec& m) {
  if (!q.same_shape(k_hat) || q.dim(0) != m.N)
    throw ShapeError("masked_shortcut: shapes " + shape_str(q.shape()) + " vs " +
                     shape_str(k_hat.shape()));
  Tensor<S> out(q.shape());
  int64_t d = q.numel() / q.dim(0);
  for (int64_t i = 0; i < m.N; ++i) {
    const S* src = m.M[size_t(i)] ? k_hat.data() : q.data();
    std::copy(src + i * d, src + (i + 1) * d, out.data() + i * d);
  }
  return out;
}

// Relative-offset index matrix for the positions present: entry (i,j) is the
// row-major index of (dr + g_h - 1, dc + g_w - 1) in a (2g_h-1) x (2g_w-1)
// table, where (dr, dc) is the 2-D offset between grid positions i and j.
inline ITensor rel_offset_index(const TokenGridGeometry& g,
                                const std::vector<int32_t>& positions) {
  int64_t n = int64_t(positions.size());
  int64_t wspan = 2 * g.g_w - 1;
  std::vector<int32_t> v(size_t(n * n));
  for (int64_t i = 0; i < n; ++i) {
    int64_t ri = positions[size_t(i)] / g.g_w, ci = positions[size_t(i)] % g.g_w;
    for (int64_t j = 0; j < n; ++j) {
      int64_t rj = positions[size_t(j)] / g.g_w, cj = positions[size_t(j)] % g.g_w;
      v[size_t(i * n + j)] = int32_t((ri - rj + g.g_h - 1) * wspan + (ci - cj + g.g_w - 1));
    }
  }
  return ITensor({n, n}, std::move(v));
}

inline std::vector<int32_t> all_positions(int64_t N) {
  std::vector<int32_t> p(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) p[size_t(i)] = int32_t(i);
  return p;
}

}  // namespace mdt

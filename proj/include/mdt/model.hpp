#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdt/masking.hpp"
#include "mdt/params.hpp"
#include "mdt/tape.hpp"

namespace mdt {

enum class Variant { v1, v2 };
enum class ForwardMode { train_masked, train_full, inference };

struct ModelConfig {
  // latent geometry
  int64_t c = 4, h = 32, w = 32, p = 2;
  // transformer
  int64_t dim = 384, heads = 6, depth = 12, n2 = 2;
  int64_t classes = 1000;
  Variant variant = Variant::v1;
  bool plain = false;              // DiT-style control: one stack, no side path
  bool side_interpolater = true;   // ablation switch
  bool rel_bias = true;            // ablation switch
  bool learn_sigma = false;        // second channel group predicts variance logit
  int64_t time_freq_dim = 256;

  int64_t n1() const { return plain ? depth : depth - n2; }
  int64_t head_dim() const { return dim / heads; }
  int64_t null_label() const { return classes; }
  int64_t out_channels() const { return learn_sigma ? 2 * c : c; }
  TokenGridGeometry geometry() const { return TokenGridGeometry(c, h, w, p); }

  // Size presets follow the published table; the decoder depth for v2 follows
  // the per-size rule (deeper decoders for the 12-block sizes).
  static ModelConfig preset(const std::string& size, Variant variant) {
    ModelConfig m;
    m.variant = variant;
    if (size == "S") {
      m.depth = 12; m.dim = 384; m.heads = 6;
      m.n2 = variant == Variant::v2 ? 6 : 2;
    } else if (size == "B") {
      m.depth = 12; m.dim = 768; m.heads = 12;
      m.n2 = variant == Variant::v2 ? 6 : 2;
    } else if (size == "XL") {
      m.depth = 28; m.dim = 1152; m.heads = 16;
      m.n2 = variant == Variant::v2 ? 4 : 2;
    } else if (size == "toy") {
      m.depth = 8; m.dim = 64; m.heads = 4;
      m.n2 = variant == Variant::v2 ? 4 : 2;
      m.c = 2; m.h = 8; m.w = 8; m.classes = 2;
    } else {
      throw ConfigError("unknown model size '" + size + "'");
    }
    return m;
  }

  void validate() const {
    if (dim % heads != 0) throw ConfigError("model: dim must be divisible by heads");
    if (!plain) {
      if (n2 < 1) throw ConfigError("model: n2 must be >= 1");
      if (n1() < 2) throw ConfigError("model: encoder depth must be >= 2");
      if (variant == Variant::v2 && n1() % 2 != 0)
        throw ConfigError("model: v2 long-shortcuts need an even encoder depth");
    }
    if (classes < 1) throw ConfigError("model: classes must be >= 1");
    geometry();  // validates divisibility
  }
};

// v2 long-shortcut wiring, 1-indexed blocks: input of block i concatenates
// the output of block N1-i+1 for the second half of the encoder (0 = none).
inline int64_t encoder_skip_source(int64_t n1, int64_t i) {
  if (i < 1 || i > n1) throw ConfigError("encoder_skip_source: bad block index");
  if (2 * i <= n1) return 0;
  return n1 - i + 1;
}

// Attention(Q,K,V) = Softmax(Q K^T / sqrt(d_k) + B_r) V with q,k,v laid out
// (..., n, d_k) and an optional additive bias over the positions present.
template <class S>
Var<S> attention_with_bias(Var<S> q, Var<S> k, Var<S> v, std::optional<Var<S>> bias) {
  int64_t dh = q.dim(q.rank() - 1);
  Var<S> scores = scale(matmul(q, transpose_last2(k)), S(1.0 / std::sqrt(double(dh))));
  if (bias) {
    if (bias->dim(bias->rank() - 1) != q.dim(q.rank() - 2))
      throw ShapeError("attention: bias extent " + shape_str(bias->shape()) +
                       " does not match token count");
    scores = add(scores, *bias);
  }
  return matmul(softmax_lastdim(scores), v);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void add_block_params(ParameterTree<S>& t, const std::string& pfx, const ModelConfig& m,
                      Rng& rng) {
  int64_t d = m.dim;
  const S ws = S(0.02);
  t.emplace(pfx + "attn.qkv.w", Tensor<S>::randn({d, 3 * d}, rng, ws));
  t.emplace(pfx + "attn.qkv.b", Tensor<S>::zeros({3 * d}));
  t.emplace(pfx + "attn.proj.w", Tensor<S>::randn({d, d}, rng, ws));
  t.emplace(pfx + "attn.proj.b", Tensor<S>::zeros({d}));
  if (m.rel_bias) {
    auto g = m.geometry();
    int64_t span = (2 * g.g_h - 1) * (2 * g.g_w - 1);
    t.emplace(pfx + "attn.bias_table", Tensor<S>::zeros({m.heads, span}));
  }
  t.emplace(pfx + "mlp.fc1.w", Tensor<S>::randn({d, 4 * d}, rng, ws));
  t.emplace(pfx + "mlp.fc1.b", Tensor<S>::zeros({4 * d}));
  t.emplace(pfx + "mlp.fc2.w", Tensor<S>::randn({4 * d, d}, rng, ws));
  t.emplace(pfx + "mlp.fc2.b", Tensor<S>::zeros({d}));
  t.emplace(pfx + "adaln.w", Tensor<S>::randn({d, 6 * d}, rng, ws));
  t.emplace(pfx + "adaln.b", Tensor<S>::zeros({6 * d}));
}

}  // namespace detail

template <class S>
ParameterTree<S> init_params(const ModelConfig& m, Rng rng) {
  m.validate();
  ParameterTree<S> t;
  auto g = m.geometry();
  int64_t N = g.tokens(), d = m.dim;
  const S ws = S(0.02);

  t.emplace("embed.patch.w", Tensor<S>::randn({g.raw_dim(), d}, rng, ws));
  t.emplace("embed.patch.b", Tensor<S>::zeros({d}));
  t.emplace("embed.pos_encoder", Tensor<S>::randn({N, d}, rng, ws));
  t.emplace("embed.time.w1", Tensor<S>::randn({m.time_freq_dim, d}, rng, ws));
  t.emplace("embed.time.b1", Tensor<S>::zeros({d}));
  t.emplace("embed.time.w2", Tensor<S>::randn({d, d}, rng, ws));
  t.emplace("embed.time.b2", Tensor<S>::zeros({d}));
  t.emplace("embed.label.table", Tensor<S>::randn({m.classes + 1, d}, rng, ws));

  for (int64_t i = 0; i < m.n1(); ++i)
    detail::add_block_params(t, "enc." + std::to_string(i) + ".", m, rng);

  if (!m.plain) {
    t.emplace("embed.pos_side", Tensor<S>::randn({N, d}, rng, ws));
    t.emplace("embed.mask_token", Tensor<S>::randn({d}, rng, ws));
    if (m.side_interpolater) detail::add_block_params(t, "side.", m, rng);
    for (int64_t j = 0; j < m.n2; ++j)
      detail::add_block_params(t, "dec." + std::to_string(j) + ".", m, rng);
    if (m.variant == Variant::v2) {
      for (int64_t i = 0; i < m.n1(); ++i)
        if (encoder_skip_source(m.n1(), i + 1) > 0) {
          t.emplace("enc." + std::to_string(i) + ".fuse.w",
                    Tensor<S>::randn({2 * d, d}, rng, ws));
          t.emplace("enc." + std::to_string(i) + ".fuse.b", Tensor<S>::zeros({d}));
        }
      for (int64_t j = 0; j < m.n2; ++j) {
        t.emplace("dec." + std::to_string(j) + ".fuse.w",
                  Tensor<S>::randn({2 * d, d}, rng, ws));
        t.emplace("dec." + std::to_string(j) + ".fuse.b", Tensor<S>::zeros({d}));
      }
    }
  }

  t.emplace("head.adaln.w", Tensor<S>::randn({d, 2 * d}, rng, ws));
  t.emplace("head.adaln.b", Tensor<S>::zeros({2 * d}));
  t.emplace("head.out.w",
            Tensor<S>::randn({d, g.p * g.p * m.out_channels()}, rng, ws));
  t.emplace("head.out.b", Tensor<S>::zeros({g.p * g.p * m.out_channels()}));
  return t;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Per-step masking state for a batch; every sample draws its own positions at
// a shared ratio so the kept counts agree.
struct MaskBatch {
  std::vector<MaskSpec> specs;
  ITensor kept;      // (B, n_kept)
  ITensor bias_idx;  // (B, n_kept, n_kept) relative offsets of kept positions

  template <class S>
  Tensor<S> mask_float() const {  // (B, N, 1), 1 = masked
    int64_t B = int64_t(specs.size()), N = specs[0].N;
    Tensor<S> m({B, N, 1});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < N; ++i)
        m[b * N + i] = S(specs[size_t(b)].M[size_t(i)]);
    return m;
  }
};

inline MaskBatch make_mask_batch(std::vector<MaskSpec> specs, const TokenGridGeometry& g) {
  if (specs.empty()) throw ConfigError("mask batch: empty");
  int64_t n = specs[0].kept_count();
  int64_t B = int64_t(specs.size());
  for (const auto& s : specs)
    if (s.kept_count() != n)
      throw ConfigError("mask batch: kept counts differ across samples");
  MaskBatch mb;
  std::vector<int32_t> kept(size_t(B * n));
  std::vector<int32_t> bias(size_t(B * n * n));
  for (int64_t b = 0; b < B; ++b) {
    const auto& s = specs[size_t(b)];
    std::copy(s.kept.begin(), s.kept.end(), kept.begin() + b * n);
    ITensor sub = rel_offset_index(g, s.kept);
    std::copy(sub.v.begin(), sub.v.end(), bias.begin() + b * n * n);
  }
  mb.specs = std::move(specs);
  mb.kept = ITensor({B, n}, std::move(kept));
  mb.bias_idx = ITensor({B, n, n}, std::move(bias));
  return mb;
}

// Sinusoidal features of a timestep, cos half then sin half.
template <class S>
Tensor<S> timestep_features(const std::vector<int>& ts, int64_t dim) {
  int64_t half = dim / 2;
  int64_t B = int64_t(ts.size());
  Tensor<S> out({B, dim});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t k = 0; k < half; ++k) {
      double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
      double arg = double(ts[size_t(b)]) * freq;
      out[b * dim + k] = S(std::cos(arg));
      out[b * dim + half + k] = S(std::sin(arg));
    }
  return out;
}

template <class S>
struct ModelOutput {
  Var<S> eps;                        // (B, c, h, w)
  std::optional<Var<S>> var_logits;  // (B, c, h, w) when learn_sigma
};

// Captures intermediate values for consistency tests.
template <class S>
struct ForwardTrace {
  Tensor<S> decoder_input;
  Tensor<S> encoder_input;
};

template <class S>
class ModelForward {
 public:
  ModelForward(Tape<S>& tape, ParamVars<S>& pv, const ModelConfig& cfg)
      : tape_(tape), pv_(pv), cfg_(cfg), geom_(cfg.geometry()) {}

  // Timestep + label conditioning vector (B, d).
  Var<S> condition_vector(const std::vector<int>& ts, const std::vector<int64_t>& labels) {
    int64_t B = int64_t(ts.size());
    for (int64_t lb : labels)
      if (lb < 0 || lb > cfg_.null_label())
        throw ConfigError("label " + std::to_string(lb) + " out of range");
    Var<S> feats = tape_.constant(timestep_features<S>(ts, cfg_.time_freq_dim));
    Var<S> t1 = linear(feats, "embed.time.w1", "embed.time.b1");
    Var<S> temb = linear(silu(t1), "embed.time.w2", "embed.time.b2");
    std::vector<int32_t> lv(size_t(B));
    for (int64_t b = 0; b < B; ++b) lv[size_t(b)] = int32_t(labels[size_t(b)]);
    Var<S> lemb = gather_rows(pv_("embed.label.table"), ITensor({B}, std::move(lv)));
    return add(temb, lemb);
  }

  // Patch-embed + global position embedding: the dense-shortcut input u.
  Var<S> embed_tokens(const Tensor<S>& x_t) {
    int64_t B = x_t.dim(0);
    if (x_t.rank() != 4 || x_t.dim(1) != geom_.c || x_t.dim(2) != geom_.h ||
        x_t.dim(3) != geom_.w)
      throw ShapeError("model: latent batch " + shape_str(x_t.shape()) +
                       " does not match geometry");
    Tensor<S> raw({B, geom_.tokens(), geom_.raw_dim()});
    for (int64_t b = 0; b < B; ++b) {
      Tensor<S> one({geom_.c, geom_.h, geom_.w});
      std::copy(x_t.data() + b * one.numel(), x_t.data() + (b + 1) * one.numel(),
                one.data());
      Tensor<S> tok = patchify(one, geom_);
      std::copy(tok.data(), tok.data() + tok.numel(), raw.data() + b * tok.numel());
    }
    Var<S> proj = linear(tape_.constant(raw), "embed.patch.w", "embed.patch.b");
    return add(proj, pv_("embed.pos_encoder"));
  }

  Var<S> encoder_forward(Var<S> tokens, Var<S> cond, const MaskBatch* mask) {
    std::vector<Var<S>> hat;  // hat[i] = output of block i (hat[0] = input)
    hat.push_back(tokens);
    int64_t n1 = cfg_.n1();
    for (int64_t i = 1; i <= n1; ++i) {
      Var<S> in = hat[size_t(i - 1)];
      if (cfg_.variant == Variant::v2 && !cfg_.plain) {
        int64_t src = encoder_skip_source(n1, i);
        if (src > 0) {
          std::string pfx = "enc." + std::to_string(i - 1) + ".";
          in = linear(concat(std::vector<Var<S>>{in, hat[size_t(src)]}, 2),
                      pfx + "fuse.w", pfx + "fuse.b");
        }
      }
      hat.push_back(block(in, cond, "enc." + std::to_string(i - 1) + ".", mask));
    }
    return hat.back();
  }

  // Training-only: fill masked positions and predict them with one block.
  Var<S> side_interpolater(Var<S> encoder_out, const MaskBatch& mask, Var<S> cond) {
    int64_t N = geom_.tokens();
    Var<S> q = scatter_rows(encoder_out, mask.kept, N);
    Tensor<S> mf = mask.template mask_float<S>();
    Var<S> filled = mul(tape_.constant(mf), pv_("embed.mask_token"));
    q = add(add(q, filled), pv_("embed.pos_side"));
    if (!cfg_.side_interpolater) return q;
    Var<S> k_hat = block(q, cond, "side.", nullptr);
    Var<S> keep = tape_.constant(k::affine(mf, S(-1), S(1)));  // 1 - M
    return add(mul(keep, q), mul(tape_.constant(mf), k_hat));
  }

  Var<S> decoder_forward(Var<S> tokens, Var<S> u, Var<S> cond) {
    Var<S> x = tokens;
    for (int64_t j = 0; j < cfg_.n2; ++j) {
      std::string pfx = "dec." + std::to_string(j) + ".";
      Var<S> in = x;
      if (cfg_.variant == Variant::v2)
        in = linear(concat(std::vector<Var<S>>{in, u}, 2), pfx + "fuse.w",
                    pfx + "fuse.b");
      x = block(in, cond, pfx, nullptr);
    }
    return x;
  }

  ModelOutput<S> forward(const Tensor<S>& x_t, const std::vector<int>& ts,
                         const std::vector<int64_t>& labels, ForwardMode mode,
                         const MaskBatch* mask = nullptr,
                         ForwardTrace<S>* trace = nullptr) {
    if ((mode == ForwardMode::train_masked) != (mask != nullptr))
      throw ConfigError("model: mask must be present exactly in train-masked mode");
    if (mode == ForwardMode::train_masked && cfg_.plain)
      throw ConfigError("model: plain stack has no masked path");
    Var<S> cond = condition_vector(ts, labels);
    Var<S> u = embed_tokens(x_t);
    if (trace) trace->encoder_input = u.val();

    Var<S> enc_in = u;
    if (mode == ForwardMode::train_masked) enc_in = gather_rows(u, mask->kept);
    Var<S> enc_out = encoder_forward(enc_in, cond, mode == ForwardMode::train_masked ? mask : nullptr);

    Var<S> dec_in = enc_out;
    if (!cfg_.plain) {
      if (mode == ForwardMode::train_masked) {
        dec_in = side_interpolater(enc_out, *mask, cond);
      } else {
        // the side-interpolater reduces to its position embedding operation
        dec_in = add(enc_out, pv_("embed.pos_side"));
      }
    }
    if (trace) trace->decoder_input = dec_in.val();

    Var<S> dec_out = cfg_.plain ? dec_in : decoder_forward(dec_in, u, cond);
    Var<S> pred = head(dec_out, cond);  // (B, N, p*p*out_channels)

    // unpatchify to latent layout
    TokenGridGeometry og(cfg_.out_channels(), geom_.h, geom_.w, geom_.p);
    Var<S> latent = unpatchify_tokens(pred, og);
    ModelOutput<S> out{latent, std::nullopt};
    if (cfg_.learn_sigma) {
      auto parts = split(latent, 1, {geom_.c, geom_.c});
      out.eps = parts[0];
      out.var_logits = parts[1];
    }
    return out;
  }

  // Attention with additive per-head relative bias on the positions present.
  Var<S> attention(Var<S> x, const std::string& pfx, const MaskBatch* mask) {
    int64_t B = x.dim(0), n = x.dim(1), d = cfg_.dim, H = cfg_.heads, dh = cfg_.head_dim();
    Var<S> qkv = linear(x, pfx + "attn.qkv.w", pfx + "attn.qkv.b");
    auto parts = split(qkv, 2, {d, d, d});
    auto heads_of = [&](Var<S> v) {
      return permute(reshape(v, {B, n, H, dh}), {0, 2, 1, 3});
    };
    Var<S> q = heads_of(parts[0]);
    Var<S> kk = heads_of(parts[1]);
    Var<S> v = heads_of(parts[2]);
    std::optional<Var<S>> bias;
    if (cfg_.rel_bias) bias = relative_bias(pfx, n, mask);
    Var<S> att = attention_with_bias(q, kk, v, bias);
    Var<S> out = reshape(permute(att, {0, 2, 1, 3}), {B, n, d});
    return linear(out, pfx + "attn.proj.w", pfx + "attn.proj.b");
  }

  // Gathered bias submatrix: (H,n,n) on the full grid, (B,H,n,n) on kept sets.
  Var<S> relative_bias(const std::string& pfx, int64_t n, const MaskBatch* mask) {
    Var<S> table = pv_(pfx + "attn.bias_table");
    if (mask) return table_lookup(table, mask->bias_idx);
    if (n != geom_.tokens())
      throw ShapeError("relative_bias: token count mismatch");
    return table_lookup(table, full_bias_idx());
  }

  Var<S> block(Var<S> x, Var<S> cond, const std::string& pfx, const MaskBatch* mask) {
    int64_t B = x.dim(0), d = cfg_.dim;
    Var<S> mod = linear(silu(cond), pfx + "adaln.w", pfx + "adaln.b");
    auto m = split(mod, 1, {d, d, d, d, d, d});
    auto row = [&](Var<S> v) { return reshape(v, {B, 1, d}); };
    Var<S> shift_a = row(m[0]), scale_a = row(m[1]), gate_a = row(m[2]);
    Var<S> shift_m = row(m[3]), scale_m = row(m[4]), gate_m = row(m[5]);

    Var<S> h = modulate(layer_norm(x), shift_a, scale_a);
    x = add(x, mul(gate_a, attention(h, pfx, mask)));
    Var<S> h2 = modulate(layer_norm(x), shift_m, scale_m);
    Var<S> mh = gelu(linear(h2, pfx + "mlp.fc1.w", pfx + "mlp.fc1.b"));
    Var<S> mo = linear(mh, pfx + "mlp.fc2.w", pfx + "mlp.fc2.b");
    return add(x, mul(gate_m, mo));
  }

  Var<S> head(Var<S> x, Var<S> cond) {
    int64_t B = x.dim(0), d = cfg_.dim;
    Var<S> mod = linear(silu(cond), "head.adaln.w", "head.adaln.b");
    auto m = split(mod, 1, {d, d});
    Var<S> shift = reshape(m[0], {B, 1, d});
    Var<S> sc = reshape(m[1], {B, 1, d});
    Var<S> h = modulate(layer_norm(x), shift, sc);
    return linear(h, "head.out.w", "head.out.b");
  }

  Var<S> linear(Var<S> x, const std::string& wname, const std::string& bname) {
    return add(matmul(x, pv_(wname)), pv_(bname));
  }

  Var<S> modulate(Var<S> x, Var<S> shift, Var<S> sc) {
    return add(mul(x, affine(sc, S(1), S(1))), shift);
  }

  Var<S> unpatchify_tokens(Var<S> tokens, const TokenGridGeometry& g) {
    Tape<S>& t = tape_;
    int64_t B = tokens.dim(0);
    Tensor<S> out({B, g.c, g.h, g.w});
    for (int64_t b = 0; b < B; ++b) {
      Tensor<S> one({g.tokens(), g.raw_dim()});
      std::copy(tokens.val().data() + b * one.numel(),
                tokens.val().data() + (b + 1) * one.numel(), one.data());
      Tensor<S> z = unpatchify(one, g);
      std::copy(z.data(), z.data() + z.numel(), out.data() + b * z.numel());
    }
    Var<S> v = t.push(std::move(out), t.requires_grad(tokens), "unpatchify");
    t.set_back(v, [tokens, g](Tape<S>& tp, const Tensor<S>& grad) {
      int64_t B2 = grad.dim(0);
      Tensor<S> gt({B2, g.tokens(), g.raw_dim()});
      for (int64_t b = 0; b < B2; ++b) {
        Tensor<S> one({g.c, g.h, g.w});
        std::copy(grad.data() + b * one.numel(), grad.data() + (b + 1) * one.numel(),
                  one.data());
        Tensor<S> tok = patchify(one, g);
        std::copy(tok.data(), tok.data() + tok.numel(), gt.data() + b * tok.numel());
      }
      tp.accum(tokens.id, gt);
    });
    return v;
  }

  const ITensor& full_bias_idx() {
    if (full_idx_.numel() == 0)
      full_idx_ = rel_offset_index(geom_, all_positions(geom_.tokens()));
    return full_idx_;
  }

 private:
  Tape<S>& tape_;
  ParamVars<S>& pv_;
  const ModelConfig& cfg_;
  TokenGridGeometry geom_;
  ITensor full_idx_;
};

}  // namespace mdt

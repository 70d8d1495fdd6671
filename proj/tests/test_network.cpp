#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "mdt/model.hpp"

using namespace mdt;
using T = Tensor<double>;

namespace {

ModelConfig tiny_cfg(Variant v, int64_t n2 = 2) {
  ModelConfig m;
  m.c = 2;
  m.h = 8;
  m.w = 8;
  m.p = 2;  // 4x4 grid, N = 16
  m.dim = 16;
  m.heads = 4;
  m.depth = 4;
  m.n2 = n2;
  m.classes = 3;
  m.variant = v;
  return m;
}

MaskBatch mask_for(const ModelConfig& cfg, double rho, uint64_t seed, int64_t B) {
  Rng rng = Rng::stream(seed, rng_purpose::kMask);
  std::vector<MaskSpec> specs;
  for (int64_t b = 0; b < B; ++b)
    specs.push_back(sample_mask(cfg.geometry().tokens(), rho, rng));
  return make_mask_batch(std::move(specs), cfg.geometry());
}

}  // namespace

TEST_CASE("attention_with_bias against the direct formula") {
  Rng rng = Rng::stream(1, 0);
  int64_t n = 5, dh = 3;
  T q = T::randn({1, 1, n, dh}, rng);
  T kk = T::randn({1, 1, n, dh}, rng);
  T v = T::randn({1, 1, n, dh}, rng);
  Tape<double> tp;
  auto out = attention_with_bias(tp.constant(q), tp.constant(kk), tp.constant(v),
                                 std::optional<Var<double>>{});
  // direct: softmax(q k^T / sqrt(dh)) v, written independently
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<size_t>(n));
    double mx = -1e300;
    for (int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (int64_t e = 0; e < dh; ++e) s += q[i * dh + e] * kk[j * dh + e];
      row[size_t(j)] = s / std::sqrt(double(dh));
      mx = std::max(mx, row[size_t(j)]);
    }
    double z = 0;
    for (int64_t j = 0; j < n; ++j) z += std::exp(row[size_t(j)] - mx);
    for (int64_t e = 0; e < dh; ++e) {
      double acc = 0;
      for (int64_t j = 0; j < n; ++j)
        acc += std::exp(row[size_t(j)] - mx) / z * v[j * dh + e];
      CHECK(out.val()[i * dh + e] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention on a single token returns the value row") {
  Rng rng = Rng::stream(2, 0);
  T q = T::randn({1, 2, 1, 4}, rng);
  T kk = T::randn({1, 2, 1, 4}, rng);
  T v = T::randn({1, 2, 1, 4}, rng);
  Tape<double> tp;
  auto out = attention_with_bias(tp.constant(q), tp.constant(kk), tp.constant(v),
                                 std::optional<Var<double>>{});
  for (int64_t i = 0; i < 8; ++i) CHECK(out.val()[i] == doctest::Approx(v[i]).epsilon(1e-15));
}

TEST_CASE("huge bias entry saturates one attention row") {
  Rng rng = Rng::stream(3, 0);
  int64_t n = 4, dh = 2;
  T q = T::randn({1, 1, n, dh}, rng);
  T kk = T::randn({1, 1, n, dh}, rng);
  T v = T::randn({1, 1, n, dh}, rng);
  T bias = T::zeros({1, n, n});
  bias[1 * n + 3] = 1e4;  // row 1 attends to token 3
  Tape<double> tp;
  auto out = attention_with_bias(tp.constant(q), tp.constant(kk), tp.constant(v),
                                 std::optional<Var<double>>(tp.constant(bias)));
  for (int64_t e = 0; e < dh; ++e)
    CHECK(out.val()[1 * dh + e] == doctest::Approx(v[3 * dh + e]).epsilon(1e-9));
}

TEST_CASE("bias/token count mismatch raises") {
  Rng rng = Rng::stream(4, 0);
  Tape<double> tp;
  auto q = tp.constant(T::randn({1, 1, 4, 2}, rng));
  auto bias = tp.constant(T::zeros({1, 3, 3}));
  CHECK_THROWS_AS(
      attention_with_bias(q, q, q, std::optional<Var<double>>(bias)), ShapeError);
}

TEST_CASE("relative bias submatrix equals slice of full bias") {
  TokenGridGeometry g(1, 4, 4, 2);  // 2x2 grid
  Rng rng = Rng::stream(5, 0);
  T table = T::randn({3, 9}, rng);  // 3 heads, (2*2-1)^2 = 9 offsets
  Tape<double> tp;
  auto full = table_lookup(tp.constant(table), rel_offset_index(g, all_positions(4)));
  auto sub = table_lookup(tp.constant(table), rel_offset_index(g, {0, 3}));
  CHECK(full.shape() == Shape{3, 4, 4});
  CHECK(sub.shape() == Shape{3, 2, 2});
  int pick[2] = {0, 3};
  for (int64_t h = 0; h < 3; ++h)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(sub.val()[(h * 2 + i) * 2 + j] ==
              full.val()[(h * 4 + pick[i]) * 4 + pick[j]]);
  // diagonal of the full bias is the zero-offset entry
  for (int64_t h = 0; h < 3; ++h)
    for (int i = 0; i < 4; ++i)
      CHECK(full.val()[(h * 4 + i) * 4 + i] == table[h * 9 + 4]);
}

TEST_CASE("v2 long-shortcut sources match the piecewise rule") {
  // independently coded table of (block -> skip source) pairs
  std::map<int64_t, std::map<int64_t, int64_t>> expected = {
      {4, {{1, 0}, {2, 0}, {3, 2}, {4, 1}}},
      {6, {{1, 0}, {2, 0}, {3, 0}, {4, 3}, {5, 2}, {6, 1}}},
      {8, {{1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 4}, {6, 3}, {7, 2}, {8, 1}}},
      {12,
       {{1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 0}, {6, 0}, {7, 6}, {8, 5},
        {9, 4}, {10, 3}, {11, 2}, {12, 1}}}};
  for (auto& [n1, tbl] : expected)
    for (auto& [i, src] : tbl) CHECK(encoder_skip_source(n1, i) == src);
}

TEST_CASE("v1 has no fusion parameters; v2 has them on the right blocks") {
  auto c1 = tiny_cfg(Variant::v1);
  auto t1 = init_params<double>(c1, Rng::stream(7, rng_purpose::kInit));
  for (auto& [name, v] : t1) CHECK(name.find("fuse") == std::string::npos);

  auto c2 = tiny_cfg(Variant::v2);  // depth 4, n2 2 -> n1 2; skip on block 2
  auto t2 = init_params<double>(c2, Rng::stream(7, rng_purpose::kInit));
  CHECK(t2.count("enc.1.fuse.w") == 1);
  CHECK(t2.count("enc.0.fuse.w") == 0);
  CHECK(t2.count("dec.0.fuse.w") == 1);
  CHECK(t2.count("dec.1.fuse.w") == 1);
}

TEST_CASE("embed_tokens adds the position embedding") {
  auto cfg = tiny_cfg(Variant::v1);
  auto params = init_params<double>(cfg, Rng::stream(11, rng_purpose::kInit));
  // zero projection: zero weights and bias
  params.at("embed.patch.w") = T::zeros(params.at("embed.patch.w").shape());
  params.at("embed.patch.b") = T::zeros(params.at("embed.patch.b").shape());
  Tape<double> tp;
  ParamVars<double> pv(tp, params);
  ModelForward<double> fw(tp, pv, cfg);
  Rng rng = Rng::stream(12, 0);
  T x = T::randn({2, cfg.c, cfg.h, cfg.w}, rng);
  auto u = fw.embed_tokens(x);
  const T& pos = params.at("embed.pos_encoder");
  int64_t N = cfg.geometry().tokens();
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < N * cfg.dim; ++i)
      CHECK(u.val()[b * N * cfg.dim + i] == pos[i]);
}

TEST_CASE("toy S-like preset shape check") {
  auto m = ModelConfig::preset("S", Variant::v1);
  CHECK(m.dim == 384);
  CHECK(m.heads == 6);
  CHECK(m.depth == 12);
  CHECK(m.n2 == 2);
  auto m2 = ModelConfig::preset("S", Variant::v2);
  CHECK(m2.n2 == 6);
  auto xl = ModelConfig::preset("XL", Variant::v2);
  CHECK(xl.depth == 28);
  CHECK(xl.n2 == 4);
}

TEST_CASE("condition vector determinism and label distinction") {
  auto cfg = tiny_cfg(Variant::v1);
  auto params = init_params<double>(cfg, Rng::stream(13, rng_purpose::kInit));
  Tape<double> tp;
  ParamVars<double> pv(tp, params);
  ModelForward<double> fw(tp, pv, cfg);
  auto c1 = fw.condition_vector({17}, {1});
  auto c2 = fw.condition_vector({17}, {1});
  for (int64_t i = 0; i < cfg.dim; ++i) CHECK(c1.val()[i] == c2.val()[i]);
  auto cn = fw.condition_vector({17}, {cfg.null_label()});
  double diff = 0;
  for (int64_t i = 0; i < cfg.dim; ++i) diff += std::abs(c1.val()[i] - cn.val()[i]);
  CHECK(diff > 0.0);
  CHECK_THROWS_AS(fw.condition_vector({17}, {cfg.null_label() + 1}), ConfigError);
}

TEST_CASE("sinusoidal features differ in all frequency pairs between t=0 and t=T") {
  auto f0 = timestep_features<double>({0}, 64);
  auto fT = timestep_features<double>({1000}, 64);
  for (int64_t k = 0; k < 32; ++k) {
    bool cos_diff = f0[k] != fT[k];
    bool sin_diff = f0[32 + k] != fT[32 + k];
    CHECK((cos_diff || sin_diff));
  }
}

TEST_CASE("side-interpolater rows obey the masked shortcut") {
  auto cfg = tiny_cfg(Variant::v1);
  auto params = init_params<double>(cfg, Rng::stream(21, rng_purpose::kInit));
  int64_t N = cfg.geometry().tokens(), d = cfg.dim;
  Rng rng = Rng::stream(22, 0);

  auto run_side = [&](const MaskBatch& mb, const ParameterTree<double>& ps,
                      const T& enc_out) {
    Tape<double> tp;
    ParamVars<double> pv(tp, ps);
    ModelForward<double> fw(tp, pv, cfg);
    auto cond = fw.condition_vector({5}, {0});
    auto out = fw.side_interpolater(tp.constant(enc_out), mb, cond);
    return out.val();
  };

  SUBCASE("all-zero mask: output is scatter + position embedding") {
    auto mb = mask_for(cfg, 0.0, 1, 1);
    T enc = T::randn({1, N, d}, rng);
    T out = run_side(mb, params, enc);
    // block weights must have no effect
    auto params2 = params;
    Rng prng = Rng::stream(77, 0);
    params2.at("side.attn.qkv.w") = T::randn({d, 3 * d}, prng);
    T out2 = run_side(mb, params2, enc);
    const T& pos = params.at("embed.pos_side");
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < d; ++j) {
        CHECK(out[i * d + j] == doctest::Approx(enc[i * d + j] + pos[i * d + j]));
        CHECK(out[i * d + j] == out2[i * d + j]);
      }
  }

  SUBCASE("unmasked rows are exactly q regardless of block weights") {
    auto mb = mask_for(cfg, 0.4, 2, 1);
    int64_t nk = mb.specs[0].kept_count();
    T enc = T::randn({1, nk, d}, rng);
    T out1 = run_side(mb, params, enc);
    auto params2 = params;
    Rng prng = Rng::stream(78, 0);
    params2.at("side.attn.qkv.w") = T::randn({d, 3 * d}, prng);
    params2.at("side.mlp.fc1.w") = T::randn({d, 4 * d}, prng);
    T out2 = run_side(mb, params2, enc);
    const auto& spec = mb.specs[0];
    int64_t masked_diff = 0;
    for (int64_t i = 0; i < N; ++i) {
      if (!spec.M[size_t(i)]) {
        for (int64_t j = 0; j < d; ++j) CHECK(out1[i * d + j] == out2[i * d + j]);
      } else {
        for (int64_t j = 0; j < d; ++j)
          if (out1[i * d + j] != out2[i * d + j]) ++masked_diff;
      }
    }
    CHECK(masked_diff > 0);
  }
}

TEST_CASE("v2 decoder with identity fusion on token branch matches v1 decoder") {
  auto c2 = tiny_cfg(Variant::v2);
  auto params = init_params<double>(c2, Rng::stream(31, rng_purpose::kInit));
  int64_t d = c2.dim;
  // fuse = [I; 0]: output equals the token branch, u is ignored
  for (int64_t j = 0; j < c2.n2; ++j) {
    T w = T::zeros({2 * d, d});
    for (int64_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
    params.at("dec." + std::to_string(j) + ".fuse.w") = w;
  }
  auto c1 = tiny_cfg(Variant::v1);

  Rng rng = Rng::stream(32, 0);
  int64_t N = c2.geometry().tokens();
  T tokens = T::randn({2, N, d}, rng);
  T u = T::randn({2, N, d}, rng);

  auto run = [&](const ModelConfig& cfg) {
    Tape<double> tp;
    ParamVars<double> pv(tp, params);
    ModelForward<double> fw(tp, pv, cfg);
    auto cond = fw.condition_vector({3, 9}, {0, 1});
    return fw.decoder_forward(tp.constant(tokens), tp.constant(u), cond).val();
  };
  T out2 = run(c2);
  T out1 = run(c1);
  for (int64_t i = 0; i < out1.numel(); ++i)
    CHECK(out2[i] == doctest::Approx(out1[i]).epsilon(1e-12));

  // and v1 output does not depend on u at all
  auto run_v1_u = [&](const T& uu) {
    Tape<double> tp;
    ParamVars<double> pv(tp, params);
    ModelForward<double> fw(tp, pv, c1);
    auto cond = fw.condition_vector({3, 9}, {0, 1});
    return fw.decoder_forward(tp.constant(tokens), tp.constant(uu), cond).val();
  };
  Rng rng2 = Rng::stream(33, 0);
  T other_u = T::randn({2, N, d}, rng2);
  T a = run_v1_u(u);
  T b = run_v1_u(other_u);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("model forward shape contract and determinism") {
  for (auto variant : {Variant::v1, Variant::v2}) {
    auto cfg = tiny_cfg(variant);
    auto params = init_params<double>(cfg, Rng::stream(41, rng_purpose::kInit));
    Rng rng = Rng::stream(42, 0);
    T x = T::randn({2, cfg.c, cfg.h, cfg.w}, rng);
    auto run = [&]() {
      Tape<double> tp;
      ParamVars<double> pv(tp, params);
      ModelForward<double> fw(tp, pv, cfg);
      auto out = fw.forward(x, {100, 7}, {0, 2}, ForwardMode::inference);
      return out.eps.val();
    };
    T a = run();
    T b = run();
    CHECK(a.shape() == Shape{2, cfg.c, cfg.h, cfg.w});
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("learn_sigma doubles the output channels") {
  auto cfg = tiny_cfg(Variant::v1);
  cfg.learn_sigma = true;
  auto params = init_params<double>(cfg, Rng::stream(43, rng_purpose::kInit));
  Rng rng = Rng::stream(44, 0);
  T x = T::randn({1, cfg.c, cfg.h, cfg.w}, rng);
  Tape<double> tp;
  ParamVars<double> pv(tp, params);
  ModelForward<double> fw(tp, pv, cfg);
  auto out = fw.forward(x, {10}, {0}, ForwardMode::inference);
  CHECK(out.eps.shape() == Shape{1, cfg.c, cfg.h, cfg.w});
  REQUIRE(out.var_logits.has_value());
  CHECK(out.var_logits->shape() == Shape{1, cfg.c, cfg.h, cfg.w});
}

TEST_CASE("train-masked with rho=0 equals train-full equals inference") {
  for (auto variant : {Variant::v1, Variant::v2}) {
    auto cfg = tiny_cfg(variant);
    auto params = init_params<double>(cfg, Rng::stream(51, rng_purpose::kInit));
    Rng rng = Rng::stream(52, 0);
    T x = T::randn({2, cfg.c, cfg.h, cfg.w}, rng);
    auto mb = mask_for(cfg, 0.0, 3, 2);

    auto run = [&](ForwardMode mode, const MaskBatch* m, T* dec_in) {
      Tape<double> tp;
      ParamVars<double> pv(tp, params);
      ModelForward<double> fw(tp, pv, cfg);
      ForwardTrace<double> trace;
      auto out = fw.forward(x, {100, 7}, {0, 2}, mode, m, &trace);
      if (dec_in) *dec_in = trace.decoder_input;
      return out.eps.val();
    };
    T dec_masked, dec_full, dec_inf;
    T em = run(ForwardMode::train_masked, &mb, &dec_masked);
    T ef = run(ForwardMode::train_full, nullptr, &dec_full);
    T ei = run(ForwardMode::inference, nullptr, &dec_inf);
    for (int64_t i = 0; i < em.numel(); ++i) {
      CHECK(em[i] == doctest::Approx(ef[i]).epsilon(1e-12));
      CHECK(ef[i] == ei[i]);
    }
    // decoder inputs agree exactly at 64-bit
    for (int64_t i = 0; i < dec_masked.numel(); ++i) {
      CHECK(dec_masked[i] == dec_full[i]);
      CHECK(dec_full[i] == dec_inf[i]);
    }
  }
}

TEST_CASE("masked encoder path equals kept-submatrix computation") {
  // run the full encoder on all tokens and on the kept subset; the kept-path
  // output must equal attention over the kept-token submatrix of Q,K,V with
  // the gathered bias (NOT rows of the full-grid attention).
  auto cfg = tiny_cfg(Variant::v1);
  auto params = init_params<double>(cfg, Rng::stream(61, rng_purpose::kInit));
  // make weights sizable so differences are visible
  Rng wr = Rng::stream(62, 0);
  params.at("enc.0.attn.bias_table") = T::randn({cfg.heads, 49}, wr);
  auto mb = mask_for(cfg, 0.4, 4, 1);
  Rng rng = Rng::stream(63, 0);
  int64_t N = cfg.geometry().tokens(), d = cfg.dim;
  T u = T::randn({1, N, d}, rng);

  Tape<double> tp;
  ParamVars<double> pv(tp, params);
  ModelForward<double> fw(tp, pv, cfg);
  auto cond = fw.condition_vector({9}, {1});
  // kept path: gather then one block with gathered bias
  auto kept_tokens = gather_rows(tp.constant(u), mb.kept);
  auto kept_out = fw.block(kept_tokens, cond, "enc.0.", &mb);

  // oracle path: manually gather the rows and use the submatrix bias indices
  int64_t nk = mb.specs[0].kept_count();
  T manual({1, nk, d});
  for (int64_t i = 0; i < nk; ++i) {
    int32_t r = mb.specs[0].kept[size_t(i)];
    std::copy(u.data() + r * d, u.data() + (r + 1) * d, manual.data() + i * d);
  }
  auto manual_out = fw.block(tp.constant(manual), cond, "enc.0.", &mb);
  for (int64_t i = 0; i < kept_out.val().numel(); ++i)
    CHECK(kept_out.val()[i] == doctest::Approx(manual_out.val()[i]).epsilon(1e-13));

  // and it differs from rows of the full-grid attention (re-normalization)
  auto full_out = fw.block(tp.constant(u), cond, "enc.0.", nullptr);
  double diff = 0;
  for (int64_t i = 0; i < nk; ++i) {
    int32_t r = mb.specs[0].kept[size_t(i)];
    for (int64_t j = 0; j < d; ++j)
      diff += std::abs(kept_out.val()[i * d + j] - full_out.val()[r * d + j]);
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("position embeddings break permutation equivariance") {
  auto cfg = tiny_cfg(Variant::v1);
  auto params = init_params<double>(cfg, Rng::stream(71, rng_purpose::kInit));
  Rng rng = Rng::stream(72, 0);
  T x = T::randn({1, cfg.c, cfg.h, cfg.w}, rng);

  // permute tokens of the input latent by swapping two patch positions
  auto g = cfg.geometry();
  T xp = x.clone();
  // swap patches (0,0) and (1,1): token 0 and token g_w+1
  for (int64_t ch = 0; ch < g.c; ++ch)
    for (int64_t pr = 0; pr < g.p; ++pr)
      for (int64_t pc = 0; pc < g.p; ++pc) {
        int64_t a = (ch * g.h + pr) * g.w + pc;
        int64_t b = (ch * g.h + g.p + pr) * g.w + g.p + pc;
        std::swap(xp[a], xp[b]);
      }

  auto run = [&](const T& inp) {
    Tape<double> tp;
    ParamVars<double> pv(tp, params);
    ModelForward<double> fw(tp, pv, cfg);
    return fw.forward(inp, {50}, {0}, ForwardMode::inference).eps.val();
  };
  T a = run(x);
  T bp = run(xp);
  // un-permute the output and compare; must differ somewhere
  T b = bp.clone();
  for (int64_t ch = 0; ch < g.c; ++ch)
    for (int64_t pr = 0; pr < g.p; ++pr)
      for (int64_t pc = 0; pc < g.p; ++pc) {
        int64_t i1 = (ch * g.h + pr) * g.w + pc;
        int64_t i2 = (ch * g.h + g.p + pr) * g.w + g.p + pc;
        std::swap(b[i1], b[i2]);
      }
  double diff = 0;
  for (int64_t i = 0; i < a.numel(); ++i) diff += std::abs(a[i] - b[i]);
  CHECK(diff > 1e-8);
}

TEST_CASE("mask presence contract") {
  auto cfg = tiny_cfg(Variant::v1);
  auto params = init_params<double>(cfg, Rng::stream(81, rng_purpose::kInit));
  Rng rng = Rng::stream(82, 0);
  T x = T::randn({1, cfg.c, cfg.h, cfg.w}, rng);
  Tape<double> tp;
  ParamVars<double> pv(tp, params);
  ModelForward<double> fw(tp, pv, cfg);
  auto mb = mask_for(cfg, 0.3, 5, 1);
  CHECK_THROWS_AS(fw.forward(x, {1}, {0}, ForwardMode::inference, &mb), ConfigError);
  CHECK_THROWS_AS(fw.forward(x, {1}, {0}, ForwardMode::train_masked, nullptr),
                  ConfigError);
}

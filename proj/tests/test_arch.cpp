#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "wb/model.hpp"

using namespace wb;

namespace {

ModelConfig tiny(ArchKind arch) {
  ModelConfig cfg;
  cfg.l_enc = 2;
  cfg.l_dec = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.d_kv = 4;
  cfg.heads = 2;
  cfg.d_vocab = 11;
  cfg.t_max = 8;
  cfg.u_max = 8;
  cfg.variant.position = PositionKind::Sinusoidal;
  cfg.variant.arch = arch;
  cfg.variant.n_experts = 2;
  cfg.variant.experts_k = 2;
  cfg.variant.conv_groups = 2;
  cfg.variant.conv_width = 3;
  cfg.variant.pkm_keys_half = 4;
  cfg.variant.pkm_values = 16;
  cfg.variant.pkm_knn = 2;
  cfg.variant.pkm_heads = 2;
  cfg.variant.pkm_d_q = 4;
  cfg.variant.funnel_blocks = 2;
  cfg.variant.funnel_layers_per_block = 1;
  cfg.variant.ut_max_steps = 3;
  cfg.variant.synth_hidden = 6;
  cfg.variant.synth_rank = 2;
  return cfg;
}

Batch small_batch(Rng rng, const ModelConfig& cfg, long B, long T, long U) {
  Batch b;
  b.n_seq = B;
  b.src_len = T;
  b.tgt_len = U;
  for (long i = 0; i < B * T; ++i) b.x.push_back(1 + static_cast<long>(rng.next_below(cfg.d_vocab - 1)));
  for (long i = 0; i < B * U; ++i) b.y.push_back(1 + static_cast<long>(rng.next_below(cfg.d_vocab - 1)));
  b.mask.assign(static_cast<size_t>(B * U), 1.0);
  return b;
}

Tensor random_t(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.next_normal();
  return t;
}

void copy_common(ParamStore& dst, const ParamStore& src) {
  for (const auto& [name, slot] : dst.names())
    if (src.has(name)) dst.slots()[static_cast<size_t>(slot)].value = src.value(name);
}

}  // namespace

// ---- transparent attention ---------------------------------------------------

TEST_CASE("transparent attention one-hot on the last layer equals the baseline") {
  ModelConfig base_cfg = tiny(ArchKind::None);
  ModelConfig tr_cfg = tiny(ArchKind::Transparent);
  ParamStore ps_b, ps_t;
  register_model_params(ps_b, base_cfg);
  register_model_params(ps_t, tr_cfg);
  ps_b.init_all(Rng(3));
  copy_common(ps_t, ps_b);
  // softmax of (1000, -1000) saturates to an exact one-hot
  Tensor& w = ps_t.value("transparent.w");
  for (long j = 0; j < tr_cfg.l_dec; ++j)
    for (long i = 0; i <= tr_cfg.l_enc; ++i)
      w.at2(j, i) = i == tr_cfg.l_enc ? 1000.0 : -1000.0;

  Batch batch = small_batch(Rng(5), base_cfg, 2, 5, 5);
  Tape t1, t2;
  double lb = t1.value(forward_loss(t1, ps_b, base_cfg, batch).loss)[0];
  double lt = t2.value(forward_loss(t2, ps_t, tr_cfg, batch).loss)[0];
  CHECK(std::abs(lb - lt) < 1e-12);
}

TEST_CASE("transparent attention at init averages the encoder depths") {
  // zero-init weights give uniform softmax; with identical candidates the
  // mix equals that candidate
  Tape t;
  Tensor w0 = Tensor::zeros({1, 3});
  Var wj = softmax_lastdim(constant(t, w0));
  for (long i = 0; i < 3; ++i)
    CHECK(t.value(wj)[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("transparent memory mix matches a direct weighted-sum oracle") {
  Rng rng(7);
  Tape t;
  std::vector<Tensor> cands;
  std::vector<Var> cand_vars;
  for (int i = 0; i < 3; ++i) {
    cands.push_back(random_t(rng, {1, 4, 5}));
    cand_vars.push_back(constant(t, cands.back()));
  }
  Tensor wrow({1, 3}, {0.3, -1.2, 0.8});
  Var wj = softmax_lastdim(constant(t, wrow));
  Var mix;
  for (long i = 0; i < 3; ++i) {
    Var wi = reshape(slice(wj, 1, i, 1), {1});
    Var term = mul(cand_vars[static_cast<size_t>(i)], wi);
    mix = mix.valid() ? add(mix, term) : term;
  }
  // oracle
  double mx = std::max({0.3, -1.2, 0.8});
  double z = std::exp(0.3 - mx) + std::exp(-1.2 - mx) + std::exp(0.8 - mx);
  double wv[3] = {std::exp(0.3 - mx) / z, std::exp(-1.2 - mx) / z, std::exp(0.8 - mx) / z};
  for (long k = 0; k < 20; ++k) {
    double want = wv[0] * cands[0][k] + wv[1] * cands[1][k] + wv[2] * cands[2][k];
    CHECK(std::abs(t.value(mix)[k] - want) < 1e-12);
  }
}

// ---- synthesizer ---------------------------------------------------------------

TEST_CASE("random synthesizer with a zero table attends uniformly") {
  ModelConfig cfg = tiny(ArchKind::Synthesizer);
  cfg.variant.synth_kind = SynthKind::Random;
  cfg.variant.synth_mix = SynthMix::Pure;
  ParamStore ps;
  register_synth_attention(ps, cfg, "s", "");
  ps.init_all(Rng(9));  // random tables init to zero
  Rng rng(10);
  long T = 4;
  Tensor x = random_t(rng, {1, T, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  AttnInputs in;
  in.q_src = in.k_src = in.v_src = constant(t, x);
  in.tq = in.tk = T;
  Var out = synthesizer_attention(t, pv, cfg, "s", in);
  // uniform mixing: every position sees the mean of per-head value slices
  Tensor mean({1, 1, cfg.d_model});
  for (long d = 0; d < cfg.d_model; ++d) {
    double s = 0;
    for (long i = 0; i < T; ++i) s += x[i * cfg.d_model + d];
    mean[d] = s / T;
  }
  Var expect = matmul(constant(t, mean), pv("s.o"));
  for (long i = 0; i < T; ++i)
    for (long d = 0; d < cfg.d_model; ++d)
      CHECK(t.value(out)[i * cfg.d_model + d] ==
            doctest::Approx(t.value(expect)[d]).epsilon(1e-13));
}

TEST_CASE("plus-alpha at alpha=0 equals vanilla dot-product attention") {
  ModelConfig cfg = tiny(ArchKind::Synthesizer);
  cfg.variant.synth_kind = SynthKind::Random;
  cfg.variant.synth_mix = SynthMix::PlusAlpha;
  ParamStore ps;
  register_synth_attention(ps, cfg, "s", "");
  ps.init_all(Rng(11));
  ps.value("s.syn.alpha")[0] = 0.0;
  Rng rng(12);
  Tensor tbl = random_t(rng, {cfg.t_max, cfg.t_max});
  ps.value("s.syn.h0.r") = tbl;
  ps.value("s.syn.h1.r") = tbl;
  Tensor x = random_t(rng, {2, 4, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  AttnInputs in;
  in.q_src = in.k_src = in.v_src = constant(t, x);
  in.tq = in.tk = 4;
  in.causal = true;
  Var synth_out = synthesizer_attention(t, pv, cfg, "s", in);
  Var plain_out = multihead_attention(t, pv, cfg, "s", in);
  for (long i = 0; i < t.value(plain_out).size(); ++i)
    CHECK(std::abs(t.value(synth_out)[i] - t.value(plain_out)[i]) < 1e-12);
}

TEST_CASE("dense synthesizer logits match a direct two-layer oracle") {
  ModelConfig cfg = tiny(ArchKind::Synthesizer);
  cfg.variant.synth_kind = SynthKind::Dense;
  cfg.variant.synth_mix = SynthMix::Pure;
  ParamStore ps;
  register_synth_attention(ps, cfg, "s", "");
  ps.init_all(Rng(13));
  Rng rng(14);
  long T = 5;
  Tensor x = random_t(rng, {1, T, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  Var logits = synth_logits_head(t, pv, cfg, "s", 0, constant(t, x), T, T);
  const Tensor& f1 = ps.value("s.syn.h0.f1");
  const Tensor& f2 = ps.value("s.syn.h0.f2");
  for (long i = 0; i < T; ++i)
    for (long j = 0; j < T; ++j) {
      double want = 0;
      for (long hdim = 0; hdim < cfg.variant.synth_hidden; ++hdim) {
        double pre = 0;
        for (long d = 0; d < cfg.d_model; ++d) pre += x[i * cfg.d_model + d] * f1.at2(d, hdim);
        want += std::max(0.0, pre) * f2.at2(hdim, j);
      }
      CHECK(std::abs(t.value(logits)[i * T + j] - want) < 1e-12);
    }
}

TEST_CASE("random synthesizer rejects sequences beyond the trained length") {
  ModelConfig cfg = tiny(ArchKind::Synthesizer);
  cfg.variant.synth_kind = SynthKind::Random;
  ParamStore ps;
  register_synth_attention(ps, cfg, "s", "");
  ps.init_all(Rng(15));
  Tape t;
  ParamVars pv(t, ps);
  CHECK_THROWS_AS((void)synth_logits_head(t, pv, cfg, "s", 0, constant(t, Tensor::zeros({1, 9, 8})), 9, 9),
                  ConfigError);
}

TEST_CASE("random synthesizer logits ignore other positions' content") {
  ModelConfig cfg = tiny(ArchKind::Synthesizer);
  cfg.variant.synth_kind = SynthKind::Random;
  cfg.variant.synth_mix = SynthMix::Pure;
  ParamStore ps;
  register_synth_attention(ps, cfg, "s", "");
  ps.init_all(Rng(16));
  Rng rng(17);
  ps.value("s.syn.h0.r") = random_t(rng, {cfg.t_max, cfg.t_max});
  Tape t;
  ParamVars pv(t, ps);
  Tensor a = random_t(rng, {1, 4, 8}), b = random_t(rng, {1, 4, 8});
  Var la = synth_logits_head(t, pv, cfg, "s", 0, constant(t, a), 4, 4);
  Var lb = synth_logits_head(t, pv, cfg, "s", 0, constant(t, b), 4, 4);
  for (long i = 0; i < t.value(la).size(); ++i) CHECK(t.value(la)[i] == t.value(lb)[i]);
}

// ---- funnel ----------------------------------------------------------------------

TEST_CASE("pair pooling: [a,b,c,d] with stride 2 gives [(a+b)/2, (c+d)/2]") {
  Tape t;
  Tensor x({1, 4, 1}, {1.0, 3.0, 5.0, 9.0});
  Var p = detail_model::pool_pairs(t, constant(t, x));
  CHECK(t.value(p).shape == Shape{1, 2, 1});
  CHECK(t.value(p)[0] == 2.0);
  CHECK(t.value(p)[1] == 7.0);
}

TEST_CASE("funnel encoder shortens the memory to T/4 with three blocks") {
  ModelConfig cfg = tiny(ArchKind::Funnel);
  cfg.l_enc = 3;
  cfg.variant.funnel_blocks = 3;
  cfg.variant.funnel_layers_per_block = 1;
  cfg.t_max = 16;
  ParamStore ps;
  register_model_params(ps, cfg);
  ps.init_all(Rng(19));
  Batch batch = small_batch(Rng(20), cfg, 1, 16, 4);
  Tape t;
  ModelOutput out = forward_loss(t, ps, cfg, batch);
  CHECK(out.memory_len == 4);

  // constant input stays constant under mean pooling
  Tensor c = Tensor::full({1, 6, 3}, 2.5);
  Var pooled = detail_model::pool_pairs(t, constant(t, c));
  for (long i = 0; i < t.value(pooled).size(); ++i) CHECK(t.value(pooled)[i] == 2.5);

  // too-short sources are rejected
  Batch shorty = small_batch(Rng(21), cfg, 1, 2, 4);
  Tape t2;
  CHECK_THROWS_AS((void)forward_loss(t2, ps, cfg, shorty), ConfigError);
}

// ---- lightweight / dynamic convolution ---------------------------------------------

TEST_CASE("lightweight conv with equal kernel logits is a windowed moving average") {
  ModelConfig cfg = tiny(ArchKind::LightweightConv);
  ParamStore ps;
  register_conv(ps, cfg, "c", "");
  ps.init_all(Rng(23));  // kernel logits zero -> softmax uniform
  Rng rng(24);
  long T = 5;
  Tensor x = random_t(rng, {1, T, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  Var out = light_dynamic_conv(t, pv, cfg, "c", constant(t, x), false);
  long w = cfg.variant.conv_width;  // 3, symmetric padding
  for (long i = 0; i < T; ++i)
    for (long d = 0; d < cfg.d_model; ++d) {
      double want = 0;
      for (long off = -(w - 1) / 2; off <= (w - 1) / 2; ++off) {
        long j = i + off;
        if (j >= 0 && j < T) want += x[j * cfg.d_model + d] / w;
      }
      CHECK(std::abs(t.value(out)[i * cfg.d_model + d] - want) < 1e-13);
    }
}

TEST_CASE("width-1 convolution is the identity") {
  ModelConfig cfg = tiny(ArchKind::LightweightConv);
  cfg.variant.conv_width = 1;
  ParamStore ps;
  register_conv(ps, cfg, "c", "");
  ps.init_all(Rng(25));
  Rng rng(26);
  Tensor x = random_t(rng, {2, 3, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  Var out = light_dynamic_conv(t, pv, cfg, "c", constant(t, x), true);
  for (long i = 0; i < x.size(); ++i) CHECK(t.value(out)[i] == x[i]);
}

TEST_CASE("both conv kinds match a sliding-window oracle") {
  for (ArchKind kind : {ArchKind::LightweightConv, ArchKind::DynamicConv}) {
    for (bool causal : {false, true}) {
      ModelConfig cfg = tiny(kind);
      ParamStore ps;
      register_conv(ps, cfg, "c", "");
      ps.init_all(Rng(27));
      Rng rng(28);
      if (kind == ArchKind::LightweightConv)
        ps.value("c.kernel") = random_t(rng, {cfg.variant.conv_groups, cfg.variant.conv_width});
      long T = 6, d = cfg.d_model, width = cfg.variant.conv_width;
      long groups = cfg.variant.conv_groups, cpg = d / groups;
      Tensor x = random_t(rng, {1, T, d});
      Tape t;
      ParamVars pv(t, ps);
      Var out = light_dynamic_conv(t, pv, cfg, "c", constant(t, x), causal);

      long pad_left = causal ? width - 1 : (width - 1) / 2;
      const Tensor* gen = kind == ArchKind::DynamicConv ? &ps.value("c.gen") : nullptr;
      const Tensor* kern = kind == ArchKind::LightweightConv ? &ps.value("c.kernel") : nullptr;
      for (long i = 0; i < T; ++i)
        for (long ch = 0; ch < d; ++ch) {
          long g = ch / cpg;
          // softmax-normalized kernel for this (position, group)
          std::vector<double> klog(static_cast<size_t>(width));
          for (long w = 0; w < width; ++w) {
            if (kern) {
              klog[static_cast<size_t>(w)] = kern->at2(g, w);
            } else {
              double s = 0;
              for (long e = 0; e < d; ++e)
                s += x[i * d + e] * (*gen)[e * (groups * width) + g * width + w];
              klog[static_cast<size_t>(w)] = s;
            }
          }
          double mx = klog[0];
          for (double v : klog) mx = std::max(mx, v);
          double z = 0;
          for (double v : klog) z += std::exp(v - mx);
          double want = 0;
          for (long w = 0; w < width; ++w) {
            long j = i + w - pad_left;
            if (j < 0 || j >= T) continue;
            want += std::exp(klog[static_cast<size_t>(w)] - mx) / z * x[j * d + ch];
          }
          CHECK(std::abs(t.value(out)[i * d + ch] - want) < 1e-12);
        }
    }
  }
}

// ---- experts ------------------------------------------------------------------------

TEST_CASE("switch with one expert equals the dense ffn") {
  ModelConfig cfg = tiny(ArchKind::Switch);
  cfg.variant.n_experts = 1;
  ParamStore ps;
  register_expert_ffn(ps, cfg, "m", "");
  ps.init_all(Rng(29));
  ModelConfig dense_cfg = tiny(ArchKind::None);
  ParamStore psd;
  register_dense_ffn(psd, dense_cfg, "f", "");
  psd.value("f.w1") = ps.value("m.e0.w1");
  psd.value("f.b1") = ps.value("m.e0.b1");
  psd.value("f.w2") = ps.value("m.e0.w2");
  psd.value("f.b2") = ps.value("m.e0.b2");
  Rng rng(30);
  Tensor x = random_t(rng, {1, 4, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps), pvd(t, psd);
  ExpertOut eo = expert_ffn(t, pv, cfg, "m", constant(t, x));
  Var dense = dense_ffn(t, pvd, dense_cfg, "f", constant(t, x));
  for (long i = 0; i < t.value(dense).size(); ++i)
    CHECK(std::abs(t.value(eo.out)[i] - t.value(dense)[i]) < 1e-12);
}

TEST_CASE("parameter-identical experts reproduce the dense ffn under any routing") {
  ModelConfig cfg = tiny(ArchKind::Moe);
  cfg.variant.n_experts = 3;
  cfg.variant.experts_k = 2;
  cfg.variant.expert_d_ff = 16;
  cfg.variant.capacity_factor = 1e9;
  ParamStore ps;
  register_expert_ffn(ps, cfg, "m", "");
  ps.init_all(Rng(31));
  for (long e = 1; e < 3; ++e) {
    ps.value("m.e" + std::to_string(e) + ".w1") = ps.value("m.e0.w1");
    ps.value("m.e" + std::to_string(e) + ".b1") = ps.value("m.e0.b1");
    ps.value("m.e" + std::to_string(e) + ".w2") = ps.value("m.e0.w2");
    ps.value("m.e" + std::to_string(e) + ".b2") = ps.value("m.e0.b2");
  }
  ModelConfig dense_cfg = tiny(ArchKind::None);
  dense_cfg.d_ff = 16;
  ParamStore psd;
  register_dense_ffn(psd, dense_cfg, "f", "");
  psd.value("f.w1") = ps.value("m.e0.w1");
  psd.value("f.b1") = ps.value("m.e0.b1");
  psd.value("f.w2") = ps.value("m.e0.w2");
  psd.value("f.b2") = ps.value("m.e0.b2");
  Rng rng(32);
  Tensor x = random_t(rng, {2, 3, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps), pvd(t, psd);
  ExpertOut eo = expert_ffn(t, pv, cfg, "m", constant(t, x));
  Var dense = dense_ffn(t, pvd, dense_cfg, "f", constant(t, x));
  for (long i = 0; i < t.value(dense).size(); ++i)
    CHECK(std::abs(t.value(eo.out)[i] - t.value(dense)[i]) < 1e-12);
}

TEST_CASE("moe top-2 matches the dense-mixture oracle when k = n_experts") {
  ModelConfig cfg = tiny(ArchKind::Moe);
  cfg.variant.n_experts = 2;
  cfg.variant.experts_k = 2;
  cfg.variant.capacity_factor = 1e9;  // no-drop mode
  ParamStore ps;
  register_expert_ffn(ps, cfg, "m", "");
  ps.init_all(Rng(33));
  Rng rng(34);
  long n = 4;
  Tensor x = random_t(rng, {1, n, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  ExpertOut eo = expert_ffn(t, pv, cfg, "m", constant(t, x));

  const Tensor& router = ps.value("m.router");
  long dh = expert_hidden_dim(cfg);
  for (long i = 0; i < n; ++i) {
    double lg[2] = {0, 0};
    for (long e = 0; e < 2; ++e)
      for (long d = 0; d < cfg.d_model; ++d) lg[e] += x[i * cfg.d_model + d] * router.at2(d, e);
    double mx = std::max(lg[0], lg[1]);
    double p0 = std::exp(lg[0] - mx), p1 = std::exp(lg[1] - mx);
    double z = p0 + p1;
    p0 /= z;
    p1 /= z;
    for (long d = 0; d < cfg.d_model; ++d) {
      double want = 0;
      double gate[2] = {p0, p1};
      for (long e = 0; e < 2; ++e) {
        const Tensor& w1 = ps.value("m.e" + std::to_string(e) + ".w1");
        const Tensor& b1 = ps.value("m.e" + std::to_string(e) + ".b1");
        const Tensor& w2 = ps.value("m.e" + std::to_string(e) + ".w2");
        const Tensor& b2 = ps.value("m.e" + std::to_string(e) + ".b2");
        double acc = b2[d];
        for (long j = 0; j < dh; ++j) {
          double pre = b1[j];
          for (long dd = 0; dd < cfg.d_model; ++dd) pre += x[i * cfg.d_model + dd] * w1.at2(dd, j);
          acc += std::max(0.0, pre) * w2.at2(j, d);
        }
        want += gate[e] * acc;
      }
      CHECK(std::abs(t.value(eo.out)[i * cfg.d_model + d] - want) < 1e-12);
    }
  }
}

TEST_CASE("switch routing: argmax expert, probability-scaled output, capacity partition") {
  ModelConfig cfg = tiny(ArchKind::Switch);
  cfg.variant.n_experts = 4;
  cfg.variant.capacity_factor = 1e9;
  ParamStore ps;
  register_expert_ffn(ps, cfg, "m", "");
  ps.init_all(Rng(35));
  // router logits [2, 1, 0, -1] for a one-hot input on dim 0
  Tensor& router = ps.value("m.router");
  for (double& v : router.data) v = 0.0;
  router.at2(0, 0) = 2.0;
  router.at2(0, 1) = 1.0;
  router.at2(0, 2) = 0.0;
  router.at2(0, 3) = -1.0;
  Tensor probs({1, 4});
  {
    double z = std::exp(2.0) + std::exp(1.0) + std::exp(0.0) + std::exp(-1.0);
    probs[0] = std::exp(2.0) / z;
  }
  DispatchPlan plan = plan_dispatch(
      [&] {
        Tensor p({1, 4});
        double z = std::exp(2.0) + std::exp(1.0) + 1.0 + std::exp(-1.0);
        p.at2(0, 0) = std::exp(2.0) / z;
        p.at2(0, 1) = std::exp(1.0) / z;
        p.at2(0, 2) = 1.0 / z;
        p.at2(0, 3) = std::exp(-1.0) / z;
        return p;
      }(),
      1, 1e9);
  REQUIRE(plan.choices[0].size() == 1);
  CHECK(plan.choices[0][0] == 0);  // argmax expert

  // 8 tokens, 4 experts: brute-force dispatch simulation with capacity 2
  Rng rng(36);
  Tensor xs = random_t(rng, {1, 8, cfg.d_model});
  ps.init_all(Rng(37));
  cfg.variant.capacity_factor = 1.0;  // capacity = ceil(8/4) = 2
  Tape t;
  ParamVars pv(t, ps);
  ExpertOut eo = expert_ffn(t, pv, cfg, "m", constant(t, xs));

  // oracle dispatch
  const Tensor& rw = ps.value("m.router");
  std::vector<long> assign(8, -1);
  std::vector<std::vector<double>> p(8, std::vector<double>(4));
  std::vector<long> load(4, 0);
  for (long i = 0; i < 8; ++i) {
    std::vector<double> lg(4, 0.0);
    for (long e = 0; e < 4; ++e)
      for (long d = 0; d < cfg.d_model; ++d) lg[static_cast<size_t>(e)] += xs[i * cfg.d_model + d] * rw.at2(d, e);
    double mx = *std::max_element(lg.begin(), lg.end());
    double z = 0;
    for (long e = 0; e < 4; ++e) {
      p[static_cast<size_t>(i)][static_cast<size_t>(e)] = std::exp(lg[static_cast<size_t>(e)] - mx);
      z += p[static_cast<size_t>(i)][static_cast<size_t>(e)];
    }
    long best = 0;
    for (long e = 0; e < 4; ++e) {
      p[static_cast<size_t>(i)][static_cast<size_t>(e)] /= z;
      if (p[static_cast<size_t>(i)][static_cast<size_t>(e)] > p[static_cast<size_t>(i)][static_cast<size_t>(best)]) best = e;
    }
    if (load[static_cast<size_t>(best)] < 2) {
      assign[static_cast<size_t>(i)] = best;
      ++load[static_cast<size_t>(best)];
    }
  }
  long dh = expert_hidden_dim(cfg);
  long assigned = 0;
  for (long i = 0; i < 8; ++i) {
    if (assign[static_cast<size_t>(i)] < 0) {
      // dropped token: the expert sub-block contributes zero
      for (long d = 0; d < cfg.d_model; ++d)
        CHECK(t.value(eo.out)[i * cfg.d_model + d] == 0.0);
      continue;
    }
    ++assigned;
    long e = assign[static_cast<size_t>(i)];
    const Tensor& w1 = ps.value("m.e" + std::to_string(e) + ".w1");
    const Tensor& b1 = ps.value("m.e" + std::to_string(e) + ".b1");
    const Tensor& w2 = ps.value("m.e" + std::to_string(e) + ".w2");
    const Tensor& b2 = ps.value("m.e" + std::to_string(e) + ".b2");
    for (long d = 0; d < cfg.d_model; ++d) {
      double acc = b2[d];
      for (long j = 0; j < dh; ++j) {
        double pre = b1[j];
        for (long dd = 0; dd < cfg.d_model; ++dd) pre += xs[i * cfg.d_model + dd] * w1.at2(dd, j);
        acc += std::max(0.0, pre) * w2.at2(j, d);
      }
      double want = p[static_cast<size_t>(i)][static_cast<size_t>(e)] * acc;
      CHECK(std::abs(t.value(eo.out)[i * cfg.d_model + d] - want) < 1e-12);
    }
  }
  CHECK(assigned >= 1);

  // partition invariant: kept assignments are exactly one expert per token
  DispatchPlan plan2 = plan_dispatch(
      [&] {
        Tensor pp({8, 4});
        for (long i = 0; i < 8; ++i)
          for (long e = 0; e < 4; ++e) pp.at2(i, e) = p[static_cast<size_t>(i)][static_cast<size_t>(e)];
        return pp;
      }(),
      1, 1.0);
  for (long i = 0; i < 8; ++i) CHECK(plan2.choices[static_cast<size_t>(i)].size() <= 1);
  long total = 0;
  for (auto& c : plan2.choices) total += static_cast<long>(c.size());
  long loadsum = 0;
  for (long e = 0; e < 4; ++e) loadsum += std::min<long>(2, load[static_cast<size_t>(e)]);
  CHECK(total == loadsum);
}

TEST_CASE("huge capacity drops nothing and keeps one expert per token") {
  Rng rng(38);
  Tensor probs({6, 3});
  for (long i = 0; i < 6; ++i) {
    double z = 0;
    for (long e = 0; e < 3; ++e) {
      probs.at2(i, e) = std::exp(rng.next_normal());
      z += probs.at2(i, e);
    }
    for (long e = 0; e < 3; ++e) probs.at2(i, e) /= z;
  }
  DispatchPlan plan = plan_dispatch(probs, 1, 1e9);
  for (long i = 0; i < 6; ++i) CHECK(plan.choices[static_cast<size_t>(i)].size() == 1);
}

TEST_CASE("experts that receive no tokens get exactly zero gradient") {
  ModelConfig cfg = tiny(ArchKind::Switch);
  cfg.variant.n_experts = 4;
  cfg.variant.capacity_factor = 1e9;
  ParamStore ps;
  register_expert_ffn(ps, cfg, "m", "");
  ps.init_all(Rng(39));
  Rng rng(40);
  Tensor x = random_t(rng, {1, 6, cfg.d_model});
  // find an expert the router never picks for this batch
  const Tensor& rw = ps.value("m.router");
  std::vector<bool> used(4, false);
  for (long i = 0; i < 6; ++i) {
    long best = 0;
    double best_l = -1e300;
    for (long e = 0; e < 4; ++e) {
      double lg = 0;
      for (long d = 0; d < cfg.d_model; ++d) lg += x[i * cfg.d_model + d] * rw.at2(d, e);
      if (lg > best_l) {
        best_l = lg;
        best = e;
      }
    }
    used[static_cast<size_t>(best)] = true;
  }
  long idle = -1;
  for (long e = 0; e < 4; ++e)
    if (!used[static_cast<size_t>(e)]) idle = e;
  REQUIRE(idle >= 0);  // seed chosen so some expert sits out

  Tape t;
  ParamVars pv(t, ps);
  ExpertOut eo = expert_ffn(t, pv, cfg, "m", constant(t, x));
  Var loss = reduce_sum_all(unary(eo.out, UnaryKind::Square));
  t.backward(loss);
  ps.zero_grads();
  ps.absorb_grads(t);
  std::string es = "m.e" + std::to_string(idle);
  for (const char* tail : {".w1", ".b1", ".w2", ".b2"})
    for (double g : ps.grad(es + tail).data) CHECK(g == 0.0);
  bool used_nonzero = false;
  for (double g : ps.grad("m.e0.w1").data)
    if (g != 0.0) used_nonzero = true;
  CHECK((used_nonzero || idle == 0));
}

TEST_CASE("load-balance auxiliary loss follows the stated formula") {
  ModelConfig cfg = tiny(ArchKind::Switch);
  cfg.variant.n_experts = 2;
  cfg.variant.capacity_factor = 1e9;
  cfg.variant.balance_weight = 1.0;
  ParamStore ps;
  register_expert_ffn(ps, cfg, "m", "");
  ps.init_all(Rng(41));
  Rng rng(42);
  Tensor x = random_t(rng, {1, 4, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  ExpertOut eo = expert_ffn(t, pv, cfg, "m", constant(t, x));

  const Tensor& rw = ps.value("m.router");
  double meanp[2] = {0, 0};
  double frac[2] = {0, 0};
  for (long i = 0; i < 4; ++i) {
    double lg[2] = {0, 0};
    for (long e = 0; e < 2; ++e)
      for (long d = 0; d < cfg.d_model; ++d) lg[e] += x[i * cfg.d_model + d] * rw.at2(d, e);
    double mx = std::max(lg[0], lg[1]);
    double e0 = std::exp(lg[0] - mx), e1 = std::exp(lg[1] - mx);
    double z = e0 + e1;
    meanp[0] += e0 / z / 4;
    meanp[1] += e1 / z / 4;
    frac[e0 > e1 ? 0 : 1] += 0.25;
  }
  double want = 2.0 * (frac[0] * meanp[0] + frac[1] * meanp[1]);
  CHECK(t.value(eo.aux_loss)[0] == doctest::Approx(want).epsilon(1e-12));
}

// ---- product key memory ----------------------------------------------------------

TEST_CASE("pkm two-stage selection equals the brute-force scan") {
  ModelConfig cfg = tiny(ArchKind::Pkm);
  cfg.variant.pkm_keys_half = 8;
  cfg.variant.pkm_values = 64;
  cfg.variant.pkm_knn = 4;
  cfg.variant.pkm_heads = 1;
  cfg.variant.pkm_d_q = 4;
  ParamStore ps;
  register_pkm(ps, cfg, "p", "");
  ps.init_all(Rng(43));
  Rng rng(44);
  long n = 6;
  Tensor x = random_t(rng, {1, n, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  Var out = pkm_lookup(t, pv, cfg, "p", constant(t, x));

  const Tensor& wq = ps.value("p.h0.q");
  const Tensor& k1 = ps.value("p.h0.k1");
  const Tensor& k2 = ps.value("p.h0.k2");
  const Tensor& vals = ps.value("p.values");
  long half = 2, nk = 8, knn = 4;
  for (long r = 0; r < n; ++r) {
    std::vector<double> q(4, 0.0);
    for (long d = 0; d < 4; ++d)
      for (long e = 0; e < cfg.d_model; ++e) q[static_cast<size_t>(d)] += x[r * cfg.d_model + e] * wq.at2(e, d);
    // brute force over all 64 slots
    std::vector<std::pair<double, long>> slots;
    for (long i = 0; i < nk; ++i)
      for (long j = 0; j < nk; ++j) {
        double s1 = 0, s2 = 0;
        for (long d = 0; d < half; ++d) {
          s1 += q[static_cast<size_t>(d)] * k1.at2(i, d);
          s2 += q[static_cast<size_t>(half + d)] * k2.at2(j, d);
        }
        slots.push_back({s1 + s2, i * nk + j});
      }
    std::stable_sort(slots.begin(), slots.end(), [](auto& a, auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<double> sel(static_cast<size_t>(knn));
    std::vector<long> ids(static_cast<size_t>(knn));
    double mx = slots[0].first;
    double z = 0;
    for (long k = 0; k < knn; ++k) {
      sel[static_cast<size_t>(k)] = std::exp(slots[static_cast<size_t>(k)].first - mx);
      z += sel[static_cast<size_t>(k)];
      ids[static_cast<size_t>(k)] = slots[static_cast<size_t>(k)].second;
    }
    for (long d = 0; d < cfg.d_model; ++d) {
      double want = 0;
      for (long k = 0; k < knn; ++k)
        want += sel[static_cast<size_t>(k)] / z * vals[ids[static_cast<size_t>(k)] * cfg.d_model + d];
      CHECK(std::abs(t.value(out)[r * cfg.d_model + d] - want) < 1e-12);
    }
  }
}

TEST_CASE("exhaustive pkm equals softmax attention over all product slots") {
  // knn covering every candidate slot is only self-consistent with the
  // knn <= n_keys_half precondition when each half holds one key
  ModelConfig cfg = tiny(ArchKind::Pkm);
  cfg.variant.pkm_keys_half = 1;
  cfg.variant.pkm_values = 1;
  cfg.variant.pkm_knn = 1;
  cfg.variant.pkm_heads = 1;
  cfg.variant.pkm_d_q = 4;
  ParamStore ps;
  register_pkm(ps, cfg, "p", "");
  ps.init_all(Rng(45));
  Rng rng(46);
  Tensor x = random_t(rng, {1, 3, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  Var out = pkm_lookup(t, pv, cfg, "p", constant(t, x));

  // one product slot: softmax over it is 1, so the output is its value row
  const Tensor& vals = ps.value("p.values");
  for (long r = 0; r < 3; ++r)
    for (long d = 0; d < cfg.d_model; ++d)
      CHECK(t.value(out)[r * cfg.d_model + d] == vals[d]);
}

TEST_CASE("zeroing one key half makes the other half decide the ranking") {
  ModelConfig cfg = tiny(ArchKind::Pkm);
  cfg.variant.pkm_keys_half = 4;
  cfg.variant.pkm_values = 16;
  cfg.variant.pkm_knn = 1;
  cfg.variant.pkm_heads = 1;
  cfg.variant.pkm_d_q = 4;
  ParamStore ps;
  register_pkm(ps, cfg, "p", "");
  ps.init_all(Rng(47));
  for (double& v : ps.value("p.h0.k2").data) v = 0.0;
  Rng rng(48);
  Tensor x = random_t(rng, {1, 2, cfg.d_model});
  Tape t;
  ParamVars pv(t, ps);
  Var out = pkm_lookup(t, pv, cfg, "p", constant(t, x));
  // knn=1 with zero half-2 scores: the winning slot is (argmax half1, 0)
  const Tensor& wq = ps.value("p.h0.q");
  const Tensor& k1 = ps.value("p.h0.k1");
  const Tensor& vals = ps.value("p.values");
  for (long r = 0; r < 2; ++r) {
    std::vector<double> q(4, 0.0);
    for (long d = 0; d < 4; ++d)
      for (long e = 0; e < cfg.d_model; ++e) q[static_cast<size_t>(d)] += x[r * cfg.d_model + e] * wq.at2(e, d);
    long best = 0;
    double best_s = -1e300;
    for (long i = 0; i < 4; ++i) {
      double s = q[0] * k1.at2(i, 0) + q[1] * k1.at2(i, 1);
      if (s > best_s) {
        best_s = s;
        best = i;
      }
    }
    for (long d = 0; d < cfg.d_model; ++d)
      CHECK(t.value(out)[r * cfg.d_model + d] == vals[(best * 4) * cfg.d_model + d]);
  }
  // knn beyond the key table is a configuration error
  ModelConfig bad = cfg;
  bad.variant.pkm_knn = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

// ---- universal transformer ----------------------------------------------------------

TEST_CASE("saturated halting stops after one step") {
  ModelConfig cfg = tiny(ArchKind::Universal);
  ParamStore ps;
  register_model_params(ps, cfg);
  ps.init_all(Rng(49));
  for (double& v : ps.value("enc.rec.halt.w").data) v = 0.0;
  ps.value("enc.rec.halt.b")[0] = 1000.0;  // p = 1 for every token
  Batch batch = small_batch(Rng(50), cfg, 1, 4, 4);

  Tape t;
  ParamVars pv(t, ps);
  detail_model::StackCtx c{t, pv, cfg, nullptr};
  Var x0 = reshape(embed_tokens(t, pv, cfg, batch.x, false), {1, 4, cfg.d_model});
  Var pos = additive_positions(t, pv, cfg, 4);
  if (pos.valid()) x0 = add(x0, pos);
  Var out = detail_model::universal_stack(c, false, x0, 4, Var{}, 0);

  // output equals the block applied once with the step-1 embedding
  Tensor row({1, 1, cfg.d_model});
  Tensor steps = sinusoidal_table(cfg.variant.ut_max_steps + 1, cfg.d_model);
  for (long i = 0; i < cfg.d_model; ++i) row[i] = steps.at2(1, i);
  Var inp = add(x0, constant(t, row));
  Var h = detail_model::self_attention_subblock(c, "enc.rec", AttnSite::EncSelf, 0, inp, inp, 4, 4, false);
  h = detail_model::ffn_subblock(c, "enc.rec", false, 0, h);
  for (long i = 0; i < t.value(h).size(); ++i)
    CHECK(t.value(out)[i] == doctest::Approx(t.value(h)[i]).epsilon(1e-14));
}

TEST_CASE("zero halting runs to the cap with the remainder on the last step") {
  ModelConfig cfg = tiny(ArchKind::Universal);
  cfg.variant.ut_max_steps = 3;
  ParamStore ps;
  register_model_params(ps, cfg);
  ps.init_all(Rng(51));
  for (double& v : ps.value("enc.rec.halt.w").data) v = 0.0;
  ps.value("enc.rec.halt.b")[0] = -1000.0;  // p = 0: no one halts early
  Batch batch = small_batch(Rng(52), cfg, 1, 4, 4);

  Tape t;
  ParamVars pv(t, ps);
  detail_model::StackCtx c{t, pv, cfg, nullptr};
  Var x0 = reshape(embed_tokens(t, pv, cfg, batch.x, false), {1, 4, cfg.d_model});
  Var pos = additive_positions(t, pv, cfg, 4);
  if (pos.valid()) x0 = add(x0, pos);
  Var out = detail_model::universal_stack(c, false, x0, 4, Var{}, 0);

  Tensor steps = sinusoidal_table(cfg.variant.ut_max_steps + 1, cfg.d_model);
  Var state = x0;
  for (long s = 1; s <= 3; ++s) {
    Tensor row({1, 1, cfg.d_model});
    for (long i = 0; i < cfg.d_model; ++i) row[i] = steps.at2(s, i);
    Var inp = add(state, constant(t, row));
    Var h = detail_model::self_attention_subblock(c, "enc.rec", AttnSite::EncSelf, 0, inp, inp, 4, 4, false);
    state = detail_model::ffn_subblock(c, "enc.rec", false, 0, h);
  }
  for (long i = 0; i < t.value(state).size(); ++i)
    CHECK(t.value(out)[i] == doctest::Approx(t.value(state)[i]).epsilon(1e-12));
}

TEST_CASE("act combination weights are the halting probabilities with a remainder") {
  // zeroed block: states only accumulate step embeddings, so the per-step
  // halting probabilities are hand-computable and the output must be
  // p1 h1 + (1 - p1) h2 for a token halting at step 2
  ModelConfig cfg = tiny(ArchKind::Universal);
  cfg.variant.ut_max_steps = 4;
  cfg.variant.ut_threshold = 0.5;
  cfg.variant.position = PositionKind::Learned;
  ParamStore ps;
  register_model_params(ps, cfg);
  // zero everything, then set the pieces we need
  for (auto& slot : ps.slots())
    for (double& v : slot.value.data) v = 0.0;
  // residual branches vanish (O and w2 already zero); keep final projections zero
  Tensor& hw = ps.value("enc.rec.halt.w");
  hw[0] = 1.0;  // p = sigmoid(state[0])
  ps.value("enc.rec.halt.b")[0] = 0.0;

  long T = 1;
  Tape t;
  ParamVars pv(t, ps);
  detail_model::StackCtx c{t, pv, cfg, nullptr};
  // craft the initial state directly
  double a = -1.5;  // sigmoid(a + step-embedding drift) stays below theta exactly once
  Tensor x0t = Tensor::zeros({1, T, cfg.d_model});
  x0t[0] = a;
  Var x0 = constant(t, x0t);
  Var out = detail_model::universal_stack(c, false, x0, T, Var{}, 0);

  // replicate by hand: with a zero block, h_s = x0 + step_row_s and the
  // state re-freezes to x0 only via acc bookkeeping
  Tensor steps = sinusoidal_table(5, cfg.d_model);
  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> p;
  double carry0 = a;
  std::vector<std::vector<double>> hs;
  {
    double cum = 0;
    double prev0 = carry0;
    std::vector<double> prev(static_cast<size_t>(cfg.d_model), 0.0);
    prev[0] = a;
    for (long s = 1; s <= 4; ++s) {
      std::vector<double> h(static_cast<size_t>(cfg.d_model));
      for (long d = 0; d < cfg.d_model; ++d) h[static_cast<size_t>(d)] = prev[static_cast<size_t>(d)] + steps.at2(s, d);
      double ps_ = sigmoid(h[0]);
      hs.push_back(h);
      p.push_back(ps_);
      bool halts = cum + ps_ >= 0.5;
      if (halts) break;
      cum += ps_;
      prev = h;
      prev0 = h[0];
      (void)prev0;
    }
  }
  REQUIRE(p.size() == 2);  // halts at step 2 by construction
  for (long d = 0; d < cfg.d_model; ++d) {
    double want = p[0] * hs[0][static_cast<size_t>(d)] + (1.0 - p[0]) * hs[1][static_cast<size_t>(d)];
    CHECK(t.value(out)[d] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("architecture variants pass the end-to-end gradient check") {
  const ArchKind kinds[] = {ArchKind::Transparent,     ArchKind::Synthesizer,
                            ArchKind::Funnel,          ArchKind::LightweightConv,
                            ArchKind::DynamicConv,     ArchKind::Moe,
                            ArchKind::Switch,          ArchKind::Pkm,
                            ArchKind::Universal};
  for (ArchKind k : kinds) {
    ModelConfig cfg = tiny(k);
    if (k == ArchKind::Funnel) {
      cfg.l_enc = 2;
      cfg.variant.funnel_blocks = 2;
      cfg.variant.funnel_layers_per_block = 1;
    }
    if (k == ArchKind::Synthesizer) {
      cfg.variant.synth_kind = SynthKind::Dense;
      cfg.variant.synth_mix = SynthMix::PlusAlpha;
    }
    if (k == ArchKind::Moe || k == ArchKind::Switch) cfg.variant.capacity_factor = 1e9;
    ParamStore ps;
    register_model_params(ps, cfg);
    ps.init_all(Rng(61));
    Batch batch = small_batch(Rng(62), cfg, 1, 4, 4);
    double err = grad_check(
        [&](Tape& t, ParamStore& s) { return forward_loss(t, s, cfg, batch).loss; }, ps, 1e-5);
    INFO(static_cast<int>(k));
    CHECK(err < 1e-4);
  }
}

#pragma once
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "wb/config.hpp"
#include "wb/param_store.hpp"
#include "wb/positional.hpp"
#include "wb/tape.hpp"

namespace wb {

inline constexpr double kNormEps = 1e-6;   // layer norm, inside the sqrt
inline constexpr double kRmsEps = 1e-12;   // rms norm; small enough that a
                                           // unit-RMS vector passes through
                                           // within 1e-9 at 64-bit

// GLU blocks shrink the hidden width to keep parameters level with the
// dense FFN: 2/3 of d_ff, rounded to the nearest multiple of the head count.
inline long glu_hidden_dim(long d_ff, long heads) {
  double target = 2.0 * static_cast<double>(d_ff) / 3.0;
  long m = static_cast<long>(std::llround(target / static_cast<double>(heads)));
  return std::max<long>(1, m) * heads;
}

inline long expert_hidden_dim(const ModelConfig& cfg) {
  if (cfg.variant.expert_d_ff > 0) return cfg.variant.expert_d_ff;
  return cfg.variant.arch == ArchKind::Moe ? std::max<long>(1, cfg.d_ff / 2) : cfg.d_ff;
}

// ---- layer layout ----------------------------------------------------------------

inline bool synth_replaces_self_attn(const ModelConfig& cfg) {
  return cfg.variant.arch == ArchKind::Synthesizer;
}
inline bool conv_replaces_self_attn(const ModelConfig& cfg) {
  return cfg.variant.arch == ArchKind::LightweightConv || cfg.variant.arch == ArchKind::DynamicConv;
}
inline bool layer_has_experts(const ModelConfig& cfg, long layer, long n_layers) {
  if (cfg.variant.arch != ArchKind::Moe && cfg.variant.arch != ArchKind::Switch) return false;
  for (long l : cfg.sparse_layers(n_layers))
    if (l == layer) return true;
  return false;
}
inline bool layer_has_pkm(const ModelConfig& cfg, bool decoder, long layer) {
  return cfg.variant.arch == ArchKind::Pkm && decoder && layer == cfg.pkm_layer();
}

inline bool has_final_norm(const ModelConfig& cfg) {
  switch (cfg.variant.norm) {
    case NormKind::LayerNorm:
    case NormKind::RmsNorm:
      return cfg.variant.placement == NormPlacement::Pre;
    case NormKind::RezeroLayerNorm:
    case NormKind::RezeroRmsNorm:
      return true;
    case NormKind::Rezero:
    case NormKind::Fixup:
      return false;
  }
  return false;
}

inline bool norm_has_beta(NormKind k) {
  return k == NormKind::LayerNorm || k == NormKind::RezeroLayerNorm;
}

// ---- normalization ----------------------------------------------------------

inline Var layer_norm(Var h, Var gamma, Var beta, double eps = kNormEps) {
  Var mean = reduce_mean(h, -1, true);
  Var centered = sub(h, mean);
  Var var = reduce_mean(unary(centered, UnaryKind::Square), -1, true);
  Var inv = unary(unary(shift(var, eps), UnaryKind::Sqrt), UnaryKind::Reciprocal);
  return add(mul(mul(centered, inv), gamma), beta);
}

inline Var rms_norm(Var h, Var gamma, double eps = kRmsEps) {
  Var ms = reduce_mean(unary(h, UnaryKind::Square), -1, true);
  Var inv = unary(unary(shift(ms, eps), UnaryKind::Sqrt), UnaryKind::Reciprocal);
  return mul(mul(h, inv), gamma);
}

// ---- residual wiring --------------------------------------------------------

// Each sub-block site owns one instance of the configured norm/scaling
// parameters under `prefix` (optionally aliased into a share group).
inline void register_subblock_norm(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix,
                                   const std::string& group_prefix = "") {
  auto reg = [&](const char* suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape, scheme,
                      group_prefix.empty() ? "" : group_prefix + suffix);
  };
  switch (cfg.variant.norm) {
    case NormKind::LayerNorm:
      reg(".g", {cfg.d_model}, InitScheme::ones());
      reg(".b", {cfg.d_model}, InitScheme::zeros());
      break;
    case NormKind::RmsNorm:
      reg(".g", {cfg.d_model}, InitScheme::ones());
      break;
    case NormKind::Rezero:
      reg(".alpha", {1}, InitScheme::zeros());
      break;
    case NormKind::RezeroLayerNorm:
      reg(".g", {cfg.d_model}, InitScheme::ones());
      reg(".b", {cfg.d_model}, InitScheme::zeros());
      reg(".alpha", {1}, InitScheme::zeros());
      break;
    case NormKind::RezeroRmsNorm:
      reg(".g", {cfg.d_model}, InitScheme::ones());
      reg(".alpha", {1}, InitScheme::zeros());
      break;
    case NormKind::Fixup:
      reg(".fg", {1}, InitScheme::ones());
      reg(".fb", {1}, InitScheme::zeros());
      break;
  }
}

// Fixup rescales branch matrices by N^-1/2 where N counts residual
// sub-blocks across both stacks.
inline long fixup_subblock_count(const ModelConfig& cfg) {
  long enc = cfg.variant.arch == ArchKind::Universal ? 1 : cfg.l_enc;
  long dec = cfg.variant.arch == ArchKind::Universal ? 1 : cfg.l_dec;
  return 2 * enc + 3 * dec;
}

inline double fixup_matrix_multiplier(const ModelConfig& cfg) {
  return 1.0 / std::sqrt(static_cast<double>(fixup_subblock_count(cfg)));
}

// Branch-input projection init: fixup rescales, everything else is fan-in
// scaled normal.
inline InitScheme branch_matrix_init(const ModelConfig& cfg, long fan_in) {
  double mult = cfg.variant.norm == NormKind::Fixup ? fixup_matrix_multiplier(cfg) : 1.0;
  return InitScheme::scaled_normal(fan_in, mult);
}

// Branch-final projection init: fixup zeroes these so every residual branch
// starts exactly at zero.
inline InitScheme branch_output_init(const ModelConfig& cfg, long fan_in) {
  if (cfg.variant.norm == NormKind::Fixup) return InitScheme::zeros();
  return InitScheme::scaled_normal(fan_in);
}

// ---- attention --------------------------------------------------------------

inline Var causal_mask(Tape& t, long tq, long tk) {
  Tensor m({tq, tk});
  for (long i = 0; i < tq; ++i)
    for (long j = 0; j < tk; ++j) m.at2(i, j) = j > i ? kMaskedLogit : 0.0;
  return constant(t, m);
}

struct AttnInputs {
  Var q_src;  // [B, Tq, d_model]
  Var k_src;  // [B, Tk, d_model]
  Var v_src;  // [B, Tk, d_model]
  long tq = 0;
  long tk = 0;
  bool causal = false;
  std::vector<Var> bias_per_head;  // optional [Tq, Tk] per head
  RelRepOffsets relrep;
};

inline void register_attention(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix,
                               const std::string& group_prefix) {
  long proj = cfg.heads * cfg.d_kv;
  auto reg = [&](const char* suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape,
                      scheme, group_prefix.empty() ? "" : group_prefix + suffix);
  };
  reg(".q", {cfg.d_model, proj}, branch_matrix_init(cfg, cfg.d_model));
  reg(".k", {cfg.d_model, proj}, branch_matrix_init(cfg, cfg.d_model));
  reg(".v", {cfg.d_model, proj}, branch_matrix_init(cfg, cfg.d_model));
  reg(".o", {proj, cfg.d_model}, branch_output_init(cfg, proj));
}

// Standard scaled dot-product multi-head attention; heads are sliced,
// attended and concatenated, then projected by O. The residual and norm live
// in the enclosing sub-block.
inline Var multihead_attention(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                               const std::string& prefix, const AttnInputs& in) {
  long H = cfg.heads, dkv = cfg.d_kv;
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dkv));
  if (!in.bias_per_head.empty() && static_cast<long>(in.bias_per_head.size()) != H)
    throw ConfigError("attention bias must supply one [Tq,Tk] slice per head");
  Var q = matmul(in.q_src, pv(prefix + ".q"));
  Var k = matmul(in.k_src, pv(prefix + ".k"));
  Var v = matmul(in.v_src, pv(prefix + ".v"));
  Var mask;
  if (in.causal) mask = causal_mask(t, in.tq, in.tk);

  Var arel_k, arel_v;
  if (in.relrep.active) {
    arel_k = reshape(gather_rows(in.relrep.key_table, in.relrep.idx), {in.tq, in.tk, dkv});
    if (in.relrep.values)
      arel_v = reshape(gather_rows(in.relrep.val_table, in.relrep.idx), {in.tq, in.tk, dkv});
  }

  std::vector<Var> heads;
  for (long h = 0; h < H; ++h) {
    Var qh = slice(q, 2, h * dkv, dkv);
    Var kh = slice(k, 2, h * dkv, dkv);
    Var vh = slice(v, 2, h * dkv, dkv);
    Var logits = matmul(qh, kh, false, true);  // [B, Tq, Tk]
    if (in.relrep.active) {
      // q[i] . a_rel[i, j] for every pair, batched over the query axis
      long B = t.value(qh).shape[0];
      Var qr = reshape(qh, {B, in.tq, 1, dkv});
      Var extra = matmul(qr, arel_k, false, true);  // [B, Tq, 1, Tk]
      logits = add(logits, reshape(extra, {B, in.tq, in.tk}));
    }
    logits = scale(logits, inv_sqrt_dk);
    if (in.causal) logits = add(logits, mask);
    if (!in.bias_per_head.empty()) logits = add(logits, in.bias_per_head[static_cast<size_t>(h)]);
    Var w = softmax_lastdim(logits);
    Var out = matmul(w, vh);  // [B, Tq, dkv]
    if (in.relrep.active && in.relrep.values) {
      long B = t.value(qh).shape[0];
      Var wr = reshape(w, {B, in.tq, 1, in.tk});
      Var extra = matmul(wr, arel_v);  // [B, Tq, 1, dkv]
      out = add(out, reshape(extra, {B, in.tq, dkv}));
    }
    heads.push_back(out);
  }
  Var cat = concat(heads, 2);
  return matmul(cat, pv(prefix + ".o"));
}

// ---- synthesizer attention ---------------------------------------------------

inline void register_synth_attention(ParamStore& ps, const ModelConfig& cfg,
                                     const std::string& prefix, const std::string& group_prefix) {
  const VariantSpec& v = cfg.variant;
  auto reg = [&](const std::string& suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape,
                      scheme, group_prefix.empty() ? "" : group_prefix + suffix);
  };
  for (long h = 0; h < cfg.heads; ++h) {
    std::string hs = ".syn.h" + std::to_string(h);
    switch (v.synth_kind) {
      case SynthKind::Dense:
        reg(hs + ".f1", {cfg.d_model, v.synth_hidden}, branch_matrix_init(cfg, cfg.d_model));
        reg(hs + ".f2", {v.synth_hidden, cfg.t_max}, branch_matrix_init(cfg, v.synth_hidden));
        break;
      case SynthKind::Random:
        reg(hs + ".r", {cfg.t_max, cfg.t_max}, InitScheme::zeros());
        break;
      case SynthKind::Factorized:
        reg(hs + ".r1", {cfg.t_max, v.synth_rank}, InitScheme::scaled_normal(v.synth_rank));
        reg(hs + ".r2", {cfg.t_max, v.synth_rank}, InitScheme::scaled_normal(v.synth_rank));
        break;
    }
  }
  if (v.synth_mix == SynthMix::PlusAlpha)
    reg(".syn.alpha", {1}, InitScheme::constant(0.5));
  if (v.synth_mix == SynthMix::Pure) {
    // query/key/value projections are replaced; values are per-head input
    // slices concatenated back to d_model before O
    reg(".o", {cfg.d_model, cfg.d_model}, branch_output_init(cfg, cfg.d_model));
  } else {
    register_attention(ps, cfg, prefix, group_prefix);
  }
}

inline Var synth_logits_head(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                             const std::string& prefix, long h, Var x, long tq, long tk) {
  const VariantSpec& v = cfg.variant;
  if (tq > cfg.t_max || tk > cfg.t_max)
    throw ConfigError("synthesizer: sequence length exceeds the trained t_max");
  std::string hs = prefix + ".syn.h" + std::to_string(h);
  switch (v.synth_kind) {
    case SynthKind::Dense: {
      Var h1 = unary(matmul(x, pv(hs + ".f1")), UnaryKind::Relu);
      Var lg = matmul(h1, pv(hs + ".f2"));  // [B, Tq, t_max]
      return slice(lg, 2, 0, tk);
    }
    case SynthKind::Random: {
      Var table = pv(hs + ".r");
      return slice(slice(table, 0, 0, tq), 1, 0, tk);  // [Tq, Tk], broadcasts over batch
    }
    case SynthKind::Factorized: {
      Var r1 = slice(pv(hs + ".r1"), 0, 0, tq);
      Var r2 = slice(pv(hs + ".r2"), 0, 0, tk);
      return matmul(r1, r2, false, true);  // [Tq, Tk]
    }
  }
  return Var{};
}

// Self-attention with synthesized logits. Pure mode drops the q/k/v
// projections and mixes per-head slices of the input; plus modes add the
// synthetic logits onto scaled dot-product logits (plus_alpha interpolates
// with a learned scalar).
inline Var synthesizer_attention(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                                 const std::string& prefix, const AttnInputs& in) {
  const VariantSpec& v = cfg.variant;
  long H = cfg.heads;
  Var mask;
  if (in.causal) mask = causal_mask(t, in.tq, in.tk);

  if (v.synth_mix == SynthMix::Pure) {
    long dh = cfg.d_model / H;
    std::vector<Var> heads;
    for (long h = 0; h < H; ++h) {
      Var logits = synth_logits_head(t, pv, cfg, prefix, h, in.q_src, in.tq, in.tk);
      if (in.causal) logits = add(logits, mask);
      Var w = softmax_lastdim(logits);
      Var vh = slice(in.v_src, 2, h * dh, dh);
      heads.push_back(matmul(w, vh));
    }
    return matmul(concat(heads, 2), pv(prefix + ".o"));
  }

  long dkv = cfg.d_kv;
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dkv));
  Var q = matmul(in.q_src, pv(prefix + ".q"));
  Var k = matmul(in.k_src, pv(prefix + ".k"));
  Var vv = matmul(in.v_src, pv(prefix + ".v"));
  Var alpha, one_minus_alpha;
  if (v.synth_mix == SynthMix::PlusAlpha) {
    alpha = pv(prefix + ".syn.alpha");
    one_minus_alpha = shift(neg(alpha), 1.0);
  }
  std::vector<Var> heads;
  for (long h = 0; h < H; ++h) {
    Var qh = slice(q, 2, h * dkv, dkv);
    Var kh = slice(k, 2, h * dkv, dkv);
    Var vh = slice(vv, 2, h * dkv, dkv);
    Var dot = scale(matmul(qh, kh, false, true), inv_sqrt_dk);
    Var syn = synth_logits_head(t, pv, cfg, prefix, h, in.q_src, in.tq, in.tk);
    Var logits = v.synth_mix == SynthMix::Plus
                     ? add(dot, syn)
                     : add(mul(syn, alpha), mul(dot, one_minus_alpha));
    if (in.causal) logits = add(logits, mask);
    Var w = softmax_lastdim(logits);
    heads.push_back(matmul(w, vh));
  }
  return matmul(concat(heads, 2), pv(prefix + ".o"));
}

// ---- lightweight / dynamic convolution ---------------------------------------

inline void register_conv(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix,
                          const std::string& group_prefix) {
  const VariantSpec& v = cfg.variant;
  auto reg = [&](const char* suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape,
                      scheme, group_prefix.empty() ? "" : group_prefix + suffix);
  };
  if (cfg.variant.arch == ArchKind::LightweightConv)
    reg(".kernel", {v.conv_groups, v.conv_width}, InitScheme::zeros());
  else
    reg(".gen", {cfg.d_model, v.conv_groups * v.conv_width}, branch_matrix_init(cfg, cfg.d_model));
}

// Depthwise convolution with softmax-normalized kernels; weights are tied
// across channel groups. The dynamic kind derives the kernel from the input
// at each position. Decoder side pads causally, encoder side symmetrically.
inline Var light_dynamic_conv(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                              const std::string& prefix, Var x, bool causal) {
  const VariantSpec& v = cfg.variant;
  long width = v.conv_width, groups = v.conv_groups;
  long B = t.value(x).shape[0], T = t.value(x).shape[1];
  long cpg = cfg.d_model / groups;
  long pad_left = causal ? width - 1 : (width - 1) / 2;
  bool dynamic = cfg.variant.arch == ArchKind::DynamicConv;

  Var weights;  // lightweight: [groups, width]; dynamic: [B, T, groups, width]
  if (dynamic) {
    Var gen = matmul(x, pv(prefix + ".gen"));  // [B, T, groups*width]
    weights = softmax_lastdim(reshape(gen, {B, T, groups, width}));
  } else {
    weights = softmax_lastdim(pv(prefix + ".kernel"));
  }

  std::vector<Var> group_outs;
  for (long g = 0; g < groups; ++g) {
    Var xg = slice(x, 2, g * cpg, cpg);  // [B, T, cpg]
    Var acc;
    for (long w = 0; w < width; ++w) {
      long off = w - pad_left;  // shifted[t] = x[t + off]
      if (off >= T || -off >= T) continue;
      Var shifted;
      if (off >= 0) {
        Var part = slice(xg, 1, off, T - off);
        shifted = off == 0 ? part
                           : concat({part, constant(t, Tensor::zeros({B, off, cpg}))}, 1);
      } else {
        Var part = slice(xg, 1, 0, T + off);
        shifted = concat({constant(t, Tensor::zeros({B, -off, cpg})), part}, 1);
      }
      Var kw;
      if (dynamic)
        kw = reshape(slice(slice(weights, 2, g, 1), 3, w, 1), {B, T, 1});
      else
        kw = reshape(slice(slice(weights, 0, g, 1), 1, w, 1), {1});
      Var term = mul(shifted, kw);
      acc = acc.valid() ? add(acc, term) : term;
    }
    group_outs.push_back(acc);
  }
  return concat(group_outs, 2);
}

// ---- feedforward blocks ------------------------------------------------------

inline void register_dense_ffn(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix,
                               const std::string& group_prefix) {
  auto reg = [&](const char* suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape,
                      scheme, group_prefix.empty() ? "" : group_prefix + suffix);
  };
  if (cfg.variant.glu == GluKind::None) {
    reg(".w1", {cfg.d_model, cfg.d_ff}, branch_matrix_init(cfg, cfg.d_model));
    reg(".b1", {cfg.d_ff}, InitScheme::zeros());
    reg(".w2", {cfg.d_ff, cfg.d_model}, branch_output_init(cfg, cfg.d_ff));
    reg(".b2", {cfg.d_model}, InitScheme::zeros());
  } else {
    long dg = glu_hidden_dim(cfg.d_ff, cfg.heads);
    reg(".wg", {cfg.d_model, dg}, branch_matrix_init(cfg, cfg.d_model));
    reg(".bg", {dg}, InitScheme::zeros());
    reg(".wl", {cfg.d_model, dg}, branch_matrix_init(cfg, cfg.d_model));
    reg(".bl", {dg}, InitScheme::zeros());
    reg(".w2", {dg, cfg.d_model}, branch_output_init(cfg, dg));
    reg(".b2", {cfg.d_model}, InitScheme::zeros());
  }
}

inline Var activation_fn(Var x, Activation a) {
  switch (a) {
    case Activation::Relu: return unary(x, UnaryKind::Relu);
    case Activation::Gelu: return unary(x, UnaryKind::Gelu);
    case Activation::Swish: return unary(x, UnaryKind::Swish);
    case Activation::Elu: return unary(x, UnaryKind::Elu);
    case Activation::Selu: return unary(x, UnaryKind::Selu);
    case Activation::Sigmoid: return unary(x, UnaryKind::Sigmoid);
    case Activation::Softplus: return unary(x, UnaryKind::Softplus);
  }
  return x;
}

// Position-wise FFN: projection, nonlinearity, projection; or the gated
// two-branch form (sigma(x Wg + bg) . (x Wl + bl)) W2 + b2 for GLU kinds.
inline Var dense_ffn(Tape& t, ParamVars& pv, const ModelConfig& cfg, const std::string& prefix,
                     Var x) {
  const VariantSpec& v = cfg.variant;
  if (v.glu == GluKind::None) {
    Var h = add(matmul(x, pv(prefix + ".w1")), pv(prefix + ".b1"));
    h = activation_fn(h, v.activation);
    return add(matmul(h, pv(prefix + ".w2")), pv(prefix + ".b2"));
  }
  Var gate = add(matmul(x, pv(prefix + ".wg")), pv(prefix + ".bg"));
  switch (v.glu) {
    case GluKind::Glu: gate = unary(gate, UnaryKind::Sigmoid); break;
    case GluKind::Reglu: gate = unary(gate, UnaryKind::Relu); break;
    case GluKind::Geglu: gate = unary(gate, UnaryKind::Gelu); break;
    case GluKind::Swiglu: gate = unary(gate, UnaryKind::Swish); break;
    case GluKind::Liglu: break;  // identity gate
    case GluKind::None: break;
  }
  Var lin = add(matmul(x, pv(prefix + ".wl")), pv(prefix + ".bl"));
  return add(matmul(mul(gate, lin), pv(prefix + ".w2")), pv(prefix + ".b2"));
}

}  // namespace wb

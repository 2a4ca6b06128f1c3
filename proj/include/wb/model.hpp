#pragma once
#include <string>
#include <vector>

#include "wb/blocks.hpp"
#include "wb/config.hpp"
#include "wb/embed_softmax.hpp"
#include "wb/experts.hpp"
#include "wb/param_store.hpp"
#include "wb/positional.hpp"
#include "wb/tape.hpp"

namespace wb {

struct Batch {
  long n_seq = 0;
  long src_len = 0;
  long tgt_len = 0;
  std::vector<long> x;       // [n_seq * src_len]
  std::vector<long> y;       // [n_seq * tgt_len]
  std::vector<double> mask;  // [n_seq * tgt_len], 1 = scored
};

inline constexpr long kBosToken = 0;  // decoder shift-in token; tasks reserve id 0

// ---- sub-block wiring ----------------------------------------------------------

// Two-phase view of one residual sub-block so attention sites with split
// query/memory inputs can norm both sides with the same instance.
struct SubBlockCtx {
  Tape& t;
  ParamVars& pv;
  const ModelConfig& cfg;
  std::string prefix;

  Var input(Var x) const {
    const VariantSpec& v = cfg.variant;
    switch (v.norm) {
      case NormKind::LayerNorm:
        return v.placement == NormPlacement::Pre
                   ? layer_norm(x, pv(prefix + ".g"), pv(prefix + ".b"))
                   : x;
      case NormKind::RmsNorm:
        return v.placement == NormPlacement::Pre ? rms_norm(x, pv(prefix + ".g")) : x;
      case NormKind::Rezero:
        return x;
      case NormKind::RezeroLayerNorm:
        return layer_norm(x, pv(prefix + ".g"), pv(prefix + ".b"));
      case NormKind::RezeroRmsNorm:
        return rms_norm(x, pv(prefix + ".g"));
      case NormKind::Fixup:
        return add(x, pv(prefix + ".fb"));
    }
    return x;
  }

  Var combine(Var base, Var branch_out) const {
    const VariantSpec& v = cfg.variant;
    switch (v.norm) {
      case NormKind::LayerNorm:
        if (v.placement == NormPlacement::Pre) return add(base, branch_out);
        return layer_norm(add(base, branch_out), pv(prefix + ".g"), pv(prefix + ".b"));
      case NormKind::RmsNorm:
        if (v.placement == NormPlacement::Pre) return add(base, branch_out);
        return rms_norm(add(base, branch_out), pv(prefix + ".g"));
      case NormKind::Rezero:
      case NormKind::RezeroLayerNorm:
      case NormKind::RezeroRmsNorm:
        return add(base, mul(branch_out, pv(prefix + ".alpha")));
      case NormKind::Fixup:
        return add(base, mul(branch_out, pv(prefix + ".fg")));
    }
    return base;
  }
};

inline void register_final_norm(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix) {
  if (!has_final_norm(cfg)) return;
  ps.register_param(prefix + ".g", {cfg.d_model}, InitScheme::ones());
  if (norm_has_beta(cfg.variant.norm))
    ps.register_param(prefix + ".b", {cfg.d_model}, InitScheme::zeros());
}

inline Var apply_final_norm(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                            const std::string& prefix, Var x) {
  if (!has_final_norm(cfg)) return x;
  if (norm_has_beta(cfg.variant.norm))
    return layer_norm(x, pv(prefix + ".g"), pv(prefix + ".b"));
  return rms_norm(x, pv(prefix + ".g"));
}

// ---- layer layout: predicates live in blocks.hpp -----------------------------------

inline void register_layer(ParamStore& ps, const ModelConfig& cfg, bool decoder, long layer,
                           const std::string& prefix, const std::string& group) {
  auto g = [&](const char* tail) { return group.empty() ? std::string() : group + tail; };
  if (synth_replaces_self_attn(cfg))
    register_synth_attention(ps, cfg, prefix + ".attn", g(".attn"));
  else if (conv_replaces_self_attn(cfg))
    register_conv(ps, cfg, prefix + ".conv", g(".conv"));
  else
    register_attention(ps, cfg, prefix + ".attn", g(".attn"));
  register_subblock_norm(ps, cfg, prefix + ".ln1", g(".ln1"));
  if (decoder) {
    register_attention(ps, cfg, prefix + ".cross", g(".cross"));
    register_subblock_norm(ps, cfg, prefix + ".ln2", g(".ln2"));
  }
  if (layer_has_experts(cfg, layer, decoder ? cfg.l_dec : cfg.l_enc))
    register_expert_ffn(ps, cfg, prefix + ".ffn", g(".ffn"));
  else if (layer_has_pkm(cfg, decoder, layer))
    register_pkm(ps, cfg, prefix + ".pkm", g(".pkm"));
  else
    register_dense_ffn(ps, cfg, prefix + ".ffn", g(".ffn"));
  register_subblock_norm(ps, cfg, prefix + (decoder ? ".ln3" : ".ln2"),
                         g(decoder ? ".ln3" : ".ln2"));
}

inline void register_model_params(ParamStore& ps, const ModelConfig& cfg) {
  cfg.validate();
  const VariantSpec& v = cfg.variant;
  register_embeddings(ps, cfg);
  register_output_head(ps, cfg);
  register_positional_params(ps, cfg);
  if (v.arch == ArchKind::Universal) {
    for (bool decoder : {false, true}) {
      std::string prefix = decoder ? "dec.rec" : "enc.rec";
      register_layer(ps, cfg, decoder, 0, prefix, "");
      ps.register_param(prefix + ".halt.w", {cfg.d_model, 1},
                        InitScheme::scaled_normal(cfg.d_model));
      ps.register_param(prefix + ".halt.b", {1}, InitScheme::constant(-1.0));
    }
  } else {
    bool share_enc =
        v.sharing == SharingScheme::BlockAll || v.sharing == SharingScheme::EncoderOnly;
    bool share_dec =
        v.sharing == SharingScheme::BlockAll || v.sharing == SharingScheme::DecoderOnly;
    for (long l = 0; l < cfg.l_enc; ++l)
      register_layer(ps, cfg, false, l, "enc.l" + std::to_string(l), share_enc ? "enc.block" : "");
    for (long l = 0; l < cfg.l_dec; ++l)
      register_layer(ps, cfg, true, l, "dec.l" + std::to_string(l), share_dec ? "dec.block" : "");
  }
  if (v.arch == ArchKind::Transparent)
    ps.register_param("transparent.w", {cfg.l_dec, cfg.l_enc + 1}, InitScheme::zeros());
  register_final_norm(ps, cfg, "enc.final");
  register_final_norm(ps, cfg, "dec.final");
}

// Fixup resolves to a directive list consumed by initialization: per
// sub-block scalar scale/bias pairs, zero-init of branch-final projections,
// and N^-1/2 rescaling of the remaining branch matrices.
struct FixupDirective {
  enum Kind : uint8_t { ZeroInit, Rescale, ScalarScale, ScalarBias };
  std::string param;
  Kind kind;
  double factor = 1.0;
};

inline std::vector<FixupDirective> fixup_init(const ModelConfig& cfg) {
  if (cfg.variant.norm != NormKind::Fixup)
    throw ConfigError("fixup_init requires norm.kind = fixup");
  ParamStore ps;
  register_model_params(ps, cfg);
  auto ends_with = [](const std::string& s, const char* suf) {
    std::string t(suf);
    return s.size() >= t.size() && s.compare(s.size() - t.size(), t.size(), t) == 0;
  };
  std::vector<FixupDirective> out;
  for (const auto& slot : ps.slots()) {
    if (ends_with(slot.group, ".fg")) {
      out.push_back({slot.group, FixupDirective::ScalarScale, 1.0});
    } else if (ends_with(slot.group, ".fb")) {
      out.push_back({slot.group, FixupDirective::ScalarBias, 0.0});
    } else if (slot.scheme.kind == InitKind::Zeros && slot.shape.size() == 2 &&
               (ends_with(slot.group, ".o") || ends_with(slot.group, ".w2"))) {
      out.push_back({slot.group, FixupDirective::ZeroInit, 0.0});
    } else if (slot.scheme.kind == InitKind::ScaledNormal && slot.scheme.c != 1.0) {
      out.push_back({slot.group, FixupDirective::Rescale, slot.scheme.c});
    }
  }
  return out;
}

// ---- forward ----------------------------------------------------------------------

struct ModelOutput {
  Var loss;              // task loss plus weighted auxiliary terms
  Var nll;               // cross-entropy alone
  Var log_probs;         // [n_seq, tgt_len, d_vocab] when requested
  std::vector<Var> aux;  // weighted auxiliary losses (load balance, ponder)
  long memory_len = 0;   // encoder memory length the decoder attended to
};

namespace detail_model {

// Stride-2 mean pooling along the sequence axis; an odd tail element pools
// alone. [B, T, d] -> [B, ceil(T/2), d]
inline Var pool_pairs(Tape& t, Var x) {
  const Shape& s = t.value(x).shape;
  long B = s[0], T = s[1], d = s[2];
  if (T == 1) return x;
  long pairs = T / 2;
  Var head = slice(x, 1, 0, pairs * 2);
  Var pooled = reduce_mean(reshape(head, {B, pairs, 2, d}), 2);
  if (T % 2 == 0) return pooled;
  return concat({pooled, slice(x, 1, pairs * 2, 1)}, 1);
}

struct StackCtx {
  Tape& t;
  ParamVars& pv;
  const ModelConfig& cfg;
  std::vector<Var>* aux;
};

// One self-attention sub-block, honoring the variant's attention
// replacement. `qstride` maps pooled query indices onto key positions at
// funnel transition layers; the pooled stream is the residual base there.
inline Var self_attention_subblock(StackCtx& c, const std::string& prefix, AttnSite site,
                                   long layer, Var x_q, Var x_kv, long tq, long tk, bool causal,
                                   long qstride = 1) {
  SubBlockCtx sb{c.t, c.pv, c.cfg, prefix + ".ln1"};
  Var nq = sb.input(x_q);
  Var nkv = x_kv.id == x_q.id ? nq : sb.input(x_kv);
  Var out;
  if (conv_replaces_self_attn(c.cfg)) {
    out = light_dynamic_conv(c.t, c.pv, c.cfg, prefix + ".conv", nq, causal);
  } else {
    AttnInputs in;
    in.q_src = nq;
    in.k_src = nkv;
    in.v_src = nkv;
    in.tq = tq;
    in.tk = tk;
    in.causal = causal;
    in.bias_per_head = attention_bias(c.t, c.pv, c.cfg, site, layer, tq, tk, qstride);
    in.relrep = tq == tk ? relrep_offsets(c.t, c.pv, c.cfg, site, layer, tq, tk) : RelRepOffsets{};
    out = synth_replaces_self_attn(c.cfg)
              ? synthesizer_attention(c.t, c.pv, c.cfg, prefix + ".attn", in)
              : multihead_attention(c.t, c.pv, c.cfg, prefix + ".attn", in);
  }
  return sb.combine(x_q, out);
}

inline Var cross_attention_subblock(StackCtx& c, const std::string& prefix, long layer, Var x,
                                    Var memory, long tq, long tk) {
  SubBlockCtx sb{c.t, c.pv, c.cfg, prefix + ".ln2"};
  AttnInputs in;
  in.q_src = sb.input(x);
  in.k_src = memory;  // already carries the encoder's final norm
  in.v_src = memory;
  in.tq = tq;
  in.tk = tk;
  in.causal = false;
  in.bias_per_head = attention_bias(c.t, c.pv, c.cfg, AttnSite::Cross, layer, tq, tk);
  Var out = multihead_attention(c.t, c.pv, c.cfg, prefix + ".cross", in);
  return sb.combine(x, out);
}

inline Var ffn_subblock(StackCtx& c, const std::string& prefix, bool decoder, long layer, Var x) {
  SubBlockCtx sb{c.t, c.pv, c.cfg, prefix + (decoder ? ".ln3" : ".ln2")};
  Var nx = sb.input(x);
  Var out;
  if (layer_has_experts(c.cfg, layer, decoder ? c.cfg.l_dec : c.cfg.l_enc)) {
    ExpertOut eo = expert_ffn(c.t, c.pv, c.cfg, prefix + ".ffn", nx);
    out = eo.out;
    if (c.aux) c.aux->push_back(eo.aux_loss);
  } else if (layer_has_pkm(c.cfg, decoder, layer)) {
    out = pkm_lookup(c.t, c.pv, c.cfg, prefix + ".pkm", nx);
  } else {
    out = dense_ffn(c.t, c.pv, c.cfg, prefix + ".ffn", nx);
  }
  return sb.combine(x, out);
}

// Adaptive computation time over one shared block. A token halts once its
// cumulative halting probability crosses the threshold (or at the step cap);
// its output is the halting-probability-weighted state combination with the
// remainder weight at the halt step, and its published state freezes there.
inline Var universal_stack(StackCtx& c, bool decoder, Var x0, long t_len, Var memory,
                           long mem_len) {
  const VariantSpec& v = c.cfg.variant;
  const std::string prefix = decoder ? "dec.rec" : "enc.rec";
  Tape& t = c.t;
  long B = t.value(x0).shape[0];
  long n = B * t_len;
  long S = v.ut_max_steps;
  double theta = v.ut_threshold;

  Var state = x0;
  Var acc, remainder_acc;
  Var cum = constant(t, Tensor::zeros({B, t_len, 1}));
  std::vector<char> frozen(static_cast<size_t>(n), 0);
  std::vector<double> n_updates(static_cast<size_t>(n), 0.0);
  Tensor step_table = sinusoidal_table(S + 1, c.cfg.d_model);

  for (long s = 1; s <= S; ++s) {
    Tensor row({1, 1, c.cfg.d_model});
    for (long i = 0; i < c.cfg.d_model; ++i) row[i] = step_table.at2(s, i);
    Var inp = add(state, constant(t, row));
    Var h = self_attention_subblock(c, prefix, decoder ? AttnSite::DecSelf : AttnSite::EncSelf, 0,
                                    inp, inp, t_len, t_len, decoder);
    if (decoder) h = cross_attention_subblock(c, prefix, 0, h, memory, t_len, mem_len);
    h = ffn_subblock(c, prefix, decoder, 0, h);
    Var p = unary(add(matmul(h, c.pv(prefix + ".halt.w")), c.pv(prefix + ".halt.b")),
                  UnaryKind::Sigmoid);  // [B, t_len, 1]

    const Tensor& pval = t.value(p);
    const Tensor& cval = t.value(cum);
    Tensor run_m({B, t_len, 1}), halt_m({B, t_len, 1});
    for (long i = 0; i < n; ++i) {
      if (frozen[static_cast<size_t>(i)]) continue;
      bool halts = cval[i] + pval[i] >= theta || s == S;
      if (halts) {
        halt_m[i] = 1.0;
        frozen[static_cast<size_t>(i)] = 1;
        n_updates[static_cast<size_t>(i)] = static_cast<double>(s);
      } else {
        run_m[i] = 1.0;
      }
    }
    Var run_v = constant(t, run_m), halt_v = constant(t, halt_m);
    Var rem = mul(shift(neg(cum), 1.0), halt_v);  // (1 - cum_prev) where halting now
    Var w = add(mul(p, run_v), rem);
    Var contrib = mul(h, w);
    acc = acc.valid() ? add(acc, contrib) : contrib;
    remainder_acc = remainder_acc.valid() ? add(remainder_acc, rem) : rem;

    // freeze halted tokens at their combined state; keep earlier frozen rows
    Tensor keep_m({B, t_len, 1});
    bool all_frozen = true;
    for (long i = 0; i < n; ++i) {
      keep_m[i] = (run_m[i] == 0.0 && halt_m[i] == 0.0) ? 1.0 : 0.0;
      if (!frozen[static_cast<size_t>(i)]) all_frozen = false;
    }
    state = add(add(mul(h, run_v), mul(acc, halt_v)), mul(state, constant(t, keep_m)));
    cum = add(cum, mul(p, run_v));
    if (all_frozen) break;
  }

  if (c.aux) {
    Var ponder = add(constant(t, Tensor({B, t_len, 1}, n_updates)), remainder_acc);
    Var mean_ponder = scale(reduce_sum_all(ponder), 1.0 / static_cast<double>(n));
    c.aux->push_back(scale(mean_ponder, v.ut_ponder_weight));
  }
  return acc;
}

}  // namespace detail_model

inline ModelOutput forward_loss(Tape& t, ParamStore& ps, const ModelConfig& cfg, const Batch& batch,
                                bool want_log_probs = false) {
  using namespace detail_model;
  const VariantSpec& v = cfg.variant;
  long B = batch.n_seq, T = batch.src_len, U = batch.tgt_len;
  if (B <= 0 || T <= 0 || U <= 0) throw DataError("empty batch");
  if (static_cast<long>(batch.x.size()) != B * T || static_cast<long>(batch.y.size()) != B * U ||
      static_cast<long>(batch.mask.size()) != B * U)
    throw DataError("batch field lengths do not match n_seq * length");
  if (T > cfg.t_max || U > cfg.u_max)
    throw ConfigError("batch length exceeds model t_max/u_max");
  if (v.arch == ArchKind::Funnel && T < 4)
    throw ConfigError("funnel encoder needs a source length of at least 4");

  ParamVars pv(t, ps);
  std::vector<Var> aux;
  StackCtx c{t, pv, cfg, &aux};

  // ---- encoder
  Var ex = reshape(embed_tokens(t, pv, cfg, batch.x, false), {B, T, cfg.d_model});
  Var pos_e = additive_positions(t, pv, cfg, T);
  if (pos_e.valid()) ex = add(ex, pos_e);

  std::vector<Var> enc_outs;
  Var enc_final;
  long mem_len = T;
  if (v.arch == ArchKind::Universal) {
    enc_final = universal_stack(c, false, ex, T, Var{}, 0);
  } else if (v.arch == ArchKind::Funnel) {
    Var x = ex;
    long cur = T;
    for (long l = 0; l < cfg.l_enc; ++l) {
      std::string prefix = "enc.l" + std::to_string(l);
      bool transition = l > 0 && l % v.funnel_layers_per_block == 0;
      if (transition) {
        Var pooled = pool_pairs(t, x);
        long ptq = t.value(pooled).shape[1];
        x = self_attention_subblock(c, prefix, AttnSite::EncSelf, l, pooled, x, ptq, cur, false,
                                    cur / ptq);
        cur = ptq;
      } else {
        x = self_attention_subblock(c, prefix, AttnSite::EncSelf, l, x, x, cur, cur, false);
      }
      x = ffn_subblock(c, prefix, false, l, x);
    }
    enc_final = x;
    mem_len = cur;
  } else {
    Var x = ex;
    enc_outs.push_back(x);
    for (long l = 0; l < cfg.l_enc; ++l) {
      std::string prefix = "enc.l" + std::to_string(l);
      x = self_attention_subblock(c, prefix, AttnSite::EncSelf, l, x, x, T, T, false);
      x = ffn_subblock(c, prefix, false, l, x);
      enc_outs.push_back(x);
    }
    enc_final = x;
  }

  bool transparent = v.arch == ArchKind::Transparent;
  std::vector<Var> memories;
  Var memory;
  if (transparent) {
    // decoder layer j cross-attends a softmax-weighted mix over all encoder
    // depths (embedding output included), passed through the final norm
    Var w = pv("transparent.w");
    for (long j = 0; j < cfg.l_dec; ++j) {
      Var wj = softmax_lastdim(slice(w, 0, j, 1));  // [1, L_enc+1]
      Var mix;
      for (long i = 0; i <= cfg.l_enc; ++i) {
        Var wij = reshape(slice(wj, 1, i, 1), {1});
        Var term = mul(enc_outs[static_cast<size_t>(i)], wij);
        mix = mix.valid() ? add(mix, term) : term;
      }
      memories.push_back(apply_final_norm(t, pv, cfg, "enc.final", mix));
    }
  } else {
    memory = apply_final_norm(t, pv, cfg, "enc.final", enc_final);
  }

  // ---- decoder (teacher forcing, inputs shifted right with BOS)
  std::vector<long> dec_in(static_cast<size_t>(B * U));
  for (long b = 0; b < B; ++b)
    for (long u = 0; u < U; ++u)
      dec_in[static_cast<size_t>(b * U + u)] =
          u == 0 ? kBosToken : batch.y[static_cast<size_t>(b * U + u - 1)];
  Var dx = reshape(embed_tokens(t, pv, cfg, dec_in, true), {B, U, cfg.d_model});
  Var pos_d = additive_positions(t, pv, cfg, U);
  if (pos_d.valid()) dx = add(dx, pos_d);

  Var dec_final;
  if (v.arch == ArchKind::Universal) {
    dec_final = universal_stack(c, true, dx, U, memory, mem_len);
  } else {
    Var x = dx;
    for (long l = 0; l < cfg.l_dec; ++l) {
      std::string prefix = "dec.l" + std::to_string(l);
      x = self_attention_subblock(c, prefix, AttnSite::DecSelf, l, x, x, U, U, true);
      x = cross_attention_subblock(c, prefix, l, x,
                                   transparent ? memories[static_cast<size_t>(l)] : memory, U,
                                   mem_len);
      x = ffn_subblock(c, prefix, true, l, x);
    }
    dec_final = x;
  }
  Var h = apply_final_norm(t, pv, cfg, "dec.final", dec_final);
  Var h_flat = reshape(h, {B * U, cfg.d_model});

  ModelOutput out;
  out.memory_len = mem_len;
  out.nll = sequence_nll(t, pv, cfg, h_flat, batch.y, batch.mask);
  out.loss = out.nll;
  for (Var a : aux) out.loss = add(out.loss, a);
  out.aux = std::move(aux);
  if (want_log_probs)
    out.log_probs = reshape(full_log_probs(t, pv, cfg, h_flat), {B, U, cfg.d_vocab});
  return out;
}

}  // namespace wb

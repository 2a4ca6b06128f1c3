#pragma once
#include <cmath>
#include <string>
#include <vector>

#include "wb/blocks.hpp"
#include "wb/config.hpp"
#include "wb/param_store.hpp"
#include "wb/tape.hpp"

namespace wb {

inline long adaptive_dim(const ModelConfig& cfg, long c) {
  return cfg.variant.adaptive_project ? cfg.variant.clusters.dims[static_cast<size_t>(c)]
                                      : cfg.d_model;
}

// Gate logits for tail clusters live as extra rows of the head table, so the
// head softmax covers (cluster-0 words + one gate per tail cluster).
inline long adaptive_head_rows(const ModelConfig& cfg) {
  const ClusterSpec& cl = cfg.variant.clusters;
  long gates = cfg.variant.softmax == SoftmaxKind::Adaptive ? cl.n_clusters() - 1 : 0;
  return cl.sizes[0] + gates;
}

inline void register_embeddings(ParamStore& ps, const ModelConfig& cfg) {
  const VariantSpec& v = cfg.variant;
  if (!v.clusters.empty()) {
    for (long c = 0; c < v.clusters.n_clusters(); ++c) {
      long rows = c == 0 ? adaptive_head_rows(cfg) : v.clusters.sizes[static_cast<size_t>(c)];
      long dim = adaptive_dim(cfg, c);
      ps.register_param("embed.ada.t" + std::to_string(c), {rows, dim},
                        InitScheme::scaled_normal(1));
      if (v.adaptive_project)
        ps.register_param("embed.ada.p" + std::to_string(c), {dim, cfg.d_model},
                          InitScheme::scaled_normal(dim));
    }
    return;
  }
  if (v.factorized) {
    ps.register_param("embed.factor.a", {cfg.d_vocab, v.d_inner}, InitScheme::scaled_normal(1));
    ps.register_param("embed.factor.b", {v.d_inner, cfg.d_model},
                      InitScheme::scaled_normal(v.d_inner));
    if (!v.shared_output)
      ps.register_param("embed.out", {cfg.d_vocab, cfg.d_model}, InitScheme::scaled_normal(1));
    return;
  }
  Shape es{cfg.d_vocab, cfg.d_model};
  InitScheme init = InitScheme::scaled_normal(1);
  switch (v.tying) {
    case TyingScheme::TieAll:
      ps.register_param("embed.enc", es, init, "embed.shared");
      ps.register_param("embed.dec", es, init, "embed.shared");
      ps.register_param("embed.out", es, init, "embed.shared");
      break;
    case TyingScheme::TieEncDecInput:
      ps.register_param("embed.enc", es, init, "embed.input");
      ps.register_param("embed.dec", es, init, "embed.input");
      ps.register_param("embed.out", es, init);
      break;
    case TyingScheme::TieDecInputOutput:
      ps.register_param("embed.enc", es, init);
      ps.register_param("embed.dec", es, init, "embed.decout");
      ps.register_param("embed.out", es, init, "embed.decout");
      break;
    case TyingScheme::Untied:
      ps.register_param("embed.enc", es, init);
      ps.register_param("embed.dec", es, init);
      ps.register_param("embed.out", es, init);
      break;
  }
}

// Token rows for one side, [n, d_model]. Adaptive clusters embed each token
// at its cluster's width and project up; other tokens' cluster tables see an
// exactly-zero gradient through the masking.
inline Var embed_tokens(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                        const std::vector<long>& tokens, bool decoder) {
  const VariantSpec& v = cfg.variant;
  long n = static_cast<long>(tokens.size());
  for (long tok : tokens)
    if (tok < 0 || tok >= cfg.d_vocab)
      throw DataError("token id " + std::to_string(tok) + " outside vocabulary of " +
                      std::to_string(cfg.d_vocab));
  if (!v.clusters.empty()) {
    const ClusterSpec& cl = v.clusters;
    Var acc;
    for (long c = 0; c < cl.n_clusters(); ++c) {
      long off = cl.offset(c);
      long sz = cl.sizes[static_cast<size_t>(c)];
      std::vector<long> local(static_cast<size_t>(n), 0);
      Tensor mask({n, 1});
      bool any = false;
      for (long i = 0; i < n; ++i) {
        long tok = tokens[static_cast<size_t>(i)];
        if (tok >= off && tok < off + sz) {
          local[static_cast<size_t>(i)] = tok - off;
          mask[i] = 1.0;
          any = true;
        }
      }
      if (!any) continue;
      Var rows = gather_rows(pv("embed.ada.t" + std::to_string(c)), local);
      Var up = v.adaptive_project ? matmul(rows, pv("embed.ada.p" + std::to_string(c))) : rows;
      Var term = mul(up, constant(t, mask));
      acc = acc.valid() ? add(acc, term) : term;
    }
    return acc;
  }
  if (v.factorized) {
    Var rows = gather_rows(pv("embed.factor.a"), tokens);
    return matmul(rows, pv("embed.factor.b"));
  }
  return gather_rows(pv(decoder ? "embed.dec" : "embed.enc"), tokens);
}

// Full-vocabulary logits [.., d_vocab] for the configured output scheme
// (vanilla tied/untied table, factorized product, or the reconstructed
// adaptive tables). Hierarchical and mixture outputs go through
// full_log_probs / sequence_loss instead.
inline Var output_logits(Tape& t, ParamVars& pv, const ModelConfig& cfg, Var h) {
  const VariantSpec& v = cfg.variant;
  Var logits;
  if (!v.clusters.empty()) {
    const ClusterSpec& cl = v.clusters;
    std::vector<Var> parts;
    for (long c = 0; c < cl.n_clusters(); ++c) {
      Var table = pv("embed.ada.t" + std::to_string(c));
      Var words = c == 0 ? slice(table, 0, 0, cl.sizes[0]) : table;
      Var hc = v.adaptive_project ? matmul(h, pv("embed.ada.p" + std::to_string(c)), false, true) : h;
      parts.push_back(matmul(hc, words, false, true));
    }
    logits = concat(parts, t.value(h).rank() - 1);
  } else if (v.factorized && v.shared_output) {
    logits = matmul(matmul(h, pv("embed.factor.b"), false, true), pv("embed.factor.a"), false, true);
  } else {
    logits = matmul(h, pv("embed.out"), false, true);
  }
  if (v.scale_logits) logits = scale(logits, 1.0 / static_cast<double>(cfg.d_model));
  return logits;
}

inline void register_output_head(ParamStore& ps, const ModelConfig& cfg) {
  const VariantSpec& v = cfg.variant;
  if (v.softmax == SoftmaxKind::Mos) {
    ps.register_param("mos.pi", {cfg.d_model, v.mos_k}, InitScheme::scaled_normal(cfg.d_model));
    for (long kk = 0; kk < v.mos_k; ++kk)
      ps.register_param("mos.proj" + std::to_string(kk), {cfg.d_model, cfg.d_model},
                        InitScheme::scaled_normal(cfg.d_model));
  }
}

// Mixture of softmaxes: p = sum_k pi_k(h) softmax(proj_k(h) G^T); the
// components and mixture weights share the final hidden state.
inline Var mos_probs(Tape& t, ParamVars& pv, const ModelConfig& cfg, Var h_flat) {
  const VariantSpec& v = cfg.variant;
  Var pi = softmax_lastdim(matmul(h_flat, pv("mos.pi")));  // [n, K]
  Var acc;
  for (long kk = 0; kk < v.mos_k; ++kk) {
    Var hk = matmul(h_flat, pv("mos.proj" + std::to_string(kk)));
    Var comp = softmax_lastdim(output_logits(t, pv, cfg, hk));
    Var term = mul(comp, slice(pi, 1, kk, 1));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return acc;
}

// Per-position log-probabilities over the whole vocabulary, [n, d_vocab].
// Used by evaluation and the oracle tests; the training loss path avoids
// materializing this for hierarchical outputs.
inline Var full_log_probs(Tape& t, ParamVars& pv, const ModelConfig& cfg, Var h_flat) {
  const VariantSpec& v = cfg.variant;
  if (v.softmax == SoftmaxKind::Full)
    return log_softmax_lastdim(output_logits(t, pv, cfg, h_flat));
  if (v.softmax == SoftmaxKind::Mos)
    return unary(mos_probs(t, pv, cfg, h_flat), UnaryKind::Log);
  // adaptive: log p(w) = log p(gate path) + log p(w | cluster)
  const ClusterSpec& cl = v.clusters;
  long n = t.value(h_flat).shape[0];
  (void)n;
  Var head_table = pv("embed.ada.t0");
  Var h0 = v.adaptive_project ? matmul(h_flat, pv("embed.ada.p0"), false, true) : h_flat;
  Var head_ls = log_softmax_lastdim(matmul(h0, head_table, false, true));
  std::vector<Var> parts;
  parts.push_back(slice(head_ls, 1, 0, cl.sizes[0]));
  for (long c = 1; c < cl.n_clusters(); ++c) {
    Var hc = v.adaptive_project ? matmul(h_flat, pv("embed.ada.p" + std::to_string(c)), false, true)
                                : h_flat;
    Var tail_ls = log_softmax_lastdim(matmul(hc, pv("embed.ada.t" + std::to_string(c)), false, true));
    Var gate = slice(head_ls, 1, cl.sizes[0] + c - 1, 1);  // [n, 1]
    parts.push_back(add(tail_ls, gate));
  }
  return concat(parts, 1);
}

// Mean negative log-likelihood over unmasked targets. For the adaptive
// hierarchy, tail clusters are evaluated only for the positions whose target
// falls in them.
inline Var sequence_nll(Tape& t, ParamVars& pv, const ModelConfig& cfg, Var h_flat,
                        const std::vector<long>& targets, const std::vector<double>& mask) {
  const VariantSpec& v = cfg.variant;
  long n = static_cast<long>(targets.size());
  double denom = 0.0;
  for (double m : mask) denom += m;
  if (denom <= 0.0) throw DataError("loss mask excludes every target position");
  Var mask_v = constant(t, Tensor({n}, mask));

  if (v.softmax == SoftmaxKind::Full) {
    Var ls = log_softmax_lastdim(output_logits(t, pv, cfg, h_flat));
    Var picked = gather_last(ls, targets);
    return scale(reduce_sum_all(mul(picked, mask_v)), -1.0 / denom);
  }
  if (v.softmax == SoftmaxKind::Mos) {
    Var p = mos_probs(t, pv, cfg, h_flat);
    Var picked = unary(gather_last(p, targets), UnaryKind::Log);
    return scale(reduce_sum_all(mul(picked, mask_v)), -1.0 / denom);
  }

  const ClusterSpec& cl = v.clusters;
  Var head_table = pv("embed.ada.t0");
  Var h0 = v.adaptive_project ? matmul(h_flat, pv("embed.ada.p0"), false, true) : h_flat;
  Var head_ls = log_softmax_lastdim(matmul(h0, head_table, false, true));
  std::vector<long> head_idx(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    long c = cl.cluster_of(targets[static_cast<size_t>(i)]);
    head_idx[static_cast<size_t>(i)] =
        c == 0 ? targets[static_cast<size_t>(i)] : cl.sizes[0] + c - 1;
  }
  Var total = reduce_sum_all(mul(gather_last(head_ls, head_idx), mask_v));
  for (long c = 1; c < cl.n_clusters(); ++c) {
    long off = cl.offset(c);
    std::vector<long> rows, local;
    std::vector<double> sub_mask;
    for (long i = 0; i < n; ++i) {
      long tok = targets[static_cast<size_t>(i)];
      if (cl.cluster_of(tok) == c) {
        rows.push_back(i);
        local.push_back(tok - off);
        sub_mask.push_back(mask[static_cast<size_t>(i)]);
      }
    }
    if (rows.empty()) continue;  // tail evaluated only when needed
    Var hc = gather_rows(h_flat, rows);
    Var hp = v.adaptive_project ? matmul(hc, pv("embed.ada.p" + std::to_string(c)), false, true) : hc;
    Var tail_ls = log_softmax_lastdim(matmul(hp, pv("embed.ada.t" + std::to_string(c)), false, true));
    Var picked = gather_last(tail_ls, local);
    Var m = constant(t, Tensor({static_cast<long>(rows.size())}, sub_mask));
    total = add(total, reduce_sum_all(mul(picked, m)));
  }
  return scale(total, -1.0 / denom);
}

}  // namespace wb

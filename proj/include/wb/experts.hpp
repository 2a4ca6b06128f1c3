#pragma once
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "wb/blocks.hpp"
#include "wb/config.hpp"
#include "wb/param_store.hpp"
#include "wb/tape.hpp"

namespace wb {

// ---- sparse expert FFN (MoE top-2 / Switch top-1) -----------------------------

inline void register_expert_ffn(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix,
                                const std::string& group_prefix) {
  const VariantSpec& v = cfg.variant;
  long dh = expert_hidden_dim(cfg);
  auto reg = [&](const std::string& suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape,
                      scheme, group_prefix.empty() ? "" : group_prefix + suffix);
  };
  reg(".router", {cfg.d_model, v.n_experts}, branch_matrix_init(cfg, cfg.d_model));
  for (long e = 0; e < v.n_experts; ++e) {
    std::string es = ".e" + std::to_string(e);
    reg(es + ".w1", {cfg.d_model, dh}, branch_matrix_init(cfg, cfg.d_model));
    reg(es + ".b1", {dh}, InitScheme::zeros());
    reg(es + ".w2", {dh, cfg.d_model}, branch_output_init(cfg, dh));
    reg(es + ".b2", {cfg.d_model}, InitScheme::zeros());
  }
}

struct DispatchPlan {
  std::vector<std::vector<long>> choices;   // per token, kept expert ids (in rank order)
  std::vector<std::vector<long>> selected;  // per token, pre-drop top-k choices
  std::vector<double> fraction;             // per expert, pre-drop assignment share
  long capacity = 0;
};

// Deterministic dispatch in token order: top-k experts by router probability
// (ties to the lowest expert id), each expert accepting at most
// ceil(capacity_factor * tokens / n_experts) tokens.
inline DispatchPlan plan_dispatch(const Tensor& probs, long k, double capacity_factor) {
  long n = probs.shape[0], e = probs.shape[1];
  DispatchPlan plan;
  plan.capacity = static_cast<long>(
      std::ceil(capacity_factor * static_cast<double>(n) / static_cast<double>(e)));
  plan.choices.resize(static_cast<size_t>(n));
  plan.selected.resize(static_cast<size_t>(n));
  plan.fraction.assign(static_cast<size_t>(e), 0.0);
  std::vector<long> load(static_cast<size_t>(e), 0);
  std::vector<long> order(static_cast<size_t>(e));
  for (long i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
      return probs.at2(i, a) > probs.at2(i, b);
    });
    for (long r = 0; r < k; ++r) {
      long ex = order[static_cast<size_t>(r)];
      plan.selected[static_cast<size_t>(i)].push_back(ex);
      plan.fraction[static_cast<size_t>(ex)] += 1.0 / static_cast<double>(n * k);
      if (load[static_cast<size_t>(ex)] < plan.capacity) {
        ++load[static_cast<size_t>(ex)];
        plan.choices[static_cast<size_t>(i)].push_back(ex);
      }
    }
  }
  return plan;
}

struct ExpertOut {
  Var out;       // [B, T, d_model]
  Var aux_loss;  // weighted load-balance term
};

// Experts replace the dense FFN. Every expert runs on the full token set and
// is gated by a (possibly zero) per-token weight, which keeps the tape
// simple while still giving exactly-zero gradients to experts that received
// no tokens. Switch mode: one expert per token, output scaled by its router
// probability, overflow tokens fall through to the residual. MoE mode:
// top-k with gates renormalized over the selected set.
inline ExpertOut expert_ffn(Tape& t, ParamVars& pv, const ModelConfig& cfg,
                            const std::string& prefix, Var x) {
  const VariantSpec& v = cfg.variant;
  bool switch_mode = v.arch == ArchKind::Switch;
  long k = switch_mode ? 1 : std::min(v.experts_k, v.n_experts);
  long B = t.value(x).shape[0], T = t.value(x).shape[1];
  long n = B * T, E = v.n_experts;

  Var xf = reshape(x, {n, cfg.d_model});
  Var probs = softmax_lastdim(matmul(xf, pv(prefix + ".router")));  // [n, E]
  DispatchPlan plan = plan_dispatch(t.value(probs), k, v.capacity_factor);

  Tensor kept({n, E}), chosen({n, E});
  for (long i = 0; i < n; ++i) {
    for (long ex : plan.choices[static_cast<size_t>(i)]) kept.at2(i, ex) = 1.0;
    for (long ex : plan.selected[static_cast<size_t>(i)]) chosen.at2(i, ex) = 1.0;
  }

  Var gates;
  if (switch_mode) {
    gates = mul(probs, constant(t, kept));
  } else {
    // renormalize over the pre-drop top-k probabilities
    Var sel = mul(probs, constant(t, chosen));
    Var denom = reduce_sum(sel, 1, true);  // [n, 1]
    gates = divide(mul(probs, constant(t, kept)), denom);
  }

  Var acc;
  for (long e = 0; e < E; ++e) {
    std::string es = prefix + ".e" + std::to_string(e);
    Var h = unary(add(matmul(xf, pv(es + ".w1")), pv(es + ".b1")), UnaryKind::Relu);
    Var out_e = add(matmul(h, pv(es + ".w2")), pv(es + ".b2"));
    Var term = mul(out_e, slice(gates, 1, e, 1));
    acc = acc.valid() ? add(acc, term) : term;
  }

  // load balance: n_experts * sum_e fraction_e * mean_prob_e
  Var mean_probs = reduce_mean(probs, 0);  // [E]
  Var frac = constant(t, Tensor({E}, plan.fraction));
  Var balance = scale(reduce_sum_all(mul(frac, mean_probs)), static_cast<double>(E));

  ExpertOut r;
  r.out = reshape(acc, {B, T, cfg.d_model});
  r.aux_loss = scale(balance, v.balance_weight);
  return r;
}

// ---- product key memory -------------------------------------------------------

inline void register_pkm(ParamStore& ps, const ModelConfig& cfg, const std::string& prefix,
                         const std::string& group_prefix) {
  const VariantSpec& v = cfg.variant;
  auto reg = [&](const std::string& suffix, Shape shape, InitScheme scheme) {
    ps.register_param(prefix + suffix, shape,
                      scheme, group_prefix.empty() ? "" : group_prefix + suffix);
  };
  long half = v.pkm_d_q / 2;
  for (long h = 0; h < v.pkm_heads; ++h) {
    std::string hs = ".h" + std::to_string(h);
    reg(hs + ".q", {cfg.d_model, v.pkm_d_q}, branch_matrix_init(cfg, cfg.d_model));
    reg(hs + ".k1", {v.pkm_keys_half, half}, InitScheme::scaled_normal(half));
    reg(hs + ".k2", {v.pkm_keys_half, half}, InitScheme::scaled_normal(half));
  }
  reg(".values", {v.pkm_values, cfg.d_model}, InitScheme::scaled_normal(cfg.d_model));
}

// Two-stage product-key candidate construction: top-knn per half, knn^2
// candidate sums, top-knn overall. Ties break toward the lowest index, which
// makes the result identical to a brute-force scan over all
// n_keys_half^2 slots.
inline void pkm_topk(const double* scores, long n, long k, std::vector<long>& out) {
  out.clear();
  for (long i = 0; i < n; ++i) {
    long pos = static_cast<long>(out.size());
    while (pos > 0) {
      long prev = out[static_cast<size_t>(pos - 1)];
      if (scores[prev] >= scores[i]) break;  // equal keeps earlier (lower) index first
      --pos;
    }
    if (pos < k) {
      out.insert(out.begin() + pos, i);
      if (static_cast<long>(out.size()) > k) out.pop_back();
    }
  }
}

inline Var pkm_lookup(Tape& t, ParamVars& pv, const ModelConfig& cfg, const std::string& prefix,
                      Var x) {
  const VariantSpec& v = cfg.variant;
  long B = t.value(x).shape[0], T = t.value(x).shape[1];
  long n = B * T;
  long half = v.pkm_d_q / 2;
  long nk = v.pkm_keys_half, knn = v.pkm_knn;

  Var xf = reshape(x, {n, cfg.d_model});
  Var values = pv(prefix + ".values");
  Var acc;
  for (long h = 0; h < v.pkm_heads; ++h) {
    std::string hs = prefix + ".h" + std::to_string(h);
    Var q = matmul(xf, pv(hs + ".q"));
    Var q1 = slice(q, 1, 0, half), q2 = slice(q, 1, half, half);
    Var s1 = matmul(q1, pv(hs + ".k1"), false, true);  // [n, nk]
    Var s2 = matmul(q2, pv(hs + ".k2"), false, true);

    const Tensor& s1v = t.value(s1);
    const Tensor& s2v = t.value(s2);
    // per row: selected (i, j) pairs, as parallel index vectors per rank
    std::vector<std::vector<long>> pick_i(static_cast<size_t>(knn), std::vector<long>(n));
    std::vector<std::vector<long>> pick_j(static_cast<size_t>(knn), std::vector<long>(n));
    std::vector<long> top1, top2, cand_order;
    std::vector<double> cand_score;
    std::vector<long> cand_slot;
    for (long r = 0; r < n; ++r) {
      pkm_topk(s1v.data.data() + r * nk, nk, knn, top1);
      pkm_topk(s2v.data.data() + r * nk, nk, knn, top2);
      cand_score.clear();
      cand_slot.clear();
      for (long a : top1)
        for (long b : top2) {
          cand_score.push_back(s1v[r * nk + a] + s2v[r * nk + b]);
          cand_slot.push_back(a * nk + b);
        }
      cand_order.resize(cand_score.size());
      std::iota(cand_order.begin(), cand_order.end(), 0);
      std::stable_sort(cand_order.begin(), cand_order.end(), [&](long a, long b) {
        if (cand_score[static_cast<size_t>(a)] != cand_score[static_cast<size_t>(b)])
          return cand_score[static_cast<size_t>(a)] > cand_score[static_cast<size_t>(b)];
        return cand_slot[static_cast<size_t>(a)] < cand_slot[static_cast<size_t>(b)];
      });
      for (long rank = 0; rank < knn; ++rank) {
        long slot = cand_slot[static_cast<size_t>(cand_order[static_cast<size_t>(rank)])];
        pick_i[static_cast<size_t>(rank)][static_cast<size_t>(r)] = slot / nk;
        pick_j[static_cast<size_t>(rank)][static_cast<size_t>(r)] = slot % nk;
      }
    }

    // differentiable scores of the selected slots, [n, knn]
    std::vector<Var> score_cols;
    std::vector<long> value_rows(static_cast<size_t>(n * knn));
    for (long rank = 0; rank < knn; ++rank) {
      Var c1 = gather_last(s1, pick_i[static_cast<size_t>(rank)]);
      Var c2 = gather_last(s2, pick_j[static_cast<size_t>(rank)]);
      score_cols.push_back(reshape(add(c1, c2), {n, 1}));
      for (long r = 0; r < n; ++r)
        value_rows[static_cast<size_t>(r * knn + rank)] =
            pick_i[static_cast<size_t>(rank)][static_cast<size_t>(r)] * nk +
            pick_j[static_cast<size_t>(rank)][static_cast<size_t>(r)];
    }
    Var w = softmax_lastdim(concat(score_cols, 1));            // [n, knn]
    Var rows = gather_rows(values, value_rows);                // [n*knn, d_model]
    Var mixed = matmul(reshape(w, {n, 1, knn}), reshape(rows, {n, knn, cfg.d_model}));
    Var out_h = reshape(mixed, {n, cfg.d_model});
    acc = acc.valid() ? add(acc, out_h) : out_h;
  }
  return reshape(acc, {B, T, cfg.d_model});
}

}  // namespace wb

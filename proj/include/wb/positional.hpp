#pragma once
#include <cmath>
#include <string>
#include <vector>

#include "wb/config.hpp"
#include "wb/param_store.hpp"
#include "wb/tape.hpp"

namespace wb {

// Position-information providers. Exactly one of three paths is active per
// kind: an additive embedding (sinusoidal, learned), an attention-logit bias
// (relative bias, shared or per layer), or key/value offsets inside the
// attention computation (relative representations).

inline Tensor sinusoidal_table(long len, long d_model) {
  if (d_model % 2 != 0) throw ConfigError("sinusoidal table requires an even d_model");
  Tensor t({len, d_model});
  for (long pos = 0; pos < len; ++pos)
    for (long i = 0; i < d_model; ++i) {
      double freq = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(d_model));
      double angle = static_cast<double>(pos) / freq;
      t.at2(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return t;
}

// Bucketed relative distance: small distances get exact buckets, larger ones
// share logarithmically spaced buckets up to max_distance. `distance` is
// memory position minus query position (j - i).
inline long relative_bucket(long distance, long num_buckets, long max_distance, bool bidirectional) {
  if (num_buckets < 2) throw ConfigError("relative_bucket: num_buckets must be >= 2");
  long ret = 0;
  long n = -distance;
  if (bidirectional) {
    num_buckets /= 2;
    if (n < 0) {
      ret += num_buckets;
      n = -n;
    }
  } else {
    n = std::max<long>(n, 0);
  }
  long max_exact = num_buckets / 2;
  if (n < max_exact) return ret + n;
  double logpos = max_exact +
                  std::log(static_cast<double>(n) / static_cast<double>(max_exact)) /
                      std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                      static_cast<double>(num_buckets - max_exact);
  long v = std::min<long>(static_cast<long>(logpos), num_buckets - 1);
  return ret + v;
}

// Offset-table index for relative representations: clip(j - i, -k, k) + k.
inline long relrep_index(long i, long j, long k) {
  long d = j - i;
  if (d < -k) d = -k;
  if (d > k) d = k;
  return d + k;
}

enum class AttnSite : uint8_t { EncSelf, DecSelf, Cross };

inline std::string relbias_param_name(const ModelConfig& cfg, AttnSite site, long layer) {
  std::string stack = site == AttnSite::EncSelf ? "enc" : site == AttnSite::DecSelf ? "dec" : "cross";
  if (cfg.variant.position == PositionKind::RelativeBiasShared) return "pos.relbias." + stack;
  return "pos.relbias." + stack + ".l" + std::to_string(layer);
}

inline void register_positional_params(ParamStore& ps, const ModelConfig& cfg) {
  const VariantSpec& v = cfg.variant;
  // a universal (recurrent) stack has exactly one attention layer per side
  bool universal = v.arch == ArchKind::Universal;
  long enc_layers = universal ? 1 : cfg.l_enc;
  long dec_layers = universal ? 1 : cfg.l_dec;
  switch (v.position) {
    case PositionKind::Sinusoidal:
      break;  // parameter-free
    case PositionKind::Learned: {
      long len = std::max(cfg.t_max, cfg.u_max);
      ps.register_param("pos.learned", {len, cfg.d_model}, InitScheme::scaled_normal(1));
      break;
    }
    case PositionKind::RelativeBiasShared:
    case PositionKind::RelativeBias: {
      bool shared = v.position == PositionKind::RelativeBiasShared;
      auto reg = [&](AttnSite site, long n_layers) {
        long n = shared ? 1 : n_layers;  // shared kind holds one table per stack
        for (long l = 0; l < n; ++l)
          ps.register_param(relbias_param_name(cfg, site, l), {v.buckets, cfg.heads},
                            InitScheme::zeros());
      };
      reg(AttnSite::EncSelf, enc_layers);
      reg(AttnSite::DecSelf, dec_layers);
      if (v.cross_bias) reg(AttnSite::Cross, dec_layers);
      break;
    }
    case PositionKind::RelativeRepresentation: {
      long rows = 2 * v.clip_k + 1;
      auto reg = [&](const char* stack, long n_layers) {
        for (long l = 0; l < n_layers; ++l) {
          std::string base = std::string("pos.relrep.") + stack + ".l" + std::to_string(l);
          ps.register_param(base + ".key", {rows, cfg.d_kv}, InitScheme::scaled_normal(cfg.d_kv));
          if (v.value_offsets)
            ps.register_param(base + ".val", {rows, cfg.d_kv}, InitScheme::scaled_normal(cfg.d_kv));
        }
      };
      reg("enc", enc_layers);
      reg("dec", dec_layers);
      break;
    }
  }
}

// Additive position rows for sequence positions [0, len); invalid Var when
// the provider works through the attention path instead.
inline Var additive_positions(Tape& t, ParamVars& pv, const ModelConfig& cfg, long len) {
  switch (cfg.variant.position) {
    case PositionKind::Sinusoidal:
      return constant(t, sinusoidal_table(len, cfg.d_model));
    case PositionKind::Learned: {
      Var table = pv("pos.learned");
      return slice(table, 0, 0, len);
    }
    default:
      return Var{};
  }
}

// Per-head additive attention bias [tq, tk] for one attention site, or an
// empty vector when the provider contributes none. `qstride` rescales query
// indices onto key coordinates when the query stream has been pooled.
inline std::vector<Var> attention_bias(Tape& t, ParamVars& pv, const ModelConfig& cfg, AttnSite site,
                                       long layer, long tq, long tk, long qstride = 1) {
  const VariantSpec& v = cfg.variant;
  bool relbias = v.position == PositionKind::RelativeBias ||
                 v.position == PositionKind::RelativeBiasShared;
  if (!relbias) return {};
  if (site == AttnSite::Cross && !v.cross_bias) return {};
  std::string name = relbias_param_name(cfg, site, layer);
  // Cross-attention positions live in different sequences; treat the offset
  // as bidirectional there, and in the encoder. Decoder self-attention only
  // looks backward.
  bool bidir = site != AttnSite::DecSelf;
  std::vector<long> idx(static_cast<size_t>(tq * tk));
  for (long i = 0; i < tq; ++i)
    for (long j = 0; j < tk; ++j)
      idx[static_cast<size_t>(i * tk + j)] =
          relative_bucket(j - qstride * i, v.buckets, v.max_distance, bidir);
  Var rows = gather_rows(pv(name), idx);  // [tq*tk, H]
  std::vector<Var> per_head;
  for (long h = 0; h < cfg.heads; ++h)
    per_head.push_back(reshape(slice(rows, 1, h, 1), {tq, tk}));
  return per_head;
}

struct RelRepOffsets {
  Var key_table;       // [tq*tk rows gathered later]
  Var val_table;
  std::vector<long> idx;  // clip(j-i) + k per (i, j)
  bool active = false;
  bool values = false;
};

inline RelRepOffsets relrep_offsets(Tape&, ParamVars& pv, const ModelConfig& cfg, AttnSite site,
                                    long layer, long tq, long tk) {
  RelRepOffsets out;
  if (cfg.variant.position != PositionKind::RelativeRepresentation) return out;
  if (site == AttnSite::Cross) return out;  // self-attention only
  out.active = true;
  std::string stack = site == AttnSite::EncSelf ? "enc" : "dec";
  out.key_table = pv("pos.relrep." + stack + ".l" + std::to_string(layer) + ".key");
  out.values = cfg.variant.value_offsets;
  if (out.values) out.val_table = pv("pos.relrep." + stack + ".l" + std::to_string(layer) + ".val");
  out.idx.resize(static_cast<size_t>(tq * tk));
  for (long i = 0; i < tq; ++i)
    for (long j = 0; j < tk; ++j)
      out.idx[static_cast<size_t>(i * tk + j)] = relrep_index(i, j, cfg.variant.clip_k);
  return out;
}

}  // namespace wb

#pragma once
#include <functional>
#include <string>
#include <vector>

#include "wb/config.hpp"
#include "wb/errors.hpp"

namespace wb {

// Named variant registry: one entry per result-table row. Each entry can be
// instantiated at table scale (for counting) or at gradcheck scale
// (d_model=8, d_ff=16, H=2, L=2, vocab=11, T=U=5). The two rows whose
// architectures are defined outside the survey stay as explicit unsupported
// markers.
struct VariantPreset {
  std::string name;
  bool supported = true;
  std::string note;
  std::function<void(ModelConfig&, bool tiny)> apply;
};

inline void shrink_to_tiny(ModelConfig& cfg) {
  cfg.l_enc = 2;
  cfg.l_dec = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.d_kv = 4;
  cfg.heads = 2;
  cfg.d_vocab = 11;
  cfg.t_max = 5;
  cfg.u_max = 5;
}

inline const std::vector<VariantPreset>& variant_presets() {
  static const std::vector<VariantPreset> presets = [] {
    std::vector<VariantPreset> v;
    auto add = [&](std::string name, std::function<void(ModelConfig&, bool)> fn,
                   std::string note = "") {
      v.push_back({std::move(name), true, std::move(note), std::move(fn)});
    };
    auto nop = [](ModelConfig&, bool) {};
    add("baseline", nop, "vanilla transformer, pre-norm, shared relative bias");

    auto act = [](Activation a) {
      return [a](ModelConfig& c, bool) { c.variant.activation = a; };
    };
    add("gelu", act(Activation::Gelu));
    add("swish", act(Activation::Swish));
    add("elu", act(Activation::Elu));
    add("selu", act(Activation::Selu));
    add("sigmoid", act(Activation::Sigmoid));
    add("softplus", act(Activation::Softplus));

    auto glu = [](GluKind g) {
      return [g](ModelConfig& c, bool) { c.variant.glu = g; };
    };
    add("glu", glu(GluKind::Glu));
    add("reglu", glu(GluKind::Reglu));
    add("geglu", glu(GluKind::Geglu));
    add("swiglu", glu(GluKind::Swiglu));
    add("liglu", glu(GluKind::Liglu));

    auto norm = [](NormKind n) {
      return [n](ModelConfig& c, bool) { c.variant.norm = n; };
    };
    add("rmsnorm", norm(NormKind::RmsNorm));
    add("rezero", norm(NormKind::Rezero));
    add("rezero_layernorm", norm(NormKind::RezeroLayerNorm));
    add("rezero_rmsnorm", norm(NormKind::RezeroRmsNorm));
    add("fixup", norm(NormKind::Fixup));

    auto depth = [](long layers, long d_ff, long heads) {
      return [=](ModelConfig& c, bool tiny) {
        if (tiny) return;  // the trade is dimensional; tiny runs keep tiny dims
        c.l_enc = layers;
        c.l_dec = layers;
        c.d_ff = d_ff;
        c.heads = heads;
      };
    };
    add("depth_24", depth(24, 1536, 6));
    add("depth_18", depth(18, 2048, 8));
    add("depth_8", depth(8, 4608, 18));
    add("depth_6", depth(6, 6144, 24));

    auto sharing = [](SharingScheme s) {
      return [s](ModelConfig& c, bool) {
        c.variant.sharing = s;
        c.variant.tying = TyingScheme::TieEncDecInput;  // untied decoder output
      };
    };
    add("block_sharing", sharing(SharingScheme::BlockAll));
    add("block_sharing_factorized", [](ModelConfig& c, bool tiny) {
      c.variant.sharing = SharingScheme::BlockAll;
      c.variant.tying = TyingScheme::TieEncDecInput;
      c.variant.factorized = true;
      c.variant.d_inner = tiny ? 3 : 128;
    });
    add("block_sharing_factorized_shared", [](ModelConfig& c, bool tiny) {
      c.variant.sharing = SharingScheme::BlockAll;
      c.variant.tying = TyingScheme::TieEncDecInput;
      c.variant.factorized = true;
      c.variant.shared_output = true;
      c.variant.d_inner = tiny ? 3 : 128;
    });
    add("encoder_only_sharing", sharing(SharingScheme::EncoderOnly));
    add("decoder_only_sharing", sharing(SharingScheme::DecoderOnly));

    add("factorized_embedding", [](ModelConfig& c, bool tiny) {
      c.variant.tying = TyingScheme::TieEncDecInput;
      c.variant.factorized = true;
      c.variant.d_inner = tiny ? 3 : 128;
    });
    add("factorized_shared_embedding", [](ModelConfig& c, bool tiny) {
      c.variant.tying = TyingScheme::TieEncDecInput;
      c.variant.factorized = true;
      c.variant.shared_output = true;
      c.variant.d_inner = tiny ? 3 : 128;
    });
    add("tied_enc_dec_input", [](ModelConfig& c, bool) { c.variant.tying = TyingScheme::TieEncDecInput; });
    add("tied_dec_in_out", [](ModelConfig& c, bool) { c.variant.tying = TyingScheme::TieDecInputOutput; });
    add("untied", [](ModelConfig& c, bool) { c.variant.tying = TyingScheme::Untied; });

    auto tiny_clusters = [](ModelConfig& c) {
      c.variant.clusters.sizes = {4, 4, 3};
      c.variant.clusters.dims = {8, 4, 2};
    };
    add("adaptive_input", [tiny_clusters](ModelConfig& c, bool tiny) {
      if (tiny) {
        tiny_clusters(c);
        return;
      }
      c.d_vocab = 32128;  // the survey's clusters sum to the padded vocabulary
      c.variant.clusters.sizes = {2500, 6000, 23628};
      c.variant.clusters.dims = {768, 192, 48};
    }, "input and output share the clustered tables");
    add("adaptive_softmax", [tiny_clusters](ModelConfig& c, bool tiny) {
      c.variant.softmax = SoftmaxKind::Adaptive;
      if (tiny) {
        tiny_clusters(c);
        return;
      }
      c.d_vocab = 32128;
      c.variant.clusters.sizes = {2500, 6000, 23500, 128};
      c.variant.clusters.dims = {768, 192, 48, 12};
    });
    add("adaptive_softmax_noproj", [tiny_clusters](ModelConfig& c, bool tiny) {
      c.variant.softmax = SoftmaxKind::Adaptive;
      c.variant.adaptive_project = false;
      if (tiny) {
        tiny_clusters(c);
        return;
      }
      c.d_vocab = 32128;
      c.variant.clusters.sizes = {2500, 6000, 23500, 128};
      c.variant.clusters.dims = {768, 192, 48, 12};
    });
    add("mixture_of_softmaxes", [](ModelConfig& c, bool tiny) {
      c.variant.softmax = SoftmaxKind::Mos;
      c.variant.mos_k = tiny ? 3 : 15;
    });

    add("transparent_attention", [](ModelConfig& c, bool) { c.variant.arch = ArchKind::Transparent; });
    add("dynamic_conv", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::DynamicConv;
      c.variant.conv_width = tiny ? 3 : 9;
      c.variant.conv_groups = tiny ? 2 : 12;
    });
    add("lightweight_conv", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::LightweightConv;
      c.variant.conv_width = tiny ? 3 : 9;
      c.variant.conv_groups = tiny ? 2 : 12;
    });

    auto synth = [](SynthKind k, SynthMix m) {
      return [=](ModelConfig& c, bool tiny) {
        c.variant.arch = ArchKind::Synthesizer;
        c.variant.synth_kind = k;
        c.variant.synth_mix = m;
        c.variant.synth_hidden = tiny ? 6 : 128;
        c.variant.synth_rank = tiny ? 2 : 8;
      };
    };
    add("synthesizer_dense", synth(SynthKind::Dense, SynthMix::Pure));
    add("synthesizer_dense_plus", synth(SynthKind::Dense, SynthMix::Plus));
    add("synthesizer_dense_plus_alpha", synth(SynthKind::Dense, SynthMix::PlusAlpha));
    add("synthesizer_factorized", synth(SynthKind::Factorized, SynthMix::Pure));
    add("synthesizer_random", synth(SynthKind::Random, SynthMix::Pure));
    add("synthesizer_random_plus", synth(SynthKind::Random, SynthMix::Plus));
    add("synthesizer_random_plus_alpha", synth(SynthKind::Random, SynthMix::PlusAlpha));

    add("universal", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::Universal;
      c.variant.ut_max_steps = tiny ? 3 : 24;
    });
    add("mixture_of_experts", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::Moe;
      c.variant.n_experts = tiny ? 4 : 32;
      c.variant.experts_k = 2;
    }, "32 experts at d_ff/2 in every fourth layer of each stack");
    add("switch", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::Switch;
      c.variant.n_experts = tiny ? 4 : 32;
    }, "32 full-width experts, top-1 routing");
    add("funnel", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::Funnel;
      if (tiny) {
        c.variant.funnel_blocks = 2;
        c.variant.funnel_layers_per_block = 1;
      } else {
        c.variant.funnel_blocks = 3;
        c.variant.funnel_layers_per_block = 4;
      }
    });
    add("pkm", [](ModelConfig& c, bool tiny) {
      c.variant.arch = ArchKind::Pkm;
      if (tiny) {
        c.variant.pkm_keys_half = 4;
        c.variant.pkm_values = 16;
        c.variant.pkm_knn = 2;
        c.variant.pkm_heads = 2;
        c.variant.pkm_d_q = 4;
      } else {
        c.variant.pkm_keys_half = 512;
        c.variant.pkm_values = 512 * 512;
        c.variant.pkm_knn = 32;
        c.variant.pkm_heads = 4;
        c.variant.pkm_d_q = 256;
      }
    }, "memory replaces the ffn before the last decoder layer");

    // positional-provider rows from the appendix study
    auto pos = [](PositionKind p) {
      return [p](ModelConfig& c, bool) { c.variant.position = p; };
    };
    add("relative_bias", pos(PositionKind::RelativeBias));
    add("relative_bias_shared", pos(PositionKind::RelativeBiasShared));
    add("relative_position_representation", pos(PositionKind::RelativeRepresentation));
    add("sinusoidal", pos(PositionKind::Sinusoidal));
    add("learned_positions", pos(PositionKind::Learned));

    v.push_back({"evolved", false, "searched cell defined outside the survey", nullptr});
    v.push_back({"weighted", false, "architecture never defined in the survey", nullptr});
    return v;
  }();
  return presets;
}

inline const VariantPreset& find_preset(const std::string& name) {
  for (const auto& p : variant_presets())
    if (p.name == name) return p;
  throw ConfigError("unknown variant preset '" + name + "'");
}

inline ModelConfig preset_config(const std::string& name, bool tiny = false) {
  const VariantPreset& p = find_preset(name);
  if (!p.supported)
    throw ConfigError("variant '" + name + "' is an unsupported marker: " + p.note);
  ModelConfig cfg;
  if (tiny) shrink_to_tiny(cfg);
  p.apply(cfg, tiny);
  cfg.validate();
  return cfg;
}

}  // namespace wb

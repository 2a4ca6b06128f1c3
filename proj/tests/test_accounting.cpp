#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "wb/accounting.hpp"
#include "wb/model.hpp"
#include "wb/presets.hpp"

using namespace wb;

namespace {

double rel_err(long count, double table_millions) {
  return std::abs(static_cast<double>(count) - table_millions * 1e6) / (table_millions * 1e6);
}

long instantiated_count(const ModelConfig& cfg) {
  ParamStore ps;
  register_model_params(ps, cfg);
  return ps.scalar_count();
}

}  // namespace

TEST_CASE("baseline counts 222.9M parameters, reported as 223M") {
  ModelConfig cfg;
  CountReport r = count_params(cfg);
  CHECK(r.total_params == 222945024);
  CHECK(rel_err(r.total_params, 223) < 0.02);
  long sum = 0;
  for (auto& [k, v] : r.breakdown) sum += v;
  CHECK(sum == r.total_params);
}

TEST_CASE("table-1 parameter column reproduces within 2 percent") {
  // every named row the acceptance gate cares about
  const std::pair<const char*, double> rows[] = {
      {"baseline", 223},
      {"depth_24", 224},
      {"depth_18", 223},
      {"depth_8", 223},
      {"depth_6", 223},
      {"block_sharing", 65},
      {"block_sharing_factorized", 45},
      {"encoder_only_sharing", 170},
      {"decoder_only_sharing", 144},
      {"tied_enc_dec_input", 248},
      {"tied_dec_in_out", 248},
      {"untied", 273},
      {"factorized_embedding", 227},
      {"factorized_shared_embedding", 202},
      {"adaptive_input", 204},
      {"adaptive_softmax", 204},
      {"adaptive_softmax_noproj", 223},
      {"mixture_of_softmaxes", 232},
      {"mixture_of_experts", 648},
      {"switch", 1100},
      {"pkm", 421},
      {"synthesizer_dense", 224},
      {"synthesizer_random", 254},
      {"transparent_attention", 223},
      {"funnel", 223},
  };
  for (auto& [name, millions] : rows) {
    ModelConfig cfg = preset_config(name);
    CountReport r = count_params(cfg);
    INFO(name << " counted " << r.total_params);
    CHECK(rel_err(r.total_params, millions) < 0.02);
  }
}

TEST_CASE("the 20M block-sharing row is off by more than the table tolerance") {
  // Two shared blocks plus the factorized tables add to ~20.7M; the printed
  // 20M cannot be reached by any reading of the architecture we found, so
  // the row is tracked as a known deviation (3.7%) rather than forced green.
  ModelConfig cfg = preset_config("block_sharing_factorized_shared");
  CountReport r = count_params(cfg);
  CHECK(r.total_params == 20728576);
  CHECK(rel_err(r.total_params, 20) > 0.02);
  CHECK(rel_err(r.total_params, 20) < 0.04);
}

TEST_CASE("depth presets stay within 1 percent of the baseline count") {
  long base = count_params(ModelConfig{}).total_params;
  for (auto& [name, cfg] : depth_width_presets()) {
    long n = count_params(cfg).total_params;
    INFO(name);
    CHECK(std::abs(static_cast<double>(n - base)) / static_cast<double>(base) < 0.01);
  }
}

TEST_CASE("zero-layer model with tied tables counts exactly d_vocab * d_model") {
  ModelConfig cfg;
  cfg.l_enc = 0;
  cfg.l_dec = 0;
  cfg.variant.position = PositionKind::Sinusoidal;
  cfg.variant.norm = NormKind::Rezero;  // no final norm parameters
  CountReport r = count_params(cfg);
  CHECK(r.total_params == cfg.d_vocab * cfg.d_model);
}

TEST_CASE("analytic counts equal instantiated stores for 20 randomized configs") {
  Rng rng(97);
  long checked = 0;
  long guard = 0;
  while (checked < 20 && guard < 200) {
    ++guard;
    ModelConfig cfg;
    cfg.d_model = 4 * (1 + static_cast<long>(rng.next_below(2)));  // 4 or 8
    cfg.heads = 1 + static_cast<long>(rng.next_below(2));
    cfg.d_kv = 2 * (1 + static_cast<long>(rng.next_below(2)));
    cfg.d_ff = 4 * (1 + static_cast<long>(rng.next_below(3)));
    cfg.l_enc = 1 + static_cast<long>(rng.next_below(3));
    cfg.l_dec = 1 + static_cast<long>(rng.next_below(3));
    cfg.d_vocab = 8 + static_cast<long>(rng.next_below(5));
    cfg.t_max = 6;
    cfg.u_max = 6;
    VariantSpec& v = cfg.variant;
    v.position = static_cast<PositionKind>(rng.next_below(5));
    v.norm = static_cast<NormKind>(rng.next_below(6));
    v.activation = static_cast<Activation>(rng.next_below(7));
    if (rng.next_below(3) == 0) v.glu = static_cast<GluKind>(1 + rng.next_below(5));
    v.sharing = static_cast<SharingScheme>(rng.next_below(4));
    switch (rng.next_below(4)) {
      case 0: v.tying = TyingScheme::TieAll; break;
      case 1: v.tying = TyingScheme::TieEncDecInput; break;
      case 2: v.tying = TyingScheme::TieDecInputOutput; break;
      case 3: v.tying = TyingScheme::Untied; break;
    }
    long fam = static_cast<long>(rng.next_below(4));
    if (fam == 1) {
      v.tying = TyingScheme::TieEncDecInput;
      v.factorized = true;
      v.d_inner = 2;
      v.shared_output = rng.next_below(2) == 0;
    } else if (fam == 2) {
      v.tying = TyingScheme::TieAll;
      long s0 = 2 + static_cast<long>(rng.next_below(3));
      long s1 = 2 + static_cast<long>(rng.next_below(3));
      v.clusters.sizes = {s0, s1, cfg.d_vocab - s0 - s1};
      v.clusters.dims = {cfg.d_model, cfg.d_model / 2, 1};
      if (rng.next_below(2) == 0) v.softmax = SoftmaxKind::Adaptive;
      v.adaptive_project = rng.next_below(2) == 0;
    } else if (fam == 3) {
      v.softmax = SoftmaxKind::Mos;
      v.mos_k = 1 + static_cast<long>(rng.next_below(3));
    }
    long arch = static_cast<long>(rng.next_below(10));
    v.arch = static_cast<ArchKind>(arch);
    v.n_experts = 2 + static_cast<long>(rng.next_below(3));
    v.experts_k = 1 + static_cast<long>(rng.next_below(2));
    v.synth_kind = static_cast<SynthKind>(rng.next_below(3));
    v.synth_mix = static_cast<SynthMix>(rng.next_below(3));
    v.synth_hidden = 3;
    v.synth_rank = 2;
    v.conv_width = 3;
    v.conv_groups = cfg.d_model % 4 == 0 ? 4 : 2;
    v.pkm_keys_half = 4;
    v.pkm_values = 16;
    v.pkm_knn = 2;
    v.pkm_heads = 1 + static_cast<long>(rng.next_below(2));
    v.pkm_d_q = 4;
    v.ut_max_steps = 2;
    if (v.arch == ArchKind::Funnel) {
      v.funnel_blocks = cfg.l_enc;
      v.funnel_layers_per_block = 1;
    }
    if (v.arch == ArchKind::Synthesizer && v.synth_mix == SynthMix::Pure &&
        cfg.d_model % cfg.heads != 0)
      continue;
    try {
      cfg.validate();
    } catch (const ConfigError&) {
      continue;  // incompatible draw; try another
    }
    CountReport r = count_params(cfg);
    long inst = instantiated_count(cfg);
    INFO("config " << checked << " arch " << arch << " fam " << fam);
    CHECK(r.total_params == inst);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("flop convention anchor: single projection counts 2kn per token") {
  ModelConfig cfg;
  cfg.l_enc = 0;
  cfg.l_dec = 0;
  cfg.variant.position = PositionKind::Sinusoidal;
  cfg.variant.norm = NormKind::Rezero;
  CountReport r = estimate_flops(cfg, 1, 1, 1);
  // one input one-hot product per token plus the output logit projection
  long embed = 2 * cfg.d_vocab * cfg.d_model;  // per source+target token
  long logits = 2 * cfg.d_model * cfg.d_vocab;  // target token only
  CHECK(r.flops_forward_per_token == (2 * embed + logits) / 2);
  CHECK(r.flops_train_step == 3 * r.flops_forward_per_token);
}

TEST_CASE("flop estimates reproduce the ops column directionally") {
  long base = estimate_flops(ModelConfig{}, 512, 512, 512).flops_forward_per_token;
  long funnel = estimate_flops(preset_config("funnel"), 512, 512, 512).flops_forward_per_token;
  long factorized =
      estimate_flops(preset_config("factorized_embedding"), 512, 512, 512).flops_forward_per_token;
  long mos =
      estimate_flops(preset_config("mixture_of_softmaxes"), 512, 512, 512).flops_forward_per_token;
  long sw = estimate_flops(preset_config("switch"), 512, 512, 512).flops_forward_per_token;

  CHECK(funnel < base);
  CHECK(factorized < base);
  CHECK(mos > base);
  // activated compute stays near the baseline while parameters grow >= 4.9x
  CHECK(std::abs(static_cast<double>(sw - base)) / static_cast<double>(base) < 0.10);
  double param_ratio = static_cast<double>(count_params(preset_config("switch")).total_params) /
                       static_cast<double>(count_params(ModelConfig{}).total_params);
  CHECK(param_ratio >= 4.9);
}

TEST_CASE("flop estimates are monotone in the driving dimensions") {
  ModelConfig cfg;
  auto fwd = [&](const ModelConfig& c, long t, long u) {
    return estimate_flops(c, t, u, 64).flops_forward_per_token;
  };
  long base_total = estimate_flops(cfg, 256, 256, 64).flops_forward_per_token * 512;
  long longer = estimate_flops(cfg, 512, 512, 64).flops_forward_per_token * 1024;
  CHECK(longer > base_total);
  ModelConfig wider = cfg;
  wider.d_model = 1024;
  CHECK(fwd(wider, 256, 256) > fwd(cfg, 256, 256));
  ModelConfig deeper_ffn = cfg;
  deeper_ffn.d_ff = 2 * cfg.d_ff;
  CHECK(fwd(deeper_ffn, 256, 256) > fwd(cfg, 256, 256));
}

TEST_CASE("unsupported markers exist for the externally-defined rows") {
  CHECK(!find_preset("evolved").supported);
  CHECK(!find_preset("weighted").supported);
  CHECK_THROWS_AS((void)preset_config("evolved"), ConfigError);
}

TEST_CASE("every supported preset validates at table scale and tiny scale") {
  for (const auto& p : variant_presets()) {
    if (!p.supported) continue;
    INFO(p.name);
    CHECK_NOTHROW((void)preset_config(p.name, false));
    CHECK_NOTHROW((void)preset_config(p.name, true));
  }
}

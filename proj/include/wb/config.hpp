#pragma once
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wb/errors.hpp"
#include "wb/tensor.hpp"

namespace wb {

enum class PositionKind : uint8_t {
  Sinusoidal,
  Learned,
  RelativeBiasShared,
  RelativeBias,
  RelativeRepresentation,
};

enum class NormKind : uint8_t { LayerNorm, RmsNorm, Rezero, RezeroLayerNorm, RezeroRmsNorm, Fixup };
enum class NormPlacement : uint8_t { Pre, Post };
enum class Activation : uint8_t { Relu, Gelu, Swish, Elu, Selu, Sigmoid, Softplus };
enum class GluKind : uint8_t { None, Glu, Reglu, Geglu, Swiglu, Liglu };
enum class TyingScheme : uint8_t { TieAll, TieEncDecInput, TieDecInputOutput, Untied };
enum class SharingScheme : uint8_t { None, BlockAll, EncoderOnly, DecoderOnly };
enum class SoftmaxKind : uint8_t { Full, Adaptive, Mos };
enum class ArchKind : uint8_t {
  None,
  Transparent,
  Synthesizer,
  Funnel,
  LightweightConv,
  DynamicConv,
  Moe,
  Switch,
  Pkm,
  Universal,
};
enum class SynthKind : uint8_t { Dense, Random, Factorized };
enum class SynthMix : uint8_t { Pure, Plus, PlusAlpha };

// Frequency-ordered vocabulary clusters for adaptive input/softmax. Token id
// equals frequency rank by construction of the synthetic tasks, so cluster
// membership is a pure range check.
struct ClusterSpec {
  std::vector<long> sizes;
  std::vector<long> dims;

  bool empty() const { return sizes.empty(); }
  long n_clusters() const { return static_cast<long>(sizes.size()); }
  long total() const {
    long t = 0;
    for (long s : sizes) t += s;
    return t;
  }
  long offset(long c) const {
    long o = 0;
    for (long i = 0; i < c; ++i) o += sizes[static_cast<size_t>(i)];
    return o;
  }
  long cluster_of(long token) const {
    long o = 0;
    for (size_t c = 0; c < sizes.size(); ++c) {
      if (token < o + sizes[c]) return static_cast<long>(c);
      o += sizes[c];
    }
    throw DataError("token id " + std::to_string(token) + " outside all clusters");
  }
};

struct VariantSpec {
  PositionKind position = PositionKind::RelativeBiasShared;
  long buckets = 32;
  long max_distance = 128;
  long clip_k = 16;
  bool cross_bias = false;
  bool value_offsets = false;

  NormKind norm = NormKind::LayerNorm;
  NormPlacement placement = NormPlacement::Pre;

  Activation activation = Activation::Relu;
  GluKind glu = GluKind::None;

  TyingScheme tying = TyingScheme::TieAll;
  bool factorized = false;
  long d_inner = 128;
  bool shared_output = false;
  ClusterSpec clusters;

  SharingScheme sharing = SharingScheme::None;

  SoftmaxKind softmax = SoftmaxKind::Full;
  long mos_k = 15;
  bool adaptive_project = true;

  ArchKind arch = ArchKind::None;
  SynthKind synth_kind = SynthKind::Random;
  SynthMix synth_mix = SynthMix::Pure;
  long synth_hidden = 128;
  long synth_rank = 8;

  long n_experts = 32;
  long experts_k = 2;
  double capacity_factor = 1.25;
  long expert_d_ff = 0;  // 0 = d_ff for switch, d_ff/2 for moe
  double balance_weight = 0.01;

  long pkm_knn = 32;
  long pkm_keys_half = 128;
  long pkm_values = 16384;
  long pkm_heads = 4;
  long pkm_d_q = 256;

  long conv_width = 9;
  long conv_groups = 12;

  long funnel_blocks = 3;
  long funnel_layers_per_block = 4;

  long ut_max_steps = 24;
  double ut_threshold = 0.5;
  double ut_ponder_weight = 0.01;

  bool scale_logits = false;
};

// Structural hyperparameters plus the variant selection. The baseline preset
// is the 12+12 layer, d_model 768 encoder-decoder.
struct ModelConfig {
  long l_enc = 12;
  long l_dec = 12;
  long d_model = 768;
  long d_ff = 3072;
  long d_kv = 64;
  long heads = 12;
  long d_vocab = 32000;
  long t_max = 512;
  long u_max = 512;
  VariantSpec variant;

  void validate() const;

  // FFN-position layers whose dense block is replaced by experts: every
  // fourth layer of a stack, or the last layer of shallow stacks.
  std::vector<long> sparse_layers(long n_layers) const {
    std::vector<long> out;
    for (long i = 0; i < n_layers; ++i)
      if ((i + 1) % 4 == 0) out.push_back(i);
    if (out.empty() && n_layers > 0) out.push_back(n_layers - 1);
    return out;
  }

  // The product-key memory replaces the FFN of the next-to-last decoder
  // layer (it sits before the last layer).
  long pkm_layer() const { return l_dec >= 2 ? l_dec - 2 : 0; }
};

// ---- enum <-> string -------------------------------------------------------

namespace detail {

template <class E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> entries;
  const char* to(E v) const {
    for (auto& [e, s] : entries)
      if (e == v) return s;
    return "?";
  }
  E from(const std::string& s, const char* key) const {
    for (auto& [e, n] : entries)
      if (s == n) return e;
    std::string opts;
    for (auto& [e, n] : entries) opts += std::string(opts.empty() ? "" : "|") + n;
    throw ParseError("invalid value '" + s + "' for " + key + " (expected " + opts + ")");
  }
};

inline const EnumNames<PositionKind>& position_names() {
  static EnumNames<PositionKind> n{{
      {PositionKind::Sinusoidal, "sinusoidal"},
      {PositionKind::Learned, "learned"},
      {PositionKind::RelativeBiasShared, "relative_bias_shared"},
      {PositionKind::RelativeBias, "relative_bias"},
      {PositionKind::RelativeRepresentation, "relative_representation"},
  }};
  return n;
}
inline const EnumNames<NormKind>& norm_names() {
  static EnumNames<NormKind> n{{
      {NormKind::LayerNorm, "layernorm"},
      {NormKind::RmsNorm, "rmsnorm"},
      {NormKind::Rezero, "rezero"},
      {NormKind::RezeroLayerNorm, "rezero_layernorm"},
      {NormKind::RezeroRmsNorm, "rezero_rmsnorm"},
      {NormKind::Fixup, "fixup"},
  }};
  return n;
}
inline const EnumNames<NormPlacement>& placement_names() {
  static EnumNames<NormPlacement> n{{
      {NormPlacement::Pre, "pre"},
      {NormPlacement::Post, "post"},
  }};
  return n;
}
inline const EnumNames<Activation>& activation_names() {
  static EnumNames<Activation> n{{
      {Activation::Relu, "relu"},
      {Activation::Gelu, "gelu"},
      {Activation::Swish, "swish"},
      {Activation::Elu, "elu"},
      {Activation::Selu, "selu"},
      {Activation::Sigmoid, "sigmoid"},
      {Activation::Softplus, "softplus"},
  }};
  return n;
}
inline const EnumNames<GluKind>& glu_names() {
  static EnumNames<GluKind> n{{
      {GluKind::None, "none"},
      {GluKind::Glu, "glu"},
      {GluKind::Reglu, "reglu"},
      {GluKind::Geglu, "geglu"},
      {GluKind::Swiglu, "swiglu"},
      {GluKind::Liglu, "liglu"},
  }};
  return n;
}
inline const EnumNames<TyingScheme>& tying_names() {
  static EnumNames<TyingScheme> n{{
      {TyingScheme::TieAll, "tie_all"},
      {TyingScheme::TieEncDecInput, "tie_enc_dec_input"},
      {TyingScheme::TieDecInputOutput, "tie_dec_input_output"},
      {TyingScheme::Untied, "untied"},
  }};
  return n;
}
inline const EnumNames<SharingScheme>& sharing_names() {
  static EnumNames<SharingScheme> n{{
      {SharingScheme::None, "none"},
      {SharingScheme::BlockAll, "block_all"},
      {SharingScheme::EncoderOnly, "encoder_only"},
      {SharingScheme::DecoderOnly, "decoder_only"},
  }};
  return n;
}
inline const EnumNames<SoftmaxKind>& softmax_names() {
  static EnumNames<SoftmaxKind> n{{
      {SoftmaxKind::Full, "full"},
      {SoftmaxKind::Adaptive, "adaptive"},
      {SoftmaxKind::Mos, "mos"},
  }};
  return n;
}
inline const EnumNames<ArchKind>& arch_names() {
  static EnumNames<ArchKind> n{{
      {ArchKind::None, "none"},
      {ArchKind::Transparent, "transparent"},
      {ArchKind::Synthesizer, "synthesizer"},
      {ArchKind::Funnel, "funnel"},
      {ArchKind::LightweightConv, "lightweight_conv"},
      {ArchKind::DynamicConv, "dynamic_conv"},
      {ArchKind::Moe, "moe"},
      {ArchKind::Switch, "switch"},
      {ArchKind::Pkm, "pkm"},
      {ArchKind::Universal, "universal"},
  }};
  return n;
}
inline const EnumNames<SynthKind>& synth_kind_names() {
  static EnumNames<SynthKind> n{{
      {SynthKind::Dense, "dense"},
      {SynthKind::Random, "random"},
      {SynthKind::Factorized, "factorized"},
  }};
  return n;
}
inline const EnumNames<SynthMix>& synth_mix_names() {
  static EnumNames<SynthMix> n{{
      {SynthMix::Pure, "pure"},
      {SynthMix::Plus, "plus"},
      {SynthMix::PlusAlpha, "plus_alpha"},
  }};
  return n;
}

}  // namespace detail

inline std::string clusters_to_string(const ClusterSpec& c) {
  std::ostringstream os;
  for (size_t i = 0; i < c.sizes.size(); ++i)
    os << (i ? "," : "") << c.sizes[i] << ":" << c.dims[i];
  return os.str();
}

inline ClusterSpec clusters_from_string(const std::string& s) {
  ClusterSpec out;
  if (s.empty() || s == "none") return out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) {
    auto colon = part.find(':');
    if (colon == std::string::npos)
      throw ParseError("cluster entry '" + part + "' must look like size:dim");
    out.sizes.push_back(std::stol(part.substr(0, colon)));
    out.dims.push_back(std::stol(part.substr(colon + 1)));
  }
  return out;
}

inline void ModelConfig::validate() const {
  auto positive = [](long v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  if (l_enc < 0 || l_dec < 0) throw ConfigError("layer counts must be non-negative");
  positive(d_model, "model.d_model");
  positive(d_ff, "model.d_ff");
  positive(d_kv, "model.d_kv");
  positive(heads, "model.heads");
  positive(d_vocab, "model.d_vocab");
  positive(t_max, "model.t_max");
  positive(u_max, "model.u_max");
  const VariantSpec& v = variant;
  if (v.position == PositionKind::Sinusoidal && d_model % 2 != 0)
    throw ConfigError("sinusoidal positions require an even d_model");
  if (v.buckets < 2) throw ConfigError("position.buckets must be >= 2");
  if (v.max_distance < 2) throw ConfigError("position.max_distance must be >= 2");
  if (v.clip_k < 1) throw ConfigError("position.clip_k must be >= 1");
  if (v.factorized) {
    if (!v.clusters.empty())
      throw ConfigError("embed.factorized cannot be combined with embed.adaptive_clusters");
    if (v.d_inner <= 0 || v.d_inner >= d_model)
      throw ConfigError("embed.d_inner must lie in (0, d_model) for factorized embeddings");
    if (v.tying != TyingScheme::TieEncDecInput)
      throw ConfigError(
          "factorized embeddings require embed.tying = tie_enc_dec_input "
          "(encoder and decoder inputs share the factorization)");
  }
  if (v.shared_output && !v.factorized)
    throw ConfigError("embed.shared_output only applies to factorized embeddings "
                      "(use embed.tying for full-table sharing)");
  if (!v.clusters.empty()) {
    if (v.clusters.sizes.size() != v.clusters.dims.size())
      throw ConfigError("adaptive clusters: sizes/dims length mismatch");
    if (v.clusters.total() != d_vocab)
      throw ConfigError("adaptive cluster sizes sum to " + std::to_string(v.clusters.total()) +
                        " but model.d_vocab is " + std::to_string(d_vocab));
    long prev = d_model + 1;
    for (size_t i = 0; i < v.clusters.dims.size(); ++i) {
      long d = v.clusters.dims[i];
      if (d <= 0 || d > d_model) throw ConfigError("adaptive cluster dims must lie in (0, d_model]");
      if (d > prev && i > 0) throw ConfigError("adaptive cluster dims must be non-increasing");
      prev = d;
    }
    if (v.tying == TyingScheme::Untied || v.tying == TyingScheme::TieDecInputOutput)
      throw ConfigError("adaptive embeddings share one clustered table; use embed.tying = tie_all");
  }
  if (v.softmax == SoftmaxKind::Adaptive && v.clusters.empty())
    throw ConfigError(
        "softmax.kind = adaptive requires embed.adaptive_clusters (the hierarchical output "
        "reuses the clustered tables)");
  if (v.softmax == SoftmaxKind::Mos && v.mos_k < 1)
    throw ConfigError("softmax.K must be >= 1");
  if (v.arch == ArchKind::Moe || v.arch == ArchKind::Switch) {
    if (v.n_experts < 1) throw ConfigError("experts.n must be >= 1");
    long k = v.arch == ArchKind::Switch ? 1 : v.experts_k;
    if (k < 1 || k > v.n_experts) throw ConfigError("experts.k must lie in [1, experts.n]");
    if (v.capacity_factor <= 0) throw ConfigError("experts.capacity_factor must be positive");
  }
  if (v.arch == ArchKind::Pkm) {
    if (v.pkm_knn < 1) throw ConfigError("pkm.knn must be >= 1");
    if (v.pkm_knn > v.pkm_keys_half)
      throw ConfigError("pkm.knn must not exceed pkm.n_keys_half");
    if (v.pkm_values != v.pkm_keys_half * v.pkm_keys_half)
      throw ConfigError("pkm.n_values must equal pkm.n_keys_half^2 (" +
                        std::to_string(v.pkm_keys_half * v.pkm_keys_half) + "), got " +
                        std::to_string(v.pkm_values));
    if (v.pkm_d_q % 2 != 0) throw ConfigError("pkm.d_q must be even (queries split in half)");
    if (v.pkm_heads < 1) throw ConfigError("pkm.heads must be >= 1");
  }
  if (v.arch == ArchKind::LightweightConv || v.arch == ArchKind::DynamicConv) {
    if (v.conv_width < 1) throw ConfigError("conv.width must be >= 1");
    if (v.conv_groups < 1 || d_model % v.conv_groups != 0)
      throw ConfigError("conv.groups must divide d_model");
  }
  if (v.arch == ArchKind::Funnel) {
    if (v.funnel_blocks < 1 || v.funnel_layers_per_block < 1)
      throw ConfigError("funnel.blocks and funnel.layers_per_block must be >= 1");
    if (l_enc != v.funnel_blocks * v.funnel_layers_per_block)
      throw ConfigError("funnel encoder needs model.l_enc = funnel.blocks * funnel.layers_per_block");
  }
  if (v.arch == ArchKind::Universal) {
    if (v.ut_max_steps < 1) throw ConfigError("ut.max_steps must be >= 1");
    if (!(v.ut_threshold > 0.0 && v.ut_threshold <= 1.0))
      throw ConfigError("ut.threshold must lie in (0, 1]");
  }
  if (v.arch == ArchKind::Synthesizer) {
    if (v.synth_hidden < 1) throw ConfigError("synth.d_hidden must be >= 1");
    if (v.synth_rank < 1) throw ConfigError("synth.factor_rank must be >= 1");
    if (v.synth_mix == SynthMix::Pure && d_model % heads != 0)
      throw ConfigError("pure synthesizer slices values per head; heads must divide d_model");
  }
}

// ---- spec file (flat `key = value` document) --------------------------------

struct SpecKeyDoc {
  const char* key;
  const char* def;
  const char* doc;
};

inline const std::vector<SpecKeyDoc>& spec_key_docs() {
  static const std::vector<SpecKeyDoc> docs = {
      {"model.l_enc", "12", "encoder layer count"},
      {"model.l_dec", "12", "decoder layer count"},
      {"model.d_model", "768", "residual stream width"},
      {"model.d_ff", "3072", "feedforward hidden width"},
      {"model.d_kv", "64", "per-head key/value width"},
      {"model.heads", "12", "attention head count"},
      {"model.d_vocab", "32000", "vocabulary size"},
      {"model.t_max", "512", "maximum source length"},
      {"model.u_max", "512", "maximum target length"},
      {"position.kind", "relative_bias_shared",
       "sinusoidal|learned|relative_bias_shared|relative_bias|relative_representation"},
      {"position.buckets", "32", "relative bias bucket count"},
      {"position.max_distance", "128", "relative bias log-bucket ceiling"},
      {"position.clip_k", "16", "relative representation clip distance"},
      {"position.cross_bias", "false", "also bias decoder cross-attention"},
      {"position.value_offsets", "false", "relative representation offsets on values too"},
      {"norm.kind", "layernorm", "layernorm|rmsnorm|rezero|rezero_layernorm|rezero_rmsnorm|fixup"},
      {"norm.placement", "pre", "pre|post residual wiring"},
      {"ffn.activation", "relu", "relu|gelu|swish|elu|selu|sigmoid|softplus"},
      {"ffn.glu_kind", "none", "none|glu|reglu|geglu|swiglu|liglu"},
      {"embed.tying", "tie_all", "tie_all|tie_enc_dec_input|tie_dec_input_output|untied"},
      {"embed.factorized", "false", "factor the input embedding into [V,d_inner][d_inner,d_model]"},
      {"embed.d_inner", "128", "factorized inner dimension"},
      {"embed.shared_output", "false", "output logits reuse the factorized tables"},
      {"embed.adaptive_clusters", "none", "size:dim list, e.g. 2500:768,6000:192,23628:48"},
      {"share.scheme", "none", "none|block_all|encoder_only|decoder_only"},
      {"softmax.kind", "full", "full|adaptive|mos"},
      {"softmax.K", "15", "mixture-of-softmaxes component count"},
      {"softmax.project", "true", "adaptive softmax tail down-projection"},
      {"arch.kind", "none",
       "none|transparent|synthesizer|funnel|lightweight_conv|dynamic_conv|moe|switch|pkm|universal"},
      {"synth.kind", "random", "dense|random|factorized"},
      {"synth.mix", "pure", "pure|plus|plus_alpha"},
      {"synth.d_hidden", "128", "dense synthesizer hidden width"},
      {"synth.factor_rank", "8", "factorized synthesizer rank"},
      {"experts.n", "32", "expert count"},
      {"experts.k", "2", "top-k routing width (switch forces 1)"},
      {"experts.capacity_factor", "1.25", "per-expert capacity multiplier"},
      {"experts.d_ff", "0", "expert hidden width; 0 = d_ff for switch, d_ff/2 for moe"},
      {"experts.balance_weight", "0.01", "load-balance auxiliary loss weight"},
      {"pkm.knn", "32", "selected memory slots per query"},
      {"pkm.n_keys_half", "128", "keys per half table"},
      {"pkm.n_values", "16384", "value rows; must equal n_keys_half^2"},
      {"pkm.heads", "4", "independent query heads sharing the value table"},
      {"pkm.d_q", "256", "query width (split into two halves)"},
      {"conv.width", "9", "convolution kernel width"},
      {"conv.groups", "12", "kernel weight-sharing groups"},
      {"funnel.blocks", "3", "encoder blocks between poolings"},
      {"funnel.layers_per_block", "4", "layers per funnel block"},
      {"ut.max_steps", "24", "universal transformer recurrence cap"},
      {"ut.threshold", "0.5", "ACT halting threshold"},
      {"ut.ponder_weight", "0.01", "ponder loss weight"},
      {"output.scale_logits", "false", "multiply logits by d_model^-0.5"},
  };
  return docs;
}

inline bool parse_bool(const std::string& s, const char* key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ParseError(std::string("invalid boolean '") + s + "' for " + key);
}

inline long parse_long(const std::string& s, const char* key) {
  try {
    size_t pos = 0;
    long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ParseError(std::string("invalid integer '") + s + "' for " + key);
  }
}

inline double parse_double(const std::string& s, const char* key) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ParseError(std::string("invalid number '") + s + "' for " + key);
  }
}

inline void apply_spec_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  VariantSpec& v = cfg.variant;
  if (key == "model.l_enc") cfg.l_enc = parse_long(value, key.c_str());
  else if (key == "model.l_dec") cfg.l_dec = parse_long(value, key.c_str());
  else if (key == "model.d_model") cfg.d_model = parse_long(value, key.c_str());
  else if (key == "model.d_ff") cfg.d_ff = parse_long(value, key.c_str());
  else if (key == "model.d_kv") cfg.d_kv = parse_long(value, key.c_str());
  else if (key == "model.heads") cfg.heads = parse_long(value, key.c_str());
  else if (key == "model.d_vocab") cfg.d_vocab = parse_long(value, key.c_str());
  else if (key == "model.t_max") cfg.t_max = parse_long(value, key.c_str());
  else if (key == "model.u_max") cfg.u_max = parse_long(value, key.c_str());
  else if (key == "position.kind") v.position = position_names().from(value, key.c_str());
  else if (key == "position.buckets") v.buckets = parse_long(value, key.c_str());
  else if (key == "position.max_distance") v.max_distance = parse_long(value, key.c_str());
  else if (key == "position.clip_k") v.clip_k = parse_long(value, key.c_str());
  else if (key == "position.cross_bias") v.cross_bias = parse_bool(value, key.c_str());
  else if (key == "position.value_offsets") v.value_offsets = parse_bool(value, key.c_str());
  else if (key == "norm.kind") v.norm = norm_names().from(value, key.c_str());
  else if (key == "norm.placement") v.placement = placement_names().from(value, key.c_str());
  else if (key == "ffn.activation") v.activation = activation_names().from(value, key.c_str());
  else if (key == "ffn.glu_kind") v.glu = glu_names().from(value, key.c_str());
  else if (key == "embed.tying") v.tying = tying_names().from(value, key.c_str());
  else if (key == "embed.factorized") v.factorized = parse_bool(value, key.c_str());
  else if (key == "embed.d_inner") v.d_inner = parse_long(value, key.c_str());
  else if (key == "embed.shared_output") v.shared_output = parse_bool(value, key.c_str());
  else if (key == "embed.adaptive_clusters") v.clusters = clusters_from_string(value);
  else if (key == "share.scheme") v.sharing = sharing_names().from(value, key.c_str());
  else if (key == "softmax.kind") v.softmax = softmax_names().from(value, key.c_str());
  else if (key == "softmax.K") v.mos_k = parse_long(value, key.c_str());
  else if (key == "softmax.project") v.adaptive_project = parse_bool(value, key.c_str());
  else if (key == "arch.kind") v.arch = arch_names().from(value, key.c_str());
  else if (key == "synth.kind") v.synth_kind = synth_kind_names().from(value, key.c_str());
  else if (key == "synth.mix") v.synth_mix = synth_mix_names().from(value, key.c_str());
  else if (key == "synth.d_hidden") v.synth_hidden = parse_long(value, key.c_str());
  else if (key == "synth.factor_rank") v.synth_rank = parse_long(value, key.c_str());
  else if (key == "experts.n") v.n_experts = parse_long(value, key.c_str());
  else if (key == "experts.k") v.experts_k = parse_long(value, key.c_str());
  else if (key == "experts.capacity_factor") v.capacity_factor = parse_double(value, key.c_str());
  else if (key == "experts.d_ff") v.expert_d_ff = parse_long(value, key.c_str());
  else if (key == "experts.balance_weight") v.balance_weight = parse_double(value, key.c_str());
  else if (key == "pkm.knn") v.pkm_knn = parse_long(value, key.c_str());
  else if (key == "pkm.n_keys_half") v.pkm_keys_half = parse_long(value, key.c_str());
  else if (key == "pkm.n_values") v.pkm_values = parse_long(value, key.c_str());
  else if (key == "pkm.heads") v.pkm_heads = parse_long(value, key.c_str());
  else if (key == "pkm.d_q") v.pkm_d_q = parse_long(value, key.c_str());
  else if (key == "conv.width") v.conv_width = parse_long(value, key.c_str());
  else if (key == "conv.groups") v.conv_groups = parse_long(value, key.c_str());
  else if (key == "funnel.blocks") v.funnel_blocks = parse_long(value, key.c_str());
  else if (key == "funnel.layers_per_block") v.funnel_layers_per_block = parse_long(value, key.c_str());
  else if (key == "ut.max_steps") v.ut_max_steps = parse_long(value, key.c_str());
  else if (key == "ut.threshold") v.ut_threshold = parse_double(value, key.c_str());
  else if (key == "ut.ponder_weight") v.ut_ponder_weight = parse_double(value, key.c_str());
  else if (key == "output.scale_logits") v.scale_logits = parse_bool(value, key.c_str());
  else throw ParseError("unknown spec key '" + key + "'");
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline ModelConfig parse_spec_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("spec line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      apply_spec_key(cfg, key, value);
    } catch (const ParseError& e) {
      throw ParseError("spec line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline ModelConfig load_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open spec file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_spec_text(buf.str());
}

inline std::string spec_value_of(const ModelConfig& cfg, const std::string& key) {
  using namespace detail;
  const VariantSpec& v = cfg.variant;
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  auto d = [](double x) {
    std::ostringstream os;
    os << x;
    return os.str();
  };
  if (key == "model.l_enc") return std::to_string(cfg.l_enc);
  if (key == "model.l_dec") return std::to_string(cfg.l_dec);
  if (key == "model.d_model") return std::to_string(cfg.d_model);
  if (key == "model.d_ff") return std::to_string(cfg.d_ff);
  if (key == "model.d_kv") return std::to_string(cfg.d_kv);
  if (key == "model.heads") return std::to_string(cfg.heads);
  if (key == "model.d_vocab") return std::to_string(cfg.d_vocab);
  if (key == "model.t_max") return std::to_string(cfg.t_max);
  if (key == "model.u_max") return std::to_string(cfg.u_max);
  if (key == "position.kind") return position_names().to(v.position);
  if (key == "position.buckets") return std::to_string(v.buckets);
  if (key == "position.max_distance") return std::to_string(v.max_distance);
  if (key == "position.clip_k") return std::to_string(v.clip_k);
  if (key == "position.cross_bias") return b(v.cross_bias);
  if (key == "position.value_offsets") return b(v.value_offsets);
  if (key == "norm.kind") return norm_names().to(v.norm);
  if (key == "norm.placement") return placement_names().to(v.placement);
  if (key == "ffn.activation") return activation_names().to(v.activation);
  if (key == "ffn.glu_kind") return glu_names().to(v.glu);
  if (key == "embed.tying") return tying_names().to(v.tying);
  if (key == "embed.factorized") return b(v.factorized);
  if (key == "embed.d_inner") return std::to_string(v.d_inner);
  if (key == "embed.shared_output") return b(v.shared_output);
  if (key == "embed.adaptive_clusters")
    return v.clusters.empty() ? "none" : clusters_to_string(v.clusters);
  if (key == "share.scheme") return sharing_names().to(v.sharing);
  if (key == "softmax.kind") return softmax_names().to(v.softmax);
  if (key == "softmax.K") return std::to_string(v.mos_k);
  if (key == "softmax.project") return b(v.adaptive_project);
  if (key == "arch.kind") return arch_names().to(v.arch);
  if (key == "synth.kind") return synth_kind_names().to(v.synth_kind);
  if (key == "synth.mix") return synth_mix_names().to(v.synth_mix);
  if (key == "synth.d_hidden") return std::to_string(v.synth_hidden);
  if (key == "synth.factor_rank") return std::to_string(v.synth_rank);
  if (key == "experts.n") return std::to_string(v.n_experts);
  if (key == "experts.k") return std::to_string(v.experts_k);
  if (key == "experts.capacity_factor") return d(v.capacity_factor);
  if (key == "experts.d_ff") return std::to_string(v.expert_d_ff);
  if (key == "experts.balance_weight") return d(v.balance_weight);
  if (key == "pkm.knn") return std::to_string(v.pkm_knn);
  if (key == "pkm.n_keys_half") return std::to_string(v.pkm_keys_half);
  if (key == "pkm.n_values") return std::to_string(v.pkm_values);
  if (key == "pkm.heads") return std::to_string(v.pkm_heads);
  if (key == "pkm.d_q") return std::to_string(v.pkm_d_q);
  if (key == "conv.width") return std::to_string(v.conv_width);
  if (key == "conv.groups") return std::to_string(v.conv_groups);
  if (key == "funnel.blocks") return std::to_string(v.funnel_blocks);
  if (key == "funnel.layers_per_block") return std::to_string(v.funnel_layers_per_block);
  if (key == "ut.max_steps") return std::to_string(v.ut_max_steps);
  if (key == "ut.threshold") return d(v.ut_threshold);
  if (key == "ut.ponder_weight") return d(v.ut_ponder_weight);
  if (key == "output.scale_logits") return b(v.scale_logits);
  throw ConfigError("spec_value_of: unknown key " + key);
}

// Full, explicit spec document; values differing from defaults are flagged.
inline std::string write_spec_text(const ModelConfig& cfg, const std::string& header = "") {
  std::ostringstream os;
  if (!header.empty()) os << "# " << header << "\n";
  for (const SpecKeyDoc& kd : spec_key_docs()) {
    std::string val = spec_value_of(cfg, kd.key);
    os << kd.key << " = " << val;
    os << "  # " << kd.doc;
    if (val != kd.def) os << " (default " << kd.def << ")";
    os << "\n";
  }
  return os.str();
}

}  // namespace wb

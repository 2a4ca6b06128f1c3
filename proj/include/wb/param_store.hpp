#pragma once
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "wb/errors.hpp"
#include "wb/rng.hpp"
#include "wb/tape.hpp"
#include "wb/tensor.hpp"

namespace wb {

enum class InitKind : uint8_t { Zeros, Ones, Constant, ScaledNormal };

struct InitScheme {
  InitKind kind = InitKind::Zeros;
  double c = 0.0;      // Constant value, or an extra multiplier for ScaledNormal
  long fan_in = 1;     // ScaledNormal std = c / sqrt(fan_in)

  static InitScheme zeros() { return {InitKind::Zeros, 0.0, 1}; }
  static InitScheme ones() { return {InitKind::Ones, 0.0, 1}; }
  static InitScheme constant(double v) { return {InitKind::Constant, v, 1}; }
  static InitScheme scaled_normal(long fan_in, double mult = 1.0) {
    return {InitKind::ScaledNormal, mult, fan_in};
  }
};

inline Tensor init_param(Rng& rng, const Shape& shape, const InitScheme& scheme) {
  Tensor t(shape);
  switch (scheme.kind) {
    case InitKind::Zeros:
      break;
    case InitKind::Ones:
      for (double& x : t.data) x = 1.0;
      break;
    case InitKind::Constant:
      for (double& x : t.data) x = scheme.c;
      break;
    case InitKind::ScaledNormal: {
      if (scheme.fan_in <= 0) throw ConfigError("init: fan_in must be positive");
      double std = scheme.c / std::sqrt(static_cast<double>(scheme.fan_in));
      for (double& x : t.data) x = std * rng.next_normal();
      break;
    }
  }
  return t;
}

// Named, shaped parameter collection. Parameters registered with the same
// share-group alias one storage slot; the slot is counted once and updated
// once per optimizer step, and gradients from every usage site accumulate
// into it.
class ParamStore {
 public:
  struct Slot {
    std::string group;
    Shape shape;
    InitScheme scheme;
    Tensor value;
    Tensor grad;
  };

  long register_param(const std::string& name, Shape shape, InitScheme scheme,
                      const std::string& share_group = "") {
    if (by_name_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    std::string group = share_group.empty() ? name : share_group;
    auto it = by_group_.find(group);
    if (it != by_group_.end()) {
      long slot = it->second;
      if (slots_[static_cast<size_t>(slot)].shape != shape)
        throw ConfigError("share-group '" + group + "' used with mismatched shapes " +
                          shape_str(slots_[static_cast<size_t>(slot)].shape) + " vs " +
                          shape_str(shape));
      by_name_[name] = slot;
      return slot;
    }
    Slot s;
    s.group = group;
    s.shape = shape;
    s.scheme = scheme;
    s.value = Tensor::zeros(shape);
    s.grad = Tensor::zeros(shape);
    slots_.push_back(std::move(s));
    long slot = static_cast<long>(slots_.size()) - 1;
    by_group_[group] = slot;
    by_name_[name] = slot;
    return slot;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  long slot_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& value(const std::string& name) { return slots_[static_cast<size_t>(slot_of(name))].value; }
  const Tensor& value(const std::string& name) const {
    return slots_[static_cast<size_t>(slot_of(name))].value;
  }
  Tensor& grad(const std::string& name) { return slots_[static_cast<size_t>(slot_of(name))].grad; }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  long n_slots() const { return static_cast<long>(slots_.size()); }
  const std::map<std::string, long>& names() const { return by_name_; }

  // Scalar count with each share-group counted once.
  long scalar_count() const {
    long n = 0;
    for (const Slot& s : slots_) n += numel(s.shape);
    return n;
  }

  void zero_grads() {
    for (Slot& s : slots_)
      for (double& g : s.grad.data) g = 0.0;
  }

  // Deterministic: slot order is registration order, each slot draws from a
  // forked sub-stream so layouts with equal prefixes get equal values.
  void init_all(const Rng& base) {
    for (size_t i = 0; i < slots_.size(); ++i) {
      Rng r = base.fork(static_cast<uint64_t>(i));
      slots_[i].value = init_param(r, slots_[i].shape, slots_[i].scheme);
    }
  }

  // Adds d(loss)/d(leaf) for every parameter leaf on the tape.
  void absorb_grads(const Tape& tape) {
    for (size_t i = 0; i < tape.nodes.size(); ++i) {
      const TapeNode& n = tape.nodes[i];
      if (n.op != Op::Leaf || n.i0 < 0) continue;
      Tensor& dst = slots_[static_cast<size_t>(n.i0)].grad;
      const Tensor& src = tape.grad[i];
      for (long k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

 private:
  std::vector<Slot> slots_;
  std::map<std::string, long> by_name_;
  std::map<std::string, long> by_group_;
};

// Per-forward cache handing out one leaf per slot, so shared parameters
// appear on the tape exactly once and their gradient is the sum over all
// usage sites.
class ParamVars {
 public:
  ParamVars(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

  Var operator()(const std::string& name) {
    long slot = store_->slot_of(name);
    auto it = cache_.find(slot);
    if (it != cache_.end()) return it->second;
    Var v = leaf(*tape_, store_->slots()[static_cast<size_t>(slot)].value, slot);
    cache_[slot] = v;
    return v;
  }

 private:
  Tape* tape_;
  ParamStore* store_;
  std::map<long, Var> cache_;
};

// Max over parameters of |analytic - central difference| /
// max(|analytic|, |numeric|, 1e-8). `build` must be a pure function of the
// store contents.
inline double grad_check(const std::function<Var(Tape&, ParamStore&)>& build, ParamStore& params,
                         double eps = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");
  params.zero_grads();
  double base;
  {
    Tape t;
    Var loss = build(t, params);
    if (t.value(loss).size() != 1) throw ConfigError("grad_check: loss must be scalar");
    base = t.value(loss)[0];
    if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");
    t.backward(loss);
    params.absorb_grads(t);
  }
  (void)base;
  std::vector<Tensor> analytic;
  for (const auto& s : params.slots()) analytic.push_back(s.grad);

  auto eval = [&]() {
    Tape t;
    Var loss = build(t, params);
    double v = t.value(loss)[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during perturbation");
    return v;
  };

  double worst = 0.0;
  for (long si = 0; si < params.n_slots(); ++si) {
    Tensor& v = params.slots()[static_cast<size_t>(si)].value;
    for (long k = 0; k < v.size(); ++k) {
      double saved = v[k];
      v[k] = saved + eps;
      double lp = eval();
      v[k] = saved - eps;
      double lm = eval();
      v[k] = saved;
      double numeric = (lp - lm) / (2.0 * eps);
      double a = analytic[static_cast<size_t>(si)][k];
      double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace wb

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ademvl/fusion.hpp"
#include "ademvl/rng.hpp"
#include "ademvl/tensor.hpp"

namespace ademvl {

inline constexpr Real kFiniteDiffStep = 1e-5;
// Relative error is |a - n| / max(|a|, |n|, floor). The floor keeps entries
// whose true gradient is ~0 from dividing rounding noise by ~0.
inline constexpr Real kRelErrorFloor = 1e-6;

// Central differences of f with respect to every element of `param`. `param`
// is perturbed in place and restored exactly.
inline Tensor finite_difference(const std::function<Real()>& f, Tensor& param,
                                Real h = kFiniteDiffStep) {
  Tensor g(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const Real saved = param[i];
    param[i] = saved + h;
    const Real up = f();
    param[i] = saved - h;
    const Real down = f();
    param[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline Real max_relative_error(const Tensor& analytic, const Tensor& numeric,
                               Real floor = kRelErrorFloor) {
  require_same_shape(analytic, numeric, "max_relative_error");
  Real worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const Real a = analytic[i], n = numeric[i];
    const Real denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

inline Real frobenius_dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "frobenius_dot");
  Real s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// A random fuse() instance with every dimension <= 8 and nonzero B and E so
// that all gradient paths are live.
struct FuseGradInstance {
  Tensor text, visual_raw, upstream;
  FusionParams params;
};

inline FuseGradInstance random_fuse_instance(std::uint64_t seed, Real gamma,
                                             Activation phi = Activation::silu) {
  Rng rng(seed);
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  const std::size_t L = dim(1, 8), N = dim(2, 8), d = dim(1, 8), dv = dim(1, 8), r = dim(1, 8);
  FuseGradInstance inst;
  inst.text = rng.normal_tensor({L, d});
  inst.visual_raw = rng.normal_tensor({N, dv});
  inst.upstream = rng.normal_tensor({L, d});
  auto& p = inst.params;
  p.a_feat = rng.normal_tensor({dv, r}, 0.7);
  p.b_feat = rng.normal_tensor({r, d}, 0.7);
  p.a_cls = rng.normal_tensor({dv, r}, 0.7);
  p.b_cls = rng.normal_tensor({r, d}, 0.7);
  p.pos_embed = rng.normal_tensor({N, d}, 0.7);
  p.hyper = {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), gamma, phi};
  return inst;
}

struct FuseGradReport {
  Real a_feat = 0.0, b_feat = 0.0, pos_embed = 0.0, text = 0.0;
  Real worst() const { return std::max({a_feat, b_feat, pos_embed, text}); }
};

// Compares fuse_backward() against central differences of
// loss = <upstream, fuse(...).delta> for A_feat, B_feat, E and X_l.
inline FuseGradReport check_fuse_gradients(FuseGradInstance inst) {
  const FuseResult fwd = fuse(inst.text, inst.visual_raw, inst.params);
  const FusionGrads g = fuse_backward(inst.upstream, fwd.cache, inst.params);
  auto loss = [&] {
    return frobenius_dot(inst.upstream, fuse(inst.text, inst.visual_raw, inst.params).delta);
  };
  FuseGradReport r;
  r.a_feat = max_relative_error(g.a_feat, finite_difference(loss, inst.params.a_feat));
  r.b_feat = max_relative_error(g.b_feat, finite_difference(loss, inst.params.b_feat));
  r.pos_embed = max_relative_error(g.pos_embed, finite_difference(loss, inst.params.pos_embed));
  r.text = max_relative_error(g.text, finite_difference(loss, inst.text));
  return r;
}

}  // namespace ademvl

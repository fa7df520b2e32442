#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "ademvl/errors.hpp"
#include "ademvl/rng.hpp"
#include "ademvl/tensor.hpp"

namespace ademvl {

// ---------------------------------------------------------------------------
// Standard (parameterized, softmax) cross-attention. Kept as the reference
// point for the FLOPs comparison and as an oracle target in tests.

struct StandardXAttnParams {
  Tensor w_q, w_k, w_v, w_o;  // d x d
  std::size_t d_k = 1;

  void validate(std::size_t d) const {
    for (const Tensor* w : {&w_q, &w_k, &w_v, &w_o}) {
      if (w->shape() != Shape{d, d}) {
        throw ShapeError("standard cross-attention weight must be " + shape_str({d, d}) +
                         ", got " + shape_str(w->shape()));
      }
    }
    if (d_k == 0) throw ConfigError("d_k must be positive");
  }

  static StandardXAttnParams random(std::size_t d, Rng& rng) {
    const Real s = 1.0 / std::sqrt(static_cast<Real>(d));
    return {rng.normal_tensor({d, d}, s), rng.normal_tensor({d, d}, s),
            rng.normal_tensor({d, d}, s), rng.normal_tensor({d, d}, s), d};
  }
};

// softmax((X_l W_Q)(X_v W_K)^T / sqrt(d_k)) (X_v W_V) W_o^T
inline Tensor standard_xattn(const Tensor& text, const Tensor& visual,
                             const StandardXAttnParams& p) {
  if (text.rank() != 2 || visual.rank() != 2 || text.dim(1) != visual.dim(1)) {
    throw ShapeError("standard_xattn needs L x d text and N x d visual, got " +
                     shape_str(text.shape()) + " and " + shape_str(visual.shape()));
  }
  p.validate(text.dim(1));
  const Tensor q = matmul(text, p.w_q);
  const Tensor k = matmul(visual, p.w_k);
  const Tensor v = matmul(visual, p.w_v);
  Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<Real>(p.d_k)));
  const Tensor weights = activation(scores, Activation::softmax_rows);
  return matmul_nt(matmul(weights, v), p.w_o);
}

// ---------------------------------------------------------------------------
// Adaptive score masking

struct DropDecision {
  Tensor mask;                         // L x N, 1 = kept, 0 = dropped
  std::vector<std::size_t> dropped;    // per row

  std::size_t rows() const { return mask.empty() ? 0 : mask.dim(0); }
  std::size_t cols() const { return mask.empty() ? 0 : mask.dim(1); }
  bool kept(std::size_t i, std::size_t j) const { return mask(i, j) != 0.0; }
};

inline void check_gamma(Real gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) {
    throw ConfigError("drop ratio gamma must lie in [0, 1), got " + std::to_string(gamma));
  }
}

// floor(gamma * n), evaluated in f64.
inline std::size_t drop_count(Real gamma, std::size_t n) {
  return static_cast<std::size_t>(std::floor(gamma * static_cast<Real>(n)));
}

// Per row, drop the floor(gamma * N) smallest scores. Equal scores are
// dropped lowest column first.
inline DropDecision adaptive_mask(const Tensor& scores, Real gamma) {
  if (scores.rank() != 2) throw ShapeError("adaptive_mask expects an L x N score matrix");
  check_gamma(gamma);
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  const std::size_t k = drop_count(gamma, cols);
  DropDecision d{Tensor({rows, cols}, 1.0), std::vector<std::size_t>(rows, k)};
  if (k == 0) return d;
  std::vector<std::size_t> order(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    auto s = scores.row(i);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return s[a] < s[b] || (s[a] == s[b] && a < b);
                      });
    for (std::size_t t = 0; t < k; ++t) d.mask(i, order[t]) = 0.0;
  }
  return d;
}

inline Tensor apply_mask(const Tensor& scores, const DropDecision& d) {
  return hadamard(scores, d.mask);
}

// ---------------------------------------------------------------------------
// Parameter-free cross-attention: out = mask(phi(X_l) phi(X_v)^T) X_v.
// No softmax and no 1/sqrt(d) scaling.

struct XAttnCache {
  Activation phi = Activation::silu;
  Tensor text, memory;          // inputs
  Tensor phi_text, phi_memory;  // phi applied to each
  Tensor masked_scores;         // S' = S * mask
  DropDecision decision;
};

struct XAttnResult {
  Tensor out;     // L x d
  Tensor scores;  // L x N, before masking
  DropDecision decision;
  XAttnCache cache;
};

inline XAttnResult param_free_xattn_cached(const Tensor& text, const Tensor& memory,
                                           Activation phi, Real gamma) {
  if (text.rank() != 2 || memory.rank() != 2 || text.dim(1) != memory.dim(1)) {
    throw ShapeError("param_free_xattn needs L x d text and N x d visual, got " +
                     shape_str(text.shape()) + " and " + shape_str(memory.shape()));
  }
  check_gamma(gamma);
  XAttnResult r;
  r.cache.phi = phi;
  r.cache.text = text;
  r.cache.memory = memory;
  r.cache.phi_text = activation(text, phi);
  r.cache.phi_memory = activation(memory, phi);
  r.scores = matmul_nt(r.cache.phi_text, r.cache.phi_memory);
  r.decision = adaptive_mask(r.scores, gamma);
  r.cache.masked_scores = apply_mask(r.scores, r.decision);
  r.cache.decision = r.decision;
  r.out = matmul(r.cache.masked_scores, memory);
  return r;
}

struct ParamFreeOutput {
  Tensor out;
  Tensor scores;
  DropDecision decision;
};

inline ParamFreeOutput param_free_xattn(const Tensor& text, const Tensor& memory, Activation phi,
                                        Real gamma) {
  auto r = param_free_xattn_cached(text, memory, phi, gamma);
  return {std::move(r.out), std::move(r.scores), std::move(r.decision)};
}

struct XAttnGrads {
  Tensor text;    // L x d
  Tensor memory;  // N x d, through both the key and the value role
};

// Backward of param_free_xattn. The drop mask is held constant: kept entries
// pass gradient straight through, dropped entries pass none.
inline XAttnGrads param_free_xattn_backward(const XAttnCache& c, const Tensor& grad_out) {
  if (c.masked_scores.empty()) throw UsageError("param_free_xattn_backward called without a forward cache");
  require_same_shape(grad_out, c.text, "param_free_xattn_backward");
  // out = S' M  with S' = mask * (Pt Pm^T)
  Tensor grad_memory = matmul_tn(c.masked_scores, grad_out);             // value role
  const Tensor grad_scores = hadamard(matmul_nt(grad_out, c.memory), c.decision.mask);
  const Tensor grad_phi_text = matmul(grad_scores, c.phi_memory);
  const Tensor grad_phi_memory = matmul_tn(grad_scores, c.phi_text);
  axpy(grad_memory, 1.0, activation_backward(c.memory, c.phi, grad_phi_memory));  // key role
  return {activation_backward(c.text, c.phi, grad_phi_text), std::move(grad_memory)};
}

// ---------------------------------------------------------------------------
// Low-rank visual embedding and the fused update alpha * XAttn(X_l, beta X_v + E)

// (X_raw A) B, never forming A B.
inline Tensor embed_visual(const Tensor& raw, const Tensor& a, const Tensor& b) {
  if (raw.rank() != 2 || a.rank() != 2 || b.rank() != 2 || raw.dim(1) != a.dim(0) ||
      a.dim(1) != b.dim(0)) {
    throw ShapeError("embed_visual shape mismatch: " + shape_str(raw.shape()) + " x " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return matmul(matmul(raw, a), b);
}

struct FusionHyper {
  Real alpha = 0.1;
  Real beta = 0.01;
  Real gamma = 0.2;
  Activation phi = Activation::silu;
  // Standard deviation of the initial E. Zero keeps the fused update exactly
  // null at initialization, but B = 0 and E = 0 is also a stationary point of
  // every fusion gradient except the cls projector, so training needs E != 0.
  Real pos_init_std = 0.0;
};

// Trainable fusion state. Projector pairs map d' -> r -> d; pos_embed is the
// per-visual-row embedding E shared by every fusion site.
struct FusionParams {
  Tensor a_feat, b_feat;  // d' x r, r x d
  Tensor a_cls, b_cls;    // d' x r, r x d
  Tensor pos_embed;       // N_total x d
  FusionHyper hyper;

  std::size_t vis_dim() const { return a_feat.dim(0); }
  std::size_t rank() const { return a_feat.dim(1); }
  std::size_t model_dim() const { return b_feat.dim(1); }
  std::size_t rows() const { return pos_embed.dim(0); }

  void validate() const {
    auto pair_ok = [](const Tensor& a, const Tensor& b) {
      return a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0);
    };
    if (!pair_ok(a_feat, b_feat) || !pair_ok(a_cls, b_cls)) {
      throw ShapeError("low-rank pair does not compose: " + shape_str(a_feat.shape()) + "*" +
                       shape_str(b_feat.shape()) + ", " + shape_str(a_cls.shape()) + "*" +
                       shape_str(b_cls.shape()));
    }
    if (a_cls.dim(0) != a_feat.dim(0) || b_cls.dim(1) != b_feat.dim(1)) {
      throw ShapeError("feature and cls projectors disagree on d' or d");
    }
    if (pos_embed.rank() != 2 || pos_embed.dim(1) != b_feat.dim(1)) {
      throw ShapeError("positional embedding must be N x d, got " + shape_str(pos_embed.shape()));
    }
    check_gamma(hyper.gamma);
  }

  // Number of trainable scalars: both projector pairs plus E.
  std::size_t trainable_count() const {
    return a_feat.size() + b_feat.size() + a_cls.size() + b_cls.size() + pos_embed.size();
  }

  // A ~ U(-1/sqrt(d'), 1/sqrt(d')), B = 0, E ~ N(0, pos_init_std^2). With the
  // default pos_init_std = 0 the fused update is exactly zero.
  static FusionParams init(std::size_t vis_dim, std::size_t model_dim, std::size_t rank,
                           std::size_t rows, const FusionHyper& hyper, Rng& rng) {
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(vis_dim));
    FusionParams p;
    p.a_feat = rng.uniform_tensor({vis_dim, rank}, -bound, bound);
    p.b_feat = Tensor::zeros({rank, model_dim});
    p.a_cls = rng.uniform_tensor({vis_dim, rank}, -bound, bound);
    p.b_cls = Tensor::zeros({rank, model_dim});
    p.pos_embed = hyper.pos_init_std > 0.0
                      ? rng.normal_tensor({rows, model_dim}, hyper.pos_init_std)
                      : Tensor::zeros({rows, model_dim});
    p.hyper = hyper;
    p.validate();
    return p;
  }
};

// beta * X_v + E: the key/value set consumed by every fusion site.
inline Tensor fusion_memory(const Tensor& embedded, const Tensor& pos_embed, Real beta) {
  if (embedded.shape() != pos_embed.shape()) {
    throw ShapeError("positional embedding " + shape_str(pos_embed.shape()) +
                     " does not match visual rows " + shape_str(embedded.shape()));
  }
  Tensor m = scale(embedded, beta);
  axpy(m, 1.0, pos_embed);
  return m;
}

struct FuseCache {
  bool valid = false;
  Tensor raw;       // N x d'
  Tensor raw_proj;  // X_raw A_feat, N x r
  Real alpha = 0.0;
  Real beta = 0.0;
  XAttnCache attn;
};

struct FuseResult {
  Tensor delta;  // L x d, to be added into the language stream
  DropDecision decision;
  Tensor scores;
  FuseCache cache;
};

inline FuseResult fuse(const Tensor& text, const Tensor& visual_raw, const FusionParams& p) {
  p.validate();
  if (visual_raw.rank() != 2 || visual_raw.dim(0) != p.rows()) {
    throw ShapeError("visual prompt has " + shape_str(visual_raw.shape()) + " rows but E has " +
                     std::to_string(p.rows()));
  }
  FuseResult r;
  r.cache.raw = visual_raw;
  r.cache.raw_proj = matmul(visual_raw, p.a_feat);
  r.cache.alpha = p.hyper.alpha;
  r.cache.beta = p.hyper.beta;
  const Tensor embedded = matmul(r.cache.raw_proj, p.b_feat);
  auto x = param_free_xattn_cached(text, fusion_memory(embedded, p.pos_embed, p.hyper.beta),
                                   p.hyper.phi, p.hyper.gamma);
  r.delta = scale(x.out, p.hyper.alpha);
  r.decision = std::move(x.decision);
  r.scores = std::move(x.scores);
  r.cache.attn = std::move(x.cache);
  r.cache.valid = true;
  return r;
}

struct FusionGrads {
  Tensor a_feat, b_feat, pos_embed, text;
};

// Gradients of <grad_delta, delta> given the cache from fuse().
// grad(embedded) = beta * grad(memory); grad(E) = grad(memory).
inline FusionGrads fuse_backward(const Tensor& grad_delta, const FuseCache& cache,
                                 const FusionParams& p) {
  if (!cache.valid) throw UsageError("fuse_backward called without a cached forward pass");
  const XAttnGrads g = param_free_xattn_backward(cache.attn, scale(grad_delta, cache.alpha));
  const Tensor grad_embedded = scale(g.memory, cache.beta);
  FusionGrads out;
  out.b_feat = matmul_tn(cache.raw_proj, grad_embedded);
  out.a_feat = matmul_tn(cache.raw, matmul_nt(grad_embedded, p.b_feat));
  out.pos_embed = g.memory;
  out.text = g.text;
  return out;
}

}  // namespace ademvl

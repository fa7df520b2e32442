#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ademvl/errors.hpp"
#include "ademvl/fusion.hpp"
#include "ademvl/prompt.hpp"
#include "ademvl/rng.hpp"
#include "ademvl/tensor.hpp"

namespace ademvl {

// ---------------------------------------------------------------------------
// Fusion placement inside a pre-norm block.
//
//   MHSA-in  : normalized input of self-attention
//   MHSA-out : self-attention output, before the residual add
//   MLP-in   : normalized input of the MLP
//   MLP-out  : MLP output, before the residual add

enum class Site { mhsa_in = 0, mhsa_out = 1, mlp_in = 2, mlp_out = 3 };

inline std::string_view to_string(Site s) {
  switch (s) {
    case Site::mhsa_in: return "MHSA-in";
    case Site::mhsa_out: return "MHSA-out";
    case Site::mlp_in: return "MLP-in";
    case Site::mlp_out: return "MLP-out";
  }
  return "?";
}

inline Site parse_site(std::string_view s) {
  for (Site v : {Site::mhsa_in, Site::mhsa_out, Site::mlp_in, Site::mlp_out})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown placement site '" + std::string(s) +
                    "' (expected MHSA-in|MHSA-out|MLP-in|MLP-out)");
}

struct PlacementConfig {
  Site query_from = Site::mlp_in;
  Site add_to = Site::mlp_out;

  bool operator==(const PlacementConfig&) const = default;
  std::string name() const {
    return std::string(to_string(query_from)) + "->" + std::string(to_string(add_to));
  }
};

// The six legal (query-from, add-to) pairs.
inline constexpr std::array<PlacementConfig, 6> kPlacements = {{
    {Site::mhsa_in, Site::mhsa_in},
    {Site::mhsa_in, Site::mhsa_out},
    {Site::mhsa_out, Site::mhsa_out},
    {Site::mlp_in, Site::mlp_in},
    {Site::mlp_in, Site::mlp_out},
    {Site::mlp_out, Site::mlp_out},
}};

inline void validate_placement(const PlacementConfig& p) {
  for (const auto& legal : kPlacements)
    if (legal == p) return;
  throw ConfigError("illegal placement " + p.name());
}

// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t n_blocks = 2;
  std::size_t d = 64;
  std::size_t d_vis = 32;
  std::size_t rank = 8;
  std::size_t vocab_size = 42;
  std::size_t max_seq_len = 8;
  PlacementConfig placement;
  FusionHyper fusion;
  std::vector<std::size_t> scales{1, 2};
  PoolKind pool = PoolKind::avg;
  std::uint64_t seed = 0;

  std::size_t visual_rows() const { return prompt_rows(scales); }

  void validate() const {
    for (auto [name, v] : {std::pair{"n_blocks", n_blocks}, {"d", d}, {"d_vis", d_vis},
                           {"rank", rank}, {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}}) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    }
    validate_placement(placement);
    validate_scales(scales);
    check_gamma(fusion.gamma);
    if (!(fusion.pos_init_std >= 0.0) || !std::isfinite(fusion.pos_init_std)) {
      throw ConfigError("pos_init_std must be a finite non-negative number");
    }
  }
};

struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;  // d x d
  Tensor ln2_gain, ln2_bias;
  Tensor w_up;                // d x 4d
  Tensor w_down;              // 4d x d
};

// Frozen host language model. Randomly initialized from the config seed and
// never updated.
struct BaseWeights {
  Tensor tok_embed;  // V x d
  Tensor pos_embed;  // max_seq_len x d
  std::vector<BlockWeights> blocks;
  Tensor lnf_gain, lnf_bias;
  Tensor unembed;    // d x V

  bool operator==(const BaseWeights& o) const {
    auto same_block = [](const BlockWeights& a, const BlockWeights& b) {
      return a.ln1_gain == b.ln1_gain && a.ln1_bias == b.ln1_bias && a.w_q == b.w_q &&
             a.w_k == b.w_k && a.w_v == b.w_v && a.w_o == b.w_o && a.ln2_gain == b.ln2_gain &&
             a.ln2_bias == b.ln2_bias && a.w_up == b.w_up && a.w_down == b.w_down;
    };
    if (blocks.size() != o.blocks.size()) return false;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (!same_block(blocks[i], o.blocks[i])) return false;
    return tok_embed == o.tok_embed && pos_embed == o.pos_embed && lnf_gain == o.lnf_gain &&
           lnf_bias == o.lnf_bias && unembed == o.unembed;
  }

  static BaseWeights init(const ModelConfig& c, Rng& rng) {
    const std::size_t d = c.d, h = 4 * c.d;
    const Real sd = 1.0 / std::sqrt(static_cast<Real>(d));
    const Real sh = 1.0 / std::sqrt(static_cast<Real>(h));
    BaseWeights w;
    w.tok_embed = rng.normal_tensor({c.vocab_size, d});
    w.pos_embed = rng.normal_tensor({c.max_seq_len, d}, 0.5);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      BlockWeights bw;
      bw.ln1_gain = Tensor({d}, 1.0);
      bw.ln1_bias = Tensor({d}, 0.0);
      bw.w_q = rng.normal_tensor({d, d}, sd);
      bw.w_k = rng.normal_tensor({d, d}, sd);
      bw.w_v = rng.normal_tensor({d, d}, sd);
      bw.w_o = rng.normal_tensor({d, d}, sd);
      bw.ln2_gain = Tensor({d}, 1.0);
      bw.ln2_bias = Tensor({d}, 0.0);
      bw.w_up = rng.normal_tensor({d, h}, sd);
      bw.w_down = rng.normal_tensor({h, d}, sh);
      w.blocks.push_back(std::move(bw));
    }
    w.lnf_gain = Tensor({d}, 1.0);
    w.lnf_bias = Tensor({d}, 0.0);
    w.unembed = rng.normal_tensor({d, c.vocab_size}, sd);
    return w;
  }
};

// ---------------------------------------------------------------------------
// Row-wise layer norm

inline constexpr Real kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor xhat;
  std::vector<Real> rstd;
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         LayerNormCache* cache) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor y({rows, d});
  Tensor xhat({rows, d});
  std::vector<Real> rstd(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    auto xr = x.row(i);
    Real mean = 0.0;
    for (Real v : xr) mean += v;
    mean /= static_cast<Real>(d);
    Real var = 0.0;
    for (Real v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<Real>(d);
    rstd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xr[j] - mean) * rstd[i];
      y(i, j) = xhat(i, j) * gain[j] + bias[j];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return y;
}

inline Tensor layer_norm_backward(const LayerNormCache& c, const Tensor& gain, const Tensor& dy) {
  const std::size_t rows = dy.dim(0), d = dy.dim(1);
  Tensor dx({rows, d});
  std::vector<Real> dxhat(d);
  for (std::size_t i = 0; i < rows; ++i) {
    Real m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dy(i, j) * gain[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * c.xhat(i, j);
    }
    m1 /= static_cast<Real>(d);
    m2 /= static_cast<Real>(d);
    for (std::size_t j = 0; j < d; ++j) dx(i, j) = c.rstd[i] * (dxhat[j] - m1 - c.xhat(i, j) * m2);
  }
  return dx;
}

// ---------------------------------------------------------------------------

struct BlockCache {
  Tensor x;
  LayerNormCache ln1, ln2;
  Tensor attn_in;  // normalized input actually fed to attention
  Tensor q, k, v, probs, ctx;
  Tensor mlp_in;   // normalized input actually fed to the MLP
  Tensor up;       // pre-activation of the MLP hidden layer
  Tensor query;    // fusion query (value at query_from)
  XAttnCache fusion;
  bool fused = false;
};

struct ForwardPass {
  std::size_t tokens = 0;
  Tensor cls_raw;      // 1 x d'
  Tensor cls_proj;     // cls_raw A_cls, 1 x r
  Tensor visual_raw;   // N x d'
  Tensor visual_proj;  // visual_raw A_feat, N x r
  Tensor memory;       // beta X_v + E
  std::vector<BlockCache> blocks;
  LayerNormCache lnf;
  Tensor logits;       // T x V; row t predicts token t + 1
  std::vector<DropDecision> decisions;  // one per fused block
};

struct FusionParamGrads {
  Tensor a_feat, b_feat, a_cls, b_cls, pos_embed;

  static FusionParamGrads zeros_like(const FusionParams& p) {
    return {Tensor::zeros(p.a_feat.shape()), Tensor::zeros(p.b_feat.shape()),
            Tensor::zeros(p.a_cls.shape()), Tensor::zeros(p.b_cls.shape()),
            Tensor::zeros(p.pos_embed.shape())};
  }
  void accumulate(const FusionParamGrads& o, Real s = 1.0) {
    axpy(a_feat, s, o.a_feat);
    axpy(b_feat, s, o.b_feat);
    axpy(a_cls, s, o.a_cls);
    axpy(b_cls, s, o.b_cls);
    axpy(pos_embed, s, o.pos_embed);
  }
};

class DecoderModel {
 public:
  explicit DecoderModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng base_rng(derive_seed(cfg_.seed, 1));
    base_ = BaseWeights::init(cfg_, base_rng);
    Rng fusion_rng(derive_seed(cfg_.seed, 2));
    fusion_ = FusionParams::init(cfg_.d_vis, cfg_.d, cfg_.rank, cfg_.visual_rows(), cfg_.fusion,
                                 fusion_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const BaseWeights& base() const { return base_; }
  const FusionParams& fusion() const { return fusion_; }
  FusionParams& fusion() { return fusion_; }

  // tokens: T ids. visual_raw: N x d' prompt rows. cls_raw: 1 x d'.
  // With fused == false the model is the frozen text-plus-cls baseline.
  ForwardPass forward(std::span<const int> tokens, const Tensor& visual_raw, const Tensor& cls_raw,
                      bool fused = true) const {
    const std::size_t T = tokens.size(), d = cfg_.d;
    if (T + 1 > cfg_.max_seq_len) {
      throw ConfigError("sequence of " + std::to_string(T) + " tokens plus [cls] exceeds max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
    }
    if (visual_raw.shape() != Shape{fusion_.rows(), cfg_.d_vis}) {
      throw ShapeError("visual prompt must be " + shape_str({fusion_.rows(), cfg_.d_vis}) +
                       ", got " + shape_str(visual_raw.shape()));
    }
    if (cls_raw.shape() != Shape{1, cfg_.d_vis}) {
      throw ShapeError("cls feature must be " + shape_str({1, cfg_.d_vis}));
    }
    ForwardPass fp;
    fp.tokens = T;
    fp.cls_raw = cls_raw;
    fp.cls_proj = matmul(cls_raw, fusion_.a_cls);
    fp.visual_raw = visual_raw;
    fp.visual_proj = matmul(visual_raw, fusion_.a_feat);
    fp.memory = fusion_memory(matmul(fp.visual_proj, fusion_.b_feat), fusion_.pos_embed,
                              fusion_.hyper.beta);

    Tensor text({T, d});
    for (std::size_t t = 0; t < T; ++t) {
      const auto id = static_cast<std::size_t>(tokens[t]);
      if (tokens[t] < 0 || id >= cfg_.vocab_size) throw ConfigError("token id out of range");
      for (std::size_t j = 0; j < d; ++j) text(t, j) = base_.tok_embed(id, j);
    }
    Tensor x = attach_cls(text, matmul(fp.cls_proj, fusion_.b_cls));
    for (std::size_t t = 0; t <= T; ++t)
      for (std::size_t j = 0; j < d; ++j) x(t, j) += base_.pos_embed(t, j);

    fp.blocks.resize(cfg_.n_blocks);
    for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
      x = block_forward(x, base_.blocks[b], fp.memory, fused, fp.blocks[b]);
      if (fp.blocks[b].fused) fp.decisions.push_back(fp.blocks[b].fusion.decision);
    }
    const Tensor h = layer_norm(x, base_.lnf_gain, base_.lnf_bias, &fp.lnf);
    fp.logits = matmul(slice_rows(h, 1, T + 1), base_.unembed);
    return fp;
  }

  // Backpropagates dLoss/dlogits (T x V) to the trainable fusion tensors.
  FusionParamGrads backward(const ForwardPass& fp, const Tensor& grad_logits) const {
    if (fp.blocks.empty()) throw UsageError("backward called without a forward pass");
    const std::size_t T = fp.tokens, d = cfg_.d;
    require_same_shape(grad_logits, fp.logits, "backward");
    Tensor dh({T + 1, d});
    const Tensor dh_text = matmul_nt(grad_logits, base_.unembed);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) dh(t + 1, j) = dh_text(t, j);
    Tensor dx = layer_norm_backward(fp.lnf, base_.lnf_gain, dh);

    Tensor dmemory = Tensor::zeros(fp.memory.shape());
    for (std::size_t b = cfg_.n_blocks; b-- > 0;) {
      dx = block_backward(dx, base_.blocks[b], fp.blocks[b], dmemory);
    }

    FusionParamGrads g;
    // cls row: x0 = (cls_raw A_cls) B_cls + pos
    const Tensor dcls = slice_rows(dx, 0, 1);
    g.b_cls = matmul_tn(fp.cls_proj, dcls);
    g.a_cls = matmul_tn(fp.cls_raw, matmul_nt(dcls, fusion_.b_cls));
    // memory = beta (visual_raw A_feat) B_feat + E
    const Tensor dembedded = scale(dmemory, fusion_.hyper.beta);
    g.b_feat = matmul_tn(fp.visual_proj, dembedded);
    g.a_feat = matmul_tn(fp.visual_raw, matmul_nt(dembedded, fusion_.b_feat));
    g.pos_embed = std::move(dmemory);
    return g;
  }

  // Convenience: logits only.
  Tensor logits(std::span<const int> tokens, const Tensor& visual_raw, const Tensor& cls_raw,
                bool fused = true) const {
    return forward(tokens, visual_raw, cls_raw, fused).logits;
  }

 private:
  // Applies the fusion hook at `site` to the value `v` (in place).
  void hook(Site site, Tensor& v, const Tensor& memory, bool fused, BlockCache& c) const {
    if (!fused) return;
    const auto& pl = cfg_.placement;
    if (site == pl.query_from) c.query = v;
    if (site == pl.add_to) {
      auto r = param_free_xattn_cached(c.query, memory, fusion_.hyper.phi, fusion_.hyper.gamma);
      axpy(v, fusion_.hyper.alpha, r.out);
      c.fusion = std::move(r.cache);
      c.fused = true;
    }
  }

  // Reverse of hook(): g is the gradient of the post-hook value; returns the
  // gradient of the pre-hook value. Query gradients are parked until the
  // query site is reached (it is never after add_to).
  void unhook(Site site, Tensor& g, const BlockCache& c, Tensor& dmemory, Tensor& pending_query) const {
    if (!c.fused) return;
    const auto& pl = cfg_.placement;
    if (site == pl.add_to) {
      const XAttnGrads fg = param_free_xattn_backward(c.fusion, scale(g, fusion_.hyper.alpha));
      axpy(dmemory, 1.0, fg.memory);
      pending_query = fg.text;
    }
    if (site == pl.query_from) axpy(g, 1.0, pending_query);
  }

  Tensor block_forward(const Tensor& x, const BlockWeights& w, const Tensor& memory, bool fused,
                       BlockCache& c) const {
    const std::size_t T = x.dim(0);
    const Real inv_sqrt_d = 1.0 / std::sqrt(static_cast<Real>(cfg_.d));
    c.x = x;

    Tensor p0 = layer_norm(x, w.ln1_gain, w.ln1_bias, &c.ln1);
    hook(Site::mhsa_in, p0, memory, fused, c);
    c.attn_in = p0;
    c.q = matmul(p0, w.w_q);
    c.k = matmul(p0, w.w_k);
    c.v = matmul(p0, w.w_v);
    c.probs = scale(matmul_nt(c.q, c.k), inv_sqrt_d);
    for (std::size_t i = 0; i < T; ++i) {
      auto row = c.probs.row(i);
      softmax_inplace(row.subspan(0, i + 1));
      for (std::size_t j = i + 1; j < T; ++j) row[j] = 0.0;
    }
    c.ctx = matmul(c.probs, c.v);
    Tensor a = matmul(c.ctx, w.w_o);
    hook(Site::mhsa_out, a, memory, fused, c);
    Tensor xm = add(x, a);

    Tensor p1 = layer_norm(xm, w.ln2_gain, w.ln2_bias, &c.ln2);
    hook(Site::mlp_in, p1, memory, fused, c);
    c.mlp_in = p1;
    c.up = matmul(p1, w.w_up);
    Tensor m = matmul(activation(c.up, Activation::silu), w.w_down);
    hook(Site::mlp_out, m, memory, fused, c);
    return add(xm, m);
  }

  Tensor block_backward(const Tensor& dy, const BlockWeights& w, const BlockCache& c,
                        Tensor& dmemory) const {
    const std::size_t T = dy.dim(0);
    const Real inv_sqrt_d = 1.0 / std::sqrt(static_cast<Real>(cfg_.d));
    Tensor pending;

    Tensor dm = dy;
    unhook(Site::mlp_out, dm, c, dmemory, pending);
    Tensor dp1 = matmul_nt(activation_backward(c.up, Activation::silu, matmul_nt(dm, w.w_down)),
                           w.w_up);
    unhook(Site::mlp_in, dp1, c, dmemory, pending);
    Tensor dxm = add(dy, layer_norm_backward(c.ln2, w.ln2_gain, dp1));

    Tensor da = dxm;
    unhook(Site::mhsa_out, da, c, dmemory, pending);
    const Tensor dctx = matmul_nt(da, w.w_o);
    const Tensor dv = matmul_tn(c.probs, dctx);
    Tensor dscores = matmul_nt(dctx, c.v);
    for (std::size_t i = 0; i < T; ++i) {
      Real dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += dscores(i, j) * c.probs(i, j);
      for (std::size_t j = 0; j < T; ++j)
        dscores(i, j) = j <= i ? c.probs(i, j) * (dscores(i, j) - dot) * inv_sqrt_d : 0.0;
    }
    const Tensor dq = matmul(dscores, c.k);
    const Tensor dk = matmul_tn(dscores, c.q);
    Tensor dp0 = matmul_nt(dq, w.w_q);
    axpy(dp0, 1.0, matmul_nt(dk, w.w_k));
    axpy(dp0, 1.0, matmul_nt(dv, w.w_v));
    unhook(Site::mhsa_in, dp0, c, dmemory, pending);
    return add(dxm, layer_norm_backward(c.ln1, w.ln1_gain, dp0));
  }

  ModelConfig cfg_;
  BaseWeights base_;
  FusionParams fusion_;
};

// ---------------------------------------------------------------------------
// Loss over an answer span

struct LossResult {
  Real loss = 0.0;
  Tensor grad_logits;  // dLoss/dlogits
  std::size_t positions = 0;
  std::size_t correct = 0;  // greedy argmax matches
};

// Mean cross-entropy of tokens[answer_start..T) predicted from the preceding
// row of logits. An empty span contributes zero loss.
inline LossResult answer_loss(const Tensor& logits, std::span<const int> tokens,
                              std::size_t answer_start) {
  const std::size_t T = tokens.size(), V = logits.dim(1);
  LossResult r;
  r.grad_logits = Tensor::zeros(logits.shape());
  if (answer_start == 0) throw ConfigError("answer span must start after the first token");
  if (answer_start >= T) return r;
  if (logits.dim(0) + 1 < T) {
    throw ShapeError("answer_loss needs at least " + std::to_string(T - 1) + " logit rows");
  }
  r.positions = T - answer_start;
  const Real w = 1.0 / static_cast<Real>(r.positions);
  std::vector<Real> p(V);
  for (std::size_t a = answer_start; a < T; ++a) {
    const auto row = logits.row(a - 1);
    std::copy(row.begin(), row.end(), p.begin());
    softmax_inplace(p);
    const auto target = static_cast<std::size_t>(tokens[a]);
    r.loss -= w * std::log(std::max(p[target], std::numeric_limits<Real>::min()));
    for (std::size_t j = 0; j < V; ++j) r.grad_logits(a - 1, j) = w * (p[j] - (j == target ? 1.0 : 0.0));
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == target) ++r.correct;
  }
  return r;
}

}  // namespace ademvl

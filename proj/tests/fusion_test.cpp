#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "ademvl/fusion.hpp"
#include "ademvl/gradcheck.hpp"
#include "ademvl/rng.hpp"

namespace ademvl {
namespace {

Real scalar_silu(Real x) { return x / (1.0 + std::exp(-x)); }

// Step-by-step scalar version of the parameter-free kernel with no masking.
Tensor brute_param_free(const Tensor& q, const Tensor& kv, Real (*phi)(Real)) {
  const std::size_t L = q.dim(0), N = kv.dim(0), d = q.dim(1);
  Tensor out({L, d});
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      Real s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += phi(q(i, c)) * phi(kv(j, c));
      for (std::size_t c = 0; c < d; ++c) out(i, c) += s * kv(j, c);
    }
  return out;
}

// Step-by-step scalar version of softmax(Q K^T / sqrt(d_k)) V W_o^T.
Tensor brute_standard(const Tensor& xl, const Tensor& xv, const StandardXAttnParams& p) {
  const std::size_t L = xl.dim(0), N = xv.dim(0), d = xl.dim(1);
  auto project = [&](const Tensor& x, const Tensor& w, std::size_t r) {
    std::vector<Real> v(d, 0.0);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t k = 0; k < d; ++k) v[c] += x(r, k) * w(k, c);
    return v;
  };
  Tensor out({L, d});
  for (std::size_t i = 0; i < L; ++i) {
    const auto q = project(xl, p.w_q, i);
    std::vector<Real> logits(N);
    Real mx = -1e300;
    for (std::size_t j = 0; j < N; ++j) {
      const auto k = project(xv, p.w_k, j);
      Real s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q[c] * k[c];
      logits[j] = s / std::sqrt(static_cast<Real>(p.d_k));
      mx = std::max(mx, logits[j]);
    }
    Real z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    std::vector<Real> mixed(d, 0.0);
    for (std::size_t j = 0; j < N; ++j) {
      const auto v = project(xv, p.w_v, j);
      for (std::size_t c = 0; c < d; ++c) mixed[c] += logits[j] / z * v[c];
    }
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t k = 0; k < d; ++k) out(i, c) += mixed[k] * p.w_o(c, k);
  }
  return out;
}

// Independent reference for the drop set: full sort by (value, index).
std::vector<std::size_t> smallest_k(std::span<const Real> row, std::size_t k) {
  std::vector<std::pair<Real, std::size_t>> v;
  for (std::size_t j = 0; j < row.size(); ++j) v.emplace_back(row[j], j);
  std::sort(v.begin(), v.end());
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < k; ++t) out.push_back(v[t].second);
  std::sort(out.begin(), out.end());
  return out;
}

TEST(StandardXAttn, SingleKeyIgnoresScores) {
  Rng rng(1);
  const auto p = StandardXAttnParams::random(4, rng);
  const Tensor xl = rng.normal_tensor({1, 4}), xv = rng.normal_tensor({1, 4});
  const Tensor expected = matmul_nt(matmul(xv, p.w_v), p.w_o);
  EXPECT_LT(max_abs_diff(standard_xattn(xl, xv, p), expected), 1e-14);
}

TEST(StandardXAttn, EqualLogitsGiveUniformMix) {
  StandardXAttnParams p{Tensor::identity(2), Tensor::identity(2), Tensor::identity(2),
                        Tensor::identity(2), 2};
  const Tensor out = standard_xattn(Tensor::matrix({{0, 0}}), Tensor::matrix({{1, 0}, {0, 1}}), p);
  EXPECT_EQ(out, Tensor::matrix({{0.5, 0.5}}));
}

TEST(StandardXAttn, MatchesScalarOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto p = StandardXAttnParams::random(4, rng);
    const Tensor xl = rng.normal_tensor({3, 4}), xv = rng.normal_tensor({5, 4});
    EXPECT_LT(max_abs_diff(standard_xattn(xl, xv, p), brute_standard(xl, xv, p)), 1e-12);
  }
}

TEST(StandardXAttn, ShapeErrors) {
  Rng rng(2);
  const auto p = StandardXAttnParams::random(4, rng);
  EXPECT_THROW(standard_xattn(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), p), ShapeError);
  EXPECT_THROW(standard_xattn(Tensor::zeros({2, 4}), Tensor::zeros({2, 3}), p), ShapeError);
}

TEST(ParamFree, HandExample) {
  const auto r = param_free_xattn(Tensor::matrix({{1, -1}}), Tensor::matrix({{2, 0}, {0, 1}}),
                                  Activation::identity, 0.0);
  EXPECT_EQ(r.scores, Tensor::matrix({{2, -1}}));
  EXPECT_EQ(r.out, Tensor::matrix({{4, -1}}));
}

TEST(ParamFree, ZeroMemoryGivesZero) {
  Rng rng(3);
  const auto r = param_free_xattn(rng.normal_tensor({3, 5}), Tensor::zeros({4, 5}), Activation::silu, 0.2);
  EXPECT_EQ(r.scores, Tensor::zeros({3, 4}));
  EXPECT_EQ(r.out, Tensor::zeros({3, 5}));
}

TEST(ParamFree, SiluMatchesScalarOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor q = rng.normal_tensor({2, 3}), kv = rng.normal_tensor({4, 3});
    const auto r = param_free_xattn(q, kv, Activation::silu, 0.0);
    EXPECT_LT(max_abs_diff(r.out, brute_param_free(q, kv, scalar_silu)), 1e-12);
  }
}

TEST(ParamFree, IdentityEqualsPlainProducts) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    const Tensor q = rng.normal_tensor({16, 8}), kv = rng.normal_tensor({32, 8});
    const auto r = param_free_xattn(q, kv, Activation::identity, 0.0);
    EXPECT_LT(max_abs_diff(r.out, matmul(matmul(q, transpose(kv)), kv)), 1e-12);
  }
}

TEST(ParamFree, Errors) {
  EXPECT_THROW(param_free_xattn(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Activation::silu, 0.0),
               ShapeError);
  EXPECT_THROW(param_free_xattn(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Activation::silu, 1.0),
               ConfigError);
}

TEST(AdaptiveMask, DropsSmallest) {
  const Tensor s = Tensor::matrix({{0.5, 0.1, 0.3, 0.2, 0.9}});
  const auto d = adaptive_mask(s, 0.2);
  EXPECT_EQ(d.dropped, std::vector<std::size_t>{1});
  EXPECT_EQ(apply_mask(s, d), Tensor::matrix({{0.5, 0, 0.3, 0.2, 0.9}}));
}

TEST(AdaptiveMask, GammaZeroKeepsAll) {
  const Tensor s = Tensor::matrix({{0.5, 0.1, 0.3}, {-1, -2, -3}});
  const auto d = adaptive_mask(s, 0.0);
  EXPECT_EQ(d.mask, Tensor({2, 3}, 1.0));
  EXPECT_EQ(apply_mask(s, d), s);
}

TEST(AdaptiveMask, TiesDropLowerIndexFirst) {
  const Tensor s = Tensor::matrix({{0.2, 0.2, 0.5, 0.6, 0.7}});
  EXPECT_EQ(apply_mask(s, adaptive_mask(s, 0.4)), Tensor::matrix({{0, 0, 0.5, 0.6, 0.7}}));
  const Tensor t = Tensor::matrix({{0.3, 0.2, 0.2, 0.2}});
  EXPECT_EQ(adaptive_mask(t, 0.5).mask, Tensor::matrix({{1, 0, 0, 1}}));
}

TEST(AdaptiveMask, CardinalityAndSelectionMatchFullSort) {
  Rng rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t L = 1 + rng.below(12), N = 1 + rng.below(40);
    Tensor s = rng.normal_tensor({L, N});
    // Quantize a third of the trials so ties actually occur.
    if (trial % 3 == 0)
      for (auto& v : s.data()) v = std::round(v * 2.0);
    for (Real gamma : {0.0, 0.1, 0.2, 0.37, 0.5 - 1e-9, 0.9}) {
      const auto d = adaptive_mask(s, gamma);
      const std::size_t k = drop_count(gamma, N);
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<std::size_t> zeros;
        for (std::size_t j = 0; j < N; ++j)
          if (!d.kept(i, j)) zeros.push_back(j);
        EXPECT_EQ(zeros.size(), k);
        EXPECT_EQ(zeros, smallest_k(s.row(i), k));
      }
    }
  }
}

TEST(AdaptiveMask, RaisingGammaNeverAddsNonzeros) {
  Rng rng(10);
  const Tensor s = rng.normal_tensor({6, 50});
  std::vector<std::size_t> prev(6, 51);
  for (int g = 0; g < 20; ++g) {
    const Tensor m = apply_mask(s, adaptive_mask(s, g * 0.05));
    for (std::size_t i = 0; i < 6; ++i) {
      std::size_t nz = 0;
      for (Real v : m.row(i)) nz += v != 0.0;
      EXPECT_LE(nz, prev[i]);
      prev[i] = nz;
    }
  }
}

TEST(EmbedVisual, ZeroBGivesZero) {
  Rng rng(4);
  EXPECT_EQ(embed_visual(rng.normal_tensor({5, 3}), rng.normal_tensor({3, 2}), Tensor::zeros({2, 4})),
            Tensor::zeros({5, 4}));
}

TEST(EmbedVisual, HandExample) {
  const Tensor r = embed_visual(Tensor::matrix({{1, 2}}), Tensor::identity(2),
                                Tensor::matrix({{1, 0, 0}, {0, 1, 0}}));
  EXPECT_EQ(r, Tensor::matrix({{1, 2, 0}}));
}

TEST(EmbedVisual, AssociativityOracle) {
  Rng rng(5);
  const Tensor x = rng.normal_tensor({7, 6}), a = rng.normal_tensor({6, 3}), b = rng.normal_tensor({3, 5});
  EXPECT_LT(max_abs_diff(embed_visual(x, a, b), matmul(x, matmul(a, b))), 1e-12);
  EXPECT_THROW(embed_visual(x, b, a), ShapeError);
}

FuseGradInstance seeded(std::uint64_t seed, Real gamma = 0.2) {
  return random_fuse_instance(seed, gamma, Activation::silu);
}

TEST(Fuse, ZeroVisualAndZeroEGiveZero) {
  auto inst = seeded(1);
  inst.params.pos_embed = Tensor::zeros(inst.params.pos_embed.shape());
  const Tensor zero_raw = Tensor::zeros(inst.visual_raw.shape());
  EXPECT_EQ(fuse(inst.text, zero_raw, inst.params).delta, Tensor::zeros(inst.text.shape()));
}

TEST(Fuse, AlphaZeroGivesZero) {
  auto inst = seeded(2);
  inst.params.hyper.alpha = 0.0;
  EXPECT_EQ(fuse(inst.text, inst.visual_raw, inst.params).delta, Tensor::zeros(inst.text.shape()));
}

TEST(Fuse, InitializationIsNull) {
  Rng rng(3);
  const auto p = FusionParams::init(6, 5, 3, 9, FusionHyper{}, rng);
  const Tensor delta = fuse(rng.normal_tensor({4, 5}), rng.normal_tensor({9, 6}), p).delta;
  EXPECT_EQ(delta, Tensor::zeros({4, 5}));
}

TEST(Fuse, MatchesScalarPipelineAtDefaultHyperparameters) {
  auto inst = seeded(4);
  inst.params.hyper = FusionHyper{0.1, 0.01, 0.2, Activation::silu};
  const auto& p = inst.params;
  const std::size_t L = inst.text.dim(0), N = inst.visual_raw.dim(0), d = inst.text.dim(1);
  const std::size_t dv = inst.visual_raw.dim(1), r = p.a_feat.dim(1);

  Tensor mem({N, d});
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t c = 0; c < d; ++c) {
      Real xv = 0.0;
      for (std::size_t t = 0; t < r; ++t) {
        Real proj = 0.0;
        for (std::size_t k = 0; k < dv; ++k) proj += inst.visual_raw(j, k) * p.a_feat(k, t);
        xv += proj * p.b_feat(t, c);
      }
      mem(j, c) = 0.01 * xv + p.pos_embed(j, c);
    }
  Tensor expected({L, d});
  const std::size_t k = static_cast<std::size_t>(std::floor(0.2 * static_cast<Real>(N)));
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<Real> s(N, 0.0);
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t c = 0; c < d; ++c) s[j] += scalar_silu(inst.text(i, c)) * scalar_silu(mem(j, c));
    for (std::size_t j : smallest_k(s, k)) s[j] = 0.0;
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t c = 0; c < d; ++c) expected(i, c) += 0.1 * s[j] * mem(j, c);
  }
  EXPECT_LT(max_abs_diff(fuse(inst.text, inst.visual_raw, p).delta, expected), 1e-12);
}

TEST(Fuse, MaskingIsZeroing) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = seeded(seed, 0.4);
    const auto& p = inst.params;
    const auto r = fuse(inst.text, inst.visual_raw, p);
    const Tensor mem = fusion_memory(embed_visual(inst.visual_raw, p.a_feat, p.b_feat), p.pos_embed,
                                     p.hyper.beta);
    Tensor s = r.scores;
    for (std::size_t i = 0; i < s.dim(0); ++i)
      for (std::size_t j = 0; j < s.dim(1); ++j)
        if (!r.decision.kept(i, j)) s(i, j) = 0.0;
    EXPECT_EQ(r.delta, scale(matmul(s, mem), p.hyper.alpha));
  }
}

TEST(Fuse, AlphaIsAnOuterScalar) {
  auto inst = seeded(6);
  const Tensor once = fuse(inst.text, inst.visual_raw, inst.params).delta;
  inst.params.hyper.alpha *= 2.0;
  EXPECT_EQ(fuse(inst.text, inst.visual_raw, inst.params).delta, scale(once, 2.0));
}

TEST(Fuse, RowCountMismatch) {
  const auto inst = seeded(7);
  const Tensor wrong = Tensor::zeros({inst.visual_raw.dim(0) + 1, inst.visual_raw.dim(1)});
  EXPECT_THROW(fuse(inst.text, wrong, inst.params), ShapeError);
}

TEST(FuseBackward, ZeroUpstreamGivesZeroGradients) {
  const auto inst = seeded(8);
  const auto fwd = fuse(inst.text, inst.visual_raw, inst.params);
  const auto g = fuse_backward(Tensor::zeros(inst.text.shape()), fwd.cache, inst.params);
  EXPECT_EQ(max_abs(g.a_feat), 0.0);
  EXPECT_EQ(max_abs(g.b_feat), 0.0);
  EXPECT_EQ(max_abs(g.pos_embed), 0.0);
  EXPECT_EQ(max_abs(g.text), 0.0);
}

TEST(FuseBackward, MissingCacheIsUsageError) {
  const auto inst = seeded(9);
  EXPECT_THROW(fuse_backward(inst.upstream, FuseCache{}, inst.params), UsageError);
}

TEST(FuseBackward, IdentityUnitInstanceMatchesFiniteDifferences) {
  FuseGradInstance inst;
  inst.text = Tensor::matrix({{0.7, -0.4}});
  inst.visual_raw = Tensor::matrix({{1.0, 0.5}, {-0.3, 0.8}});
  inst.upstream = Tensor::matrix({{1.0, -2.0}});
  inst.params.a_feat = Tensor::identity(2);
  inst.params.b_feat = Tensor::matrix({{0.9, 0.1}, {-0.2, 1.1}});
  inst.params.a_cls = Tensor::identity(2);
  inst.params.b_cls = Tensor::zeros({2, 2});
  inst.params.pos_embed = Tensor::matrix({{0.3, 0.0}, {0.0, -0.6}});
  inst.params.hyper = {1.0, 1.0, 0.0, Activation::identity};
  const auto rep = check_fuse_gradients(inst);
  EXPECT_LE(rep.worst(), 1e-6);

  // With phi = identity and gamma = 0 the text gradient is upstream M^T M.
  const auto fwd = fuse(inst.text, inst.visual_raw, inst.params);
  const Tensor m = fwd.cache.attn.memory;
  const auto g = fuse_backward(inst.upstream, fwd.cache, inst.params);
  EXPECT_LT(max_abs_diff(g.text, matmul(inst.upstream, matmul_tn(m, m))), 1e-14);
}

class FuseGradientCheck : public ::testing::TestWithParam<std::tuple<Activation, Real>> {};

TEST_P(FuseGradientCheck, AnalyticMatchesCentralDifferences) {
  const auto [phi, gamma] = GetParam();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto rep = check_fuse_gradients(random_fuse_instance(seed, gamma, phi));
    EXPECT_LE(rep.worst(), 1e-4) << "seed " << seed << " A " << rep.a_feat << " B " << rep.b_feat
                                 << " E " << rep.pos_embed << " X " << rep.text;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllProjections, FuseGradientCheck,
    ::testing::Combine(::testing::ValuesIn(kAllActivations), ::testing::Values(0.0, 0.2)),
    [](const auto& info) {
      std::string name(to_string(std::get<0>(info.param)));
      std::replace(name.begin(), name.end(), '-', '_');
      return name + (std::get<1>(info.param) == 0.0 ? "_gamma0" : "_gamma02");
    });

TEST(FuseBackward, AlwaysDroppedRowHasZeroEGradient) {
  // Keys: row 0 points along the positive text direction, row 1 strongly
  // against it, so with identity phi and one drop per row, key 1 is dropped
  // for every query.
  FuseGradInstance inst;
  inst.text = Tensor::matrix({{1.0, 0.5}, {0.8, 0.2}, {0.6, 0.9}});
  inst.visual_raw = Tensor::zeros({2, 2});
  inst.upstream = Tensor::matrix({{1.0, -1.0}, {0.5, 2.0}, {-1.5, 0.3}});
  inst.params.a_feat = Tensor::identity(2);
  inst.params.b_feat = Tensor::zeros({2, 2});
  inst.params.a_cls = Tensor::identity(2);
  inst.params.b_cls = Tensor::zeros({2, 2});
  inst.params.pos_embed = Tensor::matrix({{1.0, 1.0}, {-2.0, -2.0}});
  inst.params.hyper = {1.0, 1.0, 0.5, Activation::identity};

  const auto fwd = fuse(inst.text, inst.visual_raw, inst.params);
  for (std::size_t i = 0; i < 3; ++i) ASSERT_FALSE(fwd.decision.kept(i, 1));
  const auto g = fuse_backward(inst.upstream, fwd.cache, inst.params);
  EXPECT_EQ(g.pos_embed(1, 0), 0.0);
  EXPECT_EQ(g.pos_embed(1, 1), 0.0);

  auto loss = [&] { return frobenius_dot(inst.upstream, fuse(inst.text, inst.visual_raw, inst.params).delta); };
  const Tensor fd = finite_difference(loss, inst.params.pos_embed);
  EXPECT_EQ(fd(1, 0), 0.0);
  EXPECT_EQ(fd(1, 1), 0.0);
  EXPECT_LE(max_relative_error(g.pos_embed, fd), 1e-6);
}

}  // namespace
}  // namespace ademvl

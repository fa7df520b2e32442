#include <gtest/gtest.h>

#include <numeric>

#include "ademvl/decoder.hpp"
#include "ademvl/gradcheck.hpp"
#include "ademvl/task.hpp"
#include "ademvl/train.hpp"

namespace ademvl {
namespace {

ModelConfig small_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.n_blocks = 2;
  c.d = 8;
  c.d_vis = 6;
  c.rank = 3;
  c.scales = {4};
  c.seed = seed;
  return c;
}

struct Inputs {
  std::vector<int> tokens;
  Tensor visual, cls;
};

Inputs random_inputs(const ModelConfig& c, std::uint64_t seed, std::size_t T = 4) {
  Rng rng(seed);
  Inputs in;
  for (std::size_t t = 0; t < T; ++t) in.tokens.push_back(static_cast<int>(rng.below(c.vocab_size)));
  in.visual = rng.normal_tensor({c.visual_rows(), c.d_vis});
  in.cls = rng.normal_tensor({1, c.d_vis});
  return in;
}

// Gives every fusion tensor nonzero values so all gradient paths are live.
void randomize_fusion(DecoderModel& m, std::uint64_t seed, Real std = 0.5) {
  Rng rng(seed);
  auto& p = m.fusion();
  p.a_feat = rng.normal_tensor(p.a_feat.shape(), std);
  p.b_feat = rng.normal_tensor(p.b_feat.shape(), std);
  p.a_cls = rng.normal_tensor(p.a_cls.shape(), std);
  p.b_cls = rng.normal_tensor(p.b_cls.shape(), std);
  p.pos_embed = rng.normal_tensor(p.pos_embed.shape(), std);
}

TEST(Decoder, InitializationIsBitExactBaseline) {
  const DecoderModel m(ModelConfig{});
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto in = random_inputs(m.config(), s);
    EXPECT_EQ(m.logits(in.tokens, in.visual, in.cls, true), m.logits(in.tokens, in.visual, in.cls, false));
  }
}

TEST(Decoder, AlphaZeroIsBitExactBaseline) {
  auto cfg = small_config();
  cfg.fusion.alpha = 0.0;
  DecoderModel m(cfg);
  randomize_fusion(m, 1);
  // B_cls still feeds the [cls] row, so compare against a model with the
  // same cls pair and no fusion.
  const auto in = random_inputs(cfg, 2);
  EXPECT_EQ(m.logits(in.tokens, in.visual, in.cls, true), m.logits(in.tokens, in.visual, in.cls, false));
}

TEST(Decoder, PlacementsAreNotAliased) {
  auto a_cfg = small_config(3), b_cfg = small_config(3);
  b_cfg.placement = {Site::mhsa_in, Site::mhsa_out};
  DecoderModel a(a_cfg), b(b_cfg);
  randomize_fusion(a, 4);
  randomize_fusion(b, 4);
  const auto in = random_inputs(a_cfg, 5);
  const Real gap = max_abs_diff(a.logits(in.tokens, in.visual, in.cls), b.logits(in.tokens, in.visual, in.cls));
  EXPECT_GT(gap, 1e-6);
}

TEST(Decoder, EveryPlacementChangesTheOutput) {
  for (const auto& pl : kPlacements) {
    auto cfg = small_config(6);
    cfg.placement = pl;
    DecoderModel m(cfg);
    randomize_fusion(m, 7);
    const auto in = random_inputs(cfg, 8);
    const Real gap = max_abs_diff(m.logits(in.tokens, in.visual, in.cls, true),
                                  m.logits(in.tokens, in.visual, in.cls, false));
    EXPECT_GT(gap, 1e-6) << pl.name();
  }
}

TEST(Decoder, CausalInTextTokens) {
  for (const auto& pl : kPlacements) {
    auto cfg = small_config(9);
    cfg.placement = pl;
    DecoderModel m(cfg);
    randomize_fusion(m, 10);
    auto in = random_inputs(cfg, 11, 6);
    const Tensor before = m.logits(in.tokens, in.visual, in.cls);
    for (std::size_t cut = 1; cut < in.tokens.size(); ++cut) {
      auto changed = in.tokens;
      for (std::size_t t = cut; t < changed.size(); ++t) changed[t] = (changed[t] + 7) % 42;
      const Tensor after = m.logits(changed, in.visual, in.cls);
      for (std::size_t t = 0; t < cut; ++t)
        for (std::size_t v = 0; v < cfg.vocab_size; ++v)
          ASSERT_EQ(after(t, v), before(t, v)) << pl.name() << " cut " << cut << " row " << t;
    }
  }
}

TEST(Decoder, InputErrors) {
  const DecoderModel m(small_config());
  const auto in = random_inputs(m.config(), 1);
  const std::vector<int> overlong(8, 1);
  EXPECT_THROW(m.forward(overlong, in.visual, in.cls), ConfigError);
  EXPECT_THROW(m.forward(in.tokens, Tensor::zeros({3, 6}), in.cls), ShapeError);
  const std::vector<int> bad{0, 99};
  EXPECT_THROW(m.forward(bad, in.visual, in.cls), ConfigError);
  auto cfg = small_config();
  cfg.placement = {Site::mlp_out, Site::mhsa_in};
  EXPECT_THROW(DecoderModel{cfg}, ConfigError);
}

TEST(Decoder, ParseSites) {
  EXPECT_EQ(parse_site("MLP-in"), Site::mlp_in);
  EXPECT_EQ(to_string(Site::mhsa_out), "MHSA-out");
  EXPECT_THROW(parse_site("mlp"), ConfigError);
}

class ModelGradientCheck
    : public ::testing::TestWithParam<std::tuple<PlacementConfig, Activation>> {};

TEST_P(ModelGradientCheck, AllFusionTensorsMatchFiniteDifferences) {
  const auto [placement, phi] = GetParam();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto cfg = small_config(seed);
    cfg.placement = placement;
    cfg.fusion = {0.7, 0.8, 0.2, phi};
    DecoderModel m(cfg);
    randomize_fusion(m, 100 + seed);
    const auto in = random_inputs(cfg, 200 + seed, 5);
    Rng rng(300 + seed);
    const Tensor upstream = rng.normal_tensor({5, cfg.vocab_size});

    const auto g = m.backward(m.forward(in.tokens, in.visual, in.cls), upstream);
    auto loss = [&] { return frobenius_dot(upstream, m.logits(in.tokens, in.visual, in.cls)); };
    auto& p = m.fusion();
    // The summed loss is O(10), so central differences carry ~1e-10 of
    // rounding noise; the floor is tied to each tensor's gradient scale.
    auto err = [&](const Tensor& analytic, Tensor& param) {
      const Real floor = std::max(kRelErrorFloor, 1e-4 * max_abs(analytic));
      return max_relative_error(analytic, finite_difference(loss, param), floor);
    };
    const Real e_a = err(g.a_feat, p.a_feat);
    const Real e_b = err(g.b_feat, p.b_feat);
    const Real e_ac = err(g.a_cls, p.a_cls);
    const Real e_bc = err(g.b_cls, p.b_cls);
    const Real e_e = err(g.pos_embed, p.pos_embed);
    EXPECT_LE(std::max({e_a, e_b, e_ac, e_bc, e_e}), 1e-4)
        << placement.name() << " seed " << seed << ": A " << e_a << " B " << e_b << " Acls " << e_ac
        << " Bcls " << e_bc << " E " << e_e;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Placements, ModelGradientCheck,
    ::testing::Combine(::testing::ValuesIn(kPlacements),
                       ::testing::Values(Activation::silu, Activation::identity, Activation::softmax_rows)),
    [](const auto& info) {
      std::string name = std::get<0>(info.param).name() + "_" + std::string(to_string(std::get<1>(info.param)));
      for (char& ch : name)
        if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
      return name;
    });

TEST(AnswerLoss, EmptySpanIsZero) {
  const Tensor logits({3, 5}, 0.25);
  const std::vector<int> tokens{0, 1, 2};
  const auto r = answer_loss(logits, tokens, 3);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.positions, 0u);
  EXPECT_EQ(max_abs(r.grad_logits), 0.0);
}

TEST(AnswerLoss, UniformLogitsGiveLogV) {
  const Tensor logits({4, 42}, 0.0);
  const std::vector<int> tokens{0, 1, 17, 33, 35};
  const auto r = answer_loss(logits, tokens, 4);
  EXPECT_NEAR(r.loss, std::log(42.0), 1e-12);
  EXPECT_EQ(r.positions, 1u);
}

TEST(AnswerLoss, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  Tensor logits = rng.normal_tensor({4, 7});
  const std::vector<int> tokens{0, 3, 5, 1, 6};
  const auto r = answer_loss(logits, tokens, 2);
  auto f = [&] { return answer_loss(logits, tokens, 2).loss; };
  EXPECT_LE(max_relative_error(r.grad_logits, finite_difference(f, logits)), 1e-6);
}

TEST(Training, CosineSchedule) {
  EXPECT_EQ(cosine_lr(9e-3, 0, 2000), 9e-3);
  EXPECT_NEAR(cosine_lr(9e-3, 1000, 2000), 4.5e-3, 1e-15);
  EXPECT_EQ(cosine_lr(9e-3, 2000, 2000), 0.0);
}

TEST(Training, TrainableCountMatchesFormula) {
  const DecoderModel m(ModelConfig{});
  const auto& c = m.config();
  const std::size_t expected = 2 * (c.d_vis * c.rank + c.rank * c.d) + c.visual_rows() * c.d;
  EXPECT_EQ(m.fusion().trainable_count(), expected);
  EXPECT_EQ(expected, 22016u);
}

struct SmallRun {
  ModelConfig cfg;
  SyntheticEncoder enc;
  GridVqaDataset data;
};

SmallRun small_run(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.d_vis = 8;
  cfg.rank = 4;
  cfg.seed = seed;
  cfg.vocab_size = vocab::size(4);
  cfg.fusion.pos_init_std = 0.1;
  return {cfg, SyntheticEncoder(4, cfg.d_vis, seed + 1), gen_dataset(seed, 256, 16, 4)};
}

TEST(Training, BaseStaysFrozenAndLossFalls) {
  for (std::uint64_t seed : {0u, 1u}) {
    auto run = small_run(seed);
    DecoderModel m(run.cfg);
    const BaseWeights base = m.base();
    TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 8;
    const auto metrics = train(m, run.enc, run.data.train, tc, seed);
    EXPECT_TRUE(m.base() == base);
    EXPECT_GT(max_abs(m.fusion().b_feat), 0.0);

    const auto& lc = metrics.loss_curve;
    ASSERT_EQ(lc.size(), 200u);
    const Real head = std::accumulate(lc.begin(), lc.begin() + 20, 0.0) / 20.0;
    const Real tail = std::accumulate(lc.end() - 20, lc.end(), 0.0) / 20.0;
    EXPECT_LT(tail, head) << "seed " << seed;
  }
}

TEST(Training, NullInitializationIsStationaryForTheVisualBranch) {
  auto run = small_run(5);
  run.cfg.fusion.pos_init_std = 0.0;
  DecoderModel m(run.cfg);
  TrainConfig tc;
  tc.steps = 10;
  tc.batch_size = 4;
  train(m, run.enc, run.data.train, tc, 5);
  EXPECT_EQ(max_abs(m.fusion().b_feat), 0.0);
  EXPECT_EQ(max_abs(m.fusion().pos_embed), 0.0);
  EXPECT_GT(max_abs(m.fusion().b_cls), 0.0);
}

TEST(Training, SgdMomentumAlsoRuns) {
  auto run = small_run(2);
  DecoderModel m(run.cfg);
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 4;
  tc.optimizer = OptimizerKind::sgd_momentum;
  train(m, run.enc, run.data.train, tc, 2);
  EXPECT_GT(max_abs(m.fusion().pos_embed), 0.0);
  EXPECT_EQ(parse_optimizer("sgd"), OptimizerKind::sgd_momentum);
  EXPECT_THROW(parse_optimizer("adamw"), ConfigError);
}

TEST(Training, DivergenceIsReported) {
  auto run = small_run(3);
  DecoderModel m(run.cfg);
  TrainConfig tc;
  tc.steps = 50;
  tc.batch_size = 2;
  tc.lr = 1e300;
  tc.optimizer = OptimizerKind::sgd_momentum;
  EXPECT_THROW(train(m, run.enc, run.data.train, tc, 3), DivergenceError);
}

TEST(Training, TrainedModelReadsTheImage) {
  auto run = small_run(4);
  DecoderModel m(run.cfg);
  TrainConfig tc;
  tc.steps = 20;
  tc.batch_size = 4;
  train(m, run.enc, run.data.train, tc, 4);

  GridVqaSample s = run.data.test.front();
  const auto vis = prepare_visual(run.enc, s, m.config());
  const Tensor before = m.logits(s.question(), vis.prompt.features, vis.cls);
  s.cells[s.query_index()] = static_cast<std::uint8_t>((s.cells[s.query_index()] + 1) % 4);
  const auto vis2 = prepare_visual(run.enc, s, m.config());
  const Tensor after = m.logits(s.question(), vis2.prompt.features, vis2.cls);
  EXPECT_GT(max_abs_diff(before, after), 0.0);
}

}  // namespace
}  // namespace ademvl

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "ademvl/decoder.hpp"
#include "ademvl/errors.hpp"
#include "ademvl/prompt.hpp"
#include "ademvl/rng.hpp"
#include "ademvl/task.hpp"

namespace ademvl {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd-momentum";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adam|sgd-momentum)");
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  Real lr = 9e-3;
  Real momentum = 0.9;  // also Adam's first-moment decay
  Real adam_beta2 = 0.999;
  Real adam_eps = 1e-8;
  OptimizerKind optimizer = OptimizerKind::adam;
};

// lr(t) = lr0 * (1 + cos(pi t / T)) / 2
inline Real cosine_lr(Real lr0, std::size_t step, std::size_t total) {
  if (total == 0) return lr0;
  const Real t = static_cast<Real>(step) / static_cast<Real>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// Updates only the fusion tensors; the base model is never handed to it.
class FusionOptimizer {
 public:
  FusionOptimizer(const FusionParams& p, const TrainConfig& cfg)
      : cfg_(cfg), m_(FusionParamGrads::zeros_like(p)), v_(FusionParamGrads::zeros_like(p)) {}

  void step(FusionParams& p, const FusionParamGrads& g, Real lr) {
    ++t_;
    update(p.a_feat, g.a_feat, m_.a_feat, v_.a_feat, lr);
    update(p.b_feat, g.b_feat, m_.b_feat, v_.b_feat, lr);
    update(p.a_cls, g.a_cls, m_.a_cls, v_.a_cls, lr);
    update(p.b_cls, g.b_cls, m_.b_cls, v_.b_cls, lr);
    update(p.pos_embed, g.pos_embed, m_.pos_embed, v_.pos_embed, lr);
  }

 private:
  void update(Tensor& w, const Tensor& g, Tensor& m, Tensor& v, Real lr) const {
    if (cfg_.optimizer == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.momentum * m[i] + g[i];
        w[i] -= lr * m[i];
      }
      return;
    }
    const Real b1 = cfg_.momentum, b2 = cfg_.adam_beta2;
    const Real c1 = 1.0 - std::pow(b1, static_cast<Real>(t_));
    const Real c2 = 1.0 - std::pow(b2, static_cast<Real>(t_));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
    }
  }

  TrainConfig cfg_;
  FusionParamGrads m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------

struct VisualInput {
  MultiscalePrompt prompt;
  Tensor cls;  // 1 x d'
};

inline VisualInput prepare_visual(const SyntheticEncoder& enc, const GridVqaSample& s,
                                  const ModelConfig& cfg) {
  const EncoderOutput out = enc.encode(one_hot_image(s.cells, enc.channels()));
  return {build_prompt(out, cfg.scales, cfg.pool), out.cls};
}

struct TrainMetrics {
  std::vector<Real> loss_curve;  // mean batch loss per step
  std::size_t steps = 0;
};

using ProgressFn = std::function<void(std::size_t step, Real loss, Real lr)>;

inline TrainMetrics train(DecoderModel& model, const SyntheticEncoder& enc,
                          const std::vector<GridVqaSample>& data, const TrainConfig& tc,
                          std::uint64_t seed, const ProgressFn& progress = {}) {
  if (data.empty()) throw ConfigError("training set is empty");
  if (tc.batch_size == 0) throw ConfigError("batch_size must be positive");
  FusionOptimizer opt(model.fusion(), tc);
  Rng rng(derive_seed(seed, 200));
  TrainMetrics m;
  m.loss_curve.reserve(tc.steps);
  const Real inv_batch = 1.0 / static_cast<Real>(tc.batch_size);
  for (std::size_t step = 0; step < tc.steps; ++step) {
    auto grads = FusionParamGrads::zeros_like(model.fusion());
    Real batch_loss = 0.0;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      const GridVqaSample& s = data[rng.below(data.size())];
      const VisualInput vis = prepare_visual(enc, s, model.config());
      const std::vector<int> q = s.question();
      const ForwardPass fp = model.forward(q, vis.prompt.features, vis.cls);
      const LossResult loss = answer_loss(fp.logits, s.sequence(), GridVqaSample::kAnswerStart);
      batch_loss += loss.loss * inv_batch;
      grads.accumulate(model.backward(fp, loss.grad_logits), inv_batch);
    }
    if (!std::isfinite(batch_loss)) {
      throw DivergenceError("loss became non-finite at step " + std::to_string(step) +
                            " (lr " + std::to_string(cosine_lr(tc.lr, step, tc.steps)) + ")");
    }
    const Real lr = cosine_lr(tc.lr, step, tc.steps);
    opt.step(model.fusion(), grads, lr);
    m.loss_curve.push_back(batch_loss);
    if (progress) progress(step, batch_loss, lr);
  }
  m.steps = tc.steps;
  return m;
}

// Greedy argmax over the full vocabulary at the answer position.
inline Real evaluate(const DecoderModel& model, const SyntheticEncoder& enc,
                     const std::vector<GridVqaSample>& data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : data) {
    const VisualInput vis = prepare_visual(enc, s, model.config());
    const Tensor logits = model.logits(s.question(), vis.prompt.features, vis.cls);
    const auto last = logits.row(logits.dim(0) - 1);
    const auto best = std::max_element(last.begin(), last.end()) - last.begin();
    if (best == vocab::color_token(s.answer)) ++correct;
  }
  return static_cast<Real>(correct) / static_cast<Real>(data.size());
}

}  // namespace ademvl

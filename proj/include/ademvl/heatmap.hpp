#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include "ademvl/decoder.hpp"
#include "ademvl/task.hpp"
#include "ademvl/train.hpp"

namespace ademvl {

struct ScaleHeatmap {
  std::size_t scale = 1;
  std::size_t side = 16;
  Tensor kept_counts;  // side x side, raw kept decisions
  Tensor frequency;    // kept / (stream rows x layers x samples), in [0, 1]
  Tensor normalized;   // frequency / max(frequency) of this grid
};

struct DropHeatmap {
  std::vector<ScaleHeatmap> grids;  // one per prompt scale, prompt order
  std::size_t samples = 0;
  std::size_t decisions_per_row = 0;  // stream rows x layers x samples
  Real mean_kept = 0.0;               // mean frequency over all visual rows
  Real expected_mean_kept = 1.0;      // 1 - floor(gamma N) / N
  bool gamma_zero = false;            // nothing can be dropped
  // Share of samples whose queried patch (scale-1 grid) lands in the top
  // decile of that sample's kept counts; ties take the mid-rank. Absent when
  // the prompt has no scale-1 rows.
  std::optional<Real> queried_top_decile_rate;
};

namespace detail {
// 1-based mid-rank of values[idx] in descending order.
inline Real mid_rank_desc(std::span<const Real> values, std::size_t idx) {
  std::size_t greater = 0, equal = 0;
  for (Real v : values) {
    if (v > values[idx]) ++greater;
    else if (v == values[idx]) ++equal;
  }
  return static_cast<Real>(greater) + (static_cast<Real>(equal) + 1.0) / 2.0;
}
}  // namespace detail

// Counts, for every visual row, how often it survived the drop mask over
// all (stream row, layer, sample) decisions, then reshapes per scale.
inline DropHeatmap drop_heatmap(const DecoderModel& model, const SyntheticEncoder& enc,
                                std::span<const GridVqaSample> samples) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = cfg.visual_rows();
  DropHeatmap h;
  h.samples = samples.size();
  h.gamma_zero = drop_count(cfg.fusion.gamma, n) == 0;
  h.expected_mean_kept =
      1.0 - static_cast<Real>(drop_count(cfg.fusion.gamma, n)) / static_cast<Real>(n);

  std::vector<Real> kept(n, 0.0);
  std::vector<Real> per_sample(n);
  std::size_t top_hits = 0;
  bool have_scale1 = false;
  MultiscalePrompt layout;
  for (const auto& s : samples) {
    const VisualInput vis = prepare_visual(enc, s, cfg);
    const ForwardPass fp = model.forward(s.question(), vis.prompt.features, vis.cls);
    if (layout.scale_of_row.empty()) layout = vis.prompt;
    std::fill(per_sample.begin(), per_sample.end(), 0.0);
    for (const DropDecision& d : fp.decisions) {
      h.decisions_per_row += d.rows();
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (d.kept(i, j)) per_sample[j] += 1.0;
    }
    for (std::size_t j = 0; j < n; ++j) kept[j] += per_sample[j];

    // Scale-1 rows, in raster order, occupy a contiguous block of the prompt.
    const auto first = std::find(vis.prompt.scale_of_row.begin(), vis.prompt.scale_of_row.end(), 1u);
    if (first != vis.prompt.scale_of_row.end()) {
      have_scale1 = true;
      const auto off = static_cast<std::size_t>(first - vis.prompt.scale_of_row.begin());
      const std::span<const Real> patch(per_sample.data() + off, kPatchCount);
      const Real rank = detail::mid_rank_desc(patch, s.query_index());
      if (rank <= 0.1 * static_cast<Real>(kPatchCount)) ++top_hits;
    }
  }

  if (layout.scale_of_row.empty()) {
    // No samples: report the layout with zero counts.
    EncoderOutput blank{Tensor({kPatchCount, cfg.d_vis}), Tensor({1, cfg.d_vis})};
    layout = build_prompt(blank, cfg.scales, cfg.pool);
  }
  const Real denom = h.decisions_per_row > 0 ? static_cast<Real>(h.decisions_per_row) : 1.0;
  Real total = 0.0;
  for (std::size_t j = 0; j < n; ++j) total += kept[j] / denom;
  h.mean_kept = h.decisions_per_row > 0 ? total / static_cast<Real>(n) : 0.0;

  for (std::size_t s : cfg.scales) {
    ScaleHeatmap g;
    g.scale = s;
    g.side = grid_side(s);
    g.kept_counts = Tensor({g.side, g.side});
    g.frequency = Tensor({g.side, g.side});
    for (std::size_t j = 0; j < n; ++j) {
      if (layout.scale_of_row[j] != s) continue;
      const auto [r, c] = layout.grid_pos_of_row[j];
      g.kept_counts(r, c) = kept[j];
      g.frequency(r, c) = kept[j] / denom;
    }
    const Real mx = max_abs(g.frequency);
    g.normalized = mx > 0.0 ? scale(g.frequency, 1.0 / mx) : g.frequency;
    h.grids.push_back(std::move(g));
  }
  if (have_scale1 && !samples.empty()) {
    h.queried_top_decile_rate = static_cast<Real>(top_hits) / static_cast<Real>(samples.size());
  }
  return h;
}

}  // namespace ademvl

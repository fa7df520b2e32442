#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ademvl/errors.hpp"
#include "ademvl/rng.hpp"
#include "ademvl/tensor.hpp"

namespace ademvl {

inline constexpr std::size_t kGridSide = 16;
inline constexpr std::size_t kPatchCount = kGridSide * kGridSide;

struct EncoderOutput {
  Tensor patches;  // 256 x d', raster order over the 16 x 16 grid
  Tensor cls;      // 1 x d'
};

// Frozen stand-in for a vision tower: a fixed random linear map of each
// cell's channels plus a 2-D sinusoidal code of its (row, col). The [cls]
// feature is the mean patch feature.
class SyntheticEncoder {
 public:
  SyntheticEncoder(std::size_t channels, std::size_t vis_dim, std::uint64_t seed)
      : channels_(channels), vis_dim_(vis_dim) {
    if (channels == 0 || vis_dim < channels) {
      throw ConfigError("synthetic encoder needs 0 < channels <= d' (channels=" +
                        std::to_string(channels) + ", d'=" + std::to_string(vis_dim) + ")");
    }
    Rng rng(seed);
    content_ = rng.normal_tensor({channels, vis_dim});
    position_ = Tensor({kGridSide, kGridSide, vis_dim});
    for (std::size_t r = 0; r < kGridSide; ++r)
      for (std::size_t c = 0; c < kGridSide; ++c)
        for (std::size_t k = 0; k < vis_dim; ++k) position_(r, c, k) = position_code(r, c, k);
  }

  std::size_t channels() const { return channels_; }
  std::size_t vis_dim() const { return vis_dim_; }
  const Tensor& content_map() const { return content_; }
  const Tensor& position_codes() const { return position_; }

  // image: 16 x 16 x channels
  EncoderOutput encode(const Tensor& image) const {
    if (image.shape() != Shape{kGridSide, kGridSide, channels_}) {
      throw ShapeError("encoder expects a 16x16x" + std::to_string(channels_) + " image, got " +
                       shape_str(image.shape()));
    }
    EncoderOutput out{Tensor({kPatchCount, vis_dim_}), Tensor({1, vis_dim_})};
    for (std::size_t r = 0; r < kGridSide; ++r)
      for (std::size_t c = 0; c < kGridSide; ++c) {
        auto row = out.patches.row(r * kGridSide + c);
        for (std::size_t k = 0; k < vis_dim_; ++k) row[k] = position_(r, c, k);
        for (std::size_t ch = 0; ch < channels_; ++ch) {
          const Real v = image(r, c, ch);
          if (v == 0.0) continue;
          for (std::size_t k = 0; k < vis_dim_; ++k) row[k] += v * content_(ch, k);
        }
      }
    for (std::size_t i = 0; i < kPatchCount; ++i)
      for (std::size_t k = 0; k < vis_dim_; ++k) out.cls(0, k) += out.patches(i, k);
    for (std::size_t k = 0; k < vis_dim_; ++k) out.cls(0, k) /= static_cast<Real>(kPatchCount);
    return out;
  }

 private:
  // Dimensions cycle through sin(row f), cos(row f), sin(col f), cos(col f)
  // with geometrically spaced frequencies f.
  Real position_code(std::size_t r, std::size_t c, std::size_t k) const {
    const std::size_t bands = std::max<std::size_t>(1, vis_dim_ / 4);
    const std::size_t band = (k / 4) % bands;
    const Real freq = std::pow(100.0, -static_cast<Real>(band) / static_cast<Real>(bands));
    const Real coord = static_cast<Real>((k % 4) < 2 ? r : c);
    return (k % 2) == 0 ? std::sin(coord * freq) : std::cos(coord * freq);
  }

  std::size_t channels_;
  std::size_t vis_dim_;
  Tensor content_;
  Tensor position_;
};

inline EncoderOutput synthetic_encoder(const Tensor& image, std::size_t vis_dim,
                                       std::uint64_t seed) {
  return SyntheticEncoder(image.dim(2), vis_dim, seed).encode(image);
}

// 16 x 16 grid of color ids -> 16 x 16 x colors one-hot image.
inline Tensor one_hot_image(const std::vector<std::uint8_t>& cells, std::size_t colors) {
  if (cells.size() != kPatchCount) throw ShapeError("image must have 256 cells");
  Tensor img({kGridSide, kGridSide, colors});
  for (std::size_t i = 0; i < kPatchCount; ++i) {
    if (cells[i] >= colors) throw ConfigError("cell color out of range");
    img(i / kGridSide, i % kGridSide, cells[i]) = 1.0;
  }
  return img;
}

// ---------------------------------------------------------------------------

enum class PoolKind { avg, max };

inline std::string_view to_string(PoolKind p) { return p == PoolKind::avg ? "avg" : "max"; }

inline PoolKind parse_pool(std::string_view s) {
  if (s == "avg") return PoolKind::avg;
  if (s == "max") return PoolKind::max;
  throw ConfigError("unknown pooling '" + std::string(s) + "' (expected avg|max)");
}

struct GridPos {
  std::size_t row = 0, col = 0;
  bool operator==(const GridPos&) const = default;
};

struct MultiscalePrompt {
  Tensor features;                     // N_total x d'
  std::vector<std::size_t> scale_of_row;
  std::vector<GridPos> grid_pos_of_row;
  std::vector<std::size_t> scales;     // in concatenation order
  PoolKind pool = PoolKind::avg;

  std::size_t rows() const { return features.dim(0); }
};

inline void validate_scales(const std::vector<std::size_t>& scales) {
  if (scales.empty()) throw ConfigError("at least one prompt scale is required");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const std::size_t s = scales[i];
    if (s != 1 && s != 2 && s != 4) {
      throw ConfigError("prompt scale must be one of 1, 2, 4; got " + std::to_string(s));
    }
    for (std::size_t j = 0; j < i; ++j)
      if (scales[j] == s) throw ConfigError("duplicate prompt scale " + std::to_string(s));
  }
}

inline std::size_t grid_side(std::size_t scale) { return kGridSide / scale; }

// N_total = sum over scales of (16 / s)^2
inline std::size_t prompt_rows(const std::vector<std::size_t>& scales) {
  validate_scales(scales);
  std::size_t n = 0;
  for (std::size_t s : scales) n += grid_side(s) * grid_side(s);
  return n;
}

inline MultiscalePrompt build_prompt(const EncoderOutput& enc,
                                     const std::vector<std::size_t>& scales = {1, 2},
                                     PoolKind pool = PoolKind::avg) {
  validate_scales(scales);
  if (enc.patches.rank() != 2 || enc.patches.dim(0) != kPatchCount) {
    throw ShapeError("encoder output must have 256 patch rows, got " +
                     shape_str(enc.patches.shape()));
  }
  const std::size_t vis_dim = enc.patches.dim(1);
  const Tensor grid = reshape(enc.patches, {kGridSide, kGridSide, vis_dim});

  MultiscalePrompt p;
  p.scales = scales;
  p.pool = pool;
  std::vector<Real> data;
  data.reserve(prompt_rows(scales) * vis_dim);
  for (std::size_t s : scales) {
    const Tensor pooled =
        s == 1 ? grid : (pool == PoolKind::avg ? avg_pool2d(grid, s) : max_pool2d(grid, s));
    const std::size_t side = grid_side(s);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        for (std::size_t k = 0; k < vis_dim; ++k) data.push_back(pooled(r, c, k));
        p.scale_of_row.push_back(s);
        p.grid_pos_of_row.push_back({r, c});
      }
  }
  p.features = Tensor({p.scale_of_row.size(), vis_dim}, std::move(data));
  return p;
}

// Reassembles the pooled grid of one scale from prompt rows via metadata.
inline Tensor unflatten_scale(const MultiscalePrompt& p, std::size_t scale) {
  const std::size_t side = grid_side(scale), d = p.features.dim(1);
  Tensor g({side, side, d});
  bool found = false;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    if (p.scale_of_row[i] != scale) continue;
    found = true;
    const auto [r, c] = p.grid_pos_of_row[i];
    for (std::size_t k = 0; k < d; ++k) g(r, c, k) = p.features(i, k);
  }
  if (!found) throw ConfigError("prompt has no rows at scale " + std::to_string(scale));
  return g;
}

// Prepends the embedded [cls] row to the text stream.
inline Tensor attach_cls(const Tensor& text, const Tensor& cls) {
  if (cls.rank() != 2 || cls.dim(0) != 1) {
    throw ShapeError("cls must be 1 x d, got " + shape_str(cls.shape()));
  }
  if (text.rank() != 2 || text.dim(1) != cls.dim(1)) {
    throw ShapeError("attach_cls width mismatch: " + shape_str(text.shape()) + " vs " +
                     shape_str(cls.shape()));
  }
  return concat_rows(cls, text);
}

}  // namespace ademvl

#pragma once

#include <cstdint>
#include <vector>

#include "ademvl/errors.hpp"
#include "ademvl/prompt.hpp"
#include "ademvl/rng.hpp"

namespace ademvl {

// Grid question answering: "what color is cell (row, col)?"
//
// Token layout: 0 = BOS, 1..16 = row, 17..32 = column, 33 = ASK,
// 34.. = colors. A sample reads BOS ROW COL ASK COLOR with the color as the
// single answer token.
namespace vocab {
inline constexpr int kBos = 0;
inline constexpr int kRowBase = 1;
inline constexpr int kColBase = kRowBase + static_cast<int>(kGridSide);
inline constexpr int kAsk = kColBase + static_cast<int>(kGridSide);
inline constexpr int kColorBase = kAsk + 1;

inline std::size_t size(std::size_t colors) { return static_cast<std::size_t>(kColorBase) + colors; }
inline int color_token(std::size_t color) { return kColorBase + static_cast<int>(color); }
}  // namespace vocab

struct GridVqaSample {
  std::vector<std::uint8_t> cells;  // 256 color ids, raster order
  std::uint8_t row = 0, col = 0;
  std::uint8_t answer = 0;

  std::size_t query_index() const { return std::size_t{row} * kGridSide + col; }

  // BOS ROW COL ASK
  std::vector<int> question() const {
    return {vocab::kBos, vocab::kRowBase + row, vocab::kColBase + col, vocab::kAsk};
  }
  // question followed by the answer token
  std::vector<int> sequence() const {
    auto s = question();
    s.push_back(vocab::color_token(answer));
    return s;
  }
  static constexpr std::size_t kAnswerStart = 4;
};

struct GridVqaDataset {
  std::size_t colors = 0;
  std::vector<GridVqaSample> train;
  std::vector<GridVqaSample> test;
};

inline GridVqaSample random_sample(Rng& rng, std::size_t colors) {
  GridVqaSample s;
  s.cells.resize(kPatchCount);
  for (auto& c : s.cells) c = static_cast<std::uint8_t>(rng.below(colors));
  s.row = static_cast<std::uint8_t>(rng.below(kGridSide));
  s.col = static_cast<std::uint8_t>(rng.below(kGridSide));
  s.answer = s.cells[s.query_index()];
  return s;
}

// Train and test draw from separate seed streams.
inline GridVqaDataset gen_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_test,
                                  std::size_t colors) {
  if (colors < 2) throw ConfigError("grid task needs at least 2 colors");
  if (colors > 255) throw ConfigError("grid task supports at most 255 colors");
  GridVqaDataset ds;
  ds.colors = colors;
  Rng train_rng(derive_seed(seed, 100));
  Rng test_rng(derive_seed(seed, 101));
  ds.train.reserve(n_train);
  ds.test.reserve(n_test);
  for (std::size_t i = 0; i < n_train; ++i) ds.train.push_back(random_sample(train_rng, colors));
  for (std::size_t i = 0; i < n_test; ++i) ds.test.push_back(random_sample(test_rng, colors));
  return ds;
}

}  // namespace ademvl

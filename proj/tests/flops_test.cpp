#include <gtest/gtest.h>

#include <cmath>

#include "ademvl/flops.hpp"
#include "ademvl/rng.hpp"

namespace ademvl {
namespace {

TEST(Flops, PaperScale) {
  const auto r = flops(256, 320, 4096);
  EXPECT_EQ(to_string_wide(r.standard), "19998441472");
  EXPECT_EQ(to_string_wide(r.param_free), "671088640");
  EXPECT_NEAR(r.ratio(), 29.8, 0.05);
}

TEST(Flops, UnitScale) {
  const auto r = flops(1, 1, 1);
  EXPECT_EQ(r.standard, Wide{6});
  EXPECT_EQ(r.param_free, Wide{2});
  EXPECT_EQ(r.ratio_num, Wide{3});
  EXPECT_EQ(r.ratio_den, Wide{1});
}

TEST(Flops, SavingsAndClosedFormRatio) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Wide L = 1 + rng.below(100000), N = 1 + rng.below(100000), d = 1 + rng.below(100000);
    const auto r = flops(static_cast<std::uint64_t>(L), static_cast<std::uint64_t>(N),
                         static_cast<std::uint64_t>(d));
    EXPECT_EQ(r.savings(), 2 * L * d * d + 2 * N * d * d);
    EXPECT_LT(r.param_free, r.standard);
    // standard / param_free = (L + N) d / (L N) + 1, compared as fractions.
    EXPECT_EQ(r.ratio_num * L * N, r.ratio_den * ((L + N) * d + L * N));
    EXPECT_EQ(gcd_wide(r.ratio_num, r.ratio_den), Wide{1});
  }
}

TEST(Flops, EqualLengthsClosedForm) {
  const auto r = flops(64, 64, 512);
  EXPECT_DOUBLE_EQ(r.ratio(), 2.0 * 512 / 64 + 1.0);
}

TEST(Flops, RejectsZeroAndHugeDimensions) {
  EXPECT_THROW(flops(0, 1, 1), ConfigError);
  EXPECT_THROW(flops(1, 1, 0), ConfigError);
  EXPECT_THROW(flops(1, 1, std::uint64_t{1} << 40), ConfigError);
  const auto r = flops((std::uint64_t{1} << 40) - 1, (std::uint64_t{1} << 40) - 1, (std::uint64_t{1} << 40) - 1);
  EXPECT_GT(r.standard, r.param_free);
}

TEST(Flops, WideToString) {
  EXPECT_EQ(to_string_wide(0), "0");
  const Wide big = Wide{1} << 100;
  EXPECT_EQ(to_string_wide(big), "1267650600228229401496703205376");
}

TEST(Flops, BenchmarkRecordsMedians) {
  auto r = flops(8, 8, 8);
  benchmark(r, 1, 3);
  ASSERT_TRUE(r.measured_ns_standard.has_value());
  ASSERT_TRUE(r.measured_ns_param_free.has_value());
  EXPECT_GT(*r.measured_ns_standard, 0.0);
  EXPECT_NE(format_table(r).find("param-free ns (median)"), std::string::npos);
}

}  // namespace
}  // namespace ademvl

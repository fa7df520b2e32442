#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ademvl/errors.hpp"
#include "ademvl/fusion.hpp"
#include "ademvl/rng.hpp"

namespace ademvl {

using Wide = unsigned __int128;

inline std::string to_string_wide(Wide v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return {s.rbegin(), s.rend()};
}

inline Wide gcd_wide(Wide a, Wide b) {
  while (b != 0) {
    const Wide t = a % b;
    a = b;
    b = t;
  }
  return a;
}

// Multiply-adds count as two operations; softmax and activation cost is not
// counted.
struct FlopsReport {
  std::uint64_t L = 0, N = 0, d = 0;
  Wide standard = 0;    // 2 L d^2 + 2 N d^2 + 2 L N d
  Wide param_free = 0;  // 2 L N d
  Wide ratio_num = 0;   // standard / param_free, reduced
  Wide ratio_den = 1;
  std::optional<double> measured_ns_standard;
  std::optional<double> measured_ns_param_free;

  Wide savings() const { return standard - param_free; }
  double ratio() const { return static_cast<double>(ratio_num) / static_cast<double>(ratio_den); }
};

inline FlopsReport flops(std::uint64_t L, std::uint64_t N, std::uint64_t d) {
  if (L == 0 || N == 0 || d == 0) throw ConfigError("flops: L, N and d must be positive");
  // Every term is below 2^(3*64+2); guard the 128-bit range explicitly.
  const Wide max_dim = Wide{1} << 40;
  if (L >= max_dim || N >= max_dim || d >= max_dim) {
    throw ConfigError("flops: dimensions must be below 2^40 to stay exact");
  }
  FlopsReport r;
  r.L = L;
  r.N = N;
  r.d = d;
  const Wide l = L, n = N, dd = d;
  r.param_free = 2 * l * n * dd;
  r.standard = 2 * l * dd * dd + 2 * n * dd * dd + r.param_free;
  const Wide g = gcd_wide(r.standard, r.param_free);
  r.ratio_num = r.standard / g;
  r.ratio_den = r.param_free / g;
  return r;
}

namespace detail {
template <typename Fn>
double median_ns(Fn&& fn, int repeats) {
  std::vector<double> t;
  t.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const auto stop = std::chrono::steady_clock::now();
    t.push_back(std::chrono::duration<double, std::nano>(stop - start).count());
  }
  std::nth_element(t.begin(), t.begin() + repeats / 2, t.end());
  return t[static_cast<std::size_t>(repeats / 2)];
}
}  // namespace detail

// Times both kernels at (L, N, d) on random inputs; median of `repeats` calls.
inline void benchmark(FlopsReport& r, std::uint64_t seed = 0, int repeats = 11) {
  Rng rng(seed);
  const Tensor text = rng.normal_tensor({r.L, r.d});
  const Tensor visual = rng.normal_tensor({r.N, r.d});
  const auto params = StandardXAttnParams::random(r.d, rng);
  volatile Real sink = 0.0;
  r.measured_ns_standard = detail::median_ns(
      [&] { sink = sink + standard_xattn(text, visual, params)[0]; }, repeats);
  r.measured_ns_param_free = detail::median_ns(
      [&] { sink = sink + param_free_xattn(text, visual, Activation::silu, 0.0).out[0]; }, repeats);
}

inline std::string format_table(const FlopsReport& r) {
  std::ostringstream os;
  auto line = [&](const std::string& k, const std::string& v) {
    os << std::left << std::setw(24) << k << std::right << std::setw(24) << v << '\n';
  };
  line("L", std::to_string(r.L));
  line("N", std::to_string(r.N));
  line("d", std::to_string(r.d));
  line("standard FLOPs", to_string_wide(r.standard));
  line("param-free FLOPs", to_string_wide(r.param_free));
  line("savings", to_string_wide(r.savings()));
  std::ostringstream ratio;
  ratio << std::fixed << std::setprecision(4) << r.ratio() << " (" << to_string_wide(r.ratio_num)
        << "/" << to_string_wide(r.ratio_den) << ")";
  line("ratio", ratio.str());
  if (r.measured_ns_standard) {
    std::ostringstream a, b;
    a << std::fixed << std::setprecision(0) << *r.measured_ns_standard;
    b << std::fixed << std::setprecision(0) << *r.measured_ns_param_free;
    line("standard ns (median)", a.str());
    line("param-free ns (median)", b.str());
  }
  return os.str();
}

}  // namespace ademvl

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "ademvl/errors.hpp"
#include "ademvl/tensor.hpp"

namespace ademvl {

// Binary tensor file:
//   "ADMT" | u8 version (=1) | u8 rank | rank x u64 LE dims | f64 LE payload
inline constexpr std::array<char, 4> kTensorMagic = {'A', 'D', 'M', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

namespace detail {
inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b.data(), b.size());
}

inline std::uint64_t get_u64_le(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) {
    throw IoError("tensor file truncated");
  }
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.empty()) throw UsageError("cannot serialize an unset tensor");
  os.write(kTensorMagic.data(), kTensorMagic.size());
  os.put(static_cast<char>(kTensorVersion));
  os.put(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u64_le(os, d);
  for (Real v : t.data()) detail::put_u64_le(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw IoError("failed writing tensor");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw IoError("bad tensor magic (expected ADMT)");
  }
  const int version = is.get();
  const int rank = is.get();
  if (version != kTensorVersion) {
    throw IoError("unsupported tensor file version " + std::to_string(version));
  }
  if (rank < 1 || rank > 3) throw IoError("tensor file rank out of range: " + std::to_string(rank));
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = static_cast<std::size_t>(detail::get_u64_le(is));
  std::vector<Real> data(Tensor::count(shape));
  for (auto& v : data) v = std::bit_cast<Real>(detail::get_u64_le(is));
  return Tensor(std::move(shape), std::move(data));
}

inline std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

inline Tensor decode_tensor(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor(is);
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace ademvl

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mcaforge/error.hpp"
#include "mcaforge/tensor.hpp"

namespace mcaforge {

// .mcat binary tensor file:
//   magic "MCAT" | u32 version=1 | u32 ndim | ndim x u64 dims | values as f32
// All integers and floats little-endian. Round-trips are bit-exact.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

inline std::string encode_mcat(const Tensor& t) {
  std::string out = "MCAT";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u64(out, d);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    std::uint32_t bits;
    float v = t[i];
    std::memcpy(&bits, &v, 4);
    detail::put_u32(out, bits);
  }
  return out;
}

inline Tensor decode_mcat(const std::string& raw, const std::string& origin = "<memory>") {
  const auto fail = [&](const std::string& why) -> Tensor {
    throw IoError("bad .mcat data in " + origin + ": " + why);
  };
  const unsigned char* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (raw.size() < 12 || std::memcmp(p, "MCAT", 4) != 0) return fail("missing MCAT magic");
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != 1) return fail("unsupported version " + std::to_string(version));
  const std::uint32_t ndim = detail::get_u32(p + 8);
  std::size_t offset = 12;
  if (raw.size() < offset + 8ull * ndim) return fail("truncated dimension list");
  std::vector<std::size_t> shape(ndim);
  for (std::uint32_t i = 0; i < ndim; ++i) {
    shape[i] = static_cast<std::size_t>(detail::get_u64(p + offset));
    offset += 8;
  }
  const std::size_t n = Tensor::count(shape);
  if (raw.size() != offset + 4 * n) {
    return fail("payload size mismatch: expected " + std::to_string(offset + 4 * n) +
                " bytes, got " + std::to_string(raw.size()));
  }
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::get_u32(p + offset);
    std::memcpy(&data[i], &bits, 4);
    offset += 4;
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_mcat(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string raw = encode_mcat(t);
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Tensor read_mcat(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_mcat(raw, path.string());
}

}  // namespace mcaforge

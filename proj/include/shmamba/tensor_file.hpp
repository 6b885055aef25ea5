#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <string_view>

#include "shmamba/error.hpp"
#include "shmamba/tensor.hpp"

/// Binary tensor container:
///
///   offset  size       field
///   0       4          magic "SHT1"
///   4       4          version, u32 little-endian (currently 1)
///   8       4          rank, u32 little-endian
///   12      8 * rank   dims, u64 little-endian
///   ...     4 * numel  payload, IEEE-754 binary32 little-endian, row-major
///
/// Values are widened to double on read.
namespace shmamba::io {

inline constexpr std::string_view kTensorMagic = "SHT1";
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kMaxRank = 16;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& x) {
  if (!x.all_finite()) throw NumericalError("cannot serialise a tensor holding non-finite values");
  std::string out;
  out.reserve(12 + 8 * x.rank() + 4 * x.numel());
  out.append(kTensorMagic);
  detail::put_u32(out, kTensorVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(x.rank()));
  for (std::size_t d : x.shape()) detail::put_u64(out, d);
  for (double v : x.data()) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f)) throw NumericalError("value " + std::to_string(v) + " overflows binary32");
    detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

/// Parses a serialised tensor; the header is fully validated against the
/// byte count before any payload allocation.
inline Tensor decode_tensor(std::string_view bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 4 || bytes.substr(0, 4) != kTensorMagic) {
    throw BadMagicError(origin + ": not a tensor file (bad magic)");
  }
  if (bytes.size() < 12) throw TruncatedPayloadError(origin + ": header truncated");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kTensorVersion) {
    throw VersionMismatchError(origin + ": unsupported version " + std::to_string(version));
  }
  const auto rank = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
  if (rank > kMaxRank) throw TruncatedPayloadError(origin + ": implausible rank " + std::to_string(rank));
  const std::size_t header = 12 + 8 * static_cast<std::size_t>(rank);
  if (bytes.size() < header) throw TruncatedPayloadError(origin + ": dims truncated");
  Shape shape(rank);
  std::uint64_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = detail::get_le(bytes, 12 + 8 * static_cast<std::size_t>(i), 8);
    if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / 4 / d) {
      throw TruncatedPayloadError(origin + ": declared dims overflow");
    }
    numel *= d;
    shape[i] = static_cast<std::size_t>(d);
  }
  if (bytes.size() - header != 4 * numel) {
    throw TruncatedPayloadError(origin + ": payload holds " + std::to_string(bytes.size() - header) +
                                " bytes but dims declare " + std::to_string(4 * numel));
  }
  std::vector<double> data(static_cast<std::size_t>(numel));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto bits = static_cast<std::uint32_t>(detail::get_le(bytes, header + 4 * i, 4));
    data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& x) {
  const std::string bytes = encode_tensor(x);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path), path.string());
}

}  // namespace shmamba::io

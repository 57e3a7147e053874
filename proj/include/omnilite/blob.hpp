#pragma once

// Flat binary32 little-endian blobs, the on-disk form of every embedding and weight.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace omnilite::blob {

inline void write_f32(std::ostream& os, std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xffu);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xffu);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xffu);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xffu);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw FormatError("blob: write failed");
}

inline std::vector<double> read_f32(std::istream& is, std::size_t count) {
  std::vector<unsigned char> buf(count * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
    throw FormatError("blob: expected " + std::to_string(count) + " values, got " +
                      std::to_string(is.gcount() / 4));
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = std::uint32_t{buf[4 * i]} | (std::uint32_t{buf[4 * i + 1]} << 8) |
                               (std::uint32_t{buf[4 * i + 2]} << 16) |
                               (std::uint32_t{buf[4 * i + 3]} << 24);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

inline void save_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("blob: cannot open " + path.string() + " for writing");
  write_f32(os, m.data());
}

/// Reads a whole file as rows of `cols` values; the file size must be a multiple of the row size.
inline Matrix load_matrix(const std::filesystem::path& path, std::size_t cols) {
  if (cols == 0) throw FormatError("blob: column count must be positive");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("blob: missing file " + path.string());
  const auto bytes = std::filesystem::file_size(path);
  if (bytes % (4 * cols) != 0) {
    throw FormatError("blob: " + path.string() + " size " + std::to_string(bytes) +
                      " is not a multiple of a " + std::to_string(cols) + "-wide row");
  }
  const std::size_t rows = bytes / (4 * cols);
  return Matrix(rows, cols, read_f32(is, rows * cols));
}

/// Rounds every entry to the nearest binary32 so the matrix survives a save/load unchanged.
inline void round_to_f32(Matrix& m) {
  for (double& x : m.data()) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace omnilite::blob

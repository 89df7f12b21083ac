#include "cbm/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "cbm/error.hpp"

namespace cbm::io {
namespace {

template <typename T>
T to_little_endian(T value) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

template <typename T>
void write_array(const std::filesystem::path& path, std::span<const T> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      const T le = to_little_endian(v);
      out.write(reinterpret_cast<const char*>(&le), sizeof(T));
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t expected_count) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw DataError("missing file: " + path.string());
  const auto expected_bytes = expected_count * sizeof(T);
  if (size != expected_bytes) {
    throw DataError("dimension mismatch: " + path.string() + " holds " + std::to_string(size) +
                    " bytes, descriptor implies " + std::to_string(expected_bytes));
  }
  std::vector<T> values(expected_count);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(expected_bytes));
  if (!in && expected_bytes > 0) throw DataError("short read: " + path.string());
  for (T& v : values) v = to_little_endian(v);
  return values;
}

}  // namespace

void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  write_array(path, values);
}
void write_u32(const std::filesystem::path& path, std::span<const std::uint32_t> values) {
  write_array(path, values);
}
void write_u8(const std::filesystem::path& path, std::span<const std::uint8_t> values) {
  write_array(path, values);
}

std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected_count) {
  return read_array<float>(path, expected_count);
}
std::vector<std::uint32_t> read_u32(const std::filesystem::path& path, std::size_t expected_count) {
  return read_array<std::uint32_t>(path, expected_count);
}
std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, std::size_t expected_count) {
  return read_array<std::uint8_t>(path, expected_count);
}

}  // namespace cbm::io

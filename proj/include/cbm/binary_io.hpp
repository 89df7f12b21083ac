#ifndef CBM_BINARY_IO_HPP
#define CBM_BINARY_IO_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cbm::io {

// Raw little-endian array files. Sizes are validated against `expected_count`
// so a short or long file is reported rather than silently truncated.
void write_f32(const std::filesystem::path& path, std::span<const float> values);
void write_u32(const std::filesystem::path& path, std::span<const std::uint32_t> values);
void write_u8(const std::filesystem::path& path, std::span<const std::uint8_t> values);

std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected_count);
std::vector<std::uint32_t> read_u32(const std::filesystem::path& path, std::size_t expected_count);
std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, std::size_t expected_count);

}  // namespace cbm::io

#endif  // CBM_BINARY_IO_HPP

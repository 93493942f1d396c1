#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hbrnet/nn.hpp"

namespace hbrnet::ckpt {

struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

/// HBRW layout: "HBRW" | u32 count | per tensor: u16 name length, UTF-8 name,
/// u8 rank, rank x u32 dims, f32 data. All integers little-endian.
std::vector<std::uint8_t> serialize(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> deserialize(const std::vector<std::uint8_t>& bytes);

template <typename T>
std::vector<NamedArray> to_arrays(const nn::ParamList<T>& params);

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a digest, rendered as 16 hex digits.
std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);
std::string hex64(std::uint64_t v);

/// Copies checkpoint arrays into the parameters by name; shapes must match.
template <typename T>
void load_into(const std::vector<NamedArray>& arrays, const nn::ParamList<T>& params);

}  // namespace hbrnet::ckpt

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace hbrnet {

struct Dims3 {
    std::size_t z = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t voxels() const { return z * h * w; }
    std::size_t plane() const { return h * w; }
    bool operator==(const Dims3&) const = default;
};

/// Scalar Z x H x W grid, row-major with W fastest.
template <typename T>
struct Grid3 {
    Dims3 dims;
    std::vector<T> values;

    Grid3() = default;
    explicit Grid3(Dims3 d, T fill = T{}) : dims(d), values(d.voxels(), fill) {}

    T& at(std::size_t z, std::size_t y, std::size_t x) {
        return values[(z * dims.h + y) * dims.w + x];
    }
    T at(std::size_t z, std::size_t y, std::size_t x) const {
        return values[(z * dims.h + y) * dims.w + x];
    }
};

using Volume3 = Grid3<float>;
using MaskVolume = Grid3<std::uint8_t>;

inline constexpr std::size_t kChannels = 6;
enum Channel : std::size_t { v_ep = 0, v_lu = 1, d_ep = 2, d_st = 3, t2_ep = 4, t2_st = 5 };
inline constexpr std::array<std::string_view, kChannels> kChannelNames{
    "v_ep", "v_lu", "d_ep", "d_st", "t2_ep", "t2_st"};

/// Physical range used for clamping each biomarker.
struct ChannelRange {
    float lo;
    float hi;
};
inline constexpr std::array<ChannelRange, kChannels> kChannelRanges{{
    {0.0F, 1.0F}, {0.0F, 1.0F}, {0.05F, 3.0F}, {0.05F, 3.0F}, {5.0F, 400.0F}, {5.0F, 400.0F}}};

/// Six co-registered biomarker maps, stored channel-major: [c][z][y][x].
struct BiomarkerVolume {
    Dims3 dims;
    std::vector<float> values;

    BiomarkerVolume() = default;
    explicit BiomarkerVolume(Dims3 d) : dims(d), values(kChannels * d.voxels(), 0.0F) {}

    float& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
        return values[((c * dims.z + z) * dims.h + y) * dims.w + x];
    }
    float at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
        return values[((c * dims.z + z) * dims.h + y) * dims.w + x];
    }
    Volume3 channel(std::size_t c) const;
    void set_channel(std::size_t c, const Volume3& v);
    /// 6 x H x W copy of slice z.
    std::vector<float> slice(std::size_t z) const;
    void set_slice(std::size_t z, const std::vector<float>& six_planes);
};

/// Checks value-range and compartment invariants; returns a description of
/// the first violation, or an empty string.
std::string check_invariants(const BiomarkerVolume& v);

/// Clamps every channel to its physical range and rescales v_ep, v_lu so
/// that v_ep + v_lu <= 1.
void clamp_to_physical(BiomarkerVolume& v);

// ---------------------------------------------------------------------------
// HMV volume files

enum class VolumeErrc { bad_magic, truncated, dim_overflow, bad_dtype, io };

class VolumeError : public std::runtime_error {
public:
    VolumeError(VolumeErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    VolumeErrc code() const { return code_; }

private:
    VolumeErrc code_;
};

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

/// N-d array as stored in an HMV file.
struct HmvArray {
    std::vector<std::uint32_t> dims;
    std::variant<std::vector<float>, std::vector<std::uint8_t>> payload;

    DType dtype() const { return payload.index() == 0 ? DType::f32 : DType::u8; }
};

std::vector<std::uint8_t> encode_hmv(const HmvArray& a);
HmvArray decode_hmv(const std::vector<std::uint8_t>& bytes);
void write_volume(const std::filesystem::path& path, const HmvArray& a);
HmvArray read_volume(const std::filesystem::path& path);

HmvArray to_hmv(const BiomarkerVolume& v);
HmvArray to_hmv(const MaskVolume& m);
HmvArray to_hmv(const Volume3& v);
BiomarkerVolume biomarkers_from_hmv(const HmvArray& a);
MaskVolume mask_from_hmv(const HmvArray& a);
Volume3 volume_from_hmv(const HmvArray& a);

}  // namespace hbrnet

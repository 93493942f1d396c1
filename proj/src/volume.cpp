#include "hbrnet/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hbrnet {

Volume3 BiomarkerVolume::channel(std::size_t c) const {
    Volume3 out(dims);
    const auto n = dims.voxels();
    std::copy_n(values.begin() + static_cast<long>(c * n), n, out.values.begin());
    return out;
}

void BiomarkerVolume::set_channel(std::size_t c, const Volume3& v) {
    if (!(v.dims == dims)) {
        throw std::invalid_argument("set_channel: dims mismatch");
    }
    std::copy(v.values.begin(), v.values.end(), values.begin() + static_cast<long>(c * dims.voxels()));
}

std::vector<float> BiomarkerVolume::slice(std::size_t z) const {
    const std::size_t plane = dims.plane();
    std::vector<float> out(kChannels * plane);
    for (std::size_t c = 0; c < kChannels; ++c) {
        const auto* src = values.data() + (c * dims.z + z) * plane;
        std::copy_n(src, plane, out.data() + c * plane);
    }
    return out;
}

void BiomarkerVolume::set_slice(std::size_t z, const std::vector<float>& six_planes) {
    const std::size_t plane = dims.plane();
    if (six_planes.size() != kChannels * plane) {
        throw std::invalid_argument("set_slice: expected 6 x H x W values");
    }
    for (std::size_t c = 0; c < kChannels; ++c) {
        std::copy_n(six_planes.data() + c * plane, plane, values.data() + (c * dims.z + z) * plane);
    }
}

std::string check_invariants(const BiomarkerVolume& v) {
    const std::size_t n = v.dims.voxels();
    if (v.values.size() != kChannels * n) {
        return "value count does not match dims";
    }
    for (std::size_t c = 0; c < kChannels; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            const float x = v.values[c * n + i];
            if (!std::isfinite(x)) {
                return std::string(kChannelNames[c]) + " has a non-finite value";
            }
            const bool fraction = c == v_ep || c == v_lu;
            if (fraction ? (x < 0.0F || x > 1.0F) : !(x > 0.0F)) {
                std::ostringstream os;
                os << kChannelNames[c] << " out of range at voxel " << i << ": " << x;
                return os.str();
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (v.values[i] + v.values[n + i] > 1.0F) {
            return "v_ep + v_lu > 1 at voxel " + std::to_string(i);
        }
    }
    return {};
}

void clamp_to_physical(BiomarkerVolume& v) {
    const std::size_t n = v.dims.voxels();
    for (std::size_t c = 0; c < kChannels; ++c) {
        const auto r = kChannelRanges[c];
        for (std::size_t i = 0; i < n; ++i) {
            float& x = v.values[c * n + i];
            x = std::clamp(x, r.lo, r.hi);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        float& ep = v.values[i];
        float& lu = v.values[n + i];
        const float s = ep + lu;
        if (s > 1.0F) {
            ep /= s;
            lu /= s;
            // float division can still round the sum above 1
            while (ep + lu > 1.0F) {
                lu = std::nextafter(lu, 0.0F);
            }
        }
    }
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kMaxElements = 1ULL << 32;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t element_count(const std::vector<std::uint32_t>& dims) {
    std::uint64_t n = 1;
    for (auto d : dims) {
        n *= d;
        if (n > kMaxElements) {
            throw VolumeError(VolumeErrc::dim_overflow, "HMV: declared dims overflow");
        }
    }
    return n;
}

}  // namespace

std::vector<std::uint8_t> encode_hmv(const HmvArray& a) {
    const std::uint64_t n = element_count(a.dims);
    std::vector<std::uint8_t> out{'H', 'M', 'V', '1'};
    out.push_back(static_cast<std::uint8_t>(a.dtype()));
    out.push_back(static_cast<std::uint8_t>(a.dims.size()));
    out.insert(out.end(), 6, 0);
    for (auto d : a.dims) put_u32(out, d);
    if (a.dtype() == DType::f32) {
        const auto& p = std::get<0>(a.payload);
        if (p.size() != n) throw std::invalid_argument("HMV: payload length does not match dims");
        for (float f : p) {
            std::uint32_t bits = 0;
            std::memcpy(&bits, &f, 4);
            put_u32(out, bits);
        }
    } else {
        const auto& p = std::get<1>(a.payload);
        if (p.size() != n) throw std::invalid_argument("HMV: payload length does not match dims");
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

HmvArray decode_hmv(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "HMV1", 4) != 0) {
        throw VolumeError(VolumeErrc::bad_magic, "HMV: bad magic");
    }
    if (bytes.size() < 12) {
        throw VolumeError(VolumeErrc::truncated, "HMV: truncated header");
    }
    const std::uint8_t dtype = bytes[4];
    const std::uint8_t rank = bytes[5];
    if (dtype > 1) {
        throw VolumeError(VolumeErrc::bad_dtype, "HMV: unknown dtype " + std::to_string(dtype));
    }
    const std::size_t header = 12 + 4 * static_cast<std::size_t>(rank);
    if (bytes.size() < header) {
        throw VolumeError(VolumeErrc::truncated, "HMV: truncated dims");
    }
    HmvArray a;
    for (std::size_t i = 0; i < rank; ++i) a.dims.push_back(get_u32(bytes.data() + 12 + 4 * i));
    const std::uint64_t n = element_count(a.dims);
    const std::uint64_t esize = dtype == 0 ? 4 : 1;
    if (bytes.size() - header != n * esize) {
        throw VolumeError(VolumeErrc::truncated,
                          "HMV: payload has " + std::to_string(bytes.size() - header) +
                              " bytes, header declares " + std::to_string(n * esize));
    }
    const std::uint8_t* p = bytes.data() + header;
    if (dtype == 0) {
        std::vector<float> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t bits = get_u32(p + 4 * i);
            std::memcpy(&v[i], &bits, 4);
        }
        a.payload = std::move(v);
    } else {
        a.payload = std::vector<std::uint8_t>(p, p + n);
    }
    return a;
}

void write_volume(const std::filesystem::path& path, const HmvArray& a) {
    const auto bytes = encode_hmv(a);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw VolumeError(VolumeErrc::io, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw VolumeError(VolumeErrc::io, "write failed for " + path.string());
}

HmvArray read_volume(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw VolumeError(VolumeErrc::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), {});
    return decode_hmv(bytes);
}

HmvArray to_hmv(const BiomarkerVolume& v) {
    return {{static_cast<std::uint32_t>(kChannels), static_cast<std::uint32_t>(v.dims.z),
             static_cast<std::uint32_t>(v.dims.h), static_cast<std::uint32_t>(v.dims.w)},
            v.values};
}

HmvArray to_hmv(const MaskVolume& m) {
    return {{static_cast<std::uint32_t>(m.dims.z), static_cast<std::uint32_t>(m.dims.h),
             static_cast<std::uint32_t>(m.dims.w)},
            m.values};
}

HmvArray to_hmv(const Volume3& v) {
    return {{static_cast<std::uint32_t>(v.dims.z), static_cast<std::uint32_t>(v.dims.h),
             static_cast<std::uint32_t>(v.dims.w)},
            v.values};
}

BiomarkerVolume biomarkers_from_hmv(const HmvArray& a) {
    if (a.dtype() != DType::f32 || a.dims.size() != 4 || a.dims[0] != kChannels) {
        throw std::invalid_argument("HMV: expected a 6 x Z x H x W f32 biomarker array");
    }
    BiomarkerVolume v(Dims3{a.dims[1], a.dims[2], a.dims[3]});
    v.values = std::get<0>(a.payload);
    return v;
}

MaskVolume mask_from_hmv(const HmvArray& a) {
    if (a.dtype() != DType::u8 || a.dims.size() != 3) {
        throw std::invalid_argument("HMV: expected a Z x H x W u8 mask array");
    }
    MaskVolume m(Dims3{a.dims[0], a.dims[1], a.dims[2]});
    m.values = std::get<1>(a.payload);
    return m;
}

Volume3 volume_from_hmv(const HmvArray& a) {
    if (a.dtype() != DType::f32 || a.dims.size() != 3) {
        throw std::invalid_argument("HMV: expected a Z x H x W f32 array");
    }
    Volume3 v(Dims3{a.dims[0], a.dims[1], a.dims[2]});
    v.values = std::get<0>(a.payload);
    return v;
}

}  // namespace hbrnet

#include "hbrnet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace hbrnet::ckpt {

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    }
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw std::runtime_error("HBRW: truncated checkpoint");
        }
    }
    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f = 0.0F;
        std::memcpy(&f, &bits, sizeof f);
        return f;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(bytes_.begin() + static_cast<long>(pos_),
                      bytes_.begin() + static_cast<long>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const std::vector<NamedArray>& arrays) {
    std::vector<std::uint8_t> out{'H', 'B', 'R', 'W'};
    put_u32(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        if (a.name.size() > 0xffff || a.dims.size() > 0xff) {
            throw std::invalid_argument("HBRW: name or rank too large for " + a.name);
        }
        std::size_t n = 1;
        for (auto d : a.dims) n *= d;
        if (n != a.data.size()) {
            throw std::invalid_argument("HBRW: data length does not match dims for " + a.name);
        }
        put_u16(out, static_cast<std::uint16_t>(a.name.size()));
        out.insert(out.end(), a.name.begin(), a.name.end());
        put_u8(out, static_cast<std::uint8_t>(a.dims.size()));
        for (auto d : a.dims) put_u32(out, d);
        for (auto f : a.data) put_f32(out, f);
    }
    return out;
}

std::vector<NamedArray> deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "HBRW", 4) != 0) {
        throw std::runtime_error("HBRW: bad magic");
    }
    Reader r(bytes);
    r.str(4);
    const std::uint32_t count = r.u32();
    std::vector<NamedArray> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.str(r.u16());
        const std::uint8_t rank = r.u8();
        std::uint64_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            a.dims.push_back(r.u32());
            n *= a.dims.back();
            if (n > (1ULL << 34)) {
                throw std::runtime_error("HBRW: tensor dims overflow for " + a.name);
            }
        }
        r.need(n * 4);
        a.data.resize(n);
        for (auto& f : a.data) f = r.f32();
        out.push_back(std::move(a));
    }
    if (!r.done()) {
        throw std::runtime_error("HBRW: trailing bytes after last tensor");
    }
    return out;
}

template <typename T>
std::vector<NamedArray> to_arrays(const nn::ParamList<T>& params) {
    std::vector<NamedArray> out;
    for (const auto& p : params.items()) {
        NamedArray a;
        a.name = p.name;
        for (auto d : p.tensor.shape()) a.dims.push_back(static_cast<std::uint32_t>(d));
        a.data.reserve(p.tensor.numel());
        for (auto v : p.tensor.data()) a.data.push_back(static_cast<float>(v));
        out.push_back(std::move(a));
    }
    return out;
}

template <typename T>
void load_into(const std::vector<NamedArray>& arrays, const nn::ParamList<T>& params) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (const auto& p : params.items()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint is missing tensor " + p.name);
        }
        const NamedArray& a = *it->second;
        ad::Shape shape(a.dims.begin(), a.dims.end());
        if (shape != p.tensor.shape()) {
            throw std::runtime_error("checkpoint tensor " + p.name + " has shape " +
                                     ad::shape_str(shape) + ", expected " +
                                     ad::shape_str(p.tensor.shape()));
        }
        auto dst = ad::Tensor<T>(p.tensor).data();
        for (std::size_t i = 0; i < a.data.size(); ++i) dst[i] = static_cast<T>(a.data[i]);
    }
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw std::runtime_error("write failed for " + path.string());
    }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

template std::vector<NamedArray> to_arrays(const nn::ParamList<float>&);
template std::vector<NamedArray> to_arrays(const nn::ParamList<double>&);
template void load_into(const std::vector<NamedArray>&, const nn::ParamList<float>&);
template void load_into(const std::vector<NamedArray>&, const nn::ParamList<double>&);

}  // namespace hbrnet::ckpt

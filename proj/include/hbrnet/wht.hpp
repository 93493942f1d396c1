#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hbrnet::wht {

enum class Ordering { natural, sequency };

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline unsigned log2_exact(std::size_t n) {
    unsigned m = 0;
    while ((std::size_t{1} << m) < n) {
        ++m;
    }
    return m;
}

inline std::size_t next_power_of_two(std::size_t n) {
    std::size_t p = 1;
    while (p < n) {
        p <<= 1;
    }
    return p;
}

/// Transform of length 2^order with orthonormal scaling (1/sqrt(n) per application).
struct WhtPlan {
    unsigned order = 0;
    Ordering ordering = Ordering::natural;

    std::size_t length() const { return std::size_t{1} << order; }
    static WhtPlan for_length(std::size_t n, Ordering ordering = Ordering::natural);
};

/// Counts additions and subtractions performed by the butterflies.
struct OpCounter {
    std::uint64_t add_sub = 0;
};

/// In-place unnormalized radix-2 butterflies (natural/Hadamard order). The
/// butterfly stage has no multiplications.
template <typename T>
void butterflies(std::span<T> x, OpCounter* counter = nullptr) {
    const std::size_t n = x.size();
    for (std::size_t h = 1; h < n; h <<= 1) {
        for (std::size_t i = 0; i < n; i += h << 1) {
            for (std::size_t j = i; j < i + h; ++j) {
                const T a = x[j];
                const T b = x[j + h];
                x[j] = a + b;
                x[j + h] = a - b;
            }
            if (counter != nullptr) {
                counter->add_sub += 2 * h;  // one add and one subtract per pair
            }
        }
    }
}

/// Orthonormal in-place transform in natural order.
template <typename T>
void fwht_inplace(std::span<T> x, OpCounter* counter = nullptr) {
    if (!is_power_of_two(x.size())) {
        throw std::invalid_argument("fwht: length " + std::to_string(x.size()) +
                                    " is not a power of two");
    }
    butterflies(x, counter);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(x.size())));
    for (auto& v : x) {
        v *= scale;
    }
}

/// Orthonormal separable 2-D transform of a row-major rows x cols plane.
template <typename T>
void fwht2d_inplace(std::span<T> plane, std::size_t rows, std::size_t cols) {
    if (!is_power_of_two(rows) || !is_power_of_two(cols)) {
        throw std::invalid_argument("fwht_2d: dims " + std::to_string(rows) + "x" +
                                    std::to_string(cols) + " are not powers of two");
    }
    if (plane.size() != rows * cols) {
        throw std::invalid_argument("fwht_2d: plane size does not match dims");
    }
    for (std::size_t r = 0; r < rows; ++r) {
        butterflies(plane.subspan(r * cols, cols));
    }
    // columns: butterflies across rows, vectorized over the row
    for (std::size_t h = 1; h < rows; h <<= 1) {
        for (std::size_t i = 0; i < rows; i += h << 1) {
            for (std::size_t j = i; j < i + h; ++j) {
                T* a = plane.data() + j * cols;
                T* b = plane.data() + (j + h) * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    const T u = a[c];
                    const T v = b[c];
                    a[c] = u + v;
                    b[c] = u - v;
                }
            }
        }
    }
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rows * cols)));
    for (auto& v : plane) {
        v *= scale;
    }
}

/// Natural index of the Hadamard row with the given sequency (sign-change count).
std::size_t sequency_to_natural_index(std::size_t s, unsigned order);

/// Dense Hadamard matrix H_m (orthonormal, natural order), row-major.
std::vector<double> hadamard_matrix(unsigned order);

enum class Direction { to_sequency, to_natural };

/// 2-D coefficient grid; rows and cols are powers of two.
struct CoeffGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    Ordering ordering = Ordering::natural;

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Plain real image, row-major.
struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

std::vector<double> fwht_1d(std::span<const double> x, const WhtPlan& plan,
                            OpCounter* counter = nullptr);

std::vector<double> sequency_reorder(std::span<const double> x, Direction direction);
CoeffGrid sequency_reorder(const CoeffGrid& grid, Direction direction);

CoeffGrid fwht_2d(const Image& image, Ordering ordering = Ordering::natural);
Image ifwht_2d(const CoeffGrid& coeffs);

/// Keeps the top-left K x K block of a sequency-ordered grid.
CoeffGrid lowpass_mask(const CoeffGrid& coeffs, std::size_t k);

/// Sequency low-pass of an image: keep the lowest K x K sequency block.
/// Dimensions must be powers of two.
Image sequency_lowpass(const Image& image, std::size_t k);

}  // namespace hbrnet::wht

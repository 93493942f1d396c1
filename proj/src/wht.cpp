#include "hbrnet/wht.hpp"

#include <algorithm>

namespace hbrnet::wht {

WhtPlan WhtPlan::for_length(std::size_t n, Ordering ordering) {
    if (!is_power_of_two(n)) {
        throw std::invalid_argument("WhtPlan: length " + std::to_string(n) +
                                    " is not a power of two");
    }
    return WhtPlan{log2_exact(n), ordering};
}

namespace {

std::size_t bit_reverse(std::size_t v, unsigned bits) {
    std::size_t r = 0;
    for (unsigned b = 0; b < bits; ++b) {
        r = (r << 1) | ((v >> b) & 1U);
    }
    return r;
}

// permutation[s] = natural index holding sequency s
std::vector<std::size_t> sequency_permutation(std::size_t n) {
    const unsigned order = log2_exact(n);
    std::vector<std::size_t> perm(n);
    for (std::size_t s = 0; s < n; ++s) {
        perm[s] = sequency_to_natural_index(s, order);
    }
    return perm;
}

void check_pow2(std::size_t n, const char* what) {
    if (!is_power_of_two(n)) {
        throw std::invalid_argument(std::string(what) + ": length " + std::to_string(n) +
                                    " is not a power of two");
    }
}

}  // namespace

std::size_t sequency_to_natural_index(std::size_t s, unsigned order) {
    // Walsh row s lives at bit-reversed Gray code of s in Hadamard order
    return bit_reverse(s ^ (s >> 1), order);
}

std::vector<double> hadamard_matrix(unsigned order) {
    std::vector<double> h{1.0};
    std::size_t n = 1;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (unsigned m = 0; m < order; ++m) {
        const std::size_t n2 = 2 * n;
        std::vector<double> next(n2 * n2);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                const double v = h[r * n + c] * inv_sqrt2;
                next[r * n2 + c] = v;
                next[r * n2 + c + n] = v;
                next[(r + n) * n2 + c] = v;
                next[(r + n) * n2 + c + n] = -v;
            }
        }
        h = std::move(next);
        n = n2;
    }
    return h;
}

std::vector<double> fwht_1d(std::span<const double> x, const WhtPlan& plan,
                            OpCounter* counter) {
    check_pow2(x.size(), "fwht_1d");
    if (x.size() != plan.length()) {
        throw std::invalid_argument("fwht_1d: input length " + std::to_string(x.size()) +
                                    " does not match plan length " +
                                    std::to_string(plan.length()));
    }
    std::vector<double> out(x.begin(), x.end());
    fwht_inplace(std::span<double>(out), counter);
    if (plan.ordering == Ordering::sequency) {
        out = sequency_reorder(out, Direction::to_sequency);
    }
    return out;
}

std::vector<double> sequency_reorder(std::span<const double> x, Direction direction) {
    check_pow2(x.size(), "sequency_reorder");
    const auto perm = sequency_permutation(x.size());
    std::vector<double> out(x.size());
    for (std::size_t s = 0; s < x.size(); ++s) {
        if (direction == Direction::to_sequency) {
            out[s] = x[perm[s]];
        } else {
            out[perm[s]] = x[s];
        }
    }
    return out;
}

CoeffGrid sequency_reorder(const CoeffGrid& grid, Direction direction) {
    check_pow2(grid.rows, "sequency_reorder");
    check_pow2(grid.cols, "sequency_reorder");
    const auto prow = sequency_permutation(grid.rows);
    const auto pcol = sequency_permutation(grid.cols);
    CoeffGrid out = grid;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            if (direction == Direction::to_sequency) {
                out.at(r, c) = grid.at(prow[r], pcol[c]);
            } else {
                out.at(prow[r], pcol[c]) = grid.at(r, c);
            }
        }
    }
    out.ordering = direction == Direction::to_sequency ? Ordering::sequency : Ordering::natural;
    return out;
}

CoeffGrid fwht_2d(const Image& image, Ordering ordering) {
    CoeffGrid g{image.rows, image.cols, image.values, Ordering::natural};
    fwht2d_inplace(std::span<double>(g.values), g.rows, g.cols);
    if (ordering == Ordering::sequency) {
        g = sequency_reorder(g, Direction::to_sequency);
    }
    return g;
}

Image ifwht_2d(const CoeffGrid& coeffs) {
    const CoeffGrid natural = coeffs.ordering == Ordering::sequency
                                  ? sequency_reorder(coeffs, Direction::to_natural)
                                  : coeffs;
    Image img{natural.rows, natural.cols, natural.values};
    // orthonormal and symmetric: the inverse is the forward transform
    fwht2d_inplace(std::span<double>(img.values), img.rows, img.cols);
    return img;
}

CoeffGrid lowpass_mask(const CoeffGrid& coeffs, std::size_t k) {
    if (k < 1 || k > std::min(coeffs.rows, coeffs.cols)) {
        throw std::invalid_argument("lowpass_mask: K = " + std::to_string(k) +
                                    " outside [1, " +
                                    std::to_string(std::min(coeffs.rows, coeffs.cols)) + "]");
    }
    CoeffGrid out = coeffs;
    for (std::size_t r = 0; r < out.rows; ++r) {
        for (std::size_t c = 0; c < out.cols; ++c) {
            if (r >= k || c >= k) {
                out.at(r, c) = 0.0;
            }
        }
    }
    return out;
}

Image sequency_lowpass(const Image& image, std::size_t k) {
    return ifwht_2d(lowpass_mask(fwht_2d(image, Ordering::sequency), k));
}

}  // namespace hbrnet::wht

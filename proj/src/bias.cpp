#include "hbrnet/bias.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "hbrnet/rng.hpp"
#include "hbrnet/wht.hpp"

namespace hbrnet::bias {

namespace {

std::size_t reflect(std::size_t i, std::size_t n) {
    if (n == 1) return 0;
    const std::size_t period = 2 * (n - 1);
    const std::size_t m = i % period;
    return m < n ? m : period - m;
}

// Keeps the K x K sequency block with the DC term removed, in place.
void lowpass_no_dc(std::vector<double>& plane, std::size_t rows, std::size_t cols, std::size_t k) {
    wht::fwht2d_inplace(std::span<double>(plane), rows, cols);
    const unsigned rbits = wht::log2_exact(rows);
    const unsigned cbits = wht::log2_exact(cols);
    std::vector<char> keep_r(rows, 0);
    std::vector<char> keep_c(cols, 0);
    for (std::size_t s = 0; s < std::min(k, rows); ++s) keep_r[wht::sequency_to_natural_index(s, rbits)] = 1;
    for (std::size_t s = 0; s < std::min(k, cols); ++s) keep_c[wht::sequency_to_natural_index(s, cbits)] = 1;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (!keep_r[r] || !keep_c[c] || (r == 0 && c == 0)) {
                plane[r * cols + c] = 0.0;
            }
        }
    }
    wht::fwht2d_inplace(std::span<double>(plane), rows, cols);
}

struct PaddedSlice {
    std::size_t rows;
    std::size_t cols;
    std::vector<double> logv;
    std::vector<char> mask;
    std::size_t count = 0;
};

PaddedSlice pad_slice(const Volume3& x, const MaskVolume& mask, std::size_t z, double log_floor) {
    const auto& d = x.dims;
    PaddedSlice s{wht::next_power_of_two(d.h), wht::next_power_of_two(d.w), {}, {}};
    s.logv.resize(s.rows * s.cols);
    s.mask.resize(s.rows * s.cols);
    for (std::size_t r = 0; r < s.rows; ++r) {
        const std::size_t sr = reflect(r, d.h);
        for (std::size_t c = 0; c < s.cols; ++c) {
            const std::size_t sc = reflect(c, d.w);
            const double v = std::max<double>(x.at(z, sr, sc), log_floor);
            s.logv[r * s.cols + c] = std::log(v);
            s.mask[r * s.cols + c] = mask.at(z, sr, sc) != 0 ? 1 : 0;
            s.count += s.mask[r * s.cols + c];
        }
    }
    return s;
}

// In-mask centered residual of (logv - field), zero outside the mask.
std::vector<double> centered_residual(const PaddedSlice& s, const std::vector<double>& field) {
    double mean = 0.0;
    for (std::size_t i = 0; i < s.logv.size(); ++i) {
        if (s.mask[i]) mean += s.logv[i] - field[i];
    }
    mean /= static_cast<double>(s.count);
    std::vector<double> r(s.logv.size(), 0.0);
    for (std::size_t i = 0; i < s.logv.size(); ++i) {
        if (s.mask[i]) r[i] = s.logv[i] - field[i] - mean;
    }
    return r;
}

// Least-squares fit of an in-mask residual by the K x K low-sequency Walsh
// functions of the padded slice. The DC component is fitted then dropped so
// the estimate carries no global gain. Plain low-pass of the zero-filled
// residual only converges to this fit geometrically.
class MaskedBasis {
public:
    MaskedBasis(const PaddedSlice& s, std::size_t k) : s_(s) {
        const std::size_t kr = std::min(k, s.rows);
        const std::size_t kc = std::min(k, s.cols);
        const unsigned rbits = wht::log2_exact(s.rows);
        const unsigned cbits = wht::log2_exact(s.cols);
        for (std::size_t a = 0; a < kr; ++a) {
            for (std::size_t b = 0; b < kc; ++b) {
                terms_.push_back({wht::sequency_to_natural_index(a, rbits), wht::sequency_to_natural_index(b, cbits)});
            }
        }
        const auto n = static_cast<Eigen::Index>(terms_.size());
        Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
        Eigen::VectorXd row(n);
        for (std::size_t y = 0; y < s.rows; ++y) {
            for (std::size_t x = 0; x < s.cols; ++x) {
                if (!s.mask[y * s.cols + x]) continue;
                eval(y, x, row);
                gram.noalias() += row * row.transpose();
            }
        }
        solver_.compute(gram);
    }

    std::vector<double> fit(const std::vector<double>& residual) const {
        const auto n = static_cast<Eigen::Index>(terms_.size());
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
        Eigen::VectorXd row(n);
        for (std::size_t y = 0; y < s_.rows; ++y) {
            for (std::size_t x = 0; x < s_.cols; ++x) {
                const std::size_t i = y * s_.cols + x;
                if (!s_.mask[i]) continue;
                eval(y, x, row);
                rhs += residual[i] * row;
            }
        }
        Eigen::VectorXd coef = solver_.solve(rhs);
        coef[0] = 0.0;
        std::vector<double> out(residual.size());
        for (std::size_t y = 0; y < s_.rows; ++y) {
            for (std::size_t x = 0; x < s_.cols; ++x) {
                eval(y, x, row);
                out[y * s_.cols + x] = row.dot(coef);
            }
        }
        return out;
    }

private:
    void eval(std::size_t y, std::size_t x, Eigen::VectorXd& row) const {
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            const bool odd = (std::popcount(terms_[t].first & y) + std::popcount(terms_[t].second & x)) % 2;
            row[static_cast<Eigen::Index>(t)] = odd ? -1.0 : 1.0;
        }
    }

    const PaddedSlice& s_;
    std::vector<std::pair<std::size_t, std::size_t>> terms_;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> solver_;
};

}  // namespace

BiasField synth_bias_field(const BiasSpec& spec, Dims3 dims) {
    if (dims.voxels() == 0) {
        throw std::invalid_argument("synth_bias_field: dims must be positive");
    }
    if (spec.amplitude < 0.0 || spec.max_sequency < 1) {
        throw std::invalid_argument("synth_bias_field: amplitude >= 0 and max_sequency >= 1 required");
    }
    BiasField field(dims, 1.0F);
    if (spec.amplitude == 0.0) {
        return field;
    }
    const std::size_t rows = wht::next_power_of_two(dims.h);
    const std::size_t cols = wht::next_power_of_two(dims.w);
    const std::size_t knots = dims.z == 1 ? 1 : std::max<std::size_t>(2, spec.z_knots);
    RngStream rng(spec.seed);

    std::vector<std::vector<double>> key(knots);
    for (auto& plane : key) {
        wht::CoeffGrid g{rows, cols, std::vector<double>(rows * cols, 0.0), wht::Ordering::sequency};
        for (std::size_t r = 0; r < std::min(spec.max_sequency, rows); ++r) {
            for (std::size_t c = 0; c < std::min(spec.max_sequency, cols); ++c) {
                if (r == 0 && c == 0) continue;
                g.at(r, c) = rng.normal();
            }
        }
        plane = wht::ifwht_2d(g).values;
    }

    std::vector<double> logb(dims.voxels());
    for (std::size_t z = 0; z < dims.z; ++z) {
        std::size_t k0 = 0;
        double t = 0.0;
        if (knots > 1) {
            const double pos = static_cast<double>(z) * static_cast<double>(knots - 1) /
                               static_cast<double>(dims.z - 1);
            k0 = std::min<std::size_t>(static_cast<std::size_t>(pos), knots - 2);
            t = pos - static_cast<double>(k0);
        }
        for (std::size_t y = 0; y < dims.h; ++y) {
            for (std::size_t x = 0; x < dims.w; ++x) {
                const std::size_t i = y * cols + x;
                double v = key[k0][i];
                if (knots > 1) v = (1.0 - t) * key[k0][i] + t * key[k0 + 1][i];
                logb[(z * dims.h + y) * dims.w + x] = v;
            }
        }
    }
    double mean = 0.0;
    for (double v : logb) mean += v;
    mean /= static_cast<double>(logb.size());
    double var = 0.0;
    for (double v : logb) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(logb.size()));
    const double gain = sd > 0.0 ? spec.amplitude / sd : 0.0;
    for (std::size_t i = 0; i < logb.size(); ++i) {
        field.values[i] = static_cast<float>(std::exp((logb[i] - mean) * gain));
    }
    return field;
}

BiomarkerVolume apply_bias(const BiomarkerVolume& truth, const BiasField& field,
                           const NoiseSpec& noise, const std::array<bool, kChannels>& channels) {
    if (!(truth.dims == field.dims)) {
        throw std::invalid_argument("apply_bias: field dims do not match the volume");
    }
    if (noise.sigma < 0.0) {
        throw std::invalid_argument("apply_bias: noise sigma must be nonnegative");
    }
    BiomarkerVolume out = truth;
    const std::size_t n = truth.dims.voxels();
    RngStream rng(noise.seed);
    for (std::size_t c = 0; c < kChannels; ++c) {
        if (!channels[c]) continue;
        const double sd = noise.sigma * kChannelScale[c];
        for (std::size_t i = 0; i < n; ++i) {
            float v = truth.values[c * n + i] * field.values[i];
            if (sd > 0.0) v += static_cast<float>(sd * rng.normal());
            out.values[c * n + i] = v;
        }
    }
    clamp_to_physical(out);
    return out;
}

ReferenceResult reference_correct(const Volume3& x, const MaskVolume& mask,
                                  const ReferenceConfig& config) {
    if (!(x.dims == mask.dims)) {
        throw std::invalid_argument("reference_correct: mask dims do not match the volume");
    }
    if (config.k < 1 || config.iters < 1) {
        throw std::invalid_argument("reference_correct: K >= 1 and iters >= 1 required");
    }
    if (std::none_of(mask.values.begin(), mask.values.end(), [](auto v) { return v != 0; })) {
        throw std::invalid_argument("reference_correct: mask is empty");
    }
    const auto& d = x.dims;
    std::vector<double> logfield(d.voxels(), 0.0);
    for (std::size_t z = 0; z < d.z; ++z) {
        PaddedSlice s = pad_slice(x, mask, z, config.log_floor);
        if (s.count == 0) continue;
        std::vector<double> field(s.logv.size(), 0.0);
        const MaskedBasis basis(s, config.k);
        for (std::size_t it = 0; it < config.iters; ++it) {
            const auto r = basis.fit(centered_residual(s, field));
            for (std::size_t i = 0; i < field.size(); ++i) field[i] += r[i];
        }
        for (std::size_t y = 0; y < d.h; ++y) {
            for (std::size_t xx = 0; xx < d.w; ++xx) {
                logfield[(z * d.h + y) * d.w + xx] = field[y * s.cols + xx];
            }
        }
    }
    double mean = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < logfield.size(); ++i) {
        if (mask.values[i]) {
            mean += logfield[i];
            ++count;
        }
    }
    mean /= static_cast<double>(count);
    ReferenceResult res{Volume3(d), BiasField(d)};
    for (std::size_t i = 0; i < logfield.size(); ++i) {
        const double f = logfield[i] - mean;
        res.field.values[i] = static_cast<float>(std::exp(f));
        res.corrected.values[i] = static_cast<float>(std::max<double>(x.values[i], config.log_floor) *
                                                     std::exp(-f));
    }
    return res;
}

double masked_lowpass_energy(const Volume3& x, const MaskVolume& mask, std::size_t k,
                             double log_floor) {
    double energy = 0.0;
    for (std::size_t z = 0; z < x.dims.z; ++z) {
        PaddedSlice s = pad_slice(x, mask, z, log_floor);
        if (s.count == 0) continue;
        auto r = centered_residual(s, std::vector<double>(s.logv.size(), 0.0));
        lowpass_no_dc(r, s.rows, s.cols, k);
        for (double v : r) energy += v * v;
    }
    return energy;
}

double masked_rmse(const Volume3& a, const Volume3& b, const MaskVolume& mask) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        if (mask.values[i]) {
            const double d = static_cast<double>(a.values[i]) - b.values[i];
            acc += d * d;
            ++n;
        }
    }
    if (n == 0) {
        throw std::invalid_argument("masked_rmse: empty mask");
    }
    return std::sqrt(acc / static_cast<double>(n));
}

}  // namespace hbrnet::bias

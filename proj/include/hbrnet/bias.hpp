#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hbrnet/volume.hpp"

namespace hbrnet::bias {

/// Strictly positive multiplicative field over a volume.
using BiasField = Volume3;

struct BiasSpec {
    double amplitude = 0.2;      // std of log B over the volume
    std::size_t max_sequency = 4;  // in-plane band limit of log B
    std::size_t z_knots = 3;     // key slices interpolated along z
    std::uint64_t seed = 0;
};

struct NoiseSpec {
    /// Additive Gaussian std, in units of each channel's reference scale
    /// (1 for fractions and diffusivities, 100 ms for T2).
    double sigma = 0.0;
    std::uint64_t seed = 0;
};

/// Reference scale per channel used for noise and loss normalization.
inline constexpr std::array<float, kChannels> kChannelScale{1.0F, 1.0F, 1.0F, 1.0F, 100.0F, 100.0F};

/// Band-limited log-normal field: per key slice, the inverse WHT of random
/// coefficients confined to the lowest max_sequency^2 sequency block (DC = 0),
/// linearly interpolated along z, scaled to std = amplitude, and renormalized
/// to geometric mean 1.
BiasField synth_bias_field(const BiasSpec& spec, Dims3 dims);

/// observed = B * truth + noise on the selected channels, then clamped to the
/// physical ranges. Unselected channels are copied unchanged.
BiomarkerVolume apply_bias(const BiomarkerVolume& truth, const BiasField& field,
                           const NoiseSpec& noise,
                           const std::array<bool, kChannels>& channels = {true, true, true, true,
                                                                          true, true});

struct ReferenceConfig {
    std::size_t k = 4;
    std::size_t iters = 5;
    double log_floor = 1e-4;
};

struct ReferenceResult {
    Volume3 corrected;
    BiasField field;
};

/// Iterative log-domain surrogate for N4: each iteration takes the in-mask
/// centered log residual, keeps its K x K sequency block (DC excluded) after
/// reflect-padding to powers of two, and accumulates it into the log field.
/// The field is normalized to geometric mean 1 inside the mask.
ReferenceResult reference_correct(const Volume3& x, const MaskVolume& mask,
                                  const ReferenceConfig& config = {});

/// Sum over slices of the non-DC K x K sequency energy of the in-mask
/// centered log image. reference_correct never increases it.
double masked_lowpass_energy(const Volume3& x, const MaskVolume& mask, std::size_t k,
                             double log_floor = 1e-4);

/// RMS of (a - b) over voxels where mask is set.
double masked_rmse(const Volume3& a, const Volume3& b, const MaskVolume& mask);

}  // namespace hbrnet::bias

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hbrnet/bias.hpp"
#include "hbrnet/checkpoint.hpp"
#include "hbrnet/nn.hpp"
#include "hbrnet/optim.hpp"
#include "hbrnet/volume.hpp"

namespace hbrnet::hunet {

using ad::Mode;
using ad::Tensor;

struct HUNetConfig {
    std::size_t levels = 3;
    /// Feature channels per level; size must equal levels.
    std::vector<std::size_t> widths{8, 16, 32};
    double coeff_dropout_rate = 0.1;
    /// Slices are reflect-padded to pad_target x pad_target (a power of two
    /// divisible by 2^(levels-1)) on entry and cropped on exit.
    std::size_t pad_target = 64;
    /// Per-channel floor c of the log map u = log(max(x, c) / c).
    std::array<float, kChannels> log_floor{1e-3F, 1e-3F, 1e-2F, 1e-2F, 1.0F, 1.0F};

    void validate() const;
};

/// One transform-domain block: WHT, coefficient dropout, learnable
/// soft-threshold, WHT back, 1x1 channel mix with bias, ReLU.
template <typename T>
struct Block {
    Tensor<T> thresholds;  // C_in x P x P, nonnegative
    nn::Conv2d<T> mix;     // 1x1, C_in -> C_out

    void collect(nn::ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Params {
    HUNetConfig config;
    std::vector<Block<T>> encoder;  // levels
    std::vector<Block<T>> decoder;  // levels - 1, decoder[l] outputs level l
    /// 1x1 conv over [decoder output, log input] -> 6 log channels.
    nn::Conv2d<T> head;

    /// Checkpoint order: encoder, decoder, head.
    nn::ParamList<T> parameters() const;
    /// Sets every threshold to max(t, 0).
    void clamp_thresholds();
    /// Deep copy; plain copies share tensor storage.
    Params clone() const;
};

/// Random mixers, zero thresholds, and a head that passes the log input
/// through unchanged, so the untrained network is the identity.
template <typename T>
Params<T> init_params(const HUNetConfig& config, std::uint64_t seed);

/// Zero thresholds and identity mixers everywhere (decoders select the
/// skip path); the network reproduces max(x, floor) up to round-off.
template <typename T>
Params<T> identity_params(const HUNetConfig& config);

/// Zeroes each non-DC coefficient of every trailing 2-D plane with
/// probability rate and scales survivors by 1 / (1 - rate).
template <typename T>
Tensor<T> coeff_dropout(const Tensor<T>& coeffs, double rate, RngStream& rng);

/// x: N x 6 x H x W biomarker values -> N x 6 x H x W corrected values.
/// rng is used only in train mode.
template <typename T>
Tensor<T> forward(const Params<T>& params, const Tensor<T>& x, Mode mode, RngStream* rng = nullptr);

struct Stage1Sample {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> input;   // 6 x H x W observed
    std::vector<float> target;  // 6 x H x W reference-corrected
    std::vector<std::uint8_t> mask;  // H x W loss mask
};

enum class ReferenceMode { per_channel, shared };

/// Reference targets for every slice with a nonempty mask: per-channel (or
/// shared log-mean) reference correction on the prostate mask; loss mask is
/// the prostate mask dilated by dilation voxels.
std::vector<Stage1Sample> make_samples(const BiomarkerVolume& observed, const MaskVolume& prostate,
                                       const bias::ReferenceConfig& ref, ReferenceMode mode,
                                       std::size_t dilation);

/// sum over masked voxels and channels of ((pred - target) / scale_c)^2,
/// divided by the masked voxel count.
template <typename T>
Tensor<T> masked_loss(const Tensor<T>& pred, const std::vector<const Stage1Sample*>& batch);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch = 8;
    optim::AdamWConfig adamw{1e-3, 0.9, 0.999, 0.0, 1e-8};
    std::uint64_t seed = 0;
};

struct TrainResult {
    Params<float> params;
    std::vector<double> epoch_loss;
};

/// Minimizes masked_loss over the samples; thresholds are clamped to >= 0
/// after every optimizer step. on_epoch receives (epoch, mean loss).
TrainResult train(const std::vector<Stage1Sample>& samples, const HUNetConfig& config,
                  const TrainConfig& train_config,
                  const std::function<void(std::size_t, double)>& on_epoch = {});

/// CSV text "epoch,mean_loss" with one line per epoch.
std::string loss_log_csv(const std::vector<double>& epoch_loss);

class DecouplingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Immutable eval-only Stage-1 corrector with a content hash of its
/// serialized parameters.
class FrozenStage1 {
public:
    explicit FrozenStage1(const Params<float>& params);

    const HUNetConfig& config() const { return params_.config; }
    const std::vector<std::uint8_t>& checkpoint_bytes() const { return bytes_; }
    std::uint64_t hash() const { return hash_; }
    std::string hash_hex() const { return ckpt::hex64(hash_); }

    /// Eval-mode forward. Rejects inputs that require a gradient.
    Tensor<float> forward(const Tensor<float>& x) const;
    /// Corrects every slice of a volume.
    BiomarkerVolume correct(const BiomarkerVolume& observed) const;

    /// Re-serializes the held parameters and throws DecouplingError if the
    /// bytes no longer hash to the recorded value.
    void verify() const;
    /// Throws DecouplingError unless hash() equals expected.
    void verify_against(std::uint64_t expected) const;

private:
    Params<float> params_;
    std::vector<std::uint8_t> bytes_;
    std::uint64_t hash_ = 0;
};

/// Serialized parameters in HBRW layout.
std::vector<std::uint8_t> save_params(const Params<float>& params);
Params<float> load_params(const std::vector<std::uint8_t>& bytes, const HUNetConfig& config);

}  // namespace hbrnet::hunet

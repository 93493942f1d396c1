#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hbrnet/checkpoint.hpp"
#include "hbrnet/nn.hpp"
#include "hbrnet/optim.hpp"
#include "hbrnet/patch.hpp"

namespace hbrnet::hunet {
class FrozenStage1;
}

namespace hbrnet::detector {

using ad::Mode;
using ad::Tensor;

inline constexpr std::size_t kPlanes = 3 * kChannels;  // 18
inline constexpr std::size_t kProjSize = 16;
inline constexpr std::size_t kFeatureSize = 32;
inline constexpr std::size_t kFeatureChannels = 64;

struct ResNetConfig {
    std::array<std::size_t, 4> blocks{2, 2, 2, 2};
    std::size_t width = 16;
};

struct LossConfig {
    enum class Kind { bce, focal };
    Kind kind = Kind::focal;
    double gamma = 2.0;
    double alpha = 0.75;
};

/// Scalar losses on a probability; both are evaluated as -log p_t.
double bce_loss(double p, int y);
/// alpha < 0 means alpha_t = 1 for both classes.
double focal_loss(double p, int y, double gamma, double alpha);

template <typename T>
struct BasicBlock {
    nn::Conv2d<T> conv1;
    nn::BatchNorm2d<T> bn1;
    nn::Conv2d<T> conv2;
    nn::BatchNorm2d<T> bn2;
    std::optional<nn::Conv2d<T>> shortcut;
    std::optional<nn::BatchNorm2d<T>> shortcut_bn;

    BasicBlock(std::size_t in, std::size_t out, std::size_t stride, RngStream& rng);
    Tensor<T> operator()(const Tensor<T>& x, Mode mode);
    void collect(nn::ParamList<T>& out, const std::string& prefix) const;
    void collect_buffers(nn::ParamList<T>& out, const std::string& prefix) const;
    std::vector<nn::BatchNorm2d<T>*> norms();
};

/// Upsampling projection plus residual classifier producing one logit per patch.
template <typename T>
class Model {
public:
    Model(std::size_t patch_size, const ResNetConfig& config, std::uint64_t seed);

    std::size_t patch_size() const { return patch_size_; }
    const ResNetConfig& config() const { return config_; }

    /// N x 3 x 6 x S x S -> N x 18 x 16 x 16, slice-major planes.
    Tensor<T> project(const Tensor<T>& x);
    /// N x 3 x 6 x S x S -> N x 64 x 32 x 32.
    Tensor<T> upsample_project(const Tensor<T>& x, Mode mode);
    /// N x 64 x 32 x 32 -> N logits.
    Tensor<T> classify(const Tensor<T>& features, Mode mode);
    Tensor<T> logits(const Tensor<T>& x, Mode mode) { return classify(upsample_project(x, mode), mode); }

    /// Sets the final linear layer to zero so every output is 0.5.
    void zero_head();

    /// Trainable tensors, in checkpoint order.
    nn::ParamList<T> parameters() const;
    /// Trainable tensors followed by batchnorm running statistics.
    nn::ParamList<T> state() const;
    void load_state(const std::vector<ckpt::NamedArray>& arrays);

    nn::Conv2d<T> projection;  // 1x1, 18 -> 18
    nn::Conv2d<T> lift;        // 3x3, 18 -> 64, pad 1
    nn::BatchNorm2d<T> lift_bn;
    std::vector<BasicBlock<T>> blocks;
    nn::Linear<T> fc;

private:
    std::size_t patch_size_;
    ResNetConfig config_;
};

struct TrainConfig {
    std::size_t epochs = 4;
    std::size_t batch = 32;
    /// Random subset drawn each epoch; 0 uses the whole dataset.
    std::size_t patches_per_epoch = 1024;
    optim::AdamWConfig adamw{1e-4, 0.9, 0.999, 1e-4, 1e-8};
    LossConfig loss;
    ResNetConfig resnet;
    std::uint64_t seed = 0;
};

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double train_acc = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
};

/// Trains the model in place on the patch dataset. When stage1 is given its
/// hash is checked against expected_stage1_hash before the first and after
/// every epoch; a mismatch throws hunet::DecouplingError.
TrainResult train(Model<float>& model, const patch::PatchDataset& data, const TrainConfig& config,
                  const hunet::FrozenStage1* stage1, std::uint64_t expected_stage1_hash,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// CSV text "epoch,loss,train_acc".
std::string log_csv(const std::vector<EpochLog>& log);

/// Eval-mode probabilities for consecutive patches of a flat buffer.
std::vector<float> predict(Model<float>& model, std::span<const float> patches, std::size_t count,
                           std::size_t batch = 64);

std::vector<std::uint8_t> save_model(const Model<float>& model);
Model<float> load_model(const std::vector<std::uint8_t>& bytes, std::size_t patch_size,
                        const ResNetConfig& config);

}  // namespace hbrnet::detector

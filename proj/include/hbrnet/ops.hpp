#pragma once

#include <optional>
#include <vector>

#include "hbrnet/tensor.hpp"

namespace hbrnet::ad {

// Elementwise arithmetic (identical shapes).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);

/// y[n,c,...] = x[n,c,...] * scale[c] + shift[c]; constants are not learned.
template <typename T>
Tensor<T> channel_affine_const(const Tensor<T>& x, const std::vector<T>& scale,
                               const std::vector<T>& shift);

/// NCHW convolution with an O x C x k x k kernel, k odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, std::size_t stride, std::size_t padding);

/// Running statistics of a batchnorm layer; not part of the graph.
template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

enum class Mode { train, eval };

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, T momentum = T(0.1), T eps = T(1e-5));

/// x: N x I, weight: O x I, bias: O.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias);

/// NCHW -> NC
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
/// NCHW -> N,C,H/2,W/2 (H and W even).
template <typename T> Tensor<T> avg_pool2x2(const Tensor<T>& x);
/// NCHW -> N,C,2H,2W with each pixel replicated into a 2x2 block.
template <typename T> Tensor<T> nearest_upsample2x(const Tensor<T>& x);
/// Nearest resize: source index floor(dst * in / out).
template <typename T>
Tensor<T> nearest_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

/// y = sign(x) * max(|x| - t, 0). Thresholds match x's shape or its trailing dims.
template <typename T>
Tensor<T> softshrink(const Tensor<T>& x, const Tensor<T>& thresholds);

/// Orthonormal Walsh-Hadamard transform over the last two dims (powers of two).
template <typename T> Tensor<T> wht2d(const Tensor<T>& x);

/// Reflect-pads the last two dims on the bottom/right up to (out_h, out_w).
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);
/// Keeps the top-left (h, w) block of the last two dims.
template <typename T> Tensor<T> crop(const Tensor<T>& x, std::size_t h, std::size_t w);

/// Concatenates two NCHW tensors along the channel dim.
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// sum(weight * (pred - target)^2) / normalizer; target and weight are constants.
template <typename T>
Tensor<T> weighted_sse(const Tensor<T>& pred, const std::vector<T>& target,
                       const std::vector<T>& weight, T normalizer);

/// Mean binary cross-entropy computed from logits.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<int>& labels);

/// Mean focal loss computed from logits.
template <typename T>
Tensor<T> focal_with_logits(const Tensor<T>& logits, const std::vector<int>& labels, T gamma,
                            T alpha);

}  // namespace hbrnet::ad

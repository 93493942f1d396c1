#pragma once

#include <cstdint>
#include <vector>

#include "hbrnet/tensor.hpp"

namespace hbrnet::optim {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
};

struct OptimState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::uint64_t step = 0;
    AdamWConfig config;
};

/// AdamW with decoupled weight decay. Moments are kept in 64-bit.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<ad::Tensor<T>> params, AdamWConfig config);

    /// One update from the grads currently stored on the parameters.
    /// Parameters without a grad buffer are treated as having zero gradient.
    void step();
    void zero_grad();

    const OptimState& state() const { return state_; }
    const std::vector<ad::Tensor<T>>& params() const { return params_; }

private:
    std::vector<ad::Tensor<T>> params_;
    OptimState state_;
};

/// Functional form of a single AdamW update on raw buffers.
void adamw_update(std::vector<double>& param, const std::vector<double>& grad,
                  std::vector<double>& m, std::vector<double>& v, std::uint64_t step,
                  const AdamWConfig& config);

}  // namespace hbrnet::optim

#include "hbrnet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hbrnet::optim {

namespace {
void validate(const AdamWConfig& c) {
    if (!(c.lr > 0.0)) {
        throw std::invalid_argument("AdamW: learning rate must be positive");
    }
    if (c.beta1 < 0.0 || c.beta1 >= 1.0 || c.beta2 < 0.0 || c.beta2 >= 1.0) {
        throw std::invalid_argument("AdamW: betas must lie in [0, 1)");
    }
    if (c.weight_decay < 0.0 || !(c.eps > 0.0)) {
        throw std::invalid_argument("AdamW: weight_decay must be >= 0 and eps > 0");
    }
}

template <typename P, typename G>
void update_buffers(P* param, const G* grad, std::size_t n, std::vector<double>& m,
                    std::vector<double>& v, std::uint64_t step, const AdamWConfig& c) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad == nullptr ? 0.0 : static_cast<double>(grad[i]);
        double p = static_cast<double>(param[i]);
        p -= c.lr * c.weight_decay * p;
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        param[i] = static_cast<P>(p);
    }
}
}  // namespace

void adamw_update(std::vector<double>& param, const std::vector<double>& grad,
                  std::vector<double>& m, std::vector<double>& v, std::uint64_t step,
                  const AdamWConfig& config) {
    validate(config);
    if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
        throw std::invalid_argument("adamw_update: buffer sizes do not match the parameter");
    }
    if (step == 0) {
        throw std::invalid_argument("adamw_update: step count starts at 1");
    }
    update_buffers(param.data(), grad.data(), param.size(), m, v, step, config);
}

template <typename T>
AdamW<T>::AdamW(std::vector<ad::Tensor<T>> params, AdamWConfig config) : params_(std::move(params)) {
    validate(config);
    state_.config = config;
    for (const auto& p : params_) {
        state_.first_moment.emplace_back(p.numel(), 0.0);
        state_.second_moment.emplace_back(p.numel(), 0.0);
    }
}

template <typename T>
void AdamW<T>::step() {
    ++state_.step;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        const T* g = p.has_grad() ? p.grad().data() : nullptr;
        update_buffers(p.data().data(), g, p.numel(), state_.first_moment[k],
                       state_.second_moment[k], state_.step, state_.config);
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) {
        p.zero_grad();
    }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace hbrnet::optim

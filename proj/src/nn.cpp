#include "hbrnet/nn.hpp"

#include <cmath>

namespace hbrnet::nn {

template <typename T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, RngStream& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) {
        v = static_cast<T>(rng.uniform(-bound, bound));
    }
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_,
                  std::size_t padding_, bool with_bias, RngStream& rng)
    : weight(Shape{out, in, k, k}, T(0), true), stride(stride_), padding(padding_) {
    kaiming_uniform(weight, in * k * k, rng);
    if (with_bias) {
        bias = Tensor<T>(Shape{out}, T(0), true);
    }
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
    out.add(prefix + "weight", weight);
    if (bias) {
        out.add(prefix + "bias", *bias);
    }
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma(Shape{channels}, T(1), true), beta(Shape{channels}, T(0), true), state(channels) {}

template <typename T>
void BatchNorm2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
    out.add(prefix + "gamma", gamma);
    out.add(prefix + "beta", beta);
}

template <typename T>
void BatchNorm2d<T>::export_buffers(ParamList<T>& out, const std::string& prefix) const {
    out.add(prefix + "running_mean", Tensor<T>(Shape{state.running_mean.size()}, state.running_mean));
    out.add(prefix + "running_var", Tensor<T>(Shape{state.running_var.size()}, state.running_var));
}

template <typename T>
void BatchNorm2d<T>::import_buffers(const Tensor<T>& mean, const Tensor<T>& var) {
    if (mean.numel() != state.running_mean.size() || var.numel() != state.running_var.size()) {
        throw ad::ShapeError("batchnorm buffers: channel count mismatch");
    }
    state.running_mean.assign(mean.data().begin(), mean.data().end());
    state.running_var.assign(var.data().begin(), var.data().end());
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, bool with_bias, RngStream& rng)
    : weight(Shape{out, in}, T(0), true) {
    kaiming_uniform(weight, in, rng);
    if (with_bias) {
        bias = Tensor<T>(Shape{out}, T(0), true);
    }
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
    out.add(prefix + "weight", weight);
    if (bias) {
        out.add(prefix + "bias", *bias);
    }
}

template void kaiming_uniform(Tensor<float>&, std::size_t, RngStream&);
template void kaiming_uniform(Tensor<double>&, std::size_t, RngStream&);
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct BatchNorm2d<float>;
template struct BatchNorm2d<double>;
template struct Linear<float>;
template struct Linear<double>;

}  // namespace hbrnet::nn

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hbrnet/ops.hpp"
#include "hbrnet/rng.hpp"

namespace hbrnet::nn {

using ad::Mode;
using ad::Shape;
using ad::Tensor;

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

/// Ordered collection of named parameters; order defines checkpoint layout.
template <typename T>
class ParamList {
public:
    void add(std::string name, Tensor<T> t) { items_.push_back({std::move(name), std::move(t)}); }
    void append(const ParamList& other, const std::string& prefix) {
        for (const auto& p : other.items_) {
            items_.push_back({prefix + p.name, p.tensor});
        }
    }
    const std::vector<NamedParam<T>>& items() const { return items_; }
    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& p : items_) out.push_back(p.tensor);
        return out;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.tensor.numel();
        return n;
    }
    void zero_grad() {
        for (auto& p : items_) p.tensor.zero_grad();
    }

private:
    std::vector<NamedParam<T>> items_;
};

/// Kaiming-uniform with fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, RngStream& rng);

template <typename T>
struct Conv2d {
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t padding,
           bool with_bias, RngStream& rng);
    Tensor<T> operator()(const Tensor<T>& x) const {
        return ad::conv2d(x, weight, bias, stride, padding);
    }
    void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma;
    Tensor<T> beta;
    ad::BatchNormState<T> state;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t channels);
    Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
        return ad::batchnorm2d(x, gamma, beta, state, mode, momentum, eps);
    }
    void collect(ParamList<T>& out, const std::string& prefix) const;
    /// Copies of the running statistics, for checkpoints.
    void export_buffers(ParamList<T>& out, const std::string& prefix) const;
    void import_buffers(const Tensor<T>& mean, const Tensor<T>& var);
};

template <typename T>
struct Linear {
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool with_bias, RngStream& rng);
    Tensor<T> operator()(const Tensor<T>& x) const { return ad::linear(x, weight, bias); }
    void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace hbrnet::nn

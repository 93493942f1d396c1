#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hbrnet/rng.hpp"
#include "hbrnet/tensor.hpp"

namespace gradcheck {

using hbrnet::ad::Tensor;

template <typename T>
struct Probe {
    std::vector<Tensor<T>> leaves;
    std::function<Tensor<T>()> loss;
};

struct Options {
    double eps = 1e-7;
    /// Entries probed per leaf; larger leaves are sampled with a fixed seed.
    std::size_t max_entries = 48;
    std::uint64_t seed = 11;
};

struct Result {
    double rel_err = 0.0;
    std::size_t worst_leaf = 0;
    std::size_t probed = 0;
    /// Entries whose one-sided slopes disagree: the probe straddles a kink
    /// (relu, softshrink) and the central difference is meaningless there.
    std::size_t kinks = 0;
};

/// Central differences on the 64-bit probe against analytic gradients from
/// either the 64-bit probe or, when given, a 32-bit probe holding the same
/// values. Error per leaf is ||analytic - numeric|| / max(||analytic||,
/// ||numeric||) over the probed smooth entries; the worst leaf is reported.
inline Result check(Probe<double>& ref, Probe<float>* single = nullptr, const Options& opt = {}) {
    std::vector<std::vector<double>> analytic;
    if (single != nullptr) {
        for (auto& l : single->leaves) {
            l.set_requires_grad(true);
            l.zero_grad();
        }
        single->loss().backward();
        for (auto& l : single->leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
    } else {
        for (auto& l : ref.leaves) {
            l.set_requires_grad(true);
            l.zero_grad();
        }
        ref.loss().backward();
        for (auto& l : ref.leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
    }

    Result result;
    hbrnet::RngStream rng(opt.seed);
    double f0 = 0.0;
    {
        hbrnet::ad::NoGradGuard guard;
        f0 = ref.loss().item();
    }
    for (std::size_t li = 0; li < ref.leaves.size(); ++li) {
        auto& leaf = ref.leaves[li];
        std::vector<std::size_t> idx(leaf.numel());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (idx.size() > opt.max_entries) {
            for (std::size_t i = 0; i < opt.max_entries; ++i) {
                std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
            }
            idx.resize(opt.max_entries);
        }
        double diff2 = 0.0;
        double a2 = 0.0;
        double n2 = 0.0;
        for (std::size_t k : idx) {
            const double saved = leaf[k];
            double fp = 0.0;
            double fm = 0.0;
            {
                hbrnet::ad::NoGradGuard guard;
                leaf[k] = saved + opt.eps;
                fp = ref.loss().item();
                leaf[k] = saved - opt.eps;
                fm = ref.loss().item();
            }
            leaf[k] = saved;
            ++result.probed;
            const double up = (fp - f0) / opt.eps;
            const double down = (f0 - fm) / opt.eps;
            if (std::abs(up - down) > 1e-2 * std::max(std::abs(up), std::abs(down)) + 1e-8) {
                ++result.kinks;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double a = analytic[li][k];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
        const double rel = std::sqrt(diff2) / denom;
        if (rel > result.rel_err) {
            result.rel_err = rel;
            result.worst_leaf = li;
        }
    }
    return result;
}

/// Deterministic values in [lo, hi] whose magnitude stays at least gap away
/// from zero, keeping piecewise-linear ops off their kinks.
inline std::vector<double> values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                  double gap = 0.05) {
    hbrnet::RngStream rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) {
        do {
            x = rng.uniform(lo, hi);
        } while (std::abs(x) < gap);
    }
    return v;
}

template <typename T>
Tensor<T> leaf(const hbrnet::ad::Shape& shape, const std::vector<double>& v) {
    return Tensor<T>(shape, std::vector<T>(v.begin(), v.end()), true);
}

}  // namespace gradcheck

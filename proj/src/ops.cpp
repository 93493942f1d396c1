#include "hbrnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "hbrnet/wht.hpp"

namespace hbrnet::ad {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;

template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
    throw ShapeError(op + ": " + msg);
}

template <typename T>
void require_same_shape(const std::string& op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename T>
void require_rank(const std::string& op, const Tensor<T>& a, std::size_t rank, const char* name) {
    if (a.rank() != rank) {
        fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
    }
}

template <typename T>
T sigmoid_scalar(T z) {
    if (z >= T(0)) {
        return T(1) / (T(1) + std::exp(-z));
    }
    const T e = std::exp(z);
    return e / (T(1) + e);
}

// log(1 + exp(z)) without overflow
template <typename T>
T softplus(T z) {
    return z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

// Copies the k x k receptive fields of one CHW image into a (C*k*k) x (OH*OW) matrix.
template <typename T>
void im2col(const T* img, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* col) {
    const std::size_t plane = oh * ow;
    for (std::size_t c = 0; c < c_in; ++c) {
        const T* src = img + c * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* dst = col + ((c * k + ki) * k + kj) * plane;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(pad);
                    T* row = dst + y * ow;
                    if (iy < 0 || iy >= static_cast<long>(h)) {
                        std::fill(row, row + ow, T(0));
                        continue;
                    }
                    const T* srow = src + static_cast<std::size_t>(iy) * w;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = static_cast<long>(x * stride + kj) - static_cast<long>(pad);
                        row[x] = (ix < 0 || ix >= static_cast<long>(w))
                                     ? T(0)
                                     : srow[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* img) {
    const std::size_t plane = oh * ow;
    for (std::size_t c = 0; c < c_in; ++c) {
        T* dst = img + c * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* src = col + ((c * k + ki) * k + kj) * plane;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) {
                        continue;
                    }
                    T* drow = dst + static_cast<std::size_t>(iy) * w;
                    const T* srow = src + y * ow;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = static_cast<long>(x * stride + kj) - static_cast<long>(pad);
                        if (ix >= 0 && ix < static_cast<long>(w)) {
                            drow[static_cast<std::size_t>(ix)] += srow[x];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("add", a, b);
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    p->grad[i] += self.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("sub", a, b);
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (pa->requires_grad) pa->grad[i] += self.grad[i];
            if (pb->requires_grad) pb->grad[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("mul", a, b);
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T g = self.grad[i];
            const T av = pa->data[i];
            const T bv = pb->data[i];
            if (pa->requires_grad) pa->grad[i] += g * bv;
            if (pb->requires_grad) pb->grad[i] += g * av;
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * s;
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [s](Node<T>& self) {
        auto& p = self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p->grad[i] += self.grad[i] * s;
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (auto v : a.data()) {
        acc += v;
    }
    return make_result<T>({1}, {acc}, {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        const T g = self.grad[0];
        for (auto& v : p->grad) {
            v += g;
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Buffer<T> out(a.data().begin(), a.data().end());
    return make_result<T>(std::move(shape), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p->grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] > T(0) ? a[i] : T(0);
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            // relu'(0) = 0
            if (p->data[i] > T(0)) {
                p->grad[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = sigmoid_scalar(a[i]);
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T s = self.data[i];
            p->grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    Buffer<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(a[i]);
    }
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
        auto& p = self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p->grad[i] += self.grad[i] * self.data[i];
        }
    });
}

template <typename T>
Tensor<T> channel_affine_const(const Tensor<T>& x, const std::vector<T>& scale_c,
                               const std::vector<T>& shift_c) {
    if (x.rank() < 2 || x.dim(1) != scale_c.size() || x.dim(1) != shift_c.size()) {
        fail("channel_affine_const", "channel count of " + shape_str(x.shape()) +
                                         " does not match " + std::to_string(scale_c.size()) +
                                         " constants");
    }
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    const std::size_t inner = x.numel() / (n * c);
    Buffer<T> out(x.numel());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                out[off + i] = x[off + i] * scale_c[ch] + shift_c[ch];
            }
        }
    }
    return make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                          [scale_c, n, c, inner](Node<T>& self) {
                              auto& p = self.parents[0];
                              for (std::size_t b = 0; b < n; ++b) {
                                  for (std::size_t ch = 0; ch < c; ++ch) {
                                      const std::size_t off = (b * c + ch) * inner;
                                      for (std::size_t i = 0; i < inner; ++i) {
                                          p->grad[off + i] += self.grad[off + i] * scale_c[ch];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, std::size_t stride, std::size_t padding) {
    require_rank("conv2d", input, 4, "input");
    require_rank("conv2d", weight, 4, "weight");
    const std::size_t n = input.dim(0);
    const std::size_t c_in = input.dim(1);
    const std::size_t h = input.dim(2);
    const std::size_t w = input.dim(3);
    const std::size_t c_out = weight.dim(0);
    const std::size_t k = weight.dim(2);
    if (weight.dim(1) != c_in) {
        fail("conv2d", "input channels (dim 1) " + std::to_string(c_in) +
                           " do not match weight in-channels (dim 1) " +
                           std::to_string(weight.dim(1)));
    }
    if (weight.dim(3) != k || k % 2 == 0) {
        fail("conv2d", "kernel must be square with odd size, got " + shape_str(weight.shape()));
    }
    if (stride == 0) {
        fail("conv2d", "stride must be positive");
    }
    if (h + 2 * padding < k || w + 2 * padding < k) {
        fail("conv2d", "kernel " + std::to_string(k) + " larger than padded input " +
                           shape_str(input.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != c_out)) {
        fail("conv2d", "bias (dim 0) must have " + std::to_string(c_out) + " entries, got " +
                           shape_str(bias->shape()));
    }
    const std::size_t oh = (h + 2 * padding - k) / stride + 1;
    const std::size_t ow = (w + 2 * padding - k) / stride + 1;
    const std::size_t ckk = c_in * k * k;
    const std::size_t plane = oh * ow;
    const bool direct = (k == 1 && stride == 1 && padding == 0);

    Buffer<T> out(n * c_out * plane);
    Buffer<T> col(direct ? 0 : ckk * plane);
    ConstMapMat<T> wmat(weight.data().data(), c_out, ckk);
    for (std::size_t b = 0; b < n; ++b) {
        const T* img = input.data().data() + b * c_in * h * w;
        const T* colp = img;
        if (!direct) {
            im2col(img, c_in, h, w, k, stride, padding, oh, ow, col.data());
            colp = col.data();
        }
        ConstMapMat<T> cmat(colp, ckk, plane);
        MapMat<T> omat(out.data() + b * c_out * plane, c_out, plane);
        omat.noalias() = wmat * cmat;
        if (bias) {
            for (std::size_t o = 0; o < c_out; ++o) {
                omat.row(o).array() += (*bias)[o];
            }
        }
    }

    std::vector<NodePtr<T>> parents{input.node_ptr(), weight.node_ptr()};
    if (bias) {
        parents.push_back(bias->node_ptr());
    }
    return make_result<T>(
        {n, c_out, oh, ow}, std::move(out), std::move(parents),
        [=](Node<T>& self) {
            auto& pin = self.parents[0];
            auto& pw = self.parents[1];
            const bool has_bias = self.parents.size() > 2;
            Buffer<T> colbuf(direct ? 0 : ckk * plane);
            Buffer<T> dcol(ckk * plane);
            ConstMapMat<T> wm(pw->data.data(), c_out, ckk);
            for (std::size_t b = 0; b < n; ++b) {
                ConstMapMat<T> g(self.grad.data() + b * c_out * plane, c_out, plane);
                const T* img = pin->data.data() + b * c_in * h * w;
                if (pw->requires_grad) {
                    const T* colp = img;
                    if (!direct) {
                        im2col(img, c_in, h, w, k, stride, padding, oh, ow, colbuf.data());
                        colp = colbuf.data();
                    }
                    ConstMapMat<T> cm(colp, ckk, plane);
                    MapMat<T> gw(pw->grad.data(), c_out, ckk);
                    gw.noalias() += g * cm.transpose();
                }
                if (has_bias && self.parents[2]->requires_grad) {
                    auto& gb = self.parents[2]->grad;
                    for (std::size_t o = 0; o < c_out; ++o) {
                        gb[o] += g.row(o).sum();
                    }
                }
                if (pin->requires_grad) {
                    T* gin = pin->grad.data() + b * c_in * h * w;
                    if (direct) {
                        MapMat<T> gi(gin, c_in, plane);
                        gi.noalias() += wm.transpose() * g;
                    } else {
                        MapMat<T> dc(dcol.data(), ckk, plane);
                        dc.noalias() = wm.transpose() * g;
                        col2im(dcol.data(), c_in, h, w, k, stride, padding, oh, ow, gin);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, T momentum, T eps) {
    require_rank("batchnorm2d", input, 4, "input");
    const std::size_t n = input.dim(0);
    const std::size_t c = input.dim(1);
    const std::size_t plane = input.dim(2) * input.dim(3);
    if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c ||
        state.running_var.size() != c) {
        fail("batchnorm2d", "channel count (dim 1) " + std::to_string(c) +
                                " does not match affine/running parameters");
    }
    if (mode == Mode::train && n < 2) {
        fail("batchnorm2d", "train mode needs a batch of at least 2, got " + std::to_string(n));
    }
    const std::size_t m = n * plane;
    std::vector<T> mu(c);
    std::vector<T> inv_std(c);
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = input.data().data() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mean_c = s / static_cast<double>(m);
            double v = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = input.data().data() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mean_c;
                    v += d * d;
                }
            }
            const double var_b = v / static_cast<double>(m);
            mu[ch] = static_cast<T>(mean_c);
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var_b + static_cast<double>(eps)));
            const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var_b;
            state.running_mean[ch] =
                static_cast<T>((1.0 - momentum) * state.running_mean[ch] + momentum * mean_c);
            state.running_var[ch] =
                static_cast<T>((1.0 - momentum) * state.running_var[ch] + momentum * unbiased);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = state.running_mean[ch];
            inv_std[ch] = T(1) / std::sqrt(state.running_var[ch] + eps);
        }
    }
    Buffer<T> xhat(input.numel());
    Buffer<T> out(input.numel());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const T xh = (input[off + i] - mu[ch]) * inv_std[ch];
                xhat[off + i] = xh;
                out[off + i] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    const bool train = mode == Mode::train;
    return make_result<T>(
        input.shape(), std::move(out), {input.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
        [xhat = std::move(xhat), inv_std, n, c, plane, m, train](Node<T>& self) {
            auto& pin = self.parents[0];
            auto& pg = self.parents[1];
            auto& pb = self.parents[2];
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sum_g = 0.0;
                double sum_gx = 0.0;
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t off = (b * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += self.grad[off + i];
                        sum_gx += static_cast<double>(self.grad[off + i]) * xhat[off + i];
                    }
                }
                if (pg->requires_grad) pg->grad[ch] += static_cast<T>(sum_gx);
                if (pb->requires_grad) pb->grad[ch] += static_cast<T>(sum_g);
                if (!pin->requires_grad) {
                    continue;
                }
                const T gam = pg->data[ch];
                const T k = gam * inv_std[ch];
                const T mean_g = static_cast<T>(sum_g / static_cast<double>(m));
                const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(m));
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t off = (b * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        if (train) {
                            pin->grad[off + i] +=
                                k * (self.grad[off + i] - mean_g - xhat[off + i] * mean_gx);
                        } else {
                            pin->grad[off + i] += k * self.grad[off + i];
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias) {
    require_rank("linear", x, 2, "input");
    require_rank("linear", weight, 2, "weight");
    const std::size_t n = x.dim(0);
    const std::size_t in = x.dim(1);
    const std::size_t outd = weight.dim(0);
    if (weight.dim(1) != in) {
        fail("linear", "input features (dim 1) " + std::to_string(in) +
                           " do not match weight (dim 1) " + std::to_string(weight.dim(1)));
    }
    if (bias && bias->numel() != outd) {
        fail("linear", "bias (dim 0) must have " + std::to_string(outd) + " entries");
    }
    Buffer<T> out(n * outd);
    ConstMapMat<T> xm(x.data().data(), n, in);
    ConstMapMat<T> wm(weight.data().data(), outd, in);
    MapMat<T> om(out.data(), n, outd);
    om.noalias() = xm * wm.transpose();
    if (bias) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t o = 0; o < outd; ++o) {
                om(r, o) += (*bias)[o];
            }
        }
    }
    std::vector<NodePtr<T>> parents{x.node_ptr(), weight.node_ptr()};
    if (bias) {
        parents.push_back(bias->node_ptr());
    }
    return make_result<T>({n, outd}, std::move(out), std::move(parents), [n, in, outd](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        ConstMapMat<T> g(self.grad.data(), n, outd);
        if (px->requires_grad) {
            MapMat<T> gx(px->grad.data(), n, in);
            ConstMapMat<T> wm2(pw->data.data(), outd, in);
            gx.noalias() += g * wm2;
        }
        if (pw->requires_grad) {
            MapMat<T> gw(pw->grad.data(), outd, in);
            ConstMapMat<T> xm2(px->data.data(), n, in);
            gw.noalias() += g.transpose() * xm2;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& gb = self.parents[2]->grad;
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t o = 0; o < outd; ++o) {
                    gb[o] += g(r, o);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require_rank("global_avg_pool", x, 4, "input");
    const std::size_t nc = x.dim(0) * x.dim(1);
    const std::size_t plane = x.dim(2) * x.dim(3);
    Buffer<T> out(nc);
    for (std::size_t i = 0; i < nc; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
        out[i] = s / static_cast<T>(plane);
    }
    return make_result<T>({x.dim(0), x.dim(1)}, std::move(out), {x.node_ptr()},
                          [nc, plane](Node<T>& self) {
                              auto& p = self.parents[0];
                              for (std::size_t i = 0; i < nc; ++i) {
                                  const T g = self.grad[i] / static_cast<T>(plane);
                                  for (std::size_t j = 0; j < plane; ++j) p->grad[i * plane + j] += g;
                              }
                          });
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
    require_rank("avg_pool2x2", x, 4, "input");
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        fail("avg_pool2x2", "spatial dims must be even, got " + shape_str(x.shape()));
    }
    const std::size_t nc = x.dim(0) * x.dim(1);
    const std::size_t oh = h / 2;
    const std::size_t ow = w / 2;
    Buffer<T> out(nc * oh * ow);
    for (std::size_t i = 0; i < nc; ++i) {
        const T* src = x.data().data() + i * h * w;
        T* dst = out.data() + i * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) {
            for (std::size_t c = 0; c < ow; ++c) {
                dst[r * ow + c] = T(0.25) * (src[2 * r * w + 2 * c] + src[2 * r * w + 2 * c + 1] +
                                             src[(2 * r + 1) * w + 2 * c] +
                                             src[(2 * r + 1) * w + 2 * c + 1]);
            }
        }
    }
    return make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node_ptr()},
                          [nc, h, w, oh, ow](Node<T>& self) {
                              auto& p = self.parents[0];
                              for (std::size_t i = 0; i < nc; ++i) {
                                  T* dst = p->grad.data() + i * h * w;
                                  const T* g = self.grad.data() + i * oh * ow;
                                  for (std::size_t r = 0; r < h; ++r) {
                                      for (std::size_t c = 0; c < w; ++c) {
                                          dst[r * w + c] += T(0.25) * g[(r / 2) * ow + c / 2];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> nearest_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    require_rank("nearest_resize", x, 4, "input");
    if (out_h == 0 || out_w == 0) {
        fail("nearest_resize", "output size must be positive");
    }
    const std::size_t nc = x.dim(0) * x.dim(1);
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    std::vector<std::size_t> ry(out_h);
    std::vector<std::size_t> rx(out_w);
    for (std::size_t i = 0; i < out_h; ++i) ry[i] = i * h / out_h;
    for (std::size_t j = 0; j < out_w; ++j) rx[j] = j * w / out_w;
    Buffer<T> out(nc * out_h * out_w);
    for (std::size_t i = 0; i < nc; ++i) {
        const T* src = x.data().data() + i * h * w;
        T* dst = out.data() + i * out_h * out_w;
        for (std::size_t r = 0; r < out_h; ++r) {
            for (std::size_t c = 0; c < out_w; ++c) {
                dst[r * out_w + c] = src[ry[r] * w + rx[c]];
            }
        }
    }
    return make_result<T>({x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x.node_ptr()},
                          [nc, h, w, out_h, out_w, ry, rx](Node<T>& self) {
                              auto& p = self.parents[0];
                              for (std::size_t i = 0; i < nc; ++i) {
                                  T* dst = p->grad.data() + i * h * w;
                                  const T* g = self.grad.data() + i * out_h * out_w;
                                  for (std::size_t r = 0; r < out_h; ++r) {
                                      for (std::size_t c = 0; c < out_w; ++c) {
                                          dst[ry[r] * w + rx[c]] += g[r * out_w + c];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> nearest_upsample2x(const Tensor<T>& x) {
    require_rank("nearest_upsample2x", x, 4, "input");
    return nearest_resize(x, 2 * x.dim(2), 2 * x.dim(3));
}

template <typename T>
Tensor<T> softshrink(const Tensor<T>& x, const Tensor<T>& thresholds) {
    const auto& xs = x.shape();
    const auto& ts = thresholds.shape();
    if (ts.size() > xs.size() || !std::equal(ts.rbegin(), ts.rend(), xs.rbegin())) {
        fail("softshrink", "thresholds " + shape_str(ts) + " do not match trailing dims of " +
                               shape_str(xs));
    }
    for (auto t : thresholds.data()) {
        if (t < T(0) || !std::isfinite(t)) {
            fail("softshrink", "thresholds must be finite and nonnegative");
        }
    }
    const std::size_t period = thresholds.numel();
    Buffer<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x[i];
        const T t = thresholds[i % period];
        out[i] = v > t ? v - t : (v < -t ? v + t : T(0));
    }
    return make_result<T>(xs, std::move(out), {x.node_ptr(), thresholds.node_ptr()},
                          [period](Node<T>& self) {
                              auto& px = self.parents[0];
                              auto& pt = self.parents[1];
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                  const T v = px->data[i];
                                  const T t = pt->data[i % period];
                                  // subgradient 0 at |x| = T
                                  if (v > t) {
                                      if (px->requires_grad) px->grad[i] += self.grad[i];
                                      if (pt->requires_grad) pt->grad[i % period] -= self.grad[i];
                                  } else if (v < -t) {
                                      if (px->requires_grad) px->grad[i] += self.grad[i];
                                      if (pt->requires_grad) pt->grad[i % period] += self.grad[i];
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> wht2d(const Tensor<T>& x) {
    if (x.rank() < 2) {
        fail("wht2d", "needs at least two dims, got " + shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(x.rank() - 2);
    const std::size_t cols = x.dim(x.rank() - 1);
    const std::size_t plane = rows * cols;
    const std::size_t planes = x.numel() / plane;
    Buffer<T> out(x.data().begin(), x.data().end());
    for (std::size_t p = 0; p < planes; ++p) {
        wht::fwht2d_inplace(std::span<T>(out.data() + p * plane, plane), rows, cols);
    }
    return make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                          [rows, cols, plane, planes](Node<T>& self) {
                              // orthonormal and symmetric: adjoint equals the transform
                              Buffer<T> g = self.grad;
                              for (std::size_t p = 0; p < planes; ++p) {
                                  wht::fwht2d_inplace(std::span<T>(g.data() + p * plane, plane),
                                                      rows, cols);
                              }
                              auto& px = self.parents[0];
                              for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i];
                          });
}

namespace {
// Reflect index without edge repeat: -1 -> 1, n -> n-2.
std::size_t reflect_index(std::size_t i, std::size_t n) {
    if (n == 1) {
        return 0;
    }
    const std::size_t period = 2 * (n - 1);
    std::size_t m = i % period;
    return m < n ? m : period - m;
}
}  // namespace

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() < 2) {
        fail("pad_reflect", "needs at least two dims");
    }
    const std::size_t h = x.dim(x.rank() - 2);
    const std::size_t w = x.dim(x.rank() - 1);
    if (out_h < h || out_w < w) {
        fail("pad_reflect", "target smaller than input " + shape_str(x.shape()));
    }
    if (out_h == h && out_w == w) {
        return x;
    }
    const std::size_t planes = x.numel() / (h * w);
    std::vector<std::size_t> src(out_h * out_w);
    for (std::size_t r = 0; r < out_h; ++r) {
        for (std::size_t c = 0; c < out_w; ++c) {
            src[r * out_w + c] = reflect_index(r, h) * w + reflect_index(c, w);
        }
    }
    Buffer<T> out(planes * out_h * out_w);
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < src.size(); ++i) {
            out[p * src.size() + i] = x[p * h * w + src[i]];
        }
    }
    Shape shape = x.shape();
    shape[shape.size() - 2] = out_h;
    shape[shape.size() - 1] = out_w;
    return make_result<T>(std::move(shape), std::move(out), {x.node_ptr()},
                          [src = std::move(src), planes, h, w](Node<T>& self) {
                              auto& px = self.parents[0];
                              const std::size_t op = src.size();
                              for (std::size_t p = 0; p < planes; ++p) {
                                  for (std::size_t i = 0; i < op; ++i) {
                                      px->grad[p * h * w + src[i]] += self.grad[p * op + i];
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t h, std::size_t w) {
    if (x.rank() < 2) {
        fail("crop", "needs at least two dims");
    }
    const std::size_t ih = x.dim(x.rank() - 2);
    const std::size_t iw = x.dim(x.rank() - 1);
    if (h > ih || w > iw || h == 0 || w == 0) {
        fail("crop", "crop size out of range for " + shape_str(x.shape()));
    }
    if (h == ih && w == iw) {
        return x;
    }
    const std::size_t planes = x.numel() / (ih * iw);
    Buffer<T> out(planes * h * w);
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                out[(p * h + r) * w + c] = x[(p * ih + r) * iw + c];
            }
        }
    }
    Shape shape = x.shape();
    shape[shape.size() - 2] = h;
    shape[shape.size() - 1] = w;
    return make_result<T>(std::move(shape), std::move(out), {x.node_ptr()},
                          [planes, h, w, ih, iw](Node<T>& self) {
                              auto& px = self.parents[0];
                              for (std::size_t p = 0; p < planes; ++p) {
                                  for (std::size_t r = 0; r < h; ++r) {
                                      for (std::size_t c = 0; c < w; ++c) {
                                          px->grad[(p * ih + r) * iw + c] +=
                                              self.grad[(p * h + r) * w + c];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank("concat_channels", a, 4, "first input");
    require_rank("concat_channels", b, 4, "second input");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        fail("concat_channels", "incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const std::size_t n = a.dim(0);
    const std::size_t ca = a.dim(1);
    const std::size_t cb = b.dim(1);
    const std::size_t plane = a.dim(2) * a.dim(3);
    Buffer<T> out(n * (ca + cb) * plane);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().data() + i * ca * plane, ca * plane, out.data() + i * (ca + cb) * plane);
        std::copy_n(b.data().data() + i * cb * plane, cb * plane,
                    out.data() + (i * (ca + cb) + ca) * plane);
    }
    return make_result<T>({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out),
                          {a.node_ptr(), b.node_ptr()}, [n, ca, cb, plane](Node<T>& self) {
                              auto& pa = self.parents[0];
                              auto& pb = self.parents[1];
                              for (std::size_t i = 0; i < n; ++i) {
                                  const T* g = self.grad.data() + i * (ca + cb) * plane;
                                  if (pa->requires_grad) {
                                      T* d = pa->grad.data() + i * ca * plane;
                                      for (std::size_t j = 0; j < ca * plane; ++j) d[j] += g[j];
                                  }
                                  if (pb->requires_grad) {
                                      T* d = pb->grad.data() + i * cb * plane;
                                      for (std::size_t j = 0; j < cb * plane; ++j)
                                          d[j] += g[ca * plane + j];
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> weighted_sse(const Tensor<T>& pred, const std::vector<T>& target,
                       const std::vector<T>& weight, T normalizer) {
    if (target.size() != pred.numel() || weight.size() != pred.numel()) {
        fail("weighted_sse", "target/weight length does not match prediction " +
                                 shape_str(pred.shape()));
    }
    if (!(normalizer > T(0))) {
        fail("weighted_sse", "normalizer must be positive");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - target[i];
        acc += weight[i] * d * d;
    }
    return make_result<T>({1}, {static_cast<T>(acc / normalizer)}, {pred.node_ptr()},
                          [target, weight, normalizer](Node<T>& self) {
                              auto& p = self.parents[0];
                              const T g = self.grad[0] * T(2) / normalizer;
                              for (std::size_t i = 0; i < target.size(); ++i) {
                                  p->grad[i] += g * weight[i] * (p->data[i] - target[i]);
                              }
                          });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<int>& labels) {
    return focal_with_logits(logits, labels, T(0), T(-1));
}

template <typename T>
Tensor<T> focal_with_logits(const Tensor<T>& logits, const std::vector<int>& labels, T gamma,
                            T alpha) {
    if (labels.size() != logits.numel()) {
        fail("focal_with_logits", "label count " + std::to_string(labels.size()) +
                                      " does not match logits " + shape_str(logits.shape()));
    }
    if (gamma < T(0)) {
        fail("focal_with_logits", "gamma must be nonnegative");
    }
    // alpha < 0 selects plain BCE weighting (alpha_t = 1 for both classes)
    const std::size_t n = labels.size();
    Buffer<T> dz(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const T s = labels[i] == 1 ? T(1) : T(-1);
        const T z = logits[i] * s;
        const T neg_log_pt = softplus(-z);
        const T one_minus_pt = sigmoid_scalar(-z);
        const T pt = sigmoid_scalar(z);
        const T at = alpha < T(0) ? T(1) : (labels[i] == 1 ? alpha : T(1) - alpha);
        const T mod = gamma == T(0) ? T(1) : std::pow(one_minus_pt, gamma);
        acc += at * mod * neg_log_pt;
        dz[i] = s * at * mod * (-gamma * pt * neg_log_pt - one_minus_pt) / static_cast<T>(n);
    }
    return make_result<T>({1}, {static_cast<T>(acc / static_cast<double>(n))}, {logits.node_ptr()},
                          [dz = std::move(dz)](Node<T>& self) {
                              auto& p = self.parents[0];
                              for (std::size_t i = 0; i < dz.size(); ++i) {
                                  p->grad[i] += self.grad[0] * dz[i];
                              }
                          });
}

#define HBRNET_INSTANTIATE(T)                                                                     \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> scale(const Tensor<T>&, T);                                                \
    template Tensor<T> sum(const Tensor<T>&);                                                     \
    template Tensor<T> mean(const Tensor<T>&);                                                    \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
    template Tensor<T> relu(const Tensor<T>&);                                                    \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
    template Tensor<T> exp(const Tensor<T>&);                                                     \
    template Tensor<T> channel_affine_const(const Tensor<T>&, const std::vector<T>&,              \
                                           const std::vector<T>&);                                \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,                                 \
                              const std::optional<Tensor<T>>&, std::size_t, std::size_t);         \
    template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                   BatchNormState<T>&, Mode, T, T);                               \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&,                                 \
                              const std::optional<Tensor<T>>&);                                   \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                         \
    template Tensor<T> avg_pool2x2(const Tensor<T>&);                                             \
    template Tensor<T> nearest_upsample2x(const Tensor<T>&);                                      \
    template Tensor<T> nearest_resize(const Tensor<T>&, std::size_t, std::size_t);                \
    template Tensor<T> softshrink(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> wht2d(const Tensor<T>&);                                                   \
    template Tensor<T> pad_reflect(const Tensor<T>&, std::size_t, std::size_t);                   \
    template Tensor<T> crop(const Tensor<T>&, std::size_t, std::size_t);                          \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> weighted_sse(const Tensor<T>&, const std::vector<T>&,                      \
                                    const std::vector<T>&, T);                                    \
    template Tensor<T> bce_with_logits(const Tensor<T>&, const std::vector<int>&);                \
    template Tensor<T> focal_with_logits(const Tensor<T>&, const std::vector<int>&, T, T);

HBRNET_INSTANTIATE(float)
HBRNET_INSTANTIATE(double)

#undef HBRNET_INSTANTIATE

}  // namespace hbrnet::ad

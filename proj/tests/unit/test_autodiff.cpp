#include <cmath>

#include "../support/grad_suite.hpp"
#include "doctest.h"
#include "hbrnet/nn.hpp"
#include "hbrnet/ops.hpp"
#include "hbrnet/optim.hpp"

using namespace hbrnet;
using ad::Mode;
using ad::Shape;
using ad::Tensor;

namespace {

// Direct quadruple-loop convolution with zero padding.
std::vector<double> conv_oracle(const std::vector<double>& x, const std::vector<double>& w, std::size_t n,
                                std::size_t c, std::size_t h, std::size_t wd, std::size_t o, std::size_t k,
                                std::size_t stride, std::size_t pad) {
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - k) / stride + 1;
    std::vector<double> y(n * o * oh * ow, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double s = 0.0;
                    for (std::size_t ic = 0; ic < c; ++ic)
                        for (std::size_t u = 0; u < k; ++u)
                            for (std::size_t v = 0; v < k; ++v) {
                                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                                s += w[((oc * c + ic) * k + u) * k + v] * x[((b * c + ic) * h + r) * wd + q];
                            }
                    y[((b * o + oc) * oh + i) * ow + j] = s;
                }
    return y;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("sum and square gradients") {
    Tensor<float> x(Shape{2, 3}, 1.5F, true);
    ad::sum(x).backward();
    for (float g : x.grad()) CHECK(g == 1.0F);
    Tensor<double> y(Shape{2}, std::vector<double>{1.0, 2.0}, true);
    ad::sum(ad::mul(y, y)).backward();
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward on a non-scalar is rejected") {
    Tensor<float> x(Shape{2}, 1.0F, true);
    auto y = ad::relu(x);
    CHECK_THROWS(y.backward());
}

TEST_CASE("conv2d examples and direct oracle") {
    Tensor<float> x(Shape{1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<float> id(Shape{1, 1, 1, 1}, 1.0F);
    auto y = ad::conv2d<float>(x, id, std::nullopt, 1, 0);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == x[i]);

    Tensor<float> ones(Shape{1, 1, 5, 5}, 1.0F);
    Tensor<float> k(Shape{1, 1, 3, 3}, 1.0F);
    auto s = ad::conv2d<float>(ones, k, std::nullopt, 1, 0);
    CHECK(s.shape() == Shape{1, 1, 3, 3});
    for (float v : s.data()) CHECK(v == 9.0F);

    for (std::size_t kk : {1UL, 3UL}) {
        for (std::size_t stride : {1UL, 2UL}) {
            const auto xv = gradcheck::values(2 * 3 * 8 * 8, 40 + kk, -1, 1, 0);
            const auto wv = gradcheck::values(4 * 3 * kk * kk, 50 + kk, -1, 1, 0);
            Tensor<float> xt(Shape{2, 3, 8, 8}, std::vector<float>(xv.begin(), xv.end()));
            Tensor<float> wt(Shape{4, 3, kk, kk}, std::vector<float>(wv.begin(), wv.end()));
            const std::size_t pad = kk / 2;
            auto out = ad::conv2d<float>(xt, wt, std::nullopt, stride, pad);
            std::vector<double> xf(xt.data().begin(), xt.data().end());
            std::vector<double> wf(wt.data().begin(), wt.data().end());
            const auto ref = conv_oracle(xf, wf, 2, 3, 8, 8, 4, kk, stride, pad);
            REQUIRE(out.numel() == ref.size());
            double worst = 0.0;
            for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out[i] - ref[i]));
            CHECK(worst < 1e-5);  // f32 accumulation over 27 terms
        }
    }
}

TEST_CASE("conv2d shape mismatch names the dimension") {
    Tensor<float> x(Shape{1, 2, 4, 4}, 1.0F);
    Tensor<float> w(Shape{1, 3, 3, 3}, 1.0F);
    try {
        (void)ad::conv2d<float>(x, w, std::nullopt, 1, 1);
        FAIL("expected a shape error");
    } catch (const ad::ShapeError& e) {
        CHECK(std::string(e.what()).find("channel") != std::string::npos);
    }
}

TEST_CASE("batchnorm train, constant channel and eval formula") {
    const auto xv = gradcheck::values(4 * 2 * 3 * 3, 60, -2, 2, 0);
    Tensor<double> x(Shape{4, 2, 3, 3}, xv);
    Tensor<double> g(Shape{2}, 1.0);
    Tensor<double> b(Shape{2}, 0.0);
    ad::BatchNormState<double> st(2);
    auto y = ad::batchnorm2d(x, g, b, st, Mode::train);
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 9; ++i) m += y[(n * 2 + c) * 9 + i];
        CHECK(std::abs(m / 36.0) < 1e-6);
    }
    CHECK(st.running_mean[0] != 0.0);

    Tensor<double> cst(Shape{2, 1, 2, 2}, 3.0);
    Tensor<double> g1(Shape{1}, 2.0);
    Tensor<double> b1(Shape{1}, 0.25);
    ad::BatchNormState<double> s1(1);
    const auto yc = ad::batchnorm2d(cst, g1, b1, s1, Mode::train);
    for (double v : yc.data()) CHECK(v == doctest::Approx(0.25));

    Tensor<double> e(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    ad::BatchNormState<double> se(1);
    se.running_mean = {2.0};
    se.running_var = {4.0};
    const auto before = se.running_mean;
    auto ye = ad::batchnorm2d(e, g1, b1, se, Mode::eval, 0.1, 1e-5);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(ye[i] == doctest::Approx((e[i] - 2.0) / std::sqrt(4.0 + 1e-5) * 2.0 + 0.25).epsilon(1e-14));
    }
    CHECK(se.running_mean == before);

    Tensor<double> one(Shape{1, 1, 2, 2}, 1.0);
    CHECK_THROWS(ad::batchnorm2d(one, g1, b1, s1, Mode::train));
}

TEST_CASE("relu, linear identity, global average pool") {
    Tensor<float> x(Shape{3}, std::vector<float>{-1, 0, 2});
    auto r = ad::relu(x);
    CHECK(r[0] == 0.0F);
    CHECK(r[1] == 0.0F);
    CHECK(r[2] == 2.0F);

    Tensor<float> in(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    Tensor<float> eye(Shape{3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor<float> zero(Shape{3}, 0.0F);
    auto l = ad::linear(in, eye, std::optional<Tensor<float>>(zero));
    for (std::size_t i = 0; i < 6; ++i) CHECK(l[i] == in[i]);

    Tensor<float> p(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    auto gap = ad::global_avg_pool(p);
    CHECK(gap.shape() == Shape{1, 1});
    CHECK(gap[0] == 2.5F);
}

TEST_CASE("nearest upsample examples and gradient") {
    Tensor<float> one(Shape{1, 1, 1, 1}, 5.0F);
    const auto up1 = ad::nearest_upsample2x(one);
    for (float v : up1.data()) CHECK(v == 5.0F);
    Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}, true);
    auto up = ad::nearest_upsample2x(x);
    const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (std::size_t i = 0; i < 16; ++i) CHECK(up[i] == expect[i]);
    ad::sum(up).backward();
    for (double g : x.grad()) CHECK(g == doctest::Approx(4.0));
}

TEST_CASE("softshrink examples and negative threshold") {
    Tensor<float> x(Shape{2}, std::vector<float>{3, -3});
    Tensor<float> t(Shape{2}, 1.0F);
    auto y = ad::softshrink(x, t);
    CHECK(y[0] == 2.0F);
    CHECK(y[1] == -2.0F);
    Tensor<float> z(Shape{2}, 0.0F);
    auto same = ad::softshrink(x, z);
    CHECK(same[0] == 3.0F);
    Tensor<float> neg(Shape{2}, -0.5F);
    CHECK_THROWS(ad::softshrink(x, neg));
}

TEST_CASE("no-grad guard records nothing") {
    Tensor<float> x(Shape{2}, 1.0F, true);
    ad::NoGradGuard guard;
    auto y = ad::sum(ad::mul(x, x));
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward outputs stay finite") {
    Tensor<float> x(Shape{4}, std::vector<float>{-80, -1, 1, 80});
    const auto s = ad::sigmoid(x);
    for (float v : s.data()) CHECK(std::isfinite(v));
    CHECK(std::isfinite(ad::bce_with_logits(x, {1, 0, 1, 0}).item()));
    CHECK(std::isfinite(ad::focal_with_logits(x, {1, 0, 1, 0}, 2.0F, 0.75F).item()));
}

TEST_CASE("gradient suite in 64-bit") {
    for (const auto& c : gradsuite::cases()) {
        CAPTURE(c.name);
        const auto r = c.run(false);
        CHECK(r.rel_err < 1e-4);
    }
}

}  // TEST_SUITE

TEST_SUITE("optim") {

TEST_CASE("zero gradient without decay leaves parameters") {
    Tensor<float> p(Shape{3}, 0.5F, true);
    p.zero_grad();
    optim::AdamW<float> opt({p}, {0.1, 0.9, 0.999, 0.0, 1e-8});
    opt.step();
    for (float v : p.data()) CHECK(v == 0.5F);
}

TEST_CASE("first step with unit gradient moves by lr") {
    Tensor<double> p(Shape{1}, 2.0, true);
    p.zero_grad();
    p.grad()[0] = 1.0;
    optim::AdamW<double> opt({p}, {0.1, 0.9, 0.999, 0.0, 1e-8});
    opt.step();
    CHECK(p[0] == doctest::Approx(2.0 - 0.1).epsilon(1e-7));
    CHECK(opt.state().step == 1);
}

TEST_CASE("decoupled weight decay") {
    Tensor<double> p(Shape{1}, 1.0, true);
    p.zero_grad();
    optim::AdamW<double> opt({p}, {0.1, 0.9, 0.999, 0.01, 1e-8});
    opt.step();
    CHECK(p[0] == doctest::Approx(0.999).epsilon(1e-12));
}

TEST_CASE("non-positive learning rate is rejected") {
    Tensor<double> p(Shape{1}, 1.0, true);
    CHECK_THROWS(optim::AdamW<double>({p}, {0.0, 0.9, 0.999, 0.0, 1e-8}));
}

TEST_CASE("same seed gives bit-identical trajectories") {
    auto trajectory = [] {
        RngStream rng(3);
        nn::Conv2d<float> conv(2, 3, 3, 1, 1, true, rng);
        nn::ParamList<float> plist;
        conv.collect(plist, "c.");
        optim::AdamW<float> opt(plist.tensors(), {1e-2, 0.9, 0.999, 0.01, 1e-8});
        const auto xv = gradcheck::values(2 * 2 * 4 * 4, 7);
        Tensor<float> x(Shape{2, 2, 4, 4}, std::vector<float>(xv.begin(), xv.end()));
        for (int s = 0; s < 10; ++s) {
            opt.zero_grad();
            ad::sum(ad::mul(conv(x), conv(x))).backward();
            opt.step();
        }
        return std::vector<float>(conv.weight.data().begin(), conv.weight.data().end());
    };
    CHECK(trajectory() == trajectory());
}

}  // TEST_SUITE

#include <cmath>

#include "cvl/ops.hpp"
#include "cvl/params.hpp"
#include "cvl/tape.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cvl;
using testutil::random_tensor;

namespace {

// Independent direct-convolution oracle: plain scalar loops, no shared
// code with the library kernels.
template <typename T>
tensor<T> conv_oracle(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias,
                      int stride, int pad, int groups) {
    const int64_t b = x.size(0), cin = x.size(1), h = x.size(2), wid = x.size(3);
    const int64_t cout = w.size(0), cin_g = w.size(1), k = w.size(2);
    const int64_t ho = (h + 2 * pad - k) / stride + 1;
    const int64_t wo = (wid + 2 * pad - k) / stride + 1;
    const int64_t cout_g = cout / groups;
    tensor<T> y({b, cout, ho, wo});
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t oh = 0; oh < ho; ++oh)
                for (int64_t ow = 0; ow < wo; ++ow) {
                    double acc = bias ? double((*bias)[co]) : 0.0;
                    const int64_t g = co / cout_g;
                    for (int64_t ci = 0; ci < cin_g; ++ci)
                        for (int64_t kh = 0; kh < k; ++kh)
                            for (int64_t kw = 0; kw < k; ++kw) {
                                const int64_t ih = oh * stride - pad + kh;
                                const int64_t iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= h || iw < 0 || iw >= wid) continue;
                                acc += double(x[((bi * cin + g * cin_g + ci) * h + ih) * wid + iw]) *
                                       double(w[((co * cin_g + ci) * k + kh) * k + kw]);
                            }
                    y[((bi * cout + co) * ho + oh) * wo + ow] = static_cast<T>(acc);
                }
    return y;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("tensor shape/buffer invariant") {
    CHECK_THROWS_WITH_AS(tensor<float>({2, 3}, {1.f, 2.f}), doctest::Contains("does not match"),
                         std::runtime_error);
    tensor<float> t({2, 3});
    CHECK(t.numel() == 6);
    tensor<float> s = tensor<float>::scalar(4.f);
    CHECK(s.rank() == 0);
    CHECK(s.numel() == 1);
}

TEST_CASE("conv2d identity kernel reproduces input") {
    tensor<float> x({1, 1, 5, 5});
    x.fill(1.f);
    tensor<float> w({1, 1, 3, 3});
    w[4] = 1.f;  // center tap
    ops::conv2d_attrs a;
    a.padding = 1;
    const tensor<float> y = ops::conv2d(x, w, nullptr, a);
    CHECK(y.shape == x.shape);
    for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y[i] == doctest::Approx(1.f));
    }
}

TEST_CASE("conv2d stem shape arithmetic") {
    rng r(3);
    const tensor<float> x = random_tensor<float>(r, {1, 3, 336, 336});
    const tensor<float> w = random_tensor<float>(r, {192, 3, 4, 4}, -0.05, 0.05);
    ops::conv2d_attrs a;
    a.stride = 4;
    const tensor<float> y = ops::conv2d(x, w, nullptr, a);
    CHECK(y.shape == std::vector<int64_t>{1, 192, 84, 84});
}

TEST_CASE("grouped conv2d matches the direct oracle") {
    rng r(11);
    const tensor<float> x = random_tensor<float>(r, {1, 4, 9, 9});
    const tensor<float> w = random_tensor<float>(r, {4, 1, 7, 7});
    const tensor<float> b = random_tensor<float>(r, {4});
    ops::conv2d_attrs a;
    a.padding = 3;
    a.groups = 4;
    const tensor<float> y = ops::conv2d(x, w, &b, a);
    const tensor<float> ref = conv_oracle(x, w, &b, 1, 3, 4);
    CHECK(y.shape == ref.shape);
    CHECK(testutil::max_abs_diff(y, ref) < 1e-6);
}

TEST_CASE("conv2d direct and im2col paths agree") {
    rng r(17);
    for (int groups : {1, 2, 8}) {
        const tensor<float> x = random_tensor<float>(r, {2, 8, 11, 13});
        const tensor<float> w = random_tensor<float>(r, {8, 8 / groups, 3, 3});
        const tensor<float> b = random_tensor<float>(r, {8});
        ops::conv2d_attrs a;
        a.padding = 1;
        a.groups = groups;

        ops::conv2d_algo() = ops::conv_algo::direct;
        const tensor<float> yd = ops::conv2d(x, w, &b, a);
        ops::conv2d_algo() = ops::conv_algo::im2col;
        const tensor<float> yi = ops::conv2d(x, w, &b, a);
        ops::conv2d_algo() = ops::conv_algo::auto_select;
        CHECK(testutil::max_abs_diff(yd, yi) < 1e-6);
    }
}

TEST_CASE("conv2d is linear in its input") {
    rng r(5);
    const tensor<float> x1 = random_tensor<float>(r, {1, 2, 8, 8});
    const tensor<float> x2 = random_tensor<float>(r, {1, 2, 8, 8});
    const tensor<float> w = random_tensor<float>(r, {3, 2, 3, 3});
    ops::conv2d_attrs a;
    a.padding = 1;
    const float ca = 1.7f, cb = -0.4f;

    tensor<float> mix({1, 2, 8, 8});
    for (int64_t i = 0; i < mix.numel(); ++i) {
        mix[i] = ca * x1[i] + cb * x2[i];
    }
    const tensor<float> lhs = ops::conv2d(mix, w, nullptr, a);
    const tensor<float> y1 = ops::conv2d(x1, w, nullptr, a);
    const tensor<float> y2 = ops::conv2d(x2, w, nullptr, a);
    for (int64_t i = 0; i < lhs.numel(); ++i) {
        CHECK(lhs[i] == doctest::Approx(ca * y1[i] + cb * y2[i]).epsilon(0).scale(1).epsilon(1e-6));
    }
}

TEST_CASE("strided conv2d commutes with input translation by the stride") {
    rng r(7);
    const int s = 2;
    const tensor<float> canvas = random_tensor<float>(r, {1, 2, 14, 12});
    const tensor<float> w = random_tensor<float>(r, {3, 2, 3, 3});
    ops::conv2d_attrs a;
    a.stride = s;

    auto crop_rows = [&](int64_t top, int64_t rows) {
        tensor<float> out({1, 2, rows, 12});
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t y = 0; y < rows; ++y)
                for (int64_t x = 0; x < 12; ++x)
                    out[(c * rows + y) * 12 + x] = canvas[(c * 14 + top + y) * 12 + x];
        return out;
    };

    const tensor<float> y0 = ops::conv2d(crop_rows(0, 12), w, nullptr, a);
    const tensor<float> y1 = ops::conv2d(crop_rows(s, 12), w, nullptr, a);
    // shifting the input down by s shifts the output grid by one cell
    const int64_t ho = y0.size(2), wo = y0.size(3);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t oh = 0; oh + 1 < ho; ++oh)
            for (int64_t ow = 0; ow < wo; ++ow) {
                const float a0 = y0[(c * ho + oh + 1) * wo + ow];
                const float a1 = y1[(c * ho + oh) * wo + ow];
                CHECK(std::abs(a0 - a1) < 1e-6);
            }
}

TEST_CASE("conv2d rejects bad geometry with named dimensions") {
    tensor<float> x({1, 4, 8, 8});
    tensor<float> w({4, 2, 3, 3});
    CHECK_THROWS_WITH_AS(ops::conv2d(x, w, nullptr, {}), doctest::Contains("channels per group"),
                         std::runtime_error);

    tensor<float> w2({4, 4, 3, 3});
    ops::conv2d_attrs bad;
    bad.stride = 0;
    CHECK_THROWS_WITH_AS(ops::conv2d(x, w2, nullptr, bad), doctest::Contains("stride"),
                         std::runtime_error);

    ops::conv2d_attrs a;
    a.groups = 3;
    CHECK_THROWS_WITH_AS(ops::conv2d(x, w2, nullptr, a), doctest::Contains("not divisible"),
                         std::runtime_error);

    tensor<float> tiny({1, 4, 2, 2});
    CHECK_THROWS_WITH_AS(ops::conv2d(tiny, w2, nullptr, {}), doctest::Contains("smaller than kernel"),
                         std::runtime_error);
}

TEST_CASE("finite checks catch overflow") {
    tensor<float> x({1, 1, 3, 3});
    x.fill(1e38f);
    tensor<float> w({1, 1, 3, 3});
    w.fill(1e38f);
    CHECK_THROWS_WITH_AS(ops::conv2d(x, w, nullptr, {}), doctest::Contains("non-finite"),
                         std::runtime_error);

    options().finite_checks = false;
    CHECK_NOTHROW(ops::conv2d(x, w, nullptr, {}));
    options().finite_checks = true;
}

TEST_CASE("layer_norm zero-variance input maps to beta") {
    tensor<float> x({1, 4, 2, 2});
    x.fill(3.25f);
    tensor<float> gamma({4});
    gamma.fill(1.f);
    tensor<float> beta({4});
    const tensor<float> y = ops::layer_norm<float>(x, gamma, beta, 1e-6, 1, nullptr, nullptr);
    for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(std::abs(y[i]) < 1e-6);
    }
}

TEST_CASE("layer_norm normalizes each position across channels") {
    rng r(23);
    const tensor<float> x = random_tensor<float>(r, {2, 16, 3, 3}, -4.0, 4.0);
    tensor<float> gamma({16});
    gamma.fill(1.f);
    tensor<float> beta({16});
    const tensor<float> y = ops::layer_norm<float>(x, gamma, beta, 1e-6, 1, nullptr, nullptr);

    for (int64_t b = 0; b < 2; ++b)
        for (int64_t p = 0; p < 9; ++p) {
            double mean = 0, var = 0;
            for (int64_t c = 0; c < 16; ++c) {
                mean += y[(b * 16 + c) * 9 + p];
            }
            mean /= 16;
            for (int64_t c = 0; c < 16; ++c) {
                const double d = y[(b * 16 + c) * 9 + p] - mean;
                var += d * d;
            }
            var /= 16;
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(var - 1.0) < 1e-4);
        }
}

TEST_CASE("layer_norm matches a two-pass oracle") {
    rng r(29);
    const tensor<float> x = random_tensor<float>(r, {1, 3, 2, 2}, -2.0, 2.0);
    const tensor<float> gamma = random_tensor<float>(r, {3}, 0.5, 1.5);
    const tensor<float> beta = random_tensor<float>(r, {3}, -0.5, 0.5);
    const double eps = 1e-5;
    const tensor<float> y = ops::layer_norm<float>(x, gamma, beta, eps, 1, nullptr, nullptr);

    for (int64_t p = 0; p < 4; ++p) {
        double mean = 0;
        for (int64_t c = 0; c < 3; ++c) {
            mean += x[c * 4 + p];
        }
        mean /= 3;
        double var = 0;
        for (int64_t c = 0; c < 3; ++c) {
            var += (x[c * 4 + p] - mean) * (x[c * 4 + p] - mean);
        }
        var /= 3;
        for (int64_t c = 0; c < 3; ++c) {
            const double want = (x[c * 4 + p] - mean) / std::sqrt(var + eps) * gamma[c] + beta[c];
            CHECK(std::abs(y[c * 4 + p] - want) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm rejects mismatched gamma") {
    tensor<float> x({1, 4, 2, 2});
    tensor<float> g5({5});
    tensor<float> b4({4});
    CHECK_THROWS_WITH_AS(ops::layer_norm<float>(x, g5, b4, 1e-6, 1, nullptr, nullptr),
                         doctest::Contains("gamma"), std::runtime_error);
}

TEST_CASE("gelu exact erf values") {
    tensor<double> x({3}, {0.0, 10.0, 1.0});
    const tensor<double> y = ops::gelu(x);
    CHECK(y[0] == 0.0);
    CHECK(std::abs(y[1] - 10.0) < 1e-6);
    CHECK(std::abs(y[2] - 0.841345) < 1e-5);  // Phi(1) = 0.8413447
}

TEST_CASE("linear identity and hand arithmetic") {
    tensor<float> x({2}, {1.f, 2.f});
    tensor<float> eye({2, 2}, {1.f, 0.f, 0.f, 1.f});
    const tensor<float> y0 = ops::linear(x, eye, nullptr);
    CHECK(y0[0] == 1.f);
    CHECK(y0[1] == 2.f);

    tensor<float> w({2, 2}, {1.f, 1.f, 0.f, 1.f});
    tensor<float> b({2}, {0.f, 1.f});
    const tensor<float> y = ops::linear(x, w, &b);
    CHECK(y[0] == doctest::Approx(3.f));
    CHECK(y[1] == doctest::Approx(3.f));
}

TEST_CASE("linear matches a triple-loop matmul oracle") {
    rng r(31);
    const tensor<float> x = random_tensor<float>(r, {2, 3});
    const tensor<float> w = random_tensor<float>(r, {4, 3});
    const tensor<float> b = random_tensor<float>(r, {4});
    const tensor<float> y = ops::linear(x, w, &b);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t o = 0; o < 4; ++o) {
            double acc = b[o];
            for (int64_t j = 0; j < 3; ++j) {
                acc += double(x[i * 3 + j]) * double(w[o * 3 + j]);
            }
            CHECK(std::abs(y[i * 4 + o] - acc) < 1e-6);
        }
}

TEST_CASE("linear rejects dim mismatch") {
    tensor<float> x({2, 3});
    tensor<float> w({4, 5});
    CHECK_THROWS_WITH_AS(ops::linear(x, w, nullptr), doctest::Contains("does not match weight"),
                         std::runtime_error);
}

TEST_CASE("softmax_cross_entropy uniform and saturated logits") {
    tensor<double> uniform({3, 4});
    uniform.fill(0.7);
    const auto res = ops::softmax_cross_entropy(uniform, {0, 1, 2}, {true, true, true});
    CHECK(std::abs(res.value - std::log(4.0)) < 1e-12);
    CHECK(res.unmasked == 3);

    tensor<double> hot({1, 4});
    hot[2] = 1000.0;
    const auto res2 = ops::softmax_cross_entropy(hot, {2}, {true});
    CHECK(res2.value < 1e-6);
    CHECK(res2.value >= 0.0);
}

TEST_CASE("softmax_cross_entropy masking rules") {
    tensor<double> l({2, 4});
    l[0] = 5.0;
    const auto all_masked = ops::softmax_cross_entropy(l, {0, 0}, {false, false});
    CHECK(all_masked.value == 0.0);
    CHECK(all_masked.all_masked);

    CHECK_THROWS_WITH_AS(ops::softmax_cross_entropy(l, {0, 7}, {true, true}),
                         doctest::Contains("out of range"), std::runtime_error);
    // masked rows may carry any target
    CHECK_NOTHROW(ops::softmax_cross_entropy(l, {0, -5}, {true, false}));
}

TEST_CASE("softmax_cross_entropy matches a direct 64-bit oracle") {
    rng r(37);
    const tensor<double> logits = random_tensor<double>(r, {3, 5}, -3.0, 3.0);
    const std::vector<int> tgt{4, 0, 2};
    const std::vector<bool> mask{true, true, true};
    const auto res = ops::softmax_cross_entropy(logits, tgt, mask);

    double want = 0;
    for (int64_t row = 0; row < 3; ++row) {
        double denom = 0;
        for (int64_t j = 0; j < 5; ++j) {
            denom += std::exp(logits[row * 5 + j]);
        }
        want += -std::log(std::exp(logits[row * 5 + tgt[size_t(row)]]) / denom);
    }
    want /= 3;
    CHECK(std::abs(res.value - want) < 1e-8);
    CHECK(res.value >= 0.0);
}

TEST_CASE("grad of sum and of sum of squares") {
    rng r(41);
    tape<double> tp;
    const auto x = tp.leaf(random_tensor<double>(r, {3, 4}));
    const auto s = tp.sum(x);
    tp.backward(s);
    for (int64_t i = 0; i < 12; ++i) {
        CHECK(tp.grad(x)[i] == 1.0);
    }

    tape<double> tp2;
    const auto x2 = tp2.leaf(random_tensor<double>(r, {3, 4}));
    const auto sq = tp2.mul(x2, x2);
    const auto s2 = tp2.sum(sq);
    tp2.backward(s2);
    for (int64_t i = 0; i < 12; ++i) {
        CHECK(tp2.grad(x2)[i] == doctest::Approx(2.0 * tp2.val(x2)[i]));
    }
}

TEST_CASE("backward requires a scalar root") {
    tape<float> tp;
    const auto x = tp.leaf(tensor<float>({2, 2}));
    CHECK_THROWS_WITH_AS(tp.backward(x), doctest::Contains("must be scalar"), std::runtime_error);
}

TEST_CASE("parameter off the tape yields zero gradient and a diagnostic") {
    named_params<double> params;
    params.add("used", tensor<double>({2}, {1.0, 2.0}));
    params.add("unused", tensor<double>({3}));

    tape<double> tp;
    tape_binding<double> bind(tp, params);
    const auto x = bind.use("used");
    tp.backward(tp.sum(x));

    const auto grads = collect_gradients(tp, bind);
    CHECK(grads.at("used")[0] == 1.0);
    CHECK(grads.at("unused").numel() == 3);
    CHECK(grads.at("unused")[0] == 0.0);
    REQUIRE(tp.warnings().size() == 1);
    CHECK(tp.warnings()[0].find("unused") != std::string::npos);
}

}  // TEST_SUITE

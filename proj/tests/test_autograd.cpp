#include <cmath>

#include "cvl/ops.hpp"
#include "cvl/tape.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cvl;
using testutil::fd_check;
using testutil::random_tensor;

// Randomized finite-difference validation of every differentiable op:
// analytic gradients from one taped backward against central differences
// (h = 1e-5) of the pure forward, in 64-bit, five seeds each.

namespace {

constexpr double k_tol = 1e-5;
constexpr int k_seeds = 5;

using inputs_t = std::vector<tensor<double>>;

// Runs the check for one op given a pure scalar forward and a taped
// forward that returns (root, leaf ids).
template <typename BuildTape>
void check_op(const std::function<double(const inputs_t &)> & pure, const inputs_t & inputs,
              BuildTape build, uint64_t seed) {
    tape<double> tp;
    std::vector<tape<double>::id> leaves;
    leaves.reserve(inputs.size());
    for (const auto & t : inputs) {
        leaves.push_back(tp.leaf(t));
    }
    const auto root = build(tp, leaves);
    tp.backward(root);

    CHECK(std::abs(double(tp.val(root)[0]) - pure(inputs)) < 1e-9);

    inputs_t analytic;
    analytic.reserve(inputs.size());
    for (const auto leaf : leaves) {
        analytic.push_back(tp.grad(leaf));
    }
    rng r(seed * 977 + 13);
    inputs_t mutable_inputs = inputs;
    const double worst = fd_check(pure, mutable_inputs, analytic, r);
    CHECK(worst < k_tol);
}

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("conv2d gradients (stride, padding, groups, bias)") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed);
        const inputs_t in = {
            random_tensor<double>(r, {2, 4, 7, 6}),
            random_tensor<double>(r, {6, 2, 3, 3}),
            random_tensor<double>(r, {6}),
        };
        ops::conv2d_attrs a;
        a.stride = 2;
        a.padding = 1;
        a.groups = 2;
        check_op(
            [&](const inputs_t & v) { return ops::sum(ops::conv2d(v[0], v[1], &v[2], a)); }, in,
            [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                return tp.sum(tp.conv2d(l[0], l[1], l[2], a));
            },
            seed);
    }
}

TEST_CASE("depthwise conv2d gradients") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 10);
        const inputs_t in = {
            random_tensor<double>(r, {1, 5, 8, 8}),
            random_tensor<double>(r, {5, 1, 5, 5}),
            random_tensor<double>(r, {5}),
        };
        ops::conv2d_attrs a;
        a.padding = 2;
        a.groups = 5;
        check_op(
            [&](const inputs_t & v) { return ops::sum(ops::conv2d(v[0], v[1], &v[2], a)); }, in,
            [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                return tp.sum(tp.conv2d(l[0], l[1], l[2], a));
            },
            seed);
    }
}

TEST_CASE("layer_norm gradients over channels and over the last dim") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 20);
        const double eps = 1e-6;
        {
            const inputs_t in = {
                random_tensor<double>(r, {2, 6, 3, 3}),
                random_tensor<double>(r, {6}, 0.5, 1.5),
                random_tensor<double>(r, {6}, -0.5, 0.5),
            };
            check_op(
                [&](const inputs_t & v) {
                    return ops::sum(ops::mul(
                        ops::layer_norm<double>(v[0], v[1], v[2], eps, 1, nullptr, nullptr),
                        ops::layer_norm<double>(v[0], v[1], v[2], eps, 1, nullptr, nullptr)));
                },
                in,
                [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                    // square the output so the gradient is not constant
                    const auto y = tp.layer_norm_channels(l[0], l[1], l[2], eps);
                    return tp.sum(tp.mul(y, y));
                },
                seed);
        }
        {
            const inputs_t in = {
                random_tensor<double>(r, {2, 4, 6}),
                random_tensor<double>(r, {6}, 0.5, 1.5),
                random_tensor<double>(r, {6}, -0.5, 0.5),
            };
            check_op(
                [&](const inputs_t & v) {
                    const auto y = ops::layer_norm<double>(v[0], v[1], v[2], eps, 2, nullptr,
                                                           nullptr);
                    return ops::sum(ops::mul(y, y));
                },
                in,
                [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                    const auto y = tp.layer_norm_last(l[0], l[1], l[2], eps);
                    return tp.sum(tp.mul(y, y));
                },
                seed);
        }
    }
}

TEST_CASE("gelu gradients") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 30);
        const inputs_t in = {random_tensor<double>(r, {4, 9}, -3.0, 3.0)};
        check_op([&](const inputs_t & v) { return ops::sum(ops::gelu(v[0])); }, in,
                 [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                     return tp.sum(tp.gelu(l[0]));
                 },
                 seed);
    }
}

TEST_CASE("linear gradients") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 40);
        const inputs_t in = {
            random_tensor<double>(r, {2, 3, 5}),
            random_tensor<double>(r, {4, 5}),
            random_tensor<double>(r, {4}),
        };
        check_op(
            [&](const inputs_t & v) {
                const auto y = ops::linear(v[0], v[1], &v[2]);
                return ops::sum(ops::mul(y, y));
            },
            in,
            [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                const auto y = tp.linear(l[0], l[1], l[2]);
                return tp.sum(tp.mul(y, y));
            },
            seed);
    }
}

TEST_CASE("matmul gradients (batched)") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 50);
        const inputs_t in = {
            random_tensor<double>(r, {2, 3, 4}),
            random_tensor<double>(r, {2, 4, 5}),
        };
        check_op(
            [&](const inputs_t & v) {
                const auto y = ops::matmul(v[0], v[1]);
                return ops::sum(ops::mul(y, y));
            },
            in,
            [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                const auto y = tp.matmul(l[0], l[1]);
                return tp.sum(tp.mul(y, y));
            },
            seed);
    }
}

TEST_CASE("channel_scale and residual add gradients") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 60);
        const inputs_t in = {
            random_tensor<double>(r, {2, 3, 4, 4}),
            random_tensor<double>(r, {3}),
        };
        check_op(
            [&](const inputs_t & v) {
                return ops::sum(ops::add(ops::channel_scale(v[0], v[1]), v[0]));
            },
            in,
            [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                return tp.sum(tp.add(tp.channel_scale(l[0], l[1]), l[0]));
            },
            seed);
    }
}

TEST_CASE("causal attention composite gradients") {
    // reshape/permute/matmul/scalar_mul/causal_softmax working together,
    // exactly the attention wiring of the toy LM
    const int64_t b = 1, t = 5, h = 2, dh = 3, d = h * dh;
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 70);
        const inputs_t in = {
            random_tensor<double>(r, {b, t, d}),
            random_tensor<double>(r, {d, d}),  // wq
            random_tensor<double>(r, {d, d}),  // wk
            random_tensor<double>(r, {d, d}),  // wv
        };
        auto pure = [&](const inputs_t & v) {
            auto split = [&](const tensor<double> & m) {
                return ops::permute(tensor<double>({b, t, h, dh}, m.data), {0, 2, 1, 3});
            };
            const auto q = split(ops::linear(v[0], v[1], nullptr));
            const auto k = split(ops::linear(v[0], v[2], nullptr));
            const auto vv = split(ops::linear(v[0], v[3], nullptr));
            auto scores = ops::matmul(q, ops::permute(k, {0, 1, 3, 2}));
            scores = ops::scalar_mul(scores, 1.0 / std::sqrt(double(dh)));
            const auto attn = ops::causal_softmax(scores);
            const auto ctx = ops::matmul(attn, vv);
            return ops::sum(ops::mul(ctx, ctx));
        };
        check_op(pure, in,
                 [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                     auto split = [&](tape<double>::id m) {
                         return tp.permute(tp.reshape(m, {b, t, h, dh}), {0, 2, 1, 3});
                     };
                     const auto q = split(tp.linear(l[0], l[1], tape<double>::invalid));
                     const auto k = split(tp.linear(l[0], l[2], tape<double>::invalid));
                     const auto vv = split(tp.linear(l[0], l[3], tape<double>::invalid));
                     auto scores = tp.matmul(q, tp.permute(k, {0, 1, 3, 2}));
                     scores = tp.scalar_mul(scores, 1.0 / std::sqrt(double(dh)));
                     const auto ctx = tp.matmul(tp.causal_softmax(scores), vv);
                     return tp.sum(tp.mul(ctx, ctx));
                 },
                 seed);
    }
}

TEST_CASE("embedding, position add and concat gradients") {
    const int64_t v = 7, d = 4, tv = 2, tt = 3;
    const std::vector<int> ids{3, 0, 6};
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 80);
        const inputs_t in = {
            random_tensor<double>(r, {v, d}),       // embedding table
            random_tensor<double>(r, {1, tv, d}),   // visual part
            random_tensor<double>(r, {8, d}),       // position table
        };
        auto pure = [&](const inputs_t & w) {
            const auto text = ops::embedding(w[0], ids, {1, tt});
            const auto seq = ops::concat_dim1(w[1], text);
            const auto y = ops::add_rows(seq, w[2]);
            return ops::sum(ops::mul(y, y));
        };
        check_op(pure, in,
                 [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                     const auto text = tp.embedding(l[0], ids, {1, tt});
                     const auto seq = tp.concat_dim1(l[1], text);
                     const auto y = tp.add_rows(seq, l[2]);
                     return tp.sum(tp.mul(y, y));
                 },
                 seed);
    }
}

TEST_CASE("softmax_cross_entropy gradients") {
    const std::vector<int> tgt{2, 0, 3, 1};
    const std::vector<bool> mask{true, false, true, true};
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 90);
        const inputs_t in = {random_tensor<double>(r, {4, 5}, -2.0, 2.0)};
        check_op(
            [&](const inputs_t & v) {
                return ops::softmax_cross_entropy(v[0], tgt, mask).value;
            },
            in,
            [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                return tp.softmax_cross_entropy(l[0], tgt, mask);
            },
            seed);
    }
}

TEST_CASE("nchw_to_tokens round and affine_combine gradients") {
    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 100);
        const inputs_t in = {
            random_tensor<double>(r, {1, 3, 2, 2}),
            random_tensor<double>(r, {1, 3, 2, 2}),
        };
        auto pure = [&](const inputs_t & v) {
            const double a = ops::sum(ops::mul(ops::nchw_to_tokens(v[0]), ops::nchw_to_tokens(v[0])));
            const double b = ops::sum(v[1]);
            return 0.25 * a + 2.0 * b;
        };
        check_op(pure, in,
                 [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                     const auto t0 = tp.nchw_to_tokens(l[0]);
                     const auto a = tp.sum(tp.mul(t0, t0));
                     const auto b = tp.sum(l[1]);
                     return tp.affine_combine({a, b}, {0.25, 2.0});
                 },
                 seed);
    }
}

TEST_CASE("full residual block gradient vs finite differences") {
    // depthwise 7x7 -> channel norm -> expand 4x -> gelu -> project ->
    // layer scale -> residual, on a 1x8x12x12 input in 64-bit.
    const int64_t c = 8, e = 4;
    ops::conv2d_attrs dw;
    dw.padding = 3;
    dw.groups = c;

    auto pure = [&](const inputs_t & v) {
        const auto & x = v[0];
        auto h = ops::conv2d(x, v[1], &v[2], dw);
        h = ops::layer_norm<double>(h, v[3], v[4], 1e-6, 1, nullptr, nullptr);
        h = ops::conv2d(h, v[5], &v[6], {});
        h = ops::gelu(h);
        h = ops::conv2d(h, v[7], &v[8], {});
        h = ops::channel_scale(h, v[9]);
        return ops::sum(ops::add(h, x));
    };

    for (uint64_t seed = 1; seed <= k_seeds; ++seed) {
        rng r(seed + 110);
        tensor<double> ls({c});
        ls.fill(0.3);  // representative scale, away from the 1e-6 init
        const inputs_t in = {
            random_tensor<double>(r, {1, c, 12, 12}),
            random_tensor<double>(r, {c, 1, 7, 7}, -0.3, 0.3),
            random_tensor<double>(r, {c}, -0.1, 0.1),
            random_tensor<double>(r, {c}, 0.5, 1.5),
            random_tensor<double>(r, {c}, -0.5, 0.5),
            random_tensor<double>(r, {e * c, c, 1, 1}, -0.3, 0.3),
            random_tensor<double>(r, {e * c}, -0.1, 0.1),
            random_tensor<double>(r, {c, e * c, 1, 1}, -0.3, 0.3),
            random_tensor<double>(r, {c}, -0.1, 0.1),
            ls,
        };
        check_op(pure, in,
                 [&](tape<double> & tp, const std::vector<tape<double>::id> & l) {
                     auto h = tp.conv2d(l[0], l[1], l[2], dw);
                     h = tp.layer_norm_channels(h, l[3], l[4], 1e-6);
                     h = tp.conv2d(h, l[5], l[6], {});
                     h = tp.gelu(h);
                     h = tp.conv2d(h, l[7], l[8], {});
                     h = tp.channel_scale(h, l[9]);
                     return tp.sum(tp.add(h, l[0]));
                 },
                 seed);
    }
}

}  // TEST_SUITE

#include "cvl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cvl::ops {

namespace {

template <typename T>
T normal_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
T normal_pdf(T x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779;
    return static_cast<T>(inv_sqrt_2pi * std::exp(-0.5 * double(x) * double(x)));
}

// y[M,N] += a[M,K] * b[K,N], row-major, ikj order. Per-element accumulation
// runs over k in ascending order, matching the direct conv inner loop.
template <typename T>
void matmul_acc(const T * a, const T * b, T * y, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T * arow = a + i * k;
        T * yrow = y + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) {
                continue;
            }
            const T * brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                yrow[j] += av * brow[j];
            }
        }
    }
}

struct conv_geom {
    int64_t batch, cin, h, w;
    int64_t cout, cin_g, k;
    int64_t ho, wo;
    int64_t cout_g;
};

template <typename T>
conv_geom conv_check(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias,
                     const conv2d_attrs & a) {
    check(x.rank() == 4, "conv2d: input must be rank 4 (B,C,H,W), got " + shape_str(x.shape));
    check(w.rank() == 4, "conv2d: weight must be rank 4 (Cout,Cin/groups,k,k), got " +
                             shape_str(w.shape));
    check(a.stride > 0, "conv2d: stride must be positive, got " + std::to_string(a.stride));
    check(a.padding >= 0, "conv2d: padding must be non-negative, got " + std::to_string(a.padding));
    check(a.groups > 0, "conv2d: groups must be positive, got " + std::to_string(a.groups));
    check(w.size(2) == w.size(3), "conv2d: kernel must be square, got " + shape_str(w.shape));

    conv_geom g;
    g.batch = x.size(0);
    g.cin = x.size(1);
    g.h = x.size(2);
    g.w = x.size(3);
    g.cout = w.size(0);
    g.cin_g = w.size(1);
    g.k = w.size(2);

    check(g.cin % a.groups == 0, "conv2d: input channels " + std::to_string(g.cin) +
                                     " not divisible by groups " + std::to_string(a.groups));
    check(g.cout % a.groups == 0, "conv2d: output channels " + std::to_string(g.cout) +
                                      " not divisible by groups " + std::to_string(a.groups));
    check(g.cin / a.groups == g.cin_g,
          "conv2d: weight expects " + std::to_string(g.cin_g) + " channels per group, input has " +
              std::to_string(g.cin / a.groups));
    check(g.h + 2 * a.padding >= g.k, "conv2d: padded height " +
                                          std::to_string(g.h + 2 * a.padding) +
                                          " smaller than kernel " + std::to_string(g.k));
    check(g.w + 2 * a.padding >= g.k, "conv2d: padded width " +
                                          std::to_string(g.w + 2 * a.padding) +
                                          " smaller than kernel " + std::to_string(g.k));
    if (bias != nullptr) {
        check(bias->rank() == 1 && bias->size(0) == g.cout,
              "conv2d: bias must have shape [" + std::to_string(g.cout) + "], got " +
                  shape_str(bias->shape));
    }

    g.ho = conv_out_size(g.h, static_cast<int>(g.k), a.stride, a.padding);
    g.wo = conv_out_size(g.w, static_cast<int>(g.k), a.stride, a.padding);
    g.cout_g = g.cout / a.groups;
    return g;
}

void record_macs(const conv_geom & g, const conv2d_attrs & a) {
    if (!options().count_macs) {
        return;
    }
    const bool depthwise = a.groups > 1 && g.cin_g == 1 && g.cout == static_cast<int64_t>(a.groups);
    const uint64_t macs = static_cast<uint64_t>(g.batch) * g.cout * g.ho * g.wo * g.cin_g * g.k * g.k;
    macs_counter().records.push_back({depthwise, macs});
}

template <typename T>
tensor<T> conv2d_direct(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias,
                        const conv2d_attrs & a, const conv_geom & g) {
    tensor<T> y({g.batch, g.cout, g.ho, g.wo});
    const int64_t s = a.stride, p = a.padding;
    for (int64_t b = 0; b < g.batch; ++b) {
        for (int64_t grp = 0; grp < a.groups; ++grp) {
            for (int64_t cg = 0; cg < g.cout_g; ++cg) {
                const int64_t co = grp * g.cout_g + cg;
                const T * wbase = w.ptr() + co * g.cin_g * g.k * g.k;
                T * ybase = y.ptr() + (b * g.cout + co) * g.ho * g.wo;
                for (int64_t oh = 0; oh < g.ho; ++oh) {
                    for (int64_t ow = 0; ow < g.wo; ++ow) {
                        T acc = bias != nullptr ? (*bias)[co] : T(0);
                        for (int64_t ci = 0; ci < g.cin_g; ++ci) {
                            const T * xbase =
                                x.ptr() + (b * g.cin + grp * g.cin_g + ci) * g.h * g.w;
                            const T * wrow = wbase + ci * g.k * g.k;
                            for (int64_t kh = 0; kh < g.k; ++kh) {
                                const int64_t ih = oh * s - p + kh;
                                if (ih < 0 || ih >= g.h) {
                                    continue;
                                }
                                for (int64_t kw = 0; kw < g.k; ++kw) {
                                    const int64_t iw = ow * s - p + kw;
                                    if (iw < 0 || iw >= g.w) {
                                        continue;
                                    }
                                    acc += xbase[ih * g.w + iw] * wrow[kh * g.k + kw];
                                }
                            }
                        }
                        ybase[oh * g.wo + ow] = acc;
                    }
                }
            }
        }
    }
    return y;
}

// Lowers one (batch, group) slice to a [Cin_g*k*k, Ho*Wo] column matrix;
// out-of-range taps stay zero.
template <typename T>
void im2col_slice(const T * x, int64_t h, int64_t w, int64_t cin_g, int64_t k, int64_t ho,
                  int64_t wo, int stride, int padding, T * col) {
    std::memset(col, 0, sizeof(T) * static_cast<size_t>(cin_g * k * k * ho * wo));
    for (int64_t ci = 0; ci < cin_g; ++ci) {
        const T * xc = x + ci * h * w;
        for (int64_t kh = 0; kh < k; ++kh) {
            for (int64_t kw = 0; kw < k; ++kw) {
                T * crow = col + ((ci * k + kh) * k + kw) * ho * wo;
                for (int64_t oh = 0; oh < ho; ++oh) {
                    const int64_t ih = oh * stride - padding + kh;
                    if (ih < 0 || ih >= h) {
                        continue;
                    }
                    const T * xrow = xc + ih * w;
                    for (int64_t ow = 0; ow < wo; ++ow) {
                        const int64_t iw = ow * stride - padding + kw;
                        if (iw < 0 || iw >= w) {
                            continue;
                        }
                        crow[oh * wo + ow] = xrow[iw];
                    }
                }
            }
        }
    }
}

template <typename T>
tensor<T> conv2d_im2col(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias,
                        const conv2d_attrs & a, const conv_geom & g) {
    tensor<T> y({g.batch, g.cout, g.ho, g.wo});
    const int64_t patch = g.cin_g * g.k * g.k;
    const int64_t cells = g.ho * g.wo;
    std::vector<T> col(static_cast<size_t>(patch * cells));
    for (int64_t b = 0; b < g.batch; ++b) {
        for (int64_t grp = 0; grp < a.groups; ++grp) {
            const T * xg = x.ptr() + (b * g.cin + grp * g.cin_g) * g.h * g.w;
            im2col_slice(xg, g.h, g.w, g.cin_g, g.k, g.ho, g.wo, a.stride, a.padding, col.data());
            T * yg = y.ptr() + (b * g.cout + grp * g.cout_g) * cells;
            if (bias != nullptr) {
                for (int64_t cg = 0; cg < g.cout_g; ++cg) {
                    const T bv = (*bias)[grp * g.cout_g + cg];
                    std::fill(yg + cg * cells, yg + (cg + 1) * cells, bv);
                }
            }
            matmul_acc(w.ptr() + grp * g.cout_g * patch, col.data(), yg, g.cout_g, patch, cells);
        }
    }
    return y;
}

}  // namespace

conv_algo & conv2d_algo() {
    static conv_algo algo = conv_algo::auto_select;
    return algo;
}

int64_t conv_out_size(int64_t in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

template <typename T>
tensor<T> conv2d(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias,
                 const conv2d_attrs & a) {
    const conv_geom g = conv_check(x, w, bias, a);
    record_macs(g, a);

    conv_algo algo = conv2d_algo();
    if (algo == conv_algo::auto_select) {
        // The lowering pays off once the patch is reused across many cells.
        algo = (g.cin_g * g.k * g.k >= 8 && g.ho * g.wo >= 16) ? conv_algo::im2col
                                                               : conv_algo::direct;
    }
    tensor<T> y = algo == conv_algo::im2col ? conv2d_im2col(x, w, bias, a, g)
                                            : conv2d_direct(x, w, bias, a, g);
    check_finite(y, "conv2d");
    return y;
}

template <typename T>
void conv2d_backward(const tensor<T> & x, const tensor<T> & w, const conv2d_attrs & a,
                     const tensor<T> & gy, tensor<T> & gx, tensor<T> & gw, tensor<T> * gb) {
    const conv_geom g = conv_check<T>(x, w, nullptr, a);
    check(gy.shape == std::vector<int64_t>({g.batch, g.cout, g.ho, g.wo}),
          "conv2d_backward: grad shape " + shape_str(gy.shape) + " does not match output");

    gx = tensor<T>(x.shape);
    gw = tensor<T>(w.shape);
    if (gb != nullptr) {
        *gb = tensor<T>({g.cout});
    }

    const int64_t s = a.stride, p = a.padding;
    for (int64_t b = 0; b < g.batch; ++b) {
        for (int64_t grp = 0; grp < a.groups; ++grp) {
            for (int64_t cg = 0; cg < g.cout_g; ++cg) {
                const int64_t co = grp * g.cout_g + cg;
                const T * gybase = gy.ptr() + (b * g.cout + co) * g.ho * g.wo;
                T * gwbase = gw.ptr() + co * g.cin_g * g.k * g.k;
                for (int64_t oh = 0; oh < g.ho; ++oh) {
                    for (int64_t ow = 0; ow < g.wo; ++ow) {
                        const T gv = gybase[oh * g.wo + ow];
                        if (gb != nullptr) {
                            (*gb)[co] += gv;
                        }
                        if (gv == T(0)) {
                            continue;
                        }
                        for (int64_t ci = 0; ci < g.cin_g; ++ci) {
                            const int64_t cin_idx = grp * g.cin_g + ci;
                            const T * xbase = x.ptr() + (b * g.cin + cin_idx) * g.h * g.w;
                            T * gxbase = gx.ptr() + (b * g.cin + cin_idx) * g.h * g.w;
                            const T * wrow = w.ptr() + (co * g.cin_g + ci) * g.k * g.k;
                            T * gwrow = gwbase + ci * g.k * g.k;
                            for (int64_t kh = 0; kh < g.k; ++kh) {
                                const int64_t ih = oh * s - p + kh;
                                if (ih < 0 || ih >= g.h) {
                                    continue;
                                }
                                for (int64_t kw = 0; kw < g.k; ++kw) {
                                    const int64_t iw = ow * s - p + kw;
                                    if (iw < 0 || iw >= g.w) {
                                        continue;
                                    }
                                    gxbase[ih * g.w + iw] += gv * wrow[kh * g.k + kw];
                                    gwrow[kh * g.k + kw] += gv * xbase[ih * g.w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
tensor<T> layer_norm(const tensor<T> & x, const tensor<T> & gamma, const tensor<T> & beta,
                     double eps, int axis, std::vector<T> * save_mean,
                     std::vector<T> * save_inv_std) {
    check(eps > 0, "layer_norm: eps must be positive");
    check(axis >= 0 && axis < x.rank(), "layer_norm: axis " + std::to_string(axis) +
                                            " out of range for shape " + shape_str(x.shape));
    const int64_t n = x.size(axis);
    check(gamma.rank() == 1 && gamma.size(0) == n,
          "layer_norm: gamma length " + shape_str(gamma.shape) + " does not match axis size " +
              std::to_string(n));
    check(beta.rank() == 1 && beta.size(0) == n,
          "layer_norm: beta length " + shape_str(beta.shape) + " does not match axis size " +
              std::to_string(n));

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= x.size(i);
    }
    for (int i = axis + 1; i < x.rank(); ++i) {
        inner *= x.size(i);
    }

    tensor<T> y(x.shape);
    if (save_mean != nullptr) {
        save_mean->assign(static_cast<size_t>(outer * inner), T(0));
    }
    if (save_inv_std != nullptr) {
        save_inv_std->assign(static_cast<size_t>(outer * inner), T(0));
    }

    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T * xp = x.ptr() + o * n * inner + i;
            T mean = T(0);
            for (int64_t a = 0; a < n; ++a) {
                mean += xp[a * inner];
            }
            mean /= T(n);
            T var = T(0);
            for (int64_t a = 0; a < n; ++a) {
                const T d = xp[a * inner] - mean;
                var += d * d;
            }
            var /= T(n);
            const T istd = T(1) / std::sqrt(var + T(eps));
            T * yp = y.ptr() + o * n * inner + i;
            for (int64_t a = 0; a < n; ++a) {
                yp[a * inner] = (xp[a * inner] - mean) * istd * gamma[a] + beta[a];
            }
            if (save_mean != nullptr) {
                (*save_mean)[static_cast<size_t>(o * inner + i)] = mean;
            }
            if (save_inv_std != nullptr) {
                (*save_inv_std)[static_cast<size_t>(o * inner + i)] = istd;
            }
        }
    }
    check_finite(y, "layer_norm");
    return y;
}

template <typename T>
void layer_norm_backward(const tensor<T> & x, const tensor<T> & gamma, int axis,
                         const std::vector<T> & mean, const std::vector<T> & inv_std,
                         const tensor<T> & gy, tensor<T> & gx, tensor<T> & ggamma,
                         tensor<T> & gbeta) {
    const int64_t n = x.size(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= x.size(i);
    }
    for (int i = axis + 1; i < x.rank(); ++i) {
        inner *= x.size(i);
    }

    gx = tensor<T>(x.shape);
    ggamma = tensor<T>({n});
    gbeta = tensor<T>({n});

    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T * xp = x.ptr() + o * n * inner + i;
            const T * gp = gy.ptr() + o * n * inner + i;
            T * gxp = gx.ptr() + o * n * inner + i;
            const T mu = mean[static_cast<size_t>(o * inner + i)];
            const T istd = inv_std[static_cast<size_t>(o * inner + i)];

            T s1 = T(0), s2 = T(0);
            for (int64_t a = 0; a < n; ++a) {
                const T xh = (xp[a * inner] - mu) * istd;
                const T gg = gp[a * inner] * gamma[a];
                s1 += gg;
                s2 += gg * xh;
                ggamma[a] += gp[a * inner] * xh;
                gbeta[a] += gp[a * inner];
            }
            for (int64_t a = 0; a < n; ++a) {
                const T xh = (xp[a * inner] - mu) * istd;
                const T gg = gp[a * inner] * gamma[a];
                gxp[a * inner] = istd * (gg - s1 / T(n) - xh * s2 / T(n));
            }
        }
    }
}

template <typename T>
tensor<T> gelu(const tensor<T> & x) {
    tensor<T> y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        y[i] = x[i] * normal_cdf(x[i]);
    }
    check_finite(y, "gelu");
    return y;
}

template <typename T>
void gelu_backward(const tensor<T> & x, const tensor<T> & gy, tensor<T> & gx) {
    gx = tensor<T>(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        gx[i] = gy[i] * (normal_cdf(x[i]) + x[i] * normal_pdf(x[i]));
    }
}

template <typename T>
tensor<T> add(const tensor<T> & a, const tensor<T> & b) {
    check(a.same_shape(b),
          "add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    tensor<T> y(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) {
        y[i] = a[i] + b[i];
    }
    check_finite(y, "add");
    return y;
}

template <typename T>
tensor<T> mul(const tensor<T> & a, const tensor<T> & b) {
    check(a.same_shape(b),
          "mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    tensor<T> y(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) {
        y[i] = a[i] * b[i];
    }
    check_finite(y, "mul");
    return y;
}

template <typename T>
tensor<T> scalar_mul(const tensor<T> & x, double c) {
    tensor<T> y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        y[i] = static_cast<T>(x[i] * c);
    }
    check_finite(y, "scalar_mul");
    return y;
}

template <typename T>
tensor<T> channel_scale(const tensor<T> & x, const tensor<T> & s) {
    check(x.rank() == 4, "channel_scale: input must be rank 4, got " + shape_str(x.shape));
    check(s.rank() == 1 && s.size(0) == x.size(1),
          "channel_scale: scale shape " + shape_str(s.shape) + " does not match channels " +
              std::to_string(x.size(1)));
    tensor<T> y(x.shape);
    const int64_t hw = x.size(2) * x.size(3);
    for (int64_t b = 0; b < x.size(0); ++b) {
        for (int64_t c = 0; c < x.size(1); ++c) {
            const T sv = s[c];
            const T * xp = x.ptr() + (b * x.size(1) + c) * hw;
            T * yp = y.ptr() + (b * x.size(1) + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                yp[i] = xp[i] * sv;
            }
        }
    }
    check_finite(y, "channel_scale");
    return y;
}

template <typename T>
void channel_scale_backward(const tensor<T> & x, const tensor<T> & s, const tensor<T> & gy,
                            tensor<T> & gx, tensor<T> & gs) {
    gx = tensor<T>(x.shape);
    gs = tensor<T>(s.shape);
    const int64_t hw = x.size(2) * x.size(3);
    for (int64_t b = 0; b < x.size(0); ++b) {
        for (int64_t c = 0; c < x.size(1); ++c) {
            const T sv = s[c];
            const int64_t base = (b * x.size(1) + c) * hw;
            T acc = T(0);
            for (int64_t i = 0; i < hw; ++i) {
                gx[base + i] = gy[base + i] * sv;
                acc += gy[base + i] * x[base + i];
            }
            gs[c] += acc;
        }
    }
}

template <typename T>
tensor<T> linear(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias) {
    check(x.rank() >= 1, "linear: input must have rank >= 1");
    check(w.rank() == 2, "linear: weight must be rank 2 (Dout,Din), got " + shape_str(w.shape));
    const int64_t din = x.size(x.rank() - 1);
    const int64_t dout = w.size(0);
    check(w.size(1) == din, "linear: input dim " + std::to_string(din) +
                                " does not match weight Din " + std::to_string(w.size(1)));
    if (bias != nullptr) {
        check(bias->rank() == 1 && bias->size(0) == dout,
              "linear: bias must have shape [" + std::to_string(dout) + "], got " +
                  shape_str(bias->shape));
    }

    std::vector<int64_t> yshape = x.shape;
    yshape.back() = dout;
    tensor<T> y(yshape);

    const int64_t rows = x.numel() / din;
    for (int64_t r = 0; r < rows; ++r) {
        const T * xr = x.ptr() + r * din;
        T * yr = y.ptr() + r * dout;
        for (int64_t o = 0; o < dout; ++o) {
            T acc = bias != nullptr ? (*bias)[o] : T(0);
            const T * wr = w.ptr() + o * din;
            for (int64_t i = 0; i < din; ++i) {
                acc += xr[i] * wr[i];
            }
            yr[o] = acc;
        }
    }
    check_finite(y, "linear");
    return y;
}

template <typename T>
void linear_backward(const tensor<T> & x, const tensor<T> & w, const tensor<T> & gy,
                     tensor<T> & gx, tensor<T> & gw, tensor<T> * gb) {
    const int64_t din = x.size(x.rank() - 1);
    const int64_t dout = w.size(0);
    const int64_t rows = x.numel() / din;

    gx = tensor<T>(x.shape);
    gw = tensor<T>(w.shape);
    if (gb != nullptr) {
        *gb = tensor<T>({dout});
    }

    for (int64_t r = 0; r < rows; ++r) {
        const T * xr = x.ptr() + r * din;
        const T * gr = gy.ptr() + r * dout;
        T * gxr = gx.ptr() + r * din;
        for (int64_t o = 0; o < dout; ++o) {
            const T gv = gr[o];
            if (gb != nullptr) {
                (*gb)[o] += gv;
            }
            if (gv == T(0)) {
                continue;
            }
            const T * wr = w.ptr() + o * din;
            T * gwr = gw.ptr() + o * din;
            for (int64_t i = 0; i < din; ++i) {
                gxr[i] += gv * wr[i];
                gwr[i] += gv * xr[i];
            }
        }
    }
}

namespace {

template <typename T>
void matmul_check(const tensor<T> & a, const tensor<T> & b, int64_t & batch, int64_t & m,
                  int64_t & k, int64_t & n) {
    check(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must have rank >= 2");
    check(a.rank() == b.rank(), "matmul: rank mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    for (int i = 0; i < a.rank() - 2; ++i) {
        check(a.size(i) == b.size(i), "matmul: batch dim " + std::to_string(i) + " mismatch " +
                                          shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    m = a.size(a.rank() - 2);
    k = a.size(a.rank() - 1);
    check(b.size(b.rank() - 2) == k, "matmul: inner dims " + std::to_string(k) + " vs " +
                                         std::to_string(b.size(b.rank() - 2)) + " do not match");
    n = b.size(b.rank() - 1);
    batch = a.numel() / (m * k);
}

}  // namespace

template <typename T>
tensor<T> matmul(const tensor<T> & a, const tensor<T> & b) {
    int64_t batch, m, k, n;
    matmul_check(a, b, batch, m, k, n);

    std::vector<int64_t> yshape = a.shape;
    yshape[yshape.size() - 1] = n;
    tensor<T> y(yshape);
    for (int64_t bt = 0; bt < batch; ++bt) {
        matmul_acc(a.ptr() + bt * m * k, b.ptr() + bt * k * n, y.ptr() + bt * m * n, m, k, n);
    }
    check_finite(y, "matmul");
    return y;
}

template <typename T>
void matmul_backward(const tensor<T> & a, const tensor<T> & b, const tensor<T> & gy,
                     tensor<T> & ga, tensor<T> & gb) {
    int64_t batch, m, k, n;
    matmul_check(a, b, batch, m, k, n);

    ga = tensor<T>(a.shape);
    gb = tensor<T>(b.shape);
    for (int64_t bt = 0; bt < batch; ++bt) {
        const T * ap = a.ptr() + bt * m * k;
        const T * bp = b.ptr() + bt * k * n;
        const T * gp = gy.ptr() + bt * m * n;
        T * gap = ga.ptr() + bt * m * k;
        T * gbp = gb.ptr() + bt * k * n;
        // ga = gy * b^T
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t p = 0; p < k; ++p) {
                T acc = T(0);
                const T * brow = bp + p * n;
                const T * grow = gp + i * n;
                for (int64_t j = 0; j < n; ++j) {
                    acc += grow[j] * brow[j];
                }
                gap[i * k + p] = acc;
            }
        }
        // gb = a^T * gy
        for (int64_t i = 0; i < m; ++i) {
            const T * grow = gp + i * n;
            for (int64_t p = 0; p < k; ++p) {
                const T av = ap[i * k + p];
                if (av == T(0)) {
                    continue;
                }
                T * gbrow = gbp + p * n;
                for (int64_t j = 0; j < n; ++j) {
                    gbrow[j] += av * grow[j];
                }
            }
        }
    }
}

template <typename T>
tensor<T> permute(const tensor<T> & x, const std::vector<int> & perm) {
    check(static_cast<int>(perm.size()) == x.rank(),
          "permute: perm size " + std::to_string(perm.size()) + " does not match rank " +
              std::to_string(x.rank()));
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        check(p >= 0 && p < x.rank() && !seen[static_cast<size_t>(p)],
              "permute: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }

    const int r = x.rank();
    std::vector<int64_t> yshape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        yshape[static_cast<size_t>(i)] = x.size(perm[static_cast<size_t>(i)]);
    }
    tensor<T> y(yshape);

    std::vector<int64_t> xstrides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        xstrides[static_cast<size_t>(i)] =
            xstrides[static_cast<size_t>(i + 1)] * x.size(i + 1);
    }

    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    for (int64_t flat = 0; flat < y.numel(); ++flat) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) {
            src += idx[static_cast<size_t>(i)] * xstrides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        }
        y[flat] = x[src];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < yshape[static_cast<size_t>(i)]) {
                break;
            }
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return y;
}

template <typename T>
tensor<T> causal_softmax(const tensor<T> & scores) {
    check(scores.rank() >= 2, "causal_softmax: rank must be >= 2");
    const int64_t t = scores.size(scores.rank() - 1);
    check(scores.size(scores.rank() - 2) == t,
          "causal_softmax: last two dims must be square, got " + shape_str(scores.shape));

    tensor<T> y(scores.shape);
    const int64_t batch = scores.numel() / (t * t);
    for (int64_t bt = 0; bt < batch; ++bt) {
        for (int64_t i = 0; i < t; ++i) {
            const T * row = scores.ptr() + (bt * t + i) * t;
            T * yrow = y.ptr() + (bt * t + i) * t;
            T mx = row[0];
            for (int64_t j = 1; j <= i; ++j) {
                mx = std::max(mx, row[j]);
            }
            T denom = T(0);
            for (int64_t j = 0; j <= i; ++j) {
                yrow[j] = std::exp(row[j] - mx);
                denom += yrow[j];
            }
            for (int64_t j = 0; j <= i; ++j) {
                yrow[j] /= denom;
            }
            for (int64_t j = i + 1; j < t; ++j) {
                yrow[j] = T(0);
            }
        }
    }
    check_finite(y, "causal_softmax");
    return y;
}

template <typename T>
void causal_softmax_backward(const tensor<T> & y, const tensor<T> & gy, tensor<T> & gs) {
    const int64_t t = y.size(y.rank() - 1);
    const int64_t batch = y.numel() / (t * t);
    gs = tensor<T>(y.shape);
    for (int64_t bt = 0; bt < batch; ++bt) {
        for (int64_t i = 0; i < t; ++i) {
            const T * yrow = y.ptr() + (bt * t + i) * t;
            const T * grow = gy.ptr() + (bt * t + i) * t;
            T * out = gs.ptr() + (bt * t + i) * t;
            T dot = T(0);
            for (int64_t j = 0; j <= i; ++j) {
                dot += grow[j] * yrow[j];
            }
            for (int64_t j = 0; j <= i; ++j) {
                out[j] = yrow[j] * (grow[j] - dot);
            }
        }
    }
}

template <typename T>
tensor<T> embedding(const tensor<T> & table, const std::vector<int> & ids,
                    const std::vector<int64_t> & out_shape) {
    check(table.rank() == 2, "embedding: table must be rank 2 (V,D)");
    const int64_t v = table.size(0);
    const int64_t d = table.size(1);
    check(numel_of(out_shape) == static_cast<int64_t>(ids.size()),
          "embedding: out shape " + shape_str(out_shape) + " does not match " +
              std::to_string(ids.size()) + " ids");

    std::vector<int64_t> yshape = out_shape;
    yshape.push_back(d);
    tensor<T> y(yshape);
    for (size_t r = 0; r < ids.size(); ++r) {
        check(ids[r] >= 0 && ids[r] < v, "embedding: id " + std::to_string(ids[r]) +
                                             " out of range [0," + std::to_string(v) + ")");
        std::memcpy(y.ptr() + static_cast<int64_t>(r) * d, table.ptr() + ids[r] * d,
                    sizeof(T) * static_cast<size_t>(d));
    }
    return y;
}

template <typename T>
void embedding_backward(const std::vector<int> & ids, int64_t vocab, const tensor<T> & gy,
                        tensor<T> & gtable) {
    const int64_t d = gy.size(gy.rank() - 1);
    gtable = tensor<T>({vocab, d});
    for (size_t r = 0; r < ids.size(); ++r) {
        const T * g = gy.ptr() + static_cast<int64_t>(r) * d;
        T * t = gtable.ptr() + ids[r] * d;
        for (int64_t i = 0; i < d; ++i) {
            t[i] += g[i];
        }
    }
}

template <typename T>
tensor<T> add_rows(const tensor<T> & x, const tensor<T> & table) {
    check(x.rank() == 3, "add_rows: input must be rank 3 (B,T,D)");
    check(table.rank() == 2, "add_rows: table must be rank 2 (P,D)");
    const int64_t t = x.size(1), d = x.size(2);
    check(table.size(0) >= t, "add_rows: table rows " + std::to_string(table.size(0)) +
                                  " < sequence length " + std::to_string(t));
    check(table.size(1) == d, "add_rows: dim mismatch " + std::to_string(table.size(1)) + " vs " +
                                  std::to_string(d));
    tensor<T> y(x.shape);
    for (int64_t b = 0; b < x.size(0); ++b) {
        for (int64_t i = 0; i < t; ++i) {
            const T * xp = x.ptr() + (b * t + i) * d;
            const T * tp = table.ptr() + i * d;
            T * yp = y.ptr() + (b * t + i) * d;
            for (int64_t j = 0; j < d; ++j) {
                yp[j] = xp[j] + tp[j];
            }
        }
    }
    check_finite(y, "add_rows");
    return y;
}

template <typename T>
tensor<T> concat_dim1(const tensor<T> & a, const tensor<T> & b) {
    check(a.rank() == 3 && b.rank() == 3, "concat_dim1: operands must be rank 3 (B,T,D)");
    check(a.size(0) == b.size(0) && a.size(2) == b.size(2),
          "concat_dim1: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const int64_t bsz = a.size(0), ta = a.size(1), tb = b.size(1), d = a.size(2);
    tensor<T> y({bsz, ta + tb, d});
    for (int64_t i = 0; i < bsz; ++i) {
        std::memcpy(y.ptr() + i * (ta + tb) * d, a.ptr() + i * ta * d,
                    sizeof(T) * static_cast<size_t>(ta * d));
        std::memcpy(y.ptr() + (i * (ta + tb) + ta) * d, b.ptr() + i * tb * d,
                    sizeof(T) * static_cast<size_t>(tb * d));
    }
    return y;
}

template <typename T>
tensor<T> nchw_to_tokens(const tensor<T> & x) {
    check(x.rank() == 4, "nchw_to_tokens: input must be rank 4, got " + shape_str(x.shape));
    const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    tensor<T> y({b, h * w, c});
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t ci = 0; ci < c; ++ci) {
            const T * xp = x.ptr() + (bi * c + ci) * h * w;
            T * yp = y.ptr() + bi * h * w * c + ci;
            for (int64_t i = 0; i < h * w; ++i) {
                yp[i * c] = xp[i];
            }
        }
    }
    return y;
}

template <typename T>
tensor<T> tokens_to_nchw(const tensor<T> & t, int64_t h, int64_t w) {
    check(t.rank() == 3, "tokens_to_nchw: input must be rank 3, got " + shape_str(t.shape));
    check(t.size(1) == h * w, "tokens_to_nchw: token count " + std::to_string(t.size(1)) +
                                  " does not match grid " + std::to_string(h) + "x" +
                                  std::to_string(w));
    const int64_t b = t.size(0), c = t.size(2);
    tensor<T> y({b, c, h, w});
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t ci = 0; ci < c; ++ci) {
            const T * tp = t.ptr() + bi * h * w * c + ci;
            T * yp = y.ptr() + (bi * c + ci) * h * w;
            for (int64_t i = 0; i < h * w; ++i) {
                yp[i] = tp[i * c];
            }
        }
    }
    return y;
}

template <typename T>
xent_result softmax_cross_entropy(const tensor<T> & logits, const std::vector<int> & targets,
                                  const std::vector<bool> & mask) {
    check(logits.rank() == 2, "softmax_cross_entropy: logits must be rank 2 (T,V), got " +
                                  shape_str(logits.shape));
    const int64_t t = logits.size(0), v = logits.size(1);
    check(static_cast<int64_t>(targets.size()) == t,
          "softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
              std::to_string(t) + " rows");
    check(static_cast<int64_t>(mask.size()) == t,
          "softmax_cross_entropy: mask length " + std::to_string(mask.size()) + " for " +
              std::to_string(t) + " rows");

    double total = 0.0;
    int64_t count = 0;
    for (int64_t r = 0; r < t; ++r) {
        if (!mask[static_cast<size_t>(r)]) {
            continue;
        }
        const int tgt = targets[static_cast<size_t>(r)];
        check(tgt >= 0 && tgt < v, "softmax_cross_entropy: target " + std::to_string(tgt) +
                                       " out of range [0," + std::to_string(v) + ") at row " +
                                       std::to_string(r));
        const T * row = logits.ptr() + r * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) {
            mx = std::max(mx, double(row[j]));
        }
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            denom += std::exp(double(row[j]) - mx);
        }
        total += mx + std::log(denom) - double(row[tgt]);
        ++count;
    }

    xent_result res;
    res.unmasked = count;
    res.all_masked = count == 0;
    res.value = count == 0 ? 0.0 : total / double(count);
    return res;
}

template <typename T>
void softmax_cross_entropy_backward(const tensor<T> & logits, const std::vector<int> & targets,
                                    const std::vector<bool> & mask, double gy, tensor<T> & gx) {
    const int64_t t = logits.size(0), v = logits.size(1);
    gx = tensor<T>(logits.shape);
    int64_t count = 0;
    for (int64_t r = 0; r < t; ++r) {
        count += mask[static_cast<size_t>(r)] ? 1 : 0;
    }
    if (count == 0) {
        return;
    }
    const double scale = gy / double(count);
    for (int64_t r = 0; r < t; ++r) {
        if (!mask[static_cast<size_t>(r)]) {
            continue;
        }
        const T * row = logits.ptr() + r * v;
        T * grow = gx.ptr() + r * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) {
            mx = std::max(mx, double(row[j]));
        }
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            denom += std::exp(double(row[j]) - mx);
        }
        for (int64_t j = 0; j < v; ++j) {
            const double p = std::exp(double(row[j]) - mx) / denom;
            const double onehot = j == targets[static_cast<size_t>(r)] ? 1.0 : 0.0;
            grow[j] = static_cast<T>((p - onehot) * scale);
        }
    }
}

template <typename T>
T sum(const tensor<T> & x) {
    T acc = T(0);
    for (int64_t i = 0; i < x.numel(); ++i) {
        acc += x[i];
    }
    return acc;
}

template <typename T>
T deterministic_sum(std::vector<T> addends) {
    std::sort(addends.begin(), addends.end());
    T acc = T(0);
    for (T v : addends) {
        acc += v;
    }
    return acc;
}

// ---------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------

#define CVL_INSTANTIATE_OPS(T)                                                                     \
    template tensor<T> conv2d<T>(const tensor<T> &, const tensor<T> &, const tensor<T> *,         \
                                 const conv2d_attrs &);                                            \
    template void conv2d_backward<T>(const tensor<T> &, const tensor<T> &, const conv2d_attrs &,  \
                                     const tensor<T> &, tensor<T> &, tensor<T> &, tensor<T> *);   \
    template tensor<T> layer_norm<T>(const tensor<T> &, const tensor<T> &, const tensor<T> &,     \
                                     double, int, std::vector<T> *, std::vector<T> *);            \
    template void layer_norm_backward<T>(const tensor<T> &, const tensor<T> &, int,               \
                                         const std::vector<T> &, const std::vector<T> &,          \
                                         const tensor<T> &, tensor<T> &, tensor<T> &,             \
                                         tensor<T> &);                                             \
    template tensor<T> gelu<T>(const tensor<T> &);                                                \
    template void gelu_backward<T>(const tensor<T> &, const tensor<T> &, tensor<T> &);            \
    template tensor<T> add<T>(const tensor<T> &, const tensor<T> &);                              \
    template tensor<T> mul<T>(const tensor<T> &, const tensor<T> &);                              \
    template tensor<T> scalar_mul<T>(const tensor<T> &, double);                                  \
    template tensor<T> channel_scale<T>(const tensor<T> &, const tensor<T> &);                    \
    template void channel_scale_backward<T>(const tensor<T> &, const tensor<T> &,                 \
                                            const tensor<T> &, tensor<T> &, tensor<T> &);         \
    template tensor<T> linear<T>(const tensor<T> &, const tensor<T> &, const tensor<T> *);        \
    template void linear_backward<T>(const tensor<T> &, const tensor<T> &, const tensor<T> &,     \
                                     tensor<T> &, tensor<T> &, tensor<T> *);                      \
    template tensor<T> matmul<T>(const tensor<T> &, const tensor<T> &);                           \
    template void matmul_backward<T>(const tensor<T> &, const tensor<T> &, const tensor<T> &,     \
                                     tensor<T> &, tensor<T> &);                                   \
    template tensor<T> permute<T>(const tensor<T> &, const std::vector<int> &);                   \
    template tensor<T> causal_softmax<T>(const tensor<T> &);                                      \
    template void causal_softmax_backward<T>(const tensor<T> &, const tensor<T> &, tensor<T> &);  \
    template tensor<T> embedding<T>(const tensor<T> &, const std::vector<int> &,                  \
                                    const std::vector<int64_t> &);                                \
    template void embedding_backward<T>(const std::vector<int> &, int64_t, const tensor<T> &,     \
                                        tensor<T> &);                                             \
    template tensor<T> add_rows<T>(const tensor<T> &, const tensor<T> &);                         \
    template tensor<T> concat_dim1<T>(const tensor<T> &, const tensor<T> &);                      \
    template tensor<T> nchw_to_tokens<T>(const tensor<T> &);                                      \
    template tensor<T> tokens_to_nchw<T>(const tensor<T> &, int64_t, int64_t);                    \
    template xent_result softmax_cross_entropy<T>(const tensor<T> &, const std::vector<int> &,    \
                                                  const std::vector<bool> &);                     \
    template void softmax_cross_entropy_backward<T>(const tensor<T> &, const std::vector<int> &,  \
                                                    const std::vector<bool> &, double,            \
                                                    tensor<T> &);                                 \
    template T sum<T>(const tensor<T> &);                                                         \
    template T deterministic_sum<T>(std::vector<T>);

CVL_INSTANTIATE_OPS(float)
CVL_INSTANTIATE_OPS(double)

#undef CVL_INSTANTIATE_OPS

}  // namespace cvl::ops

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cvl/tensor.hpp"

namespace cvl::ops {

// ---------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------

struct conv2d_attrs {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

enum class conv_algo {
    auto_select,  // im2col when the patch is big enough to matter
    direct,       // reference sliding-window path
    im2col,
};

// Selects the forward algorithm for conv2d. The two paths agree within
// float rounding; `direct` is the in-repo correctness reference.
conv_algo & conv2d_algo();

// x: [B, Cin, H, W]; w: [Cout, Cin/groups, k, k]; bias: [Cout] or null.
// Zero padding, floor output arithmetic.
template <typename T>
tensor<T> conv2d(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias,
                 const conv2d_attrs & a);

template <typename T>
tensor<T> conv2d(const tensor<T> & x, const tensor<T> & w, std::nullptr_t,
                 const conv2d_attrs & a) {
    return conv2d(x, w, static_cast<const tensor<T> *>(nullptr), a);
}

template <typename T>
void conv2d_backward(const tensor<T> & x, const tensor<T> & w, const conv2d_attrs & a,
                     const tensor<T> & gy, tensor<T> & gx, tensor<T> & gw, tensor<T> * gb);

// Output spatial size for one axis.
int64_t conv_out_size(int64_t in, int k, int stride, int padding);

// ---------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------

// Normalizes across dimension `axis` at every other-index position:
// y = (x - mean) / sqrt(var + eps) * gamma + beta, biased variance.
// gamma/beta have length shape[axis]. Fills mean/inv_std (one entry per
// normalized slice, outer*inner of them) when provided.
template <typename T>
tensor<T> layer_norm(const tensor<T> & x, const tensor<T> & gamma, const tensor<T> & beta,
                     double eps, int axis, std::vector<T> * save_mean,
                     std::vector<T> * save_inv_std);

template <typename T>
void layer_norm_backward(const tensor<T> & x, const tensor<T> & gamma, int axis,
                         const std::vector<T> & mean, const std::vector<T> & inv_std,
                         const tensor<T> & gy, tensor<T> & gx, tensor<T> & ggamma,
                         tensor<T> & gbeta);

// ---------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------

// Exact erf form: x * Phi(x).
template <typename T>
tensor<T> gelu(const tensor<T> & x);

template <typename T>
void gelu_backward(const tensor<T> & x, const tensor<T> & gy, tensor<T> & gx);

template <typename T>
tensor<T> add(const tensor<T> & a, const tensor<T> & b);

template <typename T>
tensor<T> mul(const tensor<T> & a, const tensor<T> & b);

template <typename T>
tensor<T> scalar_mul(const tensor<T> & x, double c);

// x: [B, C, H, W]; s: [C]; y[b,c,h,w] = x[b,c,h,w] * s[c].
template <typename T>
tensor<T> channel_scale(const tensor<T> & x, const tensor<T> & s);

template <typename T>
void channel_scale_backward(const tensor<T> & x, const tensor<T> & s, const tensor<T> & gy,
                            tensor<T> & gx, tensor<T> & gs);

// ---------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------

// x: [..., Din]; w: [Dout, Din]; y = x w^T + b, batch dims preserved.
template <typename T>
tensor<T> linear(const tensor<T> & x, const tensor<T> & w, const tensor<T> * bias);

template <typename T>
tensor<T> linear(const tensor<T> & x, const tensor<T> & w, std::nullptr_t) {
    return linear(x, w, static_cast<const tensor<T> *>(nullptr));
}

template <typename T>
void linear_backward(const tensor<T> & x, const tensor<T> & w, const tensor<T> & gy,
                     tensor<T> & gx, tensor<T> & gw, tensor<T> * gb);

// a: [..., M, K]; b: [..., K, N]; identical leading dims.
template <typename T>
tensor<T> matmul(const tensor<T> & a, const tensor<T> & b);

template <typename T>
void matmul_backward(const tensor<T> & a, const tensor<T> & b, const tensor<T> & gy,
                     tensor<T> & ga, tensor<T> & gb);

template <typename T>
tensor<T> permute(const tensor<T> & x, const std::vector<int> & perm);

// ---------------------------------------------------------------------
// sequence ops
// ---------------------------------------------------------------------

// scores: [..., T, T]. Row i is softmaxed over columns j <= i; columns
// j > i are exactly zero, so position i never sees the future.
template <typename T>
tensor<T> causal_softmax(const tensor<T> & scores);

template <typename T>
void causal_softmax_backward(const tensor<T> & y, const tensor<T> & gy, tensor<T> & gs);

// table: [V, D]; ids flat; out: out_shape + [D] with out_shape product ==
// ids.size().
template <typename T>
tensor<T> embedding(const tensor<T> & table, const std::vector<int> & ids,
                    const std::vector<int64_t> & out_shape);

template <typename T>
void embedding_backward(const std::vector<int> & ids, int64_t vocab, const tensor<T> & gy,
                        tensor<T> & gtable);

// x: [B, T, D]; table: [P, D] with P >= T; adds table rows 0..T-1 to
// every batch row.
template <typename T>
tensor<T> add_rows(const tensor<T> & x, const tensor<T> & table);

// a: [B, Ta, D]; b: [B, Tb, D] -> [B, Ta+Tb, D].
template <typename T>
tensor<T> concat_dim1(const tensor<T> & a, const tensor<T> & b);

// [B, C, H, W] -> [B, H*W, C], spatial cells flattened row-major.
template <typename T>
tensor<T> nchw_to_tokens(const tensor<T> & x);

template <typename T>
tensor<T> tokens_to_nchw(const tensor<T> & t, int64_t h, int64_t w);

// ---------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------

struct xent_result {
    double value = 0.0;
    int64_t unmasked = 0;
    bool all_masked = false;
};

// logits: [T, V]. Mean over rows with mask true of -log softmax(row)[target],
// max-subtraction stabilized. All-masked input yields 0 with the flag set.
template <typename T>
xent_result softmax_cross_entropy(const tensor<T> & logits, const std::vector<int> & targets,
                                  const std::vector<bool> & mask);

template <typename T>
void softmax_cross_entropy_backward(const tensor<T> & logits, const std::vector<int> & targets,
                                    const std::vector<bool> & mask, double gy, tensor<T> & gx);

// ---------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------

template <typename T>
T sum(const tensor<T> & x);

// Order-invariant sum: addends are sorted by value before accumulation.
template <typename T>
T deterministic_sum(std::vector<T> addends);

}  // namespace cvl::ops

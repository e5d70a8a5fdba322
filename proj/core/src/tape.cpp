#include "cvl/tape.hpp"

#include <algorithm>
#include <numeric>

namespace cvl {

template <typename T>
typename tape<T>::id tape<T>::push(node n) {
    nodes_.push_back(std::move(n));
    return static_cast<id>(nodes_.size()) - 1;
}

template <typename T>
typename tape<T>::node & tape<T>::at(id n) {
    check(n >= 0 && n < static_cast<id>(nodes_.size()),
          "tape: node id " + std::to_string(n) + " out of range");
    return nodes_[static_cast<size_t>(n)];
}

template <typename T>
const typename tape<T>::node & tape<T>::at(id n) const {
    check(n >= 0 && n < static_cast<id>(nodes_.size()),
          "tape: node id " + std::to_string(n) + " out of range");
    return nodes_[static_cast<size_t>(n)];
}

template <typename T>
typename tape<T>::id tape<T>::leaf(std::shared_ptr<const tensor<T>> v) {
    check(v != nullptr, "tape: null leaf value");
    node n;
    n.kind = op_kind::leaf;
    n.val = std::move(v);
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::leaf(tensor<T> v) {
    return leaf(std::make_shared<const tensor<T>>(std::move(v)));
}

template <typename T>
typename tape<T>::id tape<T>::conv2d(id x, id w, id bias, const ops::conv2d_attrs & attrs) {
    node n;
    n.kind = op_kind::conv2d;
    n.in = {x, w, bias};
    n.conv = attrs;
    const tensor<T> * b = bias == invalid ? nullptr : at(bias).val.get();
    n.val = std::make_shared<const tensor<T>>(ops::conv2d(*at(x).val, *at(w).val, b, attrs));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::layer_norm_axis(id x, id gamma, id beta, double eps, int axis) {
    node n;
    n.kind = op_kind::layer_norm;
    n.in = {x, gamma, beta};
    n.axis = axis;
    n.scalar = eps;
    n.val = std::make_shared<const tensor<T>>(
        ops::layer_norm(*at(x).val, *at(gamma).val, *at(beta).val, eps, axis, &n.stat_a,
                        &n.stat_b));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::layer_norm_channels(id x, id gamma, id beta, double eps) {
    check(at(x).val->rank() == 4,
          "layer_norm_channels: input must be rank 4, got " + shape_str(at(x).val->shape));
    return layer_norm_axis(x, gamma, beta, eps, 1);
}

template <typename T>
typename tape<T>::id tape<T>::layer_norm_last(id x, id gamma, id beta, double eps) {
    return layer_norm_axis(x, gamma, beta, eps, at(x).val->rank() - 1);
}

template <typename T>
typename tape<T>::id tape<T>::gelu(id x) {
    node n;
    n.kind = op_kind::gelu;
    n.in = {x};
    n.val = std::make_shared<const tensor<T>>(ops::gelu(*at(x).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::linear(id x, id w, id bias) {
    node n;
    n.kind = op_kind::linear;
    n.in = {x, w, bias};
    const tensor<T> * b = bias == invalid ? nullptr : at(bias).val.get();
    n.val = std::make_shared<const tensor<T>>(ops::linear(*at(x).val, *at(w).val, b));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::matmul(id a, id b) {
    node n;
    n.kind = op_kind::matmul;
    n.in = {a, b};
    n.val = std::make_shared<const tensor<T>>(ops::matmul(*at(a).val, *at(b).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::permute(id x, std::vector<int> perm) {
    node n;
    n.kind = op_kind::permute;
    n.in = {x};
    n.ints = std::vector<int>(perm.begin(), perm.end());
    n.val = std::make_shared<const tensor<T>>(ops::permute(*at(x).val, perm));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::reshape(id x, std::vector<int64_t> new_shape) {
    const tensor<T> & xv = *at(x).val;
    check(numel_of(new_shape) == xv.numel(), "reshape: cannot view " + shape_str(xv.shape) +
                                                 " as " + shape_str(new_shape));
    node n;
    n.kind = op_kind::reshape;
    n.in = {x};
    n.dims = xv.shape;
    n.val = std::make_shared<const tensor<T>>(tensor<T>(new_shape, xv.data));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::add(id a, id b) {
    node n;
    n.kind = op_kind::add;
    n.in = {a, b};
    n.val = std::make_shared<const tensor<T>>(ops::add(*at(a).val, *at(b).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::mul(id a, id b) {
    node n;
    n.kind = op_kind::mul;
    n.in = {a, b};
    n.val = std::make_shared<const tensor<T>>(ops::mul(*at(a).val, *at(b).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::scalar_mul(id x, double c) {
    node n;
    n.kind = op_kind::scalar_mul;
    n.in = {x};
    n.scalar = c;
    n.val = std::make_shared<const tensor<T>>(ops::scalar_mul(*at(x).val, c));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::channel_scale(id x, id s) {
    node n;
    n.kind = op_kind::channel_scale;
    n.in = {x, s};
    n.val = std::make_shared<const tensor<T>>(ops::channel_scale(*at(x).val, *at(s).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::causal_softmax(id scores) {
    node n;
    n.kind = op_kind::causal_softmax;
    n.in = {scores};
    n.val = std::make_shared<const tensor<T>>(ops::causal_softmax(*at(scores).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::embedding(id table, std::vector<int> ids,
                                        std::vector<int64_t> out_shape) {
    node n;
    n.kind = op_kind::embedding;
    n.in = {table};
    n.ints = ids;
    n.val = std::make_shared<const tensor<T>>(ops::embedding(*at(table).val, ids, out_shape));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::add_rows(id x, id table) {
    node n;
    n.kind = op_kind::add_rows;
    n.in = {x, table};
    n.val = std::make_shared<const tensor<T>>(ops::add_rows(*at(x).val, *at(table).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::concat_dim1(id a, id b) {
    node n;
    n.kind = op_kind::concat_dim1;
    n.in = {a, b};
    n.val = std::make_shared<const tensor<T>>(ops::concat_dim1(*at(a).val, *at(b).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::nchw_to_tokens(id x) {
    node n;
    n.kind = op_kind::nchw_to_tokens;
    n.in = {x};
    n.val = std::make_shared<const tensor<T>>(ops::nchw_to_tokens(*at(x).val));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::softmax_cross_entropy(id logits, std::vector<int> targets,
                                                    std::vector<bool> mask, bool * all_masked) {
    node n;
    n.kind = op_kind::softmax_xent;
    n.in = {logits};
    const ops::xent_result res = ops::softmax_cross_entropy(*at(logits).val, targets, mask);
    if (res.all_masked) {
        warnings_.push_back("softmax_cross_entropy: all positions masked, loss defined as 0");
    }
    if (all_masked != nullptr) {
        *all_masked = res.all_masked;
    }
    n.ints = std::move(targets);
    n.bools = std::move(mask);
    n.val = std::make_shared<const tensor<T>>(tensor<T>::scalar(static_cast<T>(res.value)));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::sum(id x) {
    node n;
    n.kind = op_kind::sum_all;
    n.in = {x};
    n.val = std::make_shared<const tensor<T>>(tensor<T>::scalar(ops::sum(*at(x).val)));
    return push(std::move(n));
}

template <typename T>
typename tape<T>::id tape<T>::affine_combine(const std::vector<id> & xs,
                                             std::vector<double> coeffs) {
    check(xs.size() == coeffs.size(), "affine_combine: " + std::to_string(xs.size()) +
                                          " inputs vs " + std::to_string(coeffs.size()) +
                                          " coefficients");
    check(!xs.empty(), "affine_combine: empty input list");
    node n;
    n.kind = op_kind::affine_combine;
    n.in = xs;
    std::vector<T> addends;
    addends.reserve(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        const tensor<T> & v = *at(xs[i]).val;
        check(v.numel() == 1, "affine_combine: input " + std::to_string(i) + " is not scalar");
        addends.push_back(static_cast<T>(coeffs[i]) * v[0]);
    }
    T total;
    if (options().deterministic) {
        total = ops::deterministic_sum(std::move(addends));
    } else {
        total = std::accumulate(addends.begin(), addends.end(), T(0));
    }
    n.coeffs = std::move(coeffs);
    n.val = std::make_shared<const tensor<T>>(tensor<T>::scalar(total));
    return push(std::move(n));
}

template <typename T>
const tensor<T> & tape<T>::val(id n) const {
    return *at(n).val;
}

template <typename T>
const tensor<T> & tape<T>::grad(id n) const {
    const node & nd = at(n);
    if (nd.grad.numel() == 0 && nd.val->numel() != 0) {
        // Node untouched by backward: materialize its zero gradient so the
        // returned reference stays valid across further grad() calls.
        const_cast<node &>(nd).grad = tensor<T>(nd.val->shape);
    }
    return nd.grad;
}

template <typename T>
bool tape<T>::grad_defined(id n) const {
    return at(n).grad.numel() != 0;
}

template <typename T>
void tape<T>::accumulate(tensor<T> & dst, const tensor<T> & delta) {
    if (dst.numel() == 0) {
        dst = delta;
        return;
    }
    check(dst.same_shape(delta), "tape: gradient shape mismatch " + shape_str(dst.shape) +
                                     " vs " + shape_str(delta.shape));
    for (int64_t i = 0; i < dst.numel(); ++i) {
        dst[i] += delta[i];
    }
}

template <typename T>
void tape<T>::backward(id root) {
    const node & r = at(root);
    check(r.val->numel() == 1, "backward: root must be scalar, got shape " +
                                   shape_str(r.val->shape));

    // Reachability pass so unrelated subgraphs are not walked.
    std::vector<bool> needed(nodes_.size(), false);
    needed[static_cast<size_t>(root)] = true;
    for (id n = root; n >= 0; --n) {
        if (!needed[static_cast<size_t>(n)]) {
            continue;
        }
        for (id in : nodes_[static_cast<size_t>(n)].in) {
            if (in != invalid) {
                needed[static_cast<size_t>(in)] = true;
            }
        }
    }

    at(root).grad = tensor<T>(r.val->shape);
    at(root).grad[0] = T(1);

    for (id n = root; n >= 0; --n) {
        if (needed[static_cast<size_t>(n)] && at(n).grad.numel() != 0) {
            backward_node(n);
        }
    }
}

template <typename T>
void tape<T>::backward_node(id nid) {
    node & n = at(nid);
    const tensor<T> & gy = n.grad;

    auto input_val = [&](size_t i) -> const tensor<T> & { return *at(n.in[i]).val; };
    auto add_to_input = [&](size_t i, const tensor<T> & delta) {
        if (n.in[i] != invalid) {
            accumulate(at(n.in[i]).grad, delta);
        }
    };

    switch (n.kind) {
        case op_kind::leaf:
            break;
        case op_kind::conv2d: {
            tensor<T> gx, gw, gb;
            const bool has_bias = n.in[2] != invalid;
            ops::conv2d_backward(input_val(0), input_val(1), n.conv, gy, gx, gw,
                                 has_bias ? &gb : nullptr);
            add_to_input(0, gx);
            add_to_input(1, gw);
            if (has_bias) {
                add_to_input(2, gb);
            }
            break;
        }
        case op_kind::layer_norm: {
            tensor<T> gx, ggamma, gbeta;
            ops::layer_norm_backward(input_val(0), input_val(1), n.axis, n.stat_a, n.stat_b, gy,
                                     gx, ggamma, gbeta);
            add_to_input(0, gx);
            add_to_input(1, ggamma);
            add_to_input(2, gbeta);
            break;
        }
        case op_kind::gelu: {
            tensor<T> gx;
            ops::gelu_backward(input_val(0), gy, gx);
            add_to_input(0, gx);
            break;
        }
        case op_kind::linear: {
            tensor<T> gx, gw, gb;
            const bool has_bias = n.in[2] != invalid;
            ops::linear_backward(input_val(0), input_val(1), gy, gx, gw,
                                 has_bias ? &gb : nullptr);
            add_to_input(0, gx);
            add_to_input(1, gw);
            if (has_bias) {
                add_to_input(2, gb);
            }
            break;
        }
        case op_kind::matmul: {
            tensor<T> ga, gb;
            ops::matmul_backward(input_val(0), input_val(1), gy, ga, gb);
            add_to_input(0, ga);
            add_to_input(1, gb);
            break;
        }
        case op_kind::permute: {
            std::vector<int> inverse(n.ints.size());
            for (size_t i = 0; i < n.ints.size(); ++i) {
                inverse[static_cast<size_t>(n.ints[i])] = static_cast<int>(i);
            }
            add_to_input(0, ops::permute(gy, inverse));
            break;
        }
        case op_kind::reshape: {
            add_to_input(0, tensor<T>(n.dims, gy.data));
            break;
        }
        case op_kind::add: {
            add_to_input(0, gy);
            add_to_input(1, gy);
            break;
        }
        case op_kind::mul: {
            add_to_input(0, ops::mul(gy, input_val(1)));
            add_to_input(1, ops::mul(gy, input_val(0)));
            break;
        }
        case op_kind::scalar_mul: {
            add_to_input(0, ops::scalar_mul(gy, n.scalar));
            break;
        }
        case op_kind::channel_scale: {
            tensor<T> gx, gs;
            ops::channel_scale_backward(input_val(0), input_val(1), gy, gx, gs);
            add_to_input(0, gx);
            add_to_input(1, gs);
            break;
        }
        case op_kind::causal_softmax: {
            tensor<T> gs;
            ops::causal_softmax_backward(*n.val, gy, gs);
            add_to_input(0, gs);
            break;
        }
        case op_kind::embedding: {
            tensor<T> gtable;
            ops::embedding_backward(n.ints, input_val(0).size(0), gy, gtable);
            add_to_input(0, gtable);
            break;
        }
        case op_kind::add_rows: {
            add_to_input(0, gy);
            const tensor<T> & table = input_val(1);
            tensor<T> gtable(table.shape);
            const int64_t b = gy.size(0), t = gy.size(1), d = gy.size(2);
            for (int64_t bi = 0; bi < b; ++bi) {
                for (int64_t ti = 0; ti < t; ++ti) {
                    const T * g = gy.ptr() + (bi * t + ti) * d;
                    T * dst = gtable.ptr() + ti * d;
                    for (int64_t j = 0; j < d; ++j) {
                        dst[j] += g[j];
                    }
                }
            }
            add_to_input(1, gtable);
            break;
        }
        case op_kind::concat_dim1: {
            const tensor<T> & a = input_val(0);
            const tensor<T> & b = input_val(1);
            const int64_t bsz = a.size(0), ta = a.size(1), tb = b.size(1), d = a.size(2);
            tensor<T> ga(a.shape), gb(b.shape);
            for (int64_t i = 0; i < bsz; ++i) {
                std::copy_n(gy.ptr() + i * (ta + tb) * d, ta * d, ga.ptr() + i * ta * d);
                std::copy_n(gy.ptr() + (i * (ta + tb) + ta) * d, tb * d, gb.ptr() + i * tb * d);
            }
            add_to_input(0, ga);
            add_to_input(1, gb);
            break;
        }
        case op_kind::nchw_to_tokens: {
            const tensor<T> & x = input_val(0);
            add_to_input(0, ops::tokens_to_nchw(gy, x.size(2), x.size(3)));
            break;
        }
        case op_kind::softmax_xent: {
            tensor<T> gx;
            ops::softmax_cross_entropy_backward(input_val(0), n.ints, n.bools, double(gy[0]), gx);
            add_to_input(0, gx);
            break;
        }
        case op_kind::sum_all: {
            tensor<T> gx(input_val(0).shape);
            gx.fill(gy[0]);
            add_to_input(0, gx);
            break;
        }
        case op_kind::affine_combine: {
            for (size_t i = 0; i < n.in.size(); ++i) {
                add_to_input(i, tensor<T>::scalar(static_cast<T>(n.coeffs[i]) * gy[0]));
            }
            break;
        }
    }
}

template class tape<float>;
template class tape<double>;

}  // namespace cvl

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cvl/ops.hpp"
#include "cvl/tensor.hpp"

namespace cvl {

enum class op_kind : uint8_t {
    leaf,
    conv2d,
    layer_norm,
    gelu,
    linear,
    matmul,
    permute,
    reshape,
    add,
    mul,
    scalar_mul,
    channel_scale,
    causal_softmax,
    embedding,
    add_rows,
    concat_dim1,
    nchw_to_tokens,
    softmax_xent,
    sum_all,
    affine_combine,
};

// Records an eager forward graph and replays it in reverse for gradients.
// Node ids are handed out in construction order, which is a topological
// order of the (acyclic) graph; backward walks ids downward and touches
// each reachable node exactly once. Leaf values can share storage with
// caller-owned parameter tensors.
template <typename T>
class tape {
  public:
    using id = int32_t;
    static constexpr id invalid = -1;

    id leaf(std::shared_ptr<const tensor<T>> v);
    id leaf(tensor<T> v);

    id conv2d(id x, id w, id bias, const ops::conv2d_attrs & attrs);
    // Normalizes over dim 1 of NCHW maps.
    id layer_norm_channels(id x, id gamma, id beta, double eps);
    // Normalizes over the trailing dim.
    id layer_norm_last(id x, id gamma, id beta, double eps);
    id gelu(id x);
    id linear(id x, id w, id bias);
    id matmul(id a, id b);
    id permute(id x, std::vector<int> perm);
    id reshape(id x, std::vector<int64_t> new_shape);
    id add(id a, id b);
    id mul(id a, id b);
    id scalar_mul(id x, double c);
    id channel_scale(id x, id s);
    id causal_softmax(id scores);
    id embedding(id table, std::vector<int> ids, std::vector<int64_t> out_shape);
    id add_rows(id x, id table);
    id concat_dim1(id a, id b);
    id nchw_to_tokens(id x);
    id softmax_cross_entropy(id logits, std::vector<int> targets, std::vector<bool> mask,
                             bool * all_masked = nullptr);
    id sum(id x);
    // y = sum_i coeffs[i] * xs[i], scalar inputs only. In deterministic
    // mode the addends are combined in value order.
    id affine_combine(const std::vector<id> & xs, std::vector<double> coeffs);

    const tensor<T> & val(id n) const;
    // Zero-filled until backward marks the node reachable from the root.
    const tensor<T> & grad(id n) const;
    bool grad_defined(id n) const;

    // Seeds d(root)/d(root) = 1 and accumulates vector-Jacobian products
    // down the tape. Root must be scalar.
    void backward(id root);

    size_t size() const { return nodes_.size(); }
    std::vector<std::string> & warnings() { return warnings_; }

  private:
    struct node {
        op_kind kind = op_kind::leaf;
        std::vector<id> in;
        std::shared_ptr<const tensor<T>> val;
        tensor<T> grad;

        ops::conv2d_attrs conv;
        int axis = 0;
        double scalar = 0.0;
        std::vector<T> stat_a, stat_b;  // layer_norm mean / inv_std
        std::vector<int> ints;          // perm / targets / embedding ids
        std::vector<bool> bools;        // loss mask
        std::vector<int64_t> dims;      // reshape source shape
        std::vector<double> coeffs;
    };

    id push(node n);
    node & at(id n);
    const node & at(id n) const;
    id layer_norm_axis(id x, id gamma, id beta, double eps, int axis);
    void backward_node(id n);
    static void accumulate(tensor<T> & dst, const tensor<T> & delta);

    std::vector<node> nodes_;
    std::vector<std::string> warnings_;
};

extern template class tape<float>;
extern template class tape<double>;

using tape_f32 = tape<float>;
using tape_f64 = tape<double>;

}  // namespace cvl

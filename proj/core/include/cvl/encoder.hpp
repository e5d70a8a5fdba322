#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvl/params.hpp"
#include "cvl/tape.hpp"
#include "cvl/tensor.hpp"

namespace cvl {

// Hierarchical conv encoder: patchify stem, then stages of residual
// blocks (depthwise conv -> channel layer-norm -> pointwise expand ->
// gelu -> pointwise project -> per-channel scale) separated by
// norm + 2x2/2 downsamplers that double the channel count. A fifth
// stage extends total downsampling from 32x to 64x.
struct encoder_config {
    std::vector<int> depths{3, 3, 27, 3};
    std::vector<int> channels{192, 384, 768, 1536};
    int kernel_size = 7;
    int stem_patch = 4;
    int ffn_expansion = 4;
    double layer_scale_init = 1e-6;
    double norm_eps = 1e-6;

    int num_stages() const { return static_cast<int>(depths.size()); }
    int total_blocks() const;
    // stem_patch * 2^(stages-1): 32 for 4 stages, 64 for 5.
    int64_t downsample_factor() const;
    void validate() const;

    // 4-stage large geometry (depths 3/3/27/3, widths 192..1536).
    static encoder_config large();
    // large() plus a compression stage: 6 blocks, width doubled again.
    static encoder_config large_5stage();
    // Small geometry for tests; stage count picks the downsample factor.
    static encoder_config tiny(int stages);
};

template <typename T>
struct encoder_state {
    encoder_config cfg;
    named_params<T> params;
};

template <typename T>
struct visual_tokens {
    tensor<T> tokens;  // [B, N, C], spatial grid flattened row-major
    int64_t grid_h = 0;
    int64_t grid_w = 0;
};

// Parameters initialized truncated-normal (std 0.02) for weights, zeros
// for biases/shifts, ones for norm scales, layer_scale_init for scales.
// Identical seeds give bitwise-identical states.
template <typename T>
encoder_state<T> build_encoder(const encoder_config & cfg, uint64_t seed);

// Analytic parameter total for a config; equals the allocated count.
int64_t encoder_param_count(const encoder_config & cfg);

// Inference path: no tape, intermediates freed as the pass proceeds.
template <typename T>
visual_tokens<T> encode(const encoder_state<T> & state, const tensor<T> & image);

template <typename T>
struct taped_tokens {
    typename tape<T>::id node = tape<T>::invalid;
    int64_t grid_h = 0;
    int64_t grid_w = 0;
};

// Training path: same math recorded on a tape through `bind`.
template <typename T>
taped_tokens<T> encode_on_tape(const encoder_state<T> & state, tape<T> & tp,
                               tape_binding<T> & bind, typename tape<T>::id image);

// Expected token grid for an input size (floor law).
struct token_grid {
    int64_t h = 0;
    int64_t w = 0;
    int64_t count() const { return h * w; }
};
token_grid encoder_grid(const encoder_config & cfg, int64_t img_h, int64_t img_w);

// Which parameters a training stage updates.
struct freeze_spec {
    enum class kind { all, none, last_n_blocks, from_stage };
    kind mode = kind::all;
    int n = 0;      // last_n_blocks
    int stage = 0;  // from_stage, 1-based

    static freeze_spec all() { return {kind::all, 0, 0}; }
    static freeze_spec none() { return {kind::none, 0, 0}; }
    static freeze_spec last_n_blocks(int n) { return {kind::last_n_blocks, n, 0}; }
    static freeze_spec from_stage(int s) { return {kind::from_stage, 0, s}; }
};

// Marks exactly the selected blocks trainable (plus their stage
// downsamplers for from_stage); everything else, including stem and the
// final norm, is frozen. Returns the trainable scalar count.
template <typename T>
int64_t freeze_mask(encoder_state<T> & state, const freeze_spec & spec);

// One-sided receptive field extent in input pixels; cells closer than
// ceil(radius / D) to a border see padding and are excluded from
// equivariance comparisons.
int64_t receptive_field_extent(const encoder_config & cfg);
int64_t equivariance_margin_cells(const encoder_config & cfg);

extern template struct encoder_state<float>;
extern template struct encoder_state<double>;

}  // namespace cvl

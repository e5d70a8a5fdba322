#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvl/encoder.hpp"
#include "cvl/params.hpp"
#include "cvl/tape.hpp"

namespace cvl {

// Two affine layers with a GELU between, applied per token.
struct projector_config {
    int in_dim = 0;      // encoder output channels
    int out_dim = 0;     // LM embedding dim
    int hidden_dim = 0;  // 0 -> out_dim

    int hidden() const { return hidden_dim > 0 ? hidden_dim : out_dim; }
    void validate() const;
};

template <typename T>
struct projector_state {
    projector_config cfg;
    named_params<T> params;  // fc1.weight/bias, fc2.weight/bias
};

template <typename T>
projector_state<T> build_projector(const projector_config & cfg, uint64_t seed);

template <typename T>
tensor<T> project(const projector_state<T> & proj, const tensor<T> & tokens);

template <typename T>
typename tape<T>::id project_on_tape(const projector_state<T> & proj, tape<T> & tp,
                                     tape_binding<T> & bind, typename tape<T>::id tokens);

// Minimal causal decoder: learned absolute position embeddings, pre-norm
// self-attention blocks with 4x MLPs, final norm, and an output head
// tied to the token embedding.
struct toy_lm_config {
    int vocab_size = 0;
    int embed_dim = 0;
    int num_layers = 1;
    int heads = 1;
    int max_seq = 0;
    double norm_eps = 1e-5;

    int head_dim() const { return embed_dim / heads; }
    void validate() const;
};

template <typename T>
struct toy_lm_state {
    toy_lm_config cfg;
    named_params<T> params;
};

template <typename T>
toy_lm_state<T> build_toy_lm(const toy_lm_config & cfg, uint64_t seed);

// visual_emb: [B, N, D]; text ids per batch row, equal lengths. Returns
// logits [B, N + T_text, V]. Logits at position i depend only on
// positions <= i.
template <typename T>
typename tape<T>::id forward_lm_on_tape(const toy_lm_state<T> & lm, tape<T> & tp,
                                        tape_binding<T> & bind, typename tape<T>::id visual_emb,
                                        const std::vector<std::vector<int>> & text_ids);

// One image with its token sequence. loss_mask covers the assembled
// sequence (visual prefix + text); it must be false over the visual
// prefix and marks the positions whose tokens are scored as targets.
template <typename T>
struct multimodal_sample {
    tensor<T> image;  // [1, 3, H, W], already normalized
    std::vector<int> text;
    std::vector<bool> loss_mask;
};

template <typename T>
using multimodal_batch = std::vector<multimodal_sample<T>>;

template <typename T>
struct vlm_model {
    encoder_state<T> encoder;
    projector_state<T> projector;
    toy_lm_state<T> lm;
};

template <typename T>
vlm_model<T> build_vlm(const encoder_config & enc_cfg, const projector_config & proj_cfg,
                       const toy_lm_config & lm_cfg, uint64_t seed);

template <typename T>
struct vlm_bindings {
    tape_binding<T> encoder;
    tape_binding<T> projector;
    tape_binding<T> lm;

    vlm_bindings(tape<T> & tp, vlm_model<T> & m)
        : encoder(tp, m.encoder.params), projector(tp, m.projector.params), lm(tp, m.lm.params) {}
};

template <typename T>
struct lm_loss_result {
    typename tape<T>::id node = tape<T>::invalid;
    double value = 0.0;
    int64_t unmasked = 0;
    bool all_masked = false;
};

// Next-token cross-entropy over positions whose loss_mask is true,
// weighted uniformly across the whole batch. Per-sample forwards share
// the tape, so one backward() yields the full-batch gradients.
template <typename T>
lm_loss_result<T> lm_loss_on_tape(tape<T> & tp, vlm_model<T> & model, vlm_bindings<T> & binds,
                                  const multimodal_batch<T> & batch);

extern template struct projector_state<float>;
extern template struct projector_state<double>;
extern template struct toy_lm_state<float>;
extern template struct toy_lm_state<double>;
extern template struct vlm_model<float>;
extern template struct vlm_model<double>;

}  // namespace cvl

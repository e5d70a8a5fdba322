#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cvl/pipeline.hpp"

namespace cvl {

// Linear ramp 0 -> peak over ceil(warmup_ratio * total) steps, then
// cosine decay to 0 at step == total_steps. Step warmup_end returns peak
// exactly.
double cosine_lr(int64_t step, int64_t total_steps, double peak_lr, double warmup_ratio);

struct adamw_config {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Per-parameter first/second moments keyed by qualified name.
template <typename T>
struct adamw_state {
    adamw_config cfg;
    int64_t step = 0;
    std::map<std::string, tensor<T>> m;
    std::map<std::string, tensor<T>> v;
};

// Bias-corrected AdamW with decoupled weight decay. Rejects non-finite
// gradients (the step is aborted before any parameter changes).
template <typename T>
void adamw_step(std::map<std::string, tensor<T> *> & params,
                const std::map<std::string, tensor<T>> & grads, adamw_state<T> & opt, double lr);

// Which encoder slice a stage trains; resolved against the model's stage
// count when the stage runs.
struct encoder_trainable {
    enum class kind { none, all, last_stage, last_three_stages, from_stage, last_n_blocks };
    kind mode = kind::none;
    int arg = 0;

    static encoder_trainable none() { return {kind::none, 0}; }
    static encoder_trainable all() { return {kind::all, 0}; }
    static encoder_trainable last_stage() { return {kind::last_stage, 0}; }
    static encoder_trainable last_three_stages() { return {kind::last_three_stages, 0}; }
    static encoder_trainable from_stage(int s) { return {kind::from_stage, s}; }
    static encoder_trainable last_n_blocks(int n) { return {kind::last_n_blocks, n}; }

    freeze_spec resolve(int num_stages) const;
};

struct stage_plan {
    int stage_id = 1;
    encoder_trainable encoder;
    bool projector = true;
    bool lm = false;
    double peak_lr = 3e-4;
    int batch_size = 256;
    double warmup_ratio = 0.03;
    int epochs = 1;
    std::string data_source = "synth";
    adamw_config optimizer;

    // The three-stage protocol: the compression stage plus projector at
    // 3e-4/256, then the upper encoder stages plus projector and LM at
    // 2e-5/256, then projector and LM only at 2e-5/128.
    static stage_plan stage1();
    static stage_plan stage2();
    static stage_plan stage3();

    void validate() const;
};

struct train_record {
    int64_t step = 0;
    int stage = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct stage_metrics {
    std::vector<train_record> records;
    int64_t total_steps = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;

    // Mean of the last `window` step losses.
    double smoothed_loss(size_t window) const;
};

// Applies the plan's freeze masks, iterates epochs * |data| samples in
// order (cycling), steps the optimizer every batch_size samples with
// gradients averaged over the whole batch, and logs one record per
// optimizer step. When `log` is non-null it receives a stage banner and
// "step,stage,lr,loss" lines.
template <typename T>
stage_metrics run_stage(vlm_model<T> & model, const stage_plan & plan,
                        const multimodal_batch<T> & data, std::ostream * log = nullptr);

// ---------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------

// Procedural captioning task: one bright rectangle on a dark background;
// the caption encodes the rectangle's color and grid cell, so it is a
// pure function of the pixels.
//
// Token map: 0 pad, 1 bos, 2 eos, 3..6 colors, 7..9 columns, 10..12 rows.
struct synth_config {
    uint64_t seed = 0;
    int n_samples = 64;
    int image_size = 64;
    int caption_len = 5;  // bos + color + col + row + eos
    int vocab = 16;
    // Decouples captions from images (cyclic shift of the caption
    // assignment) for control experiments.
    bool shuffle_captions = false;
};

constexpr int k_synth_tok_pad = 0;
constexpr int k_synth_tok_bos = 1;
constexpr int k_synth_tok_eos = 2;
constexpr int k_synth_tok_color0 = 3;  // 4 colors
constexpr int k_synth_tok_col0 = 7;    // 3 columns
constexpr int k_synth_tok_row0 = 10;   // 3 rows

// Deterministic in cfg.seed; masks cover the visual prefix implied by
// enc_cfg's downsampling of image_size.
template <typename T>
multimodal_batch<T> synth_data(const synth_config & cfg, const encoder_config & enc_cfg);

// The caption tokens sample i would get (for verifying that captions are
// a function of the image parameters).
std::vector<int> synth_caption(const synth_config & cfg, int index);

}  // namespace cvl

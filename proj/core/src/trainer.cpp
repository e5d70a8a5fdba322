#include "cvl/trainer.hpp"

#include <cmath>
#include <ostream>

#include "cvl/ops.hpp"
#include "cvl/rng.hpp"

namespace cvl {

double cosine_lr(int64_t step, int64_t total_steps, double peak_lr, double warmup_ratio) {
    check(total_steps > 0, "cosine_lr: total_steps must be positive");
    check(step >= 0 && step <= total_steps, "cosine_lr: step " + std::to_string(step) +
                                                " outside [0," + std::to_string(total_steps) +
                                                "]");
    check(warmup_ratio > 0 && warmup_ratio < 1, "cosine_lr: warmup_ratio must be in (0,1)");

    const int64_t warmup = static_cast<int64_t>(
        std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step <= warmup) {
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
void adamw_step(std::map<std::string, tensor<T> *> & params,
                const std::map<std::string, tensor<T>> & grads, adamw_state<T> & opt, double lr) {
    // Validate every gradient before touching any parameter.
    for (auto & [name, p] : params) {
        auto it = grads.find(name);
        check(it != grads.end(), "adamw: missing gradient for '" + name + "'");
        check(it->second.shape == p->shape, "adamw: gradient shape " +
                                                shape_str(it->second.shape) +
                                                " does not match parameter '" + name + "' " +
                                                shape_str(p->shape));
        for (int64_t i = 0; i < it->second.numel(); ++i) {
            if (!std::isfinite(it->second[i])) {
                fail("adamw: non-finite gradient for '" + name + "' at flat index " +
                     std::to_string(i) + ", step aborted");
            }
        }
    }

    opt.step += 1;
    const double b1 = opt.cfg.beta1, b2 = opt.cfg.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));

    for (auto & [name, p] : params) {
        const tensor<T> & g = grads.at(name);
        auto mit = opt.m.find(name);
        if (mit == opt.m.end()) {
            mit = opt.m.emplace(name, tensor<T>(p->shape)).first;
            opt.v.emplace(name, tensor<T>(p->shape));
        }
        tensor<T> & m = mit->second;
        tensor<T> & v = opt.v.at(name);

        for (int64_t i = 0; i < p->numel(); ++i) {
            const double gi = g[i];
            const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bias1;
            const double vhat = vi / bias2;
            double update = lr * mhat / (std::sqrt(vhat) + opt.cfg.eps);
            if (opt.cfg.weight_decay > 0) {
                update += lr * opt.cfg.weight_decay * double((*p)[i]);
            }
            (*p)[i] = static_cast<T>(double((*p)[i]) - update);
        }
    }
}

freeze_spec encoder_trainable::resolve(int num_stages) const {
    switch (mode) {
        case kind::none: return freeze_spec::none();
        case kind::all: return freeze_spec::all();
        case kind::last_stage: return freeze_spec::from_stage(num_stages);
        case kind::last_three_stages:
            return freeze_spec::from_stage(std::max(1, num_stages - 2));
        case kind::from_stage: return freeze_spec::from_stage(arg);
        case kind::last_n_blocks: return freeze_spec::last_n_blocks(arg);
    }
    return freeze_spec::none();
}

stage_plan stage_plan::stage1() {
    stage_plan p;
    p.stage_id = 1;
    p.encoder = encoder_trainable::last_stage();
    p.projector = true;
    p.lm = false;
    p.peak_lr = 3e-4;
    p.batch_size = 256;
    return p;
}

stage_plan stage_plan::stage2() {
    stage_plan p;
    p.stage_id = 2;
    p.encoder = encoder_trainable::last_three_stages();
    p.projector = true;
    p.lm = true;
    p.peak_lr = 2e-5;
    p.batch_size = 256;
    return p;
}

stage_plan stage_plan::stage3() {
    stage_plan p;
    p.stage_id = 3;
    p.encoder = encoder_trainable::none();
    p.projector = true;
    p.lm = true;
    p.peak_lr = 2e-5;
    p.batch_size = 128;
    return p;
}

void stage_plan::validate() const {
    check(stage_id >= 1 && stage_id <= 3, "stage_plan: stage_id must be 1..3");
    check(peak_lr > 0, "stage_plan: peak_lr must be positive");
    check(batch_size > 0, "stage_plan: batch_size must be positive");
    check(warmup_ratio > 0 && warmup_ratio < 1, "stage_plan: warmup_ratio must be in (0,1)");
    check(epochs > 0, "stage_plan: epochs must be positive");
}

double stage_metrics::smoothed_loss(size_t window) const {
    check(!records.empty(), "stage_metrics: no records");
    const size_t n = std::min(window, records.size());
    double acc = 0;
    for (size_t i = records.size() - n; i < records.size(); ++i) {
        acc += records[i].loss;
    }
    return acc / static_cast<double>(n);
}

template <typename T>
stage_metrics run_stage(vlm_model<T> & model, const stage_plan & plan,
                        const multimodal_batch<T> & data, std::ostream * log) {
    plan.validate();
    check(!data.empty(), "run_stage: empty data");

    // Freeze masks per plan.
    freeze_mask(model.encoder, plan.encoder.resolve(model.encoder.cfg.num_stages()));
    model.projector.params.set_trainable_all(plan.projector);
    model.lm.params.set_trainable_all(plan.lm);

    // Qualified views of every trainable tensor.
    std::map<std::string, tensor<T> *> trainables;
    auto collect = [&](const std::string & prefix, named_params<T> & p) {
        for (auto & [name, e] : p.entries) {
            if (e.trainable) {
                trainables.emplace(prefix + name, e.value.get());
            }
        }
    };
    collect("encoder/", model.encoder.params);
    collect("projector/", model.projector.params);
    collect("lm/", model.lm.params);
    check(!trainables.empty(), "run_stage: plan trains nothing");

    const int64_t total_samples =
        static_cast<int64_t>(plan.epochs) * static_cast<int64_t>(data.size());
    const int64_t total_steps = (total_samples + plan.batch_size - 1) / plan.batch_size;

    if (log != nullptr) {
        (*log) << "# stage=" << plan.stage_id << " peak_lr=" << plan.peak_lr
               << " batch_size=" << plan.batch_size << " warmup_ratio=" << plan.warmup_ratio
               << " epochs=" << plan.epochs << " steps=" << total_steps
               << " optimizer=adamw data=" << plan.data_source << "\n";
    }

    adamw_state<T> opt;
    opt.cfg = plan.optimizer;

    stage_metrics metrics;
    metrics.total_steps = total_steps;

    int64_t consumed = 0;
    for (int64_t step = 1; step <= total_steps; ++step) {
        const int64_t batch_begin = consumed;
        const int64_t batch_end = std::min(batch_begin + plan.batch_size, total_samples);

        std::map<std::string, tensor<T>> grad_sum;
        double loss_weighted = 0.0;
        int64_t weight_total = 0;

        // Micro-batches bounded by sample count keep tapes small while
        // reproducing the full-batch gradient exactly.
        const int64_t micro = std::min<int64_t>(8, plan.batch_size);
        for (int64_t mb_begin = batch_begin; mb_begin < batch_end; mb_begin += micro) {
            const int64_t mb_end = std::min(mb_begin + micro, batch_end);
            multimodal_batch<T> mb;
            for (int64_t i = mb_begin; i < mb_end; ++i) {
                mb.push_back(data[static_cast<size_t>(i % static_cast<int64_t>(data.size()))]);
            }

            tape<T> tp;
            vlm_bindings<T> binds(tp, model);
            const lm_loss_result<T> loss = lm_loss_on_tape(tp, model, binds, mb);
            if (loss.unmasked == 0) {
                continue;
            }
            tp.backward(loss.node);

            const double w = static_cast<double>(loss.unmasked);
            loss_weighted += loss.value * w;
            weight_total += loss.unmasked;

            auto fold = [&](const std::string & prefix, tape_binding<T> & bind) {
                for (const auto & [name, leaf] : bind.leaves) {
                    const std::string q = prefix + name;
                    if (trainables.find(q) == trainables.end()) {
                        continue;
                    }
                    const tensor<T> & g = tp.grad(leaf);
                    auto it = grad_sum.find(q);
                    if (it == grad_sum.end()) {
                        it = grad_sum.emplace(q, tensor<T>(g.shape)).first;
                    }
                    for (int64_t i = 0; i < g.numel(); ++i) {
                        it->second[i] += g[i] * static_cast<T>(w);
                    }
                }
            };
            fold("encoder/", binds.encoder);
            fold("projector/", binds.projector);
            fold("lm/", binds.lm);
        }
        consumed = batch_end;

        if (weight_total == 0) {
            continue;  // fully masked batch; nothing to step on
        }

        // Batch mean: each micro gradient is a mean over its own
        // positions, so the weighted sum over micro-batches divided by
        // the total position count is the full-batch mean gradient.
        std::map<std::string, tensor<T>> grads;
        for (auto & [name, p] : trainables) {
            auto it = grad_sum.find(name);
            if (it == grad_sum.end()) {
                grads.emplace(name, tensor<T>(p->shape));
            } else {
                tensor<T> g = std::move(it->second);
                const T inv = static_cast<T>(1.0 / static_cast<double>(weight_total));
                for (int64_t i = 0; i < g.numel(); ++i) {
                    g[i] *= inv;
                }
                grads.emplace(name, std::move(g));
            }
        }

        const double lr = cosine_lr(step, total_steps, plan.peak_lr, plan.warmup_ratio);
        adamw_step(trainables, grads, opt, lr);

        const double loss_mean = loss_weighted / static_cast<double>(weight_total);
        train_record rec{step, plan.stage_id, lr, loss_mean};
        metrics.records.push_back(rec);
        if (metrics.records.size() == 1) {
            metrics.first_loss = loss_mean;
        }
        metrics.last_loss = loss_mean;
        if (log != nullptr) {
            (*log) << step << "," << plan.stage_id << "," << lr << "," << loss_mean << "\n";
        }
    }
    return metrics;
}

// ---------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------

namespace {

// The image is fully determined by these four values, so a shuffled
// control pairs identical-looking images with conflicting captions and
// cannot fit them, while the true pairing stays consistent.
struct synth_params {
    int bg;     // 2 dark backgrounds (not captioned)
    int color;  // 4 bright colors
    int col;    // 3 columns
    int row;    // 3 rows
};

synth_params draw_params(const synth_config & cfg, int index) {
    rng r(mix_seed(cfg.seed, static_cast<uint64_t>(index)));
    synth_params p;
    p.bg = static_cast<int>(r.uniform_int(2));
    p.color = static_cast<int>(r.uniform_int(4));
    p.col = static_cast<int>(r.uniform_int(3));
    p.row = static_cast<int>(r.uniform_int(3));
    return p;
}

std::vector<int> caption_of(const synth_params & p, int caption_len) {
    std::vector<int> cap;
    cap.push_back(k_synth_tok_bos);
    cap.push_back(k_synth_tok_color0 + p.color);
    cap.push_back(k_synth_tok_col0 + p.col);
    cap.push_back(k_synth_tok_row0 + p.row);
    cap.push_back(k_synth_tok_eos);
    while (static_cast<int>(cap.size()) < caption_len) {
        cap.push_back(k_synth_tok_pad);
    }
    return cap;
}

constexpr uint8_t k_bg_levels[2] = {24, 48};
constexpr uint8_t k_colors[4][3] = {
    {230, 40, 40},   // red
    {40, 220, 60},   // green
    {50, 80, 235},   // blue
    {235, 220, 40},  // yellow
};

}  // namespace

std::vector<int> synth_caption(const synth_config & cfg, int index) {
    return caption_of(draw_params(cfg, index), cfg.caption_len);
}

template <typename T>
multimodal_batch<T> synth_data(const synth_config & cfg, const encoder_config & enc_cfg) {
    check(cfg.n_samples > 0, "synth_data: n_samples must be positive");
    check(cfg.caption_len >= 5, "synth_data: caption_len must be >= 5 (bos color col row eos)");
    check(cfg.vocab >= 13, "synth_data: vocab must cover the 13 caption tokens");
    check(cfg.image_size >= enc_cfg.downsample_factor(),
          "synth_data: image_size " + std::to_string(cfg.image_size) +
              " below the encoder downsampling factor " +
              std::to_string(enc_cfg.downsample_factor()));

    const token_grid grid = encoder_grid(enc_cfg, cfg.image_size, cfg.image_size);
    const int64_t n_vis = grid.count();

    multimodal_batch<T> out;
    out.reserve(static_cast<size_t>(cfg.n_samples));
    for (int i = 0; i < cfg.n_samples; ++i) {
        const synth_params p = draw_params(cfg, i);
        // Shuffled control: pixels from sample i, caption from another.
        const int cap_index = cfg.shuffle_captions ? (i + cfg.n_samples / 2 + 1) % cfg.n_samples
                                                   : i;
        const synth_params cap_p = draw_params(cfg, cap_index);

        const int s = cfg.image_size;
        const int cell = s / 3;
        tensor<T> img({1, 3, s, s});
        const uint8_t bg = k_bg_levels[p.bg];
        for (int c = 0; c < 3; ++c) {
            T * plane = img.ptr() + static_cast<int64_t>(c) * s * s;
            const T v = static_cast<T>((bg / 255.0 - 0.5) / 0.5);
            std::fill(plane, plane + static_cast<int64_t>(s) * s, v);
        }
        // Rectangle fills most of its grid cell.
        const int x0 = p.col * cell + cell / 8;
        const int y0 = p.row * cell + cell / 8;
        const int x1 = std::min(s, x0 + cell - cell / 4);
        const int y1 = std::min(s, y0 + cell - cell / 4);
        for (int c = 0; c < 3; ++c) {
            T * plane = img.ptr() + static_cast<int64_t>(c) * s * s;
            const T v = static_cast<T>((k_colors[p.color][c] / 255.0 - 0.5) / 0.5);
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    plane[static_cast<int64_t>(y) * s + x] = v;
                }
            }
        }

        multimodal_sample<T> sample;
        sample.image = std::move(img);
        sample.text = caption_of(cap_p, cfg.caption_len);

        sample.loss_mask.assign(static_cast<size_t>(n_vis), false);
        for (size_t t = 0; t < sample.text.size(); ++t) {
            const int tok = sample.text[t];
            // Score the caption content and the eos; bos and pad are input-only.
            sample.loss_mask.push_back(tok != k_synth_tok_bos && tok != k_synth_tok_pad);
        }
        out.push_back(std::move(sample));
    }
    return out;
}

// ---------------------------------------------------------------------

template void adamw_step<float>(std::map<std::string, tensor<float> *> &,
                                const std::map<std::string, tensor<float>> &,
                                adamw_state<float> &, double);
template void adamw_step<double>(std::map<std::string, tensor<double> *> &,
                                 const std::map<std::string, tensor<double>> &,
                                 adamw_state<double> &, double);
template stage_metrics run_stage<float>(vlm_model<float> &, const stage_plan &,
                                        const multimodal_batch<float> &, std::ostream *);
template stage_metrics run_stage<double>(vlm_model<double> &, const stage_plan &,
                                         const multimodal_batch<double> &, std::ostream *);
template multimodal_batch<float> synth_data<float>(const synth_config &, const encoder_config &);
template multimodal_batch<double> synth_data<double>(const synth_config &, const encoder_config &);

}  // namespace cvl

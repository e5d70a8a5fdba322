#include "cvl/verify.hpp"

#include <algorithm>
#include <cmath>

#include "cvl/ops.hpp"
#include "cvl/rng.hpp"
#include "cvl/trainer.hpp"

namespace cvl {

namespace {

double guarded_rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-4});
    return std::abs(a - b) / denom;
}

}  // namespace

gradcheck_report gradcheck_pipeline(uint64_t seed, const encoder_config & enc_cfg,
                                    int image_size, int coords_per_param, double tol) {
    projector_config proj_cfg;
    proj_cfg.in_dim = enc_cfg.channels.back();
    proj_cfg.out_dim = 16;

    toy_lm_config lm_cfg;
    lm_cfg.vocab_size = 16;
    lm_cfg.embed_dim = 16;
    lm_cfg.heads = 2;
    lm_cfg.max_seq =
        static_cast<int>(encoder_grid(enc_cfg, image_size, image_size).count()) + 8;

    vlm_model<double> model = build_vlm<double>(enc_cfg, proj_cfg, lm_cfg, seed);
    freeze_mask(model.encoder, freeze_spec::all());

    synth_config data_cfg;
    data_cfg.seed = seed;
    data_cfg.n_samples = 1;
    data_cfg.image_size = image_size;
    const multimodal_batch<double> batch = synth_data<double>(data_cfg, enc_cfg);

    const auto loss_value = [&]() {
        tape<double> tp;
        vlm_bindings<double> binds(tp, model);
        return lm_loss_on_tape(tp, model, binds, batch).value;
    };

    // One backward for the analytic gradients of every parameter.
    tape<double> tp;
    vlm_bindings<double> binds(tp, model);
    const lm_loss_result<double> loss = lm_loss_on_tape(tp, model, binds, batch);
    tp.backward(loss.node);

    std::map<std::string, tensor<double>> analytic;
    for (const auto & [name, g] : collect_gradients(tp, binds.encoder)) {
        analytic.emplace("encoder/" + name, g);
    }
    for (const auto & [name, g] : collect_gradients(tp, binds.projector)) {
        analytic.emplace("projector/" + name, g);
    }
    for (const auto & [name, g] : collect_gradients(tp, binds.lm)) {
        analytic.emplace("lm/" + name, g);
    }

    auto param_of = [&](const std::string & qualified) -> tensor<double> & {
        const size_t slash = qualified.find('/');
        const std::string comp = qualified.substr(0, slash);
        const std::string name = qualified.substr(slash + 1);
        if (comp == "encoder") {
            return model.encoder.params.at(name);
        }
        if (comp == "projector") {
            return model.projector.params.at(name);
        }
        return model.lm.params.at(name);
    };

    gradcheck_report rep;
    rng pick(mix_seed(seed, 0xfd));
    const double h = 1e-5;
    for (const auto & [qualified, grad] : analytic) {
        tensor<double> & param = param_of(qualified);
        const int samples =
            static_cast<int>(std::min<int64_t>(coords_per_param, param.numel()));
        for (int s = 0; s < samples; ++s) {
            const int64_t j = pick.uniform_int(param.numel());
            const double saved = param[j];
            param[j] = saved + h;
            const double up = loss_value();
            param[j] = saved - h;
            const double dn = loss_value();
            param[j] = saved;

            const double numeric = (up - dn) / (2.0 * h);
            const double err = guarded_rel_err(numeric, grad[j]);
            ++rep.checks;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst = qualified + "[" + std::to_string(j) + "]";
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

equivariance_report equivariance_check(uint64_t seed, const encoder_config & enc_cfg,
                                       int64_t crop_size, int64_t shift_px, double tol) {
    const int64_t d = enc_cfg.downsample_factor();
    check(shift_px == d, "equivariance_check: shift " + std::to_string(shift_px) +
                             " must equal the downsampling factor " + std::to_string(d));
    check(crop_size % d == 0, "equivariance_check: crop size must be a multiple of " +
                                  std::to_string(d));

    const encoder_state<float> enc = build_encoder<float>(enc_cfg, mix_seed(seed, 1));

    rng r(mix_seed(seed, 2));
    tensor<float> canvas({1, 3, crop_size, crop_size + d});
    r.fill_uniform(canvas, -1.0, 1.0);

    auto crop_cols = [&](int64_t left) {
        tensor<float> out({1, 3, crop_size, crop_size});
        const int64_t cw = crop_size + d;
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t y = 0; y < crop_size; ++y) {
                for (int64_t x = 0; x < crop_size; ++x) {
                    out[(c * crop_size + y) * crop_size + x] =
                        canvas[(c * crop_size + y) * cw + left + x];
                }
            }
        }
        return out;
    };

    const visual_tokens<float> t0 = encode(enc, crop_cols(0));
    const visual_tokens<float> t1 = encode(enc, crop_cols(d));

    equivariance_report rep;
    rep.grid_h = t0.grid_h;
    rep.grid_w = t0.grid_w;
    rep.margin_cells = equivariance_margin_cells(enc_cfg);

    // Crop 1 sits d pixels to the right, so its cell (y, x) matches crop
    // 0's cell (y, x+1). Compare cells at least margin away from every
    // border of both crops.
    const int64_t m = rep.margin_cells;
    const int64_t channels = t0.tokens.size(2);
    for (int64_t y = m; y <= t0.grid_h - 1 - m; ++y) {
        for (int64_t x = m; x + 1 <= t0.grid_w - 1 - m; ++x) {
            ++rep.interior_cells;
            for (int64_t c = 0; c < channels; ++c) {
                const float a = t0.tokens[(y * t0.grid_w + (x + 1)) * channels + c];
                const float b = t1.tokens[(y * t1.grid_w + x) * channels + c];
                rep.max_interior_diff =
                    std::max(rep.max_interior_diff, double(std::abs(a - b)));
            }
        }
    }
    check(rep.interior_cells > 0,
          "equivariance_check: no interior cells outside the receptive-field margin; use a "
          "larger crop");
    rep.pass = rep.max_interior_diff < tol;
    return rep;
}

}  // namespace cvl

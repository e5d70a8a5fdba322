// cvl: command-line front end for the visual-token compression pipeline.
//
// Subcommands: analyze, encode, preprocess, gradcheck, equivariance,
// train, inspect. Exit codes: 0 success, 1 property or runtime failure,
// 2 usage error.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cvl/analysis.hpp"
#include "cvl/checkpoint.hpp"
#include "cvl/config.hpp"
#include "cvl/encoder.hpp"
#include "cvl/pipeline.hpp"
#include "cvl/preprocess.hpp"
#include "cvl/trainer.hpp"
#include "cvl/verify.hpp"

namespace {

constexpr int k_exit_ok = 0;
constexpr int k_exit_failure = 1;
constexpr int k_exit_usage = 2;

std::vector<std::string> split_csv(const std::string & s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

// Named presets plus key=value files for encoder geometry.
cvl::encoder_config encoder_config_from(const std::string & spec) {
    if (spec.empty() || spec == "tiny5") {
        return cvl::encoder_config::tiny(5);
    }
    if (spec == "tiny4") {
        return cvl::encoder_config::tiny(4);
    }
    if (spec == "tiny3") {
        return cvl::encoder_config::tiny(3);
    }
    if (spec == "large4") {
        return cvl::encoder_config::large();
    }
    if (spec == "large5") {
        return cvl::encoder_config::large_5stage();
    }
    const cvl::flat_config f = cvl::flat_config::from_file(spec);
    cvl::encoder_config cfg;
    cfg.depths = f.get_int_list_or("depths", cfg.depths);
    cfg.channels = f.get_int_list_or("channels", cfg.channels);
    cfg.kernel_size = static_cast<int>(f.get_int_or("kernel_size", cfg.kernel_size));
    cfg.stem_patch = static_cast<int>(f.get_int_or("stem_patch", cfg.stem_patch));
    cfg.ffn_expansion = static_cast<int>(f.get_int_or("ffn_expansion", cfg.ffn_expansion));
    cfg.layer_scale_init = f.get_double_or("layer_scale_init", cfg.layer_scale_init);
    if (f.get_bool_or("use_stage5", false) && cfg.depths.size() == 4) {
        cfg.depths.push_back(static_cast<int>(f.get_int_or("stage5_depth", 6)));
        cfg.channels.push_back(static_cast<int>(f.get_int_or("stage5_channels",
                                                             cfg.channels.back() * 2)));
    }
    cfg.validate();
    return cfg;
}

int cmd_analyze(const std::string & kinds_arg, const std::string & resolutions_arg,
                const std::string & out_path) {
    std::vector<cvl::analysis::encoder_kind> kinds;
    for (const std::string & name : split_csv(kinds_arg)) {
        const auto k = cvl::analysis::kind_from_name(name);
        if (!k.has_value()) {
            std::string valid;
            for (const auto kk : cvl::analysis::all_kinds()) {
                valid += (valid.empty() ? "" : ", ") + cvl::analysis::kind_name(kk);
            }
            std::cerr << "analyze: unknown kind '" << name << "' (valid kinds: " << valid
                      << ")\n";
            return k_exit_usage;
        }
        kinds.push_back(*k);
    }
    std::vector<int64_t> resolutions;
    for (const std::string & r : split_csv(resolutions_arg)) {
        try {
            resolutions.push_back(std::stoll(r));
        } catch (const std::exception &) {
            std::cerr << "analyze: bad resolution '" << r << "'\n";
            return k_exit_usage;
        }
    }
    if (kinds.empty() || resolutions.empty()) {
        std::cerr << "analyze: --kinds and --resolutions must be non-empty\n";
        return k_exit_usage;
    }

    if (out_path.empty()) {
        cvl::analysis::emit_curves(kinds, resolutions, std::cout);
    } else {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f.good()) {
            std::cerr << "analyze: cannot open '" << out_path << "'\n";
            return k_exit_failure;
        }
        cvl::analysis::emit_curves(kinds, resolutions, f);
    }
    return k_exit_ok;
}

cvl::tensor<float> load_image_tensor(const std::string & path, cvl::resize_mode mode, int res,
                                     int factor) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".cvt") {
        cvl::tensor<float> t = cvl::load_cvt(path);
        if (t.rank() == 3) {
            t = cvl::tensor<float>({1, t.size(0), t.size(1), t.size(2)}, std::move(t.data));
        }
        cvl::check(t.rank() == 4 && t.size(1) == 3,
                   "encode: raw tensor must be [3,H,W] or [1,3,H,W], got " +
                       cvl::shape_str(t.shape));
        return t;
    }
    const cvl::image_rgb img = cvl::load_ppm(path);
    cvl::preprocess_config pp;
    pp.mode = mode;
    pp.target = res;
    pp.factor = factor;
    return cvl::preprocess<float>(img, pp);
}

int cmd_encode(const std::string & config_spec, const std::string & ckpt, const std::string & image,
               const std::string & mode_name, int res, const std::string & out_path,
               uint64_t seed) {
    if (mode_name != "square" && mode_name != "short_side") {
        std::cerr << "encode: --mode must be square or short_side\n";
        return k_exit_usage;
    }
    const cvl::encoder_config cfg = encoder_config_from(config_spec);
    const auto mode =
        mode_name == "square" ? cvl::resize_mode::square : cvl::resize_mode::short_side;
    const int factor = static_cast<int>(cfg.downsample_factor());
    if (mode == cvl::resize_mode::square && res % factor != 0) {
        std::cerr << "encode: square resolution " << res << " must be a multiple of the "
                  << "downsampling factor " << factor << "\n";
        return k_exit_usage;
    }

    cvl::encoder_state<float> enc = cvl::build_encoder<float>(cfg, seed);
    if (!ckpt.empty()) {
        cvl::checkpoint::load_params(enc.params, ckpt);
    }

    const cvl::tensor<float> x = load_image_tensor(image, mode, res, factor);
    const cvl::visual_tokens<float> tokens = cvl::encode(enc, x);
    std::cout << "tokens=" << tokens.grid_h * tokens.grid_w << " grid=" << tokens.grid_h << "x"
              << tokens.grid_w << "\n";
    if (!out_path.empty()) {
        cvl::save_cvt(tokens.tokens, out_path);
    }
    return k_exit_ok;
}

int cmd_preprocess(const std::string & image, const std::string & mode_name, int res, int factor,
                   const std::string & out_path) {
    if (mode_name != "square" && mode_name != "short_side") {
        std::cerr << "preprocess: --mode must be square or short_side\n";
        return k_exit_usage;
    }
    const auto mode =
        mode_name == "square" ? cvl::resize_mode::square : cvl::resize_mode::short_side;
    if (mode == cvl::resize_mode::square && res % factor != 0) {
        std::cerr << "preprocess: square resolution " << res << " must be a multiple of the "
                  << "factor " << factor << "\n";
        return k_exit_usage;
    }
    const cvl::image_rgb img = cvl::load_ppm(image);
    cvl::preprocess_config pp;
    pp.mode = mode;
    pp.target = res;
    pp.factor = factor;
    const cvl::tensor<float> t = cvl::preprocess<float>(img, pp);
    std::cout << "shape=" << cvl::shape_str(t.shape) << "\n";
    if (!out_path.empty()) {
        cvl::save_cvt(t, out_path);
    }
    return k_exit_ok;
}

int cmd_gradcheck(uint64_t seed, const std::string & config_spec, int seeds) {
    const cvl::encoder_config cfg = encoder_config_from(config_spec);
    double worst = 0;
    std::string worst_name;
    for (int s = 0; s < seeds; ++s) {
        const cvl::gradcheck_report rep = cvl::gradcheck_pipeline(seed + uint64_t(s), cfg);
        if (rep.max_rel_err > worst) {
            worst = rep.max_rel_err;
            worst_name = rep.worst;
        }
        if (!rep.pass) {
            std::cout << "max_rel_err=" << rep.max_rel_err << " worst=" << rep.worst
                      << " FAIL\n";
            return k_exit_failure;
        }
    }
    std::cout << "max_rel_err=" << worst << "<1e-5 PASS\n";
    return k_exit_ok;
}

int cmd_equivariance(uint64_t seed, int64_t shift, const std::string & config_spec,
                     int64_t crop) {
    const cvl::encoder_config cfg = encoder_config_from(config_spec);
    if (shift != cfg.downsample_factor()) {
        std::cerr << "equivariance: --shift " << shift << " must equal the downsampling factor "
                  << cfg.downsample_factor() << " of the chosen config\n";
        return k_exit_usage;
    }
    const cvl::equivariance_report rep = cvl::equivariance_check(seed, cfg, crop, shift);
    std::cout << "interior_max_abs_diff=" << rep.max_interior_diff << " margin="
              << rep.margin_cells << " cells=" << rep.interior_cells << " grid=" << rep.grid_h
              << "x" << rep.grid_w << (rep.pass ? " <1e-5 PASS" : " FAIL") << "\n";
    return rep.pass ? k_exit_ok : k_exit_failure;
}

cvl::stage_plan plan_from_config(const cvl::flat_config & f, int stage_id) {
    cvl::stage_plan p;
    switch (stage_id) {
        case 1: p = cvl::stage_plan::stage1(); break;
        case 2: p = cvl::stage_plan::stage2(); break;
        case 3: p = cvl::stage_plan::stage3(); break;
        default: cvl::fail("train: stage id must be 1..3");
    }
    const std::string pre = "stage" + std::to_string(stage_id) + ".";
    p.peak_lr = f.get_double_or(pre + "peak_lr", p.peak_lr);
    p.batch_size = static_cast<int>(f.get_int_or(pre + "batch_size", p.batch_size));
    p.warmup_ratio = f.get_double_or(pre + "warmup_ratio", p.warmup_ratio);
    p.epochs = static_cast<int>(f.get_int_or(pre + "epochs", p.epochs));
    p.optimizer.weight_decay = f.get_double_or(pre + "weight_decay", 0.0);
    return p;
}

int cmd_train(const std::string & plan_path, const std::string & data_kind, bool deterministic,
              const std::string & log_path, const std::string & out_ckpt) {
    if (data_kind != "synth") {
        std::cerr << "train: --data only supports 'synth'\n";
        return k_exit_usage;
    }
    const cvl::flat_config f = cvl::flat_config::from_file(plan_path);
    cvl::options().deterministic = deterministic;

    cvl::encoder_config enc_cfg;
    enc_cfg.depths = f.get_int_list_or("model.depths", {1, 1, 1});
    enc_cfg.channels = f.get_int_list_or("model.channels", {8, 16, 32});
    enc_cfg.kernel_size = static_cast<int>(f.get_int_or("model.kernel_size", 7));
    enc_cfg.stem_patch = static_cast<int>(f.get_int_or("model.stem_patch", 4));
    enc_cfg.validate();

    cvl::projector_config proj_cfg;
    proj_cfg.in_dim = enc_cfg.channels.back();
    proj_cfg.out_dim = static_cast<int>(f.get_int_or("model.embed_dim", 32));
    proj_cfg.hidden_dim = static_cast<int>(f.get_int_or("model.proj_hidden", 0));

    cvl::synth_config data_cfg;
    data_cfg.seed = static_cast<uint64_t>(f.get_int_or("data.seed", f.get_int_or("seed", 0)));
    data_cfg.n_samples = static_cast<int>(f.get_int_or("data.n_samples", 64));
    data_cfg.image_size = static_cast<int>(f.get_int_or("data.image_size", 64));
    data_cfg.caption_len = static_cast<int>(f.get_int_or("data.caption_len", 5));
    data_cfg.vocab = static_cast<int>(f.get_int_or("model.vocab", 16));

    cvl::toy_lm_config lm_cfg;
    lm_cfg.vocab_size = data_cfg.vocab;
    lm_cfg.embed_dim = proj_cfg.out_dim;
    lm_cfg.num_layers = static_cast<int>(f.get_int_or("model.lm_layers", 1));
    lm_cfg.heads = static_cast<int>(f.get_int_or("model.heads", 1));
    const auto grid = cvl::encoder_grid(enc_cfg, data_cfg.image_size, data_cfg.image_size);
    lm_cfg.max_seq = static_cast<int>(
        f.get_int_or("model.max_seq", grid.count() + data_cfg.caption_len + 4));

    const uint64_t seed = static_cast<uint64_t>(f.get_int_or("seed", 0));
    cvl::vlm_model<float> model = cvl::build_vlm<float>(enc_cfg, proj_cfg, lm_cfg, seed);
    const cvl::multimodal_batch<float> data = cvl::synth_data<float>(data_cfg, enc_cfg);

    std::ofstream log_file;
    std::ostream * log = &std::cout;
    if (!log_path.empty()) {
        log_file.open(log_path, std::ios::trunc);
        if (!log_file.good()) {
            std::cerr << "train: cannot open log '" << log_path << "'\n";
            return k_exit_failure;
        }
        log = &log_file;
    }

    std::vector<int> stage_ids;
    for (const std::string & s : split_csv(f.get_or("stages", "1"))) {
        stage_ids.push_back(std::stoi(s));
    }
    for (const int sid : stage_ids) {
        const cvl::stage_plan plan = plan_from_config(f, sid);
        const cvl::stage_metrics m = cvl::run_stage(model, plan, data, log);
        std::cout << "stage " << sid << ": steps=" << m.total_steps
                  << " first_loss=" << m.first_loss << " last_loss=" << m.last_loss << "\n";
    }

    if (!out_ckpt.empty()) {
        cvl::checkpoint::entry_map all;
        for (const auto & [name, e] : cvl::checkpoint::to_entries(model.encoder.params)) {
            all.emplace("encoder/" + name, e);
        }
        for (const auto & [name, e] : cvl::checkpoint::to_entries(model.projector.params)) {
            all.emplace("projector/" + name, e);
        }
        for (const auto & [name, e] : cvl::checkpoint::to_entries(model.lm.params)) {
            all.emplace("lm/" + name, e);
        }
        cvl::checkpoint::save(all, out_ckpt);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(cvl::checkpoint::file_hash(out_ckpt)));
        std::cout << "checkpoint_hash=" << buf << "\n";
    }
    return k_exit_ok;
}

int cmd_inspect(const std::string & path) {
    std::ifstream probe(path, std::ios::binary);
    cvl::check(probe.good(), "inspect: cannot open '" + path + "'");
    char magic[4] = {0};
    probe.read(magic, 4);
    probe.close();

    if (std::string(magic, 4) == "CVLV") {
        const cvl::checkpoint::entry_map entries = cvl::checkpoint::load(path);
        int64_t total = 0;
        for (const auto & [name, e] : entries) {
            std::vector<int64_t> dims(e.dims.begin(), e.dims.end());
            std::cout << name << " " << (e.type == cvl::checkpoint::dtype::f32 ? "f32" : "f64")
                      << " " << cvl::shape_str(dims) << "\n";
            total += e.numel();
        }
        std::cout << "entries=" << entries.size() << " params=" << total << "\n";
        return k_exit_ok;
    }
    if (std::string(magic, 4) == "CVT0") {
        const cvl::tensor<float> t = cvl::load_cvt(path);
        double mn = t.numel() ? t[0] : 0, mx = mn, mean = 0;
        for (int64_t i = 0; i < t.numel(); ++i) {
            mn = std::min(mn, double(t[i]));
            mx = std::max(mx, double(t[i]));
            mean += t[i];
        }
        mean = t.numel() ? mean / double(t.numel()) : 0;
        std::cout << "shape=" << cvl::shape_str(t.shape) << " min=" << mn << " max=" << mx
                  << " mean=" << mean << "\n";
        return k_exit_ok;
    }
    std::cerr << "inspect: '" << path << "' is neither a checkpoint (CVLV) nor a tensor file "
              << "(CVT0)\n";
    return k_exit_failure;
}

}  // namespace

int main(int argc, char ** argv) {
    CLI::App app{"visual-token compression pipeline"};
    app.require_subcommand(1);

    // analyze
    std::string kinds = "vit,convnext4,convnext5";
    std::string resolutions = "336,512,768,1024,1536";
    std::string analyze_out;
    CLI::App * analyze = app.add_subcommand("analyze", "emit token/FLOPs curves as CSV");
    analyze->add_option("--kinds", kinds, "comma-separated encoder kinds");
    analyze->add_option("--resolutions", resolutions, "comma-separated resolutions");
    analyze->add_option("--out", analyze_out, "CSV output path (default stdout)");

    // encode
    std::string enc_config, enc_ckpt, enc_image, enc_mode = "square", enc_out;
    int enc_res = 1536;
    uint64_t enc_seed = 0;
    CLI::App * enc = app.add_subcommand("encode", "preprocess an image and emit visual tokens");
    enc->add_option("--config", enc_config, "encoder config: preset name or key=value file");
    enc->add_option("--ckpt", enc_ckpt, "checkpoint to load");
    enc->add_option("--image", enc_image, "input image (.ppm) or raw tensor (.cvt)")->required();
    enc->add_option("--mode", enc_mode, "square | short_side");
    enc->add_option("--res", enc_res, "target resolution R");
    enc->add_option("--out", enc_out, "write tokens as a raw tensor file");
    enc->add_option("--seed", enc_seed, "init seed when no checkpoint is given");

    // preprocess
    std::string pp_image, pp_mode = "square", pp_out;
    int pp_res = 1536, pp_factor = 64;
    CLI::App * pp = app.add_subcommand("preprocess", "resize/normalize an image to a tensor");
    pp->add_option("--image", pp_image, "input image (.ppm)")->required();
    pp->add_option("--mode", pp_mode, "square | short_side");
    pp->add_option("--res", pp_res, "target resolution R");
    pp->add_option("--factor", pp_factor, "downsampling factor D");
    pp->add_option("--out", pp_out, "output tensor path");

    // gradcheck
    uint64_t gc_seed = 7;
    int gc_seeds = 5;
    std::string gc_config = "tiny5";
    CLI::App * gc = app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
    gc->add_option("--seed", gc_seed, "base seed");
    gc->add_option("--seeds", gc_seeds, "number of seeds");
    gc->add_option("--config", gc_config, "encoder config preset or file");

    // equivariance
    uint64_t eq_seed = 7;
    int64_t eq_shift = 64, eq_crop = 1280;
    std::string eq_config = "tiny5";
    CLI::App * eq = app.add_subcommand("equivariance", "shifted-crop token grid comparison");
    eq->add_option("--seed", eq_seed, "seed");
    eq->add_option("--shift", eq_shift, "pixel shift (must equal the config's factor)");
    eq->add_option("--crop", eq_crop, "crop side in pixels");
    eq->add_option("--config", eq_config, "encoder config preset or file");

    // train
    std::string tr_plan, tr_data = "synth", tr_log, tr_ckpt;
    bool tr_det = false;
    CLI::App * tr = app.add_subcommand("train", "run training stages from a plan file");
    tr->add_option("--plan", tr_plan, "flat key=value plan file")->required();
    tr->add_option("--data", tr_data, "data source (synth)");
    tr->add_flag("--det", tr_det, "deterministic reductions");
    tr->add_option("--log", tr_log, "metrics log path (default stdout)");
    tr->add_option("--out-ckpt", tr_ckpt, "save final checkpoint here");

    // inspect
    std::string in_file;
    CLI::App * insp = app.add_subcommand("inspect", "describe a checkpoint or tensor file");
    insp->add_option("--file", in_file, "path to inspect")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        app.exit(e);
        return k_exit_usage;
    }

    try {
        if (analyze->parsed()) {
            return cmd_analyze(kinds, resolutions, analyze_out);
        }
        if (enc->parsed()) {
            return cmd_encode(enc_config, enc_ckpt, enc_image, enc_mode, enc_res, enc_out,
                              enc_seed);
        }
        if (pp->parsed()) {
            return cmd_preprocess(pp_image, pp_mode, pp_res, pp_factor, pp_out);
        }
        if (gc->parsed()) {
            return cmd_gradcheck(gc_seed, gc_config, gc_seeds);
        }
        if (eq->parsed()) {
            return cmd_equivariance(eq_seed, eq_shift, eq_config, eq_crop);
        }
        if (tr->parsed()) {
            return cmd_train(tr_plan, tr_data, tr_det, tr_log, tr_ckpt);
        }
        if (insp->parsed()) {
            return cmd_inspect(in_file);
        }
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return k_exit_failure;
    }
    return k_exit_usage;
}

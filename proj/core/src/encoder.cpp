#include "cvl/encoder.hpp"

#include <cmath>

#include "cvl/ops.hpp"
#include "cvl/rng.hpp"

namespace cvl {

int encoder_config::total_blocks() const {
    int n = 0;
    for (int d : depths) {
        n += d;
    }
    return n;
}

int64_t encoder_config::downsample_factor() const {
    return static_cast<int64_t>(stem_patch) << (num_stages() - 1);
}

void encoder_config::validate() const {
    check(!depths.empty(), "encoder_config: depths is empty");
    check(depths.size() == channels.size(),
          "encoder_config: " + std::to_string(depths.size()) + " depths vs " +
              std::to_string(channels.size()) + " channel entries");
    check(depths.size() <= 8, "encoder_config: more than 8 stages");
    for (int d : depths) {
        check(d > 0, "encoder_config: non-positive stage depth");
    }
    for (int c : channels) {
        check(c > 0, "encoder_config: non-positive channel count");
    }
    check(kernel_size > 0 && kernel_size % 2 == 1,
          "encoder_config: kernel_size must be odd and positive, got " +
              std::to_string(kernel_size));
    check(stem_patch > 0, "encoder_config: stem_patch must be positive");
    check(ffn_expansion > 0, "encoder_config: ffn_expansion must be positive");
}

encoder_config encoder_config::large() {
    return encoder_config{};
}

encoder_config encoder_config::large_5stage() {
    encoder_config cfg;
    cfg.depths = {3, 3, 27, 3, 6};
    cfg.channels = {192, 384, 768, 1536, 3072};
    return cfg;
}

encoder_config encoder_config::tiny(int stages) {
    check(stages >= 1 && stages <= 5, "encoder_config::tiny: stages must be in [1,5]");
    encoder_config cfg;
    cfg.depths.assign(static_cast<size_t>(stages), 1);
    cfg.channels.clear();
    for (int i = 0; i < stages; ++i) {
        cfg.channels.push_back(4 << i);
    }
    // At toy scale the canonical 1e-6 residual scale suppresses interior
    // gradients below f32 update resolution; random-init training wants a
    // live residual branch anyway.
    cfg.layer_scale_init = 0.1;
    return cfg;
}

namespace {

std::string stage_prefix(int stage, int block) {
    return "stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

std::string down_prefix(int stage) {
    return "down" + std::to_string(stage) + ".";
}

}  // namespace

template <typename T>
encoder_state<T> build_encoder(const encoder_config & cfg, uint64_t seed) {
    cfg.validate();
    encoder_state<T> st;
    st.cfg = cfg;
    rng r(seed);

    auto weight = [&](const std::string & name, std::vector<int64_t> shape) {
        tensor<T> t(std::move(shape));
        r.fill_trunc_normal(t, 0.02);
        st.params.add(name, std::move(t));
    };
    auto zeros = [&](const std::string & name, std::vector<int64_t> shape) {
        st.params.add(name, tensor<T>(std::move(shape)));
    };
    auto ones = [&](const std::string & name, int64_t n) {
        tensor<T> t({n});
        t.fill(T(1));
        st.params.add(name, std::move(t));
    };

    const int p = cfg.stem_patch;
    const int k = cfg.kernel_size;
    const int e = cfg.ffn_expansion;

    weight("stem.conv.weight", {cfg.channels[0], 3, p, p});
    zeros("stem.conv.bias", {cfg.channels[0]});
    ones("stem.norm.gamma", cfg.channels[0]);
    zeros("stem.norm.beta", {cfg.channels[0]});

    for (int s = 1; s <= cfg.num_stages(); ++s) {
        const int64_t c = cfg.channels[static_cast<size_t>(s - 1)];
        if (s >= 2) {
            const int64_t cprev = cfg.channels[static_cast<size_t>(s - 2)];
            ones(down_prefix(s) + "norm.gamma", cprev);
            zeros(down_prefix(s) + "norm.beta", {cprev});
            weight(down_prefix(s) + "conv.weight", {c, cprev, 2, 2});
            zeros(down_prefix(s) + "conv.bias", {c});
        }
        for (int b = 0; b < cfg.depths[static_cast<size_t>(s - 1)]; ++b) {
            const std::string pre = stage_prefix(s, b);
            weight(pre + "dwconv.weight", {c, 1, k, k});
            zeros(pre + "dwconv.bias", {c});
            ones(pre + "norm.gamma", c);
            zeros(pre + "norm.beta", {c});
            weight(pre + "pw1.weight", {int64_t(e) * c, c, 1, 1});
            zeros(pre + "pw1.bias", {int64_t(e) * c});
            weight(pre + "pw2.weight", {c, int64_t(e) * c, 1, 1});
            zeros(pre + "pw2.bias", {c});
            tensor<T> ls({c});
            ls.fill(static_cast<T>(cfg.layer_scale_init));
            st.params.add(pre + "layerscale", std::move(ls));
        }
    }

    const int64_t clast = cfg.channels.back();
    ones("final_norm.gamma", clast);
    zeros("final_norm.beta", {clast});
    return st;
}

int64_t encoder_param_count(const encoder_config & cfg) {
    cfg.validate();
    const int64_t p = cfg.stem_patch;
    const int64_t k = cfg.kernel_size;
    const int64_t e = cfg.ffn_expansion;

    int64_t total = cfg.channels[0] * 3 * p * p + cfg.channels[0];  // stem conv
    total += 2 * cfg.channels[0];                                   // stem norm

    for (int s = 1; s <= cfg.num_stages(); ++s) {
        const int64_t c = cfg.channels[static_cast<size_t>(s - 1)];
        if (s >= 2) {
            const int64_t cprev = cfg.channels[static_cast<size_t>(s - 2)];
            total += 2 * cprev;             // down norm
            total += c * cprev * 4 + c;     // down conv 2x2
        }
        const int64_t per_block = (c * k * k + c)      // depthwise conv
                                  + 2 * c              // norm
                                  + (e * c * c + e * c)  // pw expand
                                  + (c * e * c + c)      // pw project
                                  + c;                   // layer scale
        total += per_block * cfg.depths[static_cast<size_t>(s - 1)];
    }
    total += 2 * cfg.channels.back();  // final norm
    return total;
}

token_grid encoder_grid(const encoder_config & cfg, int64_t img_h, int64_t img_w) {
    const int64_t d = cfg.downsample_factor();
    return token_grid{img_h / d, img_w / d};
}

// ---------------------------------------------------------------------
// forward, shared between the eager and taped executors
// ---------------------------------------------------------------------

namespace {

template <typename T>
struct eager_ctx {
    using handle = tensor<T>;
    const named_params<T> & p;
    const encoder_config & cfg;

    const tensor<T> & par(const std::string & name) { return p.at(name); }

    handle conv(handle x, const std::string & pre, const ops::conv2d_attrs & a) {
        const tensor<T> & b = par(pre + "conv.bias");
        return ops::conv2d(x, par(pre + "conv.weight"), &b, a);
    }
    handle conv_named(handle x, const std::string & w, const std::string & b,
                      const ops::conv2d_attrs & a) {
        const tensor<T> & bias = par(b);
        return ops::conv2d(x, par(w), &bias, a);
    }
    handle norm(handle x, const std::string & pre) {
        return ops::layer_norm<T>(x, par(pre + "gamma"), par(pre + "beta"), cfg.norm_eps, 1,
                                  nullptr, nullptr);
    }
    handle gelu(handle x) { return ops::gelu(x); }
    handle scale(handle x, const std::string & name) {
        return ops::channel_scale(x, par(name));
    }
    handle add(handle a, handle b) { return ops::add(a, b); }
    handle tokens(handle x) { return ops::nchw_to_tokens(x); }
};

template <typename T>
struct taped_ctx {
    using handle = typename tape<T>::id;
    tape<T> & tp;
    tape_binding<T> & bind;
    const encoder_config & cfg;

    handle conv(handle x, const std::string & pre, const ops::conv2d_attrs & a) {
        return tp.conv2d(x, bind.use(pre + "conv.weight"), bind.use(pre + "conv.bias"), a);
    }
    handle conv_named(handle x, const std::string & w, const std::string & b,
                      const ops::conv2d_attrs & a) {
        return tp.conv2d(x, bind.use(w), bind.use(b), a);
    }
    handle norm(handle x, const std::string & pre) {
        return tp.layer_norm_channels(x, bind.use(pre + "gamma"), bind.use(pre + "beta"),
                                      cfg.norm_eps);
    }
    handle gelu(handle x) { return tp.gelu(x); }
    handle scale(handle x, const std::string & name) {
        return tp.channel_scale(x, bind.use(name));
    }
    handle add(handle a, handle b) { return tp.add(a, b); }
    handle tokens(handle x) { return tp.nchw_to_tokens(x); }
};

template <typename T, typename Ctx>
typename Ctx::handle encode_impl(const encoder_config & cfg, Ctx & ctx,
                                 typename Ctx::handle x) {
    const int k = cfg.kernel_size;

    ops::conv2d_attrs stem;
    stem.stride = cfg.stem_patch;
    x = ctx.conv(std::move(x), "stem.", stem);
    x = ctx.norm(std::move(x), "stem.norm.");

    for (int s = 1; s <= cfg.num_stages(); ++s) {
        if (s >= 2) {
            ops::conv2d_attrs down;
            down.stride = 2;
            x = ctx.norm(std::move(x), down_prefix(s) + "norm.");
            x = ctx.conv(std::move(x), down_prefix(s), down);
        }
        for (int b = 0; b < cfg.depths[static_cast<size_t>(s - 1)]; ++b) {
            const std::string pre = stage_prefix(s, b);
            auto residual = x;

            ops::conv2d_attrs dw;
            dw.padding = (k - 1) / 2;
            dw.groups = cfg.channels[static_cast<size_t>(s - 1)];
            auto h = ctx.conv_named(std::move(x), pre + "dwconv.weight", pre + "dwconv.bias", dw);
            h = ctx.norm(std::move(h), pre + "norm.");
            h = ctx.conv_named(std::move(h), pre + "pw1.weight", pre + "pw1.bias", {});
            h = ctx.gelu(std::move(h));
            h = ctx.conv_named(std::move(h), pre + "pw2.weight", pre + "pw2.bias", {});
            h = ctx.scale(std::move(h), pre + "layerscale");
            x = ctx.add(std::move(h), std::move(residual));
        }
    }

    x = ctx.norm(std::move(x), "final_norm.");
    return ctx.tokens(std::move(x));
}

void check_min_size(const encoder_config & cfg, int64_t h, int64_t w) {
    const int64_t d = cfg.downsample_factor();
    check(h >= d && w >= d, "encode: input " + std::to_string(h) + "x" + std::to_string(w) +
                                " smaller than the minimum size " + std::to_string(d) + "x" +
                                std::to_string(d) + " (total downsampling factor)");
}

}  // namespace

template <typename T>
visual_tokens<T> encode(const encoder_state<T> & state, const tensor<T> & image) {
    check(image.rank() == 4 && image.size(1) == 3,
          "encode: image must be [B,3,H,W], got " + shape_str(image.shape));
    check_min_size(state.cfg, image.size(2), image.size(3));

    const token_grid grid = encoder_grid(state.cfg, image.size(2), image.size(3));
    eager_ctx<T> ctx{state.params, state.cfg};
    visual_tokens<T> out;
    out.tokens = encode_impl<T>(state.cfg, ctx, image);
    out.grid_h = grid.h;
    out.grid_w = grid.w;
    return out;
}

template <typename T>
taped_tokens<T> encode_on_tape(const encoder_state<T> & state, tape<T> & tp,
                               tape_binding<T> & bind, typename tape<T>::id image) {
    const tensor<T> & img = tp.val(image);
    check(img.rank() == 4 && img.size(1) == 3,
          "encode: image must be [B,3,H,W], got " + shape_str(img.shape));
    check_min_size(state.cfg, img.size(2), img.size(3));

    const token_grid grid = encoder_grid(state.cfg, img.size(2), img.size(3));
    taped_ctx<T> ctx{tp, bind, state.cfg};
    taped_tokens<T> out;
    out.node = encode_impl<T>(state.cfg, ctx, image);
    out.grid_h = grid.h;
    out.grid_w = grid.w;
    return out;
}

// ---------------------------------------------------------------------
// freeze masks
// ---------------------------------------------------------------------

namespace {

// stage (1-based) and global block index for a parameter name, or
// stage = 0 for stem / final norm, block = -1 for downsamplers.
struct param_locus {
    int stage = 0;
    int block = -1;  // global block index
    bool is_down = false;
};

param_locus locate(const encoder_config & cfg, const std::string & name) {
    param_locus loc;
    if (name.rfind("stage", 0) == 0) {
        const size_t dot = name.find('.');
        loc.stage = std::stoi(name.substr(5, dot - 5));
        const size_t bpos = name.find("block") + 5;
        const int local = std::stoi(name.substr(bpos, name.find('.', bpos) - bpos));
        int before = 0;
        for (int s = 1; s < loc.stage; ++s) {
            before += cfg.depths[static_cast<size_t>(s - 1)];
        }
        loc.block = before + local;
    } else if (name.rfind("down", 0) == 0) {
        loc.stage = std::stoi(name.substr(4, name.find('.') - 4));
        loc.is_down = true;
    }
    return loc;
}

}  // namespace

template <typename T>
int64_t freeze_mask(encoder_state<T> & state, const freeze_spec & spec) {
    const encoder_config & cfg = state.cfg;
    const int total_blocks = cfg.total_blocks();

    switch (spec.mode) {
        case freeze_spec::kind::all:
        case freeze_spec::kind::none:
            break;
        case freeze_spec::kind::last_n_blocks:
            check(spec.n >= 0 && spec.n <= total_blocks,
                  "freeze_mask: last_n_blocks " + std::to_string(spec.n) + " out of range [0," +
                      std::to_string(total_blocks) + "]");
            break;
        case freeze_spec::kind::from_stage:
            check(spec.stage >= 1 && spec.stage <= cfg.num_stages(),
                  "freeze_mask: from_stage " + std::to_string(spec.stage) + " out of range [1," +
                      std::to_string(cfg.num_stages()) + "]");
            break;
    }

    for (auto & [name, e] : state.params.entries) {
        const param_locus loc = locate(cfg, name);
        bool trainable = false;
        switch (spec.mode) {
            case freeze_spec::kind::all:
                trainable = true;
                break;
            case freeze_spec::kind::none:
                trainable = false;
                break;
            case freeze_spec::kind::last_n_blocks:
                trainable = loc.block >= 0 && loc.block >= total_blocks - spec.n;
                break;
            case freeze_spec::kind::from_stage:
                trainable = loc.stage >= spec.stage && (loc.block >= 0 || loc.is_down);
                break;
        }
        e.trainable = trainable;
    }
    return state.params.trainable_count();
}

int64_t receptive_field_extent(const encoder_config & cfg) {
    int64_t rf = 1;
    int64_t jump = 1;
    rf += int64_t(cfg.stem_patch - 1) * jump;
    jump *= cfg.stem_patch;
    for (int s = 1; s <= cfg.num_stages(); ++s) {
        if (s >= 2) {
            rf += jump;  // 2x2 downsampler
            jump *= 2;
        }
        rf += int64_t(cfg.depths[static_cast<size_t>(s - 1)]) * (cfg.kernel_size - 1) * jump;
    }
    return rf;
}

int64_t equivariance_margin_cells(const encoder_config & cfg) {
    const int64_t radius = (receptive_field_extent(cfg) - 1) / 2;
    const int64_t d = cfg.downsample_factor();
    return (radius + d - 1) / d;
}

// ---------------------------------------------------------------------

template struct encoder_state<float>;
template struct encoder_state<double>;

template encoder_state<float> build_encoder<float>(const encoder_config &, uint64_t);
template encoder_state<double> build_encoder<double>(const encoder_config &, uint64_t);
template visual_tokens<float> encode<float>(const encoder_state<float> &, const tensor<float> &);
template visual_tokens<double> encode<double>(const encoder_state<double> &,
                                              const tensor<double> &);
template taped_tokens<float> encode_on_tape<float>(const encoder_state<float> &, tape<float> &,
                                                   tape_binding<float> &, tape<float>::id);
template taped_tokens<double> encode_on_tape<double>(const encoder_state<double> &,
                                                     tape<double> &, tape_binding<double> &,
                                                     tape<double>::id);
template int64_t freeze_mask<float>(encoder_state<float> &, const freeze_spec &);
template int64_t freeze_mask<double>(encoder_state<double> &, const freeze_spec &);

}  // namespace cvl

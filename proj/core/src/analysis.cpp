#include "cvl/analysis.hpp"

#include <algorithm>
#include <ostream>

namespace cvl::analysis {

std::string kind_name(encoder_kind k) {
    switch (k) {
        case encoder_kind::convnext4: return "convnext4";
        case encoder_kind::convnext5: return "convnext5";
        case encoder_kind::vit: return "vit";
    }
    return "?";
}

std::optional<encoder_kind> kind_from_name(const std::string & name) {
    if (name == "convnext4") {
        return encoder_kind::convnext4;
    }
    if (name == "convnext5") {
        return encoder_kind::convnext5;
    }
    if (name == "vit") {
        return encoder_kind::vit;
    }
    return std::nullopt;
}

std::vector<encoder_kind> all_kinds() {
    return {encoder_kind::convnext4, encoder_kind::convnext5, encoder_kind::vit};
}

int64_t token_factor(encoder_kind k) {
    switch (k) {
        case encoder_kind::vit: return 14;
        case encoder_kind::convnext4: return 32;
        case encoder_kind::convnext5: return 64;
    }
    return 0;
}

int64_t token_count(encoder_kind k, int64_t h, int64_t w) {
    const int64_t f = token_factor(k);
    check(h > 0 && w > 0, "token_count: non-positive resolution");
    check(h % f == 0, "token_count: height " + std::to_string(h) + " is not a multiple of " +
                          std::to_string(f) + " (factor for " + kind_name(k) + ")");
    check(w % f == 0, "token_count: width " + std::to_string(w) + " is not a multiple of " +
                          std::to_string(f) + " (factor for " + kind_name(k) + ")");
    return (h / f) * (w / f);
}

int64_t effective_resolution(encoder_kind k, int64_t res) {
    const int64_t f = token_factor(k);
    const int64_t eff = (res / f) * f;
    check(eff > 0, "effective_resolution: " + std::to_string(res) + " is below the factor " +
                       std::to_string(f) + " for " + kind_name(k));
    return eff;
}

uint64_t attention_flops(uint64_t c, uint64_t n) {
    check(c > 0 && n > 0, "attention_flops: C and N must be positive");
    return 4 * c * c * n + 2 * c * n * n;
}

uint64_t dwconv_flops(uint64_t k, uint64_t c, uint64_t n) {
    check(k > 0 && c > 0 && n > 0, "dwconv_flops: k, C, N must be positive");
    return k * k * c * n;
}

flops_model flops_model::make(encoder_kind k) {
    flops_model m;
    m.kind = k;
    if (k == encoder_kind::convnext4) {
        m.conv = encoder_config::large();
    } else if (k == encoder_kind::convnext5) {
        m.conv = encoder_config::large_5stage();
    }
    return m;
}

flops_model flops_model::custom_conv(const encoder_config & cfg, llm_geometry llm) {
    cfg.validate();
    flops_model m;
    m.kind = cfg.num_stages() >= 5 ? encoder_kind::convnext5 : encoder_kind::convnext4;
    m.conv = cfg;
    m.llm = llm;
    return m;
}

int64_t flops_model::factor() const {
    return kind == encoder_kind::vit ? vit.patch : conv.downsample_factor();
}

uint64_t conv_encoder_flops(const encoder_config & cfg, int64_t h, int64_t w) {
    cfg.validate();
    check(h % cfg.downsample_factor() == 0 && w % cfg.downsample_factor() == 0,
          "conv_encoder_flops: resolution must be a multiple of " +
              std::to_string(cfg.downsample_factor()));

    uint64_t flops = 0;
    int64_t gh = h / cfg.stem_patch;
    int64_t gw = w / cfg.stem_patch;

    // stem: 4x4/4 conv from RGB, one MAC = 2 FLOPs
    flops += 2ull * uint64_t(gh * gw) * uint64_t(cfg.channels[0]) * 3ull *
             uint64_t(cfg.stem_patch) * uint64_t(cfg.stem_patch);

    for (int s = 1; s <= cfg.num_stages(); ++s) {
        const uint64_t c = static_cast<uint64_t>(cfg.channels[static_cast<size_t>(s - 1)]);
        if (s >= 2) {
            const uint64_t cprev = static_cast<uint64_t>(cfg.channels[static_cast<size_t>(s - 2)]);
            gh /= 2;
            gw /= 2;
            flops += 2ull * uint64_t(gh * gw) * c * cprev * 4ull;  // 2x2/2 downsampler
        }
        const uint64_t n = static_cast<uint64_t>(gh * gw);
        const uint64_t e = static_cast<uint64_t>(cfg.ffn_expansion);
        const uint64_t per_block = dwconv_flops(static_cast<uint64_t>(cfg.kernel_size), c, n) +
                                   2ull * n * (e * c) * c +  // pointwise expand
                                   2ull * n * c * (e * c);   // pointwise project
        flops += per_block * static_cast<uint64_t>(cfg.depths[static_cast<size_t>(s - 1)]);
    }
    return flops;
}

uint64_t vit_encoder_flops(const vit_geometry & g, int64_t h, int64_t w) {
    check(h % g.patch == 0 && w % g.patch == 0,
          "vit_encoder_flops: resolution must be a multiple of the patch size " +
              std::to_string(g.patch));
    const uint64_t n = static_cast<uint64_t>((h / g.patch) * (w / g.patch));
    const uint64_t c = static_cast<uint64_t>(g.width);

    // patch embed
    uint64_t flops = 2ull * n * c * 3ull * uint64_t(g.patch) * uint64_t(g.patch);
    // transformer blocks: attention closed form + 2 MLP matmuls
    const uint64_t per_layer =
        attention_flops(c, n) + 2ull * (2ull * n * c * (uint64_t(g.mlp_ratio) * c));
    flops += per_layer * static_cast<uint64_t>(g.layers);
    return flops;
}

uint64_t llm_prefill_flops(const llm_geometry & g, int64_t tokens) {
    check(tokens > 0, "llm_prefill_flops: token count must be positive");
    const uint64_t d = static_cast<uint64_t>(g.embed_dim);
    const uint64_t n = static_cast<uint64_t>(tokens);
    const uint64_t per_layer = 4 * d * d * n + 2 * d * n * n +
                               uint64_t(4 * g.mlp_ratio) * d * d * n;
    return per_layer * static_cast<uint64_t>(g.layers);
}

cost_breakdown lmm_total_flops_hw(const flops_model & m, int64_t h, int64_t w) {
    cost_breakdown out;
    if (m.kind == encoder_kind::vit) {
        out.tokens = token_count(encoder_kind::vit, h, w);
        out.encoder = vit_encoder_flops(m.vit, h, w);
    } else {
        const int64_t d = m.conv.downsample_factor();
        check(h % d == 0 && w % d == 0, "lmm_total_flops: resolution must be a multiple of " +
                                            std::to_string(d));
        out.tokens = (h / d) * (w / d);
        out.encoder = conv_encoder_flops(m.conv, h, w);
    }
    out.llm_prefill = llm_prefill_flops(m.llm, out.tokens);
    out.total = out.encoder + out.llm_prefill;
    return out;
}

cost_breakdown lmm_total_flops(const flops_model & m, int64_t res) {
    return lmm_total_flops_hw(m, res, res);
}

void emit_curves(const std::vector<encoder_kind> & kinds, const std::vector<int64_t> & resolutions,
                 std::ostream & out) {
    struct row {
        std::string kind;
        int64_t res;
    };
    std::vector<row> rows;
    for (encoder_kind k : kinds) {
        for (int64_t r : resolutions) {
            rows.push_back({kind_name(k), r});
        }
    }
    std::sort(rows.begin(), rows.end(), [](const row & a, const row & b) {
        return a.kind != b.kind ? a.kind < b.kind : a.res < b.res;
    });
    rows.erase(std::unique(rows.begin(), rows.end(),
                           [](const row & a, const row & b) {
                               return a.kind == b.kind && a.res == b.res;
                           }),
               rows.end());

    out << "kind,resolution,tokens,encoder_flops,llm_flops,total_flops\n";
    for (const row & r : rows) {
        const encoder_kind k = *kind_from_name(r.kind);
        const flops_model m = flops_model::make(k);
        const int64_t eff = effective_resolution(k, r.res);
        const cost_breakdown c = lmm_total_flops(m, eff);
        out << r.kind << "," << r.res << "," << c.tokens << "," << c.encoder << ","
            << c.llm_prefill << "," << c.total << "\n";
    }
}

}  // namespace cvl::analysis

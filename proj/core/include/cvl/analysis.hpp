#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cvl/encoder.hpp"

namespace cvl::analysis {

// FLOPs conventions, also spelled out in the README:
//  - every matmul-shaped term (pointwise conv, stems, downsamplers,
//    transformer MLPs, patch embeds) counts 2*m*n*p, i.e. one
//    multiply-accumulate = 2 FLOPs;
//  - depthwise convolutions count k^2*C*N and transformer attention
//    counts 4*C^2*N + 2*C*N^2, matching the standard closed forms for
//    those layers (MACs, not doubled);
//  - the LM prefill term covers the visual-token prefix only: per layer
//    4*D^2*N + 2*D*N^2 (attention) + 16*D^2*N (4x MLP), times the layer
//    count. Text tokens are excluded.
// `total` is encoder + llm_prefill. Headline cost comparisons between
// encoder families are made on the llm_prefill term, which is the
// "cost as a function of the visual token count" curve; see README.

enum class encoder_kind { convnext4, convnext5, vit };

std::string kind_name(encoder_kind k);
std::optional<encoder_kind> kind_from_name(const std::string & name);
std::vector<encoder_kind> all_kinds();

// Spatial reduction from pixels to tokens: vit 14, convnext4 32,
// convnext5 64.
int64_t token_factor(encoder_kind k);

// (H/factor) * (W/factor); errors when a side is not a multiple.
int64_t token_count(encoder_kind k, int64_t h, int64_t w);

// Largest multiple of the kind's factor that is <= res (the short-side
// crop law applied to analysis resolutions).
int64_t effective_resolution(encoder_kind k, int64_t res);

// 4*C^2*N + 2*C*N^2.
uint64_t attention_flops(uint64_t c, uint64_t n);

// k^2*C*N.
uint64_t dwconv_flops(uint64_t k, uint64_t c, uint64_t n);

struct vit_geometry {
    int patch = 14;
    int width = 1024;
    int layers = 24;
    int mlp_ratio = 4;
};

struct llm_geometry {
    int64_t embed_dim = 4096;  // 7B-class dense decoder
    int layers = 32;
    int mlp_ratio = 4;
};

struct flops_model {
    encoder_kind kind = encoder_kind::convnext4;
    vit_geometry vit;      // used when kind == vit
    encoder_config conv;   // used for convnext kinds
    llm_geometry llm;

    // Canonical large geometries behind the three kinds.
    static flops_model make(encoder_kind k);
    // Arbitrary conv geometry (token factor from the config); used to
    // cross-check the analyzer against instrumented conv kernels.
    static flops_model custom_conv(const encoder_config & cfg, llm_geometry llm = {});

    int64_t factor() const;
};

struct cost_breakdown {
    int64_t tokens = 0;
    uint64_t encoder = 0;
    uint64_t llm_prefill = 0;
    uint64_t total = 0;  // encoder + llm_prefill
};

// Layer-by-layer analytic cost at a resolution (H = W = res) or an
// explicit H x W geometry. Resolutions must be multiples of the factor.
cost_breakdown lmm_total_flops(const flops_model & m, int64_t res);
cost_breakdown lmm_total_flops_hw(const flops_model & m, int64_t h, int64_t w);

// Conv-stage encoder cost for any config; exactly the conv work encode()
// executes (stem/downsamplers/pointwise at 2*m*n*p, depthwise at k^2*C*N).
uint64_t conv_encoder_flops(const encoder_config & cfg, int64_t h, int64_t w);

uint64_t vit_encoder_flops(const vit_geometry & g, int64_t h, int64_t w);

uint64_t llm_prefill_flops(const llm_geometry & g, int64_t tokens);

// CSV: "kind,resolution,tokens,encoder_flops,llm_flops,total_flops",
// rows sorted by (kind, resolution). Non-multiple resolutions are
// evaluated at effective_resolution(); the resolution column keeps the
// requested value.
void emit_curves(const std::vector<encoder_kind> & kinds, const std::vector<int64_t> & resolutions,
                 std::ostream & out);

}  // namespace cvl::analysis

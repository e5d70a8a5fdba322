#pragma once

#include <cstdint>
#include <string>

#include "cvl/pipeline.hpp"

namespace cvl {

struct gradcheck_report {
    double max_rel_err = 0.0;
    int64_t checks = 0;
    bool pass = false;
    std::string worst;  // qualified parameter name of the worst offender
};

// 64-bit end-to-end gradient check: full pipeline (encoder + projector +
// LM + masked loss) on one synthetic sample, analytic gradients against
// central finite differences (h = 1e-5) on sampled coordinates of every
// trainable component. Passes when the guarded relative error stays
// below tol.
gradcheck_report gradcheck_pipeline(uint64_t seed, const encoder_config & enc_cfg,
                                    int image_size = 64, int coords_per_param = 2,
                                    double tol = 1e-5);

struct equivariance_report {
    double max_interior_diff = 0.0;
    int64_t margin_cells = 0;
    int64_t interior_cells = 0;
    int64_t grid_h = 0;
    int64_t grid_w = 0;
    bool pass = false;
};

// Encodes two crops of one canvas offset horizontally by exactly D
// pixels and compares the token grids shifted by one cell, skipping the
// receptive-field margin. shift_px must equal the config's downsampling
// factor.
equivariance_report equivariance_check(uint64_t seed, const encoder_config & enc_cfg,
                                       int64_t crop_size, int64_t shift_px, double tol = 1e-5);

}  // namespace cvl

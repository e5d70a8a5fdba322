#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvl/tensor.hpp"

namespace cvl {

struct image_rgb {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // 3 * width * height, row-major RGB

    uint8_t & at(int x, int y, int c) {
        return pixels[3 * (static_cast<size_t>(y) * static_cast<size_t>(width) +
                           static_cast<size_t>(x)) +
                      static_cast<size_t>(c)];
    }
    uint8_t at(int x, int y, int c) const {
        return pixels[3 * (static_cast<size_t>(y) * static_cast<size_t>(width) +
                           static_cast<size_t>(x)) +
                      static_cast<size_t>(c)];
    }
};

// Binary PPM (P6, maxval 255) with '#' header comments.
image_rgb load_ppm(const std::string & path);
void save_ppm(const image_rgb & img, const std::string & path);

enum class resize_mode { square, short_side };

struct preprocess_config {
    resize_mode mode = resize_mode::square;
    int target = 1536;  // R: square side, or short-side length
    int factor = 64;    // D: output dims are multiples of this
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> stdev{0.26862954, 0.26130258, 0.27577711};
    // Padding fill; defaults to the per-channel mean in pixel units.
    std::optional<std::array<uint8_t, 3>> fill;

    std::array<uint8_t, 3> fill_value() const;
    void validate() const;
};

// Pad the short dimension symmetrically to a square, bilinear-resize to
// target x target (half-pixel centers), center crop (a no-op after the
// exact resize), then normalize (x/255 - mean) / std.
template <typename T>
tensor<T> preprocess_square(const image_rgb & img, const preprocess_config & cfg);

// Resize so min(H, W) == target at the source aspect ratio, then center
// crop both dims down to the nearest multiple of factor. No padding.
template <typename T>
tensor<T> preprocess_short_side(const image_rgb & img, const preprocess_config & cfg);

template <typename T>
tensor<T> preprocess(const image_rgb & img, const preprocess_config & cfg);

// Bilinear resample of a [C,H,W] float image, half-pixel centers,
// clamped borders. Identity when sizes match.
template <typename T>
tensor<T> bilinear_resize(const tensor<T> & chw, int64_t out_h, int64_t out_w);

// Raw tensor file: magic "CVT0", u32 rank, u32 dims, then f32
// little-endian payload.
void save_cvt(const tensor<float> & t, const std::string & path);
tensor<float> load_cvt(const std::string & path);

}  // namespace cvl

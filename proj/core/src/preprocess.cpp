#include "cvl/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace cvl {

// ---------------------------------------------------------------------
// PPM
// ---------------------------------------------------------------------

namespace {

struct ppm_reader {
    std::string buf;
    size_t pos = 0;
    std::string path;

    [[noreturn]] void err(const std::string & what) const {
        fail("load_ppm: " + what + " at byte offset " + std::to_string(pos) + " in '" + path +
             "'");
    }

    // Skips whitespace and '#' comment lines between header tokens.
    void skip_space() {
        while (pos < buf.size()) {
            const char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') {
                    ++pos;
                }
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    int read_int() {
        skip_space();
        if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9') {
            err("expected integer header field");
        }
        long v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1 << 30) {
                err("header field too large");
            }
            ++pos;
        }
        return static_cast<int>(v);
    }
};

}  // namespace

image_rgb load_ppm(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_ppm: cannot open '" + path + "'");

    ppm_reader r;
    r.path = path;
    r.buf.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (r.buf.size() < 2 || r.buf[0] != 'P' || r.buf[1] != '6') {
        const std::string got = r.buf.size() >= 2 ? r.buf.substr(0, 2) : r.buf;
        fail("load_ppm: not a binary PPM (want magic 'P6', got '" + got + "') at byte offset 0 in '" +
             path + "'");
    }
    r.pos = 2;

    image_rgb img;
    img.width = r.read_int();
    img.height = r.read_int();
    const int maxval = r.read_int();
    if (img.width <= 0 || img.height <= 0) {
        r.err("non-positive image dimensions");
    }
    if (maxval != 255) {
        r.err("unsupported maxval " + std::to_string(maxval) + " (only 255)");
    }
    // Exactly one whitespace byte separates the header from the payload.
    if (r.pos >= r.buf.size() || !(r.buf[r.pos] == ' ' || r.buf[r.pos] == '\t' ||
                                   r.buf[r.pos] == '\r' || r.buf[r.pos] == '\n')) {
        r.err("missing whitespace before pixel payload");
    }
    ++r.pos;

    const size_t need = 3u * static_cast<size_t>(img.width) * static_cast<size_t>(img.height);
    if (r.buf.size() - r.pos < need) {
        r.err("truncated payload: need " + std::to_string(need) + " bytes, have " +
              std::to_string(r.buf.size() - r.pos));
    }
    img.pixels.assign(r.buf.begin() + static_cast<ptrdiff_t>(r.pos),
                      r.buf.begin() + static_cast<ptrdiff_t>(r.pos + need));
    return img;
}

void save_ppm(const image_rgb & img, const std::string & path) {
    check(img.width > 0 && img.height > 0, "save_ppm: empty image");
    check(img.pixels.size() == 3u * static_cast<size_t>(img.width) * static_cast<size_t>(img.height),
          "save_ppm: pixel buffer size does not match dimensions");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "save_ppm: cannot open '" + path + "' for writing");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char *>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    check(f.good(), "save_ppm: write failed for '" + path + "'");
}

// ---------------------------------------------------------------------
// resize / normalize
// ---------------------------------------------------------------------

std::array<uint8_t, 3> preprocess_config::fill_value() const {
    if (fill.has_value()) {
        return *fill;
    }
    std::array<uint8_t, 3> v{};
    for (int c = 0; c < 3; ++c) {
        v[static_cast<size_t>(c)] =
            static_cast<uint8_t>(std::lround(std::clamp(mean[static_cast<size_t>(c)], 0.0, 1.0) * 255.0));
    }
    return v;
}

void preprocess_config::validate() const {
    check(target > 0, "preprocess: target resolution must be positive");
    check(factor > 0, "preprocess: factor must be positive");
    if (mode == resize_mode::square) {
        check(target % factor == 0, "preprocess: square target " + std::to_string(target) +
                                        " must be a multiple of the downsampling factor " +
                                        std::to_string(factor));
    }
    for (double s : stdev) {
        check(s > 0, "preprocess: std must be positive");
    }
}

template <typename T>
tensor<T> bilinear_resize(const tensor<T> & chw, int64_t out_h, int64_t out_w) {
    check(chw.rank() == 3, "bilinear_resize: input must be [C,H,W], got " + shape_str(chw.shape));
    check(out_h > 0 && out_w > 0, "bilinear_resize: non-positive output size");
    const int64_t c = chw.size(0), h = chw.size(1), w = chw.size(2);
    tensor<T> out({c, out_h, out_w});

    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);

    for (int64_t oy = 0; oy < out_h; ++oy) {
        const double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fy)), 0, h - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
        const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
        for (int64_t ox = 0; ox < out_w; ++ox) {
            const double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fx)), 0, w - 1);
            const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
            const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
            for (int64_t ch = 0; ch < c; ++ch) {
                const T * plane = chw.ptr() + ch * h * w;
                const double v00 = plane[y0 * w + x0];
                const double v01 = plane[y0 * w + x1];
                const double v10 = plane[y1 * w + x0];
                const double v11 = plane[y1 * w + x1];
                const double top = v00 + (v01 - v00) * wx;
                const double bot = v10 + (v11 - v10) * wx;
                out.ptr()[(ch * out_h + oy) * out_w + ox] = static_cast<T>(top + (bot - top) * wy);
            }
        }
    }
    return out;
}

namespace {

template <typename T>
tensor<T> to_chw(const image_rgb & img) {
    check(img.width > 0 && img.height > 0, "preprocess: degenerate 0-size image");
    check(img.pixels.size() == 3u * static_cast<size_t>(img.width) * static_cast<size_t>(img.height),
          "preprocess: pixel buffer size does not match dimensions");
    tensor<T> out({3, img.height, img.width});
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.ptr()[(static_cast<int64_t>(c) * img.height + y) * img.width + x] =
                    static_cast<T>(img.at(x, y, c));
            }
        }
    }
    return out;
}

template <typename T>
tensor<T> pad_to_square(const tensor<T> & chw, const std::array<uint8_t, 3> & fill) {
    const int64_t h = chw.size(1), w = chw.size(2);
    if (h == w) {
        return chw;
    }
    const int64_t side = std::max(h, w);
    tensor<T> out({3, side, side});
    const int64_t top = (side - h) / 2;
    const int64_t left = (side - w) / 2;
    for (int64_t c = 0; c < 3; ++c) {
        T * plane = out.ptr() + c * side * side;
        std::fill(plane, plane + side * side, static_cast<T>(fill[static_cast<size_t>(c)]));
        for (int64_t y = 0; y < h; ++y) {
            std::memcpy(plane + (top + y) * side + left, chw.ptr() + (c * h + y) * w,
                        sizeof(T) * static_cast<size_t>(w));
        }
    }
    return out;
}

template <typename T>
tensor<T> center_crop(const tensor<T> & chw, int64_t out_h, int64_t out_w) {
    const int64_t h = chw.size(1), w = chw.size(2);
    check(out_h <= h && out_w <= w, "preprocess: crop larger than image");
    if (out_h == h && out_w == w) {
        return chw;
    }
    const int64_t top = (h - out_h) / 2;
    const int64_t left = (w - out_w) / 2;
    tensor<T> out({3, out_h, out_w});
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < out_h; ++y) {
            std::memcpy(out.ptr() + (c * out_h + y) * out_w,
                        chw.ptr() + (c * h + top + y) * w + left,
                        sizeof(T) * static_cast<size_t>(out_w));
        }
    }
    return out;
}

// (x/255 - mean) / std, then add the leading batch dim.
template <typename T>
tensor<T> normalize(tensor<T> chw, const preprocess_config & cfg) {
    const int64_t hw = chw.size(1) * chw.size(2);
    for (int64_t c = 0; c < 3; ++c) {
        const T mean = static_cast<T>(cfg.mean[static_cast<size_t>(c)]);
        const T inv_std = static_cast<T>(1.0 / cfg.stdev[static_cast<size_t>(c)]);
        T * plane = chw.ptr() + c * hw;
        for (int64_t i = 0; i < hw; ++i) {
            plane[i] = (plane[i] / T(255) - mean) * inv_std;
        }
    }
    return tensor<T>({1, 3, chw.size(1), chw.size(2)}, std::move(chw.data));
}

}  // namespace

template <typename T>
tensor<T> preprocess_square(const image_rgb & img, const preprocess_config & cfg) {
    cfg.validate();
    check(cfg.mode == resize_mode::square, "preprocess_square: config mode is not square");
    tensor<T> chw = to_chw<T>(img);
    chw = pad_to_square(chw, cfg.fill_value());
    chw = bilinear_resize(chw, cfg.target, cfg.target);
    chw = center_crop(chw, cfg.target, cfg.target);
    return normalize(std::move(chw), cfg);
}

template <typename T>
tensor<T> preprocess_short_side(const image_rgb & img, const preprocess_config & cfg) {
    cfg.validate();
    check(cfg.mode == resize_mode::short_side,
          "preprocess_short_side: config mode is not short_side");
    tensor<T> chw = to_chw<T>(img);

    const int64_t h = chw.size(1), w = chw.size(2);
    const double scale = static_cast<double>(cfg.target) / static_cast<double>(std::min(h, w));
    int64_t new_h, new_w;
    if (h <= w) {
        new_h = cfg.target;
        new_w = std::llround(static_cast<double>(w) * scale);
    } else {
        new_w = cfg.target;
        new_h = std::llround(static_cast<double>(h) * scale);
    }
    chw = bilinear_resize(chw, new_h, new_w);

    const int64_t crop_h = (new_h / cfg.factor) * cfg.factor;
    const int64_t crop_w = (new_w / cfg.factor) * cfg.factor;
    check(crop_h > 0 && crop_w > 0,
          "preprocess_short_side: resized image " + std::to_string(new_h) + "x" +
              std::to_string(new_w) + " smaller than the downsampling factor " +
              std::to_string(cfg.factor));
    chw = center_crop(chw, crop_h, crop_w);
    return normalize(std::move(chw), cfg);
}

template <typename T>
tensor<T> preprocess(const image_rgb & img, const preprocess_config & cfg) {
    return cfg.mode == resize_mode::square ? preprocess_square<T>(img, cfg)
                                           : preprocess_short_side<T>(img, cfg);
}

// ---------------------------------------------------------------------
// raw tensor file
// ---------------------------------------------------------------------

void save_cvt(const tensor<float> & t, const std::string & path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "save_cvt: cannot open '" + path + "' for writing");

    auto put_u32 = [&f](uint32_t v) {
        char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
        f.write(b, 4);
    };

    f.write("CVT0", 4);
    put_u32(static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape) {
        put_u32(static_cast<uint32_t>(d));
    }
    for (float v : t.data) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(bits);
    }
    check(f.good(), "save_cvt: write failed for '" + path + "'");
}

tensor<float> load_cvt(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_cvt: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    size_t pos = 0;
    auto get_u32 = [&](const char * what) {
        check(pos + 4 <= buf.size(), std::string("load_cvt: truncated file while reading ") +
                                         what + " at byte " + std::to_string(pos));
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)]))
                 << (8 * i);
        }
        pos += 4;
        return v;
    };

    check(buf.size() >= 4 && buf.compare(0, 4, "CVT0") == 0,
          "load_cvt: bad magic in '" + path + "' (want 'CVT0')");
    pos = 4;
    const uint32_t rank = get_u32("rank");
    check(rank <= 8, "load_cvt: rank " + std::to_string(rank) + " too large");
    std::vector<int64_t> shape;
    for (uint32_t i = 0; i < rank; ++i) {
        shape.push_back(static_cast<int64_t>(get_u32("dims")));
    }
    tensor<float> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) {
        const uint32_t bits = get_u32("payload");
        std::memcpy(&t[i], &bits, 4);
    }
    check(pos == buf.size(), "load_cvt: trailing bytes after payload");
    return t;
}

// ---------------------------------------------------------------------

template tensor<float> preprocess_square<float>(const image_rgb &, const preprocess_config &);
template tensor<double> preprocess_square<double>(const image_rgb &, const preprocess_config &);
template tensor<float> preprocess_short_side<float>(const image_rgb &, const preprocess_config &);
template tensor<double> preprocess_short_side<double>(const image_rgb &,
                                                      const preprocess_config &);
template tensor<float> preprocess<float>(const image_rgb &, const preprocess_config &);
template tensor<double> preprocess<double>(const image_rgb &, const preprocess_config &);
template tensor<float> bilinear_resize<float>(const tensor<float> &, int64_t, int64_t);
template tensor<double> bilinear_resize<double>(const tensor<double> &, int64_t, int64_t);

}  // namespace cvl

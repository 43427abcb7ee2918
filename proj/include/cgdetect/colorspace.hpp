#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cgdetect/common.hpp"
#include "cgdetect/tensor.hpp"

namespace cgdetect {

enum class ColorSpace { RGB, YCbCr, HSV };

inline std::string to_string(ColorSpace cs) {
    switch (cs) {
        case ColorSpace::RGB: return "rgb";
        case ColorSpace::YCbCr: return "ycbcr";
        case ColorSpace::HSV: return "hsv";
    }
    return "?";
}

inline ColorSpace colorspace_from_string(const std::string& s) {
    if (s == "rgb" || s == "RGB") return ColorSpace::RGB;
    if (s == "ycbcr" || s == "YCbCr" || s == "YCBCR") return ColorSpace::YCbCr;
    if (s == "hsv" || s == "HSV") return ColorSpace::HSV;
    throw SpecError("unknown color space '" + s + "' (expected rgb, ycbcr or hsv)");
}

// Interleaved height-major 3-channel image with values in [0,1].
// The H channel of HSV is stored as fraction of a turn so every channel
// shares the [0,1] domain.
struct ImageTensor {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;  // h * w * 3, row-major, channel interleaved
    ColorSpace space = ColorSpace::RGB;

    float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * 3 + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * 3 + c]; }

    static ImageTensor filled(std::size_t h, std::size_t w, float r, float g, float b) {
        ImageTensor img;
        img.height = h;
        img.width = w;
        img.values.resize(h * w * 3);
        for (std::size_t i = 0; i < h * w; ++i) {
            img.values[i * 3 + 0] = r;
            img.values[i * 3 + 1] = g;
            img.values[i * 3 + 2] = b;
        }
        return img;
    }
};

namespace detail {
inline void require_space(const ImageTensor& img, ColorSpace expected, const char* op) {
    if (img.space != expected) {
        throw SpecError(std::string(op) + ": input tagged '" + to_string(img.space) +
                        "', expected '" + to_string(expected) + "'");
    }
}
inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }
}  // namespace detail

// Full-range BT.601 on the [0,1] domain, as used by JPEG.
inline void rgb_to_ycbcr_pixel(float r, float g, float b, float& y, float& cb, float& cr) {
    y = 0.299f * r + 0.587f * g + 0.114f * b;
    cb = 0.5f - 0.168736f * r - 0.331264f * g + 0.5f * b;
    cr = 0.5f + 0.5f * r - 0.418688f * g - 0.081312f * b;
}

inline ImageTensor rgb_to_ycbcr(const ImageTensor& img) {
    detail::require_space(img, ColorSpace::RGB, "rgb_to_ycbcr");
    ImageTensor out = img;
    out.space = ColorSpace::YCbCr;
    for (std::size_t i = 0; i < img.values.size(); i += 3) {
        float y, cb, cr;
        rgb_to_ycbcr_pixel(img.values[i], img.values[i + 1], img.values[i + 2], y, cb, cr);
        out.values[i] = detail::clamp01(y);
        out.values[i + 1] = detail::clamp01(cb);
        out.values[i + 2] = detail::clamp01(cr);
    }
    return out;
}

// Hexcone model. H in [0,1) as fraction of a turn, H := 0 for achromatic
// pixels; S = (max-min)/max with S := 0 when max = 0; V = max.
inline void rgb_to_hsv_pixel(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max(r, std::max(g, b));
    const float mn = std::min(r, std::min(g, b));
    const float delta = mx - mn;
    v = mx;
    s = (mx > 0.0f) ? delta / mx : 0.0f;
    if (delta <= 0.0f) {
        h = 0.0f;
        return;
    }
    float hue;
    if (mx == r) {
        hue = (g - b) / delta;
        if (hue < 0.0f) hue += 6.0f;
    } else if (mx == g) {
        hue = (b - r) / delta + 2.0f;
    } else {
        hue = (r - g) / delta + 4.0f;
    }
    h = hue / 6.0f;
    if (h >= 1.0f) h -= 1.0f;
}

inline ImageTensor rgb_to_hsv(const ImageTensor& img) {
    detail::require_space(img, ColorSpace::RGB, "rgb_to_hsv");
    ImageTensor out = img;
    out.space = ColorSpace::HSV;
    for (std::size_t i = 0; i < img.values.size(); i += 3) {
        float h, s, v;
        rgb_to_hsv_pixel(img.values[i], img.values[i + 1], img.values[i + 2], h, s, v);
        out.values[i] = h;
        out.values[i + 1] = s;
        out.values[i + 2] = v;
    }
    return out;
}

// Standard hexcone inverse; also serves as the roundtrip oracle for rgb_to_hsv.
inline void hsv_to_rgb_pixel(float h, float s, float v, float& r, float& g, float& b) {
    if (s <= 0.0f) {
        r = g = b = v;
        return;
    }
    const float hue = h * 6.0f;
    const int sector = static_cast<int>(hue) % 6;
    const float f = hue - std::floor(hue);
    const float p = v * (1.0f - s);
    const float q = v * (1.0f - s * f);
    const float t = v * (1.0f - s * (1.0f - f));
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

inline ImageTensor hsv_to_rgb(const ImageTensor& img) {
    detail::require_space(img, ColorSpace::HSV, "hsv_to_rgb");
    ImageTensor out = img;
    out.space = ColorSpace::RGB;
    for (std::size_t i = 0; i < img.values.size(); i += 3) {
        hsv_to_rgb_pixel(img.values[i], img.values[i + 1], img.values[i + 2], out.values[i],
                         out.values[i + 1], out.values[i + 2]);
    }
    return out;
}

inline ImageTensor convert_space(const ImageTensor& rgb, ColorSpace target) {
    switch (target) {
        case ColorSpace::RGB: return rgb;
        case ColorSpace::YCbCr: return rgb_to_ycbcr(rgb);
        case ColorSpace::HSV: return rgb_to_hsv(rgb);
    }
    throw SpecError("convert_space: bad target");
}

// Per-channel (v - mean) / std, transposed to the channel-major [3,H,W]
// layout the model consumes.
template <typename T = float>
Tensor<T> normalize(const ImageTensor& img, const std::array<float, 3>& mean,
                    const std::array<float, 3>& stddev) {
    for (float s : stddev) {
        if (s == 0.0f) throw SpecError("normalize: zero std component");
    }
    Tensor<T> out = Tensor<T>::zeros({3, img.height, img.width});
    const std::size_t plane = img.height * img.width;
    for (std::size_t c = 0; c < 3; ++c) {
        const float m = mean[c];
        const float inv = 1.0f / stddev[c];
        for (std::size_t i = 0; i < plane; ++i) {
            (*out.data)[c * plane + i] = static_cast<T>((img.values[i * 3 + c] - m) * inv);
        }
    }
    return out;
}

template <typename T>
ImageTensor denormalize(const Tensor<T>& t, const std::array<float, 3>& mean,
                        const std::array<float, 3>& stddev, ColorSpace space) {
    if (t.rank() != 3 || t.shape[0] != 3) {
        throw ShapeError("denormalize: expected [3,H,W], got " + shape_str(t.shape));
    }
    ImageTensor img;
    img.height = t.shape[1];
    img.width = t.shape[2];
    img.space = space;
    img.values.resize(img.height * img.width * 3);
    const std::size_t plane = img.height * img.width;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            img.values[i * 3 + c] = static_cast<float>((*t.data)[c * plane + i]) * stddev[c] + mean[c];
        }
    }
    return img;
}

// Separable bilinear resampling with half-pixel centers. Identical sizes
// reproduce the input bit-exactly.
inline ImageTensor resize_bilinear(const ImageTensor& img, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0) throw SpecError("resize_bilinear: target extents must be positive");
    ImageTensor out;
    out.height = out_h;
    out.width = out_w;
    out.space = img.space;
    out.values.resize(out_h * out_w * 3);

    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::max(0.0, std::min(fy, static_cast<double>(img.height - 1)));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const float wy = static_cast<float>(fy - static_cast<double>(y0));
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::max(0.0, std::min(fx, static_cast<double>(img.width - 1)));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const float wx = static_cast<float>(fx - static_cast<double>(x0));
            for (std::size_t c = 0; c < 3; ++c) {
                const float top = img.at(y0, x0, c) * (1.0f - wx) + img.at(y0, x1, c) * wx;
                const float bot = img.at(y1, x0, c) * (1.0f - wx) + img.at(y1, x1, c) * wx;
                out.at(oy, ox, c) = top * (1.0f - wy) + bot * wy;
            }
        }
    }
    return out;
}

// Table-1 normalization constants, applied unchanged to all three spaces.
inline constexpr std::array<float, 3> kNormMean = {0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kNormStd = {0.229f, 0.224f, 0.225f};

}  // namespace cgdetect

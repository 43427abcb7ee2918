#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "cgdetect/colorspace.hpp"
#include "cgdetect/common.hpp"
#include "cgdetect/image_io.hpp"

namespace cgdetect {

// Procedural test-fixture corpus. "cgi" images are flat-shaded geometric
// primitives; "real" images are noise-textured with smooth shading. The two
// classes also draw from disjoint palettes (warm vs cool) so color statistics
// alone separate them.
struct SynthConfig {
    std::size_t per_class = 20;
    std::size_t width = 64;
    std::size_t height = 64;
    std::uint64_t seed = 1;
    bool jpeg = false;          // default PNG
    bool swap_palettes = false; // adversarial fixture: classes trade palettes
    bool shared_texture = false;// both classes flat-shaded; only color separates
};

namespace detail {

struct Palette {
    // Hue range as fraction of a turn.
    float hue_lo, hue_hi;
};

inline constexpr Palette kWarm{0.95f, 1.08f};  // reds/oranges (wraps)
inline constexpr Palette kCool{0.52f, 0.68f};  // blues/cyans

inline void pixel_from_hsv(ImageTensor& img, std::size_t y, std::size_t x, float h, float s, float v) {
    h = h - std::floor(h);
    float r, g, b;
    hsv_to_rgb_pixel(h, s, v, r, g, b);
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
}

inline float pick_hue(Rng& rng, const Palette& p) {
    return static_cast<float>(rng.uniform(p.hue_lo, p.hue_hi));
}

inline ImageTensor render_flat(std::size_t h, std::size_t w, Rng& rng, const Palette& pal) {
    ImageTensor img = ImageTensor::filled(h, w, 0.f, 0.f, 0.f);
    const float bg_hue = pick_hue(rng, pal);
    const float bg_v = static_cast<float>(rng.uniform(0.25, 0.5));
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) pixel_from_hsv(img, y, x, bg_hue, 0.85f, bg_v);
    }
    const std::size_t shapes = 3 + rng.next_below(4);
    for (std::size_t s = 0; s < shapes; ++s) {
        const float hue = pick_hue(rng, pal);
        const float val = static_cast<float>(rng.uniform(0.55, 1.0));
        const bool circle = rng.next_below(2) == 0;
        const std::size_t cx = rng.next_below(w);
        const std::size_t cy = rng.next_below(h);
        const std::size_t r = 3 + rng.next_below(std::max<std::size_t>(4, w / 4));
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = static_cast<double>(x) - static_cast<double>(cx);
                const double dy = static_cast<double>(y) - static_cast<double>(cy);
                const bool inside = circle ? (dx * dx + dy * dy <= static_cast<double>(r) * r)
                                           : (std::abs(dx) <= static_cast<double>(r) &&
                                              std::abs(dy) <= static_cast<double>(r) * 0.6);
                if (inside) pixel_from_hsv(img, y, x, hue, 0.9f, val);
            }
        }
    }
    return img;
}

inline ImageTensor render_noise(std::size_t h, std::size_t w, Rng& rng, const Palette& pal) {
    ImageTensor img = ImageTensor::filled(h, w, 0.f, 0.f, 0.f);
    const float hue = pick_hue(rng, pal);
    const float gx = static_cast<float>(rng.uniform(-0.3, 0.3));
    const float gy = static_cast<float>(rng.uniform(-0.3, 0.3));
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const float shade = 0.5f + gx * (static_cast<float>(x) / w - 0.5f) +
                                gy * (static_cast<float>(y) / h - 0.5f);
            const float n = static_cast<float>(rng.normal()) * 0.12f;
            const float v = clamp01(shade + n);
            const float s = clamp01(0.5f + static_cast<float>(rng.normal()) * 0.08f);
            pixel_from_hsv(img, y, x, hue + static_cast<float>(rng.normal()) * 0.01f, s, v);
        }
    }
    return img;
}

}  // namespace detail

// Renders one synthetic image. index selects the per-image RNG stream.
inline ImageTensor render_synth(const SynthConfig& cfg, bool cgi, std::size_t index) {
    Rng rng = Rng(cfg.seed).fork(cgi ? index * 2 + 1 : index * 2);
    const detail::Palette pal = (cgi != cfg.swap_palettes) ? detail::kWarm : detail::kCool;
    if (cgi || cfg.shared_texture) return detail::render_flat(cfg.height, cfg.width, rng, pal);
    return detail::render_noise(cfg.height, cfg.width, rng, pal);
}

// Writes <root>/cgi and <root>/real with per_class images each.
inline void generate_corpus(const std::string& root, const SynthConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "cgi");
    fs::create_directories(fs::path(root) / "real");
    const char* ext = cfg.jpeg ? ".jpg" : ".png";
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05zu", i);
        const ImageTensor cgi_img = render_synth(cfg, true, i);
        const ImageTensor real_img = render_synth(cfg, false, i);
        const std::string cgi_path = (fs::path(root) / "cgi" / ("cgi_" + std::string(name) + ext)).string();
        const std::string real_path = (fs::path(root) / "real" / ("real_" + std::string(name) + ext)).string();
        if (cfg.jpeg) {
            encode_jpeg(cgi_img, cgi_path);
            encode_jpeg(real_img, real_path);
        } else {
            encode_png(cgi_img, cgi_path);
            encode_png(real_img, real_path);
        }
    }
}

}  // namespace cgdetect

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgdetect/common.hpp"
#include "cgdetect/tensor.hpp"
#include "cgdetect/weights.hpp"

namespace cgdetect {

// Architecture hyperparameters. Defaults are the smallest standard
// four-stage variant; everything else is config-only.
struct SwinConfig {
    std::size_t patch_size = 4;
    std::size_t embed_dim = 96;
    std::vector<std::size_t> depths = {2, 2, 6, 2};
    std::vector<std::size_t> heads = {3, 6, 12, 24};
    std::size_t window = 7;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 2;
    std::size_t input_size = 224;
    bool relative_bias = true;

    std::size_t stages() const { return depths.size(); }
    std::size_t stage_dim(std::size_t s) const { return embed_dim << s; }
    std::size_t feature_dim() const { return stage_dim(stages() - 1); }
    std::size_t base_grid() const { return input_size / patch_size; }
    std::size_t stage_grid(std::size_t s) const { return base_grid() >> s; }

    // Tiny variant used by fast tests: 16x16 input, window 2, two stages.
    static SwinConfig micro() {
        SwinConfig c;
        c.embed_dim = 16;
        c.depths = {1, 1};
        c.heads = {2, 2};
        c.window = 2;
        c.input_size = 16;
        return c;
    }

    // Indivisible geometries are rejected rather than padded.
    void validate() const {
        if (depths.empty() || depths.size() != heads.size()) {
            throw SpecError("swin config: depths/heads must be non-empty and equal length");
        }
        if (patch_size == 0 || window == 0 || embed_dim == 0 || mlp_ratio == 0) {
            throw SpecError("swin config: extents must be positive");
        }
        if (num_classes < 2) throw SpecError("swin config: num_classes must be >= 2");
        if (input_size % patch_size != 0) {
            throw ShapeError("swin config: input " + std::to_string(input_size) +
                             " not divisible by patch size " + std::to_string(patch_size));
        }
        for (std::size_t s = 0; s < stages(); ++s) {
            if (stage_dim(s) % heads[s] != 0) {
                throw SpecError("swin config: stage " + std::to_string(s) + " dim " +
                                std::to_string(stage_dim(s)) + " not divisible by " +
                                std::to_string(heads[s]) + " heads");
            }
            const std::size_t grid = stage_grid(s);
            if (grid == 0 || grid % window != 0) {
                throw ShapeError("swin config: stage " + std::to_string(s) + " grid " +
                                 std::to_string(grid) + " not divisible by window " +
                                 std::to_string(window));
            }
            if (s + 1 < stages() && grid % 2 != 0) {
                throw ShapeError("swin config: stage " + std::to_string(s) + " grid " +
                                 std::to_string(grid) + " must be even for merging");
            }
        }
    }

    nlohmann::json to_json() const {
        return {{"patch_size", patch_size}, {"embed_dim", embed_dim},   {"depths", depths},
                {"heads", heads},           {"window", window},         {"mlp_ratio", mlp_ratio},
                {"num_classes", num_classes}, {"input_size", input_size}, {"relative_bias", relative_bias}};
    }

    static SwinConfig from_json(const nlohmann::json& j) {
        SwinConfig c;
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.depths = j.at("depths").get<std::vector<std::size_t>>();
        c.heads = j.at("heads").get<std::vector<std::size_t>>();
        c.window = j.at("window").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.num_classes = j.at("num_classes").get<std::size_t>();
        c.input_size = j.at("input_size").get<std::size_t>();
        c.relative_bias = j.at("relative_bias").get<bool>();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Token-grid movement ops
// ---------------------------------------------------------------------------

// [B,H,W,C] -> [B*nW, window^2, C]; bijective, window_reverse undoes it bit-exactly.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
    if (x.rank() != 4) throw ShapeError("window_partition: expected [B,H,W,C], got " + shape_str(x.shape));
    const std::size_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
    if (h % window != 0 || w % window != 0) {
        throw ShapeError("window_partition: grid " + shape_str(x.shape) + " not divisible by window " +
                         std::to_string(window));
    }
    const std::size_t nh = h / window, nw = w / window;
    const std::size_t n = window * window;
    auto map = [=](std::size_t o) {
        const std::size_t ci = o % c;
        o /= c;
        const std::size_t pos = o % n;
        const std::size_t win = o / n;
        const std::size_t bi = win / (nh * nw);
        const std::size_t wy = (win / nw) % nh;
        const std::size_t wx = win % nw;
        const std::size_t y = wy * window + pos / window;
        const std::size_t xx = wx * window + pos % window;
        return ((bi * h + y) * w + xx) * c + ci;
    };
    return movement_op(x, {b * nh * nw, n, c}, map);
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& x, std::size_t window, std::size_t b, std::size_t h,
                         std::size_t w) {
    const std::size_t c = x.shape.back();
    const std::size_t nh = h / window, nw = w / window;
    if (x.rank() != 3 || x.shape[0] != b * nh * nw || x.shape[1] != window * window) {
        throw ShapeError("window_reverse: " + shape_str(x.shape) + " does not tile a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    const std::size_t n = window * window;
    auto map = [=](std::size_t o) {
        const std::size_t ci = o % c;
        o /= c;
        const std::size_t xx = o % w;
        o /= w;
        const std::size_t y = o % h;
        const std::size_t bi = o / h;
        const std::size_t win = (bi * nh + y / window) * nw + xx / window;
        const std::size_t pos = (y % window) * window + xx % window;
        return (win * n + pos) * c + ci;
    };
    return movement_op(x, {b, h, w, c}, map);
}

// Cyclic shift: out[y][x] = in[(y+sy) mod H][(x+sx) mod W].
template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, std::size_t sy, std::size_t sx) {
    if (x.rank() != 4) throw ShapeError("roll2d: expected [B,H,W,C], got " + shape_str(x.shape));
    const std::size_t h = x.shape[1], w = x.shape[2], c = x.shape[3];
    auto map = [=](std::size_t o) {
        const std::size_t ci = o % c;
        o /= c;
        const std::size_t xx = o % w;
        o /= w;
        const std::size_t y = o % h;
        const std::size_t bi = o / h;
        return ((bi * h + (y + sy) % h) * w + (xx + sx) % w) * c + ci;
    };
    return movement_op(x, x.shape, map);
}

// [B,3,H,W] -> [B, (H/p)(W/p), p*p*3] with (row, col, channel) inner order.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& img, std::size_t p) {
    if (img.rank() != 4 || img.shape[1] != 3) {
        throw ShapeError("extract_patches: expected [B,3,H,W], got " + shape_str(img.shape));
    }
    const std::size_t b = img.shape[0], h = img.shape[2], w = img.shape[3];
    if (h % p != 0 || w % p != 0) {
        throw ShapeError("extract_patches: image " + shape_str(img.shape) +
                         " not divisible by patch size " + std::to_string(p));
    }
    const std::size_t gh = h / p, gw = w / p;
    const std::size_t k = p * p * 3;
    auto map = [=](std::size_t o) {
        const std::size_t kk = o % k;
        o /= k;
        const std::size_t t = o % (gh * gw);
        const std::size_t bi = o / (gh * gw);
        const std::size_t ci = kk % 3;
        const std::size_t iy = (kk / 3) / p;
        const std::size_t ix = (kk / 3) % p;
        const std::size_t y = (t / gw) * p + iy;
        const std::size_t xx = (t % gw) * p + ix;
        return ((bi * 3 + ci) * h + y) * w + xx;
    };
    return movement_op(img, {b, gh * gw, k}, map);
}

// Region labels for the shifted-window mask: the 3x3 cut at H-window and
// H-shift in rolled coordinates. Pairs from different regions get -1e9.
inline std::vector<int> shift_region_labels(std::size_t len, std::size_t window, std::size_t shift) {
    std::vector<int> labels(len);
    for (std::size_t i = 0; i < len; ++i) {
        if (i < len - window) {
            labels[i] = 0;
        } else if (i < len - shift) {
            labels[i] = 1;
        } else {
            labels[i] = 2;
        }
    }
    return labels;
}

template <typename T>
Tensor<T> shifted_window_mask(std::size_t h, std::size_t w, std::size_t window, std::size_t shift) {
    const std::size_t nh = h / window, nw = w / window;
    const std::size_t n = window * window;
    Tensor<T> mask = Tensor<T>::zeros({nh * nw, n, n});
    if (shift == 0) return mask;
    if (shift != window / 2) {
        throw SpecError("shifted_window_mask: shift must be window/2 or 0");
    }
    const auto row_labels = shift_region_labels(h, window, shift);
    const auto col_labels = shift_region_labels(w, window, shift);
    auto region = [&](std::size_t y, std::size_t x) { return row_labels[y] * 3 + col_labels[x]; };
    T* pm = mask.data->data();
    for (std::size_t wy = 0; wy < nh; ++wy) {
        for (std::size_t wx = 0; wx < nw; ++wx) {
            const std::size_t win = wy * nw + wx;
            for (std::size_t i = 0; i < n; ++i) {
                const int ri = region(wy * window + i / window, wx * window + i % window);
                for (std::size_t j = 0; j < n; ++j) {
                    const int rj = region(wy * window + j / window, wx * window + j % window);
                    pm[(win * n + i) * n + j] = (ri == rj) ? T(0) : T(-1e9);
                }
            }
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResult {
    Tensor<T> logits;    // [B, num_classes]
    Tensor<T> features;  // [B, F] pre-head pooled vector
};

template <typename T>
class SwinModel {
public:
    SwinConfig config;

    explicit SwinModel(SwinConfig cfg) : config(std::move(cfg)) {
        config.validate();
        build();
    }

    // Truncated-normal projections, zero biases and bias tables, unit norms.
    // With this init, zeroing proj/fc2 weights makes every block an identity.
    void init_params(std::uint64_t seed) {
        Rng rng(seed);
        for (auto& [name, t] : params_) {
            const bool is_matrix = name.ends_with("weight") && t.rank() == 2;
            if (is_matrix) {
                for (T& v : *t.data) v = static_cast<T>(rng.truncated_normal(0.02));
            } else if (name.ends_with("gamma")) {
                std::fill(t.data->begin(), t.data->end(), T(1));
            } else {
                std::fill(t.data->begin(), t.data->end(), T(0));
            }
        }
    }

    Tensor<T>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw SpecError("swin: unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor<T>& param(const std::string& name) const {
        return const_cast<SwinModel*>(this)->param(name);
    }
    std::map<std::string, Tensor<T>>& params() { return params_; }
    const std::map<std::string, Tensor<T>>& params() const { return params_; }

    Tensor<T> patch_embed(const Tensor<T>& img) const {
        if (img.rank() != 4 || img.shape[1] != 3 || img.shape[2] != config.input_size ||
            img.shape[3] != config.input_size) {
            throw ShapeError("patch_embed: expected [B,3," + std::to_string(config.input_size) + "," +
                             std::to_string(config.input_size) + "], got " + shape_str(img.shape));
        }
        Tensor<T> patches = extract_patches(img, config.patch_size);
        Tensor<T> x = linear(patches, param("patch_embed.proj.weight"), param("patch_embed.proj.bias"));
        return layer_norm(x, param("patch_embed.norm.gamma"), param("patch_embed.norm.beta"), kEps);
    }

    // One W-MSA/SW-MSA + MLP block with pre-norm residuals.
    // x is [B, G, G, C]; block parity selects the shifted branch.
    Tensor<T> block(const Tensor<T>& x, std::size_t stage, std::size_t index) const {
        const std::string prefix =
            "stages." + std::to_string(stage) + ".blocks." + std::to_string(index) + ".";
        const std::size_t b = x.shape[0], g = x.shape[1], c = x.shape[3];
        const std::size_t w = config.window;
        const std::size_t shift = (index % 2 == 1) ? w / 2 : 0;
        const std::size_t n_heads = config.heads[stage];
        const std::size_t head_dim = c / n_heads;
        const std::size_t n = w * w;

        Tensor<T> t = layer_norm(x, param(prefix + "norm1.gamma"), param(prefix + "norm1.beta"), kEps);
        if (shift > 0) t = roll2d(t, shift, shift);
        Tensor<T> win = window_partition(t, w);  // [B*nW, N, C]
        const std::size_t bnw = win.shape[0];

        Tensor<T> qkv = linear(win, param(prefix + "attn.qkv.weight"), param(prefix + "attn.qkv.bias"));
        auto parts = chunk_last(qkv, 3);
        auto to_heads = [&](const Tensor<T>& m) {
            return permute(reshape(m, {bnw, n, n_heads, head_dim}), {0, 2, 1, 3});
        };
        Tensor<T> q = to_heads(parts[0]);
        Tensor<T> k = to_heads(parts[1]);
        Tensor<T> v = to_heads(parts[2]);

        Tensor<T> scores = scale(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(head_dim))));
        if (config.relative_bias) {
            Tensor<T> bias = gather_rows(param(prefix + "attn.bias_table"), relpos_index_);
            bias = reshape(permute(bias, {1, 0}), {n_heads, n, n});
            scores = add_suffix_broadcast(scores, bias);
        }
        if (shift > 0) {
            const Tensor<T>& mask = masks_.at(stage);  // [nW, heads, N, N]
            const std::size_t n_windows = mask.shape[0];
            scores = reshape(scores, {b, n_windows, n_heads, n, n});
            scores = add_suffix_broadcast(scores, mask);
            scores = reshape(scores, {bnw, n_heads, n, n});
        }
        Tensor<T> probs = softmax(scores, 3);
        Tensor<T> ctx = matmul(probs, v);                       // [B*nW, h, N, d]
        ctx = reshape(permute(ctx, {0, 2, 1, 3}), {bnw, n, c});  // heads concatenated
        Tensor<T> attn = linear(ctx, param(prefix + "attn.proj.weight"), param(prefix + "attn.proj.bias"));

        attn = window_reverse(attn, w, b, g, g);
        if (shift > 0) attn = roll2d(attn, g - shift, g - shift);
        Tensor<T> x1 = add(x, attn);

        Tensor<T> m = layer_norm(x1, param(prefix + "norm2.gamma"), param(prefix + "norm2.beta"), kEps);
        m = linear(m, param(prefix + "mlp.fc1.weight"), param(prefix + "mlp.fc1.bias"));
        m = gelu(m);
        m = linear(m, param(prefix + "mlp.fc2.weight"), param(prefix + "mlp.fc2.bias"));
        return add(x1, m);
    }

    // Concatenate 2x2 neighborhoods, norm, reduce 4C -> 2C.
    Tensor<T> patch_merging(const Tensor<T>& x, std::size_t stage) const {
        const std::size_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
        if (h % 2 != 0 || w % 2 != 0) {
            throw ShapeError("patch_merging: odd grid " + shape_str(x.shape));
        }
        const std::size_t oh = h / 2, ow = w / 2;
        // Quadrant order: (0,0), (1,0), (0,1), (1,1).
        auto map = [=](std::size_t o) {
            const std::size_t k = o % (4 * c);
            o /= 4 * c;
            const std::size_t xx = o % ow;
            o /= ow;
            const std::size_t y = o % oh;
            const std::size_t bi = o / oh;
            const std::size_t quadrant = k / c;
            const std::size_t ci = k % c;
            const std::size_t dy = quadrant & 1;
            const std::size_t dx = quadrant >> 1;
            return ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ci;
        };
        Tensor<T> cat = movement_op(x, {b, oh, ow, 4 * c}, map);
        const std::string prefix = "stages." + std::to_string(stage) + ".merge.";
        cat = layer_norm(cat, param(prefix + "norm.gamma"), param(prefix + "norm.beta"), kEps);
        return linear(cat, param(prefix + "reduce.weight"));
    }

    ForwardResult<T> forward(const Tensor<T>& img) const {
        Tensor<T> x = patch_embed(img);  // [B, L, C]
        const std::size_t b = img.shape[0];
        std::size_t grid = config.base_grid();
        x = reshape(x, {b, grid, grid, config.embed_dim});
        for (std::size_t s = 0; s < config.stages(); ++s) {
            for (std::size_t blk = 0; blk < config.depths[s]; ++blk) x = block(x, s, blk);
            if (s + 1 < config.stages()) {
                x = patch_merging(x, s);
                grid /= 2;
            }
        }
        const std::size_t f = config.feature_dim();
        x = reshape(x, {b, grid * grid, f});
        x = layer_norm(x, param("norm.gamma"), param("norm.beta"), kEps);
        Tensor<T> features = mean_axis(x, 1);  // [B, F]
        Tensor<T> logits = linear(features, param("head.weight"), param("head.bias"));
        return {logits, features};
    }

    static constexpr T kEps = T(1e-5);

private:
    std::map<std::string, Tensor<T>> params_;
    std::shared_ptr<std::vector<std::size_t>> relpos_index_;
    std::map<std::size_t, Tensor<T>> masks_;  // stage -> [nW, heads, N, N]

    void add_param(const std::string& name, std::vector<std::size_t> shape) {
        params_.emplace(name, Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true));
    }

    void build() {
        const std::size_t p = config.patch_size;
        const std::size_t c0 = config.embed_dim;
        add_param("patch_embed.proj.weight", {p * p * 3, c0});
        add_param("patch_embed.proj.bias", {c0});
        add_param("patch_embed.norm.gamma", {c0});
        add_param("patch_embed.norm.beta", {c0});
        const std::size_t w = config.window;
        const std::size_t table_rows = (2 * w - 1) * (2 * w - 1);
        for (std::size_t s = 0; s < config.stages(); ++s) {
            const std::size_t c = config.stage_dim(s);
            for (std::size_t blk = 0; blk < config.depths[s]; ++blk) {
                const std::string prefix =
                    "stages." + std::to_string(s) + ".blocks." + std::to_string(blk) + ".";
                add_param(prefix + "norm1.gamma", {c});
                add_param(prefix + "norm1.beta", {c});
                add_param(prefix + "attn.qkv.weight", {c, 3 * c});
                add_param(prefix + "attn.qkv.bias", {3 * c});
                add_param(prefix + "attn.proj.weight", {c, c});
                add_param(prefix + "attn.proj.bias", {c});
                if (config.relative_bias) {
                    add_param(prefix + "attn.bias_table", {table_rows, config.heads[s]});
                }
                add_param(prefix + "norm2.gamma", {c});
                add_param(prefix + "norm2.beta", {c});
                add_param(prefix + "mlp.fc1.weight", {c, config.mlp_ratio * c});
                add_param(prefix + "mlp.fc1.bias", {config.mlp_ratio * c});
                add_param(prefix + "mlp.fc2.weight", {config.mlp_ratio * c, c});
                add_param(prefix + "mlp.fc2.bias", {c});
            }
            if (s + 1 < config.stages()) {
                const std::string prefix = "stages." + std::to_string(s) + ".merge.";
                add_param(prefix + "norm.gamma", {4 * c});
                add_param(prefix + "norm.beta", {4 * c});
                add_param(prefix + "reduce.weight", {4 * c, 2 * c});
            }
        }
        add_param("norm.gamma", {config.feature_dim()});
        add_param("norm.beta", {config.feature_dim()});
        add_param("head.weight", {config.feature_dim(), config.num_classes});
        add_param("head.bias", {config.num_classes});

        // Relative offset (dy,dx) of every position pair, as bias table rows.
        const std::size_t n = w * w;
        relpos_index_ = std::make_shared<std::vector<std::size_t>>(n * n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i / w);
            const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i % w);
            for (std::size_t j = 0; j < n; ++j) {
                const std::ptrdiff_t dy = yi - static_cast<std::ptrdiff_t>(j / w) + (w - 1);
                const std::ptrdiff_t dx = xi - static_cast<std::ptrdiff_t>(j % w) + (w - 1);
                (*relpos_index_)[i * n + j] = static_cast<std::size_t>(dy) * (2 * w - 1) + dx;
            }
        }

        // Per-stage shifted-window masks, expanded across heads.
        for (std::size_t s = 0; s < config.stages(); ++s) {
            bool has_shifted = false;
            for (std::size_t blk = 0; blk < config.depths[s]; ++blk) {
                if (blk % 2 == 1) has_shifted = true;
            }
            if (!has_shifted) continue;
            const std::size_t grid = config.stage_grid(s);
            Tensor<T> base = shifted_window_mask<T>(grid, grid, w, w / 2);  // [nW, N, N]
            const std::size_t n_windows = base.shape[0];
            const std::size_t hcount = config.heads[s];
            Tensor<T> expanded = Tensor<T>::zeros({n_windows, hcount, n, n});
            for (std::size_t wi = 0; wi < n_windows; ++wi) {
                for (std::size_t hh = 0; hh < hcount; ++hh) {
                    std::copy(base.data->begin() + wi * n * n, base.data->begin() + (wi + 1) * n * n,
                              expanded.data->begin() + (wi * hcount + hh) * n * n);
                }
            }
            masks_.emplace(s, std::move(expanded));
        }
    }
};

// ---------------------------------------------------------------------------
// Persistence: weight container with the config as JSON metadata.
// ---------------------------------------------------------------------------

template <typename T>
void save_model(const SwinModel<T>& model, const std::string& path) {
    WeightFile wf;
    wf.meta = model.config.to_json().dump();
    for (const auto& [name, tensor] : model.params()) wf.entries[name] = to_entry(tensor);
    save_weights(path, wf);
}

template <typename T>
SwinModel<T> load_model(const std::string& path) {
    WeightFile wf = load_weights(path);
    SwinConfig cfg;
    try {
        cfg = SwinConfig::from_json(nlohmann::json::parse(wf.meta));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model file: bad config metadata in " + path + ": " + e.what());
    }
    SwinModel<T> model(cfg);
    for (auto& [name, tensor] : model.params()) {
        auto it = wf.entries.find(name);
        if (it == wf.entries.end()) {
            throw DataError("model file: missing parameter '" + name + "' in " + path);
        }
        load_into(it->second, tensor, name);
    }
    if (wf.entries.size() != model.params().size()) {
        throw DataError("model file: extra parameters in " + path);
    }
    return model;
}

}  // namespace cgdetect

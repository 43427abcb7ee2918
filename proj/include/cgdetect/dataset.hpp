#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cgdetect/colorspace.hpp"
#include "cgdetect/common.hpp"
#include "cgdetect/image_io.hpp"
#include "cgdetect/tensor.hpp"

namespace cgdetect {

// CGI is the positive class throughout; class index 1 in the model head.
enum class Label { REAL = 0, CGI = 1 };

inline std::string to_string(Label l) { return l == Label::CGI ? "cgi" : "real"; }
inline int class_index(Label l) { return static_cast<int>(l); }

struct ManifestRecord {
    std::string path;            // file path; augmented records append "#aug=<op>:<seed>"
    Label label = Label::REAL;
    std::string source;          // dataset identifier (d1/d2/d3/custom)
    std::string augmented_from;  // parent path for augmented records, else empty
};

using Manifest = std::vector<ManifestRecord>;

struct ScanReport {
    std::size_t accepted = 0;
    std::vector<std::string> corrupt;  // excluded, mirroring upstream salvage behavior
};

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    bool stratified = true;  // always true; kept for config visibility
};

// ---------------------------------------------------------------------------
// Augmentations: label-preserving geometric transforms only. Color jitter is
// deliberately absent because color statistics are the signal under study.
// ---------------------------------------------------------------------------

enum class AugOp { HFlip, VFlip, Rot90, Rot180, Rot270, CropResize };

inline constexpr AugOp kAugMenu[] = {AugOp::HFlip, AugOp::VFlip, AugOp::Rot90,
                                     AugOp::Rot180, AugOp::Rot270, AugOp::CropResize};

inline std::string to_string(AugOp op) {
    switch (op) {
        case AugOp::HFlip: return "hflip";
        case AugOp::VFlip: return "vflip";
        case AugOp::Rot90: return "rot90";
        case AugOp::Rot180: return "rot180";
        case AugOp::Rot270: return "rot270";
        case AugOp::CropResize: return "crop";
    }
    return "?";
}

inline AugOp aug_from_string(const std::string& s) {
    for (AugOp op : kAugMenu) {
        if (to_string(op) == s) return op;
    }
    throw DataError("unknown augmentation op '" + s + "'");
}

// Crop a centered-at-offset window of `scale` times the image and resize back.
inline ImageTensor crop_resize(const ImageTensor& img, double scale, double fx, double fy) {
    if (scale >= 1.0) return img;
    const std::size_t ch = std::max<std::size_t>(1, static_cast<std::size_t>(img.height * scale));
    const std::size_t cw = std::max<std::size_t>(1, static_cast<std::size_t>(img.width * scale));
    const std::size_t oy = static_cast<std::size_t>((img.height - ch) * fy);
    const std::size_t ox = static_cast<std::size_t>((img.width - cw) * fx);
    ImageTensor crop;
    crop.height = ch;
    crop.width = cw;
    crop.space = img.space;
    crop.values.resize(ch * cw * 3);
    for (std::size_t y = 0; y < ch; ++y) {
        for (std::size_t x = 0; x < cw; ++x) {
            for (std::size_t c = 0; c < 3; ++c) crop.at(y, x, c) = img.at(oy + y, ox + x, c);
        }
    }
    return resize_bilinear(crop, img.height, img.width);
}

inline ImageTensor augment(const ImageTensor& img, AugOp op, std::uint64_t seed) {
    const std::size_t h = img.height, w = img.width;
    ImageTensor out;
    out.space = img.space;
    auto alloc = [&](std::size_t oh, std::size_t ow) {
        out.height = oh;
        out.width = ow;
        out.values.resize(oh * ow * 3);
    };
    switch (op) {
        case AugOp::HFlip:
            alloc(h, w);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, w - 1 - x, c);
            return out;
        case AugOp::VFlip:
            alloc(h, w);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(h - 1 - y, x, c);
            return out;
        case AugOp::Rot90:  // quarter turn clockwise
            alloc(w, h);
            for (std::size_t y = 0; y < w; ++y)
                for (std::size_t x = 0; x < h; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(h - 1 - x, y, c);
            return out;
        case AugOp::Rot180:
            alloc(h, w);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(h - 1 - y, w - 1 - x, c);
            return out;
        case AugOp::Rot270: {
            alloc(w, h);
            for (std::size_t y = 0; y < w; ++y)
                for (std::size_t x = 0; x < h; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(x, w - 1 - y, c);
            return out;
        }
        case AugOp::CropResize: {
            Rng rng(seed);
            const double scale = rng.uniform(0.8, 1.0);
            const double fx = rng.next_double();
            const double fy = rng.next_double();
            return crop_resize(img, scale, fx, fy);
        }
    }
    throw SpecError("augment: invalid op");
}

// Virtual paths let augmented records reuse the 4-column manifest schema.
struct RecordSource {
    std::string file;
    std::optional<std::pair<AugOp, std::uint64_t>> aug;
};

inline RecordSource parse_record_path(const std::string& path) {
    const auto pos = path.find("#aug=");
    if (pos == std::string::npos) return {path, std::nullopt};
    const std::string spec = path.substr(pos + 5);
    const auto colon = spec.find(':');
    if (colon == std::string::npos) throw DataError("malformed augmented path: " + path);
    return {path.substr(0, pos),
            std::make_pair(aug_from_string(spec.substr(0, colon)),
                           static_cast<std::uint64_t>(std::stoull(spec.substr(colon + 1))))};
}

inline ImageTensor load_record_image(const ManifestRecord& rec) {
    const RecordSource src = parse_record_path(rec.path);
    ImageTensor img = decode_image(src.file);
    if (src.aug) img = augment(img, src.aug->first, src.aug->second);
    return img;
}

// ---------------------------------------------------------------------------
// Corpus operations
// ---------------------------------------------------------------------------

// Expects <root>/<class>/... with class in {cgi, real} (case-insensitive).
// Every file is decode-verified; failures are excluded and reported.
inline std::pair<Manifest, ScanReport> scan_directory(const std::string& root,
                                                      const std::string& source_id) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("scan: not a directory: " + root);
    std::map<Label, fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        std::string n = entry.path().filename().string();
        std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
        if (n == "cgi") class_dirs[Label::CGI] = entry.path();
        if (n == "real") class_dirs[Label::REAL] = entry.path();
    }
    for (Label l : {Label::CGI, Label::REAL}) {
        if (!class_dirs.count(l)) {
            throw DataError("scan: missing class directory '" + to_string(l) + "' under " + root);
        }
    }
    Manifest manifest;
    ScanReport report;
    for (Label l : {Label::CGI, Label::REAL}) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[l])) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                decode_image(f.string());
            } catch (const DataError&) {
                report.corrupt.push_back(f.string());
                continue;
            }
            manifest.push_back({f.string(), l, source_id, ""});
            ++report.accepted;
        }
    }
    return {manifest, report};
}

// Deterministic stratified split; per-class train count = floor(fraction * n).
inline std::pair<Manifest, Manifest> split(const Manifest& manifest, const SplitSpec& spec) {
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
        throw SpecError("split: train_fraction must lie in (0,1)");
    }
    Manifest train, val;
    int class_id = 0;
    for (Label l : {Label::CGI, Label::REAL}) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < manifest.size(); ++i) {
            if (manifest[i].label == l) idx.push_back(i);
        }
        if (idx.size() < 2) {
            throw DataError("split: class '" + to_string(l) + "' has " + std::to_string(idx.size()) +
                            " records; need at least 2");
        }
        Rng rng = Rng(spec.seed).fork(static_cast<std::uint64_t>(class_id++));
        rng.shuffle(idx);
        const std::size_t n_train = static_cast<std::size_t>(spec.train_fraction * idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < n_train ? train : val).push_back(manifest[idx[i]]);
        }
    }
    return {train, val};
}

// Oversamples each class to exactly `target` records by augmenting originals.
// Parents cycle in seeded-shuffled order and ops round-robin, so no
// (parent, op, seed) triple repeats.
inline Manifest balance(const Manifest& manifest, std::size_t target, std::uint64_t seed) {
    Manifest out = manifest;
    int class_id = 0;
    for (Label l : {Label::CGI, Label::REAL}) {
        std::vector<const ManifestRecord*> originals;
        std::size_t count = 0;
        for (const auto& r : manifest) {
            if (r.label != l) continue;
            ++count;
            if (r.augmented_from.empty()) originals.push_back(&r);
        }
        if (count == 0) throw DataError("balance: class '" + to_string(l) + "' is empty");
        if (count > target) {
            throw SpecError("balance: class '" + to_string(l) + "' has " + std::to_string(count) +
                            " records, above target " + std::to_string(target));
        }
        if (count == target) {
            ++class_id;
            continue;
        }
        if (originals.empty()) throw DataError("balance: class '" + to_string(l) + "' has no originals");
        Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(100 + class_id));
        rng.shuffle(originals);
        const std::size_t menu_size = std::size(kAugMenu);
        const std::size_t deficit = target - count;
        for (std::size_t k = 0; k < deficit; ++k) {
            const ManifestRecord& parent = *originals[k % originals.size()];
            const AugOp op = kAugMenu[(k / originals.size()) % menu_size];
            std::uint64_t sm = seed ^ (0x51ed270b4d2f5a7bull + k);
            const std::uint64_t rec_seed = splitmix64(sm);
            ManifestRecord rec;
            rec.path = parent.path + "#aug=" + to_string(op) + ":" + std::to_string(rec_seed);
            rec.label = l;
            rec.source = parent.source;
            rec.augmented_from = parent.path;
            out.push_back(std::move(rec));
        }
        ++class_id;
    }
    return out;
}

// Combines several corpora to exactly `cap` records per class. Allocation is
// equal-share with redistribution: small sources are exhausted and their
// shortfall spreads over the rest.
inline Manifest combine(const std::vector<Manifest>& manifests, std::size_t cap, std::uint64_t seed) {
    Manifest out;
    for (Label l : {Label::CGI, Label::REAL}) {
        struct SourcePool {
            std::size_t manifest_index;
            std::vector<std::size_t> records;
        };
        std::vector<SourcePool> pools;
        std::size_t total = 0;
        for (std::size_t m = 0; m < manifests.size(); ++m) {
            SourcePool pool{m, {}};
            for (std::size_t i = 0; i < manifests[m].size(); ++i) {
                if (manifests[m][i].label == l) pool.records.push_back(i);
            }
            total += pool.records.size();
            pools.push_back(std::move(pool));
        }
        if (total < cap) {
            throw DataError("combine: class '" + to_string(l) + "' has only " + std::to_string(total) +
                            " records across sources; cap " + std::to_string(cap) + " unreachable");
        }
        // Exhaust any source at or below the current equal share.
        std::vector<std::size_t> take(pools.size(), 0);
        std::vector<std::size_t> open;
        for (std::size_t i = 0; i < pools.size(); ++i) open.push_back(i);
        std::size_t remaining = cap;
        bool changed = true;
        while (changed && !open.empty()) {
            changed = false;
            const std::size_t share = remaining / open.size();
            std::vector<std::size_t> still_open;
            for (std::size_t i : open) {
                if (pools[i].records.size() <= share) {
                    take[i] = pools[i].records.size();
                    remaining -= take[i];
                    changed = true;
                } else {
                    still_open.push_back(i);
                }
            }
            open = std::move(still_open);
        }
        if (!open.empty()) {
            const std::size_t base = remaining / open.size();
            std::size_t extra = remaining % open.size();
            for (std::size_t i : open) {
                take[i] = base + (extra > 0 ? 1 : 0);
                if (extra > 0) --extra;
            }
        }
        for (std::size_t i = 0; i < pools.size(); ++i) {
            Rng rng = Rng(seed).fork(1000 + i * 2 + (l == Label::CGI ? 0 : 1));
            rng.shuffle(pools[i].records);
            for (std::size_t k = 0; k < take[i]; ++k) {
                out.push_back(manifests[pools[i].manifest_index][pools[i].records[k]]);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest CSV
// ---------------------------------------------------------------------------

inline void save_manifest(const Manifest& manifest, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("manifest: cannot write " + path);
    os << "path,label,source,augmented_from\n";
    for (const auto& r : manifest) {
        os << r.path << ',' << to_string(r.label) << ',' << r.source << ',' << r.augmented_from << '\n';
    }
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("manifest: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "path,label,source,augmented_from") {
        throw DataError("manifest: bad header in " + path);
    }
    Manifest manifest;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::array<std::string, 4> cols;
        std::size_t start = 0;
        for (int c = 0; c < 3; ++c) {
            const auto comma = line.find(',', start);
            if (comma == std::string::npos) throw DataError("manifest: malformed row in " + path);
            cols[c] = line.substr(start, comma - start);
            start = comma + 1;
        }
        cols[3] = line.substr(start);
        ManifestRecord rec;
        rec.path = cols[0];
        rec.label = cols[1] == "cgi" ? Label::CGI : Label::REAL;
        rec.source = cols[2];
        rec.augmented_from = cols[3];
        manifest.push_back(std::move(rec));
    }
    return manifest;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct Batch {
    Tensor<float> images;        // [B,3,S,S]
    std::vector<int> labels;     // class indices, CGI = 1
    std::vector<std::string> skipped;  // records that failed to decode
};

// Seeded, epoch-reshuffled batch planner/loader. Batch order depends only on
// (seed, epoch); decoding may fan out over worker threads without affecting it.
class BatchStream {
public:
    BatchStream(Manifest manifest, std::size_t batch_size, std::uint64_t seed, ColorSpace space,
                std::size_t input_size)
        : manifest_(std::move(manifest)),
          batch_size_(batch_size),
          seed_(seed),
          space_(space),
          input_(input_size) {
        if (batch_size_ < 1) throw SpecError("batches: batch_size must be >= 1");
    }

    std::vector<std::vector<std::size_t>> plan_epoch(std::uint64_t epoch) const {
        std::vector<std::size_t> idx(manifest_.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng = Rng(seed_).fork(epoch);
        rng.shuffle(idx);
        std::vector<std::vector<std::size_t>> plan;
        for (std::size_t start = 0; start < idx.size(); start += batch_size_) {
            const std::size_t end = std::min(idx.size(), start + batch_size_);
            plan.emplace_back(idx.begin() + start, idx.begin() + end);
        }
        return plan;
    }

    Batch load(const std::vector<std::size_t>& indices) const {
        Batch batch;
        std::vector<std::optional<Tensor<float>>> slots(indices.size());
        parallel_for(indices.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                try {
                    ImageTensor img = load_record_image(manifest_[indices[i]]);
                    img = resize_bilinear(img, input_, input_);
                    img = convert_space(img, space_);
                    slots[i] = normalize<float>(img, kNormMean, kNormStd);
                } catch (const DataError&) {
                    slots[i] = std::nullopt;
                }
            }
        }, 1);
        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (slots[i]) {
                kept.push_back(i);
            } else {
                batch.skipped.push_back(manifest_[indices[i]].path);
            }
        }
        batch.images = Tensor<float>::zeros({kept.size(), 3, input_, input_});
        const std::size_t stride = 3 * input_ * input_;
        for (std::size_t k = 0; k < kept.size(); ++k) {
            const auto& src = *slots[kept[k]]->data;
            std::copy(src.begin(), src.end(), batch.images.data->begin() + k * stride);
            batch.labels.push_back(class_index(manifest_[indices[kept[k]]].label));
        }
        return batch;
    }

    const Manifest& manifest() const { return manifest_; }
    std::size_t input_size() const { return input_; }
    ColorSpace space() const { return space_; }

private:
    Manifest manifest_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    ColorSpace space_;
    std::size_t input_;
};

}  // namespace cgdetect

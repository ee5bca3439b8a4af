#pragma once

// Synthetic datasets, ingestion, splitting, augmentation, batching.
//
// synth_classification: two balanced classes. Class 0 is a textured elliptic
// blob on a smooth noisy background, class 1 is whole-image texture. The
// texture frequency ranges overlap and blobs may grow close to full coverage,
// so the classes are not perfectly separable.
//
// synth_segmentation: 1-3 bright textured ellipses on a darker noisy
// background with exact masks. Every fourth sample additionally contains a
// tiny region (~2% of the image area or less).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "kdml/image_io.hpp"
#include "kdml/rng.hpp"
#include "kdml/tensor.hpp"

namespace kdml::data {

enum class SplitTag { none, train, val, test };

inline const char* to_string(SplitTag s) {
    switch (s) {
        case SplitTag::train: return "train";
        case SplitTag::val: return "val";
        case SplitTag::test: return "test";
        default: return "none";
    }
}

struct Sample {
    std::vector<float> image;  // [C,H,W], values in [0,1]
    int label = -1;            // classification only
    std::vector<float> mask;   // [1,H,W], binary, segmentation only
};

struct Dataset {
    Task task = Task::classification;
    int n_classes = 2;
    Shape in_shape;  // per-sample [C,H,W]
    std::vector<Sample> samples;
    std::vector<SplitTag> splits;  // parallel to samples
};

namespace detail {

struct Ellipse {
    float cx, cy, a, b, theta;

    bool contains(float x, float y) const {
        const float dx = x - cx, dy = y - cy;
        const float c = std::cos(theta), s = std::sin(theta);
        const float u = dx * c + dy * s, v = -dx * s + dy * c;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0f;
    }
};

inline float texture(float x, float y, float freq, float angle, float phase, int res) {
    const float t = (x * std::cos(angle) + y * std::sin(angle)) / static_cast<float>(res);
    return std::sin(2.0f * std::numbers::pi_v<float> * freq * t + phase);
}

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

}  // namespace detail

inline Dataset synth_classification(int n, int resolution, uint64_t seed) {
    if (n < 2 || resolution < 8)
        throw contract_error("synth_classification: need n >= 2 and resolution >= 8");
    Dataset ds;
    ds.task = Task::classification;
    ds.n_classes = 2;
    ds.in_shape = {1, resolution, resolution};
    ds.splits.assign(n, SplitTag::none);
    Rng rng(derive_seed(seed, "synth_classification"));
    const int res = resolution;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.label = i % 2;
        s.image.resize(static_cast<size_t>(res) * res);
        const float base = rng.uniform(0.35f, 0.5f);
        const float amp = rng.uniform(0.25f, 0.35f);
        const float angle = rng.uniform(0.0f, std::numbers::pi_v<float>);
        const float phase = rng.uniform(0.0f, 2.0f * std::numbers::pi_v<float>);
        // Overlapping frequency ranges keep the Bayes accuracy under 100%.
        const float freq = s.label == 0 ? rng.uniform(1.5f, 3.2f) : rng.uniform(2.8f, 5.0f);
        detail::Ellipse blob{rng.uniform(0.3f, 0.7f) * res, rng.uniform(0.3f, 0.7f) * res,
                             rng.uniform(0.25f, 0.48f) * res, rng.uniform(0.25f, 0.48f) * res,
                             rng.uniform(0.0f, std::numbers::pi_v<float>)};
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                const float fx = x + 0.5f, fy = y + 0.5f;
                float v = base;
                const bool textured = s.label == 1 || blob.contains(fx, fy);
                if (textured) v += amp * detail::texture(fx, fy, freq, angle, phase, res);
                v += rng.normal(0.0f, 0.06f);
                s.image[static_cast<size_t>(y) * res + x] = detail::clamp01(v);
            }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline Dataset synth_segmentation(int n, int resolution, uint64_t seed) {
    if (n < 1 || resolution < 8)
        throw contract_error("synth_segmentation: need n >= 1 and resolution >= 8");
    Dataset ds;
    ds.task = Task::segmentation;
    ds.n_classes = 2;
    ds.in_shape = {1, resolution, resolution};
    ds.splits.assign(n, SplitTag::none);
    Rng rng(derive_seed(seed, "synth_segmentation"));
    const int res = resolution;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.image.resize(static_cast<size_t>(res) * res);
        s.mask.assign(static_cast<size_t>(res) * res, 0.0f);
        const bool with_tiny = i % 4 == 0;
        const int n_regions = rng.uniform_int(1, 3);
        std::vector<detail::Ellipse> regions;
        for (int r = 0; r < n_regions; ++r) {
            const bool tiny = with_tiny && r == 0;
            const float a = tiny ? rng.uniform(0.035f, 0.075f) * res : rng.uniform(0.1f, 0.28f) * res;
            const float b = tiny ? rng.uniform(0.035f, 0.075f) * res : rng.uniform(0.1f, 0.28f) * res;
            regions.push_back({rng.uniform(0.15f, 0.85f) * res, rng.uniform(0.15f, 0.85f) * res,
                               a, b, rng.uniform(0.0f, std::numbers::pi_v<float>)});
        }
        const float bg = rng.uniform(0.2f, 0.45f);
        const float fg = rng.uniform(0.42f, 0.7f);
        const float amp = rng.uniform(0.05f, 0.1f);
        const float angle = rng.uniform(0.0f, std::numbers::pi_v<float>);
        const float phase = rng.uniform(0.0f, 2.0f * std::numbers::pi_v<float>);
        const float freq = rng.uniform(2.0f, 5.0f);
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                const float fx = x + 0.5f, fy = y + 0.5f;
                bool inside = false;
                for (const auto& e : regions)
                    if (e.contains(fx, fy)) { inside = true; break; }
                float v = inside ? fg + amp * detail::texture(fx, fy, freq, angle, phase, res) : bg;
                v += rng.normal(0.0f, 0.07f);
                const size_t at = static_cast<size_t>(y) * res + x;
                s.image[at] = detail::clamp01(v);
                if (inside) s.mask[at] = 1.0f;
            }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// 75:10:15 split, stratified by class for classification. Tags are written
// into ds.splits.
inline void split(Dataset& ds, uint64_t seed) {
    const int n = static_cast<int>(ds.samples.size());
    std::vector<std::vector<int>> groups;
    if (ds.task == Task::classification) {
        groups.resize(ds.n_classes);
        for (int i = 0; i < n; ++i) groups[ds.samples[i].label].push_back(i);
    } else {
        groups.resize(1);
        for (int i = 0; i < n; ++i) groups[0].push_back(i);
    }
    Rng rng(derive_seed(seed, "split"));
    for (auto& g : groups) {
        for (size_t i = g.size(); i > 1; --i)
            std::swap(g[i - 1], g[rng.uniform_int(0, static_cast<int>(i) - 1)]);
        const int m = static_cast<int>(g.size());
        const int n_train = static_cast<int>(std::lround(m * 0.75));
        const int n_val = static_cast<int>(std::lround(m * 0.10));
        for (int i = 0; i < m; ++i)
            ds.splits[g[i]] = i < n_train              ? SplitTag::train
                              : i < n_train + n_val    ? SplitTag::val
                                                       : SplitTag::test;
    }
}

inline std::vector<int> indices_of(const Dataset& ds, SplitTag tag) {
    std::vector<int> idx;
    for (size_t i = 0; i < ds.splits.size(); ++i)
        if (ds.splits[i] == tag) idx.push_back(static_cast<int>(i));
    return idx;
}

template <class T>
struct BatchT {
    Task task = Task::classification;
    TensorPtrT<T> x;             // [B,C,H,W]
    TensorPtrT<T> y;             // one-hot [B,K] or mask [B,1,H,W]
    std::vector<int> labels;     // classification ground truth
};

template <class T>
BatchT<T> make_batch(const Dataset& ds, const std::vector<int>& indices) {
    if (indices.empty()) throw contract_error("make_batch: empty index list");
    const int B = static_cast<int>(indices.size());
    const int C = ds.in_shape[0], H = ds.in_shape[1], W = ds.in_shape[2];
    BatchT<T> batch;
    batch.task = ds.task;
    std::vector<T> xv(static_cast<size_t>(B) * C * H * W);
    const size_t stride = static_cast<size_t>(C) * H * W;
    for (int b = 0; b < B; ++b) {
        const auto& s = ds.samples.at(indices[b]);
        std::copy(s.image.begin(), s.image.end(), xv.begin() + b * stride);
    }
    batch.x = make_tensor<T>({B, C, H, W}, std::move(xv), false);
    if (ds.task == Task::classification) {
        std::vector<T> yv(static_cast<size_t>(B) * ds.n_classes, T(0));
        for (int b = 0; b < B; ++b) {
            const int label = ds.samples[indices[b]].label;
            yv[static_cast<size_t>(b) * ds.n_classes + label] = T(1);
            batch.labels.push_back(label);
        }
        batch.y = make_tensor<T>({B, ds.n_classes}, std::move(yv), false);
    } else {
        std::vector<T> yv(static_cast<size_t>(B) * H * W);
        for (int b = 0; b < B; ++b) {
            const auto& m = ds.samples[indices[b]].mask;
            std::copy(m.begin(), m.end(), yv.begin() + static_cast<size_t>(b) * H * W);
        }
        batch.y = make_tensor<T>({B, 1, H, W}, std::move(yv), false);
    }
    return batch;
}

namespace detail {

template <class T>
void hflip_plane(T* p, int h, int w) {
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) std::swap(p[y * w + x], p[y * w + (w - 1 - x)]);
}

template <class T>
void vflip_plane(T* p, int h, int w) {
    for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < w; ++x) std::swap(p[y * w + x], p[(h - 1 - y) * w + x]);
}

template <class T>
void rot90_plane(T* p, int h) {  // square plane, counterclockwise quarter turn
    std::vector<T> tmp(p, p + static_cast<size_t>(h) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < h; ++x) p[y * h + x] = tmp[x * h + (h - 1 - y)];
}

}  // namespace detail

// Per-sample horizontal flip (p=0.5), vertical flip (p=0.5) and a 90-degree
// rotation (p=0.25, square images only). Masks receive the same transform as
// their image. Inputs are left untouched.
template <class T>
BatchT<T> augment(const BatchT<T>& batch, uint64_t seed) {
    const auto& xs = batch.x->shape;
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    BatchT<T> out;
    out.task = batch.task;
    out.labels = batch.labels;
    out.x = make_tensor<T>(xs, batch.x->data, false);
    out.y = make_tensor<T>(batch.y->shape, batch.y->data, false);
    Rng rng(derive_seed(seed, "augment"));
    const size_t plane = static_cast<size_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        const bool hf = rng.bernoulli(0.5f);
        const bool vf = rng.bernoulli(0.5f);
        const bool rot = rng.bernoulli(0.25f) && H == W;
        auto apply = [&](T* base, int channels) {
            for (int c = 0; c < channels; ++c) {
                T* p = base + c * plane;
                if (hf) detail::hflip_plane(p, H, W);
                if (vf) detail::vflip_plane(p, H, W);
                if (rot) detail::rot90_plane(p, H);
            }
        };
        apply(out.x->data.data() + (static_cast<size_t>(b) * C) * plane, C);
        if (batch.task == Task::segmentation)
            apply(out.y->data.data() + static_cast<size_t>(b) * plane, 1);
    }
    return out;
}

// Shuffled index batches for one epoch; a short final batch is kept.
inline std::vector<std::vector<int>> epoch_batches(std::vector<int> indices, int batch_size,
                                                   Rng& rng) {
    if (batch_size < 1) throw contract_error("epoch_batches: batch_size must be >= 1");
    for (size_t i = indices.size(); i > 1; --i)
        std::swap(indices[i - 1], indices[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    std::vector<std::vector<int>> batches;
    for (size_t at = 0; at < indices.size(); at += batch_size) {
        const size_t end = std::min(indices.size(), at + batch_size);
        batches.emplace_back(indices.begin() + at, indices.begin() + end);
    }
    return batches;
}

namespace detail {

inline uint8_t to_u8(float v) {
    return static_cast<uint8_t>(std::lround(clamp01(v) * 255.0f));
}

}  // namespace detail

// Writes every sample as PGM plus an index file ("image target split" lines);
// masks go to sibling files, labels inline.
inline void export_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const int H = ds.in_shape[1], W = ds.in_shape[2];
    if (ds.in_shape[0] != 1)
        throw contract_error("export_dataset: only single-channel datasets are exported");
    std::vector<IndexEntry> entries;
    char buf[64];
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        std::snprintf(buf, sizeof buf, "img_%05zu.pgm", i);
        std::string img_name = buf;
        ImageU8 img{W, H, 1, {}};
        img.pixels.resize(static_cast<size_t>(H) * W);
        for (size_t p = 0; p < img.pixels.size(); ++p) img.pixels[p] = detail::to_u8(s.image[p]);
        write_pnm((fs::path(dir) / img_name).string(), img);
        IndexEntry e;
        e.image = img_name;
        if (ds.task == Task::classification) {
            e.target = std::to_string(s.label);
        } else {
            std::snprintf(buf, sizeof buf, "msk_%05zu.pgm", i);
            e.target = buf;
            ImageU8 msk{W, H, 1, {}};
            msk.pixels.resize(static_cast<size_t>(H) * W);
            for (size_t p = 0; p < msk.pixels.size(); ++p)
                msk.pixels[p] = s.mask[p] >= 0.5f ? 255 : 0;
            write_pnm((fs::path(dir) / e.target).string(), msk);
        }
        e.split = to_string(ds.splits.at(i) == SplitTag::none ? SplitTag::train : ds.splits[i]);
        entries.push_back(std::move(e));
    }
    write_index((fs::path(dir) / "index.txt").string(), entries);
}

inline Dataset load_dataset(const std::string& index_path) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(index_path).parent_path();
    const auto entries = read_index(index_path);
    if (entries.empty()) throw error("load_dataset: index is empty");
    Dataset ds;
    const bool is_mask = entries.front().target.find('.') != std::string::npos;
    ds.task = is_mask ? Task::segmentation : Task::classification;
    int max_label = 1;
    for (const auto& e : entries) {
        ImageU8 img = read_pnm((base / e.image).string());
        Sample s;
        s.image.resize(static_cast<size_t>(img.width) * img.height * img.channels);
        // interleaved bytes -> planar floats
        for (int c = 0; c < img.channels; ++c)
            for (int p = 0; p < img.width * img.height; ++p)
                s.image[static_cast<size_t>(c) * img.width * img.height + p] =
                    img.pixels[static_cast<size_t>(p) * img.channels + c] / 255.0f;
        Shape shape{img.channels, img.height, img.width};
        if (ds.in_shape.empty())
            ds.in_shape = shape;
        else if (ds.in_shape != shape)
            throw shape_error("load_dataset: " + e.image + " has shape " + shape_str(shape) +
                              ", expected " + shape_str(ds.in_shape));
        if (ds.task == Task::classification) {
            s.label = std::stoi(e.target);
            if (s.label < 0) throw error("load_dataset: negative label for " + e.image);
            max_label = std::max(max_label, s.label);
        } else {
            ImageU8 msk = read_pnm((base / e.target).string());
            if (msk.channels != 1 || msk.width != img.width || msk.height != img.height)
                throw shape_error("load_dataset: mask " + e.target + " does not match its image");
            s.mask.resize(static_cast<size_t>(msk.width) * msk.height);
            for (size_t p = 0; p < s.mask.size(); ++p) s.mask[p] = msk.pixels[p] >= 128 ? 1.0f : 0.0f;
        }
        ds.samples.push_back(std::move(s));
        ds.splits.push_back(e.split == "train"  ? SplitTag::train
                            : e.split == "val"  ? SplitTag::val
                                                : SplitTag::test);
    }
    ds.n_classes = ds.task == Task::classification ? max_label + 1 : 2;
    if (ds.task == Task::classification && ds.n_classes < 2) ds.n_classes = 2;
    return ds;
}

}  // namespace kdml::data

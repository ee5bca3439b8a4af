#pragma once

// Ensembling and evaluation metrics. The classification ensemble takes the
// per-class elementwise max over students and argmaxes it (no
// renormalization); the segmentation ensemble is the union of thresholded
// student masks. Empty-vs-empty comparisons score 1.0.

#include <string>
#include <vector>

#include "kdml/losses.hpp"

namespace kdml::metrics {

inline constexpr double kMaskThreshold = 0.5;

// Per-sample argmax of the elementwise max over student probability vectors;
// ties resolve to the lowest class index.
template <class T>
std::vector<int> ensemble_classify(const std::vector<losses::ProbVectorT<T>>& students) {
    if (students.empty()) throw contract_error("ensemble_classify: no students");
    const auto& shape = students.front().probs->shape;
    if (shape.size() != 2) throw shape_error("ensemble_classify: expected [B,K] probabilities");
    for (const auto& s : students)
        if (s.probs->shape != shape)
            throw shape_error("ensemble_classify: students disagree on prediction shape");
    const int B = shape[0], K = shape[1];
    std::vector<int> out(B);
    for (int b = 0; b < B; ++b) {
        int best = 0;
        double best_p = -1.0;
        for (int k = 0; k < K; ++k) {
            double p = 0.0;
            for (const auto& s : students)
                p = std::max(p, static_cast<double>(s.probs->data[b * K + k]));
            if (p > best_p) {
                best_p = p;
                best = k;
            }
        }
        out[b] = best;
    }
    return out;
}

template <class T>
TensorPtrT<T> threshold_mask(const TensorPtrT<T>& map, double threshold = kMaskThreshold) {
    std::vector<T> v(map->numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = map->data[i] >= threshold ? T(1) : T(0);
    return make_tensor<T>(map->shape, std::move(v), false);
}

// Pixelwise OR of the thresholded student maps.
template <class T>
TensorPtrT<T> ensemble_mask(const std::vector<TensorPtrT<T>>& maps,
                            double threshold = kMaskThreshold) {
    if (maps.empty()) throw contract_error("ensemble_mask: no students");
    for (const auto& m : maps)
        if (m->shape != maps.front()->shape)
            throw shape_error("ensemble_mask: students disagree on map shape");
    std::vector<T> v(maps.front()->numel(), T(0));
    for (const auto& m : maps)
        for (size_t i = 0; i < v.size(); ++i)
            if (m->data[i] >= threshold) v[i] = T(1);
    return make_tensor<T>(maps.front()->shape, std::move(v), false);
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw contract_error("accuracy: prediction/truth size mismatch");
    size_t correct = 0;
    for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

struct SegScore {
    double iou = 0.0;
    double fscore = 0.0;
    double recall = 0.0;
};

namespace detail {

struct PixelCounts {
    long inter = 0, pred = 0, truth = 0;
};

template <class T>
PixelCounts count_pixels(const T* pred, const T* truth, size_t n) {
    PixelCounts c;
    for (size_t i = 0; i < n; ++i) {
        const bool p = pred[i] >= T(kMaskThreshold), t = truth[i] >= T(kMaskThreshold);
        c.inter += p && t;
        c.pred += p;
        c.truth += t;
    }
    return c;
}

inline SegScore score_of(const PixelCounts& c) {
    SegScore s;
    const long uni = c.pred + c.truth - c.inter;
    s.iou = uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
    s.fscore = c.pred + c.truth == 0
                   ? 1.0
                   : 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.truth);
    s.recall = c.truth == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.truth);
    return s;
}

}  // namespace detail

// Scores one binary mask pair.
template <class T>
SegScore seg_score(const TensorPtrT<T>& pred, const TensorPtrT<T>& truth) {
    if (pred->shape != truth->shape) throw shape_error("seg_score: mask shapes differ");
    return detail::score_of(detail::count_pixels(pred->data.data(), truth->data.data(),
                                                 pred->numel()));
}

// Mean per-sample scores over a [B,1,H,W] batch.
template <class T>
SegScore seg_score_batch(const TensorPtrT<T>& pred, const TensorPtrT<T>& truth) {
    if (pred->shape != truth->shape || pred->shape.size() != 4)
        throw shape_error("seg_score_batch: expected matching [B,1,H,W] masks");
    const int B = pred->shape[0];
    const size_t per = pred->numel() / B;
    SegScore sum;
    for (int b = 0; b < B; ++b) {
        const SegScore s = detail::score_of(
            detail::count_pixels(pred->data.data() + b * per, truth->data.data() + b * per, per));
        sum.iou += s.iou;
        sum.fscore += s.fscore;
        sum.recall += s.recall;
    }
    sum.iou /= B;
    sum.fscore /= B;
    sum.recall /= B;
    return sum;
}

}  // namespace kdml::metrics

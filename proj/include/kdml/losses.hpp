#pragma once

// Loss primitives: temperature softmax, cross-entropy, KL distillation,
// feature-map MSE, focal, dice, and the focal+dice combination.
// Conventions: every loss reduces to batch mean, so weights are independent
// of batch size and resolution. Knowledge targets never receive gradients.

#include <cmath>

#include "kdml/tensor.hpp"

namespace kdml::losses {

// Additive smoothing for dice; makes empty-vs-empty a perfect score.
inline constexpr double kDiceEps = 1.0;

template <class T>
struct ProbVectorT {
    TensorPtrT<T> probs;  // [..., C], rows sum to 1
    double temperature = 1.0;
};

template <class T>
int batch_of(const TensorPtrT<T>& t) {
    return t->shape.size() >= 2 ? t->shape[0] : 1;
}

// p^c = exp(z^c / T) / sum_c exp(z^c / T), stabilised by max-subtraction.
template <class T>
ProbVectorT<T> softmax_T(const TensorPtrT<T>& logits, double temperature) {
    return {softmax_lastdim(logits, temperature), temperature};
}

// -(1/B) * sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)]
// pred is expected to come from softmax_T(logits, 1).
template <class T>
TensorPtrT<T> cross_entropy(const ProbVectorT<T>& pred, const TensorPtrT<T>& y_onehot) {
    const auto& p = pred.probs;
    detail::check_same_shape(p, y_onehot, "cross_entropy");
    auto one = ones<T>(p->shape);
    auto pos = mul(y_onehot, log(p));
    auto neg = mul(sub(one, y_onehot), log(sub(one, p)));
    return scale(sum(add(pos, neg)), -1.0 / batch_of(p));
}

// KL distance from target to source: sum target*log(target/source), batch
// mean. The target is a constant; gradients flow only into the source.
template <class T>
TensorPtrT<T> kl_div(const ProbVectorT<T>& target, const ProbVectorT<T>& source) {
    detail::check_same_shape(target.probs, source.probs, "kl_div");
    auto t = detach(target.probs);
    auto r = mul(t, sub(log(t), log(source.probs)));
    return scale(sum(r), 1.0 / batch_of(t));
}

// (1/n) * sum (a_i - b_i)^2 over all n elements. Shapes must already agree;
// mismatches mean the caller forgot to adapt one of the maps.
template <class T>
TensorPtrT<T> feature_mse(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->shape != b->shape)
        throw shape_error("feature_mse: feature maps " + shape_str(a->shape) + " vs " +
                          shape_str(b->shape) + " (maps must be adapted to a common shape)");
    return mean(square(sub(a, b)));
}

// Symmetric binary focal loss, mean over pixels:
//   foreground: (1-g^)^tau * (-log g^),  background: (g^)^tau * (-log(1-g^))
template <class T>
TensorPtrT<T> focal_loss(const TensorPtrT<T>& pred, const TensorPtrT<T>& gt, double tau) {
    if (tau < 0.0) throw contract_error("focal_loss: tau must be >= 0");
    detail::check_same_shape(pred, gt, "focal_loss");
    auto one = ones<T>(pred->shape);
    auto one_minus_p = sub(one, pred);
    auto fg = mul(gt, mul(pow_const(one_minus_p, tau), scale(log(pred), -1.0)));
    auto bg = mul(sub(one, gt), mul(pow_const(pred, tau), scale(log(one_minus_p), -1.0)));
    return mean(add(fg, bg));
}

// Per-sample 1 - (2*sum(g^ g) + eps) / (sum(g^2) + sum(g2) + eps), batch mean.
template <class T>
TensorPtrT<T> dice_loss(const TensorPtrT<T>& pred, const TensorPtrT<T>& gt) {
    detail::check_same_shape(pred, gt, "dice_loss");
    auto inter = sum_per_sample(mul(pred, gt));
    auto denom = add(sum_per_sample(square(pred)), sum_per_sample(square(gt)));
    auto num = add_const(scale(inter, 2.0), kDiceEps);
    auto den = add_const(denom, kDiceEps);
    auto dice = sub(ones<T>(num->shape), div(num, den));
    return mean(dice);
}

// Focal + dice, unweighted.
template <class T>
TensorPtrT<T> fd_loss(const TensorPtrT<T>& pred, const TensorPtrT<T>& gt, double tau) {
    return add(focal_loss(pred, gt, tau), dice_loss(pred, gt));
}

// Per-pixel binary KL from target map to source map, batch mean over pixels.
// Used for the prediction channel of segmentation plans; target is constant.
template <class T>
TensorPtrT<T> pixel_kl(const TensorPtrT<T>& target, const TensorPtrT<T>& source) {
    detail::check_same_shape(target, source, "pixel_kl");
    auto t = detach(target);
    auto one = ones<T>(t->shape);
    auto tc = sub(one, t);
    auto fg = mul(t, sub(log(t), log(source)));
    auto bg = mul(tc, sub(log(tc), log(sub(one, source))));
    return mean(add(fg, bg));
}

// Test/validation helper: components in [0,1], rows sum to 1 within tol.
template <class T>
bool is_valid_prob(const ProbVectorT<T>& pv, double tol = 1e-5) {
    const auto& p = pv.probs;
    const int c = p->shape.back();
    const size_t rows = p->numel() / static_cast<size_t>(c);
    for (size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < c; ++i) {
            double v = static_cast<double>(p->data[r * c + i]);
            if (v < 0.0 || v > 1.0) return false;
            s += v;
        }
        if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
}

}  // namespace kdml::losses

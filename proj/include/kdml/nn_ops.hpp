#pragma once

// Structured ops for conv nets: matmul/linear, conv2d, pooling, upsampling,
// channel concat. Matmul/linear accumulate in double; conv2d accumulates in
// working precision so float convs keep full SIMD width.

#include <cmath>
#include <cstdint>
#include <vector>

#include "kdml/tensor.hpp"

namespace kdml {

template <class T>
TensorPtrT<T> matmul(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw shape_error("matmul: incompatible shapes " + shape_str(a->shape) + " vs " +
                          shape_str(b->shape));
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    std::vector<T> out(static_cast<size_t>(m) * n);
    std::vector<double> acc(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const T* arow = a->data.data() + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = static_cast<double>(arow[kk]);
            const T* brow = b->data.data() + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        T* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[j]);
    }
    return make_op<T>(
        {m, n}, std::move(out), {a, b}, [a, b, m, k, n](TensorT<T>& self) {
            const T* dy = self.tmp_grad.data();
            if (a->bw_active()) {  // dA = dC * B^T
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const T* dyr = dy + static_cast<size_t>(i) * n;
                        const T* brow = b->data.data() + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(dyr[j]) * static_cast<double>(brow[j]);
                        a->tmp_grad[static_cast<size_t>(i) * k + kk] += static_cast<T>(acc);
                    }
            }
            if (b->bw_active()) {  // dB = A^T * dC
                for (int kk = 0; kk < k; ++kk)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(a->data[static_cast<size_t>(i) * k + kk]) *
                                   static_cast<double>(dy[static_cast<size_t>(i) * n + j]);
                        b->tmp_grad[static_cast<size_t>(kk) * n + j] += static_cast<T>(acc);
                    }
            }
        });
}

// y = x*W + b with b broadcast over rows. x: [B,F], W: [F,C], b: [C]
template <class T>
TensorPtrT<T> linear(const TensorPtrT<T>& x, const TensorPtrT<T>& w, const TensorPtrT<T>& b) {
    if (x->shape.size() != 2 || w->shape.size() != 2 || x->shape[1] != w->shape[0])
        throw shape_error("linear: incompatible shapes " + shape_str(x->shape) + " vs " +
                          shape_str(w->shape));
    if (b->shape != Shape{w->shape[1]})
        throw shape_error("linear: bias shape " + shape_str(b->shape) + " does not match out dim " +
                          std::to_string(w->shape[1]));
    const int m = x->shape[0], f = x->shape[1], c = w->shape[1];
    std::vector<T> out(static_cast<size_t>(m) * c);
    std::vector<double> acc(static_cast<size_t>(c));
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < c; ++j) acc[j] = static_cast<double>(b->data[j]);
        const T* xrow = x->data.data() + static_cast<size_t>(i) * f;
        for (int kk = 0; kk < f; ++kk) {
            const double xv = static_cast<double>(xrow[kk]);
            const T* wrow = w->data.data() + static_cast<size_t>(kk) * c;
            for (int j = 0; j < c; ++j) acc[j] += xv * static_cast<double>(wrow[j]);
        }
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] = static_cast<T>(acc[j]);
    }
    return make_op<T>(
        {m, c}, std::move(out), {x, w, b}, [x, w, b, m, f, c](TensorT<T>& self) {
            const T* dy = self.tmp_grad.data();
            if (x->bw_active()) {
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < f; ++kk) {
                        double acc = 0.0;
                        const T* dyr = dy + static_cast<size_t>(i) * c;
                        const T* wrow = w->data.data() + static_cast<size_t>(kk) * c;
                        for (int j = 0; j < c; ++j)
                            acc += static_cast<double>(dyr[j]) * static_cast<double>(wrow[j]);
                        x->tmp_grad[static_cast<size_t>(i) * f + kk] += static_cast<T>(acc);
                    }
            }
            if (w->bw_active()) {
                for (int kk = 0; kk < f; ++kk)
                    for (int j = 0; j < c; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(x->data[static_cast<size_t>(i) * f + kk]) *
                                   static_cast<double>(dy[static_cast<size_t>(i) * c + j]);
                        w->tmp_grad[static_cast<size_t>(kk) * c + j] += static_cast<T>(acc);
                    }
            }
            if (b->bw_active()) {
                for (int j = 0; j < c; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += static_cast<double>(dy[static_cast<size_t>(i) * c + j]);
                    b->tmp_grad[j] += static_cast<T>(acc);
                }
            }
        });
}

// Cross-correlation with zero padding. x: [B,C,H,W], w: [D,C,kh,kw].
// H' = (H + 2*pad - kh)/stride + 1 (floor), likewise W'.
template <class T>
TensorPtrT<T> conv2d(const TensorPtrT<T>& x, const TensorPtrT<T>& w, int stride, int pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw shape_error("conv2d: expected 4-d input and kernel, got " + shape_str(x->shape) +
                          " and " + shape_str(w->shape));
    if (x->shape[1] != w->shape[1])
        throw shape_error("conv2d: channel mismatch " + shape_str(x->shape) + " vs " +
                          shape_str(w->shape));
    if (stride < 1) throw contract_error("conv2d: stride must be >= 1");
    const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int D = w->shape[0], KH = w->shape[2], KW = w->shape[3];
    if (KH > H + 2 * pad || KW > W + 2 * pad)
        throw shape_error("conv2d: kernel " + shape_str(w->shape) + " larger than padded input " +
                          shape_str(x->shape) + " with pad " + std::to_string(pad));
    const int HO = (H + 2 * pad - KH) / stride + 1;
    const int WO = (W + 2 * pad - KW) / stride + 1;

    const size_t xplane = static_cast<size_t>(H) * W;
    const size_t oplane = static_cast<size_t>(HO) * WO;
    // All the nets' 3x3 convs hit the fused-stencil path; everything else
    // (1x1 heads, adapters, strided test shapes) takes the generic loops.
    const bool fast3 = stride == 1 && KH == 3 && KW == 3 && pad == 1 && W >= 2;
    std::vector<T> out(static_cast<size_t>(B) * D * oplane);
    std::vector<T> acc(oplane);

    for (int b = 0; b < B; ++b) {
        const T* xb = x->data.data() + static_cast<size_t>(b) * C * xplane;
        for (int d = 0; d < D; ++d) {
            std::fill(acc.begin(), acc.end(), T(0));
            const T* wd = w->data.data() + static_cast<size_t>(d) * C * KH * KW;
            for (int c = 0; c < C; ++c) {
                const T* xc = xb + static_cast<size_t>(c) * xplane;
                if (fast3) {
                    const T* wdc = wd + static_cast<size_t>(c) * 9;
                    for (int kh = 0; kh < 3; ++kh) {
                        const T w0 = static_cast<T>(wdc[kh * 3 + 0]);
                        const T w1 = static_cast<T>(wdc[kh * 3 + 1]);
                        const T w2 = static_cast<T>(wdc[kh * 3 + 2]);
                        const int oh_lo = std::max(0, 1 - kh);
                        const int oh_hi = std::min(HO - 1, H - kh);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const T* xr = xc + static_cast<size_t>(oh + kh - 1) * W;
                            T* ar = acc.data() + static_cast<size_t>(oh) * WO;
                            ar[0] += w1 * static_cast<T>(xr[0]) +
                                     w2 * static_cast<T>(xr[1]);
                            for (int ow = 1; ow < WO - 1; ++ow)
                                ar[ow] += w0 * static_cast<T>(xr[ow - 1]) +
                                          w1 * static_cast<T>(xr[ow]) +
                                          w2 * static_cast<T>(xr[ow + 1]);
                            ar[WO - 1] += w0 * static_cast<T>(xr[WO - 2]) +
                                          w1 * static_cast<T>(xr[WO - 1]);
                        }
                    }
                    continue;
                }
                for (int kh = 0; kh < KH; ++kh) {
                    // valid output rows for this kernel row
                    int oh_lo = std::max(0, (pad - kh + stride - 1) / stride);
                    int oh_hi = std::min(HO - 1, (H - 1 + pad - kh) / stride);
                    for (int kw = 0; kw < KW; ++kw) {
                        const T wv =
                            static_cast<T>(wd[(static_cast<size_t>(c) * KH + kh) * KW + kw]);
                        int ow_lo = std::max(0, (pad - kw + stride - 1) / stride);
                        int ow_hi = std::min(WO - 1, (W - 1 + pad - kw) / stride);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * stride + kh - pad;
                            const T* xrow = xc + static_cast<size_t>(ih) * W;
                            T* arow = acc.data() + static_cast<size_t>(oh) * WO;
                            if (stride == 1) {
                                const int off = kw - pad;
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    arow[ow] += wv * static_cast<T>(xrow[ow + off]);
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    arow[ow] += wv * static_cast<T>(xrow[ow * stride + kw - pad]);
                            }
                        }
                    }
                }
            }
            T* ob = out.data() + (static_cast<size_t>(b) * D + d) * oplane;
            for (size_t i = 0; i < oplane; ++i) ob[i] = static_cast<T>(acc[i]);
        }
    }

    return make_op<T>(
        {B, D, HO, WO}, std::move(out), {x, w},
        [x, w, stride, pad, B, C, H, W, D, KH, KW, HO, WO, xplane, oplane,
         fast3](TensorT<T>& self) {
            const T* dy = self.tmp_grad.data();
            if (x->bw_active()) {
                std::vector<T> accx(xplane);
                for (int b = 0; b < B; ++b) {
                    const T* dyb = dy + static_cast<size_t>(b) * D * oplane;
                    for (int c = 0; c < C; ++c) {
                        std::fill(accx.begin(), accx.end(), T(0));
                        for (int d = 0; d < D; ++d) {
                            const T* dyd = dyb + static_cast<size_t>(d) * oplane;
                            const T* wd = w->data.data() + static_cast<size_t>(d) * C * KH * KW;
                            if (fast3) {
                                const T* wdc = wd + static_cast<size_t>(c) * 9;
                                for (int kh = 0; kh < 3; ++kh) {
                                    const T w0 = static_cast<T>(wdc[kh * 3 + 0]);
                                    const T w1 = static_cast<T>(wdc[kh * 3 + 1]);
                                    const T w2 = static_cast<T>(wdc[kh * 3 + 2]);
                                    const int oh_lo = std::max(0, 1 - kh);
                                    const int oh_hi = std::min(HO - 1, H - kh);
                                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                        T* xr = accx.data() +
                                                     static_cast<size_t>(oh + kh - 1) * W;
                                        const T* dyr = dyd + static_cast<size_t>(oh) * WO;
                                        xr[0] += w1 * static_cast<T>(dyr[0]) +
                                                 w0 * static_cast<T>(dyr[1]);
                                        for (int j = 1; j < W - 1; ++j)
                                            xr[j] += w2 * static_cast<T>(dyr[j - 1]) +
                                                     w1 * static_cast<T>(dyr[j]) +
                                                     w0 * static_cast<T>(dyr[j + 1]);
                                        xr[W - 1] += w2 * static_cast<T>(dyr[W - 2]) +
                                                     w1 * static_cast<T>(dyr[W - 1]);
                                    }
                                }
                                continue;
                            }
                            for (int kh = 0; kh < KH; ++kh) {
                                int oh_lo = std::max(0, (pad - kh + stride - 1) / stride);
                                int oh_hi = std::min(HO - 1, (H - 1 + pad - kh) / stride);
                                for (int kw = 0; kw < KW; ++kw) {
                                    const T wv = static_cast<T>(
                                        wd[(static_cast<size_t>(c) * KH + kh) * KW + kw]);
                                    int ow_lo = std::max(0, (pad - kw + stride - 1) / stride);
                                    int ow_hi = std::min(WO - 1, (W - 1 + pad - kw) / stride);
                                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                        const int ih = oh * stride + kh - pad;
                                        T* xrow = accx.data() + static_cast<size_t>(ih) * W;
                                        const T* dyrow = dyd + static_cast<size_t>(oh) * WO;
                                        if (stride == 1) {
                                            const int off = kw - pad;
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                xrow[ow + off] += wv * static_cast<T>(dyrow[ow]);
                                        } else {
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                xrow[ow * stride + kw - pad] +=
                                                    wv * static_cast<T>(dyrow[ow]);
                                        }
                                    }
                                }
                            }
                        }
                        T* xg = x->tmp_grad.data() + (static_cast<size_t>(b) * C + c) * xplane;
                        for (size_t i = 0; i < xplane; ++i) xg[i] += static_cast<T>(accx[i]);
                    }
                }
            }
            if (w->bw_active()) {
                // per-column lanes keep the reduction vectorizable; summed at the end
                std::vector<T> lane(WO);
                std::vector<T> l0(WO), l1(WO), l2(WO);
                for (int d = 0; d < D; ++d) {
                    for (int c = 0; c < C; ++c) {
                        if (fast3) {
                            const T* xc0 = x->data.data() + static_cast<size_t>(c) * xplane;
                            const T* dyd0 = dy + static_cast<size_t>(d) * oplane;
                            for (int kh = 0; kh < 3; ++kh) {
                                std::fill(l0.begin(), l0.end(), T(0));
                                std::fill(l1.begin(), l1.end(), T(0));
                                std::fill(l2.begin(), l2.end(), T(0));
                                const int oh_lo = std::max(0, 1 - kh);
                                const int oh_hi = std::min(HO - 1, H - kh);
                                for (int b = 0; b < B; ++b) {
                                    const T* xc = xc0 + static_cast<size_t>(b) * C * xplane;
                                    const T* dyd = dyd0 + static_cast<size_t>(b) * D * oplane;
                                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                        const T* xr = xc + static_cast<size_t>(oh + kh - 1) * W;
                                        const T* dyr = dyd + static_cast<size_t>(oh) * WO;
                                        for (int ow = 1; ow < WO; ++ow)
                                            l0[ow] += xr[ow - 1] * dyr[ow];
                                        for (int ow = 0; ow < WO; ++ow)
                                            l1[ow] += xr[ow] * dyr[ow];
                                        for (int ow = 0; ow < WO - 1; ++ow)
                                            l2[ow] += xr[ow + 1] * dyr[ow];
                                    }
                                }
                                T s0 = T(0), s1 = T(0), s2 = T(0);
                                for (int ow = 1; ow < WO; ++ow) s0 += l0[ow];
                                for (int ow = 0; ow < WO; ++ow) s1 += l1[ow];
                                for (int ow = 0; ow < WO - 1; ++ow) s2 += l2[ow];
                                T* wg = w->tmp_grad.data() +
                                        ((static_cast<size_t>(d) * C + c) * 3 + kh) * 3;
                                wg[0] += s0;
                                wg[1] += s1;
                                wg[2] += s2;
                            }
                            continue;
                        }
                        for (int kh = 0; kh < KH; ++kh) {
                            int oh_lo = std::max(0, (pad - kh + stride - 1) / stride);
                            int oh_hi = std::min(HO - 1, (H - 1 + pad - kh) / stride);
                            for (int kw = 0; kw < KW; ++kw) {
                                int ow_lo = std::max(0, (pad - kw + stride - 1) / stride);
                                int ow_hi = std::min(WO - 1, (W - 1 + pad - kw) / stride);
                                std::fill(lane.begin() + ow_lo, lane.begin() + ow_hi + 1, T(0));
                                for (int b = 0; b < B; ++b) {
                                    const T* xc = x->data.data() +
                                                  (static_cast<size_t>(b) * C + c) * xplane;
                                    const T* dyd = dy + (static_cast<size_t>(b) * D + d) * oplane;
                                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                        const int ih = oh * stride + kh - pad;
                                        const T* xrow = xc + static_cast<size_t>(ih) * W;
                                        const T* dyrow = dyd + static_cast<size_t>(oh) * WO;
                                        if (stride == 1) {
                                            const int off = kw - pad;
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                lane[ow] += static_cast<T>(xrow[ow + off]) *
                                                            static_cast<T>(dyrow[ow]);
                                        } else {
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                lane[ow] += static_cast<double>(
                                                                xrow[ow * stride + kw - pad]) *
                                                            static_cast<T>(dyrow[ow]);
                                        }
                                    }
                                }
                                T acc = T(0);
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += lane[ow];
                                w->tmp_grad[((static_cast<size_t>(d) * C + c) * KH + kh) * KW + kw] +=
                                    static_cast<T>(acc);
                            }
                        }
                    }
                }
            }
        });
}

// x: [B,C,H,W] plus per-channel bias [C]
template <class T>
TensorPtrT<T> add_channel_bias(const TensorPtrT<T>& x, const TensorPtrT<T>& b) {
    if (x->shape.size() != 4 || b->shape != Shape{x->shape[1]})
        throw shape_error("add_channel_bias: " + shape_str(x->shape) + " vs " +
                          shape_str(b->shape));
    const int B = x->shape[0], C = x->shape[1];
    const size_t plane = static_cast<size_t>(x->shape[2]) * x->shape[3];
    std::vector<T> out(x->numel());
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            const T bv = b->data[c];
            const size_t base = (static_cast<size_t>(bi) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) out[base + i] = x->data[base + i] + bv;
        }
    return make_op<T>(
        x->shape, std::move(out), {x, b}, [x, b, B, C, plane](TensorT<T>& self) {
            if (x->bw_active())
                for (size_t i = 0; i < self.numel(); ++i) x->tmp_grad[i] += self.tmp_grad[i];
            if (b->bw_active()) {
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int bi = 0; bi < B; ++bi) {
                        const size_t base = (static_cast<size_t>(bi) * C + c) * plane;
                        for (size_t i = 0; i < plane; ++i)
                            acc += static_cast<double>(self.tmp_grad[base + i]);
                    }
                    b->tmp_grad[c] += static_cast<T>(acc);
                }
            }
        });
}

// 2x2 max pooling, stride 2. Requires even spatial extents.
template <class T>
TensorPtrT<T> max_pool2d(const TensorPtrT<T>& x) {
    if (x->shape.size() != 4) throw shape_error("max_pool2d: expected 4-d, got " + shape_str(x->shape));
    const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw contract_error("max_pool2d: spatial extents must be even, got " + shape_str(x->shape));
    const int HO = H / 2, WO = W / 2;
    std::vector<T> out(static_cast<size_t>(B) * C * HO * WO);
    std::vector<int32_t> argmax(out.size());
    size_t o = 0;
    for (int bc = 0; bc < B * C; ++bc) {
        const T* p = x->data.data() + static_cast<size_t>(bc) * H * W;
        for (int oh = 0; oh < HO; ++oh)
            for (int ow = 0; ow < WO; ++ow, ++o) {
                const int i0 = (oh * 2) * W + ow * 2;
                int best = i0;
                if (p[i0 + 1] > p[best]) best = i0 + 1;
                if (p[i0 + W] > p[best]) best = i0 + W;
                if (p[i0 + W + 1] > p[best]) best = i0 + W + 1;
                out[o] = p[best];
                argmax[o] = static_cast<int32_t>(static_cast<size_t>(bc) * H * W + best);
            }
    }
    return make_op<T>(
        {B, C, HO, WO}, std::move(out), {x}, [x, argmax = std::move(argmax)](TensorT<T>& self) {
            if (!x->bw_active()) return;
            for (size_t i = 0; i < self.numel(); ++i)
                x->tmp_grad[static_cast<size_t>(argmax[i])] += self.tmp_grad[i];
        });
}

// Nearest-neighbour upsampling by an integer factor.
template <class T>
TensorPtrT<T> upsample_nearest2d(const TensorPtrT<T>& x, int factor) {
    if (x->shape.size() != 4) throw shape_error("upsample: expected 4-d, got " + shape_str(x->shape));
    if (factor < 1) throw contract_error("upsample: factor must be >= 1");
    const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int HO = H * factor, WO = W * factor;
    std::vector<T> out(static_cast<size_t>(B) * C * HO * WO);
    for (int bc = 0; bc < B * C; ++bc) {
        const T* p = x->data.data() + static_cast<size_t>(bc) * H * W;
        T* q = out.data() + static_cast<size_t>(bc) * HO * WO;
        for (int oh = 0; oh < HO; ++oh) {
            const T* prow = p + static_cast<size_t>(oh / factor) * W;
            T* qrow = q + static_cast<size_t>(oh) * WO;
            for (int ow = 0; ow < WO; ++ow) qrow[ow] = prow[ow / factor];
        }
    }
    return make_op<T>(
        {B, C, HO, WO}, std::move(out), {x}, [x, factor, B, C, H, W, HO, WO](TensorT<T>& self) {
            if (!x->bw_active()) return;
            for (int bc = 0; bc < B * C; ++bc) {
                T* xg = x->tmp_grad.data() + static_cast<size_t>(bc) * H * W;
                const T* dy = self.tmp_grad.data() + static_cast<size_t>(bc) * HO * WO;
                for (int oh = 0; oh < HO; ++oh) {
                    T* xrow = xg + static_cast<size_t>(oh / factor) * W;
                    const T* dyrow = dy + static_cast<size_t>(oh) * WO;
                    for (int ow = 0; ow < WO; ++ow) xrow[ow / factor] += dyrow[ow];
                }
            }
        });
}

// Concatenate along the channel dimension.
template <class T>
TensorPtrT<T> concat_channels(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->shape.size() != 4 || b->shape.size() != 4 || a->shape[0] != b->shape[0] ||
        a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3])
        throw shape_error("concat_channels: incompatible " + shape_str(a->shape) + " vs " +
                          shape_str(b->shape));
    const int B = a->shape[0], Ca = a->shape[1], Cb = b->shape[1];
    const size_t plane = static_cast<size_t>(a->shape[2]) * a->shape[3];
    std::vector<T> out(static_cast<size_t>(B) * (Ca + Cb) * plane);
    for (int bi = 0; bi < B; ++bi) {
        T* dst = out.data() + static_cast<size_t>(bi) * (Ca + Cb) * plane;
        const T* pa = a->data.data() + static_cast<size_t>(bi) * Ca * plane;
        const T* pb = b->data.data() + static_cast<size_t>(bi) * Cb * plane;
        std::copy(pa, pa + Ca * plane, dst);
        std::copy(pb, pb + Cb * plane, dst + Ca * plane);
    }
    return make_op<T>(
        {B, Ca + Cb, a->shape[2], a->shape[3]}, std::move(out), {a, b},
        [a, b, B, Ca, Cb, plane](TensorT<T>& self) {
            for (int bi = 0; bi < B; ++bi) {
                const T* dy = self.tmp_grad.data() + static_cast<size_t>(bi) * (Ca + Cb) * plane;
                if (a->bw_active()) {
                    T* ga = a->tmp_grad.data() + static_cast<size_t>(bi) * Ca * plane;
                    for (size_t i = 0; i < Ca * plane; ++i) ga[i] += dy[i];
                }
                if (b->bw_active()) {
                    T* gb = b->tmp_grad.data() + static_cast<size_t>(bi) * Cb * plane;
                    for (size_t i = 0; i < Cb * plane; ++i) gb[i] += dy[Ca * plane + i];
                }
            }
        });
}

// [B,C,H,W] -> [B,C], mean over the spatial extent.
template <class T>
TensorPtrT<T> global_avg_pool(const TensorPtrT<T>& x) {
    if (x->shape.size() != 4) throw shape_error("global_avg_pool: expected 4-d, got " + shape_str(x->shape));
    const int B = x->shape[0], C = x->shape[1];
    const size_t plane = static_cast<size_t>(x->shape[2]) * x->shape[3];
    std::vector<T> out(static_cast<size_t>(B) * C);
    for (int bc = 0; bc < B * C; ++bc) {
        double acc = 0.0;
        const T* p = x->data.data() + static_cast<size_t>(bc) * plane;
        for (size_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
        out[bc] = static_cast<T>(acc / static_cast<double>(plane));
    }
    return make_op<T>(
        {B, C}, std::move(out), {x}, [x, B, C, plane](TensorT<T>& self) {
            if (!x->bw_active()) return;
            for (int bc = 0; bc < B * C; ++bc) {
                T g = static_cast<T>(static_cast<double>(self.tmp_grad[bc]) /
                                     static_cast<double>(plane));
                T* xg = x->tmp_grad.data() + static_cast<size_t>(bc) * plane;
                for (size_t i = 0; i < plane; ++i) xg[i] += g;
            }
        });
}

}  // namespace kdml

#pragma once

// Reference architectures. The classifier is a plain conv stack
// (teacher 16-32-64-64, student 8-16), the segmenter a two-level
// encoder-decoder with skip connections (teacher 16/32, student 8/16).
// Both register one feature tap: the last conv activation for
// classification, the first decoder conv for segmentation.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kdml/nn_ops.hpp"
#include "kdml/rng.hpp"

namespace kdml::nets {

using Capacity = Role;

template <class T>
struct ForwardResultT {
    TensorPtrT<T> output;  // classification: logits [B,C]; segmentation: probability map [B,1,H,W]
    TensorPtrT<T> logits;  // pre-activation head output (== output for classification)
    std::map<std::string, TensorPtrT<T>> taps;
};

template <class T>
struct FeatureTapT {
    std::string network;
    std::string layer;
    Shape shape;  // per-sample activation shape [D,N,N]
};

template <class T>
class NetworkT {
public:
    std::string name;
    Capacity capacity = Capacity::student;
    Task task = Task::classification;
    Shape in_shape;  // per-sample [C,H,W]
    int n_classes = 0;
    std::vector<int> widths;
    std::vector<std::pair<std::string, TensorPtrT<T>>> params;  // insertion-ordered
    std::vector<std::string> tap_names;

    const TensorPtrT<T>& param(const std::string& pname) const {
        for (const auto& [n, t] : params)
            if (n == pname) return t;
        throw contract_error(name + ": no parameter named " + pname);
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [_, t] : params) n += t->numel();
        return n;
    }

    void set_requires_grad(bool enabled) {
        for (auto& [_, t] : params) t->requires_grad = enabled;
    }

    void zero_grad() {
        for (auto& [_, t] : params) t->zero_grad();
    }

    // One pass producing predictions plus every registered tap activation.
    ForwardResultT<T> forward(const TensorPtrT<T>& x) const {
        check_input(x);
        if (task == Task::classification) return forward_classifier(x);
        return forward_segmenter(x);
    }

    FeatureTapT<T> tap_info() const {
        Shape s = tap_shape();
        return {name, tap_names.at(0), s};
    }

    // Per-sample tap activation shape [D,N,N].
    Shape tap_shape() const {
        const int h = in_shape[1], w = in_shape[2];
        if (task == Task::classification) {
            const int nblocks = static_cast<int>(widths.size());
            const int f = 1 << (nblocks - 1);  // pools before the last conv
            return {widths.back(), h / f, w / f};
        }
        return {widths[1], h / 2, w / 2};
    }

private:
    void check_input(const TensorPtrT<T>& x) const {
        if (x->shape.size() != 4 || x->shape[1] != in_shape[0] || x->shape[2] != in_shape[1] ||
            x->shape[3] != in_shape[2])
            throw shape_error(name + ": input " + shape_str(x->shape) +
                              " does not match expected [B," + std::to_string(in_shape[0]) + "," +
                              std::to_string(in_shape[1]) + "," + std::to_string(in_shape[2]) + "]");
    }

    ForwardResultT<T> forward_classifier(const TensorPtrT<T>& x) const {
        ForwardResultT<T> r;
        auto h = x;
        for (size_t i = 0; i < widths.size(); ++i) {
            const std::string b = "block" + std::to_string(i + 1);
            h = relu(add_channel_bias(conv2d(h, param(b + ".w"), 1, 1), param(b + ".b")));
            if (i + 1 == widths.size()) r.taps["last_conv"] = h;
            h = max_pool2d(h);
        }
        auto feat = global_avg_pool(h);
        r.logits = linear(feat, param("head.w"), param("head.b"));
        r.output = r.logits;
        return r;
    }

    ForwardResultT<T> forward_segmenter(const TensorPtrT<T>& x) const {
        ForwardResultT<T> r;
        auto e1 = relu(add_channel_bias(conv2d(x, param("enc1.w"), 1, 1), param("enc1.b")));
        auto e2 = relu(add_channel_bias(conv2d(max_pool2d(e1), param("enc2.w"), 1, 1), param("enc2.b")));
        auto bt = relu(add_channel_bias(conv2d(max_pool2d(e2), param("bott.w"), 1, 1), param("bott.b")));
        auto d1in = concat_channels(upsample_nearest2d(bt, 2), e2);
        auto d1 = relu(add_channel_bias(conv2d(d1in, param("dec1.w"), 1, 1), param("dec1.b")));
        r.taps["decoder_conv1"] = d1;
        auto d2in = concat_channels(upsample_nearest2d(d1, 2), e1);
        auto d2 = relu(add_channel_bias(conv2d(d2in, param("dec2.w"), 1, 1), param("dec2.b")));
        r.logits = add_channel_bias(conv2d(d2, param("head.w"), 1, 0), param("head.b"));
        r.output = sigmoid(r.logits);
        return r;
    }
};

namespace detail {

template <class T>
TensorPtrT<T> he_uniform(const Shape& shape, int fan_in, Rng& rng) {
    const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::vector<T> v(shape_numel(shape));
    for (auto& e : v) e = static_cast<T>(rng.uniform(-limit, limit));
    return make_tensor<T>(shape, std::move(v), true);
}

template <class T>
void add_conv(NetworkT<T>& net, const std::string& lname, int in_ch, int out_ch, int k, Rng& rng) {
    net.params.emplace_back(lname + ".w", he_uniform<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng));
    net.params.emplace_back(lname + ".b", zeros<T>({out_ch}, true));
}

}  // namespace detail

// Conv stack classifier. Teacher: 4 blocks (16,32,64,64); student: 2 blocks
// (8,16). Parameter ratio teacher/student >= 3x at these widths.
template <class T>
NetworkT<T> build_classifier(Capacity capacity, const Shape& in_shape, int n_classes,
                             uint64_t seed, std::string name = {}) {
    if (n_classes < 2) throw contract_error("build_classifier: n_classes must be >= 2");
    if (in_shape.size() != 3 || in_shape[0] < 1)
        throw contract_error("build_classifier: in_shape must be [C,H,W] with C >= 1");
    NetworkT<T> net;
    net.name = name.empty() ? (capacity == Capacity::teacher ? "T" : "S") : std::move(name);
    net.capacity = capacity;
    net.task = Task::classification;
    net.in_shape = in_shape;
    net.n_classes = n_classes;
    net.widths = capacity == Capacity::teacher ? std::vector<int>{16, 32, 64, 64}
                                               : std::vector<int>{8, 16};
    const int div = 1 << static_cast<int>(net.widths.size());
    if (in_shape[1] % div != 0 || in_shape[2] % div != 0)
        throw contract_error("build_classifier: H and W must be divisible by " + std::to_string(div));

    Rng rng(seed);
    int prev = in_shape[0];
    for (size_t i = 0; i < net.widths.size(); ++i) {
        detail::add_conv(net, "block" + std::to_string(i + 1), prev, net.widths[i], 3, rng);
        prev = net.widths[i];
    }
    net.params.emplace_back("head.w", detail::he_uniform<T>({prev, n_classes}, prev, rng));
    net.params.emplace_back("head.b", zeros<T>({n_classes}, true));
    net.tap_names = {"last_conv"};
    return net;
}

// Two-level encoder-decoder with skip connections and a sigmoid head.
// Teacher widths (16,32), student widths (8,16).
template <class T>
NetworkT<T> build_segmenter(Capacity capacity, const Shape& in_shape, uint64_t seed,
                            std::string name = {}) {
    if (in_shape.size() != 3 || in_shape[0] < 1)
        throw contract_error("build_segmenter: in_shape must be [C,H,W] with C >= 1");
    if (in_shape[1] % 4 != 0 || in_shape[2] % 4 != 0)
        throw contract_error("build_segmenter: H and W must be divisible by 4, got " +
                             std::to_string(in_shape[1]) + "x" + std::to_string(in_shape[2]));
    NetworkT<T> net;
    net.name = capacity == Capacity::teacher ? "T" : "S";
    if (!std::empty(name)) net.name = std::move(name);
    net.capacity = capacity;
    net.task = Task::segmentation;
    net.in_shape = in_shape;
    net.widths = capacity == Capacity::teacher ? std::vector<int>{16, 32} : std::vector<int>{8, 16};

    Rng rng(seed);
    const int w1 = net.widths[0], w2 = net.widths[1];
    detail::add_conv(net, "enc1", in_shape[0], w1, 3, rng);
    detail::add_conv(net, "enc2", w1, w2, 3, rng);
    detail::add_conv(net, "bott", w2, w2, 3, rng);
    detail::add_conv(net, "dec1", w2 + w2, w2, 3, rng);
    detail::add_conv(net, "dec2", w2 + w1, w1, 3, rng);
    detail::add_conv(net, "head", w1, 1, 1, rng);
    net.tap_names = {"decoder_conv1"};
    return net;
}

// Trainable 1x1 conv (plus nearest upsampling / 2x2 pooling when the spatial
// extents differ) mapping a source tap shape onto a destination tap shape.
template <class T>
class AdapterBlockT {
public:
    Shape in_shape;   // per-sample [C,H,W] of the incoming tap
    Shape out_shape;  // per-sample [C,H,W] it must produce
    int pool_steps = 0;
    int up_factor = 1;
    TensorPtrT<T> w;  // [C_out, C_in, 1, 1]
    TensorPtrT<T> b;  // [C_out]

    AdapterBlockT(const Shape& from, const Shape& to, uint64_t seed)
        : in_shape(from), out_shape(to) {
        if (from.size() != 3 || to.size() != 3)
            throw contract_error("adapter: tap shapes must be [C,H,W]");
        int fh = from[1], th = to[1];
        if (fh > th) {
            if (fh % th != 0) throw contract_error("adapter: spatial extents not an integer ratio");
            int ratio = fh / th;
            while (ratio > 1) {
                if (ratio % 2 != 0) throw contract_error("adapter: pooling ratio must be a power of 2");
                ratio /= 2;
                ++pool_steps;
            }
        } else if (th > fh) {
            if (th % fh != 0) throw contract_error("adapter: spatial extents not an integer ratio");
            up_factor = th / fh;
        }
        if (static_cast<long>(from[2]) * to[1] != static_cast<long>(to[2]) * from[1])
            throw contract_error("adapter: anisotropic spatial scaling is not supported");
        Rng rng(seed);
        w = detail::he_uniform<T>({to[0], from[0], 1, 1}, from[0], rng);
        b = zeros<T>({to[0]}, true);
    }

    std::vector<std::pair<std::string, TensorPtrT<T>>> params() const {
        return {{"adapter.w", w}, {"adapter.b", b}};
    }

    TensorPtrT<T> apply(const TensorPtrT<T>& t_feat) const {
        if (t_feat->shape.size() != 4 || t_feat->shape[1] != in_shape[0] ||
            t_feat->shape[2] != in_shape[1] || t_feat->shape[3] != in_shape[2])
            throw shape_error("adapter: input " + shape_str(t_feat->shape) +
                              " does not match declared tap shape " + shape_str(in_shape));
        auto h = t_feat;
        for (int i = 0; i < pool_steps; ++i) h = max_pool2d(h);
        h = add_channel_bias(conv2d(h, w, 1, 0), b);
        if (up_factor > 1) h = upsample_nearest2d(h, up_factor);
        return h;
    }
};

template <class T>
using NetworkPtrT = std::shared_ptr<NetworkT<T>>;

}  // namespace kdml::nets

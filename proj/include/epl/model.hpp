#pragma once

// Small 3D encoder-decoder with T evidential heads on a shared trunk.
//
// Encoder stage 0 is a stride-1 conv at full resolution; stages 1..depth-1
// halve the resolution with stride-2 convs. Decoder stage 1 is a conv at the
// bottleneck; stage k >= 2 upsamples, concatenates the matching encoder
// output and convolves. Stage `depth` is therefore at full resolution.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "epl/autodiff.hpp"
#include "epl/errors.hpp"
#include "epl/volume_ops.hpp"

namespace epl {

struct NetConfig {
    std::size_t in_channels = 1;
    std::size_t base_width = 8;
    std::size_t depth = 3;
    std::size_t num_classes = 2;
    std::size_t num_heads = 2;
    std::size_t proto_stage = 3;

    void validate() const {
        if (in_channels < 1 || base_width < 1) throw ConfigError("in_channels and base_width must be positive");
        if (depth < 1 || proto_stage < 1 || proto_stage > depth) throw ConfigError("need depth >= proto_stage >= 1");
        if (num_heads < 1 || num_heads > 8) throw ConfigError("num_heads must lie in 1..8");
        if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    }

    std::size_t width(std::size_t level) const { return base_width << level; }
    // channel count of decoder stage k (1-based)
    std::size_t decoder_width(std::size_t k) const { return width(depth - k); }
    std::size_t hidden_dim() const { return decoder_width(proto_stage); }
};

inline nlohmann::json to_json(const NetConfig& c) {
    return {{"in_channels", c.in_channels}, {"base_width", c.base_width}, {"depth", c.depth},
            {"num_classes", c.num_classes}, {"num_heads", c.num_heads},   {"proto_stage", c.proto_stage}};
}

struct LayerShape {
    std::string name;
    std::size_t out, in, k;
};

// Convolutions in parameter order; each contributes a kernel then a bias.
inline std::vector<LayerShape> layer_shapes(const NetConfig& c) {
    std::vector<LayerShape> l;
    l.push_back({"enc0", c.width(0), c.in_channels, 3});
    for (std::size_t s = 1; s < c.depth; ++s) l.push_back({"enc" + std::to_string(s), c.width(s), c.width(s - 1), 3});
    l.push_back({"dec1", c.decoder_width(1), c.decoder_width(1), 3});
    for (std::size_t k = 2; k <= c.depth; ++k)
        l.push_back({"dec" + std::to_string(k), c.decoder_width(k), c.decoder_width(k - 1) + c.decoder_width(k), 3});
    for (std::size_t h = 0; h < c.num_heads; ++h)
        l.push_back({"head" + std::to_string(h), c.num_classes, c.width(0), 1});
    return l;
}

// sum over layers of out*in*k^3 + out
inline std::size_t parameter_count(const NetConfig& c) {
    std::size_t n = 0;
    for (const auto& l : layer_shapes(c)) n += l.out * l.in * l.k * l.k * l.k + l.out;
    return n;
}

template <typename T>
struct Parameters {
    std::vector<Tensor<T>> tensors;

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }
};

// Kaiming-normal kernels (fan-in), zero biases. Heads draw from the same
// stream after the trunk, so each head gets a different initialization.
template <typename T>
Parameters<T> init_parameters(const NetConfig& c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    Parameters<T> p;
    for (const auto& l : layer_shapes(c)) {
        const double fan_in = double(l.in * l.k * l.k * l.k);
        std::normal_distribution<double> dist(0.0, std::sqrt((l.k == 1 ? 1.0 : 2.0) / fan_in));
        Tensor<T> w({l.out, l.in, l.k, l.k, l.k});
        for (auto& x : w.values()) x = static_cast<T>(dist(rng));
        p.tensors.push_back(std::move(w));
        p.tensors.push_back(Tensor<T>({l.out, 1, 1, 1}));
    }
    return p;
}

template <typename T>
std::vector<ad::Var<T>> as_leaves(const Parameters<T>& p) {
    std::vector<ad::Var<T>> v;
    for (const auto& t : p.tensors) v.push_back(ad::Var<T>::leaf(t));
    return v;
}

template <typename T>
std::vector<ad::Var<T>> as_constants(const Parameters<T>& p) {
    std::vector<ad::Var<T>> v;
    for (const auto& t : p.tensors) v.push_back(ad::Var<T>::constant(t));
    return v;
}

template <typename T>
struct ModelOutput {
    std::vector<ad::Var<T>> evidence;  // T heads, each [N, D, H, W], post-softplus
    ad::Var<T> hidden;                 // [F, D, H, W] at input resolution
};

inline void check_divisible(const NetConfig& c, Shape3 s) {
    const std::size_t f = std::size_t(1) << (c.depth - 1);
    for (auto e : s)
        if (e == 0 || e % f != 0)
            throw ShapeError("spatial extents must be divisible by " + std::to_string(f));
}

template <typename T>
ModelOutput<T> forward(const NetConfig& c, const std::vector<ad::Var<T>>& params, const ad::Var<T>& volume) {
    using V = ad::Var<T>;
    const Shape& in = volume.shape();
    if (in.size() != 4 || in[0] != c.in_channels) throw ShapeError("volume must be [C,D,H,W] with C = in_channels");
    const Shape3 full = spatial_of(in);
    check_divisible(c, full);
    if (params.size() != 2 * layer_shapes(c).size()) throw ShapeError("parameter count does not match the network");

    std::size_t next = 0;
    auto conv = [&](const V& x, std::size_t stride, bool relu) {
        const V& w = params[next++];
        const V& b = params[next++];
        const std::size_t k = w.shape()[2];
        auto y = ad::conv3d(x, w, stride, k / 2) + b;
        return relu ? ad::relu(y) : y;
    };

    std::vector<V> skips;
    V x = conv(volume, 1, true);
    skips.push_back(x);
    for (std::size_t s = 1; s < c.depth; ++s) {
        x = conv(x, 2, true);
        skips.push_back(x);
    }
    x = conv(x, 1, true);
    V hidden = c.proto_stage == 1 ? x : V();
    for (std::size_t k = 2; k <= c.depth; ++k) {
        const V& skip = skips[c.depth - k];
        x = ad::trilinear_upsample(x, spatial_of(skip.shape()));
        x = conv(ad::concat0<T>({x, skip}), 1, true);
        if (k == c.proto_stage) hidden = x;
    }
    ModelOutput<T> out;
    for (std::size_t h = 0; h < c.num_heads; ++h) out.evidence.push_back(ad::softplus(conv(x, 1, false)));
    out.hidden = ad::trilinear_upsample(hidden, full);
    return out;
}

// teacher <- decay * teacher + (1 - decay) * student
template <typename T>
void ema_update(Parameters<T>& teacher, const Parameters<T>& student, T decay) {
    if (teacher.tensors.size() != student.tensors.size()) throw ShapeError("EMA: parameter lists differ in length");
    for (std::size_t i = 0; i < teacher.tensors.size(); ++i)
        if (teacher.tensors[i].shape() != student.tensors[i].shape())
            throw ShapeError("EMA: parameter " + std::to_string(i) + " differs in shape");
    const T keep = T{1} - decay;
    for (std::size_t i = 0; i < teacher.tensors.size(); ++i) {
        auto t = teacher.tensors[i].values();
        auto s = student.tensors[i].values();
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = decay * t[j] + keep * s[j];
    }
}

// Adam with bias correction and the usual default moments.
template <typename T>
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;
    std::vector<Tensor<T>> m, v;

    void apply(Parameters<T>& p, const std::vector<Tensor<T>>& grads) {
        if (grads.size() != p.tensors.size()) throw ShapeError("Adam: gradient count mismatch");
        if (m.empty())
            for (const auto& t : p.tensors) {
                m.emplace_back(t.shape());
                v.emplace_back(t.shape());
            }
        ++step;
        const double c1 = 1.0 - std::pow(beta1, double(step)), c2 = 1.0 - std::pow(beta2, double(step));
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto w = p.tensors[i].values();
            auto g = grads[i].values();
            auto mi = m[i].values();
            auto vi = v[i].values();
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j];
                mi[j] = static_cast<T>(beta1 * mi[j] + (1 - beta1) * gj);
                vi[j] = static_cast<T>(beta2 * vi[j] + (1 - beta2) * gj * gj);
                const double mh = mi[j] / c1, vh = vi[j] / c2;
                w[j] = static_cast<T>(w[j] - lr * mh / (std::sqrt(vh) + eps));
            }
        }
    }
};

}  // namespace epl

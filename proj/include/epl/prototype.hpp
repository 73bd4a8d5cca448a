#pragma once

// Reliability-masked attention pooling of class prototypes, warm-up fusion of
// labeled and unlabeled prototypes, and cosine-softmax class probabilities.

#include <algorithm>
#include <cmath>
#include <vector>

#include "epl/autodiff.hpp"
#include "epl/uncertainty.hpp"

namespace epl {

enum class PrototypeSource { labeled, unlabeled, fused };

template <typename T>
struct PrototypeSet {
    ad::Var<T> vectors;  // [N, dim]; invalid rows are zero
    std::vector<bool> valid;
    PrototypeSource source = PrototypeSource::labeled;

    std::size_t num_classes() const { return valid.size(); }
    std::size_t dim() const { return vectors.shape()[1]; }
    bool any_valid() const { return std::find(valid.begin(), valid.end(), true) != valid.end(); }
    T at(std::size_t cls, std::size_t k) const { return vectors.value()[cls * dim() + k]; }
};

// P_n = mean over samples containing n of
//       sum_v h_v beta_v [y_v = n] / sum_v [y_v = n]
// Classes absent from the whole batch come back invalid with zero vectors.
template <typename T>
PrototypeSet<T> pool_prototypes(const std::vector<ad::Var<T>>& features,
                                const std::vector<ReliabilityMap<T>>& beta,
                                const std::vector<LabelVolume>& labels, std::size_t num_classes,
                                PrototypeSource source = PrototypeSource::labeled) {
    if (features.empty() || features.size() != beta.size() || features.size() != labels.size())
        throw ShapeError("pool_prototypes needs matching features, reliability maps and labels");
    const std::size_t dim = features[0].shape().at(0);

    std::vector<std::vector<std::size_t>> counts(features.size(), std::vector<std::size_t>(num_classes, 0));
    std::vector<std::size_t> present(num_classes, 0);
    for (std::size_t b = 0; b < features.size(); ++b) {
        const Shape3 sp = spatial_of(features[b].shape());
        if (features[b].shape().size() != 4 || features[b].shape()[0] != dim || labels[b].shape != sp ||
            beta[b].spatial() != sp)
            throw ShapeError("pool_prototypes: features, reliability and labels are not congruent");
        labels[b].check_classes(num_classes);
        for (auto y : labels[b].values) ++counts[b][y];
        for (std::size_t n = 0; n < num_classes; ++n) present[n] += counts[b][n] > 0;
    }

    ad::Var<T> acc;
    for (std::size_t b = 0; b < features.size(); ++b) {
        const std::size_t v = labels[b].size();
        Tensor<T> w({v, num_classes});
        for (std::size_t i = 0; i < v; ++i) {
            const std::size_t y = labels[b][i];
            w[i * num_classes + y] =
                beta[b][i] / static_cast<T>(counts[b][y]) / static_cast<T>(present[y]);
        }
        auto flat = ad::reshape(features[b], Shape{dim, v});
        auto part = ad::matmul(flat, ad::Var<T>::constant(std::move(w)));  // [dim, N]
        acc = acc.valid() ? acc + part : part;
    }

    PrototypeSet<T> out;
    out.vectors = ad::transpose2d(acc);
    out.valid.resize(num_classes);
    for (std::size_t n = 0; n < num_classes; ++n) out.valid[n] = present[n] > 0;
    out.source = source;
    return out;
}

// Per class: (1-gamma) P_l + gamma P_u when both are valid, otherwise the
// valid one, otherwise invalid.
template <typename T>
PrototypeSet<T> fuse_prototypes(const PrototypeSet<T>& labeled, const PrototypeSet<T>& unlabeled, T gamma) {
    if (labeled.num_classes() != unlabeled.num_classes() || labeled.dim() != unlabeled.dim())
        throw ShapeError("fuse_prototypes: prototype sets differ in class count or dimension");
    const std::size_t n = labeled.num_classes();
    Tensor<T> wl({n, 1}), wu({n, 1});
    PrototypeSet<T> out;
    out.valid.resize(n);
    out.source = PrototypeSource::fused;
    for (std::size_t c = 0; c < n; ++c) {
        const bool l = labeled.valid[c], u = unlabeled.valid[c];
        wl[c] = l ? (u ? T{1} - gamma : T{1}) : T{0};
        wu[c] = u ? (l ? gamma : T{1}) : T{0};
        out.valid[c] = l || u;
    }
    out.vectors = labeled.vectors * ad::Var<T>::constant(std::move(wl)) +
                  unlabeled.vectors * ad::Var<T>::constant(std::move(wu));
    return out;
}

namespace detail {

// Unit-normalizes the rows of [rows, cols] (axis selects which axis is summed).
template <typename T>
ad::Var<T> unit_normalize(const ad::Var<T>& x, std::size_t axis) {
    auto norm = ad::power(ad::sum(x * x, {axis}) + T{1e-24}, T{0.5});
    return x / norm;
}

}  // namespace detail

// softmax(cos(h_v, P_n) / tau) over valid classes; invalid classes get 0.
template <typename T>
ad::Var<T> similarity_probs(const ad::Var<T>& features, const PrototypeSet<T>& protos, T tau) {
    if (!(tau > T{0})) throw DomainError("temperature must be positive");
    if (!protos.any_valid()) throw DomainError("similarity_probs needs at least one valid prototype");
    const Shape& s = features.shape();
    if (s.size() != 4 || s[0] != protos.dim()) throw ShapeError("feature channels do not match prototype dim");
    const std::size_t v = s[1] * s[2] * s[3];
    auto h = detail::unit_normalize(ad::reshape(features, Shape{s[0], v}), 0);
    auto p = detail::unit_normalize(protos.vectors, 1);
    auto cos = ad::reshape(ad::matmul(p, h), Shape{protos.num_classes(), s[1], s[2], s[3]});
    return ad::masked_softmax0(cos * (T{1} / tau), protos.valid);
}

// gamma(t) = gamma_max exp(-5 (1 - t/T)^2)
inline double gaussian_rampup(double t, double total, double max_value) {
    if (total <= 0) return max_value;
    const double phase = 1.0 - std::clamp(t, 0.0, total) / total;
    return max_value * std::exp(-5.0 * phase * phase);
}

}  // namespace epl

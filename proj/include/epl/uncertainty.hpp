#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "epl/evidence.hpp"

namespace epl {

// Per-voxel non-negative uncertainty, stored as [1, D, H, W].
template <typename T>
struct UncertaintyField {
    Tensor<T> values;

    Shape3 spatial() const { return spatial_of(values.shape()); }
    std::size_t size() const { return values.size(); }
    T operator[](std::size_t i) const { return values[i]; }
};

// Per-voxel weight in [0, 1], stored as [1, D, H, W].
template <typename T>
struct ReliabilityMap {
    Tensor<T> values;

    static ReliabilityMap ones(Shape3 s) { return {Tensor<T>({1, s[0], s[1], s[2]}, T{1})}; }

    Shape3 spatial() const { return spatial_of(values.shape()); }
    std::size_t size() const { return values.size(); }
    T operator[](std::size_t i) const { return values[i]; }
};

enum class NormScope { volume, batch };

// Belief entropy of one voxel weighted by its universal mass u:
//   U = -u * sum_n f(C_n) log2(f(C_n) / (2^|C_n| - 1))
// with |C_n| = 1 for singletons and N for the universal set. Zero masses
// contribute nothing.
inline double dual_uncertainty_voxel(std::span<const double> singletons, double universal) {
    const double eps = kGuardEpsilon;
    const auto n = static_cast<double>(singletons.size());
    double entropy = 0;
    for (double f : singletons)
        if (f > 0) entropy += f * std::log2(std::max(f, eps));
    if (universal > 0) entropy += universal * std::log2(std::max(universal, eps) / (std::exp2(n) - 1.0));
    // certain masses give -0.0
    const double u = -universal * entropy;
    return u > 0 ? u : 0.0;
}

template <typename T>
UncertaintyField<T> dual_uncertainty(const MassField<T>& m) {
    const std::size_t n = m.num_classes(), v = m.voxels();
    const Shape3 sp = m.spatial();
    UncertaintyField<T> out{Tensor<T>({1, sp[0], sp[1], sp[2]})};
    std::vector<double> singles(n);
    for (std::size_t i = 0; i < v; ++i) {
        for (std::size_t c = 0; c < n; ++c) singles[c] = m.singleton(c, i);
        out.values[i] = static_cast<T>(dual_uncertainty_voxel(singles, m.universal(i)));
    }
    return out;
}

// Min-max normalization of every field in the batch. With NormScope::volume
// each field uses its own range; with NormScope::batch the range is pooled.
// A degenerate range maps to all zeros.
template <typename T>
std::vector<UncertaintyField<T>> normalize01(const std::vector<UncertaintyField<T>>& fields,
                                             NormScope scope = NormScope::volume) {
    auto range_of = [](const UncertaintyField<T>& f, T& lo, T& hi) {
        for (auto x : f.values.values()) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    };
    std::vector<UncertaintyField<T>> out;
    T blo = std::numeric_limits<T>::infinity(), bhi = -blo;
    if (scope == NormScope::batch)
        for (const auto& f : fields) range_of(f, blo, bhi);
    for (const auto& f : fields) {
        if (f.size() == 0) throw EmptyReductionError("normalize01 of an empty field");
        T lo = blo, hi = bhi;
        if (scope == NormScope::volume) {
            lo = std::numeric_limits<T>::infinity();
            hi = -lo;
            range_of(f, lo, hi);
        }
        UncertaintyField<T> n{Tensor<T>(f.values.shape())};
        if (hi > lo)
            for (std::size_t i = 0; i < f.size(); ++i)
                n.values[i] = std::clamp((f.values[i] - lo) / (hi - lo), T{0}, T{1});
        out.push_back(std::move(n));
    }
    return out;
}

template <typename T>
UncertaintyField<T> normalize01(const UncertaintyField<T>& field) {
    return normalize01(std::vector<UncertaintyField<T>>{field}, NormScope::volume)[0];
}

// beta = 1 - normalized uncertainty.
template <typename T>
ReliabilityMap<T> reliability_map(const UncertaintyField<T>& normalized) {
    ReliabilityMap<T> out{Tensor<T>(normalized.values.shape())};
    for (std::size_t i = 0; i < normalized.size(); ++i) {
        const T u = normalized[i];
        if (!(u >= T{0} && u <= T{1})) throw DomainError("normalized uncertainty outside [0,1]");
        out.values[i] = T{1} - u;
    }
    return out;
}

}  // namespace epl

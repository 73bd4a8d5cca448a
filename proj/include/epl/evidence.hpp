#pragma once

// Mass assignments restricted to singletons plus the universal set, their
// combination by Dempster's rule, and the induced Dirichlet parameters.
//
// Every operation exists twice: a plain version over MassField values (used
// by the teacher, the CLI and the oracles) and a differentiable version over
// ad::Var tensors laid out as [N+1, D, H, W] (singletons first, universal
// last) used inside the training graph.

#include <cmath>
#include <span>
#include <vector>

#include "epl/autodiff.hpp"
#include "epl/tensor.hpp"

namespace epl {

// 1 - conflict below this is treated as total conflict.
inline constexpr double kConflictFloor = 1e-9;
// dirichlet_from_mass refuses universal masses below this.
inline constexpr double kMinUniversalMass = 1e-12;

struct FusionOptions {
    // false reproduces the unnormalized universal term f1(C_N) f2(C_N).
    bool normalize_universal = true;
};

enum class HeadFusion { average, dempster };

template <typename T>
class MassField {
   public:
    MassField() = default;

    // masses: [N+1, D, H, W], singletons then universal.
    explicit MassField(Tensor<T> masses) : masses_(std::move(masses)) {
        if (masses_.rank() != 4 || masses_.extent(0) < 3)
            throw ShapeError("mass field must be [N+1,D,H,W] with N >= 2, got " +
                             shape_str(masses_.shape()));
    }

    static MassField vacuous(std::size_t num_classes, Shape3 spatial) {
        Tensor<T> t({num_classes + 1, spatial[0], spatial[1], spatial[2]});
        const std::size_t v = voxel_count(spatial);
        for (std::size_t i = 0; i < v; ++i) t[num_classes * v + i] = T{1};
        return MassField(std::move(t));
    }

    std::size_t num_classes() const { return masses_.extent(0) - 1; }
    Shape3 spatial() const { return spatial_of(masses_.shape()); }
    std::size_t voxels() const { return voxel_count(spatial()); }

    T singleton(std::size_t n, std::size_t voxel) const { return masses_[n * voxels() + voxel]; }
    T universal(std::size_t voxel) const { return masses_[num_classes() * voxels() + voxel]; }

    const Tensor<T>& tensor() const { return masses_; }

    // max over voxels of |sum of all masses - 1|
    double max_normalization_error() const {
        const std::size_t v = voxels(), n1 = num_classes() + 1;
        double worst = 0;
        for (std::size_t i = 0; i < v; ++i) {
            double s = 0;
            for (std::size_t c = 0; c < n1; ++c) s += masses_[c * v + i];
            worst = std::max(worst, std::abs(s - 1.0));
        }
        return worst;
    }

    void validate(double tol = 1e-6) const {
        for (auto m : masses_.values())
            if (!(m >= T{0})) throw DomainError("mass field has a negative or NaN component");
        if (max_normalization_error() > tol) throw DomainError("mass field is not normalized");
    }

   private:
    Tensor<T> masses_;
};

template <typename T>
struct DirichletField {
    Tensor<T> strength;  // [1, D, H, W]
    Tensor<T> evidence;  // [N, D, H, W]
    Tensor<T> alpha;     // [N, D, H, W]

    std::size_t num_classes() const { return alpha.extent(0); }
};

// ---------------------------------------------------------------------------
// Plain field operations

// S = sum(e) + (N-1); f(C_n) = e_n / S; f(C_N) = (N-1) / S.
template <typename T>
MassField<T> mass_from_evidence(const Tensor<T>& evidence) {
    if (evidence.rank() != 4) throw ShapeError("evidence must be [N,D,H,W]");
    const std::size_t n = evidence.extent(0);
    if (n < 2) throw DomainError("mass_from_evidence needs N >= 2");
    for (auto e : evidence.values())
        if (!(e >= T{0})) throw DomainError("evidence must be non-negative");
    const Shape3 sp = spatial_of(evidence.shape());
    const std::size_t v = voxel_count(sp);
    Tensor<T> out({n + 1, sp[0], sp[1], sp[2]});
    for (std::size_t i = 0; i < v; ++i) {
        T s = static_cast<T>(n - 1);
        for (std::size_t c = 0; c < n; ++c) s += evidence[c * v + i];
        for (std::size_t c = 0; c < n; ++c) out[c * v + i] = evidence[c * v + i] / s;
        out[n * v + i] = static_cast<T>(n - 1) / s;
    }
    return MassField<T>(std::move(out));
}

inline std::array<std::size_t, 3> voxel_coords(std::size_t index, Shape3 shape) {
    return {index / (shape[1] * shape[2]), (index / shape[2]) % shape[1], index % shape[2]};
}

template <typename T>
MassField<T> dempster_pair(const MassField<T>& m1, const MassField<T>& m2, FusionOptions opt = {}) {
    if (m1.num_classes() != m2.num_classes() || m1.spatial() != m2.spatial())
        throw ShapeError("dempster_pair operands are not congruent");
    const std::size_t n = m1.num_classes(), v = m1.voxels();
    const auto& a = m1.tensor();
    const auto& b = m2.tensor();
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < v; ++i) {
        double sa = 0, sb = 0, agree = 0;
        for (std::size_t c = 0; c < n; ++c) {
            sa += a[c * v + i];
            sb += b[c * v + i];
            agree += static_cast<double>(a[c * v + i]) * b[c * v + i];
        }
        const double conflict = sa * sb - agree;
        const double keep = 1.0 - conflict;
        if (keep < kConflictFloor) throw ConflictError(voxel_coords(i, m1.spatial()), conflict);
        const double ua = a[n * v + i], ub = b[n * v + i];
        for (std::size_t c = 0; c < n; ++c) {
            const double fa = a[c * v + i], fb = b[c * v + i];
            out[c * v + i] = static_cast<T>((fa * fb + fa * ub + fb * ua) / keep);
        }
        out[n * v + i] = static_cast<T>(opt.normalize_universal ? ua * ub / keep : ua * ub);
    }
    return MassField<T>(std::move(out));
}

// Left fold of dempster_pair over T >= 1 sources.
template <typename T>
MassField<T> dempster_fuse_all(std::span<const MassField<T>> masses, FusionOptions opt = {}) {
    if (masses.empty()) throw ShapeError("dempster_fuse_all needs at least one mass field");
    MassField<T> acc = masses[0];
    for (std::size_t t = 1; t < masses.size(); ++t) acc = dempster_pair(acc, masses[t], opt);
    return acc;
}

template <typename T>
MassField<T> dempster_fuse_all(const std::vector<MassField<T>>& masses, FusionOptions opt = {}) {
    return dempster_fuse_all(std::span<const MassField<T>>(masses), opt);
}

// Arithmetic mean of the sources, renormalized per voxel.
template <typename T>
MassField<T> average_fuse(const std::vector<MassField<T>>& masses) {
    if (masses.empty()) throw ShapeError("average_fuse needs at least one mass field");
    const auto& first = masses[0];
    Tensor<T> out(first.tensor().shape());
    for (const auto& m : masses) {
        if (m.num_classes() != first.num_classes() || m.spatial() != first.spatial())
            throw ShapeError("average_fuse operands are not congruent");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += m.tensor()[i];
    }
    const std::size_t n1 = first.num_classes() + 1, v = first.voxels();
    for (std::size_t i = 0; i < v; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < n1; ++c) s += out[c * v + i];
        for (std::size_t c = 0; c < n1; ++c) out[c * v + i] = static_cast<T>(out[c * v + i] / s);
    }
    return MassField<T>(std::move(out));
}

template <typename T>
MassField<T> fuse_heads(const std::vector<MassField<T>>& masses, HeadFusion mode,
                        FusionOptions opt = {}) {
    return mode == HeadFusion::dempster ? dempster_fuse_all(masses, opt) : average_fuse(masses);
}

// S = (N-1)/f(C_N); e_n = f(C_n) S; alpha_n = e_n + 1.
template <typename T>
DirichletField<T> dirichlet_from_mass(const MassField<T>& m) {
    const std::size_t n = m.num_classes(), v = m.voxels();
    const Shape3 sp = m.spatial();
    DirichletField<T> d{Tensor<T>({1, sp[0], sp[1], sp[2]}), Tensor<T>({n, sp[0], sp[1], sp[2]}),
                        Tensor<T>({n, sp[0], sp[1], sp[2]})};
    for (std::size_t i = 0; i < v; ++i) {
        const T u = m.universal(i);
        if (!(u >= static_cast<T>(kMinUniversalMass)))
            throw DomainError("universal mass below 1e-12 at voxel " + std::to_string(i));
        const T s = static_cast<T>(n - 1) / u;
        d.strength[i] = s;
        for (std::size_t c = 0; c < n; ++c) {
            d.evidence[c * v + i] = m.singleton(c, i) * s;
            d.alpha[c * v + i] = d.evidence[c * v + i] + T{1};
        }
    }
    return d;
}

template <typename T>
Tensor<T> expected_probs(const DirichletField<T>& d) {
    const std::size_t n = d.num_classes();
    const std::size_t v = d.alpha.size() / n;
    Tensor<T> p(d.alpha.shape());
    for (std::size_t i = 0; i < v; ++i) {
        T total{0};
        for (std::size_t c = 0; c < n; ++c) total += d.alpha[c * v + i];
        for (std::size_t c = 0; c < n; ++c) p[c * v + i] = d.alpha[c * v + i] / total;
    }
    return p;
}

// Argmax over singleton masses; ties go to the lowest class index.
template <typename T>
LabelVolume pseudo_labels(const MassField<T>& m) {
    LabelVolume out(m.spatial());
    const std::size_t n = m.num_classes(), v = m.voxels();
    for (std::size_t i = 0; i < v; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (m.singleton(c, i) > m.singleton(best, i)) best = c;
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Differentiable counterparts over [N+1, D, H, W] mass tensors

namespace graph {

using ad::Var;

template <typename T>
Var<T> mass_from_evidence(const Var<T>& evidence) {
    const std::size_t n = evidence.shape().at(0);
    if (n < 2) throw DomainError("mass_from_evidence needs N >= 2");
    auto strength = ad::sum(evidence, {0}) + static_cast<T>(n - 1);
    auto singles = evidence / strength;
    auto universal = static_cast<T>(n - 1) / strength;
    return ad::concat0<T>({singles, universal});
}

template <typename T>
Var<T> dempster_pair(const Var<T>& m1, const Var<T>& m2, FusionOptions opt = {}) {
    if (m1.shape() != m2.shape()) throw ShapeError("dempster_pair operands are not congruent");
    const std::size_t n = m1.shape()[0] - 1;
    auto s1 = ad::slice0(m1, 0, n), u1 = ad::slice0(m1, n, 1);
    auto s2 = ad::slice0(m2, 0, n), u2 = ad::slice0(m2, n, 1);
    auto conflict = ad::sum(s1, {0}) * ad::sum(s2, {0}) - ad::sum(s1 * s2, {0});
    const auto& cv = conflict.value();
    for (std::size_t i = 0; i < cv.size(); ++i)
        if (1.0 - static_cast<double>(cv[i]) < kConflictFloor)
            throw ConflictError(voxel_coords(i, spatial_of(m1.shape())), cv[i]);
    auto keep = T{1} - conflict;
    auto singles = (s1 * s2 + s1 * u2 + s2 * u1) / keep;
    auto universal = opt.normalize_universal ? (u1 * u2) / keep : u1 * u2;
    return ad::concat0<T>({singles, universal});
}

template <typename T>
Var<T> average_fuse(const std::vector<Var<T>>& masses) {
    if (masses.empty()) throw ShapeError("average_fuse needs at least one mass field");
    Var<T> acc = masses[0];
    for (std::size_t t = 1; t < masses.size(); ++t) acc = acc + masses[t];
    return acc / ad::sum(acc, {0});
}

template <typename T>
Var<T> fuse_heads(const std::vector<Var<T>>& masses, HeadFusion mode, FusionOptions opt = {}) {
    if (masses.empty()) throw ShapeError("fuse_heads needs at least one mass field");
    if (mode == HeadFusion::average) return average_fuse(masses);
    Var<T> acc = masses[0];
    for (std::size_t t = 1; t < masses.size(); ++t) acc = dempster_pair(acc, masses[t], opt);
    return acc;
}

template <typename T>
struct Dirichlet {
    Var<T> strength;  // [1, D, H, W]
    Var<T> alpha;     // [N, D, H, W]
};

template <typename T>
Dirichlet<T> dirichlet_from_mass(const Var<T>& mass) {
    const std::size_t n = mass.shape()[0] - 1;
    auto strength = static_cast<T>(n - 1) / ad::slice0(mass, n, 1);
    auto alpha = ad::slice0(mass, 0, n) * strength + T{1};
    return {strength, alpha};
}

template <typename T>
Var<T> expected_probs(const Dirichlet<T>& d) {
    return d.alpha / ad::sum(d.alpha, {0});
}

}  // namespace graph

}  // namespace epl

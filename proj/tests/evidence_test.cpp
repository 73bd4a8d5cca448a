#include <gtest/gtest.h>

#include <random>

#include "epl/evidence.hpp"
#include "epl/gradcheck.hpp"
#include "epl/testing/oracles.hpp"
#include "test_util.hpp"

namespace epl {
namespace {

using M = MassField<double>;

// Mass field over a 1x1xV grid from per-voxel [f_0..f_{N-1}, u] vectors.
M field(const std::vector<std::vector<double>>& voxels) {
    const std::size_t n1 = voxels.at(0).size(), v = voxels.size();
    Tensor<double> t({n1, 1, 1, v});
    for (std::size_t i = 0; i < v; ++i)
        for (std::size_t c = 0; c < n1; ++c) t[c * v + i] = voxels[i][c];
    return M(std::move(t));
}

std::vector<double> voxel(const M& m, std::size_t i) {
    std::vector<double> out;
    for (std::size_t c = 0; c < m.num_classes(); ++c) out.push_back(m.singleton(c, i));
    out.push_back(m.universal(i));
    return out;
}

TEST(MassFromEvidence, ZeroEvidenceIsVacuous) {
    auto m = mass_from_evidence(Tensor<double>({2, 1, 1, 1}));
    EXPECT_EQ(voxel(m, 0), (std::vector<double>{0, 0, 1}));
}

TEST(MassFromEvidence, WorkedExample) {
    Tensor<double> e({3, 1, 1, 1}, std::vector<double>{6, 0, 0});
    auto m = mass_from_evidence(e);
    EXPECT_DOUBLE_EQ(m.singleton(0, 0), 0.75);
    EXPECT_DOUBLE_EQ(m.singleton(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(m.universal(0), 0.25);
    EXPECT_DOUBLE_EQ(dirichlet_from_mass(m).strength[0], 8.0);
}

TEST(MassFromEvidence, AlwaysNormalized) {
    std::mt19937_64 rng(1);
    auto m = mass_from_evidence(test::random_tensor({4, 3, 3, 3}, rng, 0.0, 50.0));
    EXPECT_LE(m.max_normalization_error(), 1e-12);
}

TEST(MassFromEvidence, RejectsNegativeEvidence) {
    EXPECT_THROW(mass_from_evidence(Tensor<double>({2, 1, 1, 1}, std::vector<double>{1, -0.5})), DomainError);
    EXPECT_THROW(mass_from_evidence(Tensor<double>({1, 1, 1, 1})), DomainError);
}

TEST(DempsterPair, VacuousIsIdentity) {
    auto m = field({{0.6, 0.2, 0.2}, {0.1, 0.3, 0.6}});
    auto fused = dempster_pair(m, M::vacuous(2, m.spatial()));
    for (std::size_t i = 0; i < m.tensor().size(); ++i) EXPECT_NEAR(fused.tensor()[i], m.tensor()[i], 1e-12);
}

TEST(DempsterPair, WorkedExampleAgainstEnumeration) {
    const std::vector<double> a{0.6, 0.2, 0.2}, b{0.5, 0.3, 0.2};
    const auto ref = oracle::dempster_enumerate({a, b});
    const auto fused = voxel(dempster_pair(field({a}), field({b})), 0);
    // conflict 0.6*0.3 + 0.2*0.5 = 0.28
    EXPECT_NEAR(ref[0], 0.52 / 0.72, 1e-15);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(fused[c], ref[c], 1e-12);
    EXPECT_NEAR(fused[0], 0.7222, 1e-4);
    EXPECT_NEAR(fused[1], 0.2222, 1e-4);
    EXPECT_NEAR(fused[2], 0.0556, 1e-4);
}

TEST(DempsterPair, LiteralUniversalTermIsSubNormalized) {
    auto fused = dempster_pair(field({{0.6, 0.2, 0.2}}), field({{0.5, 0.3, 0.2}}), {.normalize_universal = false});
    EXPECT_NEAR(fused.universal(0), 0.04, 1e-15);
    EXPECT_NEAR(fused.singleton(0, 0) + fused.singleton(1, 0) + fused.universal(0), 0.9844, 1e-4);
}

TEST(DempsterPair, CertainMassIsIdempotent) {
    auto m = field({{0, 1, 0, 0}});
    EXPECT_EQ(voxel(dempster_pair(m, m), 0), voxel(m, 0));
}

TEST(DempsterPair, TotalConflictReportsVoxel) {
    Tensor<double> a({3, 1, 2, 2}), b({3, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        a[2 * 4 + i] = 1;
        b[2 * 4 + i] = 1;
    }
    // voxel (0,1,0): a certain on 0, b certain on 1
    a[2 * 4 + 2] = 0;
    a[0 * 4 + 2] = 1;
    b[2 * 4 + 2] = 0;
    b[1 * 4 + 2] = 1;
    try {
        dempster_pair(M(a), M(b));
        FAIL() << "expected ConflictError";
    } catch (const ConflictError& e) {
        EXPECT_EQ(e.voxel(), (std::array<std::size_t, 3>{0, 1, 0}));
        EXPECT_DOUBLE_EQ(e.conflict(), 1.0);
    }
}

TEST(DempsterPair, ShapeMismatch) {
    EXPECT_THROW(dempster_pair(M::vacuous(2, {1, 1, 2}), M::vacuous(3, {1, 1, 2})), ShapeError);
    EXPECT_THROW(dempster_pair(M::vacuous(2, {1, 1, 2}), M::vacuous(2, {1, 2, 1})), ShapeError);
}

TEST(DempsterFuseAll, SingleSourceIsIdentity) {
    auto m = field({{0.3, 0.3, 0.4}});
    EXPECT_EQ(dempster_fuse_all(std::vector<M>{m}).tensor(), m.tensor());
    EXPECT_THROW(dempster_fuse_all(std::vector<M>{}), ShapeError);
}

TEST(DempsterFuseAll, VacuousMemberDropsOut) {
    auto a = field({{0.5, 0.1, 0.1, 0.3}});
    auto b = field({{0.2, 0.4, 0.1, 0.3}});
    auto with = dempster_fuse_all(std::vector<M>{a, M::vacuous(3, a.spatial()), b});
    auto without = dempster_pair(a, b);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(with.tensor()[i], without.tensor()[i], 1e-12);
}

// Random masses with conflict kept away from 1.
std::vector<double> tame_mass(std::size_t n, std::mt19937_64& rng) {
    auto m = oracle::random_mass(n, rng);
    m[n] = std::max(m[n], 0.05);
    double s = 0;
    for (auto x : m) s += x;
    for (auto& x : m) x /= s;
    return m;
}

TEST(DempsterProperties, RandomizedAlgebra) {
    std::mt19937_64 rng(2);
    for (std::size_t n : {2u, 3u, 4u}) {
        std::vector<std::vector<double>> va, vb, vc;
        for (int i = 0; i < 400; ++i) {
            va.push_back(tame_mass(n, rng));
            vb.push_back(tame_mass(n, rng));
            vc.push_back(tame_mass(n, rng));
        }
        auto a = field(va), b = field(vb), c = field(vc);
        auto ab = dempster_pair(a, b), ba = dempster_pair(b, a);
        auto left = dempster_pair(ab, c), right = dempster_pair(a, dempster_pair(b, c));
        auto vac = dempster_pair(a, M::vacuous(n, a.spatial()));
        EXPECT_LE(ab.max_normalization_error(), 1e-9);
        EXPECT_LE(left.max_normalization_error(), 1e-9);
        for (std::size_t i = 0; i < ab.tensor().size(); ++i) {
            EXPECT_NEAR(ab.tensor()[i], ba.tensor()[i], 1e-12);
            EXPECT_NEAR(left.tensor()[i], right.tensor()[i], 1e-9);
            EXPECT_NEAR(vac.tensor()[i], a.tensor()[i], 1e-12);
        }
        for (std::size_t i = 0; i < ab.voxels(); ++i)
            EXPECT_LE(ab.universal(i), std::min(a.universal(i), b.universal(i)) + 1e-12);
    }
}

TEST(DempsterProperties, MatchesFocalEnumeration) {
    std::mt19937_64 rng(3);
    for (std::size_t n = 2; n <= 4; ++n)
        for (std::size_t t = 1; t <= 4; ++t)
            for (int trial = 0; trial < 25; ++trial) {
                std::vector<std::vector<double>> sources;
                std::vector<M> fields;
                for (std::size_t k = 0; k < t; ++k) {
                    sources.push_back(tame_mass(n, rng));
                    fields.push_back(field({sources.back()}));
                }
                const auto ref = oracle::dempster_enumerate(sources);
                const auto got = voxel(dempster_fuse_all(fields), 0);
                for (std::size_t c = 0; c <= n; ++c) EXPECT_NEAR(got[c], ref[c], 1e-9);
            }
}

TEST(Dirichlet, WorkedExample) {
    auto d = dirichlet_from_mass(field({{0.5, 0.25, 0.0, 0.25}}));
    EXPECT_DOUBLE_EQ(d.strength[0], 8.0);
    EXPECT_DOUBLE_EQ(d.evidence[0], 4.0);
    EXPECT_DOUBLE_EQ(d.alpha[0], 5.0);
}

TEST(Dirichlet, VacuousIsFlat) {
    auto d = dirichlet_from_mass(M::vacuous(2, {1, 1, 1}));
    EXPECT_EQ(d.strength[0], 1.0);
    EXPECT_EQ(d.evidence[0], 0.0);
    EXPECT_EQ(d.alpha[1], 1.0);
}

TEST(Dirichlet, RoundTripRecoversEvidence) {
    std::mt19937_64 rng(4);
    auto e = test::random_tensor({3, 2, 2, 2}, rng, 0.0, 20.0);
    auto d = dirichlet_from_mass(mass_from_evidence(e));
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(d.evidence[i], e[i], 1e-9);
}

TEST(Dirichlet, RejectsVanishingUniversalMass) {
    EXPECT_THROW(dirichlet_from_mass(field({{1.0, 0.0, 0.0}})), DomainError);
}

TEST(ExpectedProbs, Examples) {
    auto uniform = expected_probs(dirichlet_from_mass(M::vacuous(2, {1, 1, 1})));
    EXPECT_DOUBLE_EQ(uniform[0], 0.5);
    EXPECT_DOUBLE_EQ(uniform[1], 0.5);
    DirichletField<double> d{Tensor<double>({1, 1, 1, 1}, 6.0), Tensor<double>({3, 1, 1, 1}),
                             Tensor<double>({3, 1, 1, 1}, std::vector<double>{5, 1, 1})};
    auto p = expected_probs(d);
    EXPECT_DOUBLE_EQ(p[0], 5.0 / 7.0);
    EXPECT_DOUBLE_EQ(p[1], 1.0 / 7.0);
    EXPECT_DOUBLE_EQ(p[2], 1.0 / 7.0);
}

TEST(ExpectedProbs, PermutationEquivariant) {
    std::mt19937_64 rng(5);
    auto e = test::random_tensor({3, 1, 1, 4}, rng, 0.0, 5.0);
    Tensor<double> perm(e.shape());
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) perm[c * 4 + i] = e[order[c] * 4 + i];
    auto p = expected_probs(dirichlet_from_mass(mass_from_evidence(e)));
    auto q = expected_probs(dirichlet_from_mass(mass_from_evidence(perm)));
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(q[c * 4 + i], p[order[c] * 4 + i], 1e-15);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[i] + p[4 + i] + p[8 + i], 1.0, 1e-12);
}

TEST(PseudoLabels, Examples) {
    EXPECT_EQ(pseudo_labels(field({{0, 0, 1, 0}}))[0], 2);
    EXPECT_EQ(pseudo_labels(field({{0.4, 0.4, 0.2}}))[0], 0);
    auto fused = dempster_pair(field({{0.6, 0.2, 0.2}}), field({{0.5, 0.3, 0.2}}));
    EXPECT_EQ(pseudo_labels(fused)[0], 0);
}

TEST(GraphEvidence, MatchesFieldOperations) {
    std::mt19937_64 rng(6);
    auto e1 = test::random_tensor({3, 2, 2, 2}, rng, 0.0, 4.0);
    auto e2 = test::random_tensor({3, 2, 2, 2}, rng, 0.0, 4.0);
    using V = ad::Var<double>;
    auto g1 = graph::mass_from_evidence(V::constant(e1));
    auto g2 = graph::mass_from_evidence(V::constant(e2));
    auto f1 = mass_from_evidence(e1), f2 = mass_from_evidence(e2);
    auto gd = graph::dempster_pair(g1, g2).value();
    auto fd = dempster_pair(f1, f2).tensor();
    for (std::size_t i = 0; i < gd.size(); ++i) EXPECT_NEAR(gd[i], fd[i], 1e-12);
    auto ga = graph::average_fuse<double>({g1, g2}).value();
    auto fa = average_fuse(std::vector<M>{f1, f2}).tensor();
    for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(ga[i], fa[i], 1e-12);
    auto gp = graph::expected_probs(graph::dirichlet_from_mass(g1)).value();
    auto fp = expected_probs(dirichlet_from_mass(f1));
    for (std::size_t i = 0; i < gp.size(); ++i) EXPECT_NEAR(gp[i], fp[i], 1e-12);
}

TEST(GraphEvidence, FusionGradient) {
    std::mt19937_64 rng(7);
    auto other = test::random_tensor({3, 2, 1, 2}, rng, 0.0, 3.0);
    auto probe = test::random_tensor({3, 2, 1, 2}, rng);
    using V = ad::Var<double>;
    ad::ScalarFunction<double> f = [&](const V& logits) {
        auto m1 = graph::mass_from_evidence(ad::softplus(logits));
        auto m2 = graph::mass_from_evidence(V::constant(other));
        auto d = graph::dirichlet_from_mass(graph::dempster_pair(m1, m2));
        return ad::sum_all(ad::log(graph::expected_probs(d)) * V::constant(probe));
    };
    EXPECT_LE(ad::finite_diff_check(f, test::random_tensor({3, 2, 1, 2}, rng, -2.0, 2.0), 1e-5), 1e-4);
}

}  // namespace
}  // namespace epl

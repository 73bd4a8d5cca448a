#pragma once

// Independent brute-force references used by the unit tests, the acceptance
// suite and `epl selftest`. Nothing here calls into the production code paths
// it is meant to check.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

namespace epl::oracle {

// Exhaustive Dempster combination of T sources over the frame {0..N-1}.
// Each source is [f(C_0) .. f(C_{N-1}), f(C_N)]. Focal sets are bitmasks;
// every T-tuple of focal elements is enumerated, products land on the
// intersection, the empty set collects the conflict and a single final
// normalization by 1 - conflict is applied.
inline std::vector<double> dempster_enumerate(const std::vector<std::vector<double>>& sources) {
    const std::size_t n = sources.at(0).size() - 1;
    const std::uint32_t all = (1u << n) - 1u;
    auto focal = [&](std::size_t k) { return k == n ? all : (1u << k); };
    std::map<std::uint32_t, long double> acc;
    std::vector<std::size_t> pick(sources.size(), 0);
    while (true) {
        std::uint32_t set = all;
        long double prod = 1;
        for (std::size_t t = 0; t < sources.size(); ++t) {
            set &= focal(pick[t]);
            prod *= sources[t][pick[t]];
        }
        acc[set] += prod;
        std::size_t t = 0;
        while (t < pick.size() && ++pick[t] == n + 1) pick[t++] = 0;
        if (t == pick.size()) break;
    }
    const long double keep = 1.0L - acc[0];
    std::vector<double> out(n + 1, 0.0);
    for (std::size_t k = 0; k < n; ++k) out[k] = static_cast<double>(acc[1u << k] / keep);
    out[n] = static_cast<double>(acc[all] / keep);
    return out;
}

// Long-double evaluation of -u * sum f log2(f / (2^|C|-1)).
inline double dual_uncertainty(const std::vector<double>& singletons, double universal) {
    long double s = 0;
    for (double f : singletons)
        if (f > 0) s += static_cast<long double>(f) * std::log2(static_cast<long double>(f));
    if (universal > 0) {
        const long double denom = std::pow(2.0L, static_cast<long double>(singletons.size())) - 1.0L;
        s += universal * std::log2(static_cast<long double>(universal) / denom);
    }
    return static_cast<double>(-universal * s);
}

// Direct nested-loop cross-correlation, zero padding, single volume.
// input [ci][d][h][w] flattened; kernel [co][ci][k][k][k] flattened.
inline std::vector<double> conv3d_direct(const std::vector<double>& input, std::size_t ci, std::size_t d,
                                         std::size_t h, std::size_t w, const std::vector<double>& kernel,
                                         std::size_t co, std::size_t k, std::size_t stride, std::size_t pad,
                                         std::size_t& od, std::size_t& oh, std::size_t& ow) {
    od = (d + 2 * pad - k) / stride + 1;
    oh = (h + 2 * pad - k) / stride + 1;
    ow = (w + 2 * pad - k) / stride + 1;
    std::vector<double> out(co * od * oh * ow, 0.0);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t z = 0; z < od; ++z)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    double s = 0;
                    for (std::size_t c = 0; c < ci; ++c)
                        for (std::size_t a = 0; a < k; ++a)
                            for (std::size_t b = 0; b < k; ++b)
                                for (std::size_t e = 0; e < k; ++e) {
                                    const long iz = long(z * stride + a) - long(pad);
                                    const long iy = long(y * stride + b) - long(pad);
                                    const long ix = long(x * stride + e) - long(pad);
                                    if (iz < 0 || iy < 0 || ix < 0 || iz >= long(d) || iy >= long(h) ||
                                        ix >= long(w))
                                        continue;
                                    s += input[((c * d + iz) * h + iy) * w + ix] *
                                         kernel[(((o * ci + c) * k + a) * k + b) * k + e];
                                }
                    out[((o * od + z) * oh + y) * ow + x] = s;
                }
    return out;
}

// Half-pixel linear resampling of a 1D signal, written from the definition
// x_src = (i + 0.5) * in/out - 0.5 clamped to the valid range.
inline std::vector<double> linear_resample_1d(const std::vector<double>& in, std::size_t out_len) {
    std::vector<double> out(out_len);
    for (std::size_t i = 0; i < out_len; ++i) {
        double src = (i + 0.5) * double(in.size()) / double(out_len) - 0.5;
        src = std::clamp(src, 0.0, double(in.size() - 1));
        const std::size_t lo = std::size_t(std::floor(src));
        const std::size_t hi = std::min(lo + 1, in.size() - 1);
        out[i] = in[lo] + (src - lo) * (in[hi] - in[lo]);
    }
    return out;
}

struct SurfaceOracleResult {
    double hd95;
    double asd;
};

// All-pairs surface distances between two binary masks on a (d,h,w) grid.
// Surface voxels have a 6-neighbour outside the mask (grid border counts as
// outside). Percentile by linear interpolation between order statistics.
inline SurfaceOracleResult surface_distances_all_pairs(const std::vector<std::uint8_t>& a,
                                                       const std::vector<std::uint8_t>& b, std::size_t d,
                                                       std::size_t h, std::size_t w) {
    auto surface = [&](const std::vector<std::uint8_t>& m) {
        std::vector<std::array<long, 3>> pts;
        auto in = [&](long z, long y, long x) {
            return z >= 0 && y >= 0 && x >= 0 && z < long(d) && y < long(h) && x < long(w) &&
                   m[(z * h + y) * w + x];
        };
        for (long z = 0; z < long(d); ++z)
            for (long y = 0; y < long(h); ++y)
                for (long x = 0; x < long(w); ++x)
                    if (in(z, y, x) && (!in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) ||
                                        !in(z, y + 1, x) || !in(z, y, x - 1) || !in(z, y, x + 1)))
                        pts.push_back({z, y, x});
        return pts;
    };
    const auto sa = surface(a), sb = surface(b);
    std::vector<double> dists;
    auto directed = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            long best = -1;
            for (const auto& q : to) {
                const long dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                const long s = dz * dz + dy * dy + dx * dx;
                if (best < 0 || s < best) best = s;
            }
            dists.push_back(std::sqrt(double(best)));
        }
    };
    directed(sa, sb);
    directed(sb, sa);
    std::sort(dists.begin(), dists.end());
    double sum = 0;
    for (double x : dists) sum += x;
    const double rank = 0.95 * double(dists.size() - 1);
    const std::size_t lo = std::size_t(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, dists.size() - 1);
    return {dists[lo] + (rank - lo) * (dists[hi] - dists[lo]), sum / double(dists.size())};
}

// Random normalized mass vector [f_0..f_{N-1}, u]. Occasionally zeroes a
// component so boundary cases get exercised.
template <typename Rng>
std::vector<double> random_mass(std::size_t n, Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> m(n + 1);
    double s = 0;
    for (auto& x : m) {
        x = unit(rng) < 0.1 ? 0.0 : -std::log(1.0 - unit(rng) * 0.999999);
        s += x;
    }
    if (s == 0) {
        m[n] = 1;
        return m;
    }
    for (auto& x : m) x /= s;
    return m;
}

}  // namespace epl::oracle

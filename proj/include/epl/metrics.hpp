#pragma once

// Dice, Jaccard, 95th-percentile Hausdorff distance and average symmetric
// surface distance on label volumes. Distances are in voxel units.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "epl/errors.hpp"
#include "epl/tensor.hpp"

namespace epl::metrics {

struct Overlap {
    double dice = 0;
    double jaccard = 0;
};

struct SurfaceDistances {
    double hd95 = 0;
    double asd = 0;
};

using Mask = std::vector<std::uint8_t>;

inline Mask class_mask(const LabelVolume& l, std::size_t k) {
    Mask m(l.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = l[i] == k;
    return m;
}

inline void check_congruent(const LabelVolume& a, const LabelVolume& b) {
    if (a.shape != b.shape || a.size() != b.size()) throw ShapeError("prediction and ground truth differ in shape");
}

// Both-empty counts as a perfect match.
inline Overlap dice_jaccard(const LabelVolume& pred, const LabelVolume& gt, std::size_t k) {
    check_congruent(pred, gt);
    std::size_t p = 0, g = 0, inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] == k, b = gt[i] == k;
        p += a;
        g += b;
        inter += a && b;
    }
    if (p + g == 0) return {1.0, 1.0};
    return {2.0 * double(inter) / double(p + g), double(inter) / double(p + g - inter)};
}

namespace detail {

// Mask voxels with a 6-neighbour outside the mask; the grid border is outside.
inline Mask surface(const Mask& m, Shape3 s) {
    Mask out(m.size(), 0);
    const long d = long(s[0]), h = long(s[1]), w = long(s[2]);
    auto in = [&](long z, long y, long x) {
        return z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w && m[std::size_t((z * h + y) * w + x)];
    };
    for (long z = 0; z < d; ++z)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x)
                if (in(z, y, x) && (!in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) || !in(z, y + 1, x) ||
                                    !in(z, y, x - 1) || !in(z, y, x + 1)))
                    out[std::size_t((z * h + y) * w + x)] = 1;
    return out;
}

// Exact squared Euclidean distance to the nearest site, one axis at a time:
// g(i) = min_j f(j) + (i - j)^2 in integer arithmetic.
inline std::vector<std::int64_t> squared_distance_transform(const Mask& sites, Shape3 s) {
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    std::vector<std::int64_t> f(sites.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites[i] ? 0 : inf;
    const std::size_t strides[3] = {s[1] * s[2], s[2], 1};
    std::vector<std::int64_t> line, res;
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t n = s[axis], step = strides[axis];
        line.resize(n);
        res.resize(n);
        for (std::size_t base = 0; base < f.size(); ++base) {
            // visit each line once, from its first element
            if ((base / step) % n != 0) continue;
            for (std::size_t i = 0; i < n; ++i) line[i] = f[base + i * step];
            for (std::size_t i = 0; i < n; ++i) {
                std::int64_t best = inf;
                for (std::size_t j = 0; j < n; ++j) {
                    if (line[j] >= inf) continue;
                    const auto di = std::int64_t(i) - std::int64_t(j);
                    best = std::min(best, line[j] + di * di);
                }
                res[i] = best;
            }
            for (std::size_t i = 0; i < n; ++i) f[base + i * step] = res[i];
        }
    }
    return f;
}

}  // namespace detail

// Pooled directed surface distances between two non-empty binary masks.
inline SurfaceDistances surface_distances(const Mask& a, const Mask& b, Shape3 s) {
    const auto sa = detail::surface(a, s), sb = detail::surface(b, s);
    const auto ta = detail::squared_distance_transform(sa, s), tb = detail::squared_distance_transform(sb, s);
    std::vector<double> dists;
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (sa[i]) dists.push_back(std::sqrt(double(tb[i])));
    for (std::size_t i = 0; i < sb.size(); ++i)
        if (sb[i]) dists.push_back(std::sqrt(double(ta[i])));
    if (dists.empty()) throw UndefinedMetric("surface distance of an empty mask");
    std::sort(dists.begin(), dists.end());
    double sum = 0;
    for (double x : dists) sum += x;
    const double rank = 0.95 * double(dists.size() - 1);
    const auto lo = std::size_t(std::floor(rank));
    const auto hi = std::min(lo + 1, dists.size() - 1);
    return {dists[lo] + (rank - double(lo)) * (dists[hi] - dists[lo]), sum / double(dists.size())};
}

// Throws UndefinedMetric when class k is absent from either volume.
inline SurfaceDistances surface_distances(const LabelVolume& pred, const LabelVolume& gt, std::size_t k) {
    check_congruent(pred, gt);
    const auto a = class_mask(pred, k), b = class_mask(gt, k);
    if (std::find(a.begin(), a.end(), 1) == a.end() || std::find(b.begin(), b.end(), 1) == b.end())
        throw UndefinedMetric("class " + std::to_string(k) + " is empty in prediction or ground truth");
    return surface_distances(a, b, pred.shape);
}

struct ClassMetrics {
    std::size_t cls = 0;
    double dice = 0;
    double jaccard = 0;
    std::optional<double> hd95;
    std::optional<double> asd;
};

// Per foreground class, averaged over volumes; undefined distances are
// excluded from the means.
struct MetricReport {
    std::vector<ClassMetrics> classes;
    std::size_t volumes = 0;
    double mean_dice = 0;
    double mean_jaccard = 0;
    std::optional<double> mean_hd95;
    std::optional<double> mean_asd;
};

inline MetricReport evaluate(const std::vector<LabelVolume>& preds, const std::vector<LabelVolume>& gts,
                             std::size_t num_classes) {
    if (preds.size() != gts.size()) throw ShapeError("prediction and ground-truth counts differ");
    MetricReport r;
    r.volumes = preds.size();
    if (preds.empty()) throw EmptyReductionError("evaluate needs at least one volume");
    double hd_total = 0, asd_total = 0;
    std::size_t hd_count = 0;
    for (std::size_t k = 1; k < num_classes; ++k) {
        ClassMetrics c{k, 0, 0, std::nullopt, std::nullopt};
        double hd = 0, asd = 0;
        std::size_t defined = 0;
        for (std::size_t v = 0; v < preds.size(); ++v) {
            const auto o = dice_jaccard(preds[v], gts[v], k);
            c.dice += o.dice;
            c.jaccard += o.jaccard;
            try {
                const auto s = surface_distances(preds[v], gts[v], k);
                hd += s.hd95;
                asd += s.asd;
                ++defined;
            } catch (const UndefinedMetric&) {
            }
        }
        c.dice /= double(preds.size());
        c.jaccard /= double(preds.size());
        if (defined) {
            c.hd95 = hd / double(defined);
            c.asd = asd / double(defined);
            hd_total += *c.hd95;
            asd_total += *c.asd;
            ++hd_count;
        }
        r.mean_dice += c.dice;
        r.mean_jaccard += c.jaccard;
        r.classes.push_back(c);
    }
    const double n = double(r.classes.size());
    r.mean_dice /= n;
    r.mean_jaccard /= n;
    if (hd_count) {
        r.mean_hd95 = hd_total / double(hd_count);
        r.mean_asd = asd_total / double(hd_count);
    }
    return r;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j;
    j["volumes"] = r.volumes;
    j["mean"] = {{"dice", r.mean_dice},
                 {"jaccard", r.mean_jaccard},
                 {"hd95", optional_json(r.mean_hd95)},
                 {"asd", optional_json(r.mean_asd)}};
    j["classes"] = nlohmann::json::array();
    for (const auto& c : r.classes)
        j["classes"].push_back({{"class", c.cls},
                                {"dice", c.dice},
                                {"jaccard", c.jaccard},
                                {"hd95", optional_json(c.hd95)},
                                {"asd", optional_json(c.asd)}});
    return j;
}

}  // namespace epl::metrics

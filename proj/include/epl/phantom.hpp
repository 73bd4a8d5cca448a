#pragma once

// Seeded synthetic phantoms: non-overlapping ellipsoids per foreground class,
// blurred boundaries, additive noise, per-volume standardization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "epl/errors.hpp"
#include "epl/io.hpp"
#include "epl/tensor.hpp"

namespace epl::phantom {

struct ShapeClass {
    std::size_t count = 2;
    double radius_min = 4;
    double radius_max = 8;
    double intensity_mean = 1.0;
    double intensity_std = 0.1;
};

struct PhantomSpec {
    Shape3 shape{32, 32, 32};
    std::size_t num_classes = 2;
    std::vector<ShapeClass> classes{ShapeClass{}};  // one entry per foreground class
    double background_mean = 0.0;
    double background_std = 0.1;
    // background-labelled ellipsoids drawn with a foreground-like intensity
    std::size_t distractors = 0;
    double distractor_mean = 1.0;
    double noise_std = 0.3;
    double blur_sigma = 1.0;
    std::uint64_t seed = 0;
};

struct Sample {
    Tensor<double> image;  // [1, D, H, W]
    LabelVolume label;
    double analytic_volume = 0;  // sum of 4/3 pi r0 r1 r2 over placed foreground ellipsoids
};

inline constexpr int kMaxPlacementAttempts = 1000;

inline void validate(const PhantomSpec& s) {
    if (s.num_classes < 2 || s.num_classes > 3) throw SpecError("num_classes must be 2 or 3");
    if (s.classes.size() != s.num_classes - 1)
        throw SpecError("expected " + std::to_string(s.num_classes - 1) + " foreground class entries");
    if (voxel_count(s.shape) == 0) throw SpecError("volume shape has a zero extent");
    const double smallest = double(*std::min_element(s.shape.begin(), s.shape.end()));
    for (const auto& c : s.classes) {
        if (!(c.radius_min > 0) || c.radius_max < c.radius_min) throw SpecError("invalid radius range");
        if (2 * c.radius_max + 1 > smallest)
            throw SpecError("radius " + std::to_string(c.radius_max) + " does not fit the volume");
    }
    if (s.noise_std < 0 || s.blur_sigma < 0 || s.background_std < 0) throw SpecError("negative noise or blur");
}

// splitmix64 step; derives independent per-sample seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int r = std::max(1, int(std::ceil(3 * sigma)));
    std::vector<double> k(2 * r + 1);
    double s = 0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : k) x /= s;
    return k;
}

// Separable Gaussian blur with replicated borders.
inline void blur(std::vector<double>& v, Shape3 s, double sigma) {
    if (sigma <= 0) return;
    const auto k = gaussian_kernel(sigma);
    const long r = long(k.size() / 2);
    const std::size_t strides[3] = {s[1] * s[2], s[2], 1};
    std::vector<double> line, out;
    for (int axis = 0; axis < 3; ++axis) {
        const long n = long(s[axis]);
        const std::size_t step = strides[axis];
        line.resize(n);
        out.resize(n);
        for (std::size_t base = 0; base < v.size(); ++base) {
            if ((base / step) % std::size_t(n) != 0) continue;
            for (long i = 0; i < n; ++i) line[i] = v[base + i * step];
            for (long i = 0; i < n; ++i) {
                double acc = 0;
                for (long j = -r; j <= r; ++j) acc += k[j + r] * line[std::clamp(i + j, 0L, n - 1)];
                out[i] = acc;
            }
            for (long i = 0; i < n; ++i) v[base + i * step] = out[i];
        }
    }
}

struct Ellipsoid {
    double c[3];
    double r[3];

    bool contains(double z, double y, double x) const {
        const double a = (z - c[0]) / r[0], b = (y - c[1]) / r[1], d = (x - c[2]) / r[2];
        return a * a + b * b + d * d <= 1.0;
    }
};

}  // namespace detail

// Returns the image [1,D,H,W] and its labels.
inline Sample generate(const PhantomSpec& spec) {
    validate(spec);
    std::mt19937_64 rng(spec.seed);
    const Shape3 s = spec.shape;
    const std::size_t v = voxel_count(s);
    LabelVolume label(s);
    std::vector<std::uint8_t> occupied(v, 0);
    std::vector<double> clean(v, 0.0);

    std::normal_distribution<double> unit_normal(0.0, 1.0);
    const double bg = spec.background_mean + spec.background_std * unit_normal(rng);
    std::fill(clean.begin(), clean.end(), bg);

    double analytic = 0;
    auto place = [&](double rmin, double rmax, std::uint8_t cls, double intensity) {
        std::uniform_real_distribution<double> radius(rmin, rmax);
        for (int attempt = 0; attempt < kMaxPlacementAttempts; ++attempt) {
            detail::Ellipsoid e{};
            for (int a = 0; a < 3; ++a) {
                e.r[a] = radius(rng);
                std::uniform_real_distribution<double> centre(e.r[a], double(s[a]) - 1.0 - e.r[a]);
                e.c[a] = centre(rng);
            }
            std::vector<std::size_t> cells;
            bool clash = false;
            for (std::size_t z = 0; z < s[0] && !clash; ++z)
                for (std::size_t y = 0; y < s[1] && !clash; ++y)
                    for (std::size_t x = 0; x < s[2]; ++x) {
                        if (!e.contains(double(z), double(y), double(x))) continue;
                        const std::size_t i = (z * s[1] + y) * s[2] + x;
                        if (occupied[i]) {
                            clash = true;
                            break;
                        }
                        cells.push_back(i);
                    }
            if (clash || cells.empty()) continue;
            for (auto i : cells) {
                occupied[i] = 1;
                label[i] = cls;
                clean[i] = intensity;
            }
            if (cls > 0) analytic += 4.0 / 3.0 * M_PI * e.r[0] * e.r[1] * e.r[2];
            return;
        }
    };

    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        const auto& sc = spec.classes[c];
        for (std::size_t k = 0; k < sc.count; ++k)
            place(sc.radius_min, sc.radius_max, std::uint8_t(c + 1),
                  sc.intensity_mean + sc.intensity_std * unit_normal(rng));
    }
    if (spec.distractors > 0) {
        const auto& sc = spec.classes.front();
        for (std::size_t k = 0; k < spec.distractors; ++k)
            place(sc.radius_min * 0.5, sc.radius_min, 0, spec.distractor_mean + sc.intensity_std * unit_normal(rng));
    }

    detail::blur(clean, s, spec.blur_sigma);
    if (spec.noise_std > 0)
        for (auto& x : clean) x += spec.noise_std * unit_normal(rng);

    double mean = 0;
    for (double x : clean) mean += x;
    mean /= double(v);
    double var = 0;
    for (double x : clean) var += (x - mean) * (x - mean);
    var /= double(v);
    const double scale = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
    Tensor<double> image({1, s[0], s[1], s[2]});
    for (std::size_t i = 0; i < v; ++i) image[i] = (clean[i] - mean) * scale;
    return {std::move(image), std::move(label), analytic};
}

struct Dataset {
    std::vector<Sample> labeled;
    std::vector<Sample> unlabeled;  // labels kept for evaluation only
    std::vector<Sample> test;
    std::vector<std::size_t> labeled_ids;
    std::vector<std::size_t> unlabeled_ids;
};

inline std::size_t labeled_count(std::size_t count, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw SpecError("labeled ratio must lie in (0, 1]");
    const auto n = std::size_t(std::floor(ratio * double(count) + 1e-9));
    if (n == 0) throw SpecError("labeled ratio leaves no labeled samples");
    return n;
}

// Sample i uses seed mix_seed(seed, i); test sample j uses mix_seed(seed, count + j).
// Labeled membership comes from a seeded shuffle of 0..count-1.
inline Dataset make_dataset(PhantomSpec spec, std::size_t count, double labeled_ratio, std::uint64_t seed,
                            std::size_t test_count = 0) {
    if (count < 10) throw SpecError("dataset count must be at least 10");
    const std::size_t nl = labeled_count(count, labeled_ratio);
    validate(spec);
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix_seed(seed, ~0ull));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Dataset d;
    d.labeled_ids.assign(order.begin(), order.begin() + std::ptrdiff_t(nl));
    d.unlabeled_ids.assign(order.begin() + std::ptrdiff_t(nl), order.end());
    std::sort(d.labeled_ids.begin(), d.labeled_ids.end());
    std::sort(d.unlabeled_ids.begin(), d.unlabeled_ids.end());
    auto make = [&](std::size_t stream) {
        spec.seed = mix_seed(seed, stream);
        return generate(spec);
    };
    for (auto i : d.labeled_ids) d.labeled.push_back(make(i));
    for (auto i : d.unlabeled_ids) d.unlabeled.push_back(make(i));
    for (std::size_t j = 0; j < test_count; ++j) d.test.push_back(make(count + j));
    return d;
}

// JSON <-> spec. Missing keys keep their defaults.
inline PhantomSpec spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    if (j.contains("shape")) {
        const auto v = j.at("shape").get<std::vector<std::size_t>>();
        if (v.size() != 3) throw SpecError("shape must have three extents");
        s.shape = {v[0], v[1], v[2]};
    }
    s.num_classes = j.value("num_classes", s.num_classes);
    if (j.contains("classes")) {
        s.classes.clear();
        for (const auto& c : j.at("classes")) {
            ShapeClass sc;
            sc.count = c.value("count", sc.count);
            sc.radius_min = c.value("radius_min", sc.radius_min);
            sc.radius_max = c.value("radius_max", sc.radius_max);
            sc.intensity_mean = c.value("intensity_mean", sc.intensity_mean);
            sc.intensity_std = c.value("intensity_std", sc.intensity_std);
            s.classes.push_back(sc);
        }
    } else {
        s.classes.assign(s.num_classes - 1, ShapeClass{});
        for (std::size_t c = 0; c < s.classes.size(); ++c) s.classes[c].intensity_mean = double(c + 1);
    }
    s.background_mean = j.value("background_mean", s.background_mean);
    s.background_std = j.value("background_std", s.background_std);
    s.distractors = j.value("distractors", s.distractors);
    s.distractor_mean = j.value("distractor_mean", s.distractor_mean);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.blur_sigma = j.value("blur_sigma", s.blur_sigma);
    s.seed = j.value("seed", s.seed);
    validate(s);
    return s;
}

inline nlohmann::json spec_to_json(const PhantomSpec& s) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : s.classes)
        classes.push_back({{"count", c.count},
                           {"radius_min", c.radius_min},
                           {"radius_max", c.radius_max},
                           {"intensity_mean", c.intensity_mean},
                           {"intensity_std", c.intensity_std}});
    return {{"shape", {s.shape[0], s.shape[1], s.shape[2]}},
            {"num_classes", s.num_classes},
            {"classes", classes},
            {"background_mean", s.background_mean},
            {"background_std", s.background_std},
            {"distractors", s.distractors},
            {"distractor_mean", s.distractor_mean},
            {"noise_std", s.noise_std},
            {"blur_sigma", s.blur_sigma},
            {"seed", s.seed}};
}

// On-disk layout: <dir>/manifest.json plus one image (f32) and one label
// (u8) EPLV file per sample.
inline void save_dataset(const Dataset& d, const PhantomSpec& spec, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json m;
    m["num_classes"] = spec.num_classes;
    m["shape"] = {spec.shape[0], spec.shape[1], spec.shape[2]};
    m["spec"] = spec_to_json(spec);
    auto dump = [&](const std::vector<Sample>& samples, const std::vector<std::size_t>& ids, const std::string& prefix,
                    const char* key) {
        m[key] = nlohmann::json::array();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const std::size_t id = ids.empty() ? i : ids[i];
            char name[64];
            std::snprintf(name, sizeof name, "%s_%03zu", prefix.c_str(), id);
            const std::string image = std::string(name) + "_image.eplv", label = std::string(name) + "_label.eplv";
            io::write((fs::path(dir) / image).string(), samples[i].image.template cast<float>());
            io::write((fs::path(dir) / label).string(), samples[i].label);
            m[key].push_back({{"id", id}, {"image", image}, {"label", label}});
        }
    };
    dump(d.labeled, d.labeled_ids, "sample", "labeled");
    dump(d.unlabeled, d.unlabeled_ids, "sample", "unlabeled");
    dump(d.test, {}, "test", "test");
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir);
    out << m.dump(2) << "\n";
}

struct LoadedDataset {
    Dataset data;
    std::size_t num_classes = 2;
    Shape3 shape{};
};

inline LoadedDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw IoError("no manifest.json in " + dir);
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest: ") + e.what());
    }
    LoadedDataset out;
    out.num_classes = m.at("num_classes").get<std::size_t>();
    const auto sh = m.at("shape").get<std::vector<std::size_t>>();
    out.shape = {sh.at(0), sh.at(1), sh.at(2)};
    auto read = [&](const char* key, std::vector<Sample>& samples, std::vector<std::size_t>* ids) {
        for (const auto& e : m.at(key)) {
            Sample s{io::read_tensor<double>((fs::path(dir) / e.at("image").get<std::string>()).string()),
                     io::read_labels((fs::path(dir) / e.at("label").get<std::string>()).string())};
            if (spatial_of(s.image.shape()) != s.label.shape) throw FormatError("image and label shapes differ");
            samples.push_back(std::move(s));
            if (ids) ids->push_back(e.at("id").get<std::size_t>());
        }
    };
    read("labeled", out.data.labeled, &out.data.labeled_ids);
    read("unlabeled", out.data.unlabeled, &out.data.unlabeled_ids);
    read("test", out.data.test, nullptr);
    return out;
}

}  // namespace epl::phantom

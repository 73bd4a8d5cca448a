// epl: data generation, training, evaluation and field utilities.
//
// Exit codes: 0 success, 2 usage, 3 data/format/config/IO, 4 numeric.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "epl/evidence.hpp"
#include "epl/io.hpp"
#include "epl/phantom.hpp"
#include "epl/testing/suites.hpp"
#include "epl/trainer.hpp"
#include "epl/uncertainty.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsage = 2, kData = 3, kNumeric = 4;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw epl::IoError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw epl::FormatError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

struct GenData {
    std::string spec, out;
    std::size_t count = 0, test_count = 10;
    double ratio = 0;
    std::uint64_t seed = 0;
};

int gen_data(const GenData& a) {
    const auto spec = epl::phantom::spec_from_json(read_json(a.spec));
    const auto d = epl::phantom::make_dataset(spec, a.count, a.ratio, a.seed, a.test_count);
    epl::phantom::save_dataset(d, spec, a.out);
    std::cerr << "wrote " << d.labeled.size() << " labeled, " << d.unlabeled.size() << " unlabeled, " << d.test.size()
              << " test samples\n";
    std::cout << (fs::path(a.out) / "manifest.json").string() << "\n";
    return 0;
}

struct Train {
    std::string config, data, out;
};

int train(const Train& a) {
    const auto cfg = epl::config_from_json(read_json(a.config));
    const auto data = epl::phantom::load_dataset(a.data);
    const auto res = cfg.precision == epl::Precision::f64 ? epl::run<double>(cfg, data.data, a.out, stderr)
                                                          : epl::run<float>(cfg, data.data, a.out, stderr);
    std::cout << res.metrics_path << "\n";
    return 0;
}

struct Eval {
    std::string checkpoint, data, split = "test";
};

template <typename T>
epl::metrics::MetricReport eval_as(const epl::TrainConfig& cfg, const epl::io::Checkpoint& c,
                                   const std::vector<epl::phantom::Sample>& samples) {
    const auto params = epl::student_from_checkpoint<T>(c, cfg.model);
    return epl::evaluate_model(cfg, params, epl::to_volumes<T>(samples));
}

int eval(const Eval& a) {
    const auto c = epl::io::read_checkpoint(a.checkpoint);
    json header;
    try {
        header = json::parse(c.header);
    } catch (const json::exception& e) {
        throw epl::FormatError(std::string("checkpoint header: ") + e.what());
    }
    const auto cfg = epl::config_from_json(header.at("config"));
    const auto data = epl::phantom::load_dataset(a.data);
    const auto& samples = a.split == "test" ? data.data.test : a.split == "unlabeled" ? data.data.unlabeled : data.data.labeled;
    if (samples.empty()) throw epl::EmptyReductionError("split '" + a.split + "' is empty");
    const auto report = cfg.precision == epl::Precision::f64 ? eval_as<double>(cfg, c, samples)
                                                             : eval_as<float>(cfg, c, samples);
    auto j = epl::metrics::to_json(report);
    j["step"] = header.value("step", 0);
    std::cout << j.dump(2) << "\n";
    return 0;
}

struct Fuse {
    std::vector<std::string> inputs;
    std::string out, mode = "dempster";
    bool literal = false;
};

template <typename T>
void fuse_as(const Fuse& a, const std::vector<epl::io::RawVolume>& raws) {
    std::vector<epl::MassField<T>> masses;
    for (std::size_t i = 0; i < raws.size(); ++i) {
        masses.emplace_back(epl::io::tensor_from_raw<T>(raws[i]));
        try {
            masses.back().validate(std::is_same_v<T, float> ? 1e-4 : 1e-9);
        } catch (const epl::DomainError& e) {
            throw epl::DomainError(a.inputs[i] + ": " + e.what());
        }
    }
    const auto mode = a.mode == "average" ? epl::HeadFusion::average : epl::HeadFusion::dempster;
    const auto fused = epl::fuse_heads(masses, mode, {.normalize_universal = !a.literal});
    epl::io::write(a.out, fused.tensor());
}

int fuse(const Fuse& a) {
    std::vector<epl::io::RawVolume> raws;
    bool all_f64 = true;
    for (const auto& p : a.inputs) {
        raws.push_back(epl::io::read_raw(p));
        all_f64 = all_f64 && raws.back().dtype == epl::io::DType::f64;
    }
    // stays in 64-bit only when every input is 64-bit
    if (all_f64)
        fuse_as<double>(a, raws);
    else
        fuse_as<float>(a, raws);
    return 0;
}

struct Uncert {
    std::string input, out;
    bool normalize = false;
};

template <typename T>
void uncertainty_as(const Uncert& a, const epl::io::RawVolume& raw) {
    epl::MassField<T> m(epl::io::tensor_from_raw<T>(raw));
    m.validate(std::is_same_v<T, float> ? 1e-4 : 1e-9);
    auto u = epl::dual_uncertainty(m);
    if (a.normalize) u = epl::normalize01(u);
    epl::io::write(a.out, u.values);
}

int uncertainty(const Uncert& a) {
    const auto raw = epl::io::read_raw(a.input);
    if (raw.dtype == epl::io::DType::f64)
        uncertainty_as<double>(a, raw);
    else
        uncertainty_as<float>(a, raw);
    return 0;
}

struct Render {
    std::string input, out, axis = "z";
    std::size_t index = 0;
};

// Slice of a [D,H,W] or [1,D,H,W] volume, min/max mapped to 0/255.
int render(const Render& a) {
    const auto raw = epl::io::read_raw(a.input);
    epl::Shape ext = raw.extents;
    if (ext.size() == 4 && ext[0] == 1) ext.erase(ext.begin());
    if (ext.size() != 3) throw epl::FormatError("render needs a single-channel 3D volume, got " + epl::shape_str(raw.extents));
    std::vector<double> v(epl::voxel_count({ext[0], ext[1], ext[2]}));
    if (raw.dtype == epl::io::DType::u8) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = raw.payload[i];
    } else {
        const auto t = epl::io::tensor_from_raw<double>(raw);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = t[i];
    }
    const std::size_t ax = a.axis == "z" ? 0 : a.axis == "y" ? 1 : 2;
    if (a.index >= ext[ax])
        throw UsageError("--index " + std::to_string(a.index) + " outside axis " + a.axis + " of extent " +
                         std::to_string(ext[ax]));
    // image rows/cols are the two remaining axes in order
    const std::size_t ra = ax == 0 ? 1 : 0, ca = ax == 2 ? 1 : 2;
    const std::size_t rows = ext[ra], cols = ext[ca];
    std::vector<double> slice(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            std::size_t idx[3];
            idx[ax] = a.index;
            idx[ra] = r;
            idx[ca] = c;
            slice[r * cols + c] = v[(idx[0] * ext[1] + idx[1]) * ext[2] + idx[2]];
        }
    double lo = INFINITY, hi = -INFINITY;
    for (double x : v) {
        if (!std::isfinite(x)) throw epl::NumericError("volume holds a non-finite value");
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    std::string pgm = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (double x : slice)
        pgm.push_back(static_cast<char>(hi > lo ? static_cast<unsigned char>(std::lround((x - lo) / (hi - lo) * 255.0)) : 0));
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw epl::IoError("cannot write " + a.out);
    out.write(pgm.data(), static_cast<std::streamsize>(pgm.size()));
    if (!out) throw epl::IoError("write failed: " + a.out);
    return 0;
}

// EPL_SELFTEST_INJECT_FAULT=<suite>|all perturbs one value in that suite.
int selftest() {
    const char* env = std::getenv("EPL_SELFTEST_INJECT_FAULT");
    const std::string fault = env ? env : "";
    auto opt = [&](const char* name) {
        epl::suites::Options o;
        o.fault = !fault.empty() && (fault == "all" || fault == name);
        return o;
    };
    std::vector<epl::suites::Result> results;
    results.push_back(epl::suites::fusion_algebra(1002, opt("fusion")));
    results.push_back(epl::suites::worked_values(opt("worked")));
    results.push_back(epl::suites::entropy(300, opt("entropy")));
    results.push_back(epl::suites::gradients(opt("gradients")));
    results.push_back(epl::suites::metric_oracle(200, opt("metrics")));
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-10s %zu/%zu passed (%.2fs)\n", r.name.c_str(), r.passed, r.total, r.seconds);
        for (const auto& f : r.failures) std::fprintf(stderr, "  %s: %s\n", r.name.c_str(), f.c_str());
        ok = ok && r.ok();
    }
    std::printf("selftest %s\n", ok ? "passed" : "FAILED");
    return ok ? 0 : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evidential prototype learning for 3D segmentation"};
    app.require_subcommand(1);

    GenData g;
    auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
    gen->add_option("--spec", g.spec, "phantom spec JSON")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", g.out, "output directory")->required();
    gen->add_option("--count", g.count, "training samples (labeled + unlabeled)")->required();
    gen->add_option("--labeled-ratio", g.ratio, "fraction labeled, in (0, 1]")->required();
    gen->add_option("--seed", g.seed, "dataset seed")->required();
    gen->add_option("--test-count", g.test_count, "held-out test samples")->capture_default_str();

    Train t;
    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", t.config, "training config JSON")->required();
    tr->add_option("--data", t.data, "dataset directory")->required();
    tr->add_option("--out", t.out, "run directory")->required();

    Eval e;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; prints metrics JSON");
    ev->add_option("--checkpoint", e.checkpoint, "checkpoint file")->required();
    ev->add_option("--data", e.data, "dataset directory")->required();
    ev->add_option("--split", e.split, "split to evaluate")
        ->check(CLI::IsMember({"test", "unlabeled", "labeled"}))
        ->capture_default_str();

    Fuse f;
    auto* fu = app.add_subcommand("fuse", "fuse mass fields");
    fu->add_option("--inputs", f.inputs, "mass field files")->required()->expected(1, -1);
    fu->add_option("--out", f.out, "output file")->required();
    fu->add_option("--mode", f.mode, "fusion rule")
        ->check(CLI::IsMember({"dempster", "average"}))
        ->capture_default_str();
    fu->add_flag("--literal-universal", f.literal, "skip the 1/(1-conflict) factor on the universal mass");

    Uncert u;
    auto* un = app.add_subcommand("uncertainty", "dual uncertainty of a mass field");
    un->add_option("--input", u.input, "mass field file")->required();
    un->add_option("--out", u.out, "output file")->required();
    un->add_flag("--normalize", u.normalize, "min-max normalize to [0,1]");

    Render r;
    auto* re = app.add_subcommand("render", "write one slice as a binary PGM");
    re->add_option("--input", r.input, "volume file")->required();
    re->add_option("--axis", r.axis, "slice axis")->check(CLI::IsMember({"z", "y", "x"}))->capture_default_str();
    re->add_option("--index", r.index, "slice index")->required();
    re->add_option("--out", r.out, "output PGM")->required();

    auto* st = app.add_subcommand("selftest", "run the built-in oracle suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (*gen) return gen_data(g);
        if (*tr) return train(t);
        if (*ev) return eval(e);
        if (*fu) return fuse(f);
        if (*un) return uncertainty(u);
        if (*re) return render(r);
        if (*st) return selftest();
    } catch (const UsageError& x) {
        std::cerr << "usage error: " << x.what() << "\n";
        return kUsage;
    } catch (const epl::NumericError& x) {
        std::cerr << "numeric error: " << x.what() << "\n";
        return kNumeric;
    } catch (const epl::ConflictError& x) {
        std::cerr << "numeric error: " << x.what() << "\n";
        return kNumeric;
    } catch (const epl::Error& x) {
        std::cerr << "error: " << x.what() << "\n";
        return kData;
    } catch (const json::exception& x) {
        std::cerr << "error: " << x.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& x) {
        std::cerr << "error: " << x.what() << "\n";
        return kData;
    }
    return kUsage;
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "epl/evidence.hpp"
#include "epl/io.hpp"
#include "epl/trainer.hpp"
#include "process.hpp"

namespace epl {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using test::run_cli;

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "epl_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string arg(const fs::path& p) { return test::quote(p.string()); }

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << "\n"; }

json small_spec() {
    return {{"shape", {16, 16, 16}},
            {"num_classes", 2},
            {"classes", {{{"count", 1}, {"radius_min", 3}, {"radius_max", 5}}}},
            {"noise_std", 0.2}};
}

MassField<double> random_mass(std::size_t n, Shape3 s, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(0.05, 1.0);
    Tensor<double> t({n + 1, s[0], s[1], s[2]});
    const std::size_t v = voxel_count(s);
    for (std::size_t i = 0; i < v; ++i) {
        double sum = 0;
        for (std::size_t k = 0; k <= n; ++k) sum += t[k * v + i] = d(rng);
        for (std::size_t k = 0; k <= n; ++k) t[k * v + i] /= sum;
    }
    return MassField<double>(std::move(t));
}

TEST(GenData, ManifestListsLabeledSplit) {
    const auto dir = scratch("gen");
    write_json(dir / "spec.json", small_spec());
    const auto r = run_cli("gen-data --spec " + arg(dir / "spec.json") + " --out " + arg(dir / "d") +
                           " --count 50 --labeled-ratio 0.2 --seed 3 --test-count 2");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(test::last_line(r.out), (dir / "d" / "manifest.json").string());
    const auto m = json::parse(test::read_text(dir / "d" / "manifest.json"));
    EXPECT_EQ(m.at("labeled").size(), 10u);
    EXPECT_EQ(m.at("unlabeled").size(), 40u);
    EXPECT_EQ(m.at("test").size(), 2u);
}

TEST(GenData, RerunIsByteIdentical) {
    const auto dir = scratch("gen_twice");
    write_json(dir / "spec.json", small_spec());
    for (const char* out : {"a", "b"}) {
        const auto r = run_cli("gen-data --spec " + arg(dir / "spec.json") + " --out " + arg(dir / out) +
                               " --count 10 --labeled-ratio 0.2 --seed 11 --test-count 1");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        const auto other = dir / "b" / e.path().filename();
        ASSERT_TRUE(fs::exists(other)) << other;
        EXPECT_EQ(test::read_text(e.path()), test::read_text(other)) << e.path().filename();
        ++files;
    }
    EXPECT_EQ(files, 1u + 2 * 11);
}

TEST(GenData, ZeroRatioFails) {
    const auto dir = scratch("gen_zero");
    write_json(dir / "spec.json", small_spec());
    const auto r = run_cli("gen-data --spec " + arg(dir / "spec.json") + " --out " + arg(dir / "d") +
                           " --count 10 --labeled-ratio 0 --seed 1");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("label"), std::string::npos) << r.err;
}

class Train : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = scratch("train");
        write_json(dir_ / "spec.json", small_spec());
        const auto r = run_cli("gen-data --spec " + arg(dir_ / "spec.json") + " --out " + arg(dir_ / "data") +
                               " --count 10 --labeled-ratio 0.2 --seed 5 --test-count 2");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static json tiny_config() {
        TrainConfig c;
        c.model.base_width = 2;
        c.model.depth = 2;
        c.model.proto_stage = 2;
        c.labeled_ratio = 0.2;
        c.iterations = 3;
        c.seed = 9;
        return to_json(c);
    }
    static inline fs::path dir_;
};

TEST_F(Train, LastStdoutLineIsMetricsPath) {
    write_json(dir_ / "cfg.json", tiny_config());
    const auto r = run_cli("train --config " + arg(dir_ / "cfg.json") + " --data " + arg(dir_ / "data") + " --out " +
                           arg(dir_ / "run"));
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path metrics = test::last_line(r.out);
    EXPECT_EQ(metrics.filename(), "metrics.json");
    ASSERT_TRUE(fs::exists(metrics));
    const auto m = json::parse(test::read_text(metrics));
    EXPECT_TRUE(m.at("mean").contains("dice"));
    EXPECT_TRUE(fs::exists(dir_ / "run" / "losses.jsonl"));
}

TEST_F(Train, MissingKeyIsNamed) {
    auto cfg = tiny_config();
    cfg["ablation"].erase("use_urm");
    write_json(dir_ / "broken.json", cfg);
    const auto r = run_cli("train --config " + arg(dir_ / "broken.json") + " --data " + arg(dir_ / "data") +
                           " --out " + arg(dir_ / "broken_run"));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("ablation.use_urm"), std::string::npos) << r.err;
}

TEST_F(Train, EvalReadsCheckpoint) {
    write_json(dir_ / "cfg_eval.json", tiny_config());
    ASSERT_EQ(run_cli("train --config " + arg(dir_ / "cfg_eval.json") + " --data " + arg(dir_ / "data") + " --out " +
                      arg(dir_ / "run_eval"))
                  .code,
              0);
    fs::path ckpt;
    for (const auto& e : fs::directory_iterator(dir_ / "run_eval" / "checkpoints"))
        if (e.path().extension() == ".eplc" && e.path().filename().string() > ckpt.filename().string()) ckpt = e.path();
    ASSERT_FALSE(ckpt.empty());
    const auto r = run_cli("eval --checkpoint " + arg(ckpt) + " --data " + arg(dir_ / "data"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto trained = json::parse(test::read_text(dir_ / "run_eval" / "metrics.json"));
    const auto j = json::parse(r.out);
    EXPECT_EQ(j.at("mean").at("dice").get<double>(), trained.at("mean").at("dice").get<double>());
}

TEST(Fuse, SingleInputIsIdentity) {
    const auto dir = scratch("fuse_one");
    std::mt19937_64 rng(1);
    const auto m = random_mass(3, {2, 3, 4}, rng);
    io::write((dir / "m.eplv").string(), m.tensor());
    const auto r = run_cli("fuse --inputs " + arg(dir / "m.eplv") + " --out " + arg(dir / "f.eplv"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto f = io::read_tensor<double>((dir / "f.eplv").string());
    ASSERT_EQ(f.shape(), m.tensor().shape());
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], m.tensor()[i], 1e-15);
}

TEST(Fuse, VacuousInputDropsOut) {
    const auto dir = scratch("fuse_vacuous");
    std::mt19937_64 rng(2);
    const Shape3 s{3, 3, 3};
    const auto a = random_mass(2, s, rng), b = random_mass(2, s, rng);
    io::write((dir / "a.eplv").string(), a.tensor());
    io::write((dir / "b.eplv").string(), b.tensor());
    io::write((dir / "v.eplv").string(), MassField<double>::vacuous(2, s).tensor());
    ASSERT_EQ(run_cli("fuse --inputs " + arg(dir / "a.eplv") + " " + arg(dir / "b.eplv") + " --out " +
                      arg(dir / "ab.eplv"))
                  .code,
              0);
    ASSERT_EQ(run_cli("fuse --inputs " + arg(dir / "a.eplv") + " " + arg(dir / "v.eplv") + " " +
                      arg(dir / "b.eplv") + " --out " + arg(dir / "avb.eplv"))
                  .code,
              0);
    const auto ab = io::read_tensor<double>((dir / "ab.eplv").string());
    const auto avb = io::read_tensor<double>((dir / "avb.eplv").string());
    for (std::size_t i = 0; i < ab.size(); ++i) EXPECT_NEAR(ab[i], avb[i], 1e-12);
}

TEST(Fuse, MatchesInProcessBitForBit) {
    const auto dir = scratch("fuse_exact");
    std::mt19937_64 rng(3);
    std::vector<MassField<double>> ms;
    std::string inputs;
    for (int k = 0; k < 3; ++k) {
        ms.push_back(random_mass(3, {4, 4, 4}, rng));
        const auto p = dir / ("m" + std::to_string(k) + ".eplv");
        io::write(p.string(), ms.back().tensor());
        inputs += " " + arg(p);
    }
    const auto r = run_cli("fuse --inputs" + inputs + " --out " + arg(dir / "f.eplv") + " --mode dempster");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto want = dempster_fuse_all(ms);
    const auto got = io::read_tensor<double>((dir / "f.eplv").string());
    ASSERT_EQ(got.size(), want.tensor().size());
    EXPECT_EQ(std::memcmp(got.data(), want.tensor().data(), got.size() * sizeof(double)), 0);
}

TEST(Fuse, AverageMode) {
    const auto dir = scratch("fuse_avg");
    std::mt19937_64 rng(4);
    const auto a = random_mass(2, {2, 2, 2}, rng), b = random_mass(2, {2, 2, 2}, rng);
    io::write((dir / "a.eplv").string(), a.tensor());
    io::write((dir / "b.eplv").string(), b.tensor());
    ASSERT_EQ(run_cli("fuse --inputs " + arg(dir / "a.eplv") + " " + arg(dir / "b.eplv") + " --out " +
                      arg(dir / "f.eplv") + " --mode average")
                  .code,
              0);
    const auto f = io::read_tensor<double>((dir / "f.eplv").string());
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], 0.5 * (a.tensor()[i] + b.tensor()[i]), 1e-15);
}

TEST(Fuse, InvalidMassIsDataError) {
    const auto dir = scratch("fuse_bad");
    Tensor<double> t({3, 1, 1, 1}, std::vector<double>{0.5, 0.5, 0.5});
    io::write((dir / "bad.eplv").string(), t);
    const auto r = run_cli("fuse --inputs " + arg(dir / "bad.eplv") + " --out " + arg(dir / "f.eplv"));
    EXPECT_EQ(r.code, 3);
}

TEST(Uncertainty, WorkedVoxel) {
    const auto dir = scratch("unc_worked");
    io::write((dir / "m.eplv").string(), Tensor<double>({3, 1, 1, 1}, std::vector<double>{0.5, 0.3, 0.2}));
    ASSERT_EQ(run_cli("uncertainty --input " + arg(dir / "m.eplv") + " --out " + arg(dir / "u.eplv")).code, 0);
    const auto u = io::read_tensor<double>((dir / "u.eplv").string());
    ASSERT_EQ(u.size(), 1u);
    EXPECT_NEAR(u[0], 0.3605, 1e-4);
}

TEST(Uncertainty, CertainMassIsZero) {
    const auto dir = scratch("unc_certain");
    Tensor<double> t({3, 2, 2, 2});
    for (std::size_t i = 0; i < 8; ++i) t[(i % 2) * 8 + i] = 1.0;
    io::write((dir / "m.eplv").string(), t);
    ASSERT_EQ(run_cli("uncertainty --input " + arg(dir / "m.eplv") + " --out " + arg(dir / "u.eplv")).code, 0);
    const auto u = io::read_tensor<double>((dir / "u.eplv").string());
    ASSERT_EQ(u.shape(), (Shape{1, 2, 2, 2}));
    for (std::size_t i = 0; i < u.size(); ++i) EXPECT_EQ(u[i], 0.0);
}

TEST(Uncertainty, NormalizeSpansUnitRange) {
    const auto dir = scratch("unc_norm");
    std::mt19937_64 rng(5);
    io::write((dir / "m.eplv").string(), random_mass(2, {3, 3, 3}, rng).tensor().cast<float>());
    ASSERT_EQ(run_cli("uncertainty --input " + arg(dir / "m.eplv") + " --out " + arg(dir / "u.eplv") + " --normalize")
                  .code,
              0);
    const auto u = io::read_tensor<double>((dir / "u.eplv").string());
    double lo = 1, hi = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        lo = std::min(lo, u[i]);
        hi = std::max(hi, u[i]);
    }
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
}

struct Pgm {
    std::size_t cols = 0, rows = 0, maxval = 0;
    std::string pixels;
};

Pgm read_pgm(const fs::path& p) {
    const auto bytes = test::read_text(p);
    std::istringstream in(bytes);
    std::string magic;
    Pgm g;
    in >> magic >> g.cols >> g.rows >> g.maxval;
    EXPECT_EQ(magic, "P5");
    in.get();
    g.pixels = bytes.substr(static_cast<std::size_t>(in.tellg()));
    return g;
}

TEST(Render, HeaderAndDimensions) {
    const auto dir = scratch("render_dims");
    Tensor<float> v({4, 5, 6});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
    io::write((dir / "v.eplv").string(), v);
    struct Case {
        const char* axis;
        std::size_t rows, cols;
    };
    for (const Case c : {Case{"z", 5, 6}, Case{"y", 4, 6}, Case{"x", 4, 5}}) {
        const auto r = run_cli("render --input " + arg(dir / "v.eplv") + " --axis " + c.axis + " --index 1 --out " +
                               arg(dir / (std::string(c.axis) + ".pgm")));
        ASSERT_EQ(r.code, 0) << r.err;
        const auto g = read_pgm(dir / (std::string(c.axis) + ".pgm"));
        EXPECT_EQ(g.rows, c.rows) << c.axis;
        EXPECT_EQ(g.cols, c.cols) << c.axis;
        EXPECT_EQ(g.maxval, 255u);
        EXPECT_EQ(g.pixels.size(), c.rows * c.cols);
    }
}

TEST(Render, MinMaxMapToFullRange) {
    const auto dir = scratch("render_range");
    Tensor<double> v({1, 3, 4});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = -2.0 + 0.5 * static_cast<double>(i);
    io::write((dir / "v.eplv").string(), v);
    ASSERT_EQ(run_cli("render --input " + arg(dir / "v.eplv") + " --index 0 --out " + arg(dir / "s.pgm")).code, 0);
    const auto g = read_pgm(dir / "s.pgm");
    ASSERT_EQ(g.pixels.size(), 12u);
    EXPECT_EQ(static_cast<unsigned char>(g.pixels.front()), 0);
    EXPECT_EQ(static_cast<unsigned char>(g.pixels.back()), 255);
}

TEST(Render, ConstantVolumeIsConstantImage) {
    const auto dir = scratch("render_const");
    Tensor<float> v({2, 3, 3});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.7f;
    io::write((dir / "v.eplv").string(), v);
    ASSERT_EQ(run_cli("render --input " + arg(dir / "v.eplv") + " --index 1 --out " + arg(dir / "s.pgm")).code, 0);
    const auto g = read_pgm(dir / "s.pgm");
    EXPECT_EQ(g.pixels, std::string(9, '\0'));
}

TEST(Render, IndexOutOfRangeIsUsageError) {
    const auto dir = scratch("render_oob");
    io::write((dir / "v.eplv").string(), Tensor<float>({2, 2, 2}));
    EXPECT_EQ(run_cli("render --input " + arg(dir / "v.eplv") + " --index 2 --out " + arg(dir / "s.pgm")).code, 2);
}

TEST(Selftest, CleanBuildPasses) {
    const auto r = run_cli("selftest");
    EXPECT_EQ(r.code, 0) << r.out << r.err;
    for (const char* suite : {"fusion", "worked", "entropy", "gradients", "metrics"})
        EXPECT_NE(r.out.find(suite), std::string::npos) << suite;
    EXPECT_EQ(test::last_line(r.out), "selftest passed");
}

TEST(Selftest, InjectedFaultFails) {
    const auto r = run_cli("selftest", "EPL_SELFTEST_INJECT_FAULT=worked");
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(test::last_line(r.out), "selftest FAILED");
}

TEST(Usage, UnknownFlagIsRejected) {
    const auto r = run_cli("fuse --no-such-flag");
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(r.err.empty());
    EXPECT_EQ(run_cli("").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
}

TEST(Usage, HelpExitsZero) { EXPECT_EQ(run_cli("--help").code, 0); }

}  // namespace
}  // namespace epl

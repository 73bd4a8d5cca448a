#pragma once

// Mean-teacher training: student forward on labeled and unlabeled volumes,
// teacher forward on unlabeled volumes, evidential head fusion, reliability
// maps, prototype losses, GEDL terms, Adam on the student, EMA on the teacher.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "epl/evidence.hpp"
#include "epl/io.hpp"
#include "epl/losses.hpp"
#include "epl/metrics.hpp"
#include "epl/model.hpp"
#include "epl/phantom.hpp"
#include "epl/prototype.hpp"
#include "epl/uncertainty.hpp"

namespace epl {

enum class SegSource { fused, head0 };
enum class Precision { f32, f64 };

struct Ablation {
    bool use_mt = true;
    HeadFusion fuse_heads_mode = HeadFusion::dempster;
    bool use_prototypes = true;
    bool use_lrm = true;
    bool use_urm = true;
    bool use_gedl_labeled = true;
    bool use_gedl_unlabeled = true;
};

struct TrainConfig {
    NetConfig model;
    double labeled_ratio = 0.1;
    std::size_t labeled_per_batch = 1;
    std::size_t unlabeled_per_batch = 2;
    std::size_t iterations = 2000;
    double learning_rate = 1e-3;
    double ema_decay = 0.99;
    double lambda_max = 1.0;
    double gamma_max = 0.5;
    double temperature = 0.1;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // 0: initial and final checkpoints only
    Precision precision = Precision::f32;
    Ablation ablation;
    FusionOptions fusion;
    GedlOptions gedl;
    SegSource seg_source = SegSource::fused;
    bool student_fuse_heads = true;  // false: student heads are averaged
    NormScope norm_scope = NormScope::volume;

    void validate() const {
        model.validate();
        if (labeled_per_batch < 1) throw ConfigError("train.labeled_per_batch must be at least 1");
        if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
        if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("train.ema_decay must lie in [0,1]");
        if (!(lambda_max >= 0)) throw ConfigError("train.lambda_max must be non-negative");
        if (!(gamma_max >= 0 && gamma_max <= 1)) throw ConfigError("train.gamma_max must lie in [0,1]");
        if (!(temperature > 0)) throw ConfigError("train.temperature must be positive");
        if (!(labeled_ratio > 0 && labeled_ratio <= 1)) throw ConfigError("train.labeled_ratio must lie in (0,1]");
    }

    HeadFusion student_fusion() const { return student_fuse_heads ? ablation.fuse_heads_mode : HeadFusion::average; }
};

// lambda_max exp(-5 (1 - t/T)^2)
inline double lambda_con(double t, double total, double lambda_max) { return gaussian_rampup(t, total, lambda_max); }

// ---------------------------------------------------------------------------
// Config JSON. Every key is required; errors name the dotted key.

namespace detail {

inline const nlohmann::json& config_at(const nlohmann::json& j, const std::string& path) {
    const nlohmann::json* cur = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!cur->is_object() || !cur->contains(key)) throw ConfigError("missing config key: " + path);
        cur = &cur->at(key);
        if (dot == std::string::npos) return *cur;
        start = dot + 1;
    }
}

template <typename V>
V config_get(const nlohmann::json& j, const std::string& path) {
    const auto& v = config_at(j, path);
    try {
        if constexpr (std::is_same_v<V, bool>) {
            if (!v.is_boolean()) throw ConfigError("config key " + path + " must be a boolean");
        } else if constexpr (std::is_arithmetic_v<V>) {
            if (!v.is_number()) throw ConfigError("config key " + path + " must be a number");
            if (std::is_unsigned_v<V> && v.is_number_integer() && v.get<long long>() < 0)
                throw ConfigError("config key " + path + " must be non-negative");
        }
        return v.get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key " + path + " has the wrong type");
    }
}

inline std::string config_choice(const nlohmann::json& j, const std::string& path,
                                 std::initializer_list<const char*> allowed) {
    const auto s = config_get<std::string>(j, path);
    for (const char* a : allowed)
        if (s == a) return s;
    std::string list;
    for (const char* a : allowed) list += std::string(list.empty() ? "" : "|") + a;
    throw ConfigError("config key " + path + " must be one of " + list + ", got \"" + s + "\"");
}

}  // namespace detail

inline TrainConfig config_from_json(const nlohmann::json& j) {
    using detail::config_choice;
    using detail::config_get;
    TrainConfig c;
    c.model.in_channels = config_get<std::size_t>(j, "model.in_channels");
    c.model.base_width = config_get<std::size_t>(j, "model.base_width");
    c.model.depth = config_get<std::size_t>(j, "model.depth");
    c.model.num_classes = config_get<std::size_t>(j, "model.num_classes");
    c.model.num_heads = config_get<std::size_t>(j, "model.num_heads");
    c.model.proto_stage = config_get<std::size_t>(j, "model.proto_stage");

    c.labeled_ratio = config_get<double>(j, "train.labeled_ratio");
    c.labeled_per_batch = config_get<std::size_t>(j, "train.labeled_per_batch");
    c.unlabeled_per_batch = config_get<std::size_t>(j, "train.unlabeled_per_batch");
    c.iterations = config_get<std::size_t>(j, "train.iterations");
    c.learning_rate = config_get<double>(j, "train.learning_rate");
    c.ema_decay = config_get<double>(j, "train.ema_decay");
    c.lambda_max = config_get<double>(j, "train.lambda_max");
    c.gamma_max = config_get<double>(j, "train.gamma_max");
    c.temperature = config_get<double>(j, "train.temperature");
    c.seed = config_get<std::uint64_t>(j, "train.seed");
    c.checkpoint_every = config_get<std::size_t>(j, "train.checkpoint_every");
    c.precision = config_choice(j, "train.precision", {"float32", "float64"}) == "float64" ? Precision::f64
                                                                                          : Precision::f32;

    c.ablation.use_mt = config_get<bool>(j, "ablation.use_mt");
    c.ablation.fuse_heads_mode = config_choice(j, "ablation.fuse_heads_mode", {"average", "dempster"}) == "average"
                                     ? HeadFusion::average
                                     : HeadFusion::dempster;
    c.ablation.use_prototypes = config_get<bool>(j, "ablation.use_prototypes");
    c.ablation.use_lrm = config_get<bool>(j, "ablation.use_lrm");
    c.ablation.use_urm = config_get<bool>(j, "ablation.use_urm");
    c.ablation.use_gedl_labeled = config_get<bool>(j, "ablation.use_gedl_labeled");
    c.ablation.use_gedl_unlabeled = config_get<bool>(j, "ablation.use_gedl_unlabeled");

    c.fusion.normalize_universal = config_get<bool>(j, "fusion.normalize_universal");
    c.gedl.literal = config_get<bool>(j, "loss.gedl_literal");
    c.seg_source = config_choice(j, "loss.seg_source", {"fused", "head0"}) == "head0" ? SegSource::head0
                                                                                     : SegSource::fused;
    c.student_fuse_heads = config_get<bool>(j, "student.fuse_heads");
    c.norm_scope =
        config_choice(j, "uncertainty.norm_scope", {"volume", "batch"}) == "batch" ? NormScope::batch : NormScope::volume;
    c.validate();
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    const auto& a = c.ablation;
    return {{"model", to_json(c.model)},
            {"train",
             {{"labeled_ratio", c.labeled_ratio},
              {"labeled_per_batch", c.labeled_per_batch},
              {"unlabeled_per_batch", c.unlabeled_per_batch},
              {"iterations", c.iterations},
              {"learning_rate", c.learning_rate},
              {"ema_decay", c.ema_decay},
              {"lambda_max", c.lambda_max},
              {"gamma_max", c.gamma_max},
              {"temperature", c.temperature},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"precision", c.precision == Precision::f64 ? "float64" : "float32"}}},
            {"ablation",
             {{"use_mt", a.use_mt},
              {"fuse_heads_mode", a.fuse_heads_mode == HeadFusion::average ? "average" : "dempster"},
              {"use_prototypes", a.use_prototypes},
              {"use_lrm", a.use_lrm},
              {"use_urm", a.use_urm},
              {"use_gedl_labeled", a.use_gedl_labeled},
              {"use_gedl_unlabeled", a.use_gedl_unlabeled}}},
            {"fusion", {{"normalize_universal", c.fusion.normalize_universal}}},
            {"loss", {{"gedl_literal", c.gedl.literal}, {"seg_source", c.seg_source == SegSource::head0 ? "head0" : "fused"}}},
            {"student", {{"fuse_heads", c.student_fuse_heads}}},
            {"uncertainty", {{"norm_scope", c.norm_scope == NormScope::batch ? "batch" : "volume"}}}};
}

inline nlohmann::json to_json(const LossReport& r) {
    return {{"seg", r.seg},
            {"gedl_labeled", r.gedl_labeled},
            {"gedl_unlabeled", r.gedl_unlabeled},
            {"proto_ce_labeled", r.proto_ce_labeled},
            {"proto_ce_unlabeled", r.proto_ce_unlabeled},
            {"lambda_con", r.lambda_con},
            {"total", r.total}};
}

// ---------------------------------------------------------------------------
// Step assembly

template <typename T>
struct Volume {
    ad::Var<T> image;  // [C, D, H, W], constant
    LabelVolume label;
};

template <typename T>
std::vector<Volume<T>> to_volumes(const std::vector<phantom::Sample>& samples) {
    std::vector<Volume<T>> out;
    for (const auto& s : samples) out.push_back({ad::Var<T>::constant(s.image.template cast<T>()), s.label});
    return out;
}

template <typename T>
struct Prediction {
    std::vector<ad::Var<T>> masses;  // per head, [N+1, D, H, W]
    ad::Var<T> fused;
    ad::Var<T> hidden;
};

template <typename T>
Prediction<T> predict(const NetConfig& net, const std::vector<ad::Var<T>>& params, const ad::Var<T>& image,
                      HeadFusion mode, FusionOptions fusion) {
    auto out = forward(net, params, image);
    Prediction<T> p;
    for (const auto& e : out.evidence) p.masses.push_back(graph::mass_from_evidence(e));
    p.fused = graph::fuse_heads(p.masses, mode, fusion);
    p.hidden = out.hidden;
    return p;
}

template <typename T>
ad::Var<T> seg_probs(const Prediction<T>& p, SegSource source) {
    const auto& m = source == SegSource::head0 ? p.masses[0] : p.fused;
    return graph::expected_probs(graph::dirichlet_from_mass(m));
}

// Everything the step treats as a constant: normalized uncertainties,
// reliability maps, pseudo-labels and teacher features. Freezing it lets a
// finite-difference check see exactly the function that backward sees.
template <typename T>
struct StepContext {
    std::vector<UncertaintyField<T>> u_labeled, u_unlabeled;
    std::vector<ReliabilityMap<T>> beta_labeled, beta_unlabeled;
    std::vector<LabelVolume> pseudo;
    std::vector<ad::Var<T>> teacher_hidden;
};

template <typename T>
struct StepGraph {
    ad::Var<T> total;
    ad::Var<T> seg, gedl_labeled, gedl_unlabeled, proto_labeled, proto_unlabeled;
    double lambda = 0, gamma = 0;
    StepContext<T> context;
    std::optional<PrototypeSet<T>> prototypes;

    LossReport report() const {
        auto v = [](const ad::Var<T>& x) { return x.valid() ? double(x.value()[0]) : 0.0; };
        LossReport r{v(seg), v(gedl_labeled), v(gedl_unlabeled), v(proto_labeled), v(proto_unlabeled), lambda, 0};
        r.total = v(total);
        return r;
    }
};

namespace detail {

template <typename T>
std::vector<ReliabilityMap<T>> reliability_maps(const std::vector<UncertaintyField<T>>& u, bool enabled) {
    std::vector<ReliabilityMap<T>> out;
    for (const auto& f : u) out.push_back(enabled ? reliability_map(f) : ReliabilityMap<T>::ones(f.spatial()));
    return out;
}

template <typename T>
ad::Var<T> batch_mean(const std::vector<ad::Var<T>>& terms) {
    ad::Var<T> acc = terms.at(0);
    for (std::size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
    return acc * static_cast<T>(1.0 / double(terms.size()));
}

}  // namespace detail

// True when the unlabeled volumes contribute anything to the loss.
inline bool uses_unlabeled(const TrainConfig& c) {
    return c.ablation.use_prototypes || c.ablation.use_gedl_unlabeled;
}

// Builds the loss graph of one step at iteration t. `student` are the
// differentiable parameters; the teacher only ever enters as constants.
template <typename T>
StepGraph<T> build_step(const TrainConfig& cfg, const std::vector<ad::Var<T>>& student,
                        const Parameters<T>& teacher, const std::vector<Volume<T>>& labeled,
                        const std::vector<Volume<T>>& unlabeled, std::size_t t,
                        const StepContext<T>* frozen = nullptr) {
    using V = ad::Var<T>;
    const auto& ab = cfg.ablation;
    const std::size_t n = cfg.model.num_classes;
    const bool semi = !unlabeled.empty() && uses_unlabeled(cfg);
    StepGraph<T> g;
    g.lambda = lambda_con(double(t), double(cfg.iterations), cfg.lambda_max);
    g.gamma = gaussian_rampup(double(t), double(cfg.iterations), cfg.gamma_max);

    // forwards and head fusion
    std::vector<Prediction<T>> sl, su, tu;
    for (const auto& v : labeled) sl.push_back(predict(cfg.model, student, v.image, cfg.student_fusion(), cfg.fusion));
    if (semi) {
        for (const auto& v : unlabeled)
            su.push_back(predict(cfg.model, student, v.image, cfg.student_fusion(), cfg.fusion));
        if (ab.use_mt && !frozen) {
            const auto tp = as_constants(teacher);
            for (const auto& v : unlabeled)
                tu.push_back(predict(cfg.model, tp, v.image, ab.fuse_heads_mode, cfg.fusion));
        }
    }

    // uncertainty, reliability and pseudo-labels, all detached
    StepContext<T> ctx;
    if (frozen) {
        ctx = *frozen;
    } else {
        std::vector<UncertaintyField<T>> raw;
        for (const auto& p : sl) raw.push_back(dual_uncertainty(MassField<T>(p.fused.value())));
        ctx.u_labeled = normalize01(raw, cfg.norm_scope);
        ctx.beta_labeled = detail::reliability_maps(ctx.u_labeled, ab.use_lrm);
        if (semi) {
            raw.clear();
            for (std::size_t i = 0; i < unlabeled.size(); ++i) {
                // without a mean teacher the student labels its own unlabeled volumes
                MassField<T> m;
                if (ab.use_mt) {
                    m = MassField<T>(tu[i].fused.value());
                } else {
                    std::vector<MassField<T>> heads;
                    for (const auto& h : su[i].masses) heads.emplace_back(h.value());
                    m = fuse_heads(heads, ab.fuse_heads_mode, cfg.fusion);
                }
                raw.push_back(dual_uncertainty(m));
                ctx.pseudo.push_back(pseudo_labels(m));
                ctx.teacher_hidden.push_back(ab.use_mt ? tu[i].hidden : ad::detach(su[i].hidden));
            }
            ctx.u_unlabeled = normalize01(raw, cfg.norm_scope);
            ctx.beta_unlabeled = detail::reliability_maps(ctx.u_unlabeled, ab.use_urm);
        }
    }

    // losses
    std::vector<V> seg, gl, pl;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        seg.push_back(seg_loss(seg_probs(sl[i], cfg.seg_source), labeled[i].label));
        if (ab.use_gedl_labeled)
            gl.push_back(gedl_loss(graph::dirichlet_from_mass(sl[i].fused), labeled[i].label, ctx.u_labeled[i], cfg.gedl));
    }
    g.seg = detail::batch_mean(seg);
    V labeled_total = g.seg;
    if (ab.use_gedl_labeled) {
        g.gedl_labeled = detail::batch_mean(gl);
        labeled_total = labeled_total + g.gedl_labeled;
    }

    V unlabeled_total;
    auto add_unlabeled = [&](const V& x) { unlabeled_total = unlabeled_total.valid() ? unlabeled_total + x : x; };

    if (ab.use_prototypes) {
        std::vector<V> hl;
        std::vector<LabelVolume> yl;
        for (std::size_t i = 0; i < labeled.size(); ++i) {
            hl.push_back(sl[i].hidden);
            yl.push_back(labeled[i].label);
        }
        auto protos = pool_prototypes(hl, ctx.beta_labeled, yl, n, PrototypeSource::labeled);
        if (semi) {
            auto pu = pool_prototypes(ctx.teacher_hidden, ctx.beta_unlabeled, ctx.pseudo, n, PrototypeSource::unlabeled);
            protos = fuse_prototypes(protos, pu, static_cast<T>(g.gamma));
        }
        const T tau = static_cast<T>(cfg.temperature);
        for (std::size_t i = 0; i < labeled.size(); ++i)
            pl.push_back(proto_ce_loss(similarity_probs(hl[i], protos, tau), labeled[i].label, ctx.beta_labeled[i]));
        g.proto_labeled = detail::batch_mean(pl);
        labeled_total = labeled_total + g.proto_labeled;
        if (semi) {
            std::vector<V> pu_terms;
            for (std::size_t i = 0; i < unlabeled.size(); ++i)
                pu_terms.push_back(
                    proto_ce_loss(similarity_probs(su[i].hidden, protos, tau), ctx.pseudo[i], ctx.beta_unlabeled[i]));
            g.proto_unlabeled = detail::batch_mean(pu_terms);
            add_unlabeled(g.proto_unlabeled);
        }
        g.prototypes = protos;
    }
    if (semi && ab.use_gedl_unlabeled) {
        std::vector<V> gu;
        for (std::size_t i = 0; i < unlabeled.size(); ++i)
            gu.push_back(gedl_loss(graph::dirichlet_from_mass(su[i].fused), ctx.pseudo[i], ctx.u_unlabeled[i], cfg.gedl));
        g.gedl_unlabeled = detail::batch_mean(gu);
        add_unlabeled(g.gedl_unlabeled);
    }

    g.total = unlabeled_total.valid() ? labeled_total + unlabeled_total * static_cast<T>(g.lambda) : labeled_total;
    g.context = std::move(ctx);
    return g;
}

// ---------------------------------------------------------------------------
// Training state and steps

template <typename T>
struct TrainState {
    std::size_t step = 0;
    Parameters<T> student, teacher;
    Adam<T> optimizer;
    std::mt19937_64 labeled_rng, unlabeled_rng;
    std::vector<LossReport> reports;
    std::optional<PrototypeSet<T>> prototypes;
};

// Separate seeded streams for initialization and for each batch sampler, so
// runs that differ only in toggles draw identical labeled batches.
template <typename T>
TrainState<T> init_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState<T> s;
    s.student = init_parameters<T>(cfg.model, phantom::mix_seed(cfg.seed, 0));
    s.teacher = s.student;
    s.optimizer.lr = cfg.learning_rate;
    s.labeled_rng.seed(phantom::mix_seed(cfg.seed, 1));
    s.unlabeled_rng.seed(phantom::mix_seed(cfg.seed, 2));
    return s;
}

template <typename T>
std::vector<Volume<T>> draw_batch(const std::vector<Volume<T>>& pool, std::size_t count, std::mt19937_64& rng) {
    std::vector<Volume<T>> out;
    if (pool.empty()) return out;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool[pick(rng)]);
    return out;
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> gradients(const std::vector<ad::Var<T>>& leaves) {
    std::vector<Tensor<T>> g;
    for (const auto& l : leaves) g.push_back(l.grad());
    return g;
}

inline void check_finite(const LossReport& r, std::size_t step) {
    for (double v : {r.seg, r.gedl_labeled, r.gedl_unlabeled, r.proto_ce_labeled, r.proto_ce_unlabeled, r.total})
        if (!std::isfinite(v))
            throw NumericError("non-finite loss at step " + std::to_string(step) + ": " + to_json(r).dump());
}

}  // namespace detail

template <typename T>
LossReport train_step(const TrainConfig& cfg, TrainState<T>& s, const std::vector<Volume<T>>& labeled,
                      const std::vector<Volume<T>>& unlabeled) {
    auto leaves = as_leaves(s.student);
    auto g = build_step(cfg, leaves, s.teacher, labeled, unlabeled, s.step);
    auto report = g.report();
    detail::check_finite(report, s.step);
    ad::backward(g.total);
    s.optimizer.apply(s.student, detail::gradients(leaves));
    if (cfg.ablation.use_mt) ema_update(s.teacher, s.student, static_cast<T>(cfg.ema_decay));
    if (g.prototypes) s.prototypes = g.prototypes;
    ++s.step;
    s.reports.push_back(report);
    return report;
}

// Plain supervised training on L_seg alone, written independently of
// build_step. With every semi-supervised toggle off the two must agree.
template <typename T>
LossReport supervised_step(const TrainConfig& cfg, TrainState<T>& s, const std::vector<Volume<T>>& labeled) {
    auto leaves = as_leaves(s.student);
    ad::Var<T> sum;
    for (const auto& v : labeled) {
        auto p = predict(cfg.model, leaves, v.image, cfg.student_fusion(), cfg.fusion);
        auto l = seg_loss(seg_probs(p, cfg.seg_source), v.label);
        sum = sum.valid() ? sum + l : l;
    }
    auto loss = sum * static_cast<T>(1.0 / double(labeled.size()));
    LossReport r;
    r.seg = r.total = loss.value()[0];
    r.lambda_con = lambda_con(double(s.step), double(cfg.iterations), cfg.lambda_max);
    detail::check_finite(r, s.step);
    ad::backward(loss);
    s.optimizer.apply(s.student, detail::gradients(leaves));
    ++s.step;
    s.reports.push_back(r);
    return r;
}

// One sampled step: draws the batches from the pools, then train_step.
template <typename T>
LossReport sampled_step(const TrainConfig& cfg, TrainState<T>& s, const std::vector<Volume<T>>& labeled_pool,
                        const std::vector<Volume<T>>& unlabeled_pool) {
    auto lb = draw_batch(labeled_pool, cfg.labeled_per_batch, s.labeled_rng);
    std::vector<Volume<T>> ub;
    if (uses_unlabeled(cfg)) ub = draw_batch(unlabeled_pool, cfg.unlabeled_per_batch, s.unlabeled_rng);
    return train_step(cfg, s, lb, ub);
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
LabelVolume segment(const TrainConfig& cfg, const Parameters<T>& params, const ad::Var<T>& image) {
    auto p = predict(cfg.model, as_constants(params), image, cfg.student_fusion(), cfg.fusion);
    auto probs = seg_probs(p, cfg.seg_source).value();
    const Shape3 sp = spatial_of(probs.shape());
    const std::size_t v = voxel_count(sp), n = probs.extent(0);
    LabelVolume out(sp);
    for (std::size_t i = 0; i < v; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (probs[c * v + i] > probs[best * v + i]) best = c;
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

template <typename T>
metrics::MetricReport evaluate_model(const TrainConfig& cfg, const Parameters<T>& params,
                                     const std::vector<Volume<T>>& test) {
    std::vector<LabelVolume> preds, gts;
    for (const auto& v : test) {
        preds.push_back(segment(cfg, params, v.image));
        gts.push_back(v.label);
    }
    return metrics::evaluate(preds, gts, cfg.model.num_classes);
}

// Dual uncertainty of the fused student prediction.
template <typename T>
UncertaintyField<T> predict_uncertainty(const TrainConfig& cfg, const Parameters<T>& params, const ad::Var<T>& image) {
    auto p = predict(cfg.model, as_constants(params), image, cfg.student_fusion(), cfg.fusion);
    return dual_uncertainty(MassField<T>(p.fused.value()));
}

// ---------------------------------------------------------------------------
// Full run with artifacts

template <typename T>
io::Checkpoint make_checkpoint(const TrainConfig& cfg, const TrainState<T>& s) {
    nlohmann::json header{{"config", to_json(cfg)},
                          {"step", s.step},
                          {"student_tensors", s.student.tensors.size()},
                          {"teacher_tensors", s.teacher.tensors.size()}};
    io::Checkpoint c{header.dump(), {}};
    for (const auto& t : s.student.tensors) c.tensors.push_back(io::to_raw(t));
    for (const auto& t : s.teacher.tensors) c.tensors.push_back(io::to_raw(t));
    return c;
}

// Student parameters from a checkpoint written by run().
template <typename T>
Parameters<T> student_from_checkpoint(const io::Checkpoint& c, const NetConfig& net) {
    const std::size_t count = 2 * layer_shapes(net).size();
    if (c.tensors.size() < count) throw FormatError("checkpoint holds fewer tensors than the network needs");
    auto expected = init_parameters<T>(net, 0);
    Parameters<T> p;
    for (std::size_t i = 0; i < count; ++i) {
        p.tensors.push_back(io::tensor_from_raw<T>(c.tensors[i]));
        if (p.tensors.back().shape() != expected.tensors[i].shape())
            throw FormatError("checkpoint tensor " + std::to_string(i) + " has the wrong shape");
    }
    return p;
}

struct RunResult {
    metrics::MetricReport metrics;
    std::vector<LossReport> losses;
    std::string metrics_path;
};

inline void check_dataset(const TrainConfig& cfg, const phantom::Dataset& d) {
    const std::size_t total = d.labeled.size() + d.unlabeled.size();
    if (d.labeled.empty()) throw ConfigError("dataset has no labeled samples");
    if (phantom::labeled_count(total, cfg.labeled_ratio) != d.labeled.size())
        throw ConfigError("train.labeled_ratio " + std::to_string(cfg.labeled_ratio) + " does not match the dataset split (" +
                          std::to_string(d.labeled.size()) + " of " + std::to_string(total) + " labeled)");
    for (const auto* set : {&d.labeled, &d.unlabeled, &d.test})
        for (const auto& s : *set) {
            s.label.check_classes(cfg.model.num_classes);
            check_divisible(cfg.model, s.label.shape);
        }
}

// Writes <out>/config.json, losses.jsonl (one LossReport per step, no clock
// values), timing.jsonl, checkpoints/, metrics.json.
template <typename T>
RunResult run(const TrainConfig& cfg, const phantom::Dataset& data, const std::string& out_dir,
              std::FILE* progress = nullptr) {
    namespace fs = std::filesystem;
    check_dataset(cfg, data);
    const fs::path out(out_dir), ckpt = out / "checkpoints";
    fs::create_directories(ckpt);
    {
        std::ofstream f(out / "config.json");
        if (!f) throw IoError("cannot write into " + out_dir);
        f << to_json(cfg).dump(2) << "\n";
    }
    std::ofstream losses(out / "losses.jsonl"), timing(out / "timing.jsonl");
    if (!losses || !timing) throw IoError("cannot write logs into " + out_dir);

    const auto labeled = to_volumes<T>(data.labeled), unlabeled = to_volumes<T>(data.unlabeled),
               test = to_volumes<T>(data.test);
    auto state = init_state<T>(cfg);

    auto save = [&]() {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06zu.eplc", state.step);
        io::write_checkpoint((ckpt / name).string(), make_checkpoint(cfg, state));
        if (state.prototypes) {
            const auto& p = *state.prototypes;
            std::vector<float> v(p.vectors.value().size());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(p.vectors.value()[i]);
            std::snprintf(name, sizeof name, "proto_%06zu.eplp", state.step);
            io::write_prototypes((ckpt / name).string(), p.num_classes(), p.dim(), v, p.valid);
        }
    };
    save();

    const auto start = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
        const auto r = sampled_step(cfg, state, labeled, unlabeled);
        auto line = to_json(r);
        line["step"] = t;
        line["gamma"] = gaussian_rampup(double(t), double(cfg.iterations), cfg.gamma_max);
        losses << line.dump() << "\n";
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        timing << nlohmann::json{{"step", t}, {"wall_time", wall}}.dump() << "\n";
        if (progress && (t + 1) % 100 == 0)
            std::fprintf(progress, "step %zu/%zu total=%.4f (%.1fs)\n", t + 1, cfg.iterations, r.total, wall);
        if (cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0 && state.step != cfg.iterations) save();
    }
    if (cfg.iterations > 0) save();

    RunResult res;
    res.losses = state.reports;
    res.metrics = evaluate_model(cfg, state.student, test);
    auto mj = metrics::to_json(res.metrics);
    mj["steps"] = state.step;
    res.metrics_path = (out / "metrics.json").string();
    std::ofstream m(res.metrics_path);
    if (!m) throw IoError("cannot write " + res.metrics_path);
    m << mj.dump(2) << "\n";
    return res;
}

}  // namespace epl

#pragma once

#include <cmath>

#include "epl/evidence.hpp"
#include "epl/uncertainty.hpp"

namespace epl {

using ad::Var;

inline constexpr double kOverlapSmoothing = 1e-5;
inline constexpr double kFocalGamma = 2.0;

struct GedlOptions {
    // true evaluates log S - alpha_n instead of log S - log alpha_n
    bool literal = false;
};

struct LossReport {
    double seg = 0;
    double gedl_labeled = 0;
    double gedl_unlabeled = 0;
    double proto_ce_labeled = 0;
    double proto_ce_unlabeled = 0;
    double lambda_con = 0;
    double total = 0;

    double labeled_total() const { return proto_ce_labeled + gedl_labeled; }
    double unlabeled_total() const { return proto_ce_unlabeled + gedl_unlabeled; }
};

namespace detail {

template <typename T>
void check_rows_normalized(const Tensor<T>& probs, double tol) {
    const std::size_t n = probs.extent(0), v = probs.size() / n;
    for (std::size_t i = 0; i < v; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < n; ++c) s += probs[c * v + i];
        if (std::abs(s - 1.0) > tol) throw DomainError("probability rows are not normalized");
    }
}

template <typename T>
void check_unit_interval(const Tensor<T>& t, const char* what) {
    for (auto x : t.values())
        if (!(x >= T{0} && x <= T{1})) throw DomainError(std::string(what) + " outside [0,1]");
}

template <typename T>
Var<T> labels_one_hot(const LabelVolume& labels, std::size_t n, const Shape& expected) {
    Tensor<T> y = one_hot<T>(labels, n);
    if (y.shape() != expected)
        throw ShapeError("labels " + shape_str(y.shape()) + " do not match predictions " +
                         shape_str(expected));
    return Var<T>::constant(std::move(y));
}

}  // namespace detail

// (1/V) sum_v (1 - U_v) sum_n y_n (log S_v - log alpha_{n,v})
template <typename T>
Var<T> gedl_loss(const graph::Dirichlet<T>& d, const LabelVolume& labels,
                 const UncertaintyField<T>& normalized_u, GedlOptions opt = {}) {
    detail::check_unit_interval(normalized_u.values, "normalized uncertainty");
    const std::size_t n = d.alpha.shape()[0];
    auto y = detail::labels_one_hot<T>(labels, n, d.alpha.shape());
    if (normalized_u.values.shape() != d.strength.shape())
        throw ShapeError("uncertainty field does not match prediction shape");
    auto per_class = opt.literal ? ad::log(d.strength) - d.alpha : ad::log(d.strength) - ad::log(d.alpha);
    auto selected = ad::sum(per_class * y, {0});
    Tensor<T> w(normalized_u.values.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = T{1} - normalized_u[i];
    return ad::mean_all(selected * Var<T>::constant(std::move(w)));
}

template <typename T>
double gedl_loss(const DirichletField<T>& d, const LabelVolume& labels,
                 const UncertaintyField<T>& normalized_u, GedlOptions opt = {}) {
    graph::Dirichlet<T> g{Var<T>::constant(d.strength), Var<T>::constant(d.alpha)};
    return gedl_loss(g, labels, normalized_u, opt).value()[0];
}

// Mean of soft Dice loss, voxel cross-entropy, soft IoU loss and focal loss.
template <typename T>
Var<T> seg_loss(const Var<T>& probs, const LabelVolume& labels) {
    detail::check_rows_normalized(probs.value(), 1e-4);
    const std::size_t n = probs.shape()[0];
    auto y = detail::labels_one_hot<T>(labels, n, probs.shape());
    const T smooth = static_cast<T>(kOverlapSmoothing);

    auto inter = ad::sum(probs * y, {1, 2, 3});
    auto psum = ad::sum(probs, {1, 2, 3});
    auto ysum = ad::sum(y, {1, 2, 3});
    auto dice = (T{2} * inter + smooth) / (psum + ysum + smooth);
    auto iou = (inter + smooth) / (psum + ysum - inter + smooth);
    auto dice_loss = T{1} - ad::mean_all(dice);
    auto iou_loss = T{1} - ad::mean_all(iou);

    auto p_true = ad::sum(probs * y, {0});
    auto log_p = ad::log(p_true);
    auto ce = -ad::mean_all(log_p);
    auto focal = -ad::mean_all(ad::power(T{1} - p_true, static_cast<T>(kFocalGamma)) * log_p);
    return (dice_loss + ce + iou_loss + focal) * T{0.25};
}

// sum_v beta_v CE(s_v, y_v) / sum_v beta_v; zero when every beta is zero.
template <typename T>
Var<T> proto_ce_loss(const Var<T>& sim_probs, const LabelVolume& labels,
                     const ReliabilityMap<T>& beta) {
    detail::check_rows_normalized(sim_probs.value(), 1e-4);
    detail::check_unit_interval(beta.values, "reliability");
    const std::size_t n = sim_probs.shape()[0];
    auto y = detail::labels_one_hot<T>(labels, n, sim_probs.shape());
    if (beta.values.shape() != Shape{1, labels.shape[0], labels.shape[1], labels.shape[2]})
        throw ShapeError("reliability map does not match labels");
    double weight = 0;
    for (auto b : beta.values.values()) weight += b;
    if (weight <= 0) return Var<T>::scalar(T{0});
    auto ce = -ad::log(ad::sum(sim_probs * y, {0}));
    return ad::sum_all(ce * Var<T>::constant(beta.values)) * static_cast<T>(1.0 / weight);
}

// L = L_seg + (proto_l + gedl_l) + lambda (proto_u + gedl_u)
inline LossReport total_loss(double seg, double proto_ce_labeled, double gedl_labeled,
                             double proto_ce_unlabeled, double gedl_unlabeled, double lambda_con) {
    LossReport r{seg, gedl_labeled, gedl_unlabeled, proto_ce_labeled, proto_ce_unlabeled, lambda_con, 0};
    r.total = r.seg + r.labeled_total() + r.lambda_con * r.unlabeled_total();
    return r;
}

template <typename T>
Var<T> total_loss(const Var<T>& seg, const Var<T>& proto_ce_labeled, const Var<T>& gedl_labeled,
                  const Var<T>& proto_ce_unlabeled, const Var<T>& gedl_unlabeled, T lambda_con) {
    return seg + (proto_ce_labeled + gedl_labeled) + (proto_ce_unlabeled + gedl_unlabeled) * lambda_con;
}

}  // namespace epl

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "epl/errors.hpp"

namespace epl {

using Shape = std::vector<std::size_t>;

// Guard applied to log/log2 arguments and division denominators.
inline constexpr double kGuardEpsilon = 1e-8;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Dense row-major array. Channels-first volumes are laid out as (C, D, H, W).
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_size(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const { return data_.empty(); }

    std::span<const T> values() const { return data_; }
    std::span<T> values() { return data_; }
    const T* data() const { return data_.data(); }
    T* data() { return data_.data(); }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    // Value at a (channel, z, y, x) style multi-index; rank must match.
    template <typename... Idx>
    T at(Idx... idx) const {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }
    template <typename... Idx>
    T& at(Idx... idx) {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

   private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) off = off * shape_[axis++] + i;
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

// Spatial extents (D, H, W).
using Shape3 = std::array<std::size_t, 3>;

inline std::size_t voxel_count(const Shape3& s) { return s[0] * s[1] * s[2]; }

inline Shape3 spatial_of(const Shape& shape) {
    if (shape.size() < 3) throw ShapeError("expected at least 3 axes, got " + shape_str(shape));
    const std::size_t r = shape.size();
    return {shape[r - 3], shape[r - 2], shape[r - 1]};
}

// Integer class map over a (D, H, W) grid.
struct LabelVolume {
    Shape3 shape{0, 0, 0};
    std::vector<std::uint8_t> values;

    LabelVolume() = default;
    explicit LabelVolume(Shape3 s, std::uint8_t fill = 0) : shape(s), values(voxel_count(s), fill) {}
    LabelVolume(Shape3 s, std::vector<std::uint8_t> v) : shape(s), values(std::move(v)) {
        if (values.size() != voxel_count(shape)) throw ShapeError("label volume size mismatch");
    }

    std::size_t size() const { return values.size(); }
    std::uint8_t operator[](std::size_t i) const { return values[i]; }
    std::uint8_t& operator[](std::size_t i) { return values[i]; }
    std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const {
        return values[(z * shape[1] + y) * shape[2] + x];
    }
    std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) {
        return values[(z * shape[1] + y) * shape[2] + x];
    }

    // Consumers reject labels outside the class range; the file layer does not.
    void check_classes(std::size_t num_classes) const {
        for (auto v : values)
            if (v >= num_classes)
                throw DomainError("label value " + std::to_string(v) + " >= num_classes " +
                                  std::to_string(num_classes));
    }

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

// One-hot encoding as a [N, D, H, W] tensor.
template <typename T>
Tensor<T> one_hot(const LabelVolume& labels, std::size_t num_classes) {
    labels.check_classes(num_classes);
    const std::size_t v = labels.size();
    Tensor<T> out({num_classes, labels.shape[0], labels.shape[1], labels.shape[2]});
    for (std::size_t i = 0; i < v; ++i) out[labels[i] * v + i] = T{1};
    return out;
}

// Broadcast bookkeeping for two operands (numpy-style, size-1 axes only).
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    bool same = false;
};

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const std::size_t pad = out.size() - in.size();
    std::vector<std::size_t> strides(out.size(), 0);
    const auto natural = row_major_strides(in);
    for (std::size_t i = 0; i < in.size(); ++i)
        strides[pad + i] = in[i] == 1 ? 0 : natural[i];
    return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
        const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        out[i] = da == 1 ? db : da;
    }
    return out;
}

inline BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    plan.out = broadcast_shape(a, b);
    plan.same = a == b;
    plan.stride_a = broadcast_strides(a, plan.out);
    plan.stride_b = broadcast_strides(b, plan.out);
    return plan;
}

// Calls f(out_index, offset_a, offset_b) for every element of the output shape.
template <typename F>
void for_each_broadcast(const Shape& out_shape, const std::vector<std::size_t>& sa_in,
                        const std::vector<std::size_t>& sb_in, F&& f) {
    const std::size_t total = shape_size(out_shape);
    if (total == 0) return;
    if (out_shape.empty()) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    // merge neighbouring axes that are contiguous for both operands
    Shape out{out_shape[0]};
    std::vector<std::size_t> sa{sa_in[0]}, sb{sb_in[0]};
    for (std::size_t ax = 1; ax < out_shape.size(); ++ax) {
        const std::size_t n = out_shape[ax];
        if (sa.back() == sa_in[ax] * n && sb.back() == sb_in[ax] * n) {
            out.back() *= n;
            sa.back() = sa_in[ax];
            sb.back() = sb_in[ax];
        } else {
            out.push_back(n);
            sa.push_back(sa_in[ax]);
            sb.push_back(sb_in[ax]);
        }
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    const std::size_t inner = out[r - 1];
    const std::size_t ia_step = sa[r - 1];
    const std::size_t ib_step = sb[r - 1];
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < total; o += inner) {
        std::size_t a = oa, b = ob;
        for (std::size_t k = 0; k < inner; ++k, a += ia_step, b += ib_step) f(o + k, a, b);
        // advance all but the innermost axis
        for (std::size_t ax = r - 1; ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out[ax]) break;
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& t, const Shape& shape) {
    if (broadcast_shape(t.shape(), shape) != shape)
        throw ShapeError("cannot broadcast " + shape_str(t.shape()) + " to " + shape_str(shape));
    Tensor<T> out(shape);
    const auto sa = broadcast_strides(t.shape(), shape);
    for_each_broadcast(shape, sa, sa, [&](std::size_t o, std::size_t a, std::size_t) {
        out[o] = t[a];
    });
    return out;
}

}  // namespace epl

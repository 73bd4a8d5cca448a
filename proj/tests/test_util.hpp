#pragma once

#include <random>

#include "epl/tensor.hpp"

namespace epl::test {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& x : t.values()) x = static_cast<T>(dist(rng));
    return t;
}

inline LabelVolume random_labels(Shape3 s, std::size_t n, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> dist(0, static_cast<int>(n) - 1);
    LabelVolume l(s);
    for (auto& v : l.values) v = static_cast<std::uint8_t>(dist(rng));
    return l;
}

}  // namespace epl::test

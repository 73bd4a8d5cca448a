#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "epl/autodiff.hpp"

namespace epl::ad {

struct ConvGeometry {
    std::size_t c_in, c_out, k, stride, padding;
    Shape3 in, out;
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride,
                                  std::size_t padding) {
    if (input.size() != 4 || kernel.size() != 5)
        throw ShapeError("conv3d expects input [C,D,H,W] and kernel [Co,Ci,k,k,k]");
    if (kernel[1] != input[0])
        throw ShapeError("conv3d channel mismatch: input has " + std::to_string(input[0]) +
                         ", kernel expects " + std::to_string(kernel[1]));
    const std::size_t k = kernel[2];
    if (kernel[3] != k || kernel[4] != k || k % 2 == 0)
        throw ShapeError("conv3d kernel must be cubic with odd extent");
    if (stride == 0) throw ShapeError("conv3d stride must be positive");
    ConvGeometry g{input[0], kernel[0], k, stride, padding, {input[1], input[2], input[3]}, {}};
    for (int a = 0; a < 3; ++a) {
        if (g.in[a] + 2 * padding < k) throw ShapeError("conv3d input smaller than kernel");
        g.out[a] = (g.in[a] + 2 * padding - k) / stride + 1;
    }
    return g;
}

namespace detail {

// Polyphase layout of the zero-padded input. Padded coordinate p maps to
// phase p % stride at position p / stride, so for every kernel offset the
// inputs it touches form one contiguous run inside a single phase grid, and
// the convolution becomes k^3 small GEMMs with no column buffer.
struct PhaseLayout {
    std::size_t s, grid[3], plane, span;

    explicit PhaseLayout(const ConvGeometry& g) : s(g.stride) {
        for (int a = 0; a < 3; ++a) grid[a] = (g.in[a] + 2 * g.padding + s - 1) / s;
        plane = grid[0] * grid[1] * grid[2];
        span = ((g.out[0] - 1) * grid[1] + g.out[1] - 1) * grid[2] + g.out[2];
    }

    std::size_t phase(std::size_t a, std::size_t b, std::size_t c) const { return ((a % s) * s + b % s) * s + c % s; }
    std::size_t shift(std::size_t a, std::size_t b, std::size_t c) const {
        return ((a / s) * grid[1] + b / s) * grid[2] + c / s;
    }
    std::size_t out_index(std::size_t z, std::size_t y, std::size_t x) const { return (z * grid[1] + y) * grid[2] + x; }
};

// Visits (input offset, phase-buffer offset) for every input voxel. Rows
// along x map through small lookup tables, so the inner loop has no division.
template <typename F>
void for_each_phase_cell(const ConvGeometry& g, const PhaseLayout& l, F&& f) {
    const auto [D, H, W] = g.in;
    const std::size_t p = g.padding, s = l.s;
    std::vector<std::size_t> xoff(W);
    for (std::size_t x = 0; x < W; ++x) xoff[x] = ((x + p) % s) * g.c_in * l.plane + (x + p) / s;
    for (std::size_t ci = 0; ci < g.c_in; ++ci)
        for (std::size_t z = 0; z < D; ++z)
            for (std::size_t y = 0; y < H; ++y) {
                const std::size_t pz = z + p, py = y + p;
                const std::size_t row = (((pz % s) * s + py % s) * s * g.c_in + ci) * l.plane +
                                        ((pz / s) * l.grid[1] + py / s) * l.grid[2];
                const std::size_t src = ((ci * D + z) * H + y) * W;
                for (std::size_t x = 0; x < W; ++x) f(src + x, row + xoff[x]);
            }
}

// Direct kernels used in place of per-offset GEMMs. A tap is a weight block
// plus an offset into the input rows; an output tile of 4 rows by 2 vectors
// stays in registers across every tap and input channel.
template <typename T>
struct Tap {
    const T* w;
    std::size_t offset;
};

template <typename T>
struct Simd {
    typedef T type __attribute__((vector_size(64)));
    static constexpr std::size_t lanes = 64 / sizeof(T);
    static type load(const T* p) {
        type v;
        std::memcpy(&v, p, sizeof v);
        return v;
    }
};

// out[r][j] = sum_t sum_c t.w[r*cols + c] * in[c*ld_in + t.offset + j], j < n
template <typename T>
void tap_conv(T* out, std::size_t ld_out, std::size_t rows, std::size_t cols, const T* in, std::size_t ld_in,
              const std::vector<Tap<T>>& taps, std::size_t n) {
    using S = Simd<T>;
    using V = typename S::type;
    constexpr std::size_t L = S::lanes;
    for (std::size_t r0 = 0; r0 < rows; r0 += 4) {
        const std::size_t nr = std::min<std::size_t>(4, rows - r0);
        std::size_t j = 0;
        for (; j + 2 * L <= n; j += 2 * L) {
            V a0{}, b0{}, a1{}, b1{}, a2{}, b2{}, a3{}, b3{};
            for (const auto& t : taps) {
                const T* wr = t.w + r0 * cols;
                const T* x = in + t.offset + j;
                for (std::size_t c = 0; c < cols; ++c, x += ld_in) {
                    const V x0 = S::load(x), x1 = S::load(x + L);
                    const T w0 = wr[c], w1 = nr > 1 ? wr[cols + c] : T{0}, w2 = nr > 2 ? wr[2 * cols + c] : T{0},
                            w3 = nr > 3 ? wr[3 * cols + c] : T{0};
                    a0 += w0 * x0;
                    b0 += w0 * x1;
                    a1 += w1 * x0;
                    b1 += w1 * x1;
                    a2 += w2 * x0;
                    b2 += w2 * x1;
                    a3 += w3 * x0;
                    b3 += w3 * x1;
                }
            }
            const V* tile[4][2] = {{&a0, &b0}, {&a1, &b1}, {&a2, &b2}, {&a3, &b3}};
            for (std::size_t r = 0; r < nr; ++r) {
                std::memcpy(out + (r0 + r) * ld_out + j, tile[r][0], sizeof(V));
                std::memcpy(out + (r0 + r) * ld_out + j + L, tile[r][1], sizeof(V));
            }
        }
        for (; j < n; ++j)
            for (std::size_t r = 0; r < nr; ++r) {
                T acc = 0;
                for (const auto& t : taps)
                    for (std::size_t c = 0; c < cols; ++c)
                        acc += t.w[(r0 + r) * cols + c] * in[c * ld_in + t.offset + j];
                out[(r0 + r) * ld_out + j] = acc;
            }
    }
}

// For every tap: dw_t[a*cols + b] += sum_j g[a*ld_g + j] * in[b*ld_in + t.offset + j], j < n.
// 4x4 blocks of (a, b) accumulate lane-wise partial sums in registers; the
// horizontal sums happen once at the end.
template <typename T>
void tap_dots(const std::vector<T*>& dw, const T* g, std::size_t ld_g, std::size_t rows, const T* in, std::size_t ld_in,
              std::size_t cols, const std::vector<std::size_t>& offsets, std::size_t n) {
    using S = Simd<T>;
    using V = typename S::type;
    constexpr std::size_t L = S::lanes;
    const std::size_t ra = (rows + 3) / 4, rb = (cols + 3) / 4, nv = n / L * L;
    // partial[t][block a][block b][4][4]
    std::vector<V> partial(offsets.size() * ra * rb * 16, V{});
    // chunks of j keep the input rows cache resident across taps
    constexpr std::size_t chunk = 128 * L;
    for (std::size_t j0 = 0; j0 < nv; j0 += chunk) {
        const std::size_t j1 = std::min(nv, j0 + chunk);
        for (std::size_t t = 0; t < offsets.size(); ++t)
            for (std::size_t a0 = 0; a0 < ra; ++a0)
                for (std::size_t b0 = 0; b0 < rb; ++b0) {
                    const T* gr[4];
                    const T* xr[4];
                    // out-of-range rows alias the first row of the block and are dropped later
                    for (std::size_t i = 0; i < 4; ++i) {
                        gr[i] = g + std::min(4 * a0 + i, rows - 1) * ld_g;
                        xr[i] = in + std::min(4 * b0 + i, cols - 1) * ld_in + offsets[t];
                    }
                    V* part = partial.data() + ((t * ra + a0) * rb + b0) * 16;
                    V acc[16];
#pragma GCC unroll 16
                    for (std::size_t i = 0; i < 16; ++i) acc[i] = part[i];
                    for (std::size_t j = j0; j < j1; j += L) {
                        V gv[4];
#pragma GCC unroll 4
                        for (std::size_t ai = 0; ai < 4; ++ai) gv[ai] = S::load(gr[ai] + j);
#pragma GCC unroll 4
                        for (std::size_t bi = 0; bi < 4; ++bi) {
                            const V x = S::load(xr[bi] + j);
#pragma GCC unroll 4
                            for (std::size_t ai = 0; ai < 4; ++ai) acc[ai * 4 + bi] += gv[ai] * x;
                        }
                    }
#pragma GCC unroll 16
                    for (std::size_t i = 0; i < 16; ++i) part[i] = acc[i];
                }
    }
    for (std::size_t t = 0; t < offsets.size(); ++t)
        for (std::size_t a = 0; a < rows; ++a)
            for (std::size_t b = 0; b < cols; ++b) {
                const V& v = partial[((t * ra + a / 4) * rb + b / 4) * 16 + (a % 4) * 4 + b % 4];
                T sum = 0;
                for (std::size_t l = 0; l < L; ++l) sum += v[l];
                const T* ga = g + a * ld_g;
                const T* xb = in + b * ld_in + offsets[t];
                for (std::size_t j = nv; j < n; ++j) sum += ga[j] * xb[j];
                dw[t][a * cols + b] += sum;
            }
}

}  // namespace detail

// Cross-correlation of a single [C_in, D, H, W] volume.
template <typename T>
Var<T> conv3d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
    const detail::PhaseLayout l(g);
    const std::size_t k = g.k, k3 = k * k * k, ci = g.c_in, co = g.c_out;

    auto phases = std::make_shared<std::vector<T>>(l.s * l.s * l.s * ci * l.plane, T{0});
    const T* x = input.value().data();
    detail::for_each_phase_cell(g, l, [&](std::size_t src, std::size_t dst) { (*phases)[dst] = x[src]; });

    // kernel repacked as k^3 blocks of [Co, Ci]
    auto packed = std::make_shared<std::vector<T>>(k3 * co * ci);
    const T* w = kernel.value().data();
    for (std::size_t o = 0; o < k3; ++o)
        for (std::size_t a = 0; a < co; ++a)
            for (std::size_t b = 0; b < ci; ++b) (*packed)[(o * co + a) * ci + b] = w[(a * ci + b) * k3 + o];

    auto for_each_offset = [k, l](auto&& f) {
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b)
                for (std::size_t c = 0; c < k; ++c) f((a * k + b) * k + c, l.phase(a, b, c), l.shift(a, b, c));
    };

    std::vector<T> acc(co * l.span);
    {
        std::vector<detail::Tap<T>> taps;
        for_each_offset([&](std::size_t o, std::size_t ph, std::size_t sh) {
            taps.push_back({packed->data() + o * co * ci, ph * ci * l.plane + sh});
        });
        detail::tap_conv(acc.data(), l.span, co, ci, phases->data(), l.plane, taps, l.span);
    }
    Tensor<T> y({co, g.out[0], g.out[1], g.out[2]});
    for (std::size_t c = 0; c < co; ++c)
        for (std::size_t z = 0; z < g.out[0]; ++z)
            for (std::size_t yy = 0; yy < g.out[1]; ++yy)
                std::copy_n(acc.data() + c * l.span + l.out_index(z, yy, 0), g.out[2],
                            y.data() + ((c * g.out[0] + z) * g.out[1] + yy) * g.out[2]);

    return make_node<T>(std::move(y), {input, kernel}, [g, l, phases, packed, for_each_offset](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        Node<T>& ker = *self.inputs[1];
        const std::size_t k3 = g.k * g.k * g.k, ci = g.c_in, co = g.c_out;
        // output adjoint laid out on the phase grid; gaps stay zero
        std::vector<T> go(co * l.span, T{0});
        for (std::size_t c = 0; c < co; ++c)
            for (std::size_t z = 0; z < g.out[0]; ++z)
                for (std::size_t yy = 0; yy < g.out[1]; ++yy)
                    std::copy_n(self.grad.data() + ((c * g.out[0] + z) * g.out[1] + yy) * g.out[2], g.out[2],
                                go.data() + c * l.span + l.out_index(z, yy, 0));
        if (ker.requires_grad) {
            std::vector<T> dpacked(k3 * co * ci, T{0});
            std::vector<T*> blocks;
            std::vector<std::size_t> offsets;
            for_each_offset([&](std::size_t o, std::size_t ph, std::size_t sh) {
                blocks.push_back(dpacked.data() + o * co * ci);
                offsets.push_back(ph * ci * l.plane + sh);
            });
            detail::tap_dots(blocks, go.data(), l.span, co, phases->data(), l.plane, ci, offsets, l.span);
            T* dw = ker.grad_buffer().data();
            for (std::size_t o = 0; o < k3; ++o)
                for (std::size_t a = 0; a < co; ++a)
                    for (std::size_t b = 0; b < ci; ++b) dw[(a * ci + b) * k3 + o] += dpacked[(o * co + a) * ci + b];
        }
        if (in.requires_grad) {
            // Adjoint as a correlation of the zero-extended output adjoint with
            // the transposed kernel, one phase grid at a time.
            const std::size_t margin = l.shift(g.k - 1, g.k - 1, g.k - 1), len = margin + l.plane;
            std::vector<T> gpad(co * len, T{0});
            for (std::size_t c = 0; c < co; ++c) std::copy_n(go.data() + c * l.span, l.span, gpad.data() + c * len + margin);
            std::vector<T> packed_t(k3 * co * ci);
            for (std::size_t o = 0; o < k3; ++o)
                for (std::size_t a = 0; a < co; ++a)
                    for (std::size_t b = 0; b < ci; ++b) packed_t[(o * ci + b) * co + a] = (*packed)[(o * co + a) * ci + b];
            std::vector<T> dphases(phases->size(), T{0});
            const std::size_t nphase = l.s * l.s * l.s;
            for (std::size_t ph = 0; ph < nphase; ++ph) {
                std::vector<detail::Tap<T>> taps;
                for_each_offset([&](std::size_t o, std::size_t tph, std::size_t sh) {
                    if (tph == ph) taps.push_back({packed_t.data() + o * co * ci, margin - sh});
                });
                if (!taps.empty())
                    detail::tap_conv(dphases.data() + ph * ci * l.plane, l.plane, ci, co, gpad.data(), len, taps, l.plane);
            }
            T* dx = in.grad_buffer().data();
            detail::for_each_phase_cell(g, l, [&](std::size_t src, std::size_t dst) { dx[src] += dphases[dst]; });
        }
    });
}

namespace detail {

struct AxisTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

// Source taps for half-pixel (align-corners-false) linear resampling.
inline AxisTaps linear_taps(std::size_t in, std::size_t out) {
    AxisTaps t;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        t.lo.push_back(lo);
        t.hi.push_back(hi);
        t.frac.push_back(src - static_cast<double>(lo));
    }
    return t;
}

}  // namespace detail

// Trilinear resize of [C, D, H, W] to [C, target]; target extents must not
// be smaller than the input.
template <typename T>
Var<T> trilinear_upsample(const Var<T>& input, Shape3 target) {
    const Shape& s = input.shape();
    if (s.size() != 4) throw ShapeError("trilinear_upsample expects [C,D,H,W]");
    for (int a = 0; a < 3; ++a) {
        if (s[a + 1] == 0 || target[a] == 0) throw ShapeError("trilinear_upsample zero-size axis");
        if (target[a] < s[a + 1]) throw ShapeError("trilinear_upsample target smaller than input");
    }
    if (target == Shape3{s[1], s[2], s[3]}) return reshape(input, s);

    // separable: resample z, then y, then x; each pass is [outer, n, inner]
    struct Pass {
        detail::AxisTaps taps;
        std::size_t outer, n_in, n_out, inner;
    };
    const std::size_t C = s[0];
    const Shape3 in{s[1], s[2], s[3]};
    const std::array<Pass, 3> passes{
        Pass{detail::linear_taps(in[0], target[0]), C, in[0], target[0], in[1] * in[2]},
        Pass{detail::linear_taps(in[1], target[1]), C * target[0], in[1], target[1], in[2]},
        Pass{detail::linear_taps(in[2], target[2]), C * target[0] * target[1], in[2], target[2], 1}};

    auto forward_pass = [](const Pass& p, const T* src, T* dst) {
        for (std::size_t o = 0; o < p.outer; ++o)
            for (std::size_t j = 0; j < p.n_out; ++j) {
                const T w1 = static_cast<T>(p.taps.frac[j]), w0 = static_cast<T>(1.0 - p.taps.frac[j]);
                const T* a = src + (o * p.n_in + p.taps.lo[j]) * p.inner;
                const T* b = src + (o * p.n_in + p.taps.hi[j]) * p.inner;
                T* d = dst + (o * p.n_out + j) * p.inner;
                for (std::size_t k = 0; k < p.inner; ++k) d[k] = w0 * a[k] + w1 * b[k];
            }
    };

    Tensor<T> mid1({C, target[0], in[1], in[2]}), mid2({C, target[0], target[1], in[2]});
    Tensor<T> y({C, target[0], target[1], target[2]});
    forward_pass(passes[0], input.value().data(), mid1.data());
    forward_pass(passes[1], mid1.data(), mid2.data());
    forward_pass(passes[2], mid2.data(), y.data());
    const Shape mid_shapes[2] = {mid1.shape(), mid2.shape()};

    return make_node<T>(std::move(y), {input}, [passes, mid_shapes](Node<T>& self) {
        // adjoint of each pass, in reverse order
        auto adjoint_pass = [](const Pass& p, const T* gout, T* gin) {
            for (std::size_t o = 0; o < p.outer; ++o)
                for (std::size_t j = 0; j < p.n_out; ++j) {
                    const T w1 = static_cast<T>(p.taps.frac[j]), w0 = static_cast<T>(1.0 - p.taps.frac[j]);
                    T* a = gin + (o * p.n_in + p.taps.lo[j]) * p.inner;
                    T* b = gin + (o * p.n_in + p.taps.hi[j]) * p.inner;
                    const T* g = gout + (o * p.n_out + j) * p.inner;
                    for (std::size_t k = 0; k < p.inner; ++k) {
                        a[k] += w0 * g[k];
                        b[k] += w1 * g[k];
                    }
                }
        };
        Tensor<T> g2(mid_shapes[1]), g1(mid_shapes[0]);
        adjoint_pass(passes[2], self.grad.data(), g2.data());
        adjoint_pass(passes[1], g2.data(), g1.data());
        adjoint_pass(passes[0], g1.data(), self.inputs[0]->grad_buffer().data());
    });
}

}  // namespace epl::ad

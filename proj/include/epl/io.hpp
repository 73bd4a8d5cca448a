#pragma once

// EPLV volume files, checkpoints and prototype dumps.
//
// EPLV layout (all little-endian):
//   "EPLV" | u16 version = 1 | u8 dtype | u8 rank | rank x u32 extents | payload

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "epl/errors.hpp"
#include "epl/tensor.hpp"

namespace epl::io {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline constexpr std::array<char, 4> kVolumeMagic{'E', 'P', 'L', 'V'};
inline constexpr std::array<char, 4> kCheckpointMagic{'E', 'P', 'L', 'C'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kMaxRank = 5;

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

template <typename T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else if constexpr (std::is_same_v<T, double>) return DType::f64;
    else {
        static_assert(std::is_same_v<T, std::uint8_t>, "unsupported element type");
        return DType::u8;
    }
}

// Untyped volume: extents plus little-endian payload bytes.
struct RawVolume {
    DType dtype = DType::f32;
    Shape extents;
    std::vector<unsigned char> payload;

    friend bool operator==(const RawVolume&, const RawVolume&) = default;
};

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return v;
}

template <typename T>
void encode_values(std::span<const T> values, std::vector<unsigned char>& out) {
    const std::size_t start = out.size();
    out.resize(start + values.size() * sizeof(T));
    std::memcpy(out.data() + start, values.data(), values.size() * sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
        for (std::size_t i = start; i < out.size(); i += sizeof(T))
            std::reverse(out.begin() + i, out.begin() + i + sizeof(T));
}

template <typename T>
void decode_values(const unsigned char* p, std::span<T> out) {
    std::memcpy(out.data(), p, out.size() * sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        auto* b = reinterpret_cast<unsigned char*>(out.data());
        for (std::size_t i = 0; i < out.size() * sizeof(T); i += sizeof(T)) std::reverse(b + i, b + i + sizeof(T));
    }
}

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);
    return bytes;
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace detail

inline void encode(const RawVolume& v, std::vector<unsigned char>& out) {
    if (v.extents.size() > kMaxRank) throw ShapeError("EPLV rank above 5: " + shape_str(v.extents));
    if (v.payload.size() != shape_size(v.extents) * dtype_size(v.dtype))
        throw ShapeError("payload size does not match extents " + shape_str(v.extents));
    out.insert(out.end(), kVolumeMagic.begin(), kVolumeMagic.end());
    detail::put_le<std::uint16_t>(out, kVersion);
    out.push_back(static_cast<unsigned char>(v.dtype));
    out.push_back(static_cast<unsigned char>(v.extents.size()));
    for (auto e : v.extents) {
        if (e > UINT32_MAX) throw ShapeError("extent does not fit in u32");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    out.insert(out.end(), v.payload.begin(), v.payload.end());
}

inline std::vector<unsigned char> encode(const RawVolume& v) {
    std::vector<unsigned char> out;
    encode(v, out);
    return out;
}

// Decodes one record starting at `pos`, advancing it past the record.
inline RawVolume decode(const std::vector<unsigned char>& bytes, std::size_t& pos) {
    auto need = [&](std::size_t n, const char* what) {
        if (bytes.size() - pos < n) throw FormatError(std::string("truncated EPLV ") + what);
    };
    need(8, "header");
    if (std::memcmp(bytes.data() + pos, kVolumeMagic.data(), 4) != 0) throw FormatError("bad magic, not an EPLV file");
    const auto version = detail::get_le<std::uint16_t>(bytes.data() + pos + 4);
    if (version != kVersion) throw FormatError("unsupported EPLV version " + std::to_string(version));
    RawVolume v;
    const auto code = bytes[pos + 6];
    if (code < 1 || code > 3) throw FormatError("unknown dtype code " + std::to_string(code));
    v.dtype = static_cast<DType>(code);
    const std::size_t rank = bytes[pos + 7];
    if (rank > kMaxRank) throw FormatError("EPLV rank " + std::to_string(rank) + " above 5");
    pos += 8;
    need(4 * rank, "extents");
    for (std::size_t i = 0; i < rank; ++i) v.extents.push_back(detail::get_le<std::uint32_t>(bytes.data() + pos + 4 * i));
    pos += 4 * rank;
    const std::size_t n = shape_size(v.extents) * dtype_size(v.dtype);
    need(n, "payload");
    v.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return v;
}

inline RawVolume decode(const std::vector<unsigned char>& bytes) {
    std::size_t pos = 0;
    auto v = decode(bytes, pos);
    if (pos != bytes.size()) throw FormatError("trailing bytes after EPLV payload");
    return v;
}

template <typename T>
RawVolume to_raw(const Tensor<T>& t) {
    RawVolume v{dtype_of<T>(), t.shape(), {}};
    detail::encode_values<T>(t.values(), v.payload);
    return v;
}

inline RawVolume to_raw(const LabelVolume& l) {
    RawVolume v{DType::u8, Shape{l.shape[0], l.shape[1], l.shape[2]}, l.values};
    return v;
}

// Floating payloads convert to T; label payloads are rejected.
template <typename T>
Tensor<T> tensor_from_raw(const RawVolume& v) {
    Tensor<T> t(v.extents);
    auto out = t.values();
    if (v.dtype == DType::f32) {
        std::vector<float> tmp(out.size());
        detail::decode_values<float>(v.payload.data(), tmp);
        std::copy(tmp.begin(), tmp.end(), out.begin());
    } else if (v.dtype == DType::f64) {
        std::vector<double> tmp(out.size());
        detail::decode_values<double>(v.payload.data(), tmp);
        for (std::size_t i = 0; i < tmp.size(); ++i) out[i] = static_cast<T>(tmp[i]);
    } else {
        throw FormatError("expected a floating-point volume, found u8 labels");
    }
    return t;
}

inline LabelVolume labels_from_raw(const RawVolume& v) {
    if (v.dtype != DType::u8) throw FormatError("expected a u8 label volume");
    Shape3 s;
    if (v.extents.size() == 3) s = {v.extents[0], v.extents[1], v.extents[2]};
    else if (v.extents.size() == 4 && v.extents[0] == 1) s = {v.extents[1], v.extents[2], v.extents[3]};
    else throw FormatError("label volume must have rank 3, got " + shape_str(v.extents));
    return LabelVolume(s, v.payload);
}

inline void write_raw(const std::string& path, const RawVolume& v) { detail::write_file(path, encode(v)); }
inline RawVolume read_raw(const std::string& path) { return decode(detail::read_file(path)); }

template <typename T>
void write(const std::string& path, const Tensor<T>& t) {
    write_raw(path, to_raw(t));
}
inline void write(const std::string& path, const LabelVolume& l) { write_raw(path, to_raw(l)); }

template <typename T>
Tensor<T> read_tensor(const std::string& path) {
    return tensor_from_raw<T>(read_raw(path));
}
inline LabelVolume read_labels(const std::string& path) { return labels_from_raw(read_raw(path)); }

// Checkpoint: "EPLC" | u32 header length | header text | u32 count | count EPLV records.
struct Checkpoint {
    std::string header;
    std::vector<RawVolume> tensors;
};

inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
    std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.header.size()));
    out.insert(out.end(), c.header.begin(), c.header.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) encode(t, out);
    detail::write_file(path, out);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0)
        throw FormatError("bad magic, not an EPLC checkpoint");
    std::size_t pos = 4;
    const auto hlen = detail::get_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    if (bytes.size() - pos < std::size_t(hlen) + 4) throw FormatError("truncated checkpoint header");
    Checkpoint c;
    c.header.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
    pos += hlen;
    const auto count = detail::get_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    for (std::uint32_t i = 0; i < count; ++i) c.tensors.push_back(decode(bytes, pos));
    if (pos != bytes.size()) throw FormatError("trailing bytes after checkpoint");
    return c;
}

// Prototype dump: u32 N | u32 dim | N*dim f32 | N validity bytes.
inline std::vector<unsigned char> encode_prototypes(std::size_t n, std::size_t dim, std::span<const float> values,
                                                    const std::vector<bool>& valid) {
    if (values.size() != n * dim || valid.size() != n) throw ShapeError("prototype dump size mismatch");
    std::vector<unsigned char> out;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(n));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
    detail::encode_values<float>(values, out);
    for (bool v : valid) out.push_back(v ? 1 : 0);
    return out;
}

struct PrototypeDump {
    std::size_t num_classes = 0, dim = 0;
    std::vector<float> values;
    std::vector<bool> valid;
};

inline PrototypeDump decode_prototypes(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8) throw FormatError("truncated prototype dump");
    PrototypeDump d;
    d.num_classes = detail::get_le<std::uint32_t>(bytes.data());
    d.dim = detail::get_le<std::uint32_t>(bytes.data() + 4);
    if (bytes.size() != 8 + d.num_classes * d.dim * 4 + d.num_classes) throw FormatError("prototype dump size mismatch");
    d.values.resize(d.num_classes * d.dim);
    detail::decode_values<float>(bytes.data() + 8, d.values);
    for (std::size_t i = 0; i < d.num_classes; ++i) d.valid.push_back(bytes[8 + d.values.size() * 4 + i] != 0);
    return d;
}

inline void write_prototypes(const std::string& path, std::size_t n, std::size_t dim, std::span<const float> values,
                             const std::vector<bool>& valid) {
    detail::write_file(path, encode_prototypes(n, dim, values, valid));
}

}  // namespace epl::io

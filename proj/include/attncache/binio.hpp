#pragma once

// Little-endian binary read/write helpers shared by the on-disk formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attncache/errors.hpp"

namespace attncache::binio {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts need byte swapping");

template <typename T>
inline void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_pod(os, v); }

inline void write_magic(std::ostream& os, std::string_view magic) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void write_floats(std::ostream& os, std::span<const float> data) {
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size_bytes()));
}

template <typename T>
inline T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    return read_pod<std::uint32_t>(is, what);
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    return read_pod<std::uint64_t>(is, what);
}

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::array<char, 8> buf{};
    is.read(buf.data(), static_cast<std::streamsize>(magic.size()));
    if (!is || std::string_view(buf.data(), magic.size()) != magic)
        throw FormatError("bad magic, expected \"" + std::string(magic) + "\"");
}

inline void read_floats(std::istream& is, std::span<float> out, const char* what) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
    if (!is) throw FormatError(std::string("truncated file while reading ") + what);
}

// Unaligned little-endian load from a raw byte buffer (used on mapped memory).
template <typename T>
inline T load(const std::byte* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

}  // namespace attncache::binio

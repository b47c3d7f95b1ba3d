#pragma once

// Little-endian binary stream helpers shared by the checkpoint and bag
// file readers/writers. All read errors throw FormatError with the byte
// offset at which the stream fell short.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "milcl/errors.hpp"

namespace milcl::io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    write_bytes(os, b, 4);
}

inline void write_i32(std::ostream& os, std::int32_t v) {
    write_u32(os, static_cast<std::uint32_t>(v));
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    write_u32(os, static_cast<std::uint32_t>(v));
    write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f64(std::ostream& os, double v) {
    write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n,
                       const std::string& what) {
    const auto before = is.tellg();
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw FormatError(what + ": truncated at offset " +
                          std::to_string(static_cast<long long>(before)));
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    read_bytes(is, b, 4, what);
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::int32_t read_i32(std::istream& is, const std::string& what) {
    return static_cast<std::int32_t>(read_u32(is, what));
}

inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
    const std::uint64_t lo = read_u32(is, what);
    const std::uint64_t hi = read_u32(is, what);
    return lo | (hi << 32);
}

inline double read_f64(std::istream& is, const std::string& what) {
    return std::bit_cast<double>(read_u64(is, what));
}

inline void expect_magic(std::istream& is, const char (&magic)[5],
                         const std::string& what) {
    char got[4];
    read_bytes(is, got, 4, what);
    if (std::memcmp(got, magic, 4) != 0)
        throw FormatError(what + ": bad magic at offset 0");
}

}  // namespace milcl::io

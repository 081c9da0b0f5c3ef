#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

// Little-endian primitives for the binary file formats (PRC1/PRN1/PRM1/PRH1).
// Byte order is composed explicitly so the files are identical across hosts.

namespace pairrec::io {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff),
                       static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff),
                       static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    write_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
    write_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& out, float v) {
    write_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& out, double v) {
    write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) {
    out.write(magic, 4);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("binary read failed (truncated file?)");
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& in) {
    const std::uint64_t lo = read_u32(in);
    const std::uint64_t hi = read_u32(in);
    return lo | (hi << 32);
}

inline float read_f32(std::istream& in) {
    return std::bit_cast<float>(read_u32(in));
}

inline double read_f64(std::istream& in) {
    return std::bit_cast<double>(read_u64(in));
}

inline std::string read_string(std::istream& in) {
    const std::uint32_t n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("binary read failed (truncated string)");
    return s;
}

inline void expect_magic(std::istream& in, const char (&magic)[5],
                         const std::string& what) {
    char got[4];
    in.read(got, 4);
    if (!in || got[0] != magic[0] || got[1] != magic[1] || got[2] != magic[2] ||
        got[3] != magic[3]) {
        throw std::runtime_error("not a " + what + " file (bad magic)");
    }
}

}  // namespace pairrec::io

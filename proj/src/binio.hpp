#pragma once

// Little-endian primitives shared by the binary file formats (checkpoints,
// datasets). Internal to the library sources.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "dmc/errors.hpp"

namespace dmc::binio {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw core::FormatError("binary stream truncated while reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.write(reinterpret_cast<const char*>(&v), 1);
}

inline std::uint8_t read_u8(std::istream& is) {
    char c;
    is.read(&c, 1);
    if (!is) throw core::FormatError("binary stream truncated while reading u8");
    return static_cast<std::uint8_t>(c);
}

inline void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_f64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw core::FormatError("binary stream truncated while reading f64");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw core::FormatError("binary stream: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw core::FormatError("binary stream truncated while reading string");
    return s;
}

} // namespace dmc::binio

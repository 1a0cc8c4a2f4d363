#pragma once

// Little-endian binary IO helpers and FNV-1a checksums shared by the
// dataset, checkpoint and video-export formats. All multi-byte integers
// are written least-significant byte first regardless of host order.

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace reenact {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void put_u8(std::ostream& os, uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void put_u16(std::ostream& os, uint16_t v) {
    for (int i = 0; i < 2; ++i)
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::ostream& os, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::ostream& os, uint64_t v) {
    for (int i = 0; i < 8; ++i)
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::ostream& os, int32_t v) {
    put_u32(os, static_cast<uint32_t>(v));
}

inline void put_f64(std::ostream& os, double v) {
    put_u64(os, std::bit_cast<uint64_t>(v));
}

inline uint8_t get_u8(std::istream& is) {
    int c = is.get();
    if (c == EOF) throw IoError("unexpected end of stream");
    return static_cast<uint8_t>(c);
}

inline uint16_t get_u16(std::istream& is) {
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(get_u8(is)) << (8 * i);
    return v;
}

inline uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(get_u8(is)) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(get_u8(is)) << (8 * i);
    return v;
}

inline int32_t get_i32(std::istream& is) {
    return static_cast<int32_t>(get_u32(is));
}

inline double get_f64(std::istream& is) {
    return std::bit_cast<double>(get_u64(is));
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw IoError("unexpected end of stream while reading string");
    return s;
}

inline void put_f64_vec(std::ostream& os, const std::vector<double>& v) {
    put_u64(os, v.size());
    for (double x : v) put_f64(os, x);
}

inline std::vector<double> get_f64_vec(std::istream& is) {
    uint64_t n = get_u64(is);
    std::vector<double> v(n);
    for (uint64_t i = 0; i < n; ++i) v[i] = get_f64(is);
    return v;
}

// FNV-1a (64-bit), used for file checksums and config digests.
struct Fnv1a64 {
    uint64_t state = 1469598103934665603ull;

    void update(const void* data, size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            state ^= p[i];
            state *= 1099511628211ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update_f64(const double* p, size_t n) { update(p, n * sizeof(double)); }
    uint64_t digest() const { return state; }
};

inline uint64_t fnv1a64(const void* data, size_t len) {
    Fnv1a64 h;
    h.update(data, len);
    return h.digest();
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

inline uint64_t file_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file for checksum: " + path);
    Fnv1a64 h;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h.update(buf, static_cast<size_t>(f.gcount()));
    }
    return h.digest();
}

}  // namespace reenact

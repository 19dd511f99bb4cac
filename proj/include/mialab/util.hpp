#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mialab {

// Bad inputs, malformed files, violated preconditions. CLI maps this to exit 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failures after validation (divergence, corrupt state, IO mid-run). CLI exit 3.
struct RuntimeFailure : std::runtime_error {
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic seed derivation: one master seed fans out to named sub-streams.
inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    uint64_t h = fnv1a64(tag);
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    // splitmix64 finalizer
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (!in.good() && !in.eof()) throw RuntimeFailure("read failed: " + path);
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot open for write: " + path);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out.good()) throw RuntimeFailure("write failed: " + path);
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

}  // namespace mialab

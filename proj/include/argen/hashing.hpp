#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace argen {

// FNV-1a 64-bit. Used for content hashes in manifests and for the
// vocabulary hash embedded in checkpoints. Not cryptographic; the point is
// a stable fingerprint for provenance chaining.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string content_hash(const std::string& bytes) { return hash_hex(fnv1a64(bytes)); }

inline std::string file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("file_hash: cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return content_hash(os.str());
}

}  // namespace argen

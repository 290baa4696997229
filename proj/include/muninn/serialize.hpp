#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace muninn {

// Little-endian binary encoding helpers for the artifact file format.
// Doubles round-trip bit-exactly via their IEEE-754 representation.

class ByteWriter {
   public:
    void u8(std::uint8_t x) { buf_.push_back(static_cast<char>(x)); }
    void u32(std::uint32_t x) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t x) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
    }
    void f64(double x) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        u64(bits);
    }
    void f64_vec(const std::vector<double>& xs) {
        u32(static_cast<std::uint32_t>(xs.size()));
        for (double x : xs) f64(x);
    }
    void u32_vec(const std::vector<std::uint32_t>& xs) {
        u32(static_cast<std::uint32_t>(xs.size()));
        for (std::uint32_t x : xs) u32(x);
    }

    const std::string& bytes() const { return buf_; }

   private:
    std::string buf_;
};

struct DeserializeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class ByteReader {
   public:
    explicit ByteReader(const std::string& data) : data_(data) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint32_t u32() {
        const char* p = take(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return x;
    }
    std::uint64_t u64() {
        const char* p = take(8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return x;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double x;
        std::memcpy(&x, &bits, 8);
        return x;
    }
    std::vector<double> f64_vec() {
        const std::uint32_t n = u32();
        std::vector<double> xs(n);
        for (auto& x : xs) x = f64();
        return xs;
    }
    std::vector<std::uint32_t> u32_vec() {
        const std::uint32_t n = u32();
        std::vector<std::uint32_t> xs(n);
        for (auto& x : xs) x = u32();
        return xs;
    }

    bool exhausted() const { return pos_ == data_.size(); }

   private:
    const char* take(std::size_t n) {
        if (pos_ + n > data_.size()) throw DeserializeError("truncated payload");
        const char* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }

    const std::string& data_;
    std::size_t pos_ = 0;
};

// Standard CRC-32 (reflected, polynomial 0xEDB88320).
inline std::uint32_t crc32(const std::string& data) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (unsigned char ch : data) c = table[(c ^ ch) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

// FNV-1a, used for schedule/config lineage hashes.
inline std::uint64_t fnv1a64(const std::string& data) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace muninn

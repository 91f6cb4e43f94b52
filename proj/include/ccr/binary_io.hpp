#pragma once

// Little-endian framing helpers shared by the dataset container and the
// checkpoint format, plus atomic file replacement.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "ccr/errors.hpp"

namespace ccr::io {

class Writer {
public:
    void bytes(std::string_view s) { buf_.append(s); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        u64(bits);
    }
    void f64s(std::span<const double> values) {
        for (double v : values) f64(v);
    }
    // u32 length prefix followed by the raw bytes.
    void str(std::string_view s);

    const std::string& buffer() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    void put(std::uint64_t v, int width) {
        for (int i = 0; i < width; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

// Bounds-checked reader; running past the end throws FormatError.
class Reader {
public:
    Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    std::string_view bytes(std::size_t n);
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string str();

    std::size_t remaining() const { return data_.size() - pos_; }
    void expect_end() const;

private:
    std::uint64_t get(int width);
    std::string_view data_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over the target, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ccr::io

#include "ccr/binary_io.hpp"

#include <fstream>
#include <sstream>
#include <system_error>
#include <unistd.h>

namespace ccr::io {

void Writer::str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
}

std::string_view Reader::bytes(std::size_t n) {
    if (n > remaining())
        throw FormatError(what_ + ": truncated (wanted " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
    std::string_view out = data_.substr(pos_, n);
    pos_ += n;
    return out;
}

std::uint64_t Reader::get(int width) {
    std::string_view raw = bytes(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

std::string Reader::str() {
    const std::uint32_t n = u32();
    return std::string(bytes(n));
}

void Reader::expect_end() const {
    if (remaining() != 0)
        throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("error reading " + path.string());
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("error writing " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move " + tmp.string() + " to " + path.string());
    }
}

}  // namespace ccr::io

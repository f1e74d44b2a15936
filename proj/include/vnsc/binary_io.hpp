#ifndef VNSC_BINARY_IO_HPP
#define VNSC_BINARY_IO_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "vnsc/errors.hpp"

namespace vnsc::io {

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    if (!is.read(bytes.data(), sizeof(T))) throw FormatError(std::string("unexpected end of file reading ") + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

inline void expect_magic(std::istream& is, const char (&magic)[8], const char* what) {
    char buf[8];
    if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
        throw FormatError(std::string("not a ") + what + " file (bad magic)");
    }
}

} // namespace vnsc::io

#endif // VNSC_BINARY_IO_HPP

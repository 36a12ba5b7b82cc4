#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "rcd/common.hpp"

namespace rcd {

// Little-endian binary streams shared by every on-disk format.
class BinaryWriter {
  public:
    explicit BinaryWriter(const std::string& path);

    void magic(const char (&tag)[9]) { out_.write(tag, 8); }

    template <typename T>
    void put(T value) {
        static_assert(std::is_arithmetic_v<T>);
        std::array<unsigned char, sizeof(T)> bytes{};
        std::memcpy(bytes.data(), &value, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bytes.begin(), bytes.end());
        }
        out_.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
    }

    template <typename T>
    void put_all(const std::vector<T>& values) {
        for (const T& v : values) put(v);
    }

    void finish();

  private:
    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
  public:
    explicit BinaryReader(const std::string& path);

    /// Throws DataError when the next 8 bytes are not `tag`.
    void expect_magic(const char (&tag)[9]);

    template <typename T>
    T get() {
        static_assert(std::is_arithmetic_v<T>);
        std::array<unsigned char, sizeof(T)> bytes{};
        in_.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
        if (!in_) throw DataError("truncated file: " + path_);
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bytes.begin(), bytes.end());
        }
        T value;
        std::memcpy(&value, bytes.data(), sizeof(T));
        return value;
    }

    template <typename T>
    std::vector<T> get_all(std::size_t count) {
        std::vector<T> values(count);
        for (auto& v : values) v = get<T>();
        return values;
    }

    /// Throws DataError unless `count` elements of `elem_size` bytes remain.
    void require(std::uint64_t count, std::size_t elem_size);

    /// Throws DataError when bytes remain after the payload.
    void expect_end();

  private:
    std::string path_;
    std::ifstream in_;
};

}  // namespace rcd

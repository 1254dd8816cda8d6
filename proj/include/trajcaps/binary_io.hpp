#pragma once

// Little-endian primitive readers/writers shared by the frame and parameter
// file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "trajcaps/errors.hpp"

namespace trajcaps::bin {

template <typename T>
  requires std::is_arithmetic_v<T>
void put(std::ostream& os, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
  requires std::is_arithmetic_v<T>
T get(std::istream& is) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw DataError("unexpected end of binary data");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t max_len = 1u << 20) {
  const auto n = get<std::uint32_t>(is);
  if (n > max_len) throw DataError("string length in binary data is implausible");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError("unexpected end of binary data");
  return s;
}

}  // namespace trajcaps::bin

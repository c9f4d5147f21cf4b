#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ganshare {

std::array<uint8_t, 32> sha256(const uint8_t* data, size_t len);
std::string sha256_hex(const uint8_t* data, size_t len);

inline std::string sha256_hex(const std::vector<uint8_t>& v) {
  return sha256_hex(v.data(), v.size());
}

std::string to_hex(const uint8_t* data, size_t len);

}  // namespace ganshare

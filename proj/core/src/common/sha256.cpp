#include "ganshare/common/sha256.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace ganshare {

std::array<uint8_t, 32> sha256(const uint8_t* data, size_t len) {
  std::array<uint8_t, 32> out{};
  unsigned int out_len = 0;
  if (!EVP_Digest(data, len, out.data(), &out_len, EVP_sha256(), nullptr) || out_len != 32)
    throw std::runtime_error("sha256 digest failed");
  return out;
}

std::string to_hex(const uint8_t* data, size_t len) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(len * 2);
  for (size_t i = 0; i < len; ++i) {
    s.push_back(digits[data[i] >> 4]);
    s.push_back(digits[data[i] & 0xf]);
  }
  return s;
}

std::string sha256_hex(const uint8_t* data, size_t len) {
  auto d = sha256(data, len);
  return to_hex(d.data(), d.size());
}

}  // namespace ganshare

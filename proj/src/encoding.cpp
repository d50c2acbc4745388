#include "qvote/encoding.hpp"

#include <openssl/evp.h>

#include "qvote/error.hpp"

namespace qvote {

std::string base64_encode(std::span<const std::uint8_t> data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_encode(std::string_view data) {
  return base64_encode(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
}

Bytes base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(Errc::malformed_message, "base64 length is not a multiple of 4");
  if (text.empty()) return {};
  std::size_t padding = 0;
  if (text.back() == '=') ++padding;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++padding;
  // EVP_DecodeBlock tolerates embedded whitespace and '=' in odd places; be strict here.
  for (std::size_t i = 0; i < text.size() - padding; ++i) {
    char c = text[i];
    bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '+' || c == '/';
    if (!ok) throw Error(Errc::malformed_message, "invalid base64 character");
  }
  Bytes out(3 * text.size() / 4);
  int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(Errc::malformed_message, "invalid base64");
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

}  // namespace qvote

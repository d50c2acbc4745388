#include "qvote/bits.hpp"

#include <algorithm>

#include "qvote/error.hpp"

namespace qvote {

BitString::BitString(std::initializer_list<int> bits) {
  bits_.reserve(bits.size());
  for (int b : bits) {
    if (b != 0 && b != 1) throw Error(Errc::invalid_argument, "bit values must be 0 or 1");
    bits_.push_back(static_cast<std::uint8_t>(b));
  }
}

BitString BitString::from_string(std::string_view digits) {
  BitString out;
  out.bits_.reserve(digits.size());
  for (char c : digits) {
    if (c != '0' && c != '1') throw Error(Errc::invalid_argument, "bit string may only contain '0' and '1'");
    out.bits_.push_back(static_cast<std::uint8_t>(c - '0'));
  }
  return out;
}

BitString BitString::unpack(std::span<const std::uint8_t> bytes, std::size_t nbits) {
  if (nbits > bytes.size() * 8) throw Error(Errc::invalid_argument, "not enough bytes to unpack requested bits");
  BitString out;
  out.bits_.resize(nbits);
  for (std::size_t i = 0; i < nbits; ++i) out.bits_[i] = (bytes[i / 8] >> (7 - i % 8)) & 1u;
  return out;
}

std::uint8_t BitString::at(std::size_t i) const {
  if (i >= bits_.size()) throw Error(Errc::invalid_argument, "bit index out of range");
  return bits_[i];
}

BitString BitString::slice(std::size_t offset, std::size_t count) const {
  if (offset > bits_.size() || count > bits_.size() - offset) throw Error(Errc::invalid_argument, "slice out of range");
  BitString out;
  out.bits_.assign(bits_.begin() + static_cast<std::ptrdiff_t>(offset),
                   bits_.begin() + static_cast<std::ptrdiff_t>(offset + count));
  return out;
}

Bytes BitString::pack() const {
  Bytes out((bits_.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits_.size(); ++i)
    if (bits_[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  return out;
}

std::string BitString::to_string() const {
  std::string s(bits_.size(), '0');
  for (std::size_t i = 0; i < bits_.size(); ++i) s[i] = bits_[i] ? '1' : '0';
  return s;
}

std::size_t BitString::count_ones() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

}  // namespace qvote

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qvote {

using Bytes = std::vector<std::uint8_t>;

/// Ordered sequence of binary digits. Conversions to bytes pack
/// most-significant-bit first and zero-pad the final byte.
class BitString {
 public:
  BitString() = default;
  explicit BitString(std::size_t n) : bits_(n, 0) {}
  BitString(std::initializer_list<int> bits);

  /// Parses a string of '0'/'1' characters.
  static BitString from_string(std::string_view digits);
  /// Takes the first `nbits` bits of `bytes`, MSB first.
  static BitString unpack(std::span<const std::uint8_t> bytes, std::size_t nbits);
  static BitString unpack(std::span<const std::uint8_t> bytes) { return unpack(bytes, bytes.size() * 8); }

  std::size_t size() const noexcept { return bits_.size(); }
  bool empty() const noexcept { return bits_.empty(); }

  std::uint8_t operator[](std::size_t i) const noexcept { return bits_[i]; }
  std::uint8_t at(std::size_t i) const;
  void set(std::size_t i, std::uint8_t bit) { bits_.at(i) = bit ? 1 : 0; }
  void push_back(std::uint8_t bit) { bits_.push_back(bit ? 1 : 0); }
  void flip(std::size_t i) { bits_.at(i) ^= 1; }

  /// Bits [offset, offset + count).
  BitString slice(std::size_t offset, std::size_t count) const;

  Bytes pack() const;
  std::string to_string() const;
  std::size_t count_ones() const noexcept;

  auto begin() const noexcept { return bits_.begin(); }
  auto end() const noexcept { return bits_.end(); }

  friend bool operator==(const BitString&, const BitString&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

}  // namespace qvote

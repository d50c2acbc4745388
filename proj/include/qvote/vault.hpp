#pragma once

#include <cstddef>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include "qvote/crypto.hpp"

namespace qvote::service {

/// Identity-key material held for dispute resolution. There is deliberately
/// no accessor for the bits; only the length is observable.
class SealedKey {
 public:
  explicit SealedKey(crypto::SymmetricKey key) : key_(std::move(key)) {}
  std::size_t size() const noexcept { return key_.size(); }

 private:
  crypto::SymmetricKey key_;
};

/// Per-session key store. The vote key is released once to the tally path;
/// the identity key is sealed on deposit and never leaves.
class KeyVault {
 public:
  void deposit(const std::string& session_id, crypto::SymmetricKey vote_key, crypto::SymmetricKey id_key);
  std::optional<crypto::SymmetricKey> release_vote_key(const std::string& session_id);
  std::optional<std::size_t> sealed_id_bits(const std::string& session_id) const;
  bool contains(const std::string& session_id) const;
  std::size_t size() const;

 private:
  struct Slot {
    std::optional<crypto::SymmetricKey> vote_key;
    SealedKey id_key;
  };

  mutable std::mutex mu_;
  std::map<std::string, Slot> slots_;
};

}  // namespace qvote::service

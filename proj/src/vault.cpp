#include "qvote/vault.hpp"

namespace qvote::service {

void KeyVault::deposit(const std::string& session_id, crypto::SymmetricKey vote_key, crypto::SymmetricKey id_key) {
  std::lock_guard lock(mu_);
  slots_.insert_or_assign(session_id, Slot{std::move(vote_key), SealedKey(std::move(id_key))});
}

std::optional<crypto::SymmetricKey> KeyVault::release_vote_key(const std::string& session_id) {
  std::lock_guard lock(mu_);
  auto it = slots_.find(session_id);
  if (it == slots_.end() || !it->second.vote_key) return std::nullopt;
  std::optional<crypto::SymmetricKey> out = std::move(it->second.vote_key);
  it->second.vote_key.reset();
  return out;
}

std::optional<std::size_t> KeyVault::sealed_id_bits(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  auto it = slots_.find(session_id);
  if (it == slots_.end()) return std::nullopt;
  return it->second.id_key.size();
}

bool KeyVault::contains(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  return slots_.contains(session_id);
}

std::size_t KeyVault::size() const {
  std::lock_guard lock(mu_);
  return slots_.size();
}

}  // namespace qvote::service

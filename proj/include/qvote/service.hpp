#pragma once

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qvote/ledger.hpp"
#include "qvote/protocol.hpp"
#include "qvote/transport.hpp"
#include "qvote/vault.hpp"

namespace qvote::service {

struct TallyResult {
  /// Only candidates that received votes appear.
  std::map<std::string, std::size_t> counts;
  std::size_t invalid = 0;
  std::size_t total_sessions = 0;
  /// Entries whose stored receipt reproduces from the stored ciphertexts.
  std::size_t verified = 0;

  nlohmann::json to_json() const;
  friend bool operator==(const TallyResult&, const TallyResult&) = default;
};

/// Counts decrypted votes. Identity ciphertexts are never touched.
TallyResult tally(const std::vector<LedgerEntry>& entries, const std::vector<std::string>& candidates = {});
/// Reads the ledger file directly; corrupt lines count as invalid entries.
TallyResult tally(const std::filesystem::path& ledger_path, const std::vector<std::string>& candidates = {});

struct RevealedIdentity {
  Bytes voter_id;
  /// The XOR output did not look like an identifier (non-printable bytes);
  /// recorded anyway and flagged for a human.
  bool needs_review = false;
};

/// Decrypts E_id of a recorded session with a voter-supplied K_id and records
/// the reveal in the ledger. Throws Errc::not_found for unknown sessions and
/// Errc::bad_key (ledger unchanged) when K_id has the wrong length or the
/// result is outside the voter-id length bounds.
RevealedIdentity audit_open(Ledger& ledger, const std::string& session_id, const BitString& id_key);

struct LedgerCheckReport {
  std::size_t entries = 0;
  std::size_t receipt_mismatches = 0;
  std::size_t corrupt_lines = 0;
  std::size_t duplicate_sessions = 0;
  std::size_t orphan_audits = 0;
  bool torn_tail = false;
  std::vector<std::string> problems;

  bool ok() const noexcept { return problems.empty(); }
  nlohmann::json to_json() const;
};

/// Recomputes every receipt from stored ciphertexts and checks structure.
LedgerCheckReport check_ledger(const std::filesystem::path& ledger_path);

/// The Election Committee server: owns the ledger, the key vault and the
/// protocol handler, and answers on every channel it is attached to.
class CommitteeService {
 public:
  /// Empty path means an in-memory ledger. Throws Errc::io_error when the
  /// ledger cannot be opened.
  CommitteeService(protocol::ElectionConfig election, const std::filesystem::path& ledger_path,
                   LedgerOptions options = {});
  ~CommitteeService();
  CommitteeService(const CommitteeService&) = delete;
  CommitteeService& operator=(const CommitteeService&) = delete;

  /// Subscribes to the election's committee topics on `channel`. The channel
  /// must outlive the service or be detached first.
  void attach(transport::Channel& channel);
  void detach_all();

  /// Publishes an AUDIT_REQUEST on the first attached channel.
  void request_audit(const std::string& session_id, const std::string& reason);

  Ledger& ledger() noexcept { return *ledger_; }
  KeyVault& vault() noexcept { return vault_; }
  protocol::Committee& committee() noexcept { return *committee_; }
  TallyResult tally() const;

  std::size_t dropped_messages() const noexcept { return dropped_.load(); }

 private:
  void dispatch(transport::Channel& channel, const transport::Message& message);

  protocol::ElectionConfig election_;
  std::unique_ptr<Ledger> ledger_;
  KeyVault vault_;
  std::unique_ptr<protocol::Committee> committee_;
  std::mutex mu_;
  std::vector<std::pair<transport::Channel*, std::vector<transport::SubscriptionId>>> attached_;
  std::atomic<std::size_t> dropped_{0};
};

/// Starts a committee service answering on `channel`.
std::unique_ptr<CommitteeService> serve(protocol::ElectionConfig election, transport::Channel& channel,
                                        const std::filesystem::path& ledger_path, LedgerOptions options = {});

}  // namespace qvote::service

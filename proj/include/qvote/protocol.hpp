#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qvote/bb84.hpp"
#include "qvote/crypto.hpp"
#include "qvote/ledger.hpp"
#include "qvote/transport.hpp"
#include "qvote/vault.hpp"

namespace qvote::protocol {

inline constexpr std::size_t kMaxBallotField = 64;

struct Ballot {
  Bytes vote;
  Bytes voter_id;

  static Ballot of(std::string_view vote, std::string_view voter_id);
  /// Both fields 1-64 bytes.
  void validate() const;
};

enum class VoterPhase { init, quantum_sent, bases_exchanged, key_confirmed, vote_sent, verified, failed };
enum class FailureReason { none, qkd, timeout, receipt_mismatch, rejected, channel };

std::string_view to_string(VoterPhase phase) noexcept;
std::string_view to_string(FailureReason reason) noexcept;

/// Wall-clock split of one vote, in seconds. `ledger` is filled by the committee.
struct StageTimes {
  double qkd = 0.0;
  double encrypt = 0.0;
  double transport = 0.0;
  double ledger = 0.0;

  StageTimes& operator+=(const StageTimes& o) {
    qkd += o.qkd;
    encrypt += o.encrypt;
    transport += o.transport;
    ledger += o.ledger;
    return *this;
  }
};

/// Everything the voter keeps about one cast. Serializable so the receipt can
/// be re-verified (and the identity key revealed) after the process exits.
class VoterState {
 public:
  VoterPhase phase() const noexcept { return phase_; }
  FailureReason failure() const noexcept { return failure_; }
  const std::string& detail() const noexcept { return detail_; }
  bool verified() const noexcept { return phase_ == VoterPhase::verified; }

  /// Enforces the transition order; a QKD retry may step back from
  /// bases_exchanged to quantum_sent.
  void advance(VoterPhase next);
  void fail(FailureReason reason, std::string detail);

  std::string election_id;
  std::string session_id;
  bb84::SessionTranscript transcript;
  Bytes e_vote;
  Bytes e_id;
  BitString id_key;  // kept by the voter for a possible audit
  std::optional<Digest> local_receipt;
  std::optional<Digest> remote_receipt;

  nlohmann::json to_json() const;
  static VoterState from_json(const nlohmann::json& j);

 private:
  VoterPhase phase_ = VoterPhase::init;
  FailureReason failure_ = FailureReason::none;
  std::string detail_;
};

struct VoterConfig {
  std::string election_id = "e1";
  /// shots and max_attempts are honoured; the raw length is sized from the
  /// key lengths (4x their sum, doubled after a short sift).
  bb84::QkdConfig qkd;
  bb84::NoiseSpec noise;
  std::size_t vote_key_bits = 4;
  std::size_t id_key_bits = 4;
  std::chrono::milliseconds receipt_timeout{10'000};
  std::chrono::milliseconds qkd_timeout{10'000};
  std::optional<std::string> session_id;
  StageTimes* timing = nullptr;

  void validate() const;
};

/// Random RFC 4122 version-4 identifier drawn from `rng`.
std::string make_session_id(Rng& rng);

/// Voter side of the dual-key protocol, start to finish. Never throws for
/// protocol failures; they end in VoterPhase::failed with a reason.
VoterState voter_cast(const Ballot& ballot, const VoterConfig& config, transport::Channel& channel, Rng& rng);

/// Re-sends the stored ciphertexts and checks the committee's receipt against
/// the locally recomputed one. A committee that already recorded the session
/// answers with its stored receipt and leaves the ledger untouched.
VoterState requery_receipt(VoterState saved, const VoterConfig& config, transport::Channel& channel);

struct AuditOutcome {
  bool revealed = false;
  std::string reason;
};

/// Voluntarily reveals K_id for a recorded session.
AuditOutcome submit_audit(const VoterState& saved, const BitString& id_key, const VoterConfig& config,
                          transport::Channel& channel);

/// Constant-time digest equality.
bool verify_receipt(const crypto::Receipt& local, const crypto::Receipt& remote) noexcept;
/// Hex of either case; throws Errc::invalid_receipt when malformed.
bool verify_receipt(std::string_view local_hex, std::string_view remote_hex);

struct ElectionConfig {
  std::string election_id = "e1";
  std::vector<std::string> candidates{"A", "B", "C"};
  std::uint64_t seed = 0;
  /// Upper bound accepted for voter-requested measurement shots.
  std::uint64_t max_shots = 1'000'000;

  void validate() const;
};

/// Committee side. Drives the QKD mirror steps, decrypts votes with the
/// released vote key, records ledger entries and answers audits.
class Committee {
 public:
  struct Outgoing {
    std::string topic;
    transport::Envelope envelope;
  };

  Committee(ElectionConfig config, service::Ledger& ledger, service::KeyVault& vault);

  /// Per-session transitions are serialized; distinct sessions may be handled
  /// concurrently.
  std::optional<Outgoing> handle(const transport::Envelope& message);

  /// AUDIT_REQUEST asking the voter of `session_id` to reveal K_id.
  Outgoing request_audit(const std::string& session_id, const std::string& reason) const;

  /// Committee-side sifted key of a session still in key exchange.
  std::optional<bb84::SiftedKey> sifted_key(const std::string& session_id) const;

  const ElectionConfig& config() const noexcept { return config_; }
  /// Accumulated time spent appending to the ledger.
  double ledger_seconds() const noexcept { return ledger_ns_.load() * 1e-9; }

  /// Runs after the ledger append and before the receipt is returned.
  std::function<void(const std::string& session_id)> after_ledger_append;

 private:
  struct Session;

  std::shared_ptr<Session> session(const std::string& id, bool create);
  void drop_session(const std::string& id);

  std::optional<Outgoing> on_quantum(const transport::Envelope& m);
  std::optional<Outgoing> on_voter_bases(const transport::Envelope& m);
  std::optional<Outgoing> on_confirm(const transport::Envelope& m);
  std::optional<Outgoing> on_vote(const transport::Envelope& m);
  std::optional<Outgoing> on_audit(const transport::Envelope& m);
  std::optional<Outgoing> try_confirm(Session& s, const transport::Envelope& m);

  ElectionConfig config_;
  service::Ledger& ledger_;
  service::KeyVault& vault_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::atomic<std::int64_t> ledger_ns_{0};
};

}  // namespace qvote::protocol

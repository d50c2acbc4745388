#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace qvote::service {

struct AuditRecord {
  std::string revealed_voter_id;
  std::int64_t revealed_at = 0;
  bool needs_review = false;

  friend bool operator==(const AuditRecord&, const AuditRecord&) = default;
};

/// One processed ballot. `decrypted_vote` is empty when the ballot decrypted
/// to something outside the candidate set (recorded but flagged invalid).
struct LedgerEntry {
  std::string session_id;
  std::string e_vote_b64;
  std::string e_id_b64;
  std::string receipt_hex;
  std::optional<std::string> decrypted_vote;
  std::int64_t recorded_at = 0;
  std::size_t id_key_bits = 0;
  std::optional<AuditRecord> audit;

  bool valid() const noexcept { return decrypted_vote.has_value(); }
  /// SHA-256 over the stored ciphertexts reproduces receipt_hex.
  bool receipt_consistent() const;

  nlohmann::json to_json() const;
  static LedgerEntry from_json(const nlohmann::json& j);

  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

struct LedgerOptions {
  bool fsync = true;
};

/// Result of reading a ledger file without modifying it.
struct LedgerScan {
  std::vector<LedgerEntry> entries;
  std::vector<std::size_t> corrupt_lines;  // 1-based
  std::vector<std::string> orphan_audits;  // audit lines for unknown sessions
  std::vector<std::string> duplicate_sessions;
  bool torn_tail = false;
};

LedgerScan scan_ledger(const std::filesystem::path& path);

/// Append-only JSONL ledger, one record per line:
///   {"kind":"vote", ...LedgerEntry fields}
///   {"kind":"audit","session_id":...,"revealed_voter_id":...,"revealed_at":...}
/// Appends are serialized and fsync'ed before append() returns. Opening a file
/// whose final line is torn moves that line to "<path>.quarantine".
class Ledger {
 public:
  /// Memory-only ledger.
  Ledger();
  /// Throws Error(Errc::io_error) when the file cannot be opened for append.
  explicit Ledger(std::filesystem::path path, LedgerOptions options = {});
  ~Ledger();
  Ledger(const Ledger&) = delete;
  Ledger& operator=(const Ledger&) = delete;

  /// False, with the ledger unchanged, if the session already has an entry.
  bool append(const LedgerEntry& entry);
  void record_audit(const std::string& session_id, const AuditRecord& audit);

  bool contains(const std::string& session_id) const;
  std::optional<LedgerEntry> find(const std::string& session_id) const;
  std::vector<LedgerEntry> snapshot() const;
  std::size_t size() const;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::size_t quarantined_lines() const noexcept { return quarantined_; }
  std::size_t corrupt_lines() const noexcept { return corrupt_; }

 private:
  void write_line(const std::string& line);

  std::filesystem::path path_;
  LedgerOptions options_;
  int fd_ = -1;
  mutable std::mutex mu_;
  std::vector<LedgerEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t quarantined_ = 0;
  std::size_t corrupt_ = 0;
};

}  // namespace qvote::service

#include "qvote/ledger.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "qvote/crypto.hpp"
#include "qvote/encoding.hpp"
#include "qvote/error.hpp"

namespace qvote::service {

using nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot read ledger " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool line_parses(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "vote") {
      LedgerEntry::from_json(j);
      return true;
    }
    if (kind == "audit") {
      j.at("session_id").get<std::string>();
      j.at("revealed_voter_id").get<std::string>();
      return true;
    }
  } catch (const std::exception&) {
  }
  return false;
}

AuditRecord audit_from_json(const json& j) {
  return {j.at("revealed_voter_id").get<std::string>(), j.at("revealed_at").get<std::int64_t>(),
          j.value("needs_review", false)};
}

// Applies the records in `content` (complete lines only) to `scan`.
void apply_lines(std::string_view content, LedgerScan& scan) {
  std::unordered_map<std::string, std::size_t> index;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string_view::npos) break;
    ++line_no;
    const std::string_view line = content.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    try {
      if (j.is_discarded() || !j.is_object()) throw std::runtime_error("not a JSON object");
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "vote") {
        LedgerEntry e = LedgerEntry::from_json(j);
        if (index.contains(e.session_id)) {
          scan.duplicate_sessions.push_back(e.session_id);
          continue;
        }
        index.emplace(e.session_id, scan.entries.size());
        scan.entries.push_back(std::move(e));
      } else if (kind == "audit") {
        const std::string session = j.at("session_id").get<std::string>();
        auto it = index.find(session);
        if (it == index.end())
          scan.orphan_audits.push_back(session);
        else
          scan.entries[it->second].audit = audit_from_json(j);
      } else {
        throw std::runtime_error("unknown record kind");
      }
    } catch (const std::exception&) {
      scan.corrupt_lines.push_back(line_no);
    }
  }
}

}  // namespace

bool LedgerEntry::receipt_consistent() const {
  try {
    return crypto::receipt_hash(base64_decode(e_vote_b64), base64_decode(e_id_b64)) == digest_from_hex(receipt_hex) &&
           receipt_hex == to_hex(digest_from_hex(receipt_hex));
  } catch (const Error&) {
    return false;
  }
}

json LedgerEntry::to_json() const {
  json j = {{"kind", "vote"},
            {"session_id", session_id},
            {"e_vote_b64", e_vote_b64},
            {"e_id_b64", e_id_b64},
            {"receipt_hex", receipt_hex},
            {"decrypted_vote", decrypted_vote ? json(*decrypted_vote) : json(nullptr)},
            {"valid", valid()},
            {"recorded_at", recorded_at},
            {"id_key_bits", id_key_bits}};
  if (audit)
    j["audit"] = {{"revealed_voter_id", audit->revealed_voter_id},
                  {"revealed_at", audit->revealed_at},
                  {"needs_review", audit->needs_review}};
  return j;
}

LedgerEntry LedgerEntry::from_json(const json& j) {
  LedgerEntry e;
  e.session_id = j.at("session_id").get<std::string>();
  e.e_vote_b64 = j.at("e_vote_b64").get<std::string>();
  e.e_id_b64 = j.at("e_id_b64").get<std::string>();
  e.receipt_hex = j.at("receipt_hex").get<std::string>();
  const json& vote = j.at("decrypted_vote");
  if (!vote.is_null()) e.decrypted_vote = vote.get<std::string>();
  e.recorded_at = j.at("recorded_at").get<std::int64_t>();
  e.id_key_bits = j.at("id_key_bits").get<std::size_t>();
  if (auto it = j.find("audit"); it != j.end() && !it->is_null()) e.audit = audit_from_json(*it);
  if (e.session_id.empty()) throw Error(Errc::malformed_message, "ledger entry without session id");
  return e;
}

LedgerScan scan_ledger(const std::filesystem::path& path) {
  LedgerScan scan;
  const std::string content = read_file(path);
  std::string_view complete = content;
  if (!content.empty() && content.back() != '\n') {
    scan.torn_tail = true;
    complete = complete.substr(0, content.rfind('\n') == std::string::npos ? 0 : content.rfind('\n') + 1);
  }
  apply_lines(complete, scan);
  return scan;
}

Ledger::Ledger() = default;

Ledger::Ledger(std::filesystem::path path, LedgerOptions options) : path_(std::move(path)), options_(options) {
  std::error_code ec;
  if (std::filesystem::exists(path_, ec)) {
    std::string content = read_file(path_);
    // Find the last complete, parseable record; anything after it is a torn write.
    std::size_t keep = content.size();
    if (!content.empty() && content.back() != '\n') {
      const auto nl = content.rfind('\n');
      keep = nl == std::string::npos ? 0 : nl + 1;
    } else if (!content.empty()) {
      const auto prev = content.rfind('\n', content.size() - 2);
      const std::size_t line_start = prev == std::string::npos ? 0 : prev + 1;
      const std::string_view last(content.data() + line_start, content.size() - 1 - line_start);
      if (!last.empty() && !line_parses(last)) keep = line_start;
    }
    if (keep < content.size()) {
      std::ofstream q(path_.string() + ".quarantine", std::ios::binary | std::ios::app);
      q << content.substr(keep);
      if (content.back() != '\n') q << '\n';
      if (!q) throw Error(Errc::io_error, "cannot write quarantine file for " + path_.string());
      std::filesystem::resize_file(path_, keep, ec);
      if (ec) throw Error(Errc::io_error, "cannot truncate torn ledger tail: " + ec.message());
      quarantined_ = 1;
      spdlog::warn("ledger {}: quarantined torn final record ({} bytes)", path_.string(), content.size() - keep);
      content.resize(keep);
    }
    LedgerScan scan;
    apply_lines(content, scan);
    corrupt_ = scan.corrupt_lines.size();
    if (corrupt_ > 0) spdlog::warn("ledger {}: {} corrupt line(s) ignored", path_.string(), corrupt_);
    entries_ = std::move(scan.entries);
    for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].session_id, i);
  }
  fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(Errc::io_error, "cannot open ledger " + path_.string() + ": " + std::strerror(errno));
}

Ledger::~Ledger() {
  if (fd_ >= 0) ::close(fd_);
}

void Ledger::write_line(const std::string& line) {
  if (fd_ < 0) return;
  std::size_t written = 0;
  while (written < line.size()) {
    ssize_t n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::io_error, std::string("ledger write failed: ") + std::strerror(errno));
    }
    written += static_cast<std::size_t>(n);
  }
  if (options_.fsync && ::fsync(fd_) != 0)
    throw Error(Errc::io_error, std::string("ledger fsync failed: ") + std::strerror(errno));
}

bool Ledger::append(const LedgerEntry& entry) {
  std::lock_guard lock(mu_);
  if (index_.contains(entry.session_id)) return false;
  write_line(entry.to_json().dump() + "\n");
  index_.emplace(entry.session_id, entries_.size());
  entries_.push_back(entry);
  return true;
}

void Ledger::record_audit(const std::string& session_id, const AuditRecord& audit) {
  std::lock_guard lock(mu_);
  auto it = index_.find(session_id);
  if (it == index_.end()) throw Error(Errc::not_found, "no ledger entry for session " + session_id);
  json j = {{"kind", "audit"},
            {"session_id", session_id},
            {"revealed_voter_id", audit.revealed_voter_id},
            {"revealed_at", audit.revealed_at},
            {"needs_review", audit.needs_review}};
  write_line(j.dump() + "\n");
  entries_[it->second].audit = audit;
}

bool Ledger::contains(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  return index_.contains(session_id);
}

std::optional<LedgerEntry> Ledger::find(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(session_id);
  if (it == index_.end()) return std::nullopt;
  return entries_[it->second];
}

std::vector<LedgerEntry> Ledger::snapshot() const {
  std::lock_guard lock(mu_);
  return entries_;
}

std::size_t Ledger::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

}  // namespace qvote::service

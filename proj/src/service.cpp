#include "qvote/service.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "qvote/encoding.hpp"

namespace qvote::service {

using json = nlohmann::json;

namespace {

bool printable(std::span<const std::uint8_t> bytes) {
  return std::all_of(bytes.begin(), bytes.end(), [](std::uint8_t c) { return c >= 0x20 && c < 0x7f; });
}

// qvote/{election}/{kind}/{session}[/...]
std::string session_segment(std::string_view topic) {
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    start = topic.find('/', start);
    if (start == std::string_view::npos) return {};
    ++start;
  }
  const std::size_t end = topic.find('/', start);
  return std::string(topic.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
}

}  // namespace

json TallyResult::to_json() const {
  return {{"counts", counts}, {"invalid", invalid}, {"total_sessions", total_sessions}, {"verified", verified}};
}

TallyResult tally(const std::vector<LedgerEntry>& entries, const std::vector<std::string>& candidates) {
  TallyResult r;
  for (const auto& e : entries) {
    ++r.total_sessions;
    if (e.receipt_consistent()) ++r.verified;
    const bool known =
        e.decrypted_vote &&
        (candidates.empty() || std::find(candidates.begin(), candidates.end(), *e.decrypted_vote) != candidates.end());
    if (known)
      ++r.counts[*e.decrypted_vote];
    else
      ++r.invalid;
  }
  return r;
}

TallyResult tally(const std::filesystem::path& ledger_path, const std::vector<std::string>& candidates) {
  if (!std::filesystem::exists(ledger_path))
    throw Error(Errc::not_found, "ledger " + ledger_path.string() + " does not exist");
  LedgerScan scan = scan_ledger(ledger_path);
  TallyResult r = tally(scan.entries, candidates);
  const std::size_t corrupt = scan.corrupt_lines.size() + (scan.torn_tail ? 1 : 0);
  if (corrupt > 0) spdlog::warn("{}: {} unreadable line(s) counted as invalid", ledger_path.string(), corrupt);
  r.invalid += corrupt;
  r.total_sessions += corrupt;
  return r;
}

RevealedIdentity audit_open(Ledger& ledger, const std::string& session_id, const BitString& id_key) {
  auto entry = ledger.find(session_id);
  if (!entry) throw Error(Errc::not_found, "no ledger entry for session " + session_id);
  if (id_key.empty()) throw Error(Errc::bad_key, "identity key is empty");
  if (entry->id_key_bits != 0 && id_key.size() != entry->id_key_bits)
    throw Error(Errc::bad_key, "identity key has " + std::to_string(id_key.size()) + " bits, session used " +
                                   std::to_string(entry->id_key_bits));
  const Bytes e_id = base64_decode(entry->e_id_b64);
  RevealedIdentity out{crypto::xor_apply(e_id, id_key), false};
  if (out.voter_id.empty() || out.voter_id.size() > protocol::kMaxBallotField)
    throw Error(Errc::bad_key, "revealed identity is outside the 1-64 byte bounds");
  out.needs_review = !printable(out.voter_id);

  AuditRecord record;
  record.revealed_at = transport::now_ms();
  record.needs_review = out.needs_review;
  record.revealed_voter_id = out.needs_review ? "b64:" + base64_encode(out.voter_id) : to_text(out.voter_id);
  if (out.needs_review)
    spdlog::warn("session {}: revealed identity is not printable; recorded and flagged for manual review", session_id);
  if (entry->audit && entry->audit->revealed_voter_id == record.revealed_voter_id) return out;
  ledger.record_audit(session_id, record);
  spdlog::info("session {}: identity revealed by voter audit", session_id);
  return out;
}

json LedgerCheckReport::to_json() const {
  return {{"ok", ok()},
          {"entries", entries},
          {"receipt_mismatches", receipt_mismatches},
          {"corrupt_lines", corrupt_lines},
          {"duplicate_sessions", duplicate_sessions},
          {"orphan_audits", orphan_audits},
          {"torn_tail", torn_tail},
          {"problems", problems}};
}

LedgerCheckReport check_ledger(const std::filesystem::path& ledger_path) {
  if (!std::filesystem::exists(ledger_path))
    throw Error(Errc::not_found, "ledger " + ledger_path.string() + " does not exist");
  LedgerScan scan = scan_ledger(ledger_path);
  LedgerCheckReport r;
  r.entries = scan.entries.size();
  for (const auto& e : scan.entries) {
    if (e.receipt_consistent()) continue;
    ++r.receipt_mismatches;
    r.problems.push_back("session " + e.session_id + ": stored receipt does not match its ciphertexts");
  }
  r.corrupt_lines = scan.corrupt_lines.size();
  for (auto line : scan.corrupt_lines) r.problems.push_back("line " + std::to_string(line) + ": unreadable record");
  r.duplicate_sessions = scan.duplicate_sessions.size();
  for (const auto& s : scan.duplicate_sessions) r.problems.push_back("session " + s + ": recorded more than once");
  r.orphan_audits = scan.orphan_audits.size();
  for (const auto& s : scan.orphan_audits) r.problems.push_back("session " + s + ": audit without a vote entry");
  r.torn_tail = scan.torn_tail;
  if (scan.torn_tail) r.problems.push_back("final line is incomplete");
  return r;
}

CommitteeService::CommitteeService(protocol::ElectionConfig election, const std::filesystem::path& ledger_path,
                                   LedgerOptions options)
    : election_(std::move(election)) {
  election_.validate();
  ledger_ = ledger_path.empty() ? std::make_unique<Ledger>() : std::make_unique<Ledger>(ledger_path, options);
  committee_ = std::make_unique<protocol::Committee>(election_, *ledger_, vault_);
  if (ledger_->quarantined_lines() > 0)
    spdlog::warn("{}: moved {} torn line(s) to quarantine", ledger_path.string(), ledger_->quarantined_lines());
}

CommitteeService::~CommitteeService() { detach_all(); }

void CommitteeService::attach(transport::Channel& channel) {
  std::vector<transport::SubscriptionId> ids;
  for (const auto& filter : transport::topics::committee_filters(election_.election_id))
    ids.push_back(channel.subscribe(filter, [this, &channel](const transport::Message& m) { dispatch(channel, m); }));
  std::lock_guard lock(mu_);
  attached_.emplace_back(&channel, std::move(ids));
}

void CommitteeService::detach_all() {
  std::vector<std::pair<transport::Channel*, std::vector<transport::SubscriptionId>>> attached;
  {
    std::lock_guard lock(mu_);
    attached.swap(attached_);
  }
  for (auto& [channel, ids] : attached) {
    for (auto id : ids) {
      try {
        channel->unsubscribe(id);
      } catch (const std::exception& e) {
        spdlog::debug("unsubscribe failed: {}", e.what());
      }
    }
  }
}

void CommitteeService::dispatch(transport::Channel& channel, const transport::Message& message) {
  std::optional<protocol::Committee::Outgoing> out;
  try {
    transport::Envelope env = transport::Envelope::decode(message.payload);
    if (env.election_id != election_.election_id || env.session_id != session_segment(message.topic)) {
      ++dropped_;
      spdlog::warn("dropped message on {}: envelope does not match topic", message.topic);
      return;
    }
    out = committee_->handle(env);
  } catch (const Error& e) {
    ++dropped_;
    spdlog::warn("dropped message on {}: {}", message.topic, e.what());
    return;
  }
  if (!out) return;
  try {
    channel.publish(out->topic, out->envelope);
  } catch (const Error& e) {
    spdlog::error("reply on {} failed: {}", out->topic, e.what());
  }
}

void CommitteeService::request_audit(const std::string& session_id, const std::string& reason) {
  transport::Channel* channel = nullptr;
  {
    std::lock_guard lock(mu_);
    if (!attached_.empty()) channel = attached_.front().first;
  }
  if (!channel) throw Error(Errc::channel_error, "committee is not attached to a channel");
  auto out = committee_->request_audit(session_id, reason);
  channel->publish(out.topic, out.envelope);
}

TallyResult CommitteeService::tally() const { return service::tally(ledger_->snapshot(), election_.candidates); }

std::unique_ptr<CommitteeService> serve(protocol::ElectionConfig election, transport::Channel& channel,
                                        const std::filesystem::path& ledger_path, LedgerOptions options) {
  auto svc = std::make_unique<CommitteeService>(std::move(election), ledger_path, options);
  svc->attach(channel);
  return svc;
}

}  // namespace qvote::service

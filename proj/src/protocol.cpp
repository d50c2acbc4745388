#include "qvote/protocol.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>

#include <boost/uuid/random_generator.hpp>
#include <boost/uuid/uuid_io.hpp>
#include <spdlog/spdlog.h>

#include "qvote/encoding.hpp"
#include "qvote/qasm.hpp"
#include "qvote/service.hpp"

namespace qvote::protocol {

using transport::Envelope;
using transport::MsgType;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kMaxKeyBits = 4096;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Envelope make_envelope(const std::string& election, const std::string& session, MsgType type, json payload) {
  Envelope e;
  e.election_id = election;
  e.session_id = session;
  e.msg_type = type;
  e.sent_at = transport::now_ms();
  e.payload = std::move(payload);
  return e;
}

json bases_json(std::span<const bb84::Basis> bases) { return bb84::to_string(bases); }

bb84::Bases bases_from_json(const json& j) {
  if (!j.is_string()) throw Error(Errc::malformed_message, "bases must be a string of R/D");
  try {
    return bb84::bases_from_string(j.get<std::string>());
  } catch (const Error& e) {
    throw Error(Errc::malformed_message, e.what());
  }
}

json noise_json(const bb84::NoiseSpec& n) {
  return {{"kind", n.kind == bb84::NoiseSpec::Kind::fixed ? "fixed" : "uniform"},
          {"level", n.level},
          {"eavesdropper", n.eavesdropper}};
}

bb84::NoiseSpec noise_from_json(const json& j) {
  bb84::NoiseSpec n;
  const std::string kind = j.value("kind", std::string("uniform"));
  if (kind == "fixed")
    n.kind = bb84::NoiseSpec::Kind::fixed;
  else if (kind == "uniform")
    n.kind = bb84::NoiseSpec::Kind::uniform;
  else
    throw Error(Errc::malformed_message, "unknown noise kind '" + kind + "'");
  n.level = j.value("level", 0.2);
  n.eavesdropper = j.value("eavesdropper", false);
  n.validate();
  return n;
}

std::string sender_of(const Envelope& m) {
  auto it = m.payload.find("sender");
  return it != m.payload.end() && it->is_string() ? it->get<std::string>() : std::string();
}

std::size_t attempt_of(const Envelope& m) {
  auto it = m.payload.find("attempt");
  if (it == m.payload.end() || !it->is_number_unsigned() || it->get<std::size_t>() == 0)
    throw Error(Errc::malformed_message, "payload needs a positive integer 'attempt'");
  return it->get<std::size_t>();
}

std::string string_field(const json& payload, const char* name) {
  auto it = payload.find(name);
  if (it == payload.end() || !it->is_string())
    throw Error(Errc::malformed_message, std::string("payload needs string field '") + name + "'");
  return it->get<std::string>();
}

class WaitTimeout : public Error {
 public:
  explicit WaitTimeout(const std::string& what) : Error(Errc::channel_error, what) {}
};

// Messages addressed to this voter's session, filled by channel handlers and
// drained by the blocking voter flow.
struct Mailbox {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Envelope> items;

  void push(Envelope e) {
    {
      std::lock_guard lock(mu);
      items.push_back(std::move(e));
    }
    cv.notify_all();
  }

  template <class Pred>
  std::optional<Envelope> wait(Pred match, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu);
    const auto deadline = Clock::now() + timeout;
    while (true) {
      for (auto it = items.begin(); it != items.end(); ++it) {
        if (!match(*it)) continue;
        Envelope e = std::move(*it);
        items.erase(it);
        return e;
      }
      if (cv.wait_until(lock, deadline) == std::cv_status::timeout) {
        // one last scan for anything that arrived with the timeout
        for (auto it = items.begin(); it != items.end(); ++it) {
          if (!match(*it)) continue;
          Envelope e = std::move(*it);
          items.erase(it);
          return e;
        }
        return std::nullopt;
      }
    }
  }
};

// Subscribes the voter to the committee-to-voter topics of one session and
// unsubscribes on destruction.
class VoterInbox {
 public:
  VoterInbox(transport::Channel& channel, const std::string& election, const std::string& session,
             std::initializer_list<std::string> topics)
      : channel_(channel), box_(std::make_shared<Mailbox>()) {
    auto box = box_;
    auto handler = [box, election, session](const transport::Message& msg) {
      try {
        Envelope e = Envelope::decode(msg.payload);
        if (e.election_id != election || e.session_id != session) return;
        if (sender_of(e) == "voter") return;
        box->push(std::move(e));
      } catch (const Error& e) {
        spdlog::debug("voter dropped malformed message on {}: {}", msg.topic, e.what());
      }
    };
    for (const auto& topic : topics) ids_.push_back(channel_.subscribe(topic, handler));
  }
  ~VoterInbox() {
    for (auto id : ids_) {
      try {
        channel_.unsubscribe(id);
      } catch (const std::exception& e) {
        spdlog::debug("unsubscribe failed: {}", e.what());
      }
    }
  }
  VoterInbox(const VoterInbox&) = delete;
  VoterInbox& operator=(const VoterInbox&) = delete;

  Mailbox& box() { return *box_; }

 private:
  transport::Channel& channel_;
  std::shared_ptr<Mailbox> box_;
  std::vector<transport::SubscriptionId> ids_;
};

// The committee as seen by the voter's QKD loop: every step is a publish and
// a wait for the matching reply.
class TransportPeer final : public bb84::QkdPeer {
 public:
  TransportPeer(transport::Channel& channel, const VoterConfig& config, VoterState& state, Mailbox& box)
      : channel_(channel), config_(config), state_(state), box_(box) {}

  bb84::Bases transmit(std::size_t attempt, std::string_view qasm) override {
    state_.advance(VoterPhase::quantum_sent);
    send(transport::topics::quantum(state_.election_id, state_.session_id), MsgType::qkd_quantum,
         {{"sender", "voter"},
          {"attempt", attempt},
          {"qasm", base64_encode(qasm)},
          {"shots", config_.qkd.shots},
          {"noise", noise_json(config_.noise)}});
    Envelope reply = await(attempt, {MsgType::qkd_bases_committee, MsgType::key_retry}, "committee bases");
    if (reply.msg_type == MsgType::key_retry)
      throw Error(Errc::session_failed, "committee refused the quantum frame: " + reply.payload.value("reason", ""));
    return bases_from_json(reply.payload.at("bases"));
  }

  void announce(std::size_t attempt, std::span<const bb84::Basis> voter_bases) override {
    send(transport::topics::bases_voter(state_.election_id, state_.session_id), MsgType::qkd_bases_voter,
         {{"sender", "voter"}, {"attempt", attempt}, {"bases", bases_json(voter_bases)}});
    state_.advance(VoterPhase::bases_exchanged);
  }

  bb84::ConfirmResult confirm(std::size_t attempt, const Digest& digest) override {
    send(transport::topics::confirm(state_.election_id, state_.session_id), MsgType::key_confirm,
         {{"sender", "voter"},
          {"attempt", attempt},
          {"digest", to_hex(digest)},
          {"vote_key_bits", config_.vote_key_bits},
          {"id_key_bits", config_.id_key_bits}});
    Envelope reply = await(attempt, {MsgType::key_confirm, MsgType::key_retry}, "key confirmation");
    if (reply.msg_type == MsgType::key_confirm && reply.payload.value("accepted", false))
      return bb84::ConfirmResult::accepted;
    const std::string reason = reply.payload.value("reason", "");
    if (reason == "duplicate" || reason == "already-confirmed")
      throw Error(Errc::session_failed, "committee refused the session: " + reason);
    return bb84::ConfirmResult::mismatch;
  }

  void abandon(std::size_t attempt) override {
    send(transport::topics::confirm(state_.election_id, state_.session_id), MsgType::key_retry,
         {{"sender", "voter"}, {"attempt", attempt}, {"reason", "short-sift"}});
  }

 private:
  void send(const std::string& topic, MsgType type, json payload) {
    channel_.publish(topic, make_envelope(state_.election_id, state_.session_id, type, std::move(payload)));
  }

  Envelope await(std::size_t attempt, std::initializer_list<MsgType> types, const char* what) {
    std::vector<MsgType> wanted(types);
    auto match = [&](const Envelope& e) {
      if (std::find(wanted.begin(), wanted.end(), e.msg_type) == wanted.end()) return false;
      auto it = e.payload.find("attempt");
      // replies without an attempt number (session-level refusals) always match
      return it == e.payload.end() || !it->is_number_unsigned() || it->get<std::size_t>() == attempt;
    };
    auto reply = box_.wait(match, config_.qkd_timeout);
    if (!reply)
      throw WaitTimeout(std::string("no ") + what + " within " + std::to_string(config_.qkd_timeout.count()) +
                        " ms (attempt " + std::to_string(attempt) + ")");
    return std::move(*reply);
  }

  transport::Channel& channel_;
  const VoterConfig& config_;
  VoterState& state_;
  Mailbox& box_;
};

void publish_vote(transport::Channel& channel, const VoterState& st) {
  channel.publish(transport::topics::vote(st.election_id, st.session_id),
                  make_envelope(st.election_id, st.session_id, MsgType::vote_submit,
                                {{"sender", "voter"},
                                 {"e_vote", base64_encode(st.e_vote)},
                                 {"e_id", base64_encode(st.e_id)}}));
}

// Waits for the committee's RECEIPT and compares it with the local one.
void await_receipt(VoterState& st, Mailbox& box, std::chrono::milliseconds timeout) {
  auto reply = box.wait([](const Envelope& e) { return e.msg_type == MsgType::receipt; }, timeout);
  if (!reply) {
    st.fail(FailureReason::timeout, "no RECEIPT within " + std::to_string(timeout.count()) + " ms");
    return;
  }
  const std::string status = reply->payload.value("status", "");
  if (status == "rejected") {
    st.fail(FailureReason::rejected, "committee rejected the ballot: " + reply->payload.value("reason", ""));
    return;
  }
  if (status != "ok" && status != "duplicate") {
    st.fail(FailureReason::rejected, "RECEIPT with unknown status '" + status + "'");
    return;
  }
  try {
    st.remote_receipt = digest_from_hex(reply->payload.value("receipt", ""));
  } catch (const Error& e) {
    st.fail(FailureReason::receipt_mismatch, std::string("unreadable receipt: ") + e.what());
    return;
  }
  if (st.local_receipt && digest_equal(*st.local_receipt, *st.remote_receipt)) {
    st.advance(VoterPhase::verified);
  } else {
    st.fail(FailureReason::receipt_mismatch, "committee receipt " + to_hex(*st.remote_receipt) +
                                                 " differs from local " +
                                                 (st.local_receipt ? to_hex(*st.local_receipt) : std::string("-")));
  }
}

json transcript_json(const bb84::SessionTranscript& t) {
  json positions = json::array();
  for (auto p : t.voter_key.positions) positions.push_back(p);
  json history = json::array();
  for (const auto& h : t.history)
    history.push_back({{"raw_length", h.raw_length},
                       {"sifted_bits", h.sifted_bits},
                       {"outcome", bb84::to_string(h.outcome)}});
  return {{"attempts", t.attempts},
          {"confirmed", t.confirmed},
          {"voter_bases", bb84::to_string(t.voter_bases)},
          {"committee_bases", bb84::to_string(t.committee_bases)},
          {"voter_key", t.voter_key.bits.to_string()},
          {"key_positions", positions},
          {"history", history}};
}

bb84::SessionTranscript transcript_from_json(const json& j) {
  bb84::SessionTranscript t;
  t.attempts = j.value("attempts", std::size_t{0});
  t.confirmed = j.value("confirmed", false);
  t.voter_bases = bb84::bases_from_string(j.value("voter_bases", ""));
  t.committee_bases = bb84::bases_from_string(j.value("committee_bases", ""));
  t.voter_key.bits = BitString::from_string(j.value("voter_key", ""));
  if (auto it = j.find("key_positions"); it != j.end())
    t.voter_key.positions = it->get<std::vector<std::size_t>>();
  if (auto it = j.find("history"); it != j.end()) {
    for (const auto& h : *it) {
      bb84::AttemptRecord r;
      r.raw_length = h.at("raw_length").get<std::size_t>();
      r.sifted_bits = h.at("sifted_bits").get<std::size_t>();
      const std::string outcome = h.at("outcome").get<std::string>();
      r.outcome = outcome == "confirmed"        ? bb84::AttemptOutcome::confirmed
                  : outcome == "digest_mismatch" ? bb84::AttemptOutcome::digest_mismatch
                                                 : bb84::AttemptOutcome::short_sift;
      t.history.push_back(r);
    }
  }
  return t;
}

std::optional<Digest> optional_digest(const json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return digest_from_hex(it->get<std::string>());
}

}  // namespace

Ballot Ballot::of(std::string_view vote, std::string_view voter_id) { return {to_bytes(vote), to_bytes(voter_id)}; }

void Ballot::validate() const {
  if (vote.empty() || vote.size() > kMaxBallotField)
    throw Error(Errc::invalid_argument, "vote must be 1-64 bytes, got " + std::to_string(vote.size()));
  if (voter_id.empty() || voter_id.size() > kMaxBallotField)
    throw Error(Errc::invalid_argument, "voter id must be 1-64 bytes, got " + std::to_string(voter_id.size()));
}

std::string_view to_string(VoterPhase phase) noexcept {
  switch (phase) {
    case VoterPhase::init: return "init";
    case VoterPhase::quantum_sent: return "quantum_sent";
    case VoterPhase::bases_exchanged: return "bases_exchanged";
    case VoterPhase::key_confirmed: return "key_confirmed";
    case VoterPhase::vote_sent: return "vote_sent";
    case VoterPhase::verified: return "verified";
    case VoterPhase::failed: return "failed";
  }
  return "unknown";
}

std::string_view to_string(FailureReason reason) noexcept {
  switch (reason) {
    case FailureReason::none: return "none";
    case FailureReason::qkd: return "qkd";
    case FailureReason::timeout: return "timeout";
    case FailureReason::receipt_mismatch: return "receipt_mismatch";
    case FailureReason::rejected: return "rejected";
    case FailureReason::channel: return "channel";
  }
  return "unknown";
}

namespace {

template <class E>
E enum_from_string(std::string_view s, E last) {
  for (int i = 0; i <= static_cast<int>(last); ++i)
    if (to_string(static_cast<E>(i)) == s) return static_cast<E>(i);
  throw Error(Errc::parse_error, "unknown value '" + std::string(s) + "'");
}

}  // namespace

void VoterState::advance(VoterPhase next) {
  bool ok = false;
  switch (next) {
    case VoterPhase::quantum_sent:
      ok = phase_ == VoterPhase::init || phase_ == VoterPhase::quantum_sent || phase_ == VoterPhase::bases_exchanged;
      break;
    case VoterPhase::bases_exchanged: ok = phase_ == VoterPhase::quantum_sent; break;
    case VoterPhase::key_confirmed: ok = phase_ == VoterPhase::bases_exchanged; break;
    case VoterPhase::vote_sent: ok = phase_ == VoterPhase::key_confirmed; break;
    case VoterPhase::verified: ok = phase_ == VoterPhase::vote_sent; break;
    case VoterPhase::init:
    case VoterPhase::failed: ok = false; break;
  }
  if (!ok)
    throw Error(Errc::invalid_argument,
                "voter cannot move from " + std::string(to_string(phase_)) + " to " + std::string(to_string(next)));
  phase_ = next;
}

void VoterState::fail(FailureReason reason, std::string detail) {
  if (phase_ == VoterPhase::verified) throw Error(Errc::invalid_argument, "a verified vote cannot fail");
  phase_ = VoterPhase::failed;
  failure_ = reason;
  detail_ = std::move(detail);
}

json VoterState::to_json() const {
  return {{"election_id", election_id},
          {"session_id", session_id},
          {"phase", to_string(phase_)},
          {"failure", to_string(failure_)},
          {"detail", detail_},
          {"transcript", transcript_json(transcript)},
          {"e_vote_b64", base64_encode(e_vote)},
          {"e_id_b64", base64_encode(e_id)},
          {"id_key", id_key.to_string()},
          {"local_receipt", local_receipt ? json(to_hex(*local_receipt)) : json(nullptr)},
          {"remote_receipt", remote_receipt ? json(to_hex(*remote_receipt)) : json(nullptr)}};
}

VoterState VoterState::from_json(const json& j) {
  try {
    VoterState s;
    s.election_id = j.at("election_id").get<std::string>();
    s.session_id = j.at("session_id").get<std::string>();
    s.phase_ = enum_from_string(j.at("phase").get<std::string>(), VoterPhase::failed);
    s.failure_ = enum_from_string(j.value("failure", "none"), FailureReason::channel);
    s.detail_ = j.value("detail", "");
    if (auto it = j.find("transcript"); it != j.end()) s.transcript = transcript_from_json(*it);
    s.e_vote = base64_decode(j.value("e_vote_b64", ""));
    s.e_id = base64_decode(j.value("e_id_b64", ""));
    s.id_key = BitString::from_string(j.value("id_key", ""));
    s.local_receipt = optional_digest(j, "local_receipt");
    s.remote_receipt = optional_digest(j, "remote_receipt");
    return s;
  } catch (const json::exception& e) {
    throw Error(Errc::parse_error, std::string("voter state: ") + e.what());
  }
}

void VoterConfig::validate() const {
  if (election_id.empty()) throw Error(Errc::invalid_argument, "election id must not be empty");
  if (vote_key_bits == 0 || id_key_bits == 0)
    throw Error(Errc::invalid_argument, "key lengths must be at least one bit");
  if (vote_key_bits > kMaxKeyBits || id_key_bits > kMaxKeyBits)
    throw Error(Errc::invalid_argument, "key lengths are limited to " + std::to_string(kMaxKeyBits) + " bits");
  if (receipt_timeout.count() <= 0 || qkd_timeout.count() <= 0)
    throw Error(Errc::invalid_argument, "timeouts must be positive");
  if (session_id && session_id->empty()) throw Error(Errc::invalid_argument, "session id must not be empty");
  qkd.validate();
  noise.validate();
}

std::string make_session_id(Rng& rng) {
  boost::uuids::basic_random_generator<Rng> gen(rng);
  return boost::uuids::to_string(gen());
}

VoterState voter_cast(const Ballot& ballot, const VoterConfig& config, transport::Channel& channel, Rng& rng) {
  config.validate();
  ballot.validate();

  VoterState st;
  st.election_id = config.election_id;
  st.session_id = config.session_id ? *config.session_id : make_session_id(rng);
  StageTimes times;

  const std::string& e = st.election_id;
  const std::string& s = st.session_id;
  std::optional<VoterInbox> inbox;
  try {
    inbox.emplace(channel, e, s,
                  std::initializer_list<std::string>{transport::topics::bases_committee(e, s),
                                                     transport::topics::confirm(e, s),
                                                     transport::topics::receipt(e, s)});
  } catch (const Error& err) {
    st.fail(FailureReason::channel, err.what());
    return st;
  }

  bb84::QkdConfig qkd = config.qkd;
  qkd.min_sifted_bits = config.vote_key_bits + config.id_key_bits;
  qkd.raw_length = 4 * qkd.min_sifted_bits;
  qkd.grow_on_short_sift = true;

  auto t0 = Clock::now();
  TransportPeer peer(channel, config, st, inbox->box());
  try {
    st.transcript = bb84::run_session(qkd, peer, rng);
  } catch (const bb84::SessionFailed& f) {
    st.transcript = f.transcript();
    st.fail(FailureReason::qkd, "key exchange failed after " + std::to_string(f.transcript().attempts) + " attempts");
  } catch (const WaitTimeout& err) {
    st.fail(FailureReason::timeout, err.what());
  } catch (const Error& err) {
    st.fail(err.code() == Errc::session_failed ? FailureReason::rejected : FailureReason::channel, err.what());
  }
  times.qkd = seconds_since(t0);
  if (st.phase() == VoterPhase::failed) {
    if (config.timing) *config.timing += times;
    return st;
  }
  st.advance(VoterPhase::key_confirmed);

  auto t1 = Clock::now();
  auto [vote_key, id_key] = crypto::split_key(st.transcript.voter_key, config.vote_key_bits, config.id_key_bits, s);
  st.id_key = id_key.bits();
  st.e_vote = vote_key.apply(ballot.vote);
  st.e_id = id_key.apply(ballot.voter_id);
  st.local_receipt = crypto::receipt_hash(st.e_vote, st.e_id);
  times.encrypt = seconds_since(t1);

  auto t2 = Clock::now();
  try {
    publish_vote(channel, st);
    st.advance(VoterPhase::vote_sent);
    await_receipt(st, inbox->box(), config.receipt_timeout);
  } catch (const Error& err) {
    st.fail(FailureReason::channel, err.what());
  }
  times.transport = seconds_since(t2);
  if (config.timing) *config.timing += times;
  return st;
}

VoterState requery_receipt(VoterState saved, const VoterConfig& config, transport::Channel& channel) {
  if (saved.e_vote.empty() || saved.e_id.empty())
    throw Error(Errc::invalid_argument, "saved state has no ciphertexts to re-submit");
  VoterState st;
  st.election_id = saved.election_id;
  st.session_id = saved.session_id;
  st.transcript = std::move(saved.transcript);
  st.e_vote = std::move(saved.e_vote);
  st.e_id = std::move(saved.e_id);
  st.id_key = std::move(saved.id_key);
  st.local_receipt = crypto::receipt_hash(st.e_vote, st.e_id);
  st.advance(VoterPhase::quantum_sent);
  st.advance(VoterPhase::bases_exchanged);
  st.advance(VoterPhase::key_confirmed);

  try {
    VoterInbox inbox(channel, st.election_id, st.session_id, {transport::topics::receipt(st.election_id, st.session_id)});
    publish_vote(channel, st);
    st.advance(VoterPhase::vote_sent);
    await_receipt(st, inbox.box(), config.receipt_timeout);
  } catch (const Error& err) {
    st.fail(FailureReason::channel, err.what());
  }
  return st;
}

AuditOutcome submit_audit(const VoterState& saved, const BitString& id_key, const VoterConfig& config,
                          transport::Channel& channel) {
  if (id_key.empty()) throw Error(Errc::invalid_key, "identity key is empty");
  const std::string topic = transport::topics::audit(saved.election_id, saved.session_id);
  try {
    VoterInbox inbox(channel, saved.election_id, saved.session_id, {topic});
    channel.publish(topic, make_envelope(saved.election_id, saved.session_id, MsgType::audit_reveal,
                                         {{"sender", "voter"}, {"k_id", id_key.to_string()}}));
    auto reply =
        inbox.box().wait([](const Envelope& e) { return e.msg_type == MsgType::audit_reveal; }, config.receipt_timeout);
    if (!reply) return {false, "no audit answer within " + std::to_string(config.receipt_timeout.count()) + " ms"};
    const bool revealed = reply->payload.value("status", "") == "revealed";
    return {revealed, reply->payload.value("reason", revealed ? "" : "refused")};
  } catch (const Error& err) {
    return {false, err.what()};
  }
}

bool verify_receipt(const crypto::Receipt& local, const crypto::Receipt& remote) noexcept {
  return digest_equal(local.digest, remote.digest);
}

bool verify_receipt(std::string_view local_hex, std::string_view remote_hex) {
  return digest_equal(digest_from_hex(local_hex), digest_from_hex(remote_hex));
}

void ElectionConfig::validate() const {
  if (election_id.empty() || election_id.find_first_of("/+#") != std::string::npos)
    throw Error(Errc::invalid_argument, "election id must be non-empty and free of '/', '+', '#'");
  if (candidates.empty()) throw Error(Errc::invalid_argument, "candidate list is empty");
  for (const auto& c : candidates)
    if (c.empty() || c.size() > kMaxBallotField)
      throw Error(Errc::invalid_argument, "candidate names must be 1-64 bytes");
  if (max_shots == 0) throw Error(Errc::invalid_argument, "max_shots must be positive");
}

struct Committee::Session {
  explicit Session(std::uint64_t seed) : rng(seed) {}

  std::mutex mu;
  Rng rng;
  std::size_t attempt = 0;
  std::optional<bb84::CommitteeAttempt> current;
  std::optional<bb84::SiftedKey> key;
  std::optional<Envelope> pending_confirm;
  bool confirmed = false;
};

Committee::Committee(ElectionConfig config, service::Ledger& ledger, service::KeyVault& vault)
    : config_(std::move(config)), ledger_(ledger), vault_(vault) {
  config_.validate();
}

std::shared_ptr<Committee::Session> Committee::session(const std::string& id, bool create) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it != sessions_.end()) return it->second;
  if (!create) return nullptr;
  auto s = std::make_shared<Session>(Rng::derive(config_.seed, Rng::hash(id)));
  sessions_.emplace(id, s);
  return s;
}

void Committee::drop_session(const std::string& id) {
  std::lock_guard lock(mu_);
  sessions_.erase(id);
}

std::optional<bb84::SiftedKey> Committee::sifted_key(const std::string& session_id) const {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    s = it->second;
  }
  std::lock_guard lock(s->mu);
  return s->key;
}

std::optional<Committee::Outgoing> Committee::handle(const Envelope& m) {
  if (m.election_id != config_.election_id) return std::nullopt;
  if (sender_of(m) == "committee") return std::nullopt;
  try {
    switch (m.msg_type) {
      case MsgType::qkd_quantum: return on_quantum(m);
      case MsgType::qkd_bases_voter: return on_voter_bases(m);
      case MsgType::key_confirm: return on_confirm(m);
      case MsgType::key_retry: {
        if (auto s = session(m.session_id, false)) {
          std::lock_guard lock(s->mu);
          if (!s->confirmed) {
            s->current.reset();
            s->key.reset();
            s->pending_confirm.reset();
          }
        }
        return std::nullopt;
      }
      case MsgType::vote_submit: return on_vote(m);
      case MsgType::audit_reveal: return on_audit(m);
      case MsgType::qkd_bases_committee:
      case MsgType::receipt:
      case MsgType::audit_request: return std::nullopt;
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_message, std::string(to_string(m.msg_type)) + ": " + e.what());
  }
  return std::nullopt;
}

namespace {

Committee::Outgoing retry(const std::string& election, const std::string& session, std::optional<std::size_t> attempt,
                          const std::string& reason) {
  json payload = {{"sender", "committee"}, {"reason", reason}};
  if (attempt) payload["attempt"] = *attempt;
  return {transport::topics::confirm(election, session),
          make_envelope(election, session, MsgType::key_retry, std::move(payload))};
}

Committee::Outgoing receipt_reply(const std::string& election, const std::string& session, const std::string& status,
                                  const std::string& receipt, const std::string& reason) {
  json payload = {{"sender", "committee"}, {"status", status}, {"receipt", receipt}, {"reason", reason}};
  return {transport::topics::receipt(election, session),
          make_envelope(election, session, MsgType::receipt, std::move(payload))};
}

}  // namespace

std::optional<Committee::Outgoing> Committee::on_quantum(const Envelope& m) {
  const std::string& e = config_.election_id;
  const std::size_t attempt = attempt_of(m);
  if (ledger_.contains(m.session_id)) return retry(e, m.session_id, attempt, "duplicate");

  std::uint64_t shots = 10000;
  if (auto it = m.payload.find("shots"); it != m.payload.end()) {
    if (!it->is_number_unsigned()) throw Error(Errc::malformed_message, "shots must be a positive integer");
    shots = it->get<std::uint64_t>();
  }
  if (shots == 0 || shots > config_.max_shots) return retry(e, m.session_id, attempt, "shots-out-of-range");

  bb84::NoiseSpec noise;
  if (auto it = m.payload.find("noise"); it != m.payload.end()) {
    try {
      noise = noise_from_json(*it);
    } catch (const Error&) {
      return retry(e, m.session_id, attempt, "bad-noise");
    }
  }

  std::optional<bb84::PreparedFrame> frame;
  try {
    const Bytes text = base64_decode(string_field(m.payload, "qasm"));
    frame = qasm::parse_prep(to_text(text));
  } catch (const ParseError& err) {
    spdlog::warn("session {}: quantum frame rejected: {}", m.session_id, err.what());
    return retry(e, m.session_id, attempt, "parse-error");
  }

  auto s = session(m.session_id, true);
  std::lock_guard lock(s->mu);
  if (s->confirmed) return retry(e, m.session_id, attempt, "already-confirmed");
  if (attempt < s->attempt) return std::nullopt;
  s->attempt = attempt;
  s->key.reset();
  s->pending_confirm.reset();
  s->current = bb84::CommitteeAttempt::receive(*frame, noise, shots, s->rng);
  return Outgoing{transport::topics::bases_committee(e, m.session_id),
                  make_envelope(e, m.session_id, MsgType::qkd_bases_committee,
                                {{"sender", "committee"}, {"attempt", attempt}, {"bases", bases_json(s->current->bases)}})};
}

std::optional<Committee::Outgoing> Committee::on_voter_bases(const Envelope& m) {
  const std::size_t attempt = attempt_of(m);
  auto s = session(m.session_id, false);
  if (!s) return retry(config_.election_id, m.session_id, attempt, "unknown-session");
  std::lock_guard lock(s->mu);
  if (attempt != s->attempt || !s->current || s->confirmed) return std::nullopt;
  bb84::Bases bases = bases_from_json(m.payload.at("bases"));
  if (bases.size() != s->current->bases.size())
    return retry(config_.election_id, m.session_id, attempt, "bad-bases");
  s->key = s->current->sift_with(bases);
  if (s->pending_confirm) {
    Envelope pending = std::move(*s->pending_confirm);
    s->pending_confirm.reset();
    return try_confirm(*s, pending);
  }
  return std::nullopt;
}

std::optional<Committee::Outgoing> Committee::on_confirm(const Envelope& m) {
  const std::size_t attempt = attempt_of(m);
  auto s = session(m.session_id, false);
  if (!s) return retry(config_.election_id, m.session_id, attempt, "unknown-session");
  std::lock_guard lock(s->mu);
  if (attempt != s->attempt || s->confirmed) return std::nullopt;
  if (!s->key) {
    s->pending_confirm = m;
    return std::nullopt;
  }
  return try_confirm(*s, m);
}

std::optional<Committee::Outgoing> Committee::try_confirm(Session& s, const Envelope& m) {
  const std::string& e = config_.election_id;
  const std::size_t attempt = s.attempt;
  Digest digest{};
  try {
    digest = digest_from_hex(string_field(m.payload, "digest"));
  } catch (const Error&) {
    return retry(e, m.session_id, attempt, "bad-digest");
  }
  const auto v = m.payload.at("vote_key_bits").get<std::size_t>();
  const auto i = m.payload.at("id_key_bits").get<std::size_t>();
  if (v == 0 || i == 0 || v > kMaxKeyBits || i > kMaxKeyBits) return retry(e, m.session_id, attempt, "bad-key-lengths");

  const bb84::SiftedKey key = *s.key;
  if (key.bits.empty() || !digest_equal(crypto::key_digest(key.bits), digest))
    return retry(e, m.session_id, attempt, "digest-mismatch");
  if (key.size() < v + i) return retry(e, m.session_id, attempt, "key-too-short");

  auto [vote_key, id_key] = crypto::split_key(key, v, i, m.session_id);
  vault_.deposit(m.session_id, std::move(vote_key), std::move(id_key));
  s.confirmed = true;
  s.current.reset();
  return Outgoing{transport::topics::confirm(e, m.session_id),
                  make_envelope(e, m.session_id, MsgType::key_confirm,
                                {{"sender", "committee"}, {"attempt", attempt}, {"accepted", true}})};
}

std::optional<Committee::Outgoing> Committee::on_vote(const Envelope& m) {
  const std::string& e = config_.election_id;
  const std::string& sid = m.session_id;
  if (auto existing = ledger_.find(sid)) return receipt_reply(e, sid, "duplicate", existing->receipt_hex, "");

  Bytes e_vote, e_id;
  try {
    e_vote = base64_decode(string_field(m.payload, "e_vote"));
    e_id = base64_decode(string_field(m.payload, "e_id"));
  } catch (const Error&) {
    return receipt_reply(e, sid, "rejected", "", "malformed");
  }
  if (e_vote.empty() || e_vote.size() > kMaxBallotField || e_id.empty() || e_id.size() > kMaxBallotField)
    return receipt_reply(e, sid, "rejected", "", "malformed");

  auto vote_key = vault_.release_vote_key(sid);
  if (!vote_key) return receipt_reply(e, sid, "rejected", "", "unknown-session");

  const Bytes plain = vote_key->apply(e_vote);
  const std::string vote = to_text(plain);

  service::LedgerEntry entry;
  entry.session_id = sid;
  entry.e_vote_b64 = base64_encode(e_vote);
  entry.e_id_b64 = base64_encode(e_id);
  entry.receipt_hex = to_hex(crypto::receipt_hash(e_vote, e_id));
  if (std::find(config_.candidates.begin(), config_.candidates.end(), vote) != config_.candidates.end())
    entry.decrypted_vote = vote;
  else
    spdlog::warn("session {}: ballot decrypted outside the candidate set, recorded as invalid", sid);
  entry.recorded_at = transport::now_ms();
  entry.id_key_bits = vault_.sealed_id_bits(sid).value_or(0);

  const auto t0 = Clock::now();
  const bool appended = ledger_.append(entry);
  ledger_ns_ += std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count();
  if (!appended) {
    auto existing = ledger_.find(sid);
    return receipt_reply(e, sid, "duplicate", existing ? existing->receipt_hex : "", "");
  }
  if (after_ledger_append) after_ledger_append(sid);
  drop_session(sid);
  return receipt_reply(e, sid, "ok", entry.receipt_hex, "");
}

std::optional<Committee::Outgoing> Committee::on_audit(const Envelope& m) {
  const std::string& e = config_.election_id;
  auto reply = [&](const std::string& status, const std::string& reason) {
    return Outgoing{transport::topics::audit(e, m.session_id),
                    make_envelope(e, m.session_id, MsgType::audit_reveal,
                                  {{"sender", "committee"}, {"status", status}, {"reason", reason}})};
  };
  BitString k_id;
  try {
    k_id = BitString::from_string(string_field(m.payload, "k_id"));
  } catch (const Error&) {
    return reply("rejected", "bad-key");
  }
  try {
    service::RevealedIdentity id = service::audit_open(ledger_, m.session_id, k_id);
    return reply("revealed", id.needs_review ? "needs-review" : "");
  } catch (const Error& err) {
    spdlog::warn("session {}: audit refused: {}", m.session_id, err.what());
    return reply("rejected", err.code() == Errc::not_found ? "not-found" : "bad-key");
  }
}

Committee::Outgoing Committee::request_audit(const std::string& session_id, const std::string& reason) const {
  return {transport::topics::audit(config_.election_id, session_id),
          make_envelope(config_.election_id, session_id, MsgType::audit_request,
                        {{"sender", "committee"}, {"reason", reason}})};
}

}  // namespace qvote::protocol

#include <gtest/gtest.h>

#include <regex>
#include <thread>

#include "qvote/encoding.hpp"
#include "qvote/protocol.hpp"
#include "qvote/service.hpp"

using namespace qvote;
using namespace qvote::protocol;
using namespace std::chrono_literals;
using transport::Envelope;
using transport::MsgType;

namespace {

struct Rig {
  explicit Rig(ElectionConfig e = {}) : svc(e, {}) {
    committee = broker.connect("committee");
    voter = broker.connect("voter");
    svc.attach(*committee);
  }
  ~Rig() { svc.detach_all(); }

  transport::LoopbackBroker broker;
  service::CommitteeService svc;
  std::unique_ptr<transport::Channel> committee;
  std::unique_ptr<transport::Channel> voter;
};

VoterConfig quiet() {
  VoterConfig c;
  c.noise = bb84::NoiseSpec::off();
  c.qkd.shots = 100;
  c.qkd_timeout = 500ms;
  c.receipt_timeout = 500ms;
  return c;
}

// Rewrites envelopes of one type in flight.
template <class Fn>
transport::LoopbackBroker::Interceptor rewrite(MsgType type, Fn fn) {
  return [type, fn](const std::string&, std::string& payload) {
    auto e = Envelope::decode(payload);
    if (e.msg_type != type) return true;
    fn(e);
    payload = e.encode();
    return true;
  };
}

transport::LoopbackBroker::Interceptor drop(MsgType type) {
  return [type](const std::string&, std::string& payload) { return Envelope::decode(payload).msg_type != type; };
}

}  // namespace

TEST(Ballot, FieldBounds) {
  EXPECT_NO_THROW(Ballot::of("A", "v").validate());
  EXPECT_THROW(Ballot::of("", "v").validate(), Error);
  EXPECT_THROW(Ballot::of("A", "").validate(), Error);
  EXPECT_THROW(Ballot::of(std::string(65, 'a'), "v").validate(), Error);
  EXPECT_NO_THROW(Ballot::of(std::string(64, 'a'), std::string(64, 'b')).validate());
}

TEST(VoterState, TransitionsFollowTheProtocol) {
  VoterState s;
  EXPECT_THROW(s.advance(VoterPhase::key_confirmed), Error);
  s.advance(VoterPhase::quantum_sent);
  s.advance(VoterPhase::bases_exchanged);
  s.advance(VoterPhase::quantum_sent);  // retry
  s.advance(VoterPhase::bases_exchanged);
  s.advance(VoterPhase::key_confirmed);
  EXPECT_THROW(s.advance(VoterPhase::verified), Error);
  s.advance(VoterPhase::vote_sent);
  s.advance(VoterPhase::verified);
  EXPECT_THROW(s.fail(FailureReason::timeout, "x"), Error);

  VoterState f;
  f.fail(FailureReason::qkd, "no key");
  EXPECT_EQ(f.phase(), VoterPhase::failed);
  EXPECT_THROW(f.advance(VoterPhase::quantum_sent), Error);
}

TEST(VoterState, JsonRoundTrip) {
  Rig rig;
  Rng rng(1);
  auto st = voter_cast(Ballot::of("A", "v1"), quiet(), *rig.voter, rng);
  ASSERT_TRUE(st.verified());
  auto back = VoterState::from_json(nlohmann::json::parse(st.to_json().dump()));
  EXPECT_EQ(back.to_json(), st.to_json());
  EXPECT_EQ(back.phase(), VoterPhase::verified);
  EXPECT_EQ(back.e_vote, st.e_vote);
  EXPECT_EQ(back.id_key, st.id_key);
  EXPECT_THROW(VoterState::from_json(nlohmann::json::object()), Error);
}

TEST(Session, IdsAreVersion4Uuids) {
  Rng a(3), b(3);
  const std::string id = make_session_id(a);
  EXPECT_TRUE(std::regex_match(id, std::regex("[0-9a-f]{8}-[0-9a-f]{4}-4[0-9a-f]{3}-[89ab][0-9a-f]{3}-[0-9a-f]{12}")));
  EXPECT_EQ(make_session_id(b), id);
}

TEST(Protocol, NoiselessVoteIsRecordedAndVerified) {
  Rig rig;
  Rng rng(2);
  StageTimes times;
  auto cfg = quiet();
  cfg.timing = &times;
  auto st = voter_cast(Ballot::of("B", "alice"), cfg, *rig.voter, rng);
  ASSERT_TRUE(st.verified()) << st.detail();
  EXPECT_EQ(st.failure(), FailureReason::none);
  ASSERT_TRUE(st.local_receipt && st.remote_receipt);
  EXPECT_EQ(*st.local_receipt, *st.remote_receipt);
  EXPECT_EQ(st.id_key.size(), 4u);
  EXPECT_GT(times.qkd, 0.0);

  auto entry = rig.svc.ledger().find(st.session_id);
  ASSERT_TRUE(entry);
  EXPECT_EQ(entry->decrypted_vote, "B");
  EXPECT_EQ(entry->receipt_hex, to_hex(*st.local_receipt));
  EXPECT_EQ(entry->id_key_bits, 4u);
  EXPECT_EQ(base64_decode(entry->e_vote_b64), st.e_vote);
  EXPECT_FALSE(rig.svc.vault().release_vote_key(st.session_id));
  EXPECT_EQ(rig.svc.vault().sealed_id_bits(st.session_id), 4u);
}

TEST(Protocol, LongerKeysWork) {
  Rig rig;
  Rng rng(3);
  auto cfg = quiet();
  cfg.vote_key_bits = 16;
  cfg.id_key_bits = 24;
  auto st = voter_cast(Ballot::of("C", "a-longer-voter-id"), cfg, *rig.voter, rng);
  ASSERT_TRUE(st.verified()) << st.detail();
  EXPECT_EQ(st.id_key.size(), 24u);
  EXPECT_EQ(rig.svc.ledger().find(st.session_id)->id_key_bits, 24u);
}

TEST(Protocol, NoisySessionsVerifyCorrectlyOrFail) {
  Rig rig;
  Rng rng(4);
  auto cfg = quiet();
  cfg.noise = bb84::NoiseSpec{};
  std::size_t verified = 0;
  for (int i = 0; i < 300; ++i) {
    const std::string vote = i % 3 == 0 ? "A" : i % 3 == 1 ? "B" : "C";
    auto st = voter_cast(Ballot::of(vote, "v" + std::to_string(i)), cfg, *rig.voter, rng);
    if (st.verified()) {
      ++verified;
      EXPECT_EQ(rig.svc.ledger().find(st.session_id)->decrypted_vote, vote);
    } else {
      EXPECT_EQ(st.failure(), FailureReason::qkd) << st.detail();
      EXPECT_FALSE(rig.svc.ledger().contains(st.session_id));
    }
  }
  // Per attempt ~E[(1-p)^16] = 0.2875 over a 16-bit sift, so ~0.64 within three.
  EXPECT_GT(verified, 160u);
  EXPECT_LT(verified, 225u);
}

TEST(Protocol, EavesdropperIsUsuallyDetected) {
  Rig rig;
  Rng rng(5);
  auto cfg = quiet();
  cfg.noise = bb84::NoiseSpec::off().with_eavesdropper();
  cfg.qkd.max_attempts = 1;
  std::size_t failed = 0;
  for (int i = 0; i < 100; ++i) {
    auto st = voter_cast(Ballot::of("A", "v"), cfg, *rig.voter, rng);
    failed += st.phase() == VoterPhase::failed;
  }
  // 8 sifted bits each survive with probability 3/4
  EXPECT_GT(failed, 80u);
}

TEST(Protocol, SilentCommitteeTimesOut) {
  Rig rig;
  rig.broker.set_interceptor(drop(MsgType::qkd_bases_committee));
  Rng rng(6);
  auto st = voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng);
  EXPECT_EQ(st.phase(), VoterPhase::failed);
  EXPECT_EQ(st.failure(), FailureReason::timeout);
}

TEST(Protocol, LostReceiptCanBeRequeried) {
  Rig rig;
  rig.broker.set_interceptor(drop(MsgType::receipt));
  Rng rng(7);
  auto st = voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng);
  EXPECT_EQ(st.failure(), FailureReason::timeout);
  EXPECT_TRUE(rig.svc.ledger().contains(st.session_id));

  rig.broker.set_interceptor({});
  auto again = requery_receipt(st, quiet(), *rig.voter);
  EXPECT_TRUE(again.verified()) << again.detail();
  EXPECT_EQ(rig.svc.ledger().size(), 1u);
}

TEST(Protocol, TamperedCiphertextIsDetectedByTheVoter) {
  Rig rig;
  Rng rng(8);
  rig.broker.set_interceptor(rewrite(MsgType::vote_submit, [](Envelope& e) {
    Bytes c = base64_decode(e.payload["e_vote"].get<std::string>());
    c[0] ^= 0x01;
    e.payload["e_vote"] = base64_encode(c);
  }));
  auto st = voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng);
  EXPECT_EQ(st.failure(), FailureReason::receipt_mismatch);
  ASSERT_TRUE(rig.svc.ledger().contains(st.session_id));
}

TEST(Protocol, ForgedReceiptIsDetected) {
  Rig rig;
  Rng rng(9);
  rig.broker.set_interceptor(rewrite(MsgType::receipt, [](Envelope& e) {
    std::string r = e.payload["receipt"];
    r[0] = r[0] == '0' ? '1' : '0';
    e.payload["receipt"] = r;
  }));
  auto st = voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng);
  EXPECT_EQ(st.failure(), FailureReason::receipt_mismatch);
}

TEST(Protocol, ReplayedVoteIsIdempotent) {
  Rig rig;
  Rng rng(10);
  std::vector<std::string> vote_payloads;
  rig.broker.set_interceptor([&](const std::string&, std::string& p) {
    if (Envelope::decode(p).msg_type == MsgType::vote_submit) vote_payloads.push_back(p);
    return true;
  });
  auto st = voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng);
  ASSERT_TRUE(st.verified());
  ASSERT_EQ(vote_payloads.size(), 1u);

  std::vector<std::string> statuses;
  auto listener = rig.broker.connect();
  listener->subscribe(transport::topics::receipt("e1", st.session_id), [&](const transport::Message& m) {
    statuses.push_back(Envelope::decode(m.payload).payload["status"]);
  });
  for (int i = 0; i < 10; ++i) rig.voter->publish_raw(transport::topics::vote("e1", st.session_id), vote_payloads[0]);
  EXPECT_EQ(rig.svc.ledger().size(), 1u);
  ASSERT_EQ(statuses.size(), 10u);
  for (const auto& s : statuses) EXPECT_EQ(s, "duplicate");
}

TEST(Protocol, VoteWithoutKeyExchangeIsRejected) {
  Rig rig;
  std::string status, reason;
  auto listener = rig.broker.connect();
  listener->subscribe(transport::topics::receipt("e1", "ghost"), [&](const transport::Message& m) {
    auto e = Envelope::decode(m.payload);
    status = e.payload["status"];
    reason = e.payload["reason"];
  });
  Envelope e{1, "e1", "ghost", MsgType::vote_submit, 0, {{"sender", "voter"}, {"e_vote", "AQ=="}, {"e_id", "AQ=="}}};
  rig.voter->publish(transport::topics::vote("e1", "ghost"), e);
  EXPECT_EQ(status, "rejected");
  EXPECT_EQ(reason, "unknown-session");
  EXPECT_EQ(rig.svc.ledger().size(), 0u);
}

TEST(Protocol, MalformedAndForeignMessagesAreDropped) {
  Rig rig;
  rig.voter->publish_raw(transport::topics::vote("e1", "s"), "{not json");
  Envelope wrong{1, "e1", "other", MsgType::vote_submit, 0, {{"e_vote", "AQ=="}, {"e_id", "AQ=="}}};
  rig.voter->publish(transport::topics::vote("e1", "s"), wrong);
  Envelope quantum{1, "e1", "s", MsgType::qkd_quantum, 0, {{"sender", "voter"}}};
  rig.voter->publish(transport::topics::quantum("e1", "s"), quantum);
  EXPECT_EQ(rig.svc.dropped_messages(), 3u);

  Envelope foreign{1, "e2", "s", MsgType::vote_submit, 0, {{"e_vote", "AQ=="}, {"e_id", "AQ=="}}};
  rig.voter->publish(transport::topics::vote("e1", "s"), foreign);
  EXPECT_EQ(rig.svc.ledger().size(), 0u);

  Rng rng(11);
  EXPECT_TRUE(voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng).verified());
}

TEST(Protocol, BadQuantumFrameIsRefused) {
  Rig rig;
  rig.broker.set_interceptor(rewrite(MsgType::qkd_quantum, [](Envelope& e) {
    e.payload["qasm"] = base64_encode(std::string_view("OPENQASM 2.0;\nqubit[4] q;\n"));
  }));
  Rng rng(12);
  auto st = voter_cast(Ballot::of("A", "v"), quiet(), *rig.voter, rng);
  EXPECT_EQ(st.failure(), FailureReason::rejected);
  EXPECT_NE(st.detail().find("parse-error"), std::string::npos);
}

TEST(Protocol, OutOfSetVoteIsRecordedInvalid) {
  Rig rig;
  Rng rng(13);
  auto st = voter_cast(Ballot::of("Z", "v"), quiet(), *rig.voter, rng);
  ASSERT_TRUE(st.verified());
  auto entry = rig.svc.ledger().find(st.session_id);
  EXPECT_FALSE(entry->valid());
  auto t = rig.svc.tally();
  EXPECT_EQ(t.invalid, 1u);
  EXPECT_TRUE(t.counts.empty());
}

TEST(Protocol, AuditRevealsOnlyWithTheRightKeyLength) {
  Rig rig;
  Rng rng(14);
  auto st = voter_cast(Ballot::of("A", "carol"), quiet(), *rig.voter, rng);
  ASSERT_TRUE(st.verified());

  auto refused = submit_audit(st, BitString::from_string("101"), quiet(), *rig.voter);
  EXPECT_FALSE(refused.revealed);
  EXPECT_EQ(refused.reason, "bad-key");
  EXPECT_FALSE(rig.svc.ledger().find(st.session_id)->audit);

  auto ok = submit_audit(st, st.id_key, quiet(), *rig.voter);
  EXPECT_TRUE(ok.revealed) << ok.reason;
  auto entry = rig.svc.ledger().find(st.session_id);
  ASSERT_TRUE(entry->audit);
  EXPECT_EQ(entry->audit->revealed_voter_id, "carol");

  VoterState unknown = st;
  unknown.session_id = "nobody";
  auto nf = submit_audit(unknown, st.id_key, quiet(), *rig.voter);
  EXPECT_FALSE(nf.revealed);
  EXPECT_EQ(nf.reason, "not-found");
}

TEST(Protocol, CommitteeCanRequestAnAudit) {
  Rig rig;
  std::string reason;
  auto voter_side = rig.broker.connect();
  voter_side->subscribe(transport::topics::audit("e1", "s1"), [&](const transport::Message& m) {
    auto e = Envelope::decode(m.payload);
    if (e.msg_type == MsgType::audit_request) reason = e.payload["reason"];
  });
  rig.svc.request_audit("s1", "double-vote suspicion");
  EXPECT_EQ(reason, "double-vote suspicion");
}

TEST(Protocol, ConcurrentVotersShareOneCommittee) {
  Rig rig;
  std::atomic<int> verified{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&, t] {
      auto ch = rig.broker.connect();
      Rng rng(100 + t);
      for (int i = 0; i < 25; ++i) {
        auto cfg = quiet();
        cfg.qkd_timeout = 5s;
        cfg.receipt_timeout = 5s;
        verified += voter_cast(Ballot::of("A", "v"), cfg, *ch, rng).verified();
      }
    });
  for (auto& t : threads) t.join();
  EXPECT_EQ(verified.load(), 200);
  EXPECT_EQ(rig.svc.ledger().size(), 200u);
}

TEST(Verify, ReceiptComparison) {
  const auto a = crypto::receipt_hash(Bytes{1}, Bytes{2});
  auto b = a;
  EXPECT_TRUE(verify_receipt(crypto::Receipt{a, "s"}, crypto::Receipt{b, "s"}));
  b[0] ^= 1;
  EXPECT_FALSE(verify_receipt(crypto::Receipt{a, "s"}, crypto::Receipt{b, "s"}));
  std::string upper = to_hex(a);
  for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  EXPECT_TRUE(verify_receipt(to_hex(a), upper));
  EXPECT_THROW(verify_receipt(to_hex(a), "zz"), Error);
}

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "qvote/encoding.hpp"
#include "qvote/protocol.hpp"
#include "qvote/service.hpp"

using namespace qvote;
using namespace qvote::service;
using namespace std::chrono_literals;

namespace {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "qvote-test-XXXXXX").string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

LedgerEntry entry(const std::string& session, const std::string& vote, std::string_view id = "v") {
  const Bytes ev = to_bytes(vote), ei = to_bytes(id);
  LedgerEntry e;
  e.session_id = session;
  e.e_vote_b64 = base64_encode(ev);
  e.e_id_b64 = base64_encode(ei);
  e.receipt_hex = to_hex(crypto::receipt_hash(ev, ei));
  e.decrypted_vote = vote;
  e.recorded_at = 1;
  e.id_key_bits = 4;
  return e;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

protocol::VoterConfig quiet() {
  protocol::VoterConfig c;
  c.noise = bb84::NoiseSpec::off();
  c.qkd.shots = 100;
  c.qkd_timeout = 1s;
  c.receipt_timeout = 1s;
  return c;
}

}  // namespace

TEST(Ledger, AppendsOncePerSession) {
  Ledger l;
  EXPECT_TRUE(l.append(entry("s1", "A")));
  EXPECT_FALSE(l.append(entry("s1", "B")));
  EXPECT_EQ(l.size(), 1u);
  EXPECT_EQ(l.find("s1")->decrypted_vote, "A");
  EXPECT_FALSE(l.find("s2"));
  EXPECT_THROW(l.record_audit("s2", {}), Error);
}

TEST(Ledger, EntryJsonRoundTrip) {
  auto e = entry("s", "A");
  e.audit = AuditRecord{"v", 5, false};
  EXPECT_EQ(LedgerEntry::from_json(e.to_json()), e);
  EXPECT_TRUE(e.receipt_consistent());
  e.receipt_hex[0] = e.receipt_hex[0] == 'a' ? 'b' : 'a';
  EXPECT_FALSE(e.receipt_consistent());
  auto j = entry("s", "A").to_json();
  EXPECT_EQ(j["kind"], "vote");
  EXPECT_EQ(j["valid"], true);
}

TEST(Ledger, PersistsAcrossRestart) {
  TempDir dir;
  const auto path = dir / "ledger.jsonl";
  {
    Ledger l(path);
    l.append(entry("s1", "A"));
    l.append(entry("s2", "B"));
    l.record_audit("s1", {"v", 9, false});
  }
  Ledger again(path);
  EXPECT_EQ(again.size(), 2u);
  ASSERT_TRUE(again.find("s1")->audit);
  EXPECT_EQ(again.find("s1")->audit->revealed_at, 9);
  EXPECT_FALSE(again.append(entry("s2", "C")));
  EXPECT_TRUE(check_ledger(path).ok());
}

TEST(Ledger, TornTailIsQuarantined) {
  TempDir dir;
  const auto path = dir / "ledger.jsonl";
  {
    Ledger l(path);
    l.append(entry("s1", "A"));
  }
  const std::string full = entry("s2", "B").to_json().dump();
  {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out << full.substr(0, full.size() / 2);
  }
  EXPECT_TRUE(scan_ledger(path).torn_tail);
  EXPECT_FALSE(check_ledger(path).ok());

  Ledger l(path);
  EXPECT_EQ(l.quarantined_lines(), 1u);
  EXPECT_EQ(l.size(), 1u);
  EXPECT_TRUE(l.append(entry("s2", "B")));
  EXPECT_TRUE(check_ledger(path).ok());
  EXPECT_EQ(slurp(path.string() + ".quarantine"), full.substr(0, full.size() / 2) + "\n");
}

TEST(Ledger, GarbledFinalLineIsQuarantined) {
  TempDir dir;
  const auto path = dir / "ledger.jsonl";
  {
    Ledger l(path);
    l.append(entry("s1", "A"));
  }
  {
    std::ofstream out(path, std::ios::app);
    out << "{\"kind\":\"vote\",\"session\n";
  }
  Ledger l(path);
  EXPECT_EQ(l.quarantined_lines(), 1u);
  EXPECT_TRUE(check_ledger(path).ok());
}

TEST(Ledger, CheckFindsTampering) {
  TempDir dir;
  const auto path = dir / "ledger.jsonl";
  auto bad = entry("s2", "B");
  bad.e_vote_b64 = base64_encode(std::string_view("C"));
  {
    std::ofstream out(path);
    out << entry("s1", "A").to_json().dump() << "\n"
        << bad.to_json().dump() << "\n"
        << "garbage\n"
        << entry("s1", "A").to_json().dump() << "\n"
        << nlohmann::json{{"kind", "audit"}, {"session_id", "nobody"}, {"revealed_voter_id", "x"}, {"revealed_at", 1}}.dump()
        << "\n";
  }
  auto r = check_ledger(path);
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.entries, 2u);
  EXPECT_EQ(r.receipt_mismatches, 1u);
  EXPECT_EQ(r.corrupt_lines, 1u);
  EXPECT_EQ(r.duplicate_sessions, 1u);
  EXPECT_EQ(r.orphan_audits, 1u);
  EXPECT_EQ(r.to_json()["problems"].size(), 4u);
  EXPECT_THROW(check_ledger(dir / "missing.jsonl"), Error);
}

TEST(Tally, CountsValidVotesOnly) {
  std::vector<LedgerEntry> es{entry("1", "A"), entry("2", "A"), entry("3", "B")};
  auto invalid = entry("4", "Q");
  invalid.decrypted_vote.reset();
  es.push_back(invalid);
  es.push_back(entry("5", "Z"));
  auto t = tally(es, {"A", "B", "C"});
  EXPECT_EQ(t.counts, (std::map<std::string, std::size_t>{{"A", 2}, {"B", 1}}));
  EXPECT_EQ(t.invalid, 2u);
  EXPECT_EQ(t.total_sessions, 5u);
  EXPECT_EQ(t.verified, 5u);
  EXPECT_EQ(t.to_json()["counts"], (nlohmann::json{{"A", 2}, {"B", 1}}));
}

TEST(Tally, NeverTouchesIdentityCiphertexts) {
  auto e = entry("1", "A");
  e.e_id_b64 = "!!! not base64 !!!";
  auto t = tally(std::vector<LedgerEntry>{e}, {"A"});
  EXPECT_EQ(t.counts.at("A"), 1u);
  EXPECT_EQ(t.verified, 0u);
}

TEST(Tally, FileCountsCorruptLinesAsInvalid) {
  TempDir dir;
  const auto path = dir / "ledger.jsonl";
  {
    std::ofstream out(path);
    out << entry("1", "A").to_json().dump() << "\nnot json\n" << entry("2", "B").to_json().dump() << "\n";
  }
  auto t = tally(path, {"A", "B"});
  EXPECT_EQ(t.counts.at("A"), 1u);
  EXPECT_EQ(t.invalid, 1u);
  EXPECT_EQ(t.total_sessions, 3u);
  EXPECT_THROW(tally(dir / "nope"), Error);
}

TEST(Audit, OpensIdentityWithTheRightKey) {
  Ledger l;
  const BitString k = BitString::from_string("1010");
  const Bytes e_id = crypto::xor_apply(to_bytes("dave"), k);
  auto e = entry("s", "A");
  e.e_id_b64 = base64_encode(e_id);
  e.receipt_hex = to_hex(crypto::receipt_hash(to_bytes("A"), e_id));
  l.append(e);

  try {
    audit_open(l, "s", BitString::from_string("10"));
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), Errc::bad_key);
  }
  EXPECT_FALSE(l.find("s")->audit);
  try {
    audit_open(l, "none", k);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), Errc::not_found);
  }

  auto id = audit_open(l, "s", k);
  EXPECT_EQ(to_text(id.voter_id), "dave");
  EXPECT_FALSE(id.needs_review);
  EXPECT_EQ(l.find("s")->audit->revealed_voter_id, "dave");
}

TEST(Audit, WrongKeyOfRightLengthIsFlaggedForReview) {
  Ledger l;
  const BitString k = BitString::from_string("1010");
  const Bytes e_id = crypto::xor_apply(to_bytes("dave"), k);
  auto e = entry("s", "A");
  e.e_id_b64 = base64_encode(e_id);
  l.append(e);
  auto id = audit_open(l, "s", BitString::from_string("0010"));
  EXPECT_TRUE(id.needs_review);
  ASSERT_TRUE(l.find("s")->audit);
  EXPECT_TRUE(l.find("s")->audit->needs_review);
  EXPECT_EQ(l.find("s")->audit->revealed_voter_id.rfind("b64:", 0), 0u);
}

TEST(Vault, VoteKeyReleasedOnceIdentityKeySealed) {
  KeyVault v;
  v.deposit("s", crypto::SymmetricKey(BitString::from_string("1010"), {}),
            crypto::SymmetricKey(BitString::from_string("110"), {}));
  EXPECT_TRUE(v.contains("s"));
  EXPECT_EQ(v.sealed_id_bits("s"), 3u);
  auto k = v.release_vote_key("s");
  ASSERT_TRUE(k);
  EXPECT_EQ(k->size(), 4u);
  EXPECT_FALSE(v.release_vote_key("s"));
  EXPECT_FALSE(v.release_vote_key("t"));
  EXPECT_EQ(v.sealed_id_bits("s"), 3u);
}

// The identity key has no read path: SealedKey exposes only its size, and no
// source file outside the vault header names the sealed member.
TEST(Privacy, SealedIdentityKeyHasNoAccessor) {
  const std::filesystem::path root = QVOTE_SOURCE_DIR;
  const std::string vault = slurp(root / "include/qvote/vault.hpp");
  const auto begin = vault.find("class SealedKey");
  const auto end = vault.find("};", begin);
  ASSERT_NE(begin, std::string::npos);
  const std::string sealed = vault.substr(begin, end - begin);
  EXPECT_EQ(sealed.find("bits("), std::string::npos);
  EXPECT_EQ(sealed.find("apply("), std::string::npos);
  EXPECT_EQ(sealed.find("friend"), std::string::npos);
  EXPECT_EQ(sealed.find("const crypto::SymmetricKey&"), std::string::npos);

  for (const auto& dir : {root / "src", root / "tools", root / "python"}) {
    if (!std::filesystem::exists(dir)) continue;
    for (const auto& f : std::filesystem::recursive_directory_iterator(dir)) {
      if (!f.is_regular_file()) continue;
      const std::string text = slurp(f.path());
      EXPECT_FALSE(std::regex_search(text, std::regex(R"(id_key\s*\.\s*key_)"))) << f.path();
      EXPECT_FALSE(std::regex_search(text, std::regex(R"(\.id_key\s*\.\s*bits\s*\()"))) << f.path();
    }
  }
}

TEST(Service, RejectsUnusableLedgerPath) {
  try {
    CommitteeService svc({}, "/nonexistent-dir/ledger.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::io_error);
  }
  protocol::ElectionConfig bad;
  bad.candidates.clear();
  EXPECT_THROW(CommitteeService(bad, {}), Error);
}

// The committee process dies after the ledger append but before the receipt
// goes out. After restart the ledger is consistent and the voter's re-query
// returns the stored receipt without a second entry.
TEST(Service, CrashBetweenAppendAndReceipt) {
  TempDir dir;
  const auto ledger = dir / "ledger.jsonl";

  pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    transport::LoopbackBroker broker;
    auto c = broker.connect();
    auto v = broker.connect();
    CommitteeService svc({}, ledger);
    svc.attach(*c);
    int appended = 0;
    svc.committee().after_ledger_append = [&](const std::string&) {
      if (++appended == 3) ::_exit(0);
    };
    Rng rng(1);
    for (int i = 0; i < 3; ++i)
      protocol::voter_cast(protocol::Ballot::of("A", "v" + std::to_string(i)), quiet(), *v, rng);
    ::_exit(1);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  ASSERT_EQ(WEXITSTATUS(status), 0);

  EXPECT_TRUE(check_ledger(ledger).ok());
  EXPECT_EQ(scan_ledger(ledger).entries.size(), 3u);

  transport::LoopbackBroker broker;
  auto c = broker.connect();
  auto v = broker.connect();
  CommitteeService svc({}, ledger);
  svc.attach(*c);
  EXPECT_EQ(svc.ledger().size(), 3u);
  // Replay every recorded ciphertext as a voter would after losing the receipt.
  for (const auto& e : svc.ledger().snapshot()) {
    protocol::VoterState saved;
    saved.election_id = "e1";
    saved.session_id = e.session_id;
    saved.e_vote = base64_decode(e.e_vote_b64);
    saved.e_id = base64_decode(e.e_id_b64);
    auto st = protocol::requery_receipt(saved, quiet(), *v);
    EXPECT_TRUE(st.verified()) << st.detail();
  }
  EXPECT_EQ(svc.ledger().size(), 3u);
  EXPECT_TRUE(check_ledger(ledger).ok());
}

TEST(Service, ReplayNeverDuplicatesEntries) {
  TempDir dir;
  const auto ledger = dir / "ledger.jsonl";
  transport::LoopbackBroker broker;
  auto c = broker.connect();
  auto v = broker.connect();
  CommitteeService svc({}, ledger, LedgerOptions{false});
  svc.attach(*c);
  std::string captured;
  broker.set_interceptor([&](const std::string&, std::string& p) {
    if (transport::Envelope::decode(p).msg_type == transport::MsgType::vote_submit) captured = p;
    return true;
  });
  Rng rng(2);
  auto st = protocol::voter_cast(protocol::Ballot::of("B", "v"), quiet(), *v, rng);
  ASSERT_TRUE(st.verified());
  for (int i = 0; i < 1000; ++i) v->publish_raw(transport::topics::vote("e1", st.session_id), captured);
  EXPECT_EQ(svc.ledger().size(), 1u);
  EXPECT_EQ(scan_ledger(ledger).entries.size(), 1u);
  EXPECT_TRUE(check_ledger(ledger).ok());
}

TEST(Service, ServesSeveralChannels) {
  transport::LoopbackBroker a, b;
  auto ca = a.connect(), cb = b.connect();
  auto svc = serve({}, *ca, {});
  svc->attach(*cb);
  auto va = a.connect(), vb = b.connect();
  Rng rng(3);
  EXPECT_TRUE(protocol::voter_cast(protocol::Ballot::of("A", "1"), quiet(), *va, rng).verified());
  EXPECT_TRUE(protocol::voter_cast(protocol::Ballot::of("C", "2"), quiet(), *vb, rng).verified());
  EXPECT_EQ(svc->tally().counts, (std::map<std::string, std::size_t>{{"A", 1}, {"C", 1}}));
  svc->detach_all();
}

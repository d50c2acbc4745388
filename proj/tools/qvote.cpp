// qvote: committee service, voter client, tally, audit, QKD demo and benchmarks.
//
// Exit codes:
//   0  success
//   1  vote failed, receipt mismatch or audit refused
//   2  invalid flags or configuration
//   3  ledger-check found problems
//   4  channel or broker failure
//   5  file I/O failure (ledger, voter state)
//   6  session or file not found

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "qvote/bench.hpp"
#include "qvote/mqtt.hpp"
#include "qvote/protocol.hpp"
#include "qvote/qasm.hpp"
#include "qvote/service.hpp"

using namespace qvote;
using json = nlohmann::json;

namespace {

enum Exit : int { ok = 0, failed = 1, usage = 2, ledger_bad = 3, channel = 4, io = 5, not_found = 6 };

struct Globals {
  std::string broker;
  std::string election = "e1";
  std::optional<std::uint64_t> seed;
  bool json = false;
  std::string ledger = "qvote-ledger.jsonl";
  std::string state = "qvote-voter.json";
  std::vector<std::string> candidates{"A", "B", "C"};
  std::string log_level = "warn";
};

struct NoiseFlags {
  double max = 0.2;
  bool off = false;
  bool eve = false;

  bb84::NoiseSpec spec() const {
    bb84::NoiseSpec n = off ? bb84::NoiseSpec::off() : bb84::NoiseSpec::uniform(max);
    return n.with_eavesdropper(eve);
  }
};

void add_noise_flags(CLI::App* cmd, NoiseFlags& n) {
  cmd->add_option("--noise-max", n.max, "Upper bound of the per-session flip probability")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_flag("--noise-off", n.off, "Noiseless channel");
  cmd->add_flag("--eve", n.eve, "Intercept-resend eavesdropper on the channel");
}

std::uint64_t resolve_seed(const Globals& g) {
  if (g.seed) return *g.seed;
  std::uint64_t s = (std::uint64_t(std::random_device{}()) << 32) ^ std::random_device{}();
  spdlog::info("seed {}", s);
  return s;
}

void emit(const Globals& g, const json& j, const std::string& text) {
  if (g.json)
    std::cout << j.dump(2) << '\n';
  else
    std::cout << text;
}

int error_exit(const Globals& g, int code, const std::string& message) {
  if (g.json)
    std::cout << json{{"error", message}, {"exit_code", code}}.dump(2) << '\n';
  else
    std::cerr << "qvote: " << message << '\n';
  return code;
}

int exit_for(const Error& e) {
  switch (e.code()) {
    case Errc::channel_error: return Exit::channel;
    case Errc::io_error: return Exit::io;
    case Errc::not_found: return Exit::not_found;
    case Errc::bad_key:
    case Errc::invalid_receipt: return Exit::failed;
    default: return Exit::usage;
  }
}

transport::ChannelConfig channel_config(const Globals& g) { return transport::ChannelConfig::from_uri(g.broker); }

protocol::ElectionConfig election_config(const Globals& g) {
  protocol::ElectionConfig e;
  e.election_id = g.election;
  e.candidates = g.candidates;
  e.seed = g.seed.value_or(0);
  e.validate();
  return e;
}

// The voter's view of the network. On loopback an in-process committee
// serves the ledger file for the duration of the command.
struct Connection {
  std::unique_ptr<transport::LoopbackBroker> broker;
  std::unique_ptr<service::CommitteeService> committee;
  std::unique_ptr<transport::Channel> committee_channel;
  std::unique_ptr<transport::Channel> voter;

  ~Connection() {
    if (committee) committee->detach_all();
  }
};

std::unique_ptr<Connection> connect(const Globals& g, const std::string& client_id) {
  auto c = std::make_unique<Connection>();
  auto cfg = channel_config(g);
  if (cfg.is_loopback()) {
    c->broker = std::make_unique<transport::LoopbackBroker>(cfg);
    c->committee = std::make_unique<service::CommitteeService>(election_config(g), g.ledger);
    c->committee_channel = c->broker->connect("committee");
    c->committee->attach(*c->committee_channel);
    c->voter = c->broker->connect(client_id);
  } else {
    c->voter = transport::open_channel(cfg, nullptr, client_id);
  }
  return c;
}

void save_state(const std::string& path, const protocol::VoterState& st) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write voter state " + path);
  out << st.to_json().dump(2) << '\n';
  if (!out) throw Error(Errc::io_error, "cannot write voter state " + path);
}

protocol::VoterState load_state(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::not_found, "voter state " + path + " not found");
  try {
    return protocol::VoterState::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(Errc::parse_error, "voter state " + path + ": " + e.what());
  }
}

json state_summary(const protocol::VoterState& st) {
  return {{"session_id", st.session_id},
          {"election_id", st.election_id},
          {"phase", protocol::to_string(st.phase())},
          {"failure", protocol::to_string(st.failure())},
          {"detail", st.detail()},
          {"attempts", st.transcript.attempts},
          {"receipt", st.remote_receipt ? json(to_hex(*st.remote_receipt)) : json(nullptr)},
          {"local_receipt", st.local_receipt ? json(to_hex(*st.local_receipt)) : json(nullptr)},
          {"verified", st.verified()}};
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      long long v = std::stoll(item, &pos);
      if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(std::size_t(v));
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "expected a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw Error(Errc::invalid_argument, "empty list");
  return out;
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantum-key e-voting: committee service, voter client and benchmarks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  if (const char* env = std::getenv("QVOTE_BROKER_URI"); env && *env) g.broker = env;
  if (g.broker.empty()) g.broker = "loopback";

  app.add_option("--broker", g.broker, "loopback or mqtt://host:port (env QVOTE_BROKER_URI)")->capture_default_str();
  app.add_option("--election", g.election, "Election id")->capture_default_str();
  app.add_option("--seed", g.seed, "RNG seed; drawn and logged when omitted");
  app.add_flag("--json", g.json, "Machine-readable output");
  app.add_option("--ledger", g.ledger, "Ledger file")->capture_default_str();
  app.add_option("--state", g.state, "Voter state file")->capture_default_str();
  app.add_option("--candidates", g.candidates, "Candidate list")->delimiter(',')->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the election committee");
  double serve_seconds = 0;
  serve->add_option("--duration", serve_seconds, "Stop after this many seconds (0 = until signalled)");

  // vote
  auto* vote = app.add_subcommand("vote", "Cast a ballot and verify the receipt");
  std::string candidate, voter_id;
  NoiseFlags vote_noise;
  std::size_t vote_bits = 4, id_bits = 4, retries = 3;
  std::uint64_t shots = 10000;
  int receipt_timeout_ms = 10000, qkd_timeout_ms = 10000;
  std::string session_override;
  vote->add_option("--candidate", candidate, "Vote")->required();
  vote->add_option("--voter-id", voter_id, "Voter identifier")->required();
  add_noise_flags(vote, vote_noise);
  vote->add_option("--vote-key-bits", vote_bits)->capture_default_str()->check(CLI::Range(1, 4096));
  vote->add_option("--id-key-bits", id_bits)->capture_default_str()->check(CLI::Range(1, 4096));
  vote->add_option("--shots", shots)->capture_default_str()->check(CLI::Range(std::uint64_t{1}, std::uint64_t{1'000'000}));
  vote->add_option("--retries", retries, "QKD attempts before giving up")->capture_default_str()->check(CLI::Range(1, 100));
  vote->add_option("--receipt-timeout-ms", receipt_timeout_ms)->capture_default_str()->check(CLI::PositiveNumber);
  vote->add_option("--qkd-timeout-ms", qkd_timeout_ms)->capture_default_str()->check(CLI::PositiveNumber);
  vote->add_option("--session", session_override, "Use this session id instead of a random one");

  // verify
  auto* verify = app.add_subcommand("verify", "Recompute the receipt from the voter state and compare");
  bool requery = false;
  verify->add_flag("--requery", requery, "Ask the committee for its stored receipt again");

  // tally
  app.add_subcommand("tally", "Count the votes in the ledger");

  // audit
  auto* audit = app.add_subcommand("audit", "Reveal the identity key of a recorded session");
  std::string audit_key, request_session, request_reason = "dispute";
  audit->add_option("--key", audit_key, "Identity key bits (default: from the voter state)");
  audit->add_option("--request", request_session, "Committee side: ask the voter of SESSION to reveal");
  audit->add_option("--reason", request_reason)->capture_default_str();

  // qkd-demo
  auto* demo = app.add_subcommand("qkd-demo", "Print a step-by-step BB84 trace");
  std::size_t demo_length = 8;
  NoiseFlags demo_noise;
  demo_noise.off = false;
  std::uint64_t demo_shots = 10000;
  bool demo_qasm = false;
  demo->add_option("--raw-length", demo_length)->capture_default_str()->check(CLI::Range(1, 4096));
  add_noise_flags(demo, demo_noise);
  demo->add_option("--shots", demo_shots)->capture_default_str()->check(CLI::Range(std::uint64_t{1}, std::uint64_t{1'000'000}));
  demo->add_flag("--qasm", demo_qasm, "Also print the OpenQASM preparation");

  // bench-throughput
  auto* bt = app.add_subcommand("bench-throughput", "Loopback pipeline throughput");
  bench::ThroughputConfig tcfg;
  std::string bench_ledger;
  bool no_fsync = false;
  bt->add_option("--votes", tcfg.votes)->capture_default_str()->check(CLI::PositiveNumber);
  bt->add_option("--workers", tcfg.workers)->capture_default_str()->check(CLI::Range(1, 256));
  bt->add_option("--shots", tcfg.shots)->capture_default_str()->check(CLI::PositiveNumber);
  bt->add_option("--vote-key-bits", tcfg.vote_key_bits)->capture_default_str()->check(CLI::Range(1, 4096));
  bt->add_option("--id-key-bits", tcfg.id_key_bits)->capture_default_str()->check(CLI::Range(1, 4096));
  bt->add_option("--ledger-out", bench_ledger, "Write per-worker ledgers to PATH.wN (overwritten)");
  bt->add_flag("--no-fsync", no_fsync, "Skip fsync on ledger appends");

  // bench-sweep
  auto* bs = app.add_subcommand("bench-sweep", "Key-size stability sweep");
  std::string sizes = "2,4,8,16,32";
  bench::SweepConfig scfg;
  NoiseFlags sweep_noise;
  bool csv = false, shots_mode = false;
  std::string shots_list = "1,100,10000";
  bs->add_option("--sizes", sizes, "Raw lengths")->capture_default_str();
  bs->add_option("--trials", scfg.trials)->capture_default_str()->check(CLI::PositiveNumber);
  add_noise_flags(bs, sweep_noise);
  bs->add_option("--shots", scfg.shots)->capture_default_str()->check(CLI::PositiveNumber);
  bs->add_option("--retries", scfg.max_attempts)->capture_default_str()->check(CLI::Range(1, 100));
  bs->add_option("--threads", scfg.threads, "0 = all cores")->capture_default_str();
  bs->add_flag("--csv", csv, "CSV output");
  bs->add_flag("--shots-sensitivity", shots_mode, "Compare shot counts instead of key sizes");
  bs->add_option("--shots-list", shots_list)->capture_default_str();

  // ledger-check
  app.add_subcommand("ledger-check", "Recompute every receipt and check ledger structure");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? Exit::ok : Exit::usage;
  }

  spdlog::set_default_logger(spdlog::stderr_color_mt("qvote"));
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    auto cfg = channel_config(g);

    if (*serve) {
      auto election = election_config(g);
      if (cfg.is_loopback()) {
        service::CommitteeService svc(election, g.ledger);
        emit(g, {{"binding", "loopback"}, {"ledger", g.ledger}, {"entries", svc.ledger().size()}},
             "loopback committee ready on " + g.ledger + " (" + std::to_string(svc.ledger().size()) +
                 " entries); voters in this mode embed it per command\n");
        return Exit::ok;
      }
      auto channel = transport::open_channel(cfg, nullptr, "qvote-committee-" + g.election);
      auto svc = service::serve(election, *channel, g.ledger);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("committee serving election {} on {}", g.election, g.broker);
      if (!g.json) std::cout << "serving election " << g.election << " on " << g.broker << std::endl;
      const auto start = std::chrono::steady_clock::now();
      while (!g_stop) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        if (serve_seconds > 0 &&
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() >= serve_seconds)
          break;
        if (auto* m = dynamic_cast<mqtt::MqttChannel*>(channel.get()); m && !m->connected())
          return error_exit(g, Exit::channel, "lost connection to " + g.broker);
      }
      svc->detach_all();
      auto t = svc->tally();
      emit(g, {{"stopped", true}, {"entries", svc->ledger().size()}, {"tally", t.to_json()}},
           "stopped with " + std::to_string(svc->ledger().size()) + " ledger entries\n");
      return Exit::ok;
    }

    if (*vote) {
      protocol::VoterConfig vc;
      vc.election_id = g.election;
      vc.noise = vote_noise.spec();
      vc.qkd.shots = shots;
      vc.qkd.max_attempts = retries;
      vc.vote_key_bits = vote_bits;
      vc.id_key_bits = id_bits;
      vc.receipt_timeout = std::chrono::milliseconds(receipt_timeout_ms);
      vc.qkd_timeout = std::chrono::milliseconds(qkd_timeout_ms);
      if (!session_override.empty()) vc.session_id = session_override;
      auto ballot = protocol::Ballot::of(candidate, voter_id);
      vc.validate();
      ballot.validate();

      Rng rng(resolve_seed(g));
      auto conn = connect(g, "qvote-voter");
      auto st = protocol::voter_cast(ballot, vc, *conn->voter, rng);
      save_state(g.state, st);
      const std::string receipt = st.remote_receipt ? to_hex(*st.remote_receipt) : "-";
      if (st.verified()) {
        emit(g, state_summary(st), "session " + st.session_id + "\nreceipt " + receipt + "\n");
        return Exit::ok;
      }
      emit(g, state_summary(st),
           "session " + st.session_id + "\nvote failed (" + std::string(protocol::to_string(st.failure())) +
               "): " + st.detail() + "\n");
      if (st.failure() == protocol::FailureReason::channel) return Exit::channel;
      return Exit::failed;
    }

    if (*verify) {
      auto saved = load_state(g.state);
      if (requery) {
        protocol::VoterConfig vc;
        vc.election_id = saved.election_id;
        auto conn = connect(g, "qvote-verify");
        auto st = protocol::requery_receipt(saved, vc, *conn->voter);
        save_state(g.state, st);
        emit(g, state_summary(st),
             st.verified() ? "receipt verified " + to_hex(*st.remote_receipt) + "\n"
                           : "receipt NOT verified: " + st.detail() + "\n");
        return st.verified() ? Exit::ok : Exit::failed;
      }
      if (saved.e_vote.empty() || !saved.remote_receipt) {
        return error_exit(g, Exit::failed, "voter state has no committee receipt to compare against");
      }
      const Digest local = crypto::receipt_hash(saved.e_vote, saved.e_id);
      const bool match = digest_equal(local, *saved.remote_receipt);
      emit(g,
           {{"session_id", saved.session_id},
            {"local_receipt", to_hex(local)},
            {"receipt", to_hex(*saved.remote_receipt)},
            {"match", match}},
           match ? "receipt verified " + to_hex(local) + "\n"
                 : "receipt mismatch: local " + to_hex(local) + " committee " + to_hex(*saved.remote_receipt) + "\n");
      return match ? Exit::ok : Exit::failed;
    }

    if (app.got_subcommand("tally")) {
      auto r = service::tally(std::filesystem::path(g.ledger), g.candidates);
      std::ostringstream text;
      for (const auto& [k, v] : r.counts) text << k << ' ' << v << '\n';
      text << "invalid " << r.invalid << "\ntotal " << r.total_sessions << "\n";
      emit(g, r.to_json(), text.str());
      return Exit::ok;
    }

    if (*audit) {
      if (!request_session.empty()) {
        auto conn = connect(g, "qvote-committee-audit");
        if (conn->committee) {
          conn->committee->request_audit(request_session, request_reason);
        } else {
          protocol::Committee::Outgoing out{
              transport::topics::audit(g.election, request_session),
              transport::Envelope{transport::Envelope::kVersion, g.election, request_session,
                                  transport::MsgType::audit_request, transport::now_ms(),
                                  {{"sender", "committee"}, {"reason", request_reason}}}};
          conn->voter->publish(out.topic, out.envelope);
          if (auto* m = dynamic_cast<mqtt::MqttChannel*>(conn->voter.get())) m->flush(std::chrono::seconds(5));
        }
        emit(g, {{"requested", true}, {"session_id", request_session}},
             "audit requested for session " + request_session + "\n");
        return Exit::ok;
      }
      auto saved = load_state(g.state);
      BitString key = audit_key.empty() ? saved.id_key : BitString::from_string(audit_key);
      protocol::VoterConfig vc;
      vc.election_id = saved.election_id;
      auto conn = connect(g, "qvote-audit");
      auto outcome = protocol::submit_audit(saved, key, vc, *conn->voter);
      emit(g, {{"session_id", saved.session_id}, {"revealed", outcome.revealed}, {"reason", outcome.reason}},
           outcome.revealed ? "identity revealed for session " + saved.session_id + "\n"
                            : "audit refused: " + outcome.reason + "\n");
      return outcome.revealed ? Exit::ok : Exit::failed;
    }

    if (*demo) {
      bb84::QkdConfig qc;
      qc.raw_length = demo_length;
      qc.shots = demo_shots;
      qc.max_attempts = 1;
      const auto noise = demo_noise.spec();
      const std::uint64_t seed = resolve_seed(g);
      bb84::SessionTranscript t;
      try {
        t = bb84::run_session(qc, noise, seed);
      } catch (const bb84::SessionFailed& f) {
        t = f.transcript();
      }
      std::string matches;
      for (std::size_t i = 0; i < t.voter_bases.size(); ++i)
        matches += t.voter_bases[i] == t.committee_bases[i] ? '|' : '.';
      std::ostringstream os;
      os << "step 1  voter bits          " << t.voter_bits.to_string() << '\n'
         << "step 2  voter bases         " << bb84::to_string(t.voter_bases) << '\n'
         << "step 3  committee bases     " << bb84::to_string(t.committee_bases) << '\n'
         << "step 4  measurements        " << t.committee_measurements.to_string() << '\n'
         << "step 5  basis matches       " << matches << '\n'
         << "step 6  sifted key (voter)  " << t.voter_key.bits.to_string() << '\n'
         << "        sifted key (comm.)  " << t.committee_key.bits.to_string() << '\n'
         << "result  " << (t.confirmed ? "confirmed" : "not confirmed") << ", noise p="
         << (t.noise_draw ? std::to_string(*t.noise_draw) : "-") << (noise.eavesdropper ? ", eavesdropper" : "")
         << ", seed " << seed << '\n';
      json j = {{"seed", seed},
                {"raw_length", demo_length},
                {"voter_bits", t.voter_bits.to_string()},
                {"voter_bases", bb84::to_string(t.voter_bases)},
                {"committee_bases", bb84::to_string(t.committee_bases)},
                {"measurements", t.committee_measurements.to_string()},
                {"matches", matches},
                {"voter_key", t.voter_key.bits.to_string()},
                {"committee_key", t.committee_key.bits.to_string()},
                {"confirmed", t.confirmed},
                {"noise_draw", t.noise_draw ? json(*t.noise_draw) : json(nullptr)}};
      if (demo_qasm) {
        const std::string q = qasm::emit_prep(bb84::prepare_frame(t.voter_bits, t.voter_bases));
        os << '\n' << q;
        j["qasm"] = q;
      }
      emit(g, j, os.str());
      return Exit::ok;
    }

    if (*bt) {
      tcfg.seed = resolve_seed(g);
      tcfg.candidates = g.candidates;
      tcfg.ledger_path = bench_ledger;
      tcfg.fsync = !no_fsync;
      auto r = bench::throughput_bench(tcfg);
      emit(g, r.to_json(), r.to_table());
      return r.failed == 0 ? Exit::ok : Exit::failed;
    }

    if (*bs) {
      scfg.noise = sweep_noise.spec();
      scfg.seed = resolve_seed(g);
      if (shots_mode) {
        std::vector<std::uint64_t> list;
        for (auto v : parse_sizes(shots_list)) list.push_back(v);
        auto pts = bench::shots_sensitivity(list, scfg.trials, parse_sizes(sizes).front(), scfg.noise, scfg.seed);
        std::ostringstream os;
        if (csv) {
          os << "shots,trials,sift_agreement_rate,mismatched_one_rate\n";
          for (const auto& p : pts)
            os << p.shots << ',' << p.trials << ',' << p.sift_agreement_rate << ',' << p.mismatched_one_rate << '\n';
        } else {
          for (const auto& p : pts)
            os << "shots " << p.shots << "  agreement " << p.sift_agreement_rate << "  mismatched ones "
               << p.mismatched_one_rate << '\n';
        }
        emit(g, bench::to_json(pts), os.str());
        return Exit::ok;
      }
      scfg.sizes = parse_sizes(sizes);
      auto r = bench::key_size_sweep(scfg);
      emit(g, r.to_json(), csv ? r.to_csv() : r.to_table());
      return Exit::ok;
    }

    if (app.got_subcommand("ledger-check")) {
      auto r = service::check_ledger(g.ledger);
      std::ostringstream os;
      os << (r.ok() ? "ledger ok" : "ledger has problems") << ": " << r.entries << " entries\n";
      for (const auto& p : r.problems) os << "  " << p << '\n';
      emit(g, r.to_json(), os.str());
      return r.ok() ? Exit::ok : Exit::ledger_bad;
    }
  } catch (const ParseError& e) {
    return error_exit(g, Exit::usage, e.what());
  } catch (const Error& e) {
    return error_exit(g, exit_for(e), e.what());
  } catch (const std::exception& e) {
    return error_exit(g, Exit::usage, e.what());
  }
  return Exit::usage;
}

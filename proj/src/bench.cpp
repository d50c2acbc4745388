#include "qvote/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "qvote/crypto.hpp"
#include "qvote/encoding.hpp"
#include "qvote/service.hpp"

namespace qvote::bench {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

std::size_t thread_count(std::size_t requested, std::size_t work) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, work));
}

// Calls fn(worker, begin, end) over contiguous chunks of [0, total).
template <class Fn>
void parallel_chunks(std::size_t total, std::size_t threads, Fn fn) {
  threads = thread_count(threads, total);
  std::vector<std::thread> pool;
  const std::size_t chunk = (total + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(total, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([=, &fn] { fn(w, begin, end); });
  }
  for (auto& t : pool) t.join();
}

json noise_json(const bb84::NoiseSpec& n) {
  return {{"kind", n.kind == bb84::NoiseSpec::Kind::fixed ? "fixed" : "uniform"},
          {"level", n.level},
          {"eavesdropper", n.eavesdropper}};
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Right-aligned plain-text table.
std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      os << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    os << '\n';
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  line(rule);
  for (const auto& r : rows) line(r);
  return os.str();
}

// log C(n, k)
double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(double(n) + 1) - std::lgamma(double(k) + 1) - std::lgamma(double(n - k) + 1);
}

}  // namespace

void ThroughputConfig::validate() const {
  if (votes == 0) throw Error(Errc::invalid_argument, "votes must be positive");
  if (workers == 0) throw Error(Errc::invalid_argument, "workers must be positive");
  if (vote_key_bits == 0 || id_key_bits == 0) throw Error(Errc::invalid_argument, "key lengths must be positive");
  if (shots == 0) throw Error(Errc::invalid_argument, "shots must be positive");
  if (candidates.empty()) throw Error(Errc::invalid_argument, "candidate list is empty");
}

json ThroughputReport::to_json() const {
  return {{"votes", votes},
          {"verified", verified},
          {"failed", failed},
          {"workers", workers},
          {"seed", seed},
          {"wall_seconds", wall_seconds},
          {"votes_per_second", votes_per_second},
          {"reference_votes_per_second", kReferenceVotesPerSecond},
          {"stages_seconds",
           {{"qkd", stages.qkd}, {"encrypt", stages.encrypt}, {"transport", stages.transport}, {"ledger", stages.ledger}}},
          {"tally", tally},
          {"outcome_digest", outcome_digest}};
}

std::string ThroughputReport::to_table() const {
  std::vector<std::vector<std::string>> rows;
  auto per_vote = [&](double s) { return fixed(votes ? s / double(votes) * 1e6 : 0.0, 2); };
  rows.push_back({"qkd", fixed(stages.qkd, 4), per_vote(stages.qkd)});
  rows.push_back({"encrypt", fixed(stages.encrypt, 4), per_vote(stages.encrypt)});
  rows.push_back({"transport", fixed(stages.transport, 4), per_vote(stages.transport)});
  rows.push_back({"ledger", fixed(stages.ledger, 4), per_vote(stages.ledger)});
  std::ostringstream os;
  os << "votes " << votes << " (verified " << verified << ", failed " << failed << "), workers " << workers
     << ", seed " << seed << "\n"
     << "wall " << fixed(wall_seconds, 4) << " s, " << fixed(votes_per_second, 1) << " votes/s (reference ~"
     << fixed(kReferenceVotesPerSecond, 0) << ")\n"
     << render_table({"stage", "total_s", "per_vote_us"}, rows);
  return os.str();
}

ThroughputReport throughput_bench(const ThroughputConfig& config) {
  config.validate();
  spdlog::info("throughput bench: {} votes, {} worker(s), seed {}", config.votes, config.workers, config.seed);

  struct Outcome {
    std::string session;
    std::string receipt;
    bool verified = false;
  };
  std::vector<Outcome> outcomes(config.votes);
  const std::size_t workers = std::min(config.workers, config.votes);
  std::vector<protocol::StageTimes> stage_sums(workers);
  std::vector<std::map<std::string, std::size_t>> tallies(workers);

  protocol::ElectionConfig election;
  election.election_id = "bench";
  election.candidates = config.candidates;
  election.seed = config.seed;

  auto worker = [&](std::size_t w) {
    std::filesystem::path path;
    if (!config.ledger_path.empty()) {
      path = config.ledger_path;
      path += ".w" + std::to_string(w);
      std::filesystem::remove(path);
    }
    transport::LoopbackBroker broker;
    service::CommitteeService svc(election, path, service::LedgerOptions{config.fsync});
    auto committee_channel = broker.connect("committee");
    svc.attach(*committee_channel);
    auto voter_channel = broker.connect("voter-" + std::to_string(w));

    for (std::size_t i = w; i < config.votes; i += workers) {
      Rng rng(Rng::derive(config.seed, i));
      const std::string& candidate = config.candidates[rng() % config.candidates.size()];
      protocol::VoterConfig vc;
      vc.election_id = election.election_id;
      vc.noise = bb84::NoiseSpec::off();
      vc.qkd.shots = config.shots;
      vc.vote_key_bits = config.vote_key_bits;
      vc.id_key_bits = config.id_key_bits;
      vc.session_id = protocol::make_session_id(rng);
      protocol::StageTimes t;
      vc.timing = &t;

      const double ledger_before = svc.committee().ledger_seconds();
      auto st = protocol::voter_cast(protocol::Ballot::of(candidate, "voter-" + std::to_string(i)), vc,
                                     *voter_channel, rng);
      const double ledger = svc.committee().ledger_seconds() - ledger_before;
      t.ledger = ledger;
      t.transport = std::max(0.0, t.transport - ledger);
      stage_sums[w] += t;
      outcomes[i] = {st.session_id, st.remote_receipt ? to_hex(*st.remote_receipt) : "", st.verified()};
    }
    svc.detach_all();
    tallies[w] = svc.tally().counts;
  };

  const auto t0 = Clock::now();
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  const double wall = std::chrono::duration<double>(Clock::now() - t0).count();

  ThroughputReport r;
  r.votes = config.votes;
  r.workers = workers;
  r.seed = config.seed;
  r.wall_seconds = wall;
  r.votes_per_second = wall > 0 ? double(config.votes) / wall : 0.0;
  for (const auto& s : stage_sums) r.stages += s;
  for (const auto& t : tallies)
    for (const auto& [k, v] : t) r.tally[k] += v;
  std::string digest_input;
  for (const auto& o : outcomes) {
    (o.verified ? r.verified : r.failed)++;
    digest_input += o.session + ":" + o.receipt + ":" + (o.verified ? "1" : "0") + "\n";
  }
  r.outcome_digest = to_hex(sha256(digest_input));
  return r;
}

void SweepConfig::validate() const {
  if (sizes.empty()) throw Error(Errc::invalid_argument, "sweep needs at least one raw length");
  for (auto n : sizes)
    if (n == 0) throw Error(Errc::invalid_argument, "raw lengths must be positive");
  if (trials == 0) throw Error(Errc::invalid_argument, "trials must be positive");
  if (shots == 0) throw Error(Errc::invalid_argument, "shots must be positive");
  if (max_attempts == 0) throw Error(Errc::invalid_argument, "max_attempts must be positive");
  noise.validate();
}

const SweepPoint* SweepReport::at(std::size_t raw_length) const {
  for (const auto& p : points)
    if (p.raw_length == raw_length) return &p;
  return nullptr;
}

json SweepReport::to_json() const {
  json pts = json::array();
  for (const auto& p : points)
    pts.push_back({{"raw_length", p.raw_length},
                   {"trials", p.trials},
                   {"first_attempt_success_rate", p.first_attempt_success_rate},
                   {"analytic_success_rate", p.analytic_success_rate},
                   {"mean_attempts", p.mean_attempts},
                   {"mean_sifted_bits", p.mean_sifted_bits},
                   {"end_to_end_vote_accuracy", p.end_to_end_vote_accuracy},
                   {"sifted_target_success_rate", p.sifted_target_success_rate},
                   {"analytic_sifted_target_rate", p.analytic_sifted_target_rate}});
  return {{"noise", noise_json(noise)},
          {"shots", shots},
          {"seed", seed},
          {"max_attempts", max_attempts},
          {"points", pts}};
}

std::string SweepReport::to_table() const {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : points)
    rows.push_back({std::to_string(p.raw_length), std::to_string(p.trials), fixed(p.first_attempt_success_rate, 4),
                    fixed(p.analytic_success_rate, 4), fixed(p.mean_attempts, 3), fixed(p.mean_sifted_bits, 2),
                    fixed(p.end_to_end_vote_accuracy, 4), fixed(p.sifted_target_success_rate, 4),
                    fixed(p.analytic_sifted_target_rate, 4)});
  return render_table({"n", "trials", "stable", "analytic", "attempts", "sifted", "e2e_acc", "sifted_n", "analytic_n"},
                      rows);
}

std::string SweepReport::to_csv() const {
  std::ostringstream os;
  os << "raw_length,trials,first_attempt_success_rate,analytic_success_rate,mean_attempts,mean_sifted_bits,"
        "end_to_end_vote_accuracy,sifted_target_success_rate,analytic_sifted_target_rate\n";
  os << std::setprecision(10);
  for (const auto& p : points)
    os << p.raw_length << ',' << p.trials << ',' << p.first_attempt_success_rate << ',' << p.analytic_success_rate
       << ',' << p.mean_attempts << ',' << p.mean_sifted_bits << ',' << p.end_to_end_vote_accuracy << ','
       << p.sifted_target_success_rate << ',' << p.analytic_sifted_target_rate << '\n';
  return os.str();
}

SweepReport key_size_sweep(const SweepConfig& config) {
  config.validate();
  spdlog::info("key-size sweep: {} trials per point, seed {}", config.trials, config.seed);
  SweepReport report;
  report.noise = config.noise;
  report.shots = config.shots;
  report.seed = config.seed;
  report.max_attempts = config.max_attempts;

  static const std::vector<std::string> kVotes{"A", "B", "C"};

  for (std::size_t n : config.sizes) {
    const std::uint64_t point_seed = Rng::derive(config.seed, n);
    struct Acc {
      std::size_t stable = 0, attempts = 0, sifted = 0, accurate = 0, target = 0;
    };
    std::vector<Acc> acc(thread_count(config.threads, config.trials));

    parallel_chunks(config.trials, config.threads, [&](std::size_t w, std::size_t begin, std::size_t end) {
      Acc& a = acc[w];
      bb84::QkdConfig qkd;
      qkd.raw_length = n;
      qkd.shots = config.shots;
      qkd.max_attempts = config.max_attempts;
      for (std::size_t t = begin; t < end; ++t) {
        const std::uint64_t trial_seed = Rng::derive(point_seed, t);
        Rng voter(Rng::derive(trial_seed, 0));
        bb84::LocalCommitteePeer peer(config.noise, config.shots, Rng::derive(trial_seed, 1));
        bb84::SessionTranscript tr;
        try {
          tr = bb84::run_session(qkd, peer, voter);
        } catch (const bb84::SessionFailed& f) {
          tr = f.transcript();
        }
        const auto& first = tr.history.front();
        a.stable += first.outcome == bb84::AttemptOutcome::confirmed;
        a.sifted += first.sifted_bits;
        a.attempts += tr.attempts;
        if (tr.confirmed) {
          const Bytes vote = to_bytes(kVotes[voter() % kVotes.size()]);
          const Bytes cipher = crypto::xor_apply(vote, tr.voter_key.bits);
          a.accurate += crypto::xor_apply(cipher, tr.committee_key.bits) == vote;
        }

        Rng r(Rng::derive(trial_seed, 2));
        auto va = bb84::VoterAttempt::generate(4 * n, r);
        auto ca = bb84::CommitteeAttempt::receive(va.frame(), config.noise, config.shots, r);
        auto vk = bb84::sift(va.bases, ca.bases, va.bits);
        auto ck = ca.sift_with(va.bases);
        a.target += vk.size() >= n && vk.bits.slice(0, n) == ck.bits.slice(0, n);
      }
    });

    Acc total;
    for (const auto& a : acc) {
      total.stable += a.stable;
      total.attempts += a.attempts;
      total.sifted += a.sifted;
      total.accurate += a.accurate;
      total.target += a.target;
    }
    const double trials = double(config.trials);
    SweepPoint p;
    p.raw_length = n;
    p.trials = config.trials;
    p.first_attempt_success_rate = double(total.stable) / trials;
    p.analytic_success_rate = analytic_success(n, config.noise);
    p.mean_attempts = double(total.attempts) / trials;
    p.mean_sifted_bits = double(total.sifted) / trials;
    p.end_to_end_vote_accuracy = double(total.accurate) / trials;
    p.sifted_target_success_rate = double(total.target) / trials;
    p.analytic_sifted_target_rate = analytic_sifted_target(n, config.noise);
    report.points.push_back(p);
  }
  return report;
}

double expected_correct_power(std::size_t k, const bb84::NoiseSpec& noise) {
  noise.validate();
  const double a = noise.eavesdropper ? 0.75 : 1.0;
  const double b = noise.eavesdropper ? 0.5 : 1.0;
  const double kk = double(k);
  if (noise.kind == bb84::NoiseSpec::Kind::fixed || noise.level == 0.0) {
    const double p = noise.kind == bb84::NoiseSpec::Kind::fixed ? noise.level : 0.0;
    return std::pow(a - b * p, kk);
  }
  const double q = noise.level;
  return (std::pow(a, kk + 1) - std::pow(a - b * q, kk + 1)) / (b * q * (kk + 1));
}

double analytic_success(std::size_t n, const bb84::NoiseSpec& noise) {
  if (n == 0) throw Error(Errc::invalid_argument, "raw length must be positive");
  const double log_half = std::log(0.5) * double(n);
  double sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) sum += std::exp(log_choose(n, k) + log_half) * expected_correct_power(k, noise);
  return sum;
}

double analytic_sifted_target(std::size_t n, const bb84::NoiseSpec& noise) {
  if (n == 0) throw Error(Errc::invalid_argument, "target length must be positive");
  const std::size_t raw = 4 * n;
  const double log_half = std::log(0.5) * double(raw);
  double enough = 0.0;
  for (std::size_t k = n; k <= raw; ++k) enough += std::exp(log_choose(raw, k) + log_half);
  return enough * expected_correct_power(n, noise);
}

std::vector<ShotsPoint> shots_sensitivity(const std::vector<std::uint64_t>& shots, std::size_t trials,
                                          std::size_t raw_length, const bb84::NoiseSpec& noise, std::uint64_t seed) {
  if (trials == 0 || raw_length == 0) throw Error(Errc::invalid_argument, "trials and raw length must be positive");
  std::vector<ShotsPoint> out;
  for (std::uint64_t s : shots) {
    if (s == 0) throw Error(Errc::invalid_argument, "shots must be positive");
    std::size_t agree = 0, mismatched = 0, ones = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng(Rng::derive(seed, t));
      auto va = bb84::VoterAttempt::generate(raw_length, rng);
      auto ca = bb84::CommitteeAttempt::receive(va.frame(), noise, s, rng);
      agree += bb84::sift(va.bases, ca.bases, va.bits) == ca.sift_with(va.bases);
      for (std::size_t i = 0; i < raw_length; ++i) {
        if (va.bases[i] == ca.bases[i]) continue;
        ++mismatched;
        ones += ca.measurements[i];
      }
    }
    out.push_back({s, trials, double(agree) / double(trials), mismatched ? double(ones) / double(mismatched) : 0.0});
  }
  return out;
}

json to_json(const std::vector<ShotsPoint>& points) {
  json out = json::array();
  for (const auto& p : points)
    out.push_back({{"shots", p.shots},
                   {"trials", p.trials},
                   {"sift_agreement_rate", p.sift_agreement_rate},
                   {"mismatched_one_rate", p.mismatched_one_rate}});
  return out;
}

}  // namespace qvote::bench

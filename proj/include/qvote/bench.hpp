#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qvote/bb84.hpp"
#include "qvote/protocol.hpp"

namespace qvote::bench {

/// Published loopback figure: about 1e-4 s per vote.
inline constexpr double kReferenceVotesPerSecond = 10'000.0;

struct ThroughputConfig {
  std::size_t votes = 10'000;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  std::size_t vote_key_bits = 4;
  std::size_t id_key_bits = 4;
  std::uint64_t shots = 10'000;
  std::vector<std::string> candidates{"A", "B", "C"};
  /// Empty keeps the ledger in memory; otherwise worker w writes "<path>.w<w>".
  std::filesystem::path ledger_path;
  bool fsync = true;

  void validate() const;
};

struct ThroughputReport {
  std::size_t votes = 0;
  std::size_t verified = 0;
  std::size_t failed = 0;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  double votes_per_second = 0.0;
  /// Summed over all votes; with several workers the sum may exceed wall time.
  protocol::StageTimes stages;
  std::map<std::string, std::size_t> tally;
  /// SHA-256 over every (session, receipt, outcome) in vote order; equal for
  /// equal seeds regardless of timing or worker count.
  std::string outcome_digest;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

/// Runs full voter/committee sessions over loopback with a noiseless channel.
/// Each worker gets its own broker, committee and ledger.
ThroughputReport throughput_bench(const ThroughputConfig& config);

struct SweepConfig {
  std::vector<std::size_t> sizes{2, 4, 8, 16, 32};
  std::size_t trials = 100'000;
  bb84::NoiseSpec noise;  // default p ~ U(0, 0.2)
  std::uint64_t shots = 10'000;
  std::size_t max_attempts = 3;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0 = hardware concurrency

  void validate() const;
};

struct SweepPoint {
  std::size_t raw_length = 0;
  std::size_t trials = 0;
  /// First attempt yields a non-empty sifted key with no transmission errors.
  double first_attempt_success_rate = 0.0;
  double analytic_success_rate = 0.0;
  double mean_attempts = 0.0;
  double mean_sifted_bits = 0.0;  // first attempt
  /// Session confirmed and a random candidate survives encrypt/decrypt.
  double end_to_end_vote_accuracy = 0.0;
  /// Sifted-length reading: raw length 4n, at least n sifted bits, first n error-free.
  double sifted_target_success_rate = 0.0;
  double analytic_sifted_target_rate = 0.0;
};

struct SweepReport {
  bb84::NoiseSpec noise;
  std::uint64_t shots = 0;
  std::uint64_t seed = 0;
  std::size_t max_attempts = 0;
  std::vector<SweepPoint> points;

  const SweepPoint* at(std::size_t raw_length) const;
  nlohmann::json to_json() const;
  std::string to_table() const;
  std::string to_csv() const;
};

/// Trials run in parallel with per-trial seeds, so results do not depend on
/// the thread count.
SweepReport key_size_sweep(const SweepConfig& config);

/// Probability that a first attempt over raw length n yields a non-empty,
/// error-free sifted key: sum_k C(n,k) 2^-n E[c(p)^k] with c(p) = 1 - p, or
/// 3/4 - p/2 under intercept-resend.
double analytic_success(std::size_t n, const bb84::NoiseSpec& noise);
/// P(at least n of 4n bits sift) * E[c(p)^n].
double analytic_sifted_target(std::size_t n, const bb84::NoiseSpec& noise);
/// E[c(p)^k] for the configured noise distribution.
double expected_correct_power(std::size_t k, const bb84::NoiseSpec& noise);

struct ShotsPoint {
  std::uint64_t shots = 0;
  std::size_t trials = 0;
  /// Fraction of sessions whose two sifted keys agree exactly.
  double sift_agreement_rate = 0.0;
  /// Fraction of ones among mismatched-basis measurements.
  double mismatched_one_rate = 0.0;
};

std::vector<ShotsPoint> shots_sensitivity(const std::vector<std::uint64_t>& shots, std::size_t trials,
                                          std::size_t raw_length, const bb84::NoiseSpec& noise, std::uint64_t seed);
nlohmann::json to_json(const std::vector<ShotsPoint>& points);

}  // namespace qvote::bench

#include "qvote/bb84.hpp"

#include <cmath>
#include <limits>

#include "qvote/crypto.hpp"
#include "qvote/qasm.hpp"

namespace qvote::bb84 {

char to_char(Basis basis) noexcept { return basis == Basis::Rectilinear ? 'R' : 'D'; }

Basis basis_from_char(char c) {
  if (c == 'R') return Basis::Rectilinear;
  if (c == 'D') return Basis::Diagonal;
  throw Error(Errc::invalid_argument, std::string("unknown basis '") + c + "'");
}

std::string to_string(std::span<const Basis> bases) {
  std::string s;
  s.reserve(bases.size());
  for (Basis b : bases) s.push_back(to_char(b));
  return s;
}

Bases bases_from_string(std::string_view s) {
  Bases out;
  out.reserve(s.size());
  for (char c : s) out.push_back(basis_from_char(c));
  return out;
}

std::string_view to_string(AttemptOutcome outcome) noexcept {
  switch (outcome) {
    case AttemptOutcome::confirmed: return "confirmed";
    case AttemptOutcome::short_sift: return "short-sift";
    case AttemptOutcome::digest_mismatch: return "digest-mismatch";
  }
  return "unknown";
}

PreparedFrame::PreparedFrame(std::vector<QubitPrep> preps) : preps_(std::move(preps)) {
  if (preps_.empty()) throw Error(Errc::invalid_argument, "prepared frame must hold at least one qubit");
  for (const auto& p : preps_)
    if (p.bit > 1) throw Error(Errc::invalid_argument, "qubit preparation bit must be 0 or 1");
}

void NoiseModel::validate() const {
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
    throw Error(Errc::invalid_argument, "flip probability must lie in [0, 1]");
}

void NoiseSpec::validate() const {
  if (!(level >= 0.0 && level <= 1.0)) throw Error(Errc::invalid_argument, "noise level must lie in [0, 1]");
}

NoiseModel NoiseSpec::draw(Rng& rng) const {
  validate();
  double p = kind == Kind::fixed ? level : level * rng.uniform();
  return {p, eavesdropper};
}

void QkdConfig::validate() const {
  if (raw_length == 0) throw Error(Errc::invalid_argument, "raw_length must be >= 1");
  if (shots == 0) throw Error(Errc::invalid_argument, "shots must be >= 1");
  if (max_attempts == 0) throw Error(Errc::invalid_argument, "max_attempts must be >= 1");
  if (min_sifted_bits > raw_length) throw Error(Errc::invalid_argument, "min_sifted_bits must not exceed raw_length");
}

SessionFailed::SessionFailed(SessionTranscript transcript)
    : Error(Errc::session_failed,
            "QKD session failed after " + std::to_string(transcript.attempts) + " attempt(s)"),
      transcript_(std::move(transcript)) {}

BitString random_bits(std::size_t n, Rng& rng) {
  if (n == 0) throw Error(Errc::invalid_argument, "random_bits: n must be >= 1");
  BitString out(n);
  for (std::size_t i = 0; i < n; ++i) out.set(i, rng.bit());
  return out;
}

Bases random_bases(std::size_t n, Rng& rng) {
  if (n == 0) throw Error(Errc::invalid_argument, "random_bases: n must be >= 1");
  Bases out(n);
  for (auto& b : out) b = rng.bit() ? Basis::Diagonal : Basis::Rectilinear;
  return out;
}

PreparedFrame prepare_frame(const BitString& bits, std::span<const Basis> bases) {
  if (bits.size() != bases.size()) throw Error(Errc::invalid_argument, "prepare_frame: bits and bases differ in length");
  std::vector<QubitPrep> preps(bits.size());
  for (std::size_t i = 0; i < preps.size(); ++i) preps[i] = {bits[i], bases[i]};
  return PreparedFrame(std::move(preps));
}

PreparedFrame apply_channel(const PreparedFrame& frame, const NoiseModel& noise, Rng& rng) {
  noise.validate();
  std::vector<QubitPrep> out(frame.begin(), frame.end());
  if (noise.eavesdropper) {
    for (auto& q : out) {
      Basis eve = rng.bit() ? Basis::Diagonal : Basis::Rectilinear;
      std::uint8_t seen = eve == q.basis ? q.bit : rng.bit();
      q = {seen, eve};
    }
  }
  if (noise.flip_probability > 0.0) {
    for (auto& q : out)
      if (rng.bernoulli(noise.flip_probability)) q.bit ^= 1;
  }
  return PreparedFrame(std::move(out));
}

BitString measure_frame(const PreparedFrame& frame, std::span<const Basis> bases, std::uint64_t shots, Rng& rng) {
  if (bases.size() != frame.size()) throw Error(Errc::invalid_argument, "measure_frame: bases and frame differ in length");
  if (shots == 0) throw Error(Errc::invalid_argument, "measure_frame: shots must be >= 1");
  BitString out(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) {
    if (bases[i] == frame[i].basis) {
      out.set(i, frame[i].bit);
      continue;
    }
    // Conjugate basis: every shot is a fair coin.
    const std::uint64_t ones = rng.count_ones(shots);
    if (2 * ones > shots)
      out.set(i, 1);
    else if (2 * ones < shots)
      out.set(i, 0);
    else
      out.set(i, rng.bit());
  }
  return out;
}

SiftedKey sift(std::span<const Basis> my_bases, std::span<const Basis> their_bases, const BitString& my_bits) {
  if (my_bases.size() != their_bases.size() || my_bases.size() != my_bits.size())
    throw Error(Errc::invalid_argument, "sift: sequences differ in length");
  SiftedKey key;
  for (std::size_t i = 0; i < my_bases.size(); ++i) {
    if (my_bases[i] != their_bases[i]) continue;
    key.positions.push_back(i);
    key.bits.push_back(my_bits[i]);
  }
  return key;
}

VoterAttempt VoterAttempt::generate(std::size_t n, Rng& rng) {
  VoterAttempt a;
  a.bits = random_bits(n, rng);
  a.bases = random_bases(n, rng);
  return a;
}

CommitteeAttempt CommitteeAttempt::receive(const PreparedFrame& frame, const NoiseSpec& noise, std::uint64_t shots,
                                           Rng& rng) {
  CommitteeAttempt a;
  a.noise = noise.draw(rng);
  PreparedFrame received = apply_channel(frame, a.noise, rng);
  a.bases = random_bases(frame.size(), rng);
  a.measurements = measure_frame(received, a.bases, shots, rng);
  return a;
}

LocalCommitteePeer::LocalCommitteePeer(NoiseSpec noise, std::uint64_t shots, std::uint64_t seed)
    : noise_(noise), shots_(shots), rng_(seed) {
  noise_.validate();
}

Bases LocalCommitteePeer::transmit(std::size_t, std::string_view qasm) {
  key_.reset();
  current_ = CommitteeAttempt::receive(qasm::parse_prep(qasm), noise_, shots_, rng_);
  return current_->bases;
}

void LocalCommitteePeer::announce(std::size_t, std::span<const Basis> voter_bases) {
  if (!current_) throw Error(Errc::invalid_argument, "bases announced before any transmission");
  key_ = current_->sift_with(voter_bases);
}

ConfirmResult LocalCommitteePeer::confirm(std::size_t, const Digest& digest) {
  if (!key_ || key_->bits.empty()) return ConfirmResult::mismatch;
  return digest_equal(crypto::key_digest(key_->bits), digest) ? ConfirmResult::accepted : ConfirmResult::mismatch;
}

SessionTranscript run_session(const QkdConfig& config, QkdPeer& peer, Rng& rng) {
  config.validate();
  SessionTranscript t;
  std::size_t raw_length = config.raw_length;

  for (std::size_t attempt = 1; attempt <= config.max_attempts; ++attempt) {
    VoterAttempt voter = VoterAttempt::generate(raw_length, rng);
    Bases committee_bases = peer.transmit(attempt, qasm::emit_prep(voter.frame()));
    if (committee_bases.size() != raw_length)
      throw Error(Errc::malformed_message, "committee announced " + std::to_string(committee_bases.size()) +
                                               " bases for a " + std::to_string(raw_length) + "-qubit frame");
    peer.announce(attempt, voter.bases);
    SiftedKey key = sift(voter.bases, committee_bases, voter.bits);

    AttemptRecord record;
    record.raw_length = raw_length;
    record.sifted_bits = key.size();

    t.attempts = attempt;
    t.voter_bits = voter.bits;
    t.voter_bases = voter.bases;
    t.committee_bases = committee_bases;
    t.voter_key = key;
    t.committee_measurements = {};
    t.committee_key = {};
    t.noise_draw.reset();
    if (const CommitteeAttempt* seen = peer.inspect()) {
      t.committee_measurements = seen->measurements;
      t.committee_key = seen->sift_with(voter.bases);
      t.noise_draw = seen->noise.flip_probability;
      record.noise_draw = t.noise_draw;
      std::size_t errors = 0;
      for (std::size_t i = 0; i < key.size(); ++i) {
        if (key.bits[i] == t.committee_key.bits[i]) continue;
        if (errors++ == 0) record.first_error = i;
      }
      record.sifted_errors = errors;
    }

    if (key.size() < config.min_sifted_bits || key.bits.empty()) {
      record.outcome = AttemptOutcome::short_sift;
      t.history.push_back(record);
      peer.abandon(attempt);
      if (config.grow_on_short_sift) raw_length *= 2;
      continue;
    }

    ConfirmResult result = peer.confirm(attempt, crypto::key_digest(key.bits));
    record.outcome = result == ConfirmResult::accepted ? AttemptOutcome::confirmed : AttemptOutcome::digest_mismatch;
    t.history.push_back(record);
    if (result == ConfirmResult::accepted) {
      t.confirmed = true;
      return t;
    }
  }
  throw SessionFailed(std::move(t));
}

SessionTranscript run_session(const QkdConfig& config, const NoiseSpec& noise, std::uint64_t seed) {
  const std::uint64_t base = config.rng_seed.value_or(seed);
  Rng voter_rng(Rng::derive(base, 0));
  LocalCommitteePeer peer(noise, config.shots, Rng::derive(base, 1));
  return run_session(config, peer, voter_rng);
}

}  // namespace qvote::bb84

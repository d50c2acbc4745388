#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qvote/bits.hpp"
#include "qvote/digest.hpp"
#include "qvote/error.hpp"
#include "qvote/random.hpp"

namespace qvote::bb84 {

enum class Basis : std::uint8_t { Rectilinear, Diagonal };
using Bases = std::vector<Basis>;

/// 'R' or 'D', the wire spelling.
char to_char(Basis basis) noexcept;
Basis basis_from_char(char c);
std::string to_string(std::span<const Basis> bases);
Bases bases_from_string(std::string_view s);

struct QubitPrep {
  std::uint8_t bit = 0;
  Basis basis = Basis::Rectilinear;

  friend bool operator==(const QubitPrep&, const QubitPrep&) = default;
};

/// The voter's quantum transmission: one preparation per raw key bit.
class PreparedFrame {
 public:
  explicit PreparedFrame(std::vector<QubitPrep> preps);

  std::size_t size() const noexcept { return preps_.size(); }
  const QubitPrep& operator[](std::size_t i) const noexcept { return preps_[i]; }
  std::span<const QubitPrep> preps() const noexcept { return preps_; }
  auto begin() const noexcept { return preps_.begin(); }
  auto end() const noexcept { return preps_.end(); }

  friend bool operator==(const PreparedFrame&, const PreparedFrame&) = default;

 private:
  std::vector<QubitPrep> preps_;
};

/// Channel behaviour for one session.
struct NoiseModel {
  double flip_probability = 0.0;
  bool eavesdropper = false;

  void validate() const;
};

/// How a session's flip probability is drawn. The default reproduces the
/// simulated channel: p ~ U(0, 0.2), drawn once per session.
struct NoiseSpec {
  enum class Kind { fixed, uniform };

  Kind kind = Kind::uniform;
  double level = 0.2;  // the fixed p, or the upper bound of the uniform draw
  bool eavesdropper = false;

  static NoiseSpec off() { return {Kind::fixed, 0.0, false}; }
  static NoiseSpec fixed(double p) { return {Kind::fixed, p, false}; }
  static NoiseSpec uniform(double max_p) { return {Kind::uniform, max_p, false}; }
  NoiseSpec with_eavesdropper(bool on = true) const {
    NoiseSpec s = *this;
    s.eavesdropper = on;
    return s;
  }

  void validate() const;
  NoiseModel draw(Rng& rng) const;

  friend bool operator==(const NoiseSpec&, const NoiseSpec&) = default;
};

struct QkdConfig {
  std::size_t raw_length = 32;
  std::uint64_t shots = 10000;
  std::optional<std::uint64_t> rng_seed;
  std::size_t min_sifted_bits = 1;
  std::size_t max_attempts = 3;
  /// Double the raw length for the next attempt after a short sift.
  bool grow_on_short_sift = false;

  void validate() const;
};

struct SiftedKey {
  BitString bits;
  std::vector<std::size_t> positions;

  std::size_t size() const noexcept { return bits.size(); }
  friend bool operator==(const SiftedKey&, const SiftedKey&) = default;
};

enum class AttemptOutcome { confirmed, short_sift, digest_mismatch };
std::string_view to_string(AttemptOutcome outcome) noexcept;

struct AttemptRecord {
  std::size_t raw_length = 0;
  std::size_t sifted_bits = 0;
  AttemptOutcome outcome = AttemptOutcome::short_sift;
  /// Only known when the peer exposes its measurements.
  std::optional<double> noise_draw;
  std::optional<std::size_t> sifted_errors;
  std::optional<std::size_t> first_error;  // index into the sifted key

  friend bool operator==(const AttemptRecord&, const AttemptRecord&) = default;
};

/// Per-session QKD state. Fields describe the final attempt; `history` has one
/// record per attempt. Committee-private fields are empty when the session ran
/// against a remote committee.
struct SessionTranscript {
  BitString voter_bits;
  Bases voter_bases;
  Bases committee_bases;
  BitString committee_measurements;
  SiftedKey voter_key;
  SiftedKey committee_key;
  std::optional<double> noise_draw;
  std::size_t attempts = 0;
  bool confirmed = false;
  std::vector<AttemptRecord> history;

  friend bool operator==(const SessionTranscript&, const SessionTranscript&) = default;
};

class SessionFailed : public Error {
 public:
  explicit SessionFailed(SessionTranscript transcript);
  const SessionTranscript& transcript() const noexcept { return transcript_; }

 private:
  SessionTranscript transcript_;
};

BitString random_bits(std::size_t n, Rng& rng);
Bases random_bases(std::size_t n, Rng& rng);
PreparedFrame prepare_frame(const BitString& bits, std::span<const Basis> bases);
/// Intercept-resend (when enabled) followed by independent bit flips.
PreparedFrame apply_channel(const PreparedFrame& frame, const NoiseModel& noise, Rng& rng);
/// Majority over `shots` trials per qubit; a tie takes one extra trial.
BitString measure_frame(const PreparedFrame& frame, std::span<const Basis> bases, std::uint64_t shots, Rng& rng);
SiftedKey sift(std::span<const Basis> my_bases, std::span<const Basis> their_bases, const BitString& my_bits);

/// Voter side of one attempt: random key and bases.
struct VoterAttempt {
  BitString bits;
  Bases bases;

  static VoterAttempt generate(std::size_t n, Rng& rng);
  PreparedFrame frame() const { return prepare_frame(bits, bases); }
};

/// Committee side of one attempt: the frame after transit, measured in random bases.
struct CommitteeAttempt {
  NoiseModel noise;
  Bases bases;
  BitString measurements;

  static CommitteeAttempt receive(const PreparedFrame& frame, const NoiseSpec& noise, std::uint64_t shots, Rng& rng);
  SiftedKey sift_with(std::span<const Basis> voter_bases) const { return sift(bases, voter_bases, measurements); }
};

enum class ConfirmResult { accepted, mismatch };

/// The committee as seen by the voter while a session runs.
class QkdPeer {
 public:
  virtual ~QkdPeer() = default;

  /// Sends the prepared frame (QASM text) over the quantum channel and returns
  /// the committee's public basis announcement.
  virtual Bases transmit(std::size_t attempt, std::string_view qasm) = 0;
  virtual void announce(std::size_t attempt, std::span<const Basis> voter_bases) = 0;
  virtual ConfirmResult confirm(std::size_t attempt, const Digest& key_digest) = 0;
  /// The voter abandoned the attempt because its sift was too short.
  virtual void abandon(std::size_t attempt) { (void)attempt; }

  virtual const CommitteeAttempt* inspect() const { return nullptr; }
  virtual std::optional<SiftedKey> inspect_key() const { return std::nullopt; }
};

/// In-process committee that applies the channel on receipt.
class LocalCommitteePeer final : public QkdPeer {
 public:
  LocalCommitteePeer(NoiseSpec noise, std::uint64_t shots, std::uint64_t seed);

  Bases transmit(std::size_t attempt, std::string_view qasm) override;
  void announce(std::size_t attempt, std::span<const Basis> voter_bases) override;
  ConfirmResult confirm(std::size_t attempt, const Digest& key_digest) override;

  const CommitteeAttempt* inspect() const override { return current_ ? &*current_ : nullptr; }
  std::optional<SiftedKey> inspect_key() const override { return key_; }

 private:
  NoiseSpec noise_;
  std::uint64_t shots_;
  Rng rng_;
  std::optional<CommitteeAttempt> current_;
  std::optional<SiftedKey> key_;
};

/// Runs the six-step exchange with retries. Throws SessionFailed when the
/// attempt cap is exhausted; peer failures propagate unchanged.
SessionTranscript run_session(const QkdConfig& config, QkdPeer& peer, Rng& rng);

/// Convenience: seeded local session; the voter and committee draw from
/// independent streams of `seed` (or of config.rng_seed when set).
SessionTranscript run_session(const QkdConfig& config, const NoiseSpec& noise, std::uint64_t seed);

}  // namespace qvote::bb84

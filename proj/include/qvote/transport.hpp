#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace qvote::transport {

using json = nlohmann::json;

enum class MsgType {
  qkd_quantum,
  qkd_bases_committee,
  qkd_bases_voter,
  key_confirm,
  key_retry,
  vote_submit,
  receipt,
  audit_request,
  audit_reveal,
};

std::string_view to_string(MsgType type) noexcept;
std::optional<MsgType> msg_type_from_string(std::string_view s) noexcept;

/// JSON envelope carried on every topic. Binary payload fields are base64.
struct Envelope {
  static constexpr int kVersion = 1;

  int version = kVersion;
  std::string election_id;
  std::string session_id;
  MsgType msg_type = MsgType::qkd_quantum;
  std::int64_t sent_at = 0;  // ms since Unix epoch
  json payload = json::object();

  std::string encode() const;
  /// Throws Error(Errc::malformed_message) for anything not matching the schema.
  static Envelope decode(std::string_view text);

  friend bool operator==(const Envelope&, const Envelope&) = default;
};

std::int64_t now_ms();

struct Message {
  std::string topic;
  std::string payload;
};

using Handler = std::function<void(const Message&)>;
using SubscriptionId = std::uint64_t;

inline constexpr std::size_t kMaxPayloadBytes = 256 * 1024;

struct Ack {
  int qos = 0;
  std::uint16_t packet_id = 0;
};

/// One client connection to a publish/subscribe fabric. Publishing from inside
/// a handler is allowed.
class Channel {
 public:
  virtual ~Channel() = default;

  virtual Ack publish_raw(const std::string& topic, std::string payload) = 0;
  Ack publish(const std::string& topic, const Envelope& envelope) { return publish_raw(topic, envelope.encode()); }

  /// Subscribing again to an identical filter replaces the handler and returns
  /// the existing id.
  virtual SubscriptionId subscribe(const std::string& filter, Handler handler) = 0;
  virtual void unsubscribe(SubscriptionId id) = 0;
};

/// MQTT filter semantics: '+' matches one level, a trailing '#' the rest.
bool topic_matches(std::string_view filter, std::string_view topic) noexcept;
void validate_topic(std::string_view topic);
void validate_filter(std::string_view filter);

namespace topics {
std::string quantum(std::string_view election, std::string_view session);
std::string bases_committee(std::string_view election, std::string_view session);
std::string bases_voter(std::string_view election, std::string_view session);
std::string confirm(std::string_view election, std::string_view session);
std::string vote(std::string_view election, std::string_view session);
std::string receipt(std::string_view election, std::string_view session);
std::string audit(std::string_view election, std::string_view session);
/// Filters the committee subscribes to for a whole election.
std::vector<std::string> committee_filters(std::string_view election);
}  // namespace topics

struct ChannelConfig {
  struct Loopback {};
  struct Mqtt {
    std::string broker_uri;
    int qos = 1;
    int keepalive_seconds = 30;
    std::string client_id;
  };

  std::variant<Loopback, Mqtt> binding = Loopback{};
  double drop_probability = 0.0;  // loopback only
  std::optional<std::chrono::milliseconds> delay;
  std::uint64_t fault_seed = 0x5eed;

  void validate() const;
  bool is_loopback() const noexcept { return std::holds_alternative<Loopback>(binding); }
  /// "loopback" or an mqtt:// / tcp:// URI.
  static ChannelConfig from_uri(std::string_view uri);
};

/// In-process broker. Messages are queued and delivered in publish order by
/// whichever thread finds the queue idle, so a publish made from inside a
/// handler is delivered after the current handler returns.
class LoopbackBroker {
 public:
  explicit LoopbackBroker(ChannelConfig config = {});
  ~LoopbackBroker();
  LoopbackBroker(const LoopbackBroker&) = delete;
  LoopbackBroker& operator=(const LoopbackBroker&) = delete;

  std::unique_ptr<Channel> connect(std::string client_id = {});

  /// Sees every message before delivery; may rewrite the payload. Returning
  /// false drops the message.
  using Interceptor = std::function<bool(const std::string& topic, std::string& payload)>;
  void set_interceptor(Interceptor interceptor);

  std::uint64_t delivered() const;
  std::uint64_t dropped() const;

  struct State;

 private:
  std::shared_ptr<State> state_;
};

/// Loopback channels need the broker they attach to; MQTT channels connect out.
std::unique_ptr<Channel> open_channel(const ChannelConfig& config, LoopbackBroker* loopback,
                                      std::string client_id = {});

}  // namespace qvote::transport

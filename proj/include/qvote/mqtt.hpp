#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qvote/bits.hpp"
#include "qvote/transport.hpp"

/// Minimal MQTT 3.1.1 client: QoS 0/1/2 publish and subscribe, keepalive,
/// clean sessions only. No TLS, no reconnect.
namespace qvote::mqtt {

enum class PacketType : std::uint8_t {
  connect = 1,
  connack = 2,
  publish = 3,
  puback = 4,
  pubrec = 5,
  pubrel = 6,
  pubcomp = 7,
  subscribe = 8,
  suback = 9,
  unsubscribe = 10,
  unsuback = 11,
  pingreq = 12,
  pingresp = 13,
  disconnect = 14,
};

struct Packet {
  PacketType type{};
  std::uint8_t flags = 0;
  Bytes body;
};

struct Publish {
  std::string topic;
  std::string payload;
  int qos = 0;
  bool retain = false;
  bool dup = false;
  std::uint16_t packet_id = 0;
};

struct Connect {
  std::string client_id;
  std::uint16_t keepalive = 0;
  bool clean_session = true;
};

struct SubscribeRequest {
  std::uint16_t packet_id = 0;
  std::vector<std::pair<std::string, int>> filters;
};

struct UnsubscribeRequest {
  std::uint16_t packet_id = 0;
  std::vector<std::string> filters;
};

Bytes encode_remaining_length(std::size_t length);
Bytes encode(const Packet& packet);
/// Returns the packet and the bytes it consumed, or nullopt when `buffer`
/// holds only part of a packet. Throws Errc::malformed_message.
std::optional<std::pair<Packet, std::size_t>> decode(std::span<const std::uint8_t> buffer);

Packet make_connect(const Connect& c);
Packet make_connack(std::uint8_t return_code, bool session_present = false);
Packet make_publish(const Publish& p);
Packet make_ack(PacketType type, std::uint16_t packet_id);  // puback, pubrec, pubrel, pubcomp, unsuback
Packet make_subscribe(const SubscribeRequest& s);
Packet make_suback(std::uint16_t packet_id, std::span<const std::uint8_t> codes);
Packet make_unsubscribe(const UnsubscribeRequest& u);
Packet make_simple(PacketType type);  // pingreq, pingresp, disconnect

Connect parse_connect(const Packet& p);
Publish parse_publish(const Packet& p);
SubscribeRequest parse_subscribe(const Packet& p);
UnsubscribeRequest parse_unsubscribe(const Packet& p);
std::uint16_t parse_packet_id(const Packet& p);
std::vector<std::uint8_t> parse_suback_codes(const Packet& p);

struct BrokerAddress {
  std::string host;
  std::uint16_t port = 1883;
};
/// mqtt://host[:port] or tcp://host[:port].
BrokerAddress parse_broker_uri(std::string_view uri);

/// Owning TCP socket.
class TcpStream {
 public:
  TcpStream() = default;
  explicit TcpStream(int fd) : fd_(fd) {}
  ~TcpStream();
  TcpStream(TcpStream&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  TcpStream& operator=(TcpStream&& o) noexcept;
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;

  static TcpStream connect(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout);

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void send_all(std::span<const std::uint8_t> data);
  /// Waits up to `timeout` for data; returns bytes read, 0 on timeout.
  /// Throws ChannelError when the peer closed or the socket failed.
  std::size_t read_some(std::span<std::uint8_t> into, std::chrono::milliseconds timeout);
  void shutdown() noexcept;

 private:
  int fd_ = -1;
};

class TcpListener {
 public:
  /// Port 0 picks an ephemeral port.
  TcpListener(const std::string& host, std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  /// Returns an invalid stream on timeout.
  TcpStream accept(std::chrono::milliseconds timeout);
  void close() noexcept;

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Reads packets off a stream, buffering partial reads.
class PacketReader {
 public:
  /// nullopt on timeout.
  std::optional<Packet> next(TcpStream& stream, std::chrono::milliseconds timeout);

 private:
  Bytes buffer_;
};

class MqttChannel final : public transport::Channel {
 public:
  explicit MqttChannel(transport::ChannelConfig::Mqtt config,
                       std::chrono::milliseconds connect_timeout = std::chrono::seconds(5));
  ~MqttChannel() override;

  transport::Ack publish_raw(const std::string& topic, std::string payload) override;
  transport::SubscriptionId subscribe(const std::string& filter, transport::Handler handler) override;
  void unsubscribe(transport::SubscriptionId id) override;

  /// Waits until every outbound QoS 1/2 publish has been acknowledged.
  bool flush(std::chrono::milliseconds timeout);
  bool connected() const noexcept { return alive_.load(); }

 private:
  struct Sub {
    std::string filter;
    std::shared_ptr<transport::Handler> handler;
  };

  void reader_loop();
  void handle(const Packet& packet);
  void send(const Packet& packet);
  std::uint16_t next_packet_id();
  void ensure_alive() const;

  transport::ChannelConfig::Mqtt config_;
  TcpStream stream_;
  PacketReader reader_;
  std::thread reader_thread_;
  std::thread::id reader_id_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> alive_{false};
  std::mutex write_mu_;
  std::chrono::steady_clock::time_point last_send_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<transport::SubscriptionId, Sub> subs_;
  transport::SubscriptionId next_sub_ = 1;
  std::uint16_t next_pid_ = 0;
  std::set<std::uint16_t> inflight_;        // our QoS 1/2 publishes
  std::set<std::uint16_t> awaiting_ack_;    // SUBACK / UNSUBACK
  std::map<std::uint16_t, bool> sub_results_;
  std::set<std::uint16_t> inbound_qos2_;    // received, waiting for PUBREL
};

}  // namespace qvote::mqtt

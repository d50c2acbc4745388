#include "qvote/mqtt.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <random>

#include <spdlog/spdlog.h>

#include "qvote/error.hpp"

namespace qvote::mqtt {

namespace {

[[noreturn]] void malformed(const std::string& why) { throw Error(Errc::malformed_message, "mqtt: " + why); }

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void put_string(Bytes& out, std::string_view s) {
  if (s.size() > 0xffff) throw Error(Errc::invalid_argument, "mqtt: string longer than 65535 bytes");
  put_u16(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>((data_[pos_] << 8) | data_[pos_ + 1]);
    pos_ += 2;
    return v;
  }
  std::string str() {
    std::size_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string rest() {
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), data_.size() - pos_);
    pos_ = data_.size();
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) malformed("packet body truncated");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint8_t fixed_flags(PacketType t) {
  switch (t) {
    case PacketType::pubrel:
    case PacketType::subscribe:
    case PacketType::unsubscribe: return 0x2;
    default: return 0;
  }
}

}  // namespace

Bytes encode_remaining_length(std::size_t length) {
  if (length > 268'435'455) throw Error(Errc::payload_too_large, "mqtt: packet exceeds maximum remaining length");
  Bytes out;
  do {
    std::uint8_t byte = length % 128;
    length /= 128;
    if (length > 0) byte |= 0x80;
    out.push_back(byte);
  } while (length > 0);
  return out;
}

Bytes encode(const Packet& p) {
  Bytes out;
  out.push_back(static_cast<std::uint8_t>((static_cast<std::uint8_t>(p.type) << 4) | (p.flags & 0x0f)));
  Bytes len = encode_remaining_length(p.body.size());
  out.insert(out.end(), len.begin(), len.end());
  out.insert(out.end(), p.body.begin(), p.body.end());
  return out;
}

std::optional<std::pair<Packet, std::size_t>> decode(std::span<const std::uint8_t> buffer) {
  if (buffer.size() < 2) return std::nullopt;
  const std::uint8_t type = buffer[0] >> 4;
  if (type < 1 || type > 14) malformed("reserved packet type " + std::to_string(type));
  std::size_t length = 0;
  std::size_t multiplier = 1;
  std::size_t i = 1;
  while (true) {
    if (i >= buffer.size()) return std::nullopt;
    if (i > 4) malformed("remaining length longer than 4 bytes");
    const std::uint8_t byte = buffer[i++];
    length += (byte & 0x7f) * multiplier;
    multiplier *= 128;
    if ((byte & 0x80) == 0) break;
  }
  if (buffer.size() - i < length) return std::nullopt;
  Packet p;
  p.type = static_cast<PacketType>(type);
  p.flags = buffer[0] & 0x0f;
  if (p.type != PacketType::publish && p.flags != fixed_flags(p.type)) malformed("invalid fixed-header flags");
  p.body.assign(buffer.begin() + static_cast<std::ptrdiff_t>(i),
                buffer.begin() + static_cast<std::ptrdiff_t>(i + length));
  return std::make_pair(std::move(p), i + length);
}

Packet make_connect(const Connect& c) {
  Packet p{PacketType::connect, 0, {}};
  put_string(p.body, "MQTT");
  p.body.push_back(4);  // protocol level 3.1.1
  p.body.push_back(c.clean_session ? 0x02 : 0x00);
  put_u16(p.body, c.keepalive);
  put_string(p.body, c.client_id);
  return p;
}

Packet make_connack(std::uint8_t return_code, bool session_present) {
  return {PacketType::connack, 0, {static_cast<std::uint8_t>(session_present ? 1 : 0), return_code}};
}

Packet make_publish(const Publish& pub) {
  if (pub.qos < 0 || pub.qos > 2) throw Error(Errc::invalid_argument, "mqtt: QoS must be 0, 1 or 2");
  Packet p{PacketType::publish,
           static_cast<std::uint8_t>((pub.dup ? 0x08 : 0) | (pub.qos << 1) | (pub.retain ? 0x01 : 0)), {}};
  put_string(p.body, pub.topic);
  if (pub.qos > 0) put_u16(p.body, pub.packet_id);
  p.body.insert(p.body.end(), pub.payload.begin(), pub.payload.end());
  return p;
}

Packet make_ack(PacketType type, std::uint16_t packet_id) {
  Packet p{type, fixed_flags(type), {}};
  put_u16(p.body, packet_id);
  return p;
}

Packet make_subscribe(const SubscribeRequest& s) {
  Packet p{PacketType::subscribe, 0x2, {}};
  put_u16(p.body, s.packet_id);
  for (const auto& [filter, qos] : s.filters) {
    put_string(p.body, filter);
    p.body.push_back(static_cast<std::uint8_t>(qos));
  }
  return p;
}

Packet make_suback(std::uint16_t packet_id, std::span<const std::uint8_t> codes) {
  Packet p{PacketType::suback, 0, {}};
  put_u16(p.body, packet_id);
  p.body.insert(p.body.end(), codes.begin(), codes.end());
  return p;
}

Packet make_unsubscribe(const UnsubscribeRequest& u) {
  Packet p{PacketType::unsubscribe, 0x2, {}};
  put_u16(p.body, u.packet_id);
  for (const auto& f : u.filters) put_string(p.body, f);
  return p;
}

Packet make_simple(PacketType type) { return {type, 0, {}}; }

Connect parse_connect(const Packet& p) {
  if (p.type != PacketType::connect) malformed("expected CONNECT");
  Cursor c(p.body);
  if (c.str() != "MQTT") malformed("unsupported protocol name");
  if (c.u8() != 4) malformed("unsupported protocol level");
  const std::uint8_t flags = c.u8();
  Connect out;
  out.clean_session = flags & 0x02;
  out.keepalive = c.u16();
  out.client_id = c.str();
  return out;
}

Publish parse_publish(const Packet& p) {
  if (p.type != PacketType::publish) malformed("expected PUBLISH");
  Publish out;
  out.qos = (p.flags >> 1) & 0x3;
  if (out.qos == 3) malformed("PUBLISH with QoS 3");
  out.dup = p.flags & 0x08;
  out.retain = p.flags & 0x01;
  Cursor c(p.body);
  out.topic = c.str();
  if (out.qos > 0) out.packet_id = c.u16();
  out.payload = c.rest();
  return out;
}

SubscribeRequest parse_subscribe(const Packet& p) {
  if (p.type != PacketType::subscribe) malformed("expected SUBSCRIBE");
  Cursor c(p.body);
  SubscribeRequest out;
  out.packet_id = c.u16();
  while (!c.done()) {
    std::string filter = c.str();
    out.filters.emplace_back(std::move(filter), c.u8() & 0x3);
  }
  if (out.filters.empty()) malformed("SUBSCRIBE without filters");
  return out;
}

UnsubscribeRequest parse_unsubscribe(const Packet& p) {
  if (p.type != PacketType::unsubscribe) malformed("expected UNSUBSCRIBE");
  Cursor c(p.body);
  UnsubscribeRequest out;
  out.packet_id = c.u16();
  while (!c.done()) out.filters.push_back(c.str());
  return out;
}

std::uint16_t parse_packet_id(const Packet& p) {
  Cursor c(p.body);
  return c.u16();
}

std::vector<std::uint8_t> parse_suback_codes(const Packet& p) {
  if (p.type != PacketType::suback) malformed("expected SUBACK");
  if (p.body.size() < 2) malformed("SUBACK truncated");
  return {p.body.begin() + 2, p.body.end()};
}

BrokerAddress parse_broker_uri(std::string_view uri) {
  std::string_view rest;
  if (uri.starts_with("mqtt://"))
    rest = uri.substr(7);
  else if (uri.starts_with("tcp://"))
    rest = uri.substr(6);
  else
    throw Error(Errc::invalid_argument, "broker URI must start with mqtt:// or tcp://: " + std::string(uri));
  if (auto slash = rest.find('/'); slash != std::string_view::npos) rest = rest.substr(0, slash);
  BrokerAddress a;
  auto colon = rest.rfind(':');
  if (colon == std::string_view::npos) {
    a.host = std::string(rest);
  } else {
    a.host = std::string(rest.substr(0, colon));
    const std::string port(rest.substr(colon + 1));
    char* end = nullptr;
    const long v = std::strtol(port.c_str(), &end, 10);
    if (port.empty() || *end != '\0' || v <= 0 || v > 65535)
      throw Error(Errc::invalid_argument, "invalid broker port in " + std::string(uri));
    a.port = static_cast<std::uint16_t>(v);
  }
  if (a.host.empty()) throw Error(Errc::invalid_argument, "broker URI has no host: " + std::string(uri));
  return a;
}

// ------------------------------------------------------------------ sockets

TcpStream::~TcpStream() {
  if (fd_ >= 0) ::close(fd_);
}

TcpStream& TcpStream::operator=(TcpStream&& o) noexcept {
  if (this != &o) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = std::exchange(o.fd_, -1);
  }
  return *this;
}

TcpStream TcpStream::connect(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0)
    throw ChannelError("cannot resolve broker " + host + ": " + gai_strerror(rc));
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);

  std::string last_error = "no addresses";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    TcpStream s(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!s.valid()) continue;
    const int flags = ::fcntl(s.fd_, F_GETFL, 0);
    ::fcntl(s.fd_, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(s.fd_, ai->ai_addr, ai->ai_addrlen);
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd pfd{s.fd_, POLLOUT, 0};
      rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(s.fd_, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        rc = -1;
        errno = ETIMEDOUT;
      }
    }
    if (rc == 0) {
      ::fcntl(s.fd_, F_SETFL, flags);
      int one = 1;
      ::setsockopt(s.fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return s;
    }
    last_error = std::strerror(errno);
  }
  throw ChannelError("broker unreachable at " + host + ":" + service + " (" + last_error + ")",
                     std::chrono::milliseconds{2000});
}

void TcpStream::send_all(std::span<const std::uint8_t> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ChannelError(std::string("send failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::size_t TcpStream::read_some(std::span<std::uint8_t> into, std::chrono::milliseconds timeout) {
  pollfd pfd{fd_, POLLIN, 0};
  int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
  if (rc == 0) return 0;
  if (rc < 0) {
    if (errno == EINTR) return 0;
    throw ChannelError(std::string("poll failed: ") + std::strerror(errno));
  }
  ssize_t n = ::recv(fd_, into.data(), into.size(), 0);
  if (n == 0) throw ChannelError("connection closed by peer");
  if (n < 0) {
    if (errno == EINTR || errno == EAGAIN) return 0;
    throw ChannelError(std::string("recv failed: ") + std::strerror(errno));
  }
  return static_cast<std::size_t>(n);
}

void TcpStream::shutdown() noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw ChannelError(std::string("socket failed: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    close();
    throw Error(Errc::invalid_argument, "listener host must be an IPv4 literal");
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 64) != 0) {
    const std::string err = std::strerror(errno);
    close();
    throw ChannelError("cannot listen on " + host + ": " + err);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { close(); }

void TcpListener::close() noexcept {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

TcpStream TcpListener::accept(std::chrono::milliseconds timeout) {
  if (fd_ < 0) return {};
  pollfd pfd{fd_, POLLIN, 0};
  if (::poll(&pfd, 1, static_cast<int>(timeout.count())) != 1) return {};
  int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
  if (fd < 0) return {};
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return TcpStream(fd);
}

std::optional<Packet> PacketReader::next(TcpStream& stream, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    if (auto decoded = decode(buffer_)) {
      buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(decoded->second));
      return std::move(decoded->first);
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    std::uint8_t chunk[16384];
    const std::size_t n = stream.read_some(chunk, left);
    buffer_.insert(buffer_.end(), chunk, chunk + n);
  }
}

// ------------------------------------------------------------------ client

MqttChannel::MqttChannel(transport::ChannelConfig::Mqtt config, std::chrono::milliseconds connect_timeout)
    : config_(std::move(config)) {
  if (config_.qos < 0 || config_.qos > 2) throw Error(Errc::invalid_argument, "MQTT QoS must be 0, 1 or 2");
  const BrokerAddress addr = parse_broker_uri(config_.broker_uri);
  if (config_.client_id.empty()) {
    std::random_device rd;
    config_.client_id = "qvote-" + std::to_string(rd()) + std::to_string(rd());
  }
  stream_ = TcpStream::connect(addr.host, addr.port, connect_timeout);
  send(make_connect({config_.client_id, static_cast<std::uint16_t>(config_.keepalive_seconds), true}));
  auto ack = reader_.next(stream_, connect_timeout);
  if (!ack || ack->type != PacketType::connack || ack->body.size() != 2)
    throw ChannelError("broker did not acknowledge CONNECT");
  if (ack->body[1] != 0) throw ChannelError("broker refused connection, code " + std::to_string(ack->body[1]));
  alive_ = true;
  reader_thread_ = std::thread([this] { reader_loop(); });
  reader_id_ = reader_thread_.get_id();
}

MqttChannel::~MqttChannel() {
  if (alive_) {
    try {
      send(make_simple(PacketType::disconnect));
    } catch (const std::exception&) {
    }
  }
  stop_ = true;
  stream_.shutdown();
  if (reader_thread_.joinable()) reader_thread_.join();
}

void MqttChannel::ensure_alive() const {
  if (!alive_) throw ChannelError("MQTT connection is closed", std::chrono::milliseconds{2000});
}

void MqttChannel::send(const Packet& packet) {
  const Bytes wire = encode(packet);
  std::lock_guard lock(write_mu_);
  stream_.send_all(wire);
  last_send_ = std::chrono::steady_clock::now();
}

std::uint16_t MqttChannel::next_packet_id() {
  std::lock_guard lock(mu_);
  do {
    ++next_pid_;
  } while (next_pid_ == 0 || inflight_.contains(next_pid_) || awaiting_ack_.contains(next_pid_));
  return next_pid_;
}

transport::Ack MqttChannel::publish_raw(const std::string& topic, std::string payload) {
  transport::validate_topic(topic);
  if (payload.size() > transport::kMaxPayloadBytes)
    throw Error(Errc::payload_too_large, "payload of " + std::to_string(payload.size()) + " bytes exceeds 256 KiB");
  ensure_alive();
  Publish pub{topic, std::move(payload), config_.qos, false, false, 0};
  if (pub.qos > 0) {
    pub.packet_id = next_packet_id();
    std::lock_guard lock(mu_);
    inflight_.insert(pub.packet_id);
  }
  send(make_publish(pub));
  return {pub.qos, pub.packet_id};
}

transport::SubscriptionId MqttChannel::subscribe(const std::string& filter, transport::Handler handler) {
  transport::validate_filter(filter);
  auto h = std::make_shared<transport::Handler>(std::move(handler));
  {
    std::lock_guard lock(mu_);
    for (auto& [id, sub] : subs_) {
      if (sub.filter == filter) {
        sub.handler = std::move(h);
        return id;
      }
    }
  }
  ensure_alive();
  const std::uint16_t pid = next_packet_id();
  transport::SubscriptionId id;
  {
    std::lock_guard lock(mu_);
    id = next_sub_++;
    subs_[id] = {filter, h};
    awaiting_ack_.insert(pid);
  }
  send(make_subscribe({pid, {{filter, config_.qos}}}));
  if (std::this_thread::get_id() == reader_id_) return id;  // cannot block the reader on its own SUBACK

  std::unique_lock lock(mu_);
  const bool acked = cv_.wait_for(lock, std::chrono::seconds(5), [&] { return !awaiting_ack_.contains(pid) || !alive_; });
  if (!acked || !alive_) {
    subs_.erase(id);
    throw ChannelError("no SUBACK for '" + filter + "'");
  }
  if (!sub_results_[pid]) {
    sub_results_.erase(pid);
    subs_.erase(id);
    throw ChannelError("broker rejected subscription '" + filter + "'");
  }
  sub_results_.erase(pid);
  return id;
}

void MqttChannel::unsubscribe(transport::SubscriptionId id) {
  std::string filter;
  {
    std::lock_guard lock(mu_);
    auto it = subs_.find(id);
    if (it == subs_.end()) return;
    filter = it->second.filter;
    subs_.erase(it);
  }
  if (!alive_) return;
  const std::uint16_t pid = next_packet_id();
  send(make_unsubscribe({pid, {filter}}));
}

bool MqttChannel::flush(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return inflight_.empty() || !alive_; }) && inflight_.empty();
}

void MqttChannel::reader_loop() {
  const auto keepalive = std::chrono::seconds(config_.keepalive_seconds);
  try {
    while (!stop_) {
      auto packet = reader_.next(stream_, std::chrono::milliseconds(100));
      if (packet) handle(*packet);
      if (keepalive.count() > 0) {
        std::chrono::steady_clock::time_point last;
        {
          std::lock_guard lock(write_mu_);
          last = last_send_;
        }
        if (std::chrono::steady_clock::now() - last >= keepalive / 2) send(make_simple(PacketType::pingreq));
      }
    }
  } catch (const std::exception& ex) {
    if (!stop_) spdlog::warn("mqtt: connection to {} lost: {}", config_.broker_uri, ex.what());
  }
  alive_ = false;
  std::lock_guard lock(mu_);
  cv_.notify_all();
}

void MqttChannel::handle(const Packet& packet) {
  switch (packet.type) {
    case PacketType::publish: {
      Publish pub = parse_publish(packet);
      bool deliver = true;
      if (pub.qos == 2) {
        std::lock_guard lock(mu_);
        deliver = inbound_qos2_.insert(pub.packet_id).second;
      }
      if (deliver) {
        std::vector<std::shared_ptr<transport::Handler>> targets;
        {
          std::lock_guard lock(mu_);
          for (const auto& [id, sub] : subs_)
            if (transport::topic_matches(sub.filter, pub.topic)) targets.push_back(sub.handler);
        }
        const transport::Message msg{pub.topic, pub.payload};
        for (const auto& h : targets) {
          try {
            (*h)(msg);
          } catch (const std::exception& ex) {
            spdlog::warn("mqtt handler for '{}' threw: {}", pub.topic, ex.what());
          }
        }
      }
      if (pub.qos == 1) send(make_ack(PacketType::puback, pub.packet_id));
      if (pub.qos == 2) send(make_ack(PacketType::pubrec, pub.packet_id));
      break;
    }
    case PacketType::pubrel: {
      const std::uint16_t pid = parse_packet_id(packet);
      {
        std::lock_guard lock(mu_);
        inbound_qos2_.erase(pid);
      }
      send(make_ack(PacketType::pubcomp, pid));
      break;
    }
    case PacketType::pubrec:
      send(make_ack(PacketType::pubrel, parse_packet_id(packet)));
      break;
    case PacketType::puback:
    case PacketType::pubcomp: {
      std::lock_guard lock(mu_);
      inflight_.erase(parse_packet_id(packet));
      cv_.notify_all();
      break;
    }
    case PacketType::suback: {
      const std::uint16_t pid = parse_packet_id(packet);
      const auto codes = parse_suback_codes(packet);
      std::lock_guard lock(mu_);
      sub_results_[pid] = !codes.empty() && codes.front() != 0x80;
      awaiting_ack_.erase(pid);
      cv_.notify_all();
      break;
    }
    case PacketType::unsuback: {
      std::lock_guard lock(mu_);
      awaiting_ack_.erase(parse_packet_id(packet));
      cv_.notify_all();
      break;
    }
    case PacketType::pingresp: break;
    default: spdlog::warn("mqtt: unexpected packet type {} from broker", static_cast<int>(packet.type));
  }
}

}  // namespace qvote::mqtt

#include "qvote/transport.hpp"

#include <algorithm>
#include <atomic>
#include <deque>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "qvote/error.hpp"
#include "qvote/mqtt.hpp"
#include "qvote/random.hpp"

namespace qvote::transport {

namespace {

constexpr std::pair<MsgType, std::string_view> kMsgNames[] = {
    {MsgType::qkd_quantum, "QKD_QUANTUM"},
    {MsgType::qkd_bases_committee, "QKD_BASES_COMMITTEE"},
    {MsgType::qkd_bases_voter, "QKD_BASES_VOTER"},
    {MsgType::key_confirm, "KEY_CONFIRM"},
    {MsgType::key_retry, "KEY_RETRY"},
    {MsgType::vote_submit, "VOTE_SUBMIT"},
    {MsgType::receipt, "RECEIPT"},
    {MsgType::audit_request, "AUDIT_REQUEST"},
    {MsgType::audit_reveal, "AUDIT_REVEAL"},
};

[[noreturn]] void malformed(const std::string& why) { throw Error(Errc::malformed_message, "envelope: " + why); }

std::string prefix(std::string_view election) { return "qvote/" + std::string(election); }

std::string qkd(std::string_view election, std::string_view session, std::string_view leaf) {
  return prefix(election) + "/qkd/" + std::string(session) + "/" + std::string(leaf);
}

}  // namespace

std::string_view to_string(MsgType type) noexcept {
  for (const auto& [t, name] : kMsgNames)
    if (t == type) return name;
  return "UNKNOWN";
}

std::optional<MsgType> msg_type_from_string(std::string_view s) noexcept {
  for (const auto& [t, name] : kMsgNames)
    if (name == s) return t;
  return std::nullopt;
}

std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string Envelope::encode() const {
  json j = {{"version", version},   {"election_id", election_id},        {"session_id", session_id},
            {"sent_at", sent_at},   {"msg_type", to_string(msg_type)},   {"payload", payload}};
  return j.dump();
}

Envelope Envelope::decode(std::string_view text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) malformed("not valid JSON");
  if (!j.is_object()) malformed("top level must be an object");
  auto field = [&](const char* name) -> const json& {
    auto it = j.find(name);
    if (it == j.end()) malformed(std::string("missing field '") + name + "'");
    return *it;
  };
  Envelope e;
  const json& version = field("version");
  if (!version.is_number_integer() || version.get<int>() != kVersion) malformed("unsupported version");
  const json& election = field("election_id");
  const json& session = field("session_id");
  if (!election.is_string() || election.get_ref<const std::string&>().empty()) malformed("election_id must be a non-empty string");
  if (!session.is_string() || session.get_ref<const std::string&>().empty()) malformed("session_id must be a non-empty string");
  const json& type = field("msg_type");
  if (!type.is_string()) malformed("msg_type must be a string");
  auto parsed = msg_type_from_string(type.get_ref<const std::string&>());
  if (!parsed) malformed("unknown msg_type '" + type.get<std::string>() + "'");
  const json& sent = field("sent_at");
  if (!sent.is_number_integer()) malformed("sent_at must be an integer");
  const json& payload = field("payload");
  if (!payload.is_object()) malformed("payload must be an object");
  e.election_id = election.get<std::string>();
  e.session_id = session.get<std::string>();
  e.msg_type = *parsed;
  e.sent_at = sent.get<std::int64_t>();
  e.payload = payload;
  return e;
}

bool topic_matches(std::string_view filter, std::string_view topic) noexcept {
  std::size_t f = 0, t = 0;
  while (true) {
    const std::size_t fe = std::min(filter.find('/', f), filter.size());
    const std::string_view flevel = filter.substr(f, fe - f);
    if (flevel == "#") return true;
    const std::size_t te = std::min(topic.find('/', t), topic.size());
    const std::string_view tlevel = topic.substr(t, te - t);
    if (flevel != "+" && flevel != tlevel) return false;
    const bool fdone = fe == filter.size();
    const bool tdone = te == topic.size();
    if (fdone || tdone) {
      // "a/#" also matches "a".
      if (tdone && !fdone) return filter.substr(fe + 1) == "#";
      return fdone && tdone;
    }
    f = fe + 1;
    t = te + 1;
  }
}

void validate_topic(std::string_view topic) {
  if (topic.empty()) throw Error(Errc::invalid_argument, "topic must not be empty");
  if (topic.find_first_of("+#") != std::string_view::npos || topic.find('\0') != std::string_view::npos)
    throw Error(Errc::invalid_argument, "topic must not contain wildcards: " + std::string(topic));
}

void validate_filter(std::string_view filter) {
  if (filter.empty()) throw Error(Errc::invalid_argument, "filter must not be empty");
  std::size_t start = 0;
  while (true) {
    const std::size_t end = std::min(filter.find('/', start), filter.size());
    const std::string_view level = filter.substr(start, end - start);
    const bool has_wild = level.find_first_of("+#") != std::string_view::npos;
    if (has_wild && level != "+" && level != "#")
      throw Error(Errc::invalid_argument, "wildcard must occupy a whole level: " + std::string(filter));
    if (level == "#" && end != filter.size())
      throw Error(Errc::invalid_argument, "'#' must be the last level: " + std::string(filter));
    if (end == filter.size()) break;
    start = end + 1;
  }
}

namespace topics {
std::string quantum(std::string_view e, std::string_view s) { return qkd(e, s, "quantum"); }
std::string bases_committee(std::string_view e, std::string_view s) { return qkd(e, s, "bases/committee"); }
std::string bases_voter(std::string_view e, std::string_view s) { return qkd(e, s, "bases/voter"); }
std::string confirm(std::string_view e, std::string_view s) { return qkd(e, s, "confirm"); }
std::string vote(std::string_view e, std::string_view s) { return prefix(e) + "/vote/" + std::string(s); }
std::string receipt(std::string_view e, std::string_view s) { return prefix(e) + "/receipt/" + std::string(s); }
std::string audit(std::string_view e, std::string_view s) { return prefix(e) + "/audit/" + std::string(s); }

std::vector<std::string> committee_filters(std::string_view e) {
  return {quantum(e, "+"), bases_voter(e, "+"), confirm(e, "+"), vote(e, "+"), audit(e, "+")};
}
}  // namespace topics

void ChannelConfig::validate() const {
  if (!(drop_probability >= 0.0 && drop_probability <= 1.0))
    throw Error(Errc::invalid_argument, "drop_probability must lie in [0, 1]");
  if (const auto* m = std::get_if<Mqtt>(&binding)) {
    if (m->qos < 0 || m->qos > 2) throw Error(Errc::invalid_argument, "MQTT QoS must be 0, 1 or 2");
    if (m->keepalive_seconds < 0 || m->keepalive_seconds > 65535)
      throw Error(Errc::invalid_argument, "keepalive must fit in 16 bits");
    if (drop_probability > 0.0) throw Error(Errc::invalid_argument, "fault injection is only available on loopback");
    mqtt::parse_broker_uri(m->broker_uri);
  }
}

ChannelConfig ChannelConfig::from_uri(std::string_view uri) {
  ChannelConfig c;
  if (uri.empty() || uri == "loopback") return c;
  Mqtt m;
  m.broker_uri = std::string(uri);
  mqtt::parse_broker_uri(m.broker_uri);
  c.binding = m;
  return c;
}

// ---------------------------------------------------------------- loopback

struct LoopbackBroker::State {
  struct Sub {
    SubscriptionId id;
    std::uint64_t client;
    std::string filter;
    std::shared_ptr<Handler> handler;
  };

  explicit State(ChannelConfig c) : config(std::move(c)), fault_rng(config.fault_seed) {}

  ChannelConfig config;
  std::mutex mu;
  std::vector<Sub> subs;
  std::deque<Message> queue;
  bool draining = false;
  Rng fault_rng;
  std::shared_ptr<Interceptor> interceptor;
  SubscriptionId next_sub = 1;
  std::uint64_t next_client = 1;
  std::atomic<std::uint64_t> delivered{0};
  std::atomic<std::uint64_t> dropped{0};

  void enqueue(Message m) {
    {
      std::lock_guard lock(mu);
      queue.push_back(std::move(m));
      if (draining) return;
      draining = true;
    }
    drain();
  }

  void drain() {
    while (true) {
      Message m;
      bool drop = false;
      std::shared_ptr<Interceptor> hook;
      {
        std::lock_guard lock(mu);
        if (queue.empty()) {
          draining = false;
          return;
        }
        m = std::move(queue.front());
        queue.pop_front();
        if (config.drop_probability > 0.0) drop = fault_rng.bernoulli(config.drop_probability);
        hook = interceptor;
      }
      if (config.delay) std::this_thread::sleep_for(*config.delay);
      if (!drop && hook && !(*hook)(m.topic, m.payload)) drop = true;
      if (drop) {
        ++dropped;
        continue;
      }
      std::vector<std::shared_ptr<Handler>> targets;
      {
        std::lock_guard lock(mu);
        for (const auto& s : subs)
          if (topic_matches(s.filter, m.topic)) targets.push_back(s.handler);
      }
      for (const auto& h : targets) {
        try {
          (*h)(m);
        } catch (const std::exception& ex) {
          spdlog::warn("loopback handler for '{}' threw: {}", m.topic, ex.what());
        }
        ++delivered;
      }
    }
  }
};

namespace {

class LoopbackChannel final : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<LoopbackBroker::State> state, std::uint64_t client)
      : state_(std::move(state)), client_(client) {}

  ~LoopbackChannel() override {
    std::lock_guard lock(state_->mu);
    std::erase_if(state_->subs, [&](const auto& s) { return s.client == client_; });
  }

  Ack publish_raw(const std::string& topic, std::string payload) override {
    validate_topic(topic);
    if (payload.size() > kMaxPayloadBytes)
      throw Error(Errc::payload_too_large, "payload of " + std::to_string(payload.size()) + " bytes exceeds 256 KiB");
    state_->enqueue({topic, std::move(payload)});
    return {};
  }

  SubscriptionId subscribe(const std::string& filter, Handler handler) override {
    validate_filter(filter);
    auto h = std::make_shared<Handler>(std::move(handler));
    std::lock_guard lock(state_->mu);
    for (auto& s : state_->subs) {
      if (s.client == client_ && s.filter == filter) {
        s.handler = std::move(h);
        return s.id;
      }
    }
    const SubscriptionId id = state_->next_sub++;
    state_->subs.push_back({id, client_, filter, std::move(h)});
    return id;
  }

  void unsubscribe(SubscriptionId id) override {
    std::lock_guard lock(state_->mu);
    std::erase_if(state_->subs, [&](const auto& s) { return s.id == id && s.client == client_; });
  }

 private:
  std::shared_ptr<LoopbackBroker::State> state_;
  std::uint64_t client_;
};

}  // namespace

LoopbackBroker::LoopbackBroker(ChannelConfig config) {
  config.validate();
  if (!config.is_loopback()) throw Error(Errc::invalid_argument, "LoopbackBroker needs a loopback configuration");
  state_ = std::make_shared<State>(std::move(config));
}

LoopbackBroker::~LoopbackBroker() = default;

std::unique_ptr<Channel> LoopbackBroker::connect(std::string) {
  std::lock_guard lock(state_->mu);
  return std::make_unique<LoopbackChannel>(state_, state_->next_client++);
}

void LoopbackBroker::set_interceptor(Interceptor interceptor) {
  std::lock_guard lock(state_->mu);
  state_->interceptor = interceptor ? std::make_shared<Interceptor>(std::move(interceptor)) : nullptr;
}

std::uint64_t LoopbackBroker::delivered() const { return state_->delivered.load(); }
std::uint64_t LoopbackBroker::dropped() const { return state_->dropped.load(); }

std::unique_ptr<Channel> open_channel(const ChannelConfig& config, LoopbackBroker* loopback, std::string client_id) {
  config.validate();
  if (config.is_loopback()) {
    if (!loopback) throw Error(Errc::invalid_argument, "loopback channel requires a LoopbackBroker");
    return loopback->connect(std::move(client_id));
  }
  auto m = std::get<ChannelConfig::Mqtt>(config.binding);
  if (!client_id.empty()) m.client_id = std::move(client_id);
  return std::make_unique<mqtt::MqttChannel>(m);
}

}  // namespace qvote::transport

#include "support/mini_broker.hpp"

#include <algorithm>

namespace qvote::testing {

using namespace std::chrono_literals;

MiniBroker::MiniBroker() : listener_("127.0.0.1", 0) {
  accept_thread_ = std::thread([this] { accept_loop(); });
}

MiniBroker::~MiniBroker() { stop(); }

void MiniBroker::stop() {
  if (stop_.exchange(true)) return;
  listener_.close();
  if (accept_thread_.joinable()) accept_thread_.join();
  drop_clients();
  std::list<std::shared_ptr<Client>> clients;
  {
    std::lock_guard lock(mu_);
    clients.swap(clients_);
  }
  for (auto& c : clients)
    if (c->thread.joinable()) c->thread.join();
}

void MiniBroker::drop_clients() {
  std::lock_guard lock(mu_);
  for (auto& c : clients_) {
    c->closed = true;
    c->stream.shutdown();
  }
}

std::size_t MiniBroker::clients() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(
      std::count_if(clients_.begin(), clients_.end(), [](const auto& c) { return !c->closed.load(); }));
}

void MiniBroker::accept_loop() {
  while (!stop_) {
    mqtt::TcpStream s;
    try {
      s = listener_.accept(100ms);
    } catch (const std::exception&) {
      return;
    }
    if (!s.valid()) continue;
    auto client = std::make_shared<Client>();
    client->stream = std::move(s);
    std::lock_guard lock(mu_);
    clients_.push_back(client);
    client->thread = std::thread([this, client] { serve(client); });
  }
}

void MiniBroker::send(Client& client, const mqtt::Packet& packet) {
  if (client.closed) return;
  const Bytes bytes = mqtt::encode(packet);
  std::lock_guard lock(client.write_mu);
  try {
    client.stream.send_all(bytes);
  } catch (const std::exception&) {
    client.closed = true;
  }
}

void MiniBroker::route(const mqtt::Publish& publish) {
  std::vector<std::pair<std::shared_ptr<Client>, int>> targets;
  {
    std::lock_guard lock(mu_);
    for (auto& c : clients_) {
      if (c->closed) continue;
      std::lock_guard cl(c->mu);
      int best = -1;
      for (const auto& [filter, qos] : c->filters)
        if (transport::topic_matches(filter, publish.topic)) best = std::max(best, qos);
      if (best >= 0) targets.emplace_back(c, best);
    }
  }
  for (auto& [c, sub_qos] : targets) {
    mqtt::Publish out;
    out.topic = publish.topic;
    out.payload = publish.payload;
    out.qos = std::min(publish.qos, sub_qos);
    if (out.qos > 0) {
      std::lock_guard cl(c->mu);
      if (++c->next_pid == 0) ++c->next_pid;
      out.packet_id = c->next_pid;
    }
    send(*c, mqtt::make_publish(out));
    ++routed_;
  }
}

void MiniBroker::serve(std::shared_ptr<Client> client) {
  mqtt::PacketReader reader;
  bool connected = false;
  while (!stop_ && !client->closed) {
    std::optional<mqtt::Packet> p;
    try {
      p = reader.next(client->stream, 100ms);
    } catch (const std::exception&) {
      break;
    }
    if (!p) continue;
    try {
      switch (p->type) {
        case mqtt::PacketType::connect: {
          auto c = mqtt::parse_connect(*p);
          client->id = c.client_id;
          connected = true;
          send(*client, mqtt::make_connack(0));
          break;
        }
        case mqtt::PacketType::subscribe: {
          auto s = mqtt::parse_subscribe(*p);
          std::vector<std::uint8_t> codes;
          {
            std::lock_guard lock(client->mu);
            for (const auto& [filter, qos] : s.filters) {
              client->filters[filter] = std::min(qos, 2);
              codes.push_back(static_cast<std::uint8_t>(std::min(qos, 2)));
            }
          }
          send(*client, mqtt::make_suback(s.packet_id, codes));
          break;
        }
        case mqtt::PacketType::unsubscribe: {
          auto u = mqtt::parse_unsubscribe(*p);
          {
            std::lock_guard lock(client->mu);
            for (const auto& f : u.filters) client->filters.erase(f);
          }
          send(*client, mqtt::make_ack(mqtt::PacketType::unsuback, u.packet_id));
          break;
        }
        case mqtt::PacketType::publish: {
          auto pub = mqtt::parse_publish(*p);
          if (pub.qos == 0) {
            route(pub);
          } else if (pub.qos == 1) {
            send(*client, mqtt::make_ack(mqtt::PacketType::puback, pub.packet_id));
            route(pub);
          } else {
            {
              std::lock_guard lock(client->mu);
              client->inbound_qos2[pub.packet_id] = pub;
            }
            send(*client, mqtt::make_ack(mqtt::PacketType::pubrec, pub.packet_id));
          }
          break;
        }
        case mqtt::PacketType::pubrel: {
          const auto id = mqtt::parse_packet_id(*p);
          std::optional<mqtt::Publish> pub;
          {
            std::lock_guard lock(client->mu);
            auto it = client->inbound_qos2.find(id);
            if (it != client->inbound_qos2.end()) {
              pub = std::move(it->second);
              client->inbound_qos2.erase(it);
            }
          }
          send(*client, mqtt::make_ack(mqtt::PacketType::pubcomp, id));
          if (pub) route(*pub);
          break;
        }
        case mqtt::PacketType::pubrec:
          send(*client, mqtt::make_ack(mqtt::PacketType::pubrel, mqtt::parse_packet_id(*p)));
          break;
        case mqtt::PacketType::pingreq: send(*client, mqtt::make_simple(mqtt::PacketType::pingresp)); break;
        case mqtt::PacketType::disconnect: client->closed = true; break;
        default: break;
      }
    } catch (const std::exception&) {
      break;
    }
    if (!connected) break;
  }
  client->closed = true;
  client->stream.shutdown();
}

}  // namespace qvote::testing

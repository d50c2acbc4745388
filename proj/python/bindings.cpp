#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "qvote/bench.hpp"
#include "qvote/encoding.hpp"
#include "qvote/qasm.hpp"
#include "qvote/service.hpp"

#include <spdlog/spdlog.h>

namespace py = pybind11;
using namespace qvote;

namespace {

bb84::NoiseSpec noise_spec(double max_p, bool off, bool eve) {
  auto n = off ? bb84::NoiseSpec::off() : bb84::NoiseSpec::uniform(max_p);
  return n.with_eavesdropper(eve);
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Bytes as_bytes(const py::bytes& b) { return to_bytes(std::string(b)); }

py::dict qkd_session(std::size_t raw_length, std::uint64_t seed, double noise_max, bool noise_off, bool eve,
                     std::uint64_t shots, std::size_t max_attempts) {
  bb84::QkdConfig c;
  c.raw_length = raw_length;
  c.shots = shots;
  c.max_attempts = max_attempts;
  bb84::SessionTranscript t;
  {
    py::gil_scoped_release release;
    try {
      t = bb84::run_session(c, noise_spec(noise_max, noise_off, eve), seed);
    } catch (const bb84::SessionFailed& f) {
      t = f.transcript();
    }
  }
  py::dict d;
  d["voter_bits"] = t.voter_bits.to_string();
  d["voter_bases"] = bb84::to_string(t.voter_bases);
  d["committee_bases"] = bb84::to_string(t.committee_bases);
  d["measurements"] = t.committee_measurements.to_string();
  d["voter_key"] = t.voter_key.bits.to_string();
  d["committee_key"] = t.committee_key.bits.to_string();
  d["attempts"] = t.attempts;
  d["confirmed"] = t.confirmed;
  return d;
}

py::list cast_votes(const std::vector<std::pair<std::string, std::string>>& ballots, const std::string& ledger,
                    std::uint64_t seed, double noise_max, bool noise_off, std::uint64_t shots) {
  std::vector<std::pair<std::string, std::string>> out;
  {
    py::gil_scoped_release release;
    transport::LoopbackBroker broker;
    service::CommitteeService svc({}, ledger);
    auto c = broker.connect("committee");
    auto v = broker.connect("voter");
    svc.attach(*c);
    protocol::VoterConfig cfg;
    cfg.noise = noise_spec(noise_max, noise_off, false);
    cfg.qkd.shots = shots;
    Rng rng(seed);
    for (const auto& [vote, id] : ballots) {
      auto st = protocol::voter_cast(protocol::Ballot::of(vote, id), cfg, *v, rng);
      out.emplace_back(st.session_id, st.verified() ? to_hex(*st.remote_receipt) : std::string());
    }
    svc.detach_all();
  }
  py::list l;
  for (auto& [s, r] : out) l.append(py::make_tuple(s, r.empty() ? py::object(py::none()) : py::str(r)));
  return l;
}

}  // namespace

PYBIND11_MODULE(_qvote, m) {
  m.doc() = "BB84-keyed dual-key voting simulator";
  spdlog::set_level(spdlog::level::warn);

  m.def("set_log_level", [](const std::string& level) { spdlog::set_level(spdlog::level::from_str(level)); });

  py::register_exception<Error>(m, "QvoteError", PyExc_RuntimeError);

  m.def("sha256", [](const py::bytes& b) { return to_hex(sha256(std::string(b))); });
  m.def("receipt_hash", [](const py::bytes& e_vote, const py::bytes& e_id) {
    return to_hex(crypto::receipt_hash(as_bytes(e_vote), as_bytes(e_id)));
  });
  m.def("key_digest", [](const std::string& bits) { return to_hex(crypto::key_digest(BitString::from_string(bits))); });
  m.def("xor_apply", [](const py::bytes& msg, const std::string& key) {
    const Bytes out = crypto::xor_apply(as_bytes(msg), BitString::from_string(key));
    return py::bytes(reinterpret_cast<const char*>(out.data()), out.size());
  });

  m.def(
      "emit_prep",
      [](const std::string& bits, const std::string& bases) {
        auto b = BitString::from_string(bits);
        return qasm::emit_prep(bb84::prepare_frame(b, bb84::bases_from_string(bases)));
      },
      py::arg("bits"), py::arg("bases"));
  m.def("parse_prep", [](const std::string& text) {
    auto f = qasm::parse_prep(text);
    std::string bits, bases;
    for (const auto& q : f) {
      bits += q.bit ? '1' : '0';
      bases += bb84::to_char(q.basis);
    }
    return py::make_tuple(bits, bases);
  });

  m.def("qkd_session", &qkd_session, py::arg("raw_length") = 8, py::arg("seed") = 0, py::arg("noise_max") = 0.2,
        py::arg("noise_off") = false, py::arg("eve") = false, py::arg("shots") = 10'000, py::arg("max_attempts") = 1);

  m.def(
      "analytic_success",
      [](std::size_t n, double noise_max, bool eve) {
        return bench::analytic_success(n, bb84::NoiseSpec::uniform(noise_max).with_eavesdropper(eve));
      },
      py::arg("n"), py::arg("noise_max") = 0.2, py::arg("eve") = false);

  m.def(
      "key_size_sweep",
      [](std::vector<std::size_t> sizes, std::size_t trials, std::uint64_t seed, std::uint64_t shots) {
        bench::SweepConfig c;
        c.sizes = std::move(sizes);
        c.trials = trials;
        c.seed = seed;
        c.shots = shots;
        nlohmann::json j;
        {
          py::gil_scoped_release release;
          j = bench::key_size_sweep(c).to_json();
        }
        return to_py(j);
      },
      py::arg("sizes") = std::vector<std::size_t>{2, 4, 8, 16, 32}, py::arg("trials") = 10'000,
      py::arg("seed") = 0, py::arg("shots") = 10'000);

  m.def(
      "throughput",
      [](std::size_t votes, std::size_t workers, std::uint64_t seed, std::uint64_t shots) {
        bench::ThroughputConfig c;
        c.votes = votes;
        c.workers = workers;
        c.seed = seed;
        c.shots = shots;
        nlohmann::json j;
        {
          py::gil_scoped_release release;
          j = bench::throughput_bench(c).to_json();
        }
        return to_py(j);
      },
      py::arg("votes") = 1000, py::arg("workers") = 1, py::arg("seed") = 0, py::arg("shots") = 10'000);

  m.def("cast_votes", &cast_votes, py::arg("ballots"), py::arg("ledger"), py::arg("seed") = 0,
        py::arg("noise_max") = 0.2, py::arg("noise_off") = true, py::arg("shots") = 10'000);

  m.def(
      "tally",
      [](const std::string& ledger, std::vector<std::string> candidates) {
        return to_py(service::tally(std::filesystem::path(ledger), candidates).to_json());
      },
      py::arg("ledger"), py::arg("candidates") = std::vector<std::string>{});
  m.def("check_ledger", [](const std::string& ledger) { return to_py(service::check_ledger(ledger).to_json()); });
}

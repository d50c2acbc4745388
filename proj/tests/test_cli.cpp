#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    std::string tmpl = (std::filesystem::temp_directory_path() / "qvote-cli-XXXXXX").string();
    dir_ = ::mkdtemp(tmpl.data());
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  Outcome run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && env -u QVOTE_BROKER_URI '" + QVOTE_BINARY + "' " + args +
                            " 2>/dev/null";
    Outcome r;
    FILE* p = ::popen(cmd.c_str(), "r");
    std::array<char, 4096> buf{};
    while (auto n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  nlohmann::json json_of(const std::string& args) const {
    auto r = run("--json " + args);
    return nlohmann::json::parse(r.out);
  }

  std::filesystem::path dir_;
};

}  // namespace

TEST_F(Cli, VoteVerifyTally) {
  EXPECT_EQ(run("--seed 1 vote --candidate A --voter-id v1 --noise-off --state s1.json").code, 0);
  EXPECT_EQ(run("--seed 2 vote --candidate A --voter-id v2 --noise-off --state s2.json").code, 0);
  EXPECT_EQ(run("--seed 3 vote --candidate B --voter-id v3 --noise-off --state s3.json").code, 0);
  EXPECT_EQ(run("verify --state s1.json").code, 0);
  EXPECT_EQ(run("verify --requery --state s2.json").code, 0);

  auto t = json_of("tally");
  EXPECT_EQ(t["counts"], (nlohmann::json{{"A", 2}, {"B", 1}}));
  EXPECT_EQ(t["total_sessions"], 3);

  auto c = run("ledger-check");
  EXPECT_EQ(c.code, 0);
  EXPECT_NE(c.out.find("ledger ok"), std::string::npos);
}

TEST_F(Cli, AuditWithStoredAndWrongKeys) {
  ASSERT_EQ(run("--seed 4 vote --candidate C --voter-id carol --noise-off").code, 0);
  EXPECT_EQ(run("audit --key 1").code, 1);
  auto a = json_of("audit");
  EXPECT_EQ(a["revealed"], true);
}

TEST_F(Cli, TamperedLedgerFailsCheck) {
  ASSERT_EQ(run("--seed 5 vote --candidate A --voter-id v --noise-off").code, 0);
  {
    std::ofstream out(dir_ / "qvote-ledger.jsonl", std::ios::app);
    out << "{\"kind\":\"vote\",\"session_id\":\"x\",\"e_vote\":\"QQ==\",\"e_id\":\"QQ==\",\"receipt\":\"00\"}\n";
  }
  EXPECT_EQ(run("ledger-check").code, 3);
}

TEST_F(Cli, QkdDemoIsDeterministic) {
  auto a = run("--seed 7 qkd-demo --raw-length 8");
  auto b = run("--seed 7 qkd-demo --raw-length 8");
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("step 6"), std::string::npos);
  auto j = json_of("--seed 7 qkd-demo --raw-length 8 --qasm");
  EXPECT_EQ(j["voter_bits"].get<std::string>().size(), 8u);
  EXPECT_NE(j["qasm"].get<std::string>().find("OPENQASM"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("vote --bogus").code, 2);
  EXPECT_EQ(run("qkd-demo --noise-max 3").code, 2);
  EXPECT_EQ(run("tally").code, 6);
  EXPECT_EQ(run("verify").code, 6);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, BenchCommandsReport) {
  auto t = json_of("--seed 1 bench-throughput --votes 20 --shots 16 --no-fsync");
  EXPECT_EQ(t["verified"], 20);
  auto s = json_of("--seed 1 bench-sweep --sizes 2,4 --trials 200 --shots 16");
  EXPECT_EQ(s["points"].size(), 2u);
  auto csv = run("--seed 1 bench-sweep --sizes 4 --trials 50 --shots 8 --csv");
  EXPECT_EQ(csv.code, 0);
  EXPECT_EQ(csv.out.rfind("raw_length", 0), 0u);
}

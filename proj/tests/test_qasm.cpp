#include <gtest/gtest.h>

#include "qvote/qasm.hpp"

using namespace qvote;
using namespace qvote::bb84;

namespace {

PreparedFrame random_frame(Rng& rng, std::size_t n) { return prepare_frame(random_bits(n, rng), random_bases(n, rng)); }

ParseError::Kind kind_of(std::string_view text, std::size_t* line = nullptr) {
  try {
    qasm::parse_prep(text);
  } catch (const ParseError& e) {
    if (line) *line = e.line();
    return e.kind();
  }
  ADD_FAILURE() << "accepted: " << text;
  return ParseError::Kind::syntax;
}

}  // namespace

TEST(Qasm, EmitsTheCanonicalForm) {
  auto f = prepare_frame(BitString::from_string("101"), bases_from_string("RDD"));
  EXPECT_EQ(qasm::emit_prep(f), "OPENQASM 3.0;\nqubit[3] q;\nx q[0];\nh q[1];\nx q[2];\nh q[2];\n");
}

TEST(Qasm, ParseInvertsEmit) {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    auto f = random_frame(rng, 1 + rng() % 256);
    EXPECT_EQ(qasm::parse_prep(qasm::emit_prep(f)), f);
  }
}

TEST(Qasm, AcceptsCommentsWhitespaceAndShortHeader) {
  auto f = qasm::parse_prep("OPENQASM 3;  // header\n\n  qubit[2]   reg ;\nx reg[1]; h reg[1];\n");
  EXPECT_EQ(f.size(), 2u);
  EXPECT_EQ(f[1].bit, 1);
  EXPECT_EQ(f[1].basis, Basis::Diagonal);
  EXPECT_EQ(f[0].bit, 0);
}

TEST(Qasm, RejectsBadHeaders) {
  EXPECT_EQ(kind_of("OPENQASM 2.0;\nqubit[1] q;\n"), ParseError::Kind::header);
  EXPECT_EQ(kind_of("qubit[1] q;\n"), ParseError::Kind::header);
  EXPECT_EQ(kind_of(""), ParseError::Kind::header);
}

TEST(Qasm, ReportsErrorKindsWithLines) {
  std::size_t line = 0;
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nx r[0];\n", &line), ParseError::Kind::undeclared_register);
  EXPECT_EQ(line, 3u);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\n\nx q[2];\n", &line), ParseError::Kind::out_of_range);
  EXPECT_EQ(line, 4u);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\ncx q[0], q[1];\n", &line), ParseError::Kind::unsupported_statement);
  EXPECT_EQ(line, 3u);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nmeasure q[0];\n"), ParseError::Kind::unsupported_statement);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nh q[0];\nx q[0];\n", &line), ParseError::Kind::gate_order);
  EXPECT_EQ(line, 4u);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nx q[0];\nx q[0];\n"), ParseError::Kind::gate_order);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nh q[1];\nh q[1];\n"), ParseError::Kind::gate_order);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nx q[0]\n"), ParseError::Kind::syntax);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nx q[;\n"), ParseError::Kind::syntax);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[0] q;\n"), ParseError::Kind::out_of_range);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nqubit[2] q;\nqubit[2] r;\n"), ParseError::Kind::unsupported_statement);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\nx q[0];\n"), ParseError::Kind::undeclared_register);
  EXPECT_EQ(kind_of("OPENQASM 3.0;\n"), ParseError::Kind::undeclared_register);
}

TEST(Qasm, ErrorMessageNamesKindAndLine) {
  try {
    qasm::parse_prep("OPENQASM 3.0;\nqubit[1] q;\nx q[5];\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("out-of-range"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    EXPECT_EQ(e.code(), Errc::parse_error);
  }
}

// Mutated documents either fail to parse or decode to a frame whose canonical
// form re-parses to the same frame.
TEST(Qasm, MutationsNeverDecodeSilentlyWrong) {
  Rng rng(2);
  const std::string alphabet = "xhq[];0123456789 \n/OPENQASMubit.";
  std::size_t accepted = 0;
  for (int i = 0; i < 3000; ++i) {
    std::string doc = qasm::emit_prep(random_frame(rng, 1 + rng() % 16));
    const int edits = 1 + int(rng() % 3);
    for (int e = 0; e < edits; ++e) {
      const std::size_t pos = rng() % doc.size();
      switch (rng() % 3) {
        case 0: doc[pos] = alphabet[rng() % alphabet.size()]; break;
        case 1: doc.erase(pos, 1); break;
        default: doc.insert(pos, 1, alphabet[rng() % alphabet.size()]); break;
      }
      if (doc.empty()) doc = "x";
    }
    try {
      auto f = qasm::parse_prep(doc);
      ++accepted;
      EXPECT_EQ(qasm::parse_prep(qasm::emit_prep(f)), f);
    } catch (const ParseError&) {
    }
  }
  EXPECT_GT(accepted, 0u);
}

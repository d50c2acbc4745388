#include "qvote/qasm.hpp"

#include <charconv>
#include <cctype>
#include <vector>

namespace qvote::qasm {

namespace {

using Kind = ParseError::Kind;

// Keeps a hostile `qubit[N]` from allocating unbounded memory.
constexpr std::size_t kMaxQubits = 1u << 20;

enum class TokKind { ident, number, punct };

struct Token {
  TokKind kind;
  std::string text;
  std::size_t line;
};

struct Statement {
  std::vector<Token> tokens;
  std::size_t line;
};

std::vector<Statement> split_statements(std::string_view text, std::size_t& last_line) {
  std::vector<Statement> statements;
  Statement current{{}, 0};
  std::size_t line = 1;
  std::size_t i = 0;
  auto push = [&](TokKind kind, std::string tok) {
    if (current.tokens.empty()) current.line = line;
    current.tokens.push_back({kind, std::move(tok), line});
  };
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '/' && i + 1 < text.size() && text[i + 1] == '/') {
      while (i < text.size() && text[i] != '\n') ++i;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_')) ++j;
      push(TokKind::ident, std::string(text.substr(i, j - i)));
      i = j;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i;
      while (j < text.size() && (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == '.')) ++j;
      push(TokKind::number, std::string(text.substr(i, j - i)));
      i = j;
    } else if (c == ';') {
      if (current.tokens.empty()) throw ParseError(Kind::syntax, line, "empty statement");
      statements.push_back(std::move(current));
      current = {{}, 0};
      ++i;
    } else {
      push(TokKind::punct, std::string(1, c));
      ++i;
    }
  }
  if (!current.tokens.empty()) throw ParseError(Kind::syntax, current.line, "statement is missing its ';'");
  last_line = line;
  return statements;
}

bool is_punct(const Token& t, char c) { return t.kind == TokKind::punct && t.text.size() == 1 && t.text[0] == c; }

std::size_t parse_index(const Token& t) {
  if (t.kind != TokKind::number || t.text.find('.') != std::string::npos)
    throw ParseError(Kind::syntax, t.line, "expected an integer index, got '" + t.text + "'");
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), value);
  if (ec != std::errc{} || ptr != t.text.data() + t.text.size())
    throw ParseError(Kind::out_of_range, t.line, "index '" + t.text + "' is too large");
  return value;
}

// Matches `<name> [ <int> ]` starting at tokens[first]; the statement must end there.
std::pair<std::string, std::size_t> parse_indexed(const Statement& s, std::size_t first) {
  const auto& tk = s.tokens;
  if (tk.size() != first + 4 || tk[first].kind != TokKind::ident || !is_punct(tk[first + 1], '[') ||
      !is_punct(tk[first + 3], ']'))
    throw ParseError(Kind::syntax, s.line, "expected '<register>[<index>]'");
  return {tk[first].text, parse_index(tk[first + 2])};
}

}  // namespace

std::string emit_prep(const bb84::PreparedFrame& frame) {
  if (frame.size() == 0) throw Error(Errc::invalid_argument, "cannot emit an empty frame");
  std::string out = "OPENQASM 3.0;\nqubit[" + std::to_string(frame.size()) + "] q;\n";
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const std::string target = "q[" + std::to_string(i) + "];\n";
    if (frame[i].bit) out += "x " + target;
    if (frame[i].basis == bb84::Basis::Diagonal) out += "h " + target;
  }
  return out;
}

bb84::PreparedFrame parse_prep(std::string_view text) {
  std::size_t last_line = 1;
  const std::vector<Statement> statements = split_statements(text, last_line);

  if (statements.empty()) throw ParseError(Kind::header, 1, "missing 'OPENQASM 3.0;' header");
  {
    const Statement& h = statements.front();
    const bool ok = h.tokens.size() == 2 && h.tokens[0].kind == TokKind::ident && h.tokens[0].text == "OPENQASM" &&
                    h.tokens[1].kind == TokKind::number && (h.tokens[1].text == "3.0" || h.tokens[1].text == "3");
    if (!ok) throw ParseError(Kind::header, h.line, "expected 'OPENQASM 3.0;'");
  }

  std::string reg;
  std::size_t qubits = 0;
  // 0 = untouched, 1 = x applied, 2 = h applied (terminal).
  std::vector<std::uint8_t> state;
  std::vector<std::uint8_t> bit;

  for (std::size_t k = 1; k < statements.size(); ++k) {
    const Statement& s = statements[k];
    const Token& head = s.tokens.front();
    if (head.kind == TokKind::ident && head.text == "qubit") {
      if (!reg.empty()) throw ParseError(Kind::unsupported_statement, s.line, "only one qubit register is allowed");
      const auto& tk = s.tokens;
      if (tk.size() != 5 || !is_punct(tk[1], '[') || !is_punct(tk[3], ']') || tk[4].kind != TokKind::ident)
        throw ParseError(Kind::syntax, s.line, "expected 'qubit[<n>] <name>;'");
      qubits = parse_index(tk[2]);
      if (qubits == 0 || qubits > kMaxQubits)
        throw ParseError(Kind::out_of_range, s.line, "register size must be in [1, " + std::to_string(kMaxQubits) + "]");
      reg = tk[4].text;
      state.assign(qubits, 0);
      bit.assign(qubits, 0);
      continue;
    }
    const bool is_x = head.kind == TokKind::ident && head.text == "x";
    const bool is_h = head.kind == TokKind::ident && head.text == "h";
    if (!is_x && !is_h) throw ParseError(Kind::unsupported_statement, s.line, "unsupported statement '" + head.text + "'");

    auto [name, index] = parse_indexed(s, 1);
    if (reg.empty() || name != reg) throw ParseError(Kind::undeclared_register, s.line, "undeclared register '" + name + "'");
    if (index >= qubits)
      throw ParseError(Kind::out_of_range, s.line,
                       "index " + std::to_string(index) + " outside qubit[" + std::to_string(qubits) + "]");
    if (is_x) {
      if (state[index] != 0) throw ParseError(Kind::gate_order, s.line, "x must be the first gate on a qubit");
      state[index] = 1;
      bit[index] = 1;
    } else {
      if (state[index] == 2) throw ParseError(Kind::gate_order, s.line, "h applied twice to the same qubit");
      state[index] = 2;
    }
  }
  if (reg.empty()) throw ParseError(Kind::undeclared_register, last_line, "document declares no qubit register");

  std::vector<bb84::QubitPrep> preps(qubits);
  for (std::size_t i = 0; i < qubits; ++i)
    preps[i] = {bit[i], state[i] == 2 ? bb84::Basis::Diagonal : bb84::Basis::Rectilinear};
  return bb84::PreparedFrame(std::move(preps));
}

}  // namespace qvote::qasm

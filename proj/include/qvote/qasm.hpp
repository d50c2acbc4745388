#pragma once

#include <string>
#include <string_view>

#include "qvote/bb84.hpp"

/// Preparation-only QASM 3 subset used on the quantum channel:
///
///   OPENQASM 3.0;
///   qubit[n] q;
///   x q[i];      // bit = 1
///   h q[i];      // diagonal basis, always after any x on the same qubit
///
/// Anything else (measurement, classical registers, other gates) is rejected.
namespace qvote::qasm {

std::string emit_prep(const bb84::PreparedFrame& frame);

/// Throws ParseError carrying the line of the first offending statement.
bb84::PreparedFrame parse_prep(std::string_view text);

}  // namespace qvote::qasm

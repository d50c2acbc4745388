"""Python access to the qvote simulator core."""

from ._qvote import (
    QvoteError,
    analytic_success,
    cast_votes,
    check_ledger,
    emit_prep,
    key_digest,
    key_size_sweep,
    parse_prep,
    qkd_session,
    receipt_hash,
    set_log_level,
    sha256,
    tally,
    throughput,
    xor_apply,
)

__all__ = [
    "QvoteError",
    "analytic_success",
    "cast_votes",
    "check_ledger",
    "emit_prep",
    "key_digest",
    "key_size_sweep",
    "parse_prep",
    "qkd_session",
    "receipt_hash",
    "set_log_level",
    "sha256",
    "tally",
    "throughput",
    "xor_apply",
]

"""Append-only hash-chained ledger and salted-hash commit-reveal proofs."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

ZERO_HASH = bytes(32)
MIN_SALT_BYTES = 16
PAYLOAD_TYPES = ("genesis", "registration", "update-submitted", "verdict", "aggregate", "commitment")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def _encode_value(v) -> bytes:
    if isinstance(v, bytes):
        return v
    if isinstance(v, bool):
        return b"1" if v else b"0"
    if isinstance(v, (int, str)):
        return str(v).encode()
    if isinstance(v, float):
        return repr(v).encode()
    raise TypeError(f"cannot encode {type(v).__name__} in a ledger payload")


def encode_payload(kind: str, fields: dict) -> bytes:
    """Canonical payload bytes: length-prefixed kind, then name/value pairs in order."""
    out = [_lp(kind.encode())]
    for name, value in fields.items():
        out.append(_lp(name.encode()))
        out.append(_lp(_encode_value(value)))
    return b"".join(out)


def decode_payload(payload: bytes) -> tuple[str, list[tuple[str, bytes]]]:
    parts = []
    off = 0
    while off < len(payload):
        if off + 4 > len(payload):
            raise ValueError("truncated payload")
        (n,) = struct.unpack_from(">I", payload, off)
        off += 4
        if off + n > len(payload):
            raise ValueError("truncated payload")
        parts.append(payload[off : off + n])
        off += n
    if not parts or len(parts) % 2 != 1:
        raise ValueError("malformed payload")
    fields = [(parts[i].decode(), parts[i + 1]) for i in range(1, len(parts), 2)]
    return parts[0].decode(), fields


def record_digest(index: int, prev_hash: bytes, payload: bytes) -> bytes:
    return sha256(struct.pack(">Q", index) + prev_hash + payload)


@dataclass(frozen=True)
class LedgerRecord:
    index: int
    prev_hash: bytes
    payload_type: str
    payload: bytes
    record_hash: bytes


class Ledger:
    """Single-writer chain of :class:`LedgerRecord` starting from a genesis record."""

    def __init__(self, records: list[LedgerRecord] | None = None):
        if records is None:
            payload = encode_payload("genesis", {})
            records = [LedgerRecord(0, ZERO_HASH, "genesis", payload, record_digest(0, ZERO_HASH, payload))]
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def tip(self) -> LedgerRecord:
        return self.records[-1]

    def append(self, kind: str, **fields) -> LedgerRecord:
        if kind not in PAYLOAD_TYPES or kind == "genesis":
            raise ValueError(f"unknown payload type {kind!r}")
        payload = encode_payload(kind, fields)
        index = self.tip.index + 1
        prev = self.tip.record_hash
        rec = LedgerRecord(index, prev, kind, payload, record_digest(index, prev, payload))
        self.records.append(rec)
        return rec

    def verify(self) -> bool:
        return verify_chain(self.records)

    def events(self, kind: str | None = None):
        for rec in self.records:
            if kind is None or rec.payload_type == kind:
                yield rec.index, dict(decode_payload(rec.payload)[1])

    def export(self, path) -> None:
        Path(path).write_text(export_lines(self.records))

    @classmethod
    def load(cls, path) -> "Ledger":
        return cls(import_lines(Path(path).read_text()))


def verify_chain(records) -> bool:
    """True iff every record rehashes, links to its predecessor and is well-typed."""
    prev = ZERO_HASH
    for i, rec in enumerate(records):
        if rec.index != i or rec.prev_hash != prev:
            return False
        if record_digest(rec.index, rec.prev_hash, rec.payload) != rec.record_hash:
            return False
        try:
            kind, _ = decode_payload(rec.payload)
        except (ValueError, UnicodeDecodeError):
            return False
        if kind != rec.payload_type or (kind == "genesis") != (i == 0):
            return False
        prev = rec.record_hash
    return bool(records)


def export_lines(records) -> str:
    return "".join(
        f"{r.index} {r.prev_hash.hex()} {r.payload_type} {r.payload.hex()} {r.record_hash.hex()}\n"
        for r in records
    )


def import_lines(text: str) -> list[LedgerRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        idx, prev, kind, payload, rh = parts
        records.append(LedgerRecord(int(idx), bytes.fromhex(prev), kind, bytes.fromhex(payload), bytes.fromhex(rh)))
    return records


# ------------------------------------------------------------------ commit-reveal


@dataclass(frozen=True)
class Commitment:
    commit_hash: bytes
    owner: int


def commit(owner: int, reveal: bytes, salt: bytes) -> Commitment:
    if len(salt) < MIN_SALT_BYTES:
        raise ValueError(f"salt must be at least {MIN_SALT_BYTES} bytes")
    return Commitment(sha256(reveal + salt), owner)


def verify_commitment(c: Commitment, reveal: bytes, salt: bytes) -> bool:
    return sha256(reveal + salt) == c.commit_hash


def update_reveal(params_digest: bytes, score: float, agent_id: int, nonce: int) -> bytes:
    """Canonical preimage bound by an update proof."""
    return encode_payload("reveal", {"params": params_digest, "score": float(score), "agent": agent_id, "nonce": nonce})

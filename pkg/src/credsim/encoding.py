"""Canonical byte encoding shared by the ledger, wire messages, and hashes.

Every serialised structure is a tag followed by length-prefixed fields in a
fixed order, so hash chains and transcripts are bit-reproducible across runs.
"""

from __future__ import annotations

import hashlib

# Domain-separation tags for ledger entry kinds.
TAG_CERT = b"cert:"
TAG_REVOKE_ONE = b"revoke1:"
TAG_REVOKE_ALL = b"revokeN:"
TAG_KEYREG = b"keyreg:"
TAG_TOKEN_ISSUE = b"tok-issue:"
TAG_TOKEN_TRANSFER = b"tok-xfer:"
TAG_PRESENTED = b"presented:"

# Domain-separation tags for signed / blinded content. Blinded nonces and
# blinded credential keys are deliberately kept in separate hash domains.
TAG_NONCE = b"nonce:"
TAG_CRED_KEY = b"credkey:"
TAG_TOKEN_KEY = b"tokkey:"
TAG_CHALLENGE = b"challenge:"
TAG_ONE_TIME_ID = b"onetime:"
TAG_ENDORSE = b"endorse:"
TAG_RECEIPT = b"receipt:"
TAG_OBJECT = b"object:"
TAG_BASELINE_ID = b"baseid:"

GENESIS_HASH = hashlib.sha256(b"credsim-ledger-genesis:v1").digest()

NONE_U64 = 0xFFFFFFFFFFFFFFFF


def u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def read_u64(data: bytes) -> int:
    return int.from_bytes(data, "big")


def encode_fields(tag: bytes, fields: list[bytes]) -> bytes:
    """Length-prefixed field list under a fixed ASCII tag."""
    out = [len(tag).to_bytes(2, "big"), tag]
    for field in fields:
        out.append(len(field).to_bytes(4, "big"))
        out.append(field)
    return b"".join(out)


def decode_fields(data: bytes) -> tuple[bytes, list[bytes]]:
    """Inverse of encode_fields; raises ValueError on malformed input."""
    if len(data) < 2:
        raise ValueError("truncated encoding")
    tag_len = int.from_bytes(data[:2], "big")
    pos = 2 + tag_len
    if pos > len(data):
        raise ValueError("truncated tag")
    tag = data[2:pos]
    fields = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated field length")
        flen = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        if pos + flen > len(data):
            raise ValueError("truncated field")
        fields.append(data[pos : pos + flen])
        pos += flen
    return tag, fields


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hex_line(data: bytes) -> str:
    return data.hex()


def from_hex_line(line: str) -> bytes:
    return bytes.fromhex(line.strip())

"""Protocol message vocabulary and its canonical wire framing.

A message is an ordered bundle of lexicon items (a request can carry a
proof of ownership, a certificate and a blinded nonce at once). Frames
serialise one message per line so transcripts replay bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import encoding
from .encoding import read_u64, u64


class ItemKind(Enum):
    REQUEST = 1  # plain request for a credential
    REQUEST_PARAM = 2  # request carrying a parameter (a nonce, a key, an id)
    IDENTIFY = 3  # sealed foundational identifying elements
    SIGNED = 4  # message m signed by a party: (signer key id, m, sig)
    BLINDED = 5  # blinded version of a message: (value, target signer key id)
    BLIND_SIG = 6  # blind signature: (signer key id, value)
    PROVE_OWNER = 7  # (key id, public key, challenge, response sig)
    CHALLENGE_REQUEST = 8  # ask a verifier for a fresh challenge
    CHALLENGE = 9  # fresh challenge bytes from the verifier
    REQUEST_CERTS = 10  # all certificates signed by a key: (key id, bit-prefix len, prefix)
    CERT_LIST = 11  # response: canonical certificate entries
    RECEIPT = 12  # ledger receipt: (seq, head hash)
    OBJECT = 13  # one-time redeemable object: (one-time id, seq, head, signer, sig)
    VOUCHER = 14  # timely-signed one-time id: (one-time id, signer key id, sig, expiry)
    REVOKE_ONE = 15  # direct revocation push (ledgerless variants)
    REVOKE_ALL = 16
    LEDGER_APPEND = 17  # (kind tag, timestamp, author key id, author sig, payload...)
    LEDGER_UPDATES = 18  # canonical entries since the receiver's cursor
    DECISION = 19  # recorded accept/reject: (outcome, reason, cursor, refs...)
    ERROR = 20  # rejection or failure notice: (reason,)
    ACK = 21


@dataclass(frozen=True)
class Item:
    kind: ItemKind
    fields: tuple[bytes, ...]

    def encoded(self) -> bytes:
        return encoding.encode_fields(b"item:", [bytes([self.kind.value]), *self.fields])


def item_from_encoded(data: bytes) -> Item:
    tag, fields = encoding.decode_fields(data)
    if tag != b"item:" or not fields:
        raise ValueError("not an item encoding")
    return Item(kind=ItemKind(fields[0][0]), fields=tuple(fields[1:]))


@dataclass(frozen=True)
class ProtocolMessage:
    session: str
    items: tuple[Item, ...]

    def find(self, kind: ItemKind) -> Item | None:
        for item in self.items:
            if item.kind is kind:
                return item
        return None

    def find_all(self, kind: ItemKind) -> list[Item]:
        return [item for item in self.items if item.kind is kind]

    def kinds(self) -> tuple[ItemKind, ...]:
        return tuple(item.kind for item in self.items)


def frame(tick: int, sender: str, sender_label: str, receiver: str, receiver_label: str,
          message: ProtocolMessage) -> bytes:
    return encoding.encode_fields(
        b"frame:",
        [
            u64(tick),
            sender.encode(),
            sender_label.encode(),
            receiver.encode(),
            receiver_label.encode(),
            message.session.encode(),
            *[item.encoded() for item in message.items],
        ],
    )


def unframe(data: bytes) -> tuple[int, str, str, str, str, ProtocolMessage]:
    tag, fields = encoding.decode_fields(data)
    if tag != b"frame:" or len(fields) < 6:
        raise ValueError("not a frame encoding")
    message = ProtocolMessage(
        session=fields[5].decode(),
        items=tuple(item_from_encoded(blob) for blob in fields[6:]),
    )
    return (
        read_u64(fields[0]),
        fields[1].decode(),
        fields[2].decode(),
        fields[3].decode(),
        fields[4].decode(),
        message,
    )


# --- item constructors -----------------------------------------------------------


def request() -> Item:
    return Item(ItemKind.REQUEST, ())


def request_param(param: bytes) -> Item:
    return Item(ItemKind.REQUEST_PARAM, (param,))


def identify(ciphertext: bytes) -> Item:
    return Item(ItemKind.IDENTIFY, (ciphertext,))


def signed(signer_key_id: bytes, message: bytes, sig_value: bytes) -> Item:
    return Item(ItemKind.SIGNED, (signer_key_id, message, sig_value))


def blinded(value: bytes, target_key_id: bytes) -> Item:
    return Item(ItemKind.BLINDED, (value, target_key_id))


def blind_sig(signer_key_id: bytes, value: bytes) -> Item:
    return Item(ItemKind.BLIND_SIG, (signer_key_id, value))


def prove_owner(key_id: bytes, public_canonical: bytes, challenge: bytes, response: bytes) -> Item:
    return Item(ItemKind.PROVE_OWNER, (key_id, public_canonical, challenge, response))


def challenge_request() -> Item:
    return Item(ItemKind.CHALLENGE_REQUEST, ())


def challenge(value: bytes) -> Item:
    return Item(ItemKind.CHALLENGE, (value,))


def request_certs(signer_key_id: bytes, prefix_bits: int = 0, prefix: bytes = b"") -> Item:
    return Item(ItemKind.REQUEST_CERTS, (signer_key_id, u64(prefix_bits), prefix))


def cert_list(entry_blobs: list[bytes]) -> Item:
    return Item(ItemKind.CERT_LIST, tuple(entry_blobs))


def receipt(seq: int, head_hash: bytes) -> Item:
    return Item(ItemKind.RECEIPT, (u64(seq), head_hash))


def voucher(one_time_id: bytes, signer_key_id: bytes, sig_value: bytes, expiry: int) -> Item:
    return Item(ItemKind.VOUCHER, (one_time_id, signer_key_id, sig_value, u64(expiry)))


def one_time_object(one_time_id: bytes, seq: int, head_hash: bytes, signer_key_id: bytes,
                    sig_value: bytes) -> Item:
    return Item(ItemKind.OBJECT, (one_time_id, u64(seq), head_hash, signer_key_id, sig_value))


def revoke_one(target: bytes) -> Item:
    return Item(ItemKind.REVOKE_ONE, (target,))


def revoke_all(target_key_id: bytes) -> Item:
    return Item(ItemKind.REVOKE_ALL, (target_key_id,))


def ledger_append(kind_tag: bytes, timestamp: int, author_key_id: bytes, author_sig: bytes,
                  payload_fields: tuple[bytes, ...]) -> Item:
    return Item(
        ItemKind.LEDGER_APPEND, (kind_tag, u64(timestamp), author_key_id, author_sig, *payload_fields)
    )


def ledger_updates(entry_blobs: list[bytes]) -> Item:
    return Item(ItemKind.LEDGER_UPDATES, tuple(entry_blobs))


def decision(outcome: str, reason: str, cursor: int, refs: list[int]) -> Item:
    return Item(
        ItemKind.DECISION,
        (outcome.encode(), reason.encode(), u64(cursor), *[u64(r) for r in refs]),
    )


def decision_fields(item: Item) -> tuple[str, str, int, list[int]]:
    outcome = item.fields[0].decode()
    reason = item.fields[1].decode()
    cursor = read_u64(item.fields[2])
    refs = [read_u64(f) for f in item.fields[3:]]
    return outcome, reason, cursor, refs


def error(reason: str) -> Item:
    return Item(ItemKind.ERROR, (reason.encode(),))


def ack() -> Item:
    return Item(ItemKind.ACK, ())

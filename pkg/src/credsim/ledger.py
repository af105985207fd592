"""Append-only replicated log of certificates, revocations, key-registry
records, token events, and presented signatures.

There is no consensus algorithm here: the log is a single deterministic
in-process sequence, and replication is simulated by reader cursors. Every
entry is hash-chained from a fixed genesis value, so receipts and dumps can be
re-verified bit-for-bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

from . import crypto, encoding
from .encoding import NONE_U64, read_u64, sha256, u64


class LedgerError(Exception):
    pass


class InvalidAuthorError(LedgerError):
    """Author key unknown, inactive, or not allowed to write this kind."""


class InvalidSignatureError(LedgerError):
    pass


class MalformedPayloadError(LedgerError):
    pass


class PolicyError(LedgerError):
    """Entry kind disabled by configuration or targeting a protected key."""


class InsufficientBalanceError(LedgerError):
    pass


class DoubleSpendError(LedgerError):
    pass


class DuplicatePresentationError(LedgerError):
    pass


class UnknownReferenceError(LedgerError):
    pass


class CursorError(LedgerError):
    pass


class EntryKind(Enum):
    CERTIFICATE = "certificate"
    REVOKE_ONE = "revoke-one"
    REVOKE_ALL = "revoke-all"
    KEY_REGISTRY = "key-registry"
    TOKEN_ISSUE = "token-issue"
    TOKEN_TRANSFER = "token-transfer"
    PRESENTED_SIGNATURE = "presented-signature"


KIND_TAGS = {
    EntryKind.CERTIFICATE: encoding.TAG_CERT,
    EntryKind.REVOKE_ONE: encoding.TAG_REVOKE_ONE,
    EntryKind.REVOKE_ALL: encoding.TAG_REVOKE_ALL,
    EntryKind.KEY_REGISTRY: encoding.TAG_KEYREG,
    EntryKind.TOKEN_ISSUE: encoding.TAG_TOKEN_ISSUE,
    EntryKind.TOKEN_TRANSFER: encoding.TAG_TOKEN_TRANSFER,
    EntryKind.PRESENTED_SIGNATURE: encoding.TAG_PRESENTED,
}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    timestamp: int  # logical tick
    kind: EntryKind
    payload: tuple[bytes, ...]
    author_key_id: bytes
    author_sig: bytes

    def canonical(self) -> bytes:
        return encoding.encode_fields(
            KIND_TAGS[self.kind],
            [u64(self.seq), u64(self.timestamp), self.author_key_id, self.author_sig, *self.payload],
        )


def entry_from_canonical(data: bytes) -> LedgerEntry:
    tag, fields = encoding.decode_fields(data)
    if tag not in TAG_KINDS or len(fields) < 4:
        raise MalformedPayloadError("unrecognised entry encoding")
    return LedgerEntry(
        seq=read_u64(fields[0]),
        timestamp=read_u64(fields[1]),
        kind=TAG_KINDS[tag],
        payload=tuple(fields[4:]),
        author_key_id=fields[2],
        author_sig=fields[3],
    )


def sign_bytes(kind: EntryKind, timestamp: int, payload: tuple[bytes, ...]) -> bytes:
    """Seq-independent canonical payload covered by the author signature."""
    return encoding.encode_fields(KIND_TAGS[kind], [u64(timestamp), *payload])


@dataclass(frozen=True)
class Receipt:
    entry_seq: int
    ledger_head_hash: bytes


# --- payload codecs -----------------------------------------------------------


@dataclass(frozen=True)
class CertificatePayload:
    """Exactly a signed key value and nothing else; the signing key is the
    entry author. Any extra field is rejected as metadata."""

    subject_key_value: bytes
    signature: bytes

    def to_fields(self) -> tuple[bytes, ...]:
        return (self.subject_key_value, self.signature)

    @classmethod
    def from_fields(cls, fields: tuple[bytes, ...]) -> "CertificatePayload":
        if len(fields) != 2:
            raise MalformedPayloadError(
                f"certificate payload must have exactly 2 fields, got {len(fields)}"
            )
        return cls(*fields)


@dataclass(frozen=True)
class RevokeOnePayload:
    target_seq: int

    def to_fields(self) -> tuple[bytes, ...]:
        return (u64(self.target_seq),)

    @classmethod
    def from_fields(cls, fields):
        if len(fields) != 1:
            raise MalformedPayloadError("revoke-one payload must have 1 field")
        return cls(read_u64(fields[0]))


@dataclass(frozen=True)
class RevokeAllPayload:
    target_key_id: bytes

    def to_fields(self) -> tuple[bytes, ...]:
        return (self.target_key_id,)

    @classmethod
    def from_fields(cls, fields):
        if len(fields) != 1:
            raise MalformedPayloadError("revoke-all payload must have 1 field")
        return cls(fields[0])


@dataclass(frozen=True)
class KeyRegistryRecord:
    owner_role: str  # "CP" or "AP"
    owner: str  # party label, groups keys belonging to one provider
    key_id: bytes
    key_value: bytes  # canonical public key
    category: str  # policy category this key signs for ("" = none)
    interval: int | None = None  # set on interval-specific CP keys
    timely: bool = False  # frequently rotated freshness key, never revoked
    expiry_tick: int | None = None  # required on timely keys

    def to_fields(self) -> tuple[bytes, ...]:
        return (
            self.owner_role.encode(),
            self.owner.encode(),
            self.key_id,
            self.key_value,
            self.category.encode(),
            u64(NONE_U64 if self.interval is None else self.interval),
            b"\x01" if self.timely else b"\x00",
            u64(NONE_U64 if self.expiry_tick is None else self.expiry_tick),
        )

    @classmethod
    def from_fields(cls, fields):
        if len(fields) != 8:
            raise MalformedPayloadError("key-registry payload must have 8 fields")
        interval = read_u64(fields[5])
        expiry = read_u64(fields[7])
        return cls(
            owner_role=fields[0].decode(),
            owner=fields[1].decode(),
            key_id=fields[2],
            key_value=fields[3],
            category=fields[4].decode(),
            interval=None if interval == NONE_U64 else interval,
            timely=fields[6] == b"\x01",
            expiry_tick=None if expiry == NONE_U64 else expiry,
        )

    def public_key(self) -> crypto.PublicKey:
        return crypto.public_key_from_canonical(self.key_value)


@dataclass(frozen=True)
class TokenIssuePayload:
    account_key_id: bytes
    amount: int

    def to_fields(self) -> tuple[bytes, ...]:
        return (self.account_key_id, u64(self.amount))

    @classmethod
    def from_fields(cls, fields):
        if len(fields) != 2:
            raise MalformedPayloadError("token-issue payload must have 2 fields")
        return cls(fields[0], read_u64(fields[1]))


@dataclass(frozen=True)
class TokenTransferPayload:
    from_account: bytes
    to_account: bytes
    amount: int
    token_key_value: bytes  # the one-time key whose rights move; spendable once
    cp_sig: bytes
    endorsement: bytes

    def to_fields(self) -> tuple[bytes, ...]:
        return (
            self.from_account,
            self.to_account,
            u64(self.amount),
            self.token_key_value,
            self.cp_sig,
            self.endorsement,
        )

    @classmethod
    def from_fields(cls, fields):
        if len(fields) != 6:
            raise MalformedPayloadError("token-transfer payload must have 6 fields")
        return cls(fields[0], fields[1], read_u64(fields[2]), fields[3], fields[4], fields[5])


@dataclass(frozen=True)
class PresentedSignaturePayload:
    cert_signer_key_id: bytes
    signature: bytes

    def to_fields(self) -> tuple[bytes, ...]:
        return (self.cert_signer_key_id, self.signature)

    @classmethod
    def from_fields(cls, fields):
        if len(fields) != 2:
            raise MalformedPayloadError("presented-signature payload must have 2 fields")
        return cls(fields[0], fields[1])


PAYLOAD_TYPES = {
    EntryKind.CERTIFICATE: CertificatePayload,
    EntryKind.REVOKE_ONE: RevokeOnePayload,
    EntryKind.REVOKE_ALL: RevokeAllPayload,
    EntryKind.KEY_REGISTRY: KeyRegistryRecord,
    EntryKind.TOKEN_ISSUE: TokenIssuePayload,
    EntryKind.TOKEN_TRANSFER: TokenTransferPayload,
    EntryKind.PRESENTED_SIGNATURE: PresentedSignaturePayload,
}

_CP_KINDS = {
    EntryKind.CERTIFICATE,
    EntryKind.REVOKE_ONE,
    EntryKind.REVOKE_ALL,
    EntryKind.TOKEN_ISSUE,
}
_AP_KINDS = {EntryKind.TOKEN_TRANSFER, EntryKind.PRESENTED_SIGNATURE}

REUSE_DISALLOW = "disallow"
REUSE_BIND = "bind"


@dataclass(frozen=True)
class LedgerConfig:
    genesis_authority: crypto.PublicKey
    allow_revoke_one: bool = True  # off for blinded-certificate deployments
    reuse_policy: str = REUSE_DISALLOW


@dataclass
class _RegistryState:
    record: KeyRegistryRecord
    registered_seq: int
    revoked_seq: int | None = None  # seq of the revoke-all entry, if any


class Ledger:
    """Single-writer append-only log with derived registry and account views."""

    def __init__(self, config: LedgerConfig):
        self.config = config
        self._entries: list[LedgerEntry] = []
        self._heads: list[bytes] = []  # chain hash after each entry
        self._registry: dict[bytes, _RegistryState] = {}
        self._balances: dict[bytes, int] = {}
        self._issued_total = 0
        self._spent_token_keys: set[bytes] = set()
        self._presented: set[tuple[bytes, bytes]] = set()
        self._lock = threading.Lock()

    # -- writes ---------------------------------------------------------------

    def append(
        self,
        kind: EntryKind,
        payload,
        author_key_id: bytes,
        author_sig: bytes,
        timestamp: int,
    ) -> Receipt:
        return self.append_raw(kind, payload.to_fields(), author_key_id, author_sig, timestamp)

    def append_raw(
        self,
        kind: EntryKind,
        payload_fields: tuple[bytes, ...],
        author_key_id: bytes,
        author_sig: bytes,
        timestamp: int,
    ) -> Receipt:
        with self._lock:
            payload = PAYLOAD_TYPES[kind].from_fields(tuple(payload_fields))
            author_public = self._author_public_key(kind, payload, author_key_id)
            signed = sign_bytes(kind, timestamp, tuple(payload_fields))
            if not crypto.verify(author_public, signed, crypto.Signature(author_key_id, author_sig)):
                raise InvalidSignatureError("author signature does not verify")
            self._validate(kind, payload, author_key_id, timestamp)
            entry = LedgerEntry(
                seq=len(self._entries),
                timestamp=timestamp,
                kind=kind,
                payload=tuple(payload_fields),
                author_key_id=author_key_id,
                author_sig=author_sig,
            )
            self._apply(entry, payload)
            return Receipt(entry_seq=entry.seq, ledger_head_hash=self._heads[-1])

    def _author_public_key(self, kind, payload, author_key_id) -> crypto.PublicKey:
        if author_key_id == crypto.key_id_of(self.config.genesis_authority):
            if kind is not EntryKind.KEY_REGISTRY:
                raise InvalidAuthorError("genesis authority may only write registry entries")
            return self.config.genesis_authority
        state = self._registry.get(author_key_id)
        if state is None:
            raise InvalidAuthorError("author key not in registry")
        if state.revoked_seq is not None:
            raise InvalidAuthorError("author key revoked")
        record = state.record
        if kind is EntryKind.KEY_REGISTRY:
            if record.owner != payload.owner:
                raise InvalidAuthorError("registry entries must be authored by the key owner")
        elif kind in _CP_KINDS:
            if record.owner_role != "CP":
                raise InvalidAuthorError(f"{kind.value} entries require a CP author")
        elif kind in _AP_KINDS:
            if record.owner_role != "AP":
                raise InvalidAuthorError(f"{kind.value} entries require an AP author")
        return record.public_key()

    def _validate(self, kind, payload, author_key_id, timestamp):
        if kind is EntryKind.REVOKE_ONE:
            if not self.config.allow_revoke_one:
                raise PolicyError("revoke-one is disabled on this ledger")
            target = self._entry_or_none(payload.target_seq)
            if target is None or target.kind is not EntryKind.CERTIFICATE:
                raise UnknownReferenceError("revoke-one target is not a certificate entry")
            if target.author_key_id != author_key_id:
                raise InvalidAuthorError("only the certifying key may revoke its certificate")
        elif kind is EntryKind.REVOKE_ALL:
            state = self._registry.get(payload.target_key_id)
            if state is None:
                raise UnknownReferenceError("revoke-all target key not in registry")
            if state.record.timely:
                raise PolicyError("timely keys expire and cannot be revoked")
            if state.record.owner_role != "CP":
                raise PolicyError("revoke-all targets certification signing keys")
            author_state = self._registry.get(author_key_id)
            if author_state is None or author_state.record.owner != state.record.owner:
                raise InvalidAuthorError("revoke-all must come from the key's owner")
        elif kind is EntryKind.KEY_REGISTRY:
            if payload.key_id in self._registry:
                raise MalformedPayloadError("key already registered")
            if payload.owner_role not in ("CP", "AP"):
                raise MalformedPayloadError(f"unknown owner role {payload.owner_role!r}")
            if payload.timely:
                if payload.expiry_tick is None:
                    raise MalformedPayloadError("timely keys carry an expiry tick")
                for state in self._registry.values():
                    rec = state.record
                    if (
                        rec.timely
                        and rec.owner == payload.owner
                        and rec.expiry_tick > timestamp
                        and state.revoked_seq is None
                    ):
                        raise PolicyError("owner already has an active timely key")
        elif kind is EntryKind.TOKEN_ISSUE:
            if payload.amount < 1:
                raise MalformedPayloadError("token issuance must be positive")
            if payload.account_key_id != author_key_id:
                raise InvalidAuthorError("tokens are issued to the issuing key's own pool")
        elif kind is EntryKind.TOKEN_TRANSFER:
            if payload.amount != 1:
                raise MalformedPayloadError("transfers move exactly one token")
            if self._balances.get(payload.from_account, 0) < payload.amount:
                raise InsufficientBalanceError("insufficient balance in source account")
            if payload.token_key_value in self._spent_token_keys:
                raise DoubleSpendError("token key already spent")
        elif kind is EntryKind.PRESENTED_SIGNATURE:
            key = (payload.cert_signer_key_id, payload.signature)
            if key in self._presented and self.config.reuse_policy == REUSE_DISALLOW:
                raise DuplicatePresentationError("credential already presented")

    def _apply(self, entry: LedgerEntry, payload):
        prev = self._heads[-1] if self._heads else encoding.GENESIS_HASH
        self._entries.append(entry)
        self._heads.append(sha256(prev + entry.canonical()))
        if entry.kind is EntryKind.KEY_REGISTRY:
            self._registry[payload.key_id] = _RegistryState(record=payload, registered_seq=entry.seq)
        elif entry.kind is EntryKind.REVOKE_ALL:
            state = self._registry[payload.target_key_id]
            if state.revoked_seq is None:
                state.revoked_seq = entry.seq
        elif entry.kind is EntryKind.TOKEN_ISSUE:
            self._balances[payload.account_key_id] = (
                self._balances.get(payload.account_key_id, 0) + payload.amount
            )
            self._issued_total += payload.amount
        elif entry.kind is EntryKind.TOKEN_TRANSFER:
            self._balances[payload.from_account] -= payload.amount
            self._balances[payload.to_account] = (
                self._balances.get(payload.to_account, 0) + payload.amount
            )
            self._spent_token_keys.add(payload.token_key_value)
        elif entry.kind is EntryKind.PRESENTED_SIGNATURE:
            self._presented.add((payload.cert_signer_key_id, payload.signature))

    # -- reads ----------------------------------------------------------------

    @property
    def head_seq(self) -> int:
        return len(self._entries) - 1

    def entry(self, seq: int) -> LedgerEntry:
        found = self._entry_or_none(seq)
        if found is None:
            raise UnknownReferenceError(f"no entry with seq {seq}")
        return found

    def _entry_or_none(self, seq: int):
        if 0 <= seq < len(self._entries):
            return self._entries[seq]
        return None

    def updates_since(self, cursor: int) -> list[LedgerEntry]:
        head = self.head_seq
        if cursor > head:
            raise CursorError(f"cursor {cursor} is beyond head {head}")
        return self._entries[cursor + 1 :]

    def entries(self) -> list[LedgerEntry]:
        return list(self._entries)

    def payload_of(self, entry: LedgerEntry):
        return PAYLOAD_TYPES[entry.kind].from_fields(entry.payload)

    def certs_by_signer(self, signer_key_id: bytes) -> list[LedgerEntry]:
        return [
            e
            for e in self._entries
            if e.kind is EntryKind.CERTIFICATE and e.author_key_id == signer_key_id
        ]

    def revocation_status(self, target, as_of: int | None = None) -> str:
        """Status of a certificate entry (int seq) or of everything signed by
        a key (bytes key id), as of a ledger position. Revocation never
        reverses as as_of grows."""
        if as_of is None:
            as_of = self.head_seq
        if isinstance(target, int):
            cert = self._entry_or_none(target)
            if cert is None or cert.kind is not EntryKind.CERTIFICATE:
                raise UnknownReferenceError(f"no certificate at seq {target}")
            if cert.seq > as_of:
                raise UnknownReferenceError("certificate does not exist at that position")
            signer = cert.author_key_id
            for e in self._entries[: as_of + 1]:
                if e.kind is EntryKind.REVOKE_ONE:
                    if RevokeOnePayload.from_fields(e.payload).target_seq == target:
                        return "revoked-one"
                elif e.kind is EntryKind.REVOKE_ALL:
                    if RevokeAllPayload.from_fields(e.payload).target_key_id == signer:
                        return "revoked-all"
            return "valid"
        for e in self._entries[: as_of + 1]:
            if e.kind is EntryKind.REVOKE_ALL:
                if RevokeAllPayload.from_fields(e.payload).target_key_id == target:
                    return "revoked-all"
        return "valid"

    def registry_record(self, key_id: bytes) -> KeyRegistryRecord | None:
        state = self._registry.get(key_id)
        return state.record if state else None

    def registry_seq(self, key_id: bytes) -> int | None:
        state = self._registry.get(key_id)
        return state.registered_seq if state else None

    def registry_records(self) -> list[KeyRegistryRecord]:
        return [s.record for s in sorted(self._registry.values(), key=lambda s: s.registered_seq)]

    def key_active(self, key_id: bytes, now: int | None = None) -> bool:
        """Registered, not revoked, and (for timely keys) unexpired."""
        state = self._registry.get(key_id)
        if state is None or state.revoked_seq is not None:
            return False
        if state.record.timely and now is not None and now >= state.record.expiry_tick:
            return False
        return True

    def balances(self) -> dict[bytes, int]:
        return dict(self._balances)

    @property
    def issued_total(self) -> int:
        return self._issued_total

    def record_presented_signature(
        self, signature: crypto.Signature, author_key_id: bytes, author_sig: bytes, timestamp: int
    ) -> Receipt:
        payload = PresentedSignaturePayload(
            cert_signer_key_id=signature.signer_key_id, signature=signature.value
        )
        return self.append(
            EntryKind.PRESENTED_SIGNATURE, payload, author_key_id, author_sig, timestamp
        )

    # -- receipts, chain, persistence ------------------------------------------

    def head_hash(self, seq: int | None = None) -> bytes:
        if not self._heads:
            return encoding.GENESIS_HASH
        if seq is None:
            return self._heads[-1]
        return self._heads[seq]

    def verify_receipt(self, receipt: Receipt) -> bool:
        if not 0 <= receipt.entry_seq < len(self._entries):
            return False
        return self._heads[receipt.entry_seq] == receipt.ledger_head_hash

    def recompute_chain(self) -> list[bytes]:
        heads = []
        prev = encoding.GENESIS_HASH
        for entry in self._entries:
            prev = sha256(prev + entry.canonical())
            heads.append(prev)
        return heads

    def dump(self) -> str:
        lines = [
            "credsim-ledger v1"
            f" genesis={encoding.GENESIS_HASH.hex()}"
            f" revoke-one={'on' if self.config.allow_revoke_one else 'off'}"
            f" reuse={self.config.reuse_policy}"
            f" authority={self.config.genesis_authority.canonical().hex()}"
        ]
        lines.extend(encoding.hex_line(e.canonical()) for e in self._entries)
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text: str) -> "Ledger":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("credsim-ledger v1"):
            raise LedgerError("not a ledger dump")
        header = dict(part.split("=", 1) for part in lines[0].split()[2:])
        if bytes.fromhex(header["genesis"]) != encoding.GENESIS_HASH:
            raise LedgerError("genesis hash mismatch")
        config = LedgerConfig(
            genesis_authority=crypto.public_key_from_canonical(bytes.fromhex(header["authority"])),
            allow_revoke_one=header["revoke-one"] == "on",
            reuse_policy=header["reuse"],
        )
        ledger = cls(config)
        for line in lines[1:]:
            entry = entry_from_canonical(encoding.from_hex_line(line))
            receipt = ledger.append_raw(
                entry.kind, entry.payload, entry.author_key_id, entry.author_sig, entry.timestamp
            )
            if receipt.entry_seq != entry.seq:
                raise LedgerError("dump is not seq-contiguous")
        return ledger

    def replay_prefix(self, as_of: int) -> "Ledger":
        """Fresh ledger rebuilt from entries 0..as_of through full validation."""
        replayed = Ledger(self.config)
        for entry in self._entries[: as_of + 1]:
            replayed.append_raw(
                entry.kind, entry.payload, entry.author_key_id, entry.author_sig, entry.timestamp
            )
        return replayed

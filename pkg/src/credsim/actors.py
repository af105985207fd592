"""Party state machines: certification provider, authentication provider,
user wallet, service provider, and the ledger node they all talk to.

Each actor processes one message at a time and communicates only through the
harness network, so transcripts capture everything any party could ever see.
The choreography follows the protocol variant configured for the run:

  V0      single-session baseline, provider-issued identifiers
  V1      two-phase baseline with a stateful authentication provider
  V2      user-generated keys and blind-signed nonces, no ledger
  V3      ledger-backed certificates (online, plus V3-off vouchers)
  V4      blinded certificates under interval keys (online and offline)
  V5      blind-signed promissory notes spendable as ledger tokens
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum

from . import crypto, encoding, messages
from .crypto import KeyPair, ParameterSet
from .encoding import (
    TAG_BASELINE_ID,
    TAG_CRED_KEY,
    TAG_ENDORSE,
    TAG_NONCE,
    TAG_OBJECT,
    TAG_ONE_TIME_ID,
    TAG_RECEIPT,
    TAG_TOKEN_KEY,
    read_u64,
    sha256,
    u64,
)
from .ledger import (
    CertificatePayload,
    DoubleSpendError,
    DuplicatePresentationError,
    EntryKind,
    InsufficientBalanceError,
    KIND_TAGS,
    Ledger,
    LedgerError,
    PolicyError,
    PresentedSignaturePayload,
    RevokeAllPayload,
    RevokeOnePayload,
    TAG_KINDS,
    TokenIssuePayload,
    TokenTransferPayload,
    entry_from_canonical,
    sign_bytes,
)
from .messages import Item, ItemKind, ProtocolMessage


class Variant(Enum):
    V0 = "V0"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V3_OFF = "V3-off"
    V4 = "V4"
    V4_OFF = "V4-off"
    V5 = "V5"
    V5_OFF = "V5-off"


LEDGER_VARIANTS = {Variant.V3, Variant.V3_OFF, Variant.V4, Variant.V4_OFF, Variant.V5, Variant.V5_OFF}
BLINDED_ENROLL_VARIANTS = {Variant.V4, Variant.V4_OFF}
TOKEN_VARIANTS = {Variant.V5, Variant.V5_OFF}
OFFLINE_VARIANTS = {Variant.V3_OFF, Variant.V4_OFF, Variant.V5_OFF}

# Certificates can be revoked one at a time only while they sit unblinded on
# the ledger; naming one blinded certificate would deanonymise its holder.
REVOKE_ONE_VARIANTS = {Variant.V3, Variant.V3_OFF}

AUTHORISED = "authorised"
REJECTED = "rejected"

R_IDENTITY = "identity-check-failed"
R_REVOKED = "revoked-credential"
R_NO_CERT = "no-certificate"
R_BAD_PROOF = "bad-ownership-proof"
R_UNKNOWN_CP = "unknown-cp-key"
R_DUPLICATE = "duplicate-presentation"
R_STALE = "stale-cursor"
R_BAD_SIG = "bad-signature"
R_EXPIRED = "expired-timely-key"
R_DUP_OTID = "duplicate-one-time-id"
R_UNKNOWN_AP = "unknown-ap-key"
R_DOUBLE_SPEND = "double-spend"
R_UNREACHABLE = "peer-unreachable"
R_POLICY = "policy-error"

_LEDGER_REASONS = {
    DuplicatePresentationError: R_DUPLICATE,
    DoubleSpendError: R_DOUBLE_SPEND,
    InsufficientBalanceError: "insufficient-balance",
    PolicyError: R_POLICY,
}


def ledger_reason(exc: LedgerError) -> str:
    return _LEDGER_REASONS.get(type(exc), f"ledger-error:{type(exc).__name__}")


def cred_key_message(canonical_public: bytes) -> bytes:
    return TAG_CRED_KEY + canonical_public


def token_key_message(canonical_public: bytes) -> bytes:
    return TAG_TOKEN_KEY + canonical_public


def receipt_message(seq: int, head_hash: bytes) -> bytes:
    return TAG_RECEIPT + u64(seq) + head_hash


def object_message(one_time_id: bytes, seq: int, head_hash: bytes) -> bytes:
    return TAG_OBJECT + one_time_id + u64(seq) + head_hash


def category_label(base_key_id: bytes) -> str:
    return "cat-" + base_key_id.hex()[:16]


BASELINE_CATEGORY = "baseline"


# --- wallet-side records -----------------------------------------------------


class SlotState(Enum):
    PENDING = "pending"
    CERTIFIED = "certified"
    USED = "used"
    REVOKED = "revoked"


_SLOT_MOVES = {
    SlotState.PENDING: {SlotState.CERTIFIED, SlotState.REVOKED},
    SlotState.CERTIFIED: {SlotState.USED, SlotState.REVOKED},
    SlotState.USED: set(),
    SlotState.REVOKED: set(),
}


@dataclass
class CredentialSlot:
    keypair: KeyPair
    blinding: crypto.BlindingFactor | None = None
    interval: int | None = None
    state: SlotState = SlotState.PENDING
    cert_ref: int | None = None
    unblinded_cert: crypto.Signature | None = None
    target_cp_key: bytes | None = None  # signing key the certificate is under

    def mark(self, state: SlotState):
        if state not in _SLOT_MOVES[self.state]:
            raise ValueError(f"slot cannot move {self.state.value} -> {state.value}")
        self.state = state


@dataclass
class TokenNote:
    keypair: KeyPair
    blinding: crypto.BlindingFactor
    cp_key_id: bytes
    blind_sig: bytes | None = None
    spent: bool = False


@dataclass
class OfflineVoucher:
    one_time_id: bytes
    signer_key_id: bytes
    sig_value: bytes
    expiry_tick: int


@dataclass
class StoredObject:
    one_time_id: bytes
    entry_seq: int
    head_hash: bytes
    signer_key_id: bytes
    sig_value: bytes


@dataclass
class PendingRequest:
    service_id: str
    nonce_y: bytes | None
    policy: str  # required credential category


# --- common actor plumbing ------------------------------------------------------


class Party:
    def __init__(self, name: str, net, rng: random.Random, variant: Variant,
                 params: ParameterSet):
        self.name = name
        self.net = net
        self.rng = rng
        self.variant = variant
        self.params = params

    def send(self, receiver: str, session: str, items: list[Item]) -> bool:
        return self.net.send(self.name, receiver, session, items)

    def decide(self, session: str, outcome: str, reason: str, cursor: int = encoding.NONE_U64,
               refs: list[int] | None = None):
        self.net.record_decision(
            self.name, session, messages.decision(outcome, reason, cursor, refs or [])
        )

    def keygen(self, label: str) -> KeyPair:
        seed = self.rng.getrandbits(256).to_bytes(32, "big") + label.encode()
        return crypto.generate_keypair(seed, self.params)

    def append_via_node(self, session: str, kind: EntryKind, payload, keypair: KeyPair,
                        ledger_party: str) -> bool:
        fields = payload.to_fields()
        sig = crypto.sign(
            keypair.private_part, keypair.public_part,
            sign_bytes(kind, self.net.now, tuple(fields)),
        )
        item = messages.ledger_append(KIND_TAGS[kind], self.net.now, keypair.key_id, sig.value,
                                      tuple(fields))
        return self.send(ledger_party, session, [item])

    def on_tick_boundary(self, t: int):
        pass

    def handle(self, sender: str, sender_label: str, message: ProtocolMessage):
        raise NotImplementedError

    def secret_material(self) -> set[bytes]:
        """Byte strings that must never appear in any adversary view."""
        return set()


def _key_secret_bytes(keypair: KeyPair) -> bytes:
    return keypair.private_part.d.to_bytes((keypair.private_part.d.bit_length() + 7) // 8 or 1, "big")


class LedgerNode(Party):
    """The distributed ledger as a party: accepts appends, fans out updates."""

    def __init__(self, name, net, rng, variant, params, ledger: Ledger):
        super().__init__(name, net, rng, variant, params)
        self.ledger = ledger
        self.subscribers: dict[str, int] = {}  # party -> delivered cursor

    def subscribe(self, party: str):
        self.subscribers[party] = -1

    def handle(self, sender, sender_label, message):
        item = message.find(ItemKind.LEDGER_APPEND)
        if item is None:
            return
        kind = TAG_KINDS[item.fields[0]]
        timestamp = read_u64(item.fields[1])
        try:
            receipt = self.ledger.append_raw(
                kind, tuple(item.fields[4:]), item.fields[2], item.fields[3], timestamp
            )
        except LedgerError as exc:
            self.send(sender, message.session, [messages.error(ledger_reason(exc))])
            return
        self.send(sender, message.session,
                  [messages.receipt(receipt.entry_seq, receipt.ledger_head_hash)])

    def push_updates(self):
        """Deliver new entries to every reachable subscriber. Sent even when
        empty so connected readers know their view is current."""
        for party in self.subscribers:
            cursor = self.subscribers[party]
            blobs = [e.canonical() for e in self.ledger.updates_since(cursor)]
            if self.send(party, "updates", [messages.ledger_updates(blobs)]):
                self.subscribers[party] = self.ledger.head_seq


class ReplicaReader:
    """Ledger-replica maintenance for parties that receive update feeds."""

    def init_replica(self, ledger_config):
        self.replica = Ledger(ledger_config)
        self.last_update_tick = -1

    def apply_updates(self, item: Item, tick: int):
        for blob in item.fields:
            entry = entry_from_canonical(blob)
            self.replica.append_raw(
                entry.kind, entry.payload, entry.author_key_id, entry.author_sig, entry.timestamp
            )
        self.last_update_tick = tick


# --- certification provider -----------------------------------------------------


class CertificationProvider(Party):
    def __init__(self, name, net, rng, variant, params, intervals: int = 4,
                 interval_length: int = 1, rejects: set[str] | None = None,
                 ledger_party: str | None = None):
        super().__init__(name, net, rng, variant, params)
        self.intervals = intervals
        self.interval_length = interval_length
        self.rejects = rejects or set()
        self.ledger_party = ledger_party
        self.base_key = self.keygen("base")
        self.category = category_label(self.base_key.key_id)
        self.interval_keys: dict[int, KeyPair] = {}
        self.token_key: KeyPair | None = None
        if variant in BLINDED_ENROLL_VARIANTS:
            self.interval_keys = {i: self.keygen(f"interval-{i}") for i in range(intervals)}
        if variant in TOKEN_VARIANTS:
            self.token_key = self.keygen("tokens")
        self.known_identities: set[str] = set()
        self.schedule: dict[int, list[Item]] = {}  # interval -> blinded items not yet posted
        self.published: set[int] = set()
        self.my_cert_seqs: list[int] = []  # seq of every certificate this CP wrote
        self.issued_plain: list[bytes] = []  # V2: canonical keys certified directly to users
        self.issued_baseline: dict[str, bytes] = {}  # V0/V1: identity -> uid
        self._pending: dict[str, dict] = {}  # session -> continuation state

    def interval_of_key(self, key_id: bytes) -> int | None:
        for i, kp in self.interval_keys.items():
            if kp.key_id == key_id:
                return i
        return None

    def kyc_check(self, ciphertext: bytes) -> str | None:
        """Open the sealed identity and apply the acceptance predicate."""
        try:
            plain = crypto.open_sealed(
                self.base_key.private_part, self.base_key.public_part, ciphertext
            )
            tag, fields = encoding.decode_fields(plain)
        except Exception:
            return None
        if tag != b"identity:" or not fields:
            return None
        identity = fields[0].decode()
        if identity not in self.known_identities or identity in self.rejects:
            return None
        return identity

    def handle(self, sender, sender_label, message):
        kinds = message.kinds()
        if ItemKind.IDENTIFY in kinds:
            self._handle_enrollment(sender, sender_label, message)
        elif ItemKind.RECEIPT in kinds:
            self._handle_receipt(message)
        elif ItemKind.ERROR in kinds:
            self._handle_ledger_error(message)

    def _handle_enrollment(self, sender, sender_label, message):
        identity = self.kyc_check(message.find(ItemKind.IDENTIFY).fields[0])
        if identity is None:
            self.send(sender, message.session, [messages.error(R_IDENTITY)])
            return
        if self.variant in (Variant.V0, Variant.V1):
            self._issue_baseline_id(sender, message, identity)
        elif self.variant in (Variant.V2, Variant.V3, Variant.V3_OFF):
            self._certify_plain_keys(sender, message)
        elif self.variant in BLINDED_ENROLL_VARIANTS:
            self._schedule_blinded_keys(sender, message)
        elif self.variant in TOKEN_VARIANTS:
            self._issue_tokens(sender, message)

    def _issue_baseline_id(self, sender, message, identity):
        # a stable, meaningless identifier per enrolled identity
        uid = self.issued_baseline.setdefault(
            identity, sha256(b"skc-id:" + self.name.encode() + identity.encode())[:16]
        )
        body = TAG_BASELINE_ID + uid
        sig = crypto.sign(self.base_key.private_part, self.base_key.public_part, body)
        self.send(sender, message.session, [messages.signed(self.base_key.key_id, body, sig.value)])

    def _certify_plain_keys(self, sender, message):
        keys = [
            item.fields[0][len(b"key:"):]
            for item in message.find_all(ItemKind.REQUEST_PARAM)
            if item.fields[0].startswith(b"key:")
        ]
        if not keys:
            self.send(sender, message.session, [messages.error("no-keys")])
            return
        if self.variant is Variant.V2:
            out = []
            for canonical in keys:
                body = cred_key_message(canonical)
                sig = crypto.sign(self.base_key.private_part, self.base_key.public_part, body)
                out.append(messages.signed(self.base_key.key_id, body, sig.value))
                self.issued_plain.append(canonical)
            self.send(sender, message.session, out)
            return
        # ledger-backed: write bare certificates, acknowledge with the receipts
        self._pending[message.session] = {
            "kind": "enroll", "sender": sender, "expected": len(keys), "receipts": []
        }
        for canonical in keys:
            body = cred_key_message(canonical)
            sig = crypto.sign(self.base_key.private_part, self.base_key.public_part, body)
            payload = CertificatePayload(subject_key_value=canonical, signature=sig.value)
            self.append_via_node(message.session, EntryKind.CERTIFICATE, payload, self.base_key,
                                 self.ledger_party)

    def _schedule_blinded_keys(self, sender, message):
        blinded_items = message.find_all(ItemKind.BLINDED)
        if not blinded_items:
            self.send(sender, message.session, [messages.error("empty-schedule")])
            return
        for item in blinded_items:
            if self.interval_of_key(item.fields[1]) is None:
                self.send(sender, message.session, [messages.error(R_UNKNOWN_CP)])
                return
        for item in blinded_items:
            interval = self.interval_of_key(item.fields[1])
            self.schedule.setdefault(interval, []).append(item)
            if interval in self.published:
                # the interval already started; sign and post on arrival
                self._publish_blinded(interval, [item])
        self.send(sender, message.session, [messages.ack()])

    def _issue_tokens(self, sender, message):
        blinded_items = message.find_all(ItemKind.BLINDED)
        if not blinded_items or any(
            item.fields[1] != self.token_key.key_id for item in blinded_items
        ):
            self.send(sender, message.session, [messages.error(R_UNKNOWN_CP)])
            return
        self._pending[message.session] = {
            "kind": "tokens", "sender": sender, "blinded": blinded_items
        }
        payload = TokenIssuePayload(account_key_id=self.token_key.key_id,
                                    amount=len(blinded_items))
        self.append_via_node(message.session, EntryKind.TOKEN_ISSUE, payload, self.token_key,
                             self.ledger_party)

    def _handle_receipt(self, message):
        item = message.find(ItemKind.RECEIPT)
        seq = read_u64(item.fields[0])
        pending = self._pending.get(message.session)
        if pending is None:
            if message.session.startswith("pub-"):
                self.my_cert_seqs.append(seq)
            return
        if pending["kind"] == "enroll":
            self.my_cert_seqs.append(seq)
            pending["receipts"].append(item)
            if len(pending["receipts"]) == pending["expected"]:
                del self._pending[message.session]
                self.send(pending["sender"], message.session,
                          [messages.ack(), *pending["receipts"]])
        elif pending["kind"] == "tokens":
            del self._pending[message.session]
            out = [item]
            for blinded in pending["blinded"]:
                bm = crypto.BlindedMessage(value=blinded.fields[0], signer_key_id=blinded.fields[1])
                sig = crypto.sign_blinded(self.token_key.private_part, self.token_key.public_part, bm)
                out.append(messages.blind_sig(self.token_key.key_id, sig.value))
            self.send(pending["sender"], message.session, out)

    def _handle_ledger_error(self, message):
        pending = self._pending.pop(message.session, None)
        if pending is not None:
            self.send(pending["sender"], message.session, list(message.items))

    def on_tick_boundary(self, t: int):
        """Interval starts are clock events: interval i goes live when the
        boundary at tick i * interval_length fires."""
        if self.variant not in BLINDED_ENROLL_VARIANTS:
            return
        if t % self.interval_length != 0:
            return
        interval = t // self.interval_length
        if interval >= self.intervals or interval in self.published:
            return
        self.published.add(interval)
        self._publish_blinded(interval, self.schedule.get(interval, []))

    def _publish_blinded(self, interval: int, blinded_items):
        kp = self.interval_keys[interval]
        for item in blinded_items:
            bm = crypto.BlindedMessage(value=item.fields[0], signer_key_id=item.fields[1])
            sig = crypto.sign_blinded(kp.private_part, kp.public_part, bm)
            payload = CertificatePayload(subject_key_value=item.fields[0], signature=sig.value)
            self.append_via_node(f"pub-{self.name}-{interval}", EntryKind.CERTIFICATE, payload,
                                 kp, self.ledger_party)

    def revoke(self, scope: str, cert_index: int | None = None, interval: int | None = None,
               ap_names: list[str] | None = None) -> str | None:
        """Revoke one certificate or every signature by a key. Ledger variants
        transact on the ledger without contacting any AP; ledgerless variants
        push revocation messages to the given APs."""
        session = f"rev-{self.name}-{self.net.now}"
        if self.variant in LEDGER_VARIANTS:
            if scope == "one":
                if self.variant not in REVOKE_ONE_VARIANTS:
                    return R_POLICY
                if cert_index is None or cert_index >= len(self.my_cert_seqs):
                    return "unknown-certificate"
                payload = RevokeOnePayload(target_seq=self.my_cert_seqs[cert_index])
                self.append_via_node(session, EntryKind.REVOKE_ONE, payload, self.base_key,
                                     self.ledger_party)
                return None
            target = self.base_key.key_id
            if interval is not None:
                target = self.interval_keys[interval].key_id
            elif self.variant in TOKEN_VARIANTS:
                target = self.token_key.key_id
            self.append_via_node(session, EntryKind.REVOKE_ALL, RevokeAllPayload(target),
                                 self.base_key, self.ledger_party)
            return None
        for ap in ap_names or []:
            if scope == "one":
                if cert_index is None:
                    return "unknown-certificate"
                if self.variant in (Variant.V0, Variant.V1):
                    uids = list(self.issued_baseline.values())
                    if cert_index >= len(uids):
                        return "unknown-certificate"
                    self.send(ap, session, [messages.revoke_one(uids[cert_index])])
                else:
                    if cert_index >= len(self.issued_plain):
                        return "unknown-certificate"
                    self.send(ap, session,
                              [messages.revoke_one(sha256(self.issued_plain[cert_index]))])
            else:
                self.send(ap, session, [messages.revoke_all(self.base_key.key_id)])
        return None

    def secret_material(self):
        out = {_key_secret_bytes(self.base_key)}
        for kp in self.interval_keys.values():
            out.add(_key_secret_bytes(kp))
        if self.token_key:
            out.add(_key_secret_bytes(self.token_key))
        return out


# --- authentication provider ------------------------------------------------------


class AuthenticationProvider(Party, ReplicaReader):
    def __init__(self, name, net, rng, variant, params, categories: list[str],
                 ledger_party: str | None = None, ledger_config=None,
                 rotate_period: int = 10, stale_bound: int = 10, timely: bool = False,
                 known_cp_keys: dict[bytes, crypto.PublicKey] | None = None):
        super().__init__(name, net, rng, variant, params)
        self.ledger_party = ledger_party
        self.rotate_period = rotate_period
        self.stale_bound = stale_bound
        self.timely_enabled = timely
        self.base_key = self.keygen("base")
        self.category_keys = {c: self.keygen(f"category-{c}") for c in categories}
        self.timely_key: KeyPair | None = None
        self.timely_expiry = -1
        self._timely_serial = 0
        self.challenges = crypto.ChallengeRegistry(self.rng)
        self.secret = self.rng.getrandbits(128).to_bytes(16, "big")  # alias derivation
        # ledgerless state
        self.known_cp_keys = known_cp_keys or {}  # key id -> public (direct trust edges)
        self.stored_certs: dict[bytes, tuple[bytes, bytes]] = {}  # V2: key id -> (canonical, sig)
        self.baseline_accounts: dict[str, tuple[bytes, bytes]] = {}  # V1: user -> (uid, sig)
        self.revoked_ids: set[bytes] = set()
        self.revoked_cp_keys: set[bytes] = set()
        self._uprime_counter = 0
        self.presented_local: set[tuple[bytes, bytes]] = set()  # voucher-path reuse cache
        self._pending: dict[str, dict] = {}
        if ledger_config is not None:
            self.init_replica(ledger_config)

    def category_key(self, category: str) -> KeyPair:
        return self.category_keys[category]

    # -- message dispatch -------------------------------------------------------

    def handle(self, sender, sender_label, message):
        kinds = message.kinds()
        pending = self._pending.get(message.session)
        if ItemKind.LEDGER_UPDATES in kinds:
            self.apply_updates(message.find(ItemKind.LEDGER_UPDATES), self.net.now)
        elif pending is not None and pending["kind"] == "baseline":
            self.handle_cp_reply(sender, message)
        elif ItemKind.CHALLENGE_REQUEST in kinds:
            self.send(sender, message.session,
                      [messages.challenge(self.challenges.issue(self.net.now))],)
        elif ItemKind.REQUEST_CERTS in kinds:
            self._serve_cert_list(sender, message)
        elif ItemKind.REVOKE_ONE in kinds:
            self.revoked_ids.add(message.find(ItemKind.REVOKE_ONE).fields[0])
        elif ItemKind.REVOKE_ALL in kinds:
            self.revoked_cp_keys.add(message.find(ItemKind.REVOKE_ALL).fields[0])
        elif ItemKind.RECEIPT in kinds and pending is not None:
            self._resume(message, message.find(ItemKind.RECEIPT))
        elif ItemKind.ERROR in kinds and pending is not None:
            self._resume_error(message)
        elif ItemKind.IDENTIFY in kinds:
            self._handle_baseline(sender, sender_label, message)
        elif ItemKind.SIGNED in kinds and self.variant is Variant.V2 and ItemKind.BLINDED not in kinds:
            self._store_v2_certs(sender, message)
        elif ItemKind.PROVE_OWNER in kinds or (
            self.variant is Variant.V2 and ItemKind.BLINDED in kinds
        ):
            self._handle_presentation(sender, message)
        elif ItemKind.REQUEST_PARAM in kinds and self.variant is Variant.V1:
            self._handle_v1_request(sender, message)

    # -- baselines ---------------------------------------------------------------

    def _handle_baseline(self, sender, sender_label, message):
        cp_item = next(
            (i for i in message.find_all(ItemKind.REQUEST_PARAM) if i.fields[0].startswith(b"cp:")),
            None,
        )
        if cp_item is None:
            self.send(sender, message.session, [messages.error("no-cp-named")])
            return
        cp = cp_item.fields[0][len(b"cp:"):].decode()
        self._pending[message.session] = {
            "kind": "baseline", "user": sender, "user_label": sender_label, "message": message
        }
        self.send(cp, message.session, [message.find(ItemKind.IDENTIFY)])

    def handle_cp_reply(self, sender, message):
        pending = self._pending.pop(message.session, None)
        if pending is None:
            return
        err = message.find(ItemKind.ERROR)
        if err is not None:
            self.decide(message.session, REJECTED, err.fields[0].decode())
            self.send(pending["user"], message.session, [err])
            return
        cert = message.find(ItemKind.SIGNED)
        uid = cert.fields[1][len(TAG_BASELINE_ID):]
        if self.variant is Variant.V1:
            # setup phase: remember the account, hand the credential back
            self.baseline_accounts[pending["user"]] = (uid, cert.fields[2])
            self.send(pending["user"], message.session, [cert])
            return
        svc_item = next(
            (i for i in pending["message"].find_all(ItemKind.REQUEST_PARAM)
             if i.fields[0].startswith(b"svc:")),
            None,
        )
        service = svc_item.fields[0][len(b"svc:"):] if svc_item else b"?"
        self._send_alias(pending["user"], message.session, uid, service, fresh=False)

    def _send_alias(self, user, session, uid, service: bytes, fresh: bool):
        if fresh:
            self._uprime_counter += 1
            alias = sha256(self.secret + u64(self._uprime_counter))[:16]
        else:
            # stable per (identifier, service): unlinked across services
            alias = sha256(b"alias:" + self.secret + uid + service)[:16]
        body = TAG_BASELINE_ID + alias
        key = self.category_keys[BASELINE_CATEGORY]
        sig = crypto.sign(key.private_part, key.public_part, body)
        self.decide(session, AUTHORISED, "ok")
        self.send(user, session, [messages.signed(key.key_id, body, sig.value)])

    def _handle_v1_request(self, sender, message):
        uid_item = next(
            (i for i in message.find_all(ItemKind.REQUEST_PARAM) if i.fields[0].startswith(b"bid:")),
            None,
        )
        if uid_item is None:
            return
        uid = uid_item.fields[0][len(b"bid:"):]
        known = any(uid == acct[0] for acct in self.baseline_accounts.values())
        if not known or uid in self.revoked_ids:
            reason = R_REVOKED if uid in self.revoked_ids else R_NO_CERT
            self.decide(message.session, REJECTED, reason)
            self.send(sender, message.session, [messages.error(reason)])
            return
        svc_item = next(
            (i for i in message.find_all(ItemKind.REQUEST_PARAM) if i.fields[0].startswith(b"svc:")),
            None,
        )
        service = svc_item.fields[0][len(b"svc:"):] if svc_item else b"?"
        self._send_alias(sender, message.session, uid, service, fresh=True)

    # -- V2: certificates held by the AP -------------------------------------------

    def _store_v2_certs(self, sender, message):
        stored = 0
        for item in message.find_all(ItemKind.SIGNED):
            signer, body, sig_value = item.fields
            public = self.known_cp_keys.get(signer)
            if public is None:
                continue
            if not crypto.verify(public, body, crypto.Signature(signer, sig_value)):
                continue
            canonical = body[len(TAG_CRED_KEY):]
            self.stored_certs[sha256(canonical)] = (canonical, sig_value)
            stored += 1
        self.send(sender, message.session,
                  [messages.ack()] if stored else [messages.error(R_BAD_SIG)])

    # -- credential presentations ---------------------------------------------------

    def _serve_cert_list(self, sender, message):
        item = message.find(ItemKind.REQUEST_CERTS)
        signer_key_id = item.fields[0]
        prefix_bits = read_u64(item.fields[1])
        prefix = item.fields[2]
        blobs = []
        for entry in self.replica.certs_by_signer(signer_key_id):
            if prefix_bits and not _bit_prefix_match(entry.payload[0], prefix, prefix_bits):
                continue
            blobs.append(entry.canonical())
        self.send(sender, message.session, [messages.cert_list(blobs)])

    def _handle_presentation(self, sender, message):
        offline = any(
            i.fields[0].startswith(b"otid:") for i in message.find_all(ItemKind.REQUEST_PARAM)
        )
        if self.variant in TOKEN_VARIANTS:
            self._handle_spend(sender, message, offline)
            return
        result = self._evaluate_presentation(message)
        if result["outcome"] == REJECTED:
            self.decide(message.session, REJECTED, result["reason"],
                        self._cursor(), result["refs"])
            self.send(sender, message.session, [messages.error(result["reason"])])
            return
        if offline:
            self._issue_voucher(sender, message, result)
        elif self.variant is Variant.V2:
            self._sign_blinded_nonce(sender, message, result, refs=[])
        else:
            # record the presented signature before answering (reuse control)
            payload = PresentedSignaturePayload(
                cert_signer_key_id=result["cp_key_id"], signature=result["presented_sig"]
            )
            self._pending[message.session] = {
                "kind": "presented", "user": sender, "message": message, "result": result
            }
            if not self.append_via_node(message.session, EntryKind.PRESENTED_SIGNATURE, payload,
                                        self.base_key, self.ledger_party):
                del self._pending[message.session]
                self.decide(message.session, REJECTED, R_UNREACHABLE, self._cursor(), [])
                self.send(sender, message.session, [messages.error(R_UNREACHABLE)])

    def _cursor(self) -> int:
        return self.replica.head_seq if hasattr(self, "replica") else encoding.NONE_U64

    def _evaluate_presentation(self, message) -> dict:
        """Validity checks shared by the online and voucher paths. Returns the
        evidence needed for the decision record."""
        if self.variant is Variant.V2:
            return self._evaluate_v2(message)
        proof_item = message.find(ItemKind.PROVE_OWNER)
        if proof_item is None:
            return {"outcome": REJECTED, "reason": R_BAD_PROOF, "refs": []}
        key_id, public_canonical, challenge, response = proof_item.fields
        if self.variant in (Variant.V3, Variant.V3_OFF):
            found = self._find_v3_certificate(message, public_canonical)
        else:
            found = self._check_v4_certificate(message, public_canonical)
        if found["outcome"] == REJECTED:
            return found
        try:
            public = crypto.public_key_from_canonical(public_canonical)
        except crypto.CryptoError:
            return {"outcome": REJECTED, "reason": R_BAD_PROOF, "refs": found["refs"]}
        proof = crypto.OwnershipProof(
            key_id=key_id, challenge=challenge,
            response=crypto.Signature(key_id, response),
        )
        ok, _reason = self.challenges.verify(public, proof, self.net.now)
        if not ok:
            return {"outcome": REJECTED, "reason": R_BAD_PROOF, "refs": found["refs"]}
        return found

    def _find_v3_certificate(self, message, public_canonical) -> dict:
        for entry in self.replica.entries():
            if entry.kind is not EntryKind.CERTIFICATE:
                continue
            if entry.payload[0] != public_canonical:
                continue
            record = self.replica.registry_record(entry.author_key_id)
            if record is None:
                return {"outcome": REJECTED, "reason": R_UNKNOWN_CP, "refs": [entry.seq]}
            cp_public = record.public_key()
            sig = crypto.Signature(entry.author_key_id, entry.payload[1])
            if not crypto.verify(cp_public, cred_key_message(public_canonical), sig):
                return {"outcome": REJECTED, "reason": R_BAD_SIG, "refs": [entry.seq]}
            status = self.replica.revocation_status(entry.seq)
            if status != "valid":
                return {"outcome": REJECTED, "reason": R_REVOKED, "refs": [entry.seq]}
            return {
                "outcome": AUTHORISED, "reason": "ok", "refs": [entry.seq],
                "cp_key_id": entry.author_key_id, "category": record.category,
                "presented_sig": entry.payload[1], "cert_seq": entry.seq,
            }
        return {"outcome": REJECTED, "reason": R_NO_CERT, "refs": []}

    def _check_v4_certificate(self, message, public_canonical) -> dict:
        cert_item = next(
            (i for i in message.find_all(ItemKind.SIGNED) if i.fields[1].startswith(TAG_CRED_KEY)),
            None,
        )
        if cert_item is None:
            return {"outcome": REJECTED, "reason": R_NO_CERT, "refs": []}
        signer_key_id, body, sig_value = cert_item.fields
        if body != cred_key_message(public_canonical):
            return {"outcome": REJECTED, "reason": R_BAD_SIG, "refs": []}
        record = self.replica.registry_record(signer_key_id)
        if record is None or record.owner_role != "CP":
            return {"outcome": REJECTED, "reason": R_UNKNOWN_CP, "refs": []}
        if not crypto.verify(record.public_key(), body, crypto.Signature(signer_key_id, sig_value)):
            return {"outcome": REJECTED, "reason": R_BAD_SIG, "refs": []}
        if self.replica.revocation_status(signer_key_id) != "valid":
            return {"outcome": REJECTED, "reason": R_REVOKED, "refs": []}
        return {
            "outcome": AUTHORISED, "reason": "ok", "refs": [],
            "cp_key_id": signer_key_id, "category": record.category,
            "presented_sig": sig_value, "cert_seq": None,
        }

    def _evaluate_v2(self, message) -> dict:
        key_item = next(
            (i for i in message.find_all(ItemKind.REQUEST_PARAM) if i.fields[0].startswith(b"key:")),
            None,
        )
        if key_item is None:
            return {"outcome": REJECTED, "reason": R_NO_CERT, "refs": []}
        canonical = key_item.fields[0][len(b"key:"):]
        stored = self.stored_certs.get(sha256(canonical))
        if stored is None:
            return {"outcome": REJECTED, "reason": R_NO_CERT, "refs": []}
        if sha256(canonical) in self.revoked_ids:
            return {"outcome": REJECTED, "reason": R_REVOKED, "refs": []}
        for cp_key_id in self.revoked_cp_keys:
            public = self.known_cp_keys.get(cp_key_id)
            if public and crypto.verify(
                public, cred_key_message(canonical), crypto.Signature(cp_key_id, stored[1])
            ):
                return {"outcome": REJECTED, "reason": R_REVOKED, "refs": []}
        return {
            "outcome": AUTHORISED, "reason": "ok", "refs": [],
            "cp_key_id": b"", "category": None, "presented_sig": stored[1], "cert_seq": None,
        }

    def _resume(self, message, receipt_item):
        pending = self._pending.pop(message.session)
        if pending["kind"] == "presented":
            result = pending["result"]
            result["refs"] = result["refs"] + [read_u64(receipt_item.fields[0])]
            self._sign_blinded_nonce(pending["user"], pending["message"], result, result["refs"])
        elif pending["kind"] == "transfer":
            self._finish_spend(pending, receipt_item, message.session)

    def _resume_error(self, message):
        pending = self._pending.pop(message.session)
        reason = message.find(ItemKind.ERROR).fields[0].decode()
        self.decide(message.session, REJECTED, reason, self._cursor(), [])
        self.send(pending["user"], message.session, [messages.error(reason)])

    def _sign_blinded_nonce(self, user, message, result, refs):
        blinded_item = message.find(ItemKind.BLINDED)
        if blinded_item is None:
            self.decide(message.session, REJECTED, R_BAD_SIG, self._cursor(), refs)
            self.send(user, message.session, [messages.error(R_BAD_SIG)])
            return
        value, target_key_id = blinded_item.fields
        key = self._key_by_id(target_key_id)
        if key is None or (
            result["category"] is not None
            and key is not self.category_keys.get(result["category"])
        ):
            self.decide(message.session, REJECTED, R_UNKNOWN_AP, self._cursor(), refs)
            self.send(user, message.session, [messages.error(R_UNKNOWN_AP)])
            return
        bm = crypto.BlindedMessage(value=value, signer_key_id=target_key_id)
        sig = crypto.sign_blinded(key.private_part, key.public_part, bm)
        self.decide(message.session, AUTHORISED, "ok", self._cursor(), refs)
        self.send(user, message.session, [messages.blind_sig(target_key_id, sig.value)])

    def _key_by_id(self, key_id: bytes) -> KeyPair | None:
        for kp in self.category_keys.values():
            if kp.key_id == key_id:
                return kp
        return None

    # -- offline vouchers -------------------------------------------------------------

    def _issue_voucher(self, sender, message, result):
        if self.net.now - self.last_update_tick > self.stale_bound:
            self.decide(message.session, REJECTED, R_STALE, self._cursor(), [])
            self.send(sender, message.session, [messages.error(R_STALE)])
            return
        if self.timely_key is None or self.net.now >= self.timely_expiry:
            self.decide(message.session, REJECTED, R_EXPIRED, self._cursor(), [])
            self.send(sender, message.session, [messages.error(R_EXPIRED)])
            return
        reuse_key = (result["cp_key_id"], result["presented_sig"])
        if reuse_key in self.presented_local:
            self.decide(message.session, REJECTED, R_DUPLICATE, self._cursor(), result["refs"])
            self.send(sender, message.session, [messages.error(R_DUPLICATE)])
            return
        self.presented_local.add(reuse_key)
        otid_item = next(
            i for i in message.find_all(ItemKind.REQUEST_PARAM) if i.fields[0].startswith(b"otid:")
        )
        one_time_id = otid_item.fields[0][len(b"otid:"):]
        body = TAG_ONE_TIME_ID + one_time_id
        sig = crypto.sign(self.timely_key.private_part, self.timely_key.public_part, body)
        self.decide(message.session, AUTHORISED, "ok", self._cursor(), result["refs"])
        self.send(sender, message.session,
                  [messages.voucher(one_time_id, self.timely_key.key_id, sig.value,
                                    self.timely_expiry)])

    def on_tick_boundary(self, t: int):
        if self.timely_enabled and t % self.rotate_period == 0:
            self.rotate_timely_key(t)

    def rotate_timely_key(self, now: int):
        """The previous timely key lapses at its expiry; it is never revoked."""
        from .ledger import KeyRegistryRecord  # local import to avoid cycle at module load

        self.timely_key = self.keygen(f"timely-{self._timely_serial}")
        self._timely_serial += 1
        self.timely_expiry = now + self.rotate_period
        record = KeyRegistryRecord(
            owner_role="AP", owner=self.name, key_id=self.timely_key.key_id,
            key_value=self.timely_key.public_part.canonical(), category="",
            timely=True, expiry_tick=self.timely_expiry,
        )
        self.append_via_node(f"rot-{self.name}-{now}", EntryKind.KEY_REGISTRY, record,
                             self.base_key, self.ledger_party)

    # -- token spending ------------------------------------------------------------

    def _handle_spend(self, sender, message, offline: bool):
        proof_item = message.find(ItemKind.PROVE_OWNER)
        signed_items = message.find_all(ItemKind.SIGNED)
        note_item = next((i for i in signed_items if i.fields[1].startswith(TAG_TOKEN_KEY)), None)
        endorse_item = next((i for i in signed_items if i.fields[1].startswith(TAG_ENDORSE)), None)
        if proof_item is None or note_item is None or endorse_item is None:
            self._reject_spend(sender, message, R_BAD_PROOF, [])
            return
        cp_key_id, note_body, note_sig = note_item.fields
        canonical = note_body[len(TAG_TOKEN_KEY):]
        record = self.replica.registry_record(cp_key_id)
        if record is None or record.owner_role != "CP":
            self._reject_spend(sender, message, R_UNKNOWN_CP, [])
            return
        if not crypto.verify(record.public_key(), note_body,
                             crypto.Signature(cp_key_id, note_sig)):
            self._reject_spend(sender, message, R_BAD_SIG, [])
            return
        if self.replica.revocation_status(cp_key_id) != "valid":
            self._reject_spend(sender, message, R_REVOKED, [])
            return
        try:
            token_public = crypto.public_key_from_canonical(canonical)
        except crypto.CryptoError:
            self._reject_spend(sender, message, R_BAD_SIG, [])
            return
        if not crypto.verify(token_public, endorse_item.fields[1],
                             crypto.Signature(endorse_item.fields[0], endorse_item.fields[2])):
            self._reject_spend(sender, message, R_BAD_SIG, [])
            return
        proof = crypto.OwnershipProof(
            key_id=proof_item.fields[0], challenge=proof_item.fields[2],
            response=crypto.Signature(proof_item.fields[0], proof_item.fields[3]),
        )
        ok, _ = self.challenges.verify(token_public, proof, self.net.now)
        if not ok:
            self._reject_spend(sender, message, R_BAD_PROOF, [])
            return
        service_name = endorse_item.fields[1][len(TAG_ENDORSE):].decode()
        payload = TokenTransferPayload(
            from_account=cp_key_id,
            to_account=sha256(b"account:" + service_name.encode()),
            amount=1,
            token_key_value=canonical,
            cp_sig=note_sig,
            endorsement=endorse_item.fields[2],
        )
        otid = next(
            (i.fields[0][len(b"otid:"):] for i in message.find_all(ItemKind.REQUEST_PARAM)
             if i.fields[0].startswith(b"otid:")),
            None,
        )
        self._pending[message.session] = {
            "kind": "transfer", "user": sender, "category": record.category, "otid": otid,
            "offline": offline,
        }
        if not self.append_via_node(message.session, EntryKind.TOKEN_TRANSFER, payload,
                                    self.base_key, self.ledger_party):
            del self._pending[message.session]
            self._reject_spend(sender, message, R_UNREACHABLE, [])

    def _reject_spend(self, sender, message, reason, refs):
        self.decide(message.session, REJECTED, reason, self._cursor(), refs)
        self.send(sender, message.session, [messages.error(reason)])

    def _finish_spend(self, pending, receipt_item, session):
        seq = read_u64(receipt_item.fields[0])
        head = receipt_item.fields[1]
        key = self.category_keys[pending["category"]]
        self.decide(session, AUTHORISED, "ok", self._cursor(), [seq])
        if pending["offline"]:
            body = object_message(pending["otid"], seq, head)
            sig = crypto.sign(key.private_part, key.public_part, body)
            self.send(pending["user"], session,
                      [messages.one_time_object(pending["otid"], seq, head, key.key_id, sig.value)])
        else:
            body = receipt_message(seq, head)
            sig = crypto.sign(key.private_part, key.public_part, body)
            self.send(pending["user"], session,
                      [messages.receipt(seq, head), messages.signed(key.key_id, body, sig.value)])

    def secret_material(self):
        out = {_key_secret_bytes(self.base_key), self.secret}
        for kp in self.category_keys.values():
            out.add(_key_secret_bytes(kp))
        if self.timely_key:
            out.add(_key_secret_bytes(self.timely_key))
        return out


def _bit_prefix_match(value: bytes, prefix: bytes, bits: int) -> bool:
    nbytes = (bits + 7) // 8
    if len(value) < nbytes or len(prefix) < nbytes:
        return False
    full, rem = divmod(bits, 8)
    if value[:full] != prefix[:full]:
        return False
    if rem == 0:
        return True
    mask = 0xFF << (8 - rem) & 0xFF
    return (value[full] & mask) == (prefix[full] & mask)


# --- user wallet -------------------------------------------------------------------


@dataclass
class WalletSession:
    session: str
    kind: str  # enroll | authorize | prefetch | tokens | spend | redeem
    service: str | None = None
    ap: str | None = None
    cp: str | None = None
    slot_index: int | None = None
    note_index: int | None = None
    nonce: bytes | None = None
    nonce_blinding: crypto.BlindingFactor | None = None
    stage: str = "start"
    result: str | None = None
    reason: str | None = None
    notify_service: bool = True
    options: dict = None

    def __post_init__(self):
        if self.options is None:
            self.options = {}


class UserWallet(Party):
    """Holds self-generated keys and drives every protocol session. Keys are
    generated locally and never leave the wallet unblinded except where the
    variant's flow presents them."""

    def __init__(self, name, net, rng, variant, params, identity: str | None = None):
        super().__init__(name, net, rng, variant, params)
        self.identity = identity or name
        self.slots: list[CredentialSlot] = []
        self.notes: list[TokenNote] = []
        self.vouchers: list[OfflineVoucher] = []
        self.spent_vouchers: list[OfflineVoucher] = []
        self.objects: list[StoredObject] = []
        self.spent_objects: list[StoredObject] = []
        self.baseline_uid: bytes | None = None
        self.baseline_sig: bytes | None = None
        self.sessions: dict[str, WalletSession] = {}
        self.directives: dict[str, dict] = {}
        # out-of-band knowledge wired by the harness: provider key material
        self.cp_keys: dict[str, dict] = {}  # cp name -> {base,intervals,token: PublicKey...}
        self.ap_keys: dict[str, dict] = {}  # ap name -> {category: (key_id, PublicKey)}
        self.service_policies: dict[str, str] = {}

    # -- directives (scripted intents) -----------------------------------------------

    def add_directive(self, session: str, **kwargs):
        self.directives[session] = kwargs

    # -- enrollment -------------------------------------------------------------------

    def sealed_identity(self, cp_name: str) -> bytes:
        plain = encoding.encode_fields(
            b"identity:", [self.identity.encode(), self.rng.getrandbits(64).to_bytes(8, "big")]
        )
        return crypto.seal(self.cp_keys[cp_name]["base"], plain, self.rng)

    def begin_enroll(self, session: str, cp_name: str, n: int, intervals: list[int] | None = None,
                     ap_name: str | None = None):
        state = WalletSession(session=session, kind="enroll", cp=cp_name, ap=ap_name)
        self.sessions[session] = state
        if self.variant in (Variant.V0, Variant.V1):
            items = [messages.identify(self.sealed_identity(cp_name)),
                     messages.request_param(b"cp:" + cp_name.encode())]
            target = ap_name  # baselines enroll through the AP
            if not self.send(target, session, items):
                self._fail(state, R_UNREACHABLE)
            return
        items = [messages.identify(self.sealed_identity(cp_name))]
        if self.variant in BLINDED_ENROLL_VARIANTS:
            intervals = intervals or [0] * n
            for i in range(n):
                kp = self.keygen(f"slot-{len(self.slots)}")
                interval = intervals[i]
                cp_interval_pub, cp_interval_id = self._cp_interval_key(cp_name, interval)
                factor = crypto.sample_blinding_factor(self.rng, cp_interval_pub)
                blinded = crypto.blind(
                    cred_key_message(kp.public_part.canonical()), factor, cp_interval_pub
                )
                self.slots.append(CredentialSlot(
                    keypair=kp, blinding=factor, interval=interval, target_cp_key=cp_interval_id
                ))
                items.append(messages.blinded(blinded.value, cp_interval_id))
        else:
            for i in range(n):
                kp = self.keygen(f"slot-{len(self.slots)}")
                self.slots.append(CredentialSlot(
                    keypair=kp, target_cp_key=self.cp_keys[cp_name]["base_id"]
                ))
                items.append(messages.request_param(b"key:" + kp.public_part.canonical()))
        if not self.send(cp_name, session, items):
            self._fail(state, R_UNREACHABLE)

    def begin_token_purchase(self, session: str, cp_name: str, n: int):
        state = WalletSession(session=session, kind="tokens", cp=cp_name)
        self.sessions[session] = state
        token_pub = self.cp_keys[cp_name]["token"]
        token_id = self.cp_keys[cp_name]["token_id"]
        items = [messages.identify(self.sealed_identity(cp_name))]
        for _ in range(n):
            kp = self.keygen(f"note-{len(self.notes)}")
            factor = crypto.sample_blinding_factor(self.rng, token_pub)
            blinded = crypto.blind(token_key_message(kp.public_part.canonical()), factor, token_pub)
            self.notes.append(TokenNote(keypair=kp, blinding=factor, cp_key_id=token_id))
            items.append(messages.blinded(blinded.value, token_id))
        if not self.send(cp_name, session, items):
            self._fail(state, R_UNREACHABLE)

    def _cp_interval_key(self, cp_name, interval):
        info = self.cp_keys[cp_name]
        return info["intervals"][interval], info["interval_ids"][interval]

    # -- prefetch (offline voucher) ---------------------------------------------------

    def begin_prefetch(self, session: str, ap_name: str, slot_index: int | None = None):
        state = WalletSession(session=session, kind="prefetch", ap=ap_name, slot_index=slot_index)
        self.sessions[session] = state
        state.stage = "challenge"
        if not self.send(ap_name, session, [messages.challenge_request()]):
            self._fail(state, R_UNREACHABLE)

    # -- message handling ---------------------------------------------------------------

    def handle(self, sender, sender_label, message):
        state = self.sessions.get(message.session)
        kinds = message.kinds()
        if state is None:
            if ItemKind.REQUEST in kinds or ItemKind.REQUEST_PARAM in kinds:
                self._start_service_session(sender, message)
            return
        err = message.find(ItemKind.ERROR)
        if err is not None:
            self._handle_error(state, err.fields[0].decode(), sender)
            return
        handler = {
            "enroll": self._continue_enroll,
            "tokens": self._continue_tokens,
            "authorize": self._continue_authorize,
            "prefetch": self._continue_prefetch,
            "spend": self._continue_spend,
            "redeem": self._continue_redeem,
        }[state.kind]
        handler(state, sender, message)

    def _fail(self, state: WalletSession, reason: str, notify_service: bool = True):
        state.result = "failed"
        state.reason = reason
        if notify_service and state.notify_service and state.service:
            self.send(state.service, state.session, [messages.error(reason)])

    def _handle_error(self, state, reason, sender):
        if state.kind in ("authorize", "spend", "redeem") and sender != state.service:
            # mark the slot per the provider's verdict, then tell the service
            slot = self.slots[state.slot_index] if state.slot_index is not None else None
            if slot and reason == R_REVOKED and slot.state in (SlotState.PENDING, SlotState.CERTIFIED):
                slot.mark(SlotState.REVOKED)
            self._fail(state, reason)
        else:
            state.result = "failed"
            state.reason = reason

    # -- service-initiated sessions -----------------------------------------------------

    def _start_service_session(self, service, message):
        directive = self.directives.pop(message.session, {})
        kind = directive.get("kind", "authorize")
        state = WalletSession(
            session=message.session, kind=kind, service=service,
            ap=directive.get("ap"), slot_index=directive.get("slot"),
            note_index=directive.get("note"), options=directive,
        )
        self.sessions[message.session] = state
        nonce_item = next(
            (i for i in message.find_all(ItemKind.REQUEST_PARAM)
             if i.fields[0].startswith(b"nonce:")),
            None,
        )
        if nonce_item is not None:
            state.nonce = nonce_item.fields[0][len(b"nonce:"):]
        if kind == "authorize":
            self._drive_authorize(state)
        elif kind == "spend":
            self._drive_spend(state)
        elif kind == "redeem":
            self._drive_redeem(state)

    def _drive_authorize(self, state):
        if self.variant in (Variant.V0, Variant.V1):
            self._drive_baseline(state)
            return
        if self.variant in OFFLINE_VARIANTS and self.variant is not Variant.V5_OFF:
            self._answer_with_voucher(state)
            return
        if state.slot_index is None:
            state.slot_index = self._pick_slot()
            if state.slot_index is None:
                self._fail(state, R_NO_CERT)
                return
        slot = self.slots[state.slot_index]
        if self.variant is Variant.V2:
            self._send_v2_presentation(state, slot)
        elif self.variant is Variant.V3:
            state.stage = "challenge"
            if not self.send(state.ap, state.session, [messages.challenge_request()],
                            ):
                self._fail(state, R_UNREACHABLE)
        elif self.variant is Variant.V4:
            state.stage = "certs"
            item = messages.request_certs(slot.target_cp_key)
            if not self.send(state.ap, state.session, [item]):
                self._fail(state, R_UNREACHABLE)

    def _drive_baseline(self, state):
        if self.variant is Variant.V0:
            cp_name = next(iter(self.cp_keys))
            items = [
                messages.identify(self.sealed_identity(cp_name)),
                messages.request_param(b"cp:" + cp_name.encode()),
                messages.request_param(b"svc:" + state.service.encode()),
            ]
            if not self.send(state.ap, state.session, items):
                self._fail(state, R_UNREACHABLE)
            return
        if self.baseline_uid is None:
            self._fail(state, R_NO_CERT)
            return
        items = [
            messages.request_param(b"bid:" + self.baseline_uid),
            messages.request_param(b"svc:" + state.service.encode()),
        ]
        if not self.send(state.ap, state.session, items):
            self._fail(state, R_UNREACHABLE)

    def _pick_slot(self) -> int | None:
        published_horizon = self.net.boundary_count - 1  # last interval that has started
        for idx, slot in enumerate(self.slots):
            if slot.state in (SlotState.PENDING, SlotState.CERTIFIED):
                if slot.interval is not None and slot.interval > published_horizon:
                    continue
                return idx
        return None

    def _send_v2_presentation(self, state, slot):
        ap_key_id, ap_public = self._ap_key_for(state)
        if ap_public is None:
            self._fail(state, R_UNKNOWN_AP)
            return
        state.nonce_blinding = crypto.sample_blinding_factor(self.rng, ap_public)
        blinded = crypto.blind(TAG_NONCE + state.nonce, state.nonce_blinding, ap_public)
        items = [
            messages.request_param(b"key:" + slot.keypair.public_part.canonical()),
            messages.blinded(blinded.value, ap_key_id),
        ]
        state.stage = "blindsig"
        if not self.send(state.ap, state.session, items):
            self._fail(state, R_UNREACHABLE)

    def _ap_key_for(self, state):
        policy = self.service_policies.get(state.service, BASELINE_CATEGORY)
        info = self.ap_keys.get(state.ap, {}).get(policy)
        if info is None:
            return None, None
        return info

    def _continue_authorize(self, state, sender, message):
        if self.variant in (Variant.V0, Variant.V1):
            signed = message.find(ItemKind.SIGNED)
            if signed is not None and sender == state.ap:
                state.stage = "delivered"
                self.send(state.service, state.session, [signed])
            elif message.find(ItemKind.ACK) is not None:
                state.result = AUTHORISED
            return
        slot = self.slots[state.slot_index] if state.slot_index is not None else None
        if state.stage == "challenge" and message.find(ItemKind.CHALLENGE) is not None:
            self._send_main_presentation(state, slot, message.find(ItemKind.CHALLENGE).fields[0])
        elif state.stage == "certs" and message.find(ItemKind.CERT_LIST) is not None:
            if not self._locate_own_certificate(state, slot, message.find(ItemKind.CERT_LIST)):
                self._fail(state, R_NO_CERT)
                return
            state.stage = "challenge"
            if not self.send(state.ap, state.session, [messages.challenge_request()],
                            ):
                self._fail(state, R_UNREACHABLE)
        elif state.stage == "blindsig" and message.find(ItemKind.BLIND_SIG) is not None:
            self._deliver_unblinded_nonce(state, slot, message.find(ItemKind.BLIND_SIG))
        elif state.stage == "delivered" and message.find(ItemKind.ACK) is not None:
            state.result = AUTHORISED

    def _send_main_presentation(self, state, slot, challenge):
        proof = crypto.prove_ownership(slot.keypair, challenge)
        items = [messages.prove_owner(
            proof.key_id, slot.keypair.public_part.canonical(), challenge, proof.response.value
        )]
        if self.variant in (Variant.V4, Variant.V4_OFF):
            items.append(messages.signed(
                slot.target_cp_key, cred_key_message(slot.keypair.public_part.canonical()),
                slot.unblinded_cert.value,
            ))
        else:
            items.append(messages.request_param(b"key:" + slot.keypair.public_part.canonical()))
        if state.kind == "prefetch" or self.variant in OFFLINE_VARIANTS:
            one_time_id = self.rng.getrandbits(256).to_bytes(32, "big")
            state.nonce = one_time_id
            items.append(messages.request_param(b"otid:" + one_time_id))
        else:
            ap_key_id, ap_public = self._ap_key_for(state)
            if ap_public is None:
                self._fail(state, R_UNKNOWN_AP)
                return
            state.nonce_blinding = crypto.sample_blinding_factor(self.rng, ap_public)
            blinded = crypto.blind(TAG_NONCE + state.nonce, state.nonce_blinding, ap_public)
            items.append(messages.blinded(blinded.value, ap_key_id))
        state.stage = "voucher" if (state.kind == "prefetch" or self.variant in OFFLINE_VARIANTS) \
            else "blindsig"
        if not self.send(state.ap, state.session, items):
            self._fail(state, R_UNREACHABLE, notify_service=state.kind != "prefetch")

    def _locate_own_certificate(self, state, slot, cert_list_item) -> bool:
        """Trial-unblind every candidate until one verifies for our key."""
        cp_public = self.cp_keys[state.cp or self._cp_of_slot(slot)]["intervals"][slot.interval]
        body = cred_key_message(slot.keypair.public_part.canonical())
        for blob in cert_list_item.fields:
            entry = entry_from_canonical(blob)
            candidate = crypto.unblind(
                crypto.Signature(slot.target_cp_key, entry.payload[1]), slot.blinding, cp_public
            )
            if crypto.verify(cp_public, body, candidate):
                slot.unblinded_cert = candidate
                slot.cert_ref = entry.seq
                if slot.state is SlotState.PENDING:
                    slot.mark(SlotState.CERTIFIED)
                return True
        return False

    def _cp_of_slot(self, slot):
        for cp_name, info in self.cp_keys.items():
            if slot.target_cp_key in info.get("interval_ids", {}).values() or \
                    slot.target_cp_key == info.get("base_id"):
                return cp_name
        raise KeyError("slot does not match any known certification provider")

    def _deliver_unblinded_nonce(self, state, slot, blind_sig_item):
        signer_key_id, value = blind_sig_item.fields
        _, ap_public = self._ap_key_for(state)
        sig = crypto.unblind(
            crypto.Signature(signer_key_id, value), state.nonce_blinding, ap_public
        )
        if slot is not None and slot.state is not SlotState.USED:
            if slot.state is SlotState.PENDING:
                slot.mark(SlotState.CERTIFIED)
            slot.mark(SlotState.USED)  # one authorisation consumes one slot
        state.stage = "delivered"
        body = TAG_NONCE + state.nonce
        self.send(state.service, state.session,
                  [messages.signed(signer_key_id, body, sig.value)])

    def _continue_enroll(self, state, sender, message):
        if self.variant in (Variant.V0, Variant.V1):
            cert = message.find(ItemKind.SIGNED)
            if cert is not None:
                self.baseline_uid = cert.fields[1][len(TAG_BASELINE_ID):]
                self.baseline_sig = cert.fields[2]
                state.result = "enrolled"
            return
        if self.variant is Variant.V2:
            certs = message.find_all(ItemKind.SIGNED)
            for item, slot in zip(certs, self.slots[-len(certs):]):
                slot.unblinded_cert = crypto.Signature(item.fields[0], item.fields[2])
                slot.mark(SlotState.CERTIFIED)
            state.stage = "forward"
            if not self.send(state.ap, state.session, list(certs)):
                self._fail(state, R_UNREACHABLE, notify_service=False)
                return
            state.result = "enrolled"
            return
        if message.find(ItemKind.ACK) is not None:
            receipts = message.find_all(ItemKind.RECEIPT)
            fresh = [s for s in self.slots if s.state is SlotState.PENDING and s.blinding is None]
            for item, slot in zip(receipts, fresh):
                slot.cert_ref = read_u64(item.fields[0])
                slot.mark(SlotState.CERTIFIED)
            state.result = "enrolled"

    def _continue_tokens(self, state, sender, message):
        sigs = message.find_all(ItemKind.BLIND_SIG)
        fresh = [n for n in self.notes if n.blind_sig is None]
        for item, note in zip(sigs, fresh):
            note.blind_sig = item.fields[1]
        if sigs:
            state.result = "issued"

    def _continue_prefetch(self, state, sender, message):
        if state.stage == "challenge" and message.find(ItemKind.CHALLENGE) is not None:
            if state.slot_index is None:
                state.slot_index = self._pick_slot()
                if state.slot_index is None:
                    self._fail(state, R_NO_CERT, notify_service=False)
                    return
            slot = self.slots[state.slot_index]
            if self.variant is Variant.V4_OFF and slot.unblinded_cert is None:
                # fetch the interval's certificates first, then re-request a challenge
                state.stage = "certs"
                self.send(state.ap, state.session, [messages.request_certs(slot.target_cp_key)])
                return
            self._send_main_presentation(state, slot, message.find(ItemKind.CHALLENGE).fields[0])
        elif state.stage == "certs" and message.find(ItemKind.CERT_LIST) is not None:
            slot = self.slots[state.slot_index]
            if not self._locate_own_certificate(state, slot, message.find(ItemKind.CERT_LIST)):
                self._fail(state, R_NO_CERT, notify_service=False)
                return
            state.stage = "challenge"
            self.send(state.ap, state.session, [messages.challenge_request()])
        elif state.stage == "voucher" and message.find(ItemKind.VOUCHER) is not None:
            item = message.find(ItemKind.VOUCHER)
            self.vouchers.append(OfflineVoucher(
                one_time_id=item.fields[0], signer_key_id=item.fields[1],
                sig_value=item.fields[2], expiry_tick=read_u64(item.fields[3]),
            ))
            slot = self.slots[state.slot_index]
            if slot.state is SlotState.PENDING:
                slot.mark(SlotState.CERTIFIED)
            slot.mark(SlotState.USED)
            state.result = "voucher-held"

    def _answer_with_voucher(self, state):
        if state.options.get("reuse_voucher") and self.spent_vouchers:
            voucher = self.spent_vouchers[-1]  # a faulty or cloned wallet re-presenting
        elif self.vouchers:
            # expiry is the service's call, so present the oldest voucher as-is
            voucher = self.vouchers.pop(0)
            self.spent_vouchers.append(voucher)
        else:
            self._fail(state, R_NO_CERT)
            return
        state.stage = "delivered"
        self.send(state.service, state.session,
                  [messages.voucher(voucher.one_time_id, voucher.signer_key_id,
                                    voucher.sig_value, voucher.expiry_tick)],
                 )

    # -- token spending -----------------------------------------------------------------

    def _drive_spend(self, state):
        state.note_index = state.note_index if state.note_index is not None else \
            next((i for i, n in enumerate(self.notes)
                  if n.blind_sig is not None and not n.spent), None)
        if state.note_index is None:
            self._fail(state, "no-unspent-note")
            return
        state.stage = "challenge"
        if not self.send(state.ap, state.session, [messages.challenge_request()]):
            self._fail(state, R_UNREACHABLE)

    def _continue_spend(self, state, sender, message):
        note = self.notes[state.note_index]
        if state.stage == "challenge" and message.find(ItemKind.CHALLENGE) is not None:
            challenge = message.find(ItemKind.CHALLENGE).fields[0]
            cp_public = self._token_cp_public(note)
            unblinded = crypto.unblind(
                crypto.Signature(note.cp_key_id, note.blind_sig), note.blinding, cp_public
            )
            proof = crypto.prove_ownership(note.keypair, challenge)
            endorse_body = TAG_ENDORSE + state.service.encode()
            endorsement = crypto.sign(note.keypair.private_part, note.keypair.public_part,
                                      endorse_body)
            items = [
                messages.signed(note.cp_key_id,
                                token_key_message(note.keypair.public_part.canonical()),
                                unblinded.value),
                messages.prove_owner(proof.key_id, note.keypair.public_part.canonical(),
                                     challenge, proof.response.value),
                messages.signed(note.keypair.key_id, endorse_body, endorsement.value),
            ]
            if self.variant is Variant.V5_OFF:
                one_time_id = self.rng.getrandbits(256).to_bytes(32, "big")
                items.append(messages.request_param(b"otid:" + one_time_id))
            state.stage = "receipt"
            note.spent = True
            if not self.send(state.ap, state.session, items):
                self._fail(state, R_UNREACHABLE, notify_service=state.service is not None)
        elif state.stage == "receipt":
            if message.find(ItemKind.OBJECT) is not None:
                item = message.find(ItemKind.OBJECT)
                self.objects.append(StoredObject(
                    one_time_id=item.fields[0], entry_seq=read_u64(item.fields[1]),
                    head_hash=item.fields[2], signer_key_id=item.fields[3],
                    sig_value=item.fields[4],
                ))
                state.result = "object-held"
                return
            receipt_item = message.find(ItemKind.RECEIPT)
            signed_item = message.find(ItemKind.SIGNED)
            if receipt_item is None or signed_item is None:
                return
            state.stage = "delivered"
            self.send(state.service, state.session, [receipt_item, signed_item])
        elif state.stage == "delivered" and message.find(ItemKind.ACK) is not None:
            state.result = AUTHORISED

    def _token_cp_public(self, note):
        for info in self.cp_keys.values():
            if info.get("token_id") == note.cp_key_id:
                return info["token"]
        raise KeyError("note does not match any known certification provider")

    def begin_object_prefetch(self, session: str, ap_name: str, service: str,
                              note_index: int | None = None):
        # the endorsement names the service now; redemption happens later
        state = WalletSession(session=session, kind="spend", ap=ap_name, service=service,
                              note_index=note_index, notify_service=False)
        self.sessions[session] = state
        self._drive_spend(state)

    def _drive_redeem(self, state):
        if state.options.get("reuse_object") and self.spent_objects:
            obj = self.spent_objects[-1]  # re-presenting an already-redeemed object
        elif self.objects:
            obj = self.objects.pop(0)
            self.spent_objects.append(obj)
        else:
            self._fail(state, "no-object-held")
            return
        state.stage = "delivered"
        self.send(state.service, state.session,
                  [messages.one_time_object(obj.one_time_id, obj.entry_seq, obj.head_hash,
                                            obj.signer_key_id, obj.sig_value)])

    def _continue_redeem(self, state, sender, message):
        if message.find(ItemKind.ACK) is not None:
            state.result = AUTHORISED

    def secret_material(self):
        out = set()
        for slot in self.slots:
            out.add(_key_secret_bytes(slot.keypair))
            if slot.blinding is not None:
                out.add(slot.blinding.value.to_bytes(
                    (slot.blinding.value.bit_length() + 7) // 8 or 1, "big"))
        for note in self.notes:
            out.add(_key_secret_bytes(note.keypair))
            out.add(note.blinding.value.to_bytes(
                (note.blinding.value.bit_length() + 7) // 8 or 1, "big"))
        for state in self.sessions.values():
            if state.nonce_blinding is not None:
                out.add(state.nonce_blinding.value.to_bytes(
                    (state.nonce_blinding.value.bit_length() + 7) // 8 or 1, "big"))
        return out


# --- service provider -----------------------------------------------------------------


class ServiceProvider(Party, ReplicaReader):
    def __init__(self, name, net, rng, variant, params, policy_category: str,
                 ledger_config=None, known_ap_keys: dict[bytes, tuple] | None = None,
                 accepts_tokens_of: str | None = None):
        super().__init__(name, net, rng, variant, params)
        self.policy_category = policy_category
        self.known_ap_keys = known_ap_keys or {}  # key id -> (public, category)
        self.accepts_tokens_of = accepts_tokens_of
        self.requests: dict[str, PendingRequest] = {}
        self.seen_nonces: set[bytes] = set()
        self.used_one_time_ids: set[bytes] = set()
        self.account_id = sha256(b"account:" + name.encode())
        if ledger_config is not None:
            self.init_replica(ledger_config)

    def start_request(self, session: str, user: str) -> bool:
        """Open an authorisation request toward a user. Online-credential
        variants include a fresh nonce; offline and token flows send a bare
        request."""
        if self.variant in (Variant.V2, Variant.V3, Variant.V4):
            while True:
                nonce = self.rng.getrandbits(256).to_bytes(32, "big")
                if nonce not in self.seen_nonces:
                    break
            self.seen_nonces.add(nonce)
            self.requests[session] = PendingRequest(self.name, nonce, self.policy_category)
            return self.send(user, session, [messages.request_param(b"nonce:" + nonce)])
        self.requests[session] = PendingRequest(self.name, None, self.policy_category)
        return self.send(user, session, [messages.request()])

    def handle(self, sender, sender_label, message):
        kinds = message.kinds()
        if ItemKind.LEDGER_UPDATES in kinds:
            self.apply_updates(message.find(ItemKind.LEDGER_UPDATES), self.net.now)
            return
        if message.session not in self.requests:
            return
        if ItemKind.ERROR in kinds:
            reason = message.find(ItemKind.ERROR).fields[0].decode()
            self._finish(sender, message.session, REJECTED, reason)
        elif ItemKind.VOUCHER in kinds:
            self._accept_voucher(sender, message)
        elif ItemKind.OBJECT in kinds:
            self._accept_object(sender, message)
        elif ItemKind.RECEIPT in kinds and ItemKind.SIGNED in kinds:
            self._accept_token_receipt(sender, message)
        elif ItemKind.SIGNED in kinds:
            self._accept_signed_nonce(sender, message)

    def _finish(self, user, session, outcome, reason, refs: list[int] | None = None):
        cursor = self.replica.head_seq if hasattr(self, "replica") else encoding.NONE_U64
        self.decide(session, outcome, reason, cursor, refs or [])
        reply = [messages.ack()] if outcome == AUTHORISED else [messages.error(reason)]
        self.send(user, session, reply)
        del self.requests[session]

    def _ap_key_info(self, key_id: bytes, now: int | None = None):
        """Resolve an AP key to (public, category, registry seq) using the
        ledger replica where there is one, direct configuration otherwise."""
        if hasattr(self, "replica"):
            record = self.replica.registry_record(key_id)
            if record is None or record.owner_role != "AP":
                return None
            if not self.replica.key_active(key_id, now=now):
                return None
            return record.public_key(), record.category, self.replica.registry_seq(key_id), record
        info = self.known_ap_keys.get(key_id)
        if info is None:
            return None
        return info[0], info[1], None, None

    def _accept_signed_nonce(self, sender, message):
        request = self.requests[message.session]
        item = message.find(ItemKind.SIGNED)
        signer_key_id, body, sig_value = item.fields
        info = self._ap_key_info(signer_key_id)
        if info is None:
            self._finish(sender, message.session, REJECTED, R_UNKNOWN_AP)
            return
        public, category, reg_seq, record = info
        if request.nonce_y is not None:
            if body != TAG_NONCE + request.nonce_y:
                self._finish(sender, message.session, REJECTED, R_BAD_SIG)
                return
            if category != request.policy:
                self._finish(sender, message.session, REJECTED, R_UNKNOWN_AP)
                return
        else:
            if not body.startswith(TAG_BASELINE_ID):
                self._finish(sender, message.session, REJECTED, R_BAD_SIG)
                return
        if not crypto.verify(public, body, crypto.Signature(signer_key_id, sig_value)):
            self._finish(sender, message.session, REJECTED, R_BAD_SIG)
            return
        refs = [reg_seq] if reg_seq is not None else []
        self._finish(sender, message.session, AUTHORISED, "ok", refs)

    def _accept_voucher(self, sender, message):
        item = message.find(ItemKind.VOUCHER)
        one_time_id, signer_key_id, sig_value, _expiry = item.fields
        info = self._ap_key_info(signer_key_id, now=None)
        if info is None:
            self._finish(sender, message.session, REJECTED, R_UNKNOWN_AP)
            return
        public, _category, reg_seq, record = info
        if record is not None and record.timely and self.net.now >= record.expiry_tick:
            self._finish(sender, message.session, REJECTED, R_EXPIRED, [reg_seq])
            return
        if not crypto.verify(public, TAG_ONE_TIME_ID + one_time_id,
                             crypto.Signature(signer_key_id, sig_value)):
            self._finish(sender, message.session, REJECTED, R_BAD_SIG)
            return
        if one_time_id in self.used_one_time_ids:
            self._finish(sender, message.session, REJECTED, R_DUP_OTID)
            return
        self.used_one_time_ids.add(one_time_id)
        refs = [reg_seq] if reg_seq is not None else []
        self._finish(sender, message.session, AUTHORISED, "ok", refs)

    def _accept_object(self, sender, message):
        item = message.find(ItemKind.OBJECT)
        one_time_id, seq_bytes, head_hash, signer_key_id, sig_value = item.fields
        info = self._ap_key_info(signer_key_id)
        if info is None:
            self._finish(sender, message.session, REJECTED, R_UNKNOWN_AP)
            return
        public, _category, reg_seq, _record = info
        body = object_message(one_time_id, read_u64(seq_bytes), head_hash)
        if not crypto.verify(public, body, crypto.Signature(signer_key_id, sig_value)):
            self._finish(sender, message.session, REJECTED, R_BAD_SIG)
            return
        if one_time_id in self.used_one_time_ids:
            self._finish(sender, message.session, REJECTED, R_DUP_OTID)
            return
        self.used_one_time_ids.add(one_time_id)
        refs = [read_u64(seq_bytes)] + ([reg_seq] if reg_seq is not None else [])
        self._finish(sender, message.session, AUTHORISED, "ok", refs)

    def _accept_token_receipt(self, sender, message):
        receipt_item = message.find(ItemKind.RECEIPT)
        signed_item = message.find(ItemKind.SIGNED)
        seq = read_u64(receipt_item.fields[0])
        signer_key_id, body, sig_value = signed_item.fields
        info = self._ap_key_info(signer_key_id)
        if info is None:
            self._finish(sender, message.session, REJECTED, R_UNKNOWN_AP)
            return
        public, _category, reg_seq, _record = info
        if body != receipt_message(seq, receipt_item.fields[1]):
            self._finish(sender, message.session, REJECTED, R_BAD_SIG)
            return
        if not crypto.verify(public, body, crypto.Signature(signer_key_id, sig_value)):
            self._finish(sender, message.session, REJECTED, R_BAD_SIG)
            return
        # the transfer entry itself must credit this service
        refs = [seq] + ([reg_seq] if reg_seq is not None else [])
        if hasattr(self, "replica") and seq <= self.replica.head_seq:
            entry = self.replica.entry(seq)
            payload = self.replica.payload_of(entry)
            if entry.kind is not EntryKind.TOKEN_TRANSFER or payload.to_account != self.account_id:
                self._finish(sender, message.session, REJECTED, R_BAD_SIG, refs)
                return
        self._finish(sender, message.session, AUTHORISED, "ok", refs)

    def secret_material(self):
        return set()

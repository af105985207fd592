"""Adversary experiments and audit tooling over recorded transcripts.

The linkage oracle is the strongest compare-notes attacker at desk scale: it
pools every field a coalition of parties observed (plus the public ledger),
extracts byte-level atoms, and enumerates every possible matching between
enrolled identities and service-side sessions, scoring each by the evidence
that supports it. With at most five users the enumeration is exhaustive, so
the reported accuracy is the true optimum for this attacker, not a heuristic.

Ties are the interesting case: when the view supports several matchings
equally well, the oracle's accuracy is the expected fraction of correct
matches over the whole tied-optimal set, which is exactly the value a
maximum-a-posteriori attacker achieves. A protocol leaks nothing when that
value sits at the random-matching baseline.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

from . import crypto, messages
from .actors import (
    AUTHORISED,
    R_BAD_PROOF,
    R_BAD_SIG,
    R_DUP_OTID,
    R_DUPLICATE,
    R_EXPIRED,
    R_NO_CERT,
    R_REVOKED,
    R_STALE,
    R_UNKNOWN_AP,
    R_UNKNOWN_CP,
    REJECTED,
    TAG_CRED_KEY,
    TAG_ENDORSE,
    TAG_NONCE,
    TAG_ONE_TIME_ID,
    TAG_TOKEN_KEY,
    Variant,
    cred_key_message,
    object_message,
    receipt_message,
)
from .encoding import NONE_U64, read_u64
from .harness import Event, SessionTranscript
from .ledger import EntryKind, Ledger, PresentedSignaturePayload, RevokeAllPayload
from .messages import ItemKind


class AnalysisError(Exception):
    pass


COALITION_ROLES = ("CP", "AP", "Service", "Ledger-reader")

_ROLE_OF = {"CP": "cp", "AP": "ap", "Service": "service", "Ledger-reader": "ledger"}


@dataclass(frozen=True)
class AdversaryCoalition:
    """Colluding roles. The view is the union of the members' event
    projections plus the full (public) ledger."""

    members: tuple[str, ...]

    @classmethod
    def of(cls, *roles: str) -> "AdversaryCoalition":
        unknown = [r for r in roles if r not in COALITION_ROLES]
        if unknown:
            raise AnalysisError(
                f"unknown coalition roles {unknown}; valid roles: {list(COALITION_ROLES)}"
            )
        return cls(members=tuple(roles))

    def parties(self, transcript: SessionTranscript) -> set[str]:
        wanted = {_ROLE_OF[m] for m in self.members}
        return {name for name, role in transcript.parties.items() if role in wanted}

    def view(self, transcript: SessionTranscript) -> list[Event]:
        names = self.parties(transcript)
        return [e for e in transcript.events if e.sender in names or e.receiver in names]


@dataclass
class LinkageGuess:
    pairing: dict[str, str]  # session -> proposed user
    accuracy: float  # expected fraction correct for the optimal attacker
    best_accuracy: float  # accuracy of the single returned pairing
    baseline: float  # expected accuracy of a uniformly random matching
    tied_optima: int
    users: list[str]
    sessions: list[str]


# --- atom extraction -----------------------------------------------------------------

_SKIP_KINDS = {ItemKind.DECISION, ItemKind.ACK, ItemKind.CHALLENGE_REQUEST}
_ENTRY_BLOB_KINDS = {ItemKind.CERT_LIST, ItemKind.LEDGER_UPDATES}


def _atoms_of_item(item) -> set[bytes]:
    if item.kind in _SKIP_KINDS:
        return set()
    atoms: set[bytes] = set()
    if item.kind in _ENTRY_BLOB_KINDS:
        from .ledger import entry_from_canonical

        for blob in item.fields:
            entry = entry_from_canonical(blob)
            atoms.update(f for f in entry.payload if f)
            atoms.add(entry.author_key_id)
        return atoms
    if item.kind is ItemKind.LEDGER_APPEND:
        atoms.update(f for f in item.fields[4:] if f)
        return atoms
    atoms.update(f for f in item.fields if f)
    return atoms


def _atoms_of_event(event: Event) -> set[bytes]:
    atoms: set[bytes] = set()
    for item in event.message.items:
        atoms.update(_atoms_of_item(item))
    for label in (event.sender_label, event.receiver_label):
        atoms.add(b"party:" + label.encode())
    return atoms


def _view_soundness_scan(view_events: list[Event], secrets: set[bytes]) -> list[str]:
    """Field-level scan: no adversary-visible value may equal wallet-private
    material. Values are compared with leading zeros stripped."""
    stripped = {s.lstrip(b"\x00") for s in secrets}
    hits = []
    for event in view_events:
        for item in event.message.items:
            for f in item.fields:
                if f.lstrip(b"\x00") in stripped:
                    hits.append(f"event {event.index} {item.kind.name}")
    return hits


def scan_views_for_secrets(transcript: SessionTranscript, actors: dict) -> list[str]:
    secrets: set[bytes] = set()
    for actor in actors.values():
        if transcript.parties.get(actor.name) == "user":
            secrets.update(actor.secret_material())
    full = AdversaryCoalition.of("CP", "AP", "Service", "Ledger-reader")
    return _view_soundness_scan(full.view(transcript), secrets)


# --- the linkage oracle ----------------------------------------------------------------


def _enrollment_atoms(view: list[Event], users: list[str]) -> dict[str, set[bytes]]:
    """Everything the coalition saw attached to a user's true identity: the
    identified channels (enrollment, and the AP leg in the baselines)."""
    atoms: dict[str, set[bytes]] = {u: {b"party:" + u.encode()} for u in users}
    for event in view:
        for label in (event.sender_label, event.receiver_label):
            if label in atoms:
                atoms[label].update(_atoms_of_event(event))
    return atoms


def _session_atoms(view: list[Event], sessions: list[str]) -> dict[str, set[bytes]]:
    atoms: dict[str, set[bytes]] = {s: set() for s in sessions}
    for event in view:
        if event.message.session in atoms:
            atoms[event.message.session].update(_atoms_of_event(event))
    return atoms


def _first_tick(view, predicate) -> int | None:
    ticks = [e.tick for e in view if predicate(e)]
    return min(ticks) if ticks else None


def _dense_ranks(values: dict[str, int | None]) -> dict[str, int | None]:
    present = sorted({v for v in values.values() if v is not None})
    rank_of = {v: i for i, v in enumerate(present)}
    return {k: (rank_of[v] if v is not None else None) for k, v in values.items()}


def random_matching_baseline(k: int, m: int, bijective: bool) -> float:
    """Exact expected fraction of correct matches under a uniformly random
    matching, computed by enumeration (the pool is tiny at desk scale)."""
    users = list(range(k))
    total = Fraction(0)
    count = 0
    truth = [i % k for i in range(m)]
    if bijective:
        for perm in itertools.permutations(users):
            total += Fraction(sum(1 for i in range(m) if perm[i] == truth[i]), m)
            count += 1
    else:
        for assignment in itertools.product(users, repeat=m):
            total += Fraction(sum(1 for i in range(m) if assignment[i] == truth[i]), m)
            count += 1
    return float(total / count)


def linkage_oracle(
    transcript: SessionTranscript,
    ledger: Ledger | None,
    coalition: AdversaryCoalition,
    include_timing: bool = False,
    bijective: bool | None = None,
) -> LinkageGuess:
    """Exhaustively match enrolled identities to service-side sessions using
    every field in the coalition's view. Ground truth is used only to score
    the result, never to produce it."""
    users = sorted(set(transcript.ground_truth.values()))
    sessions = sorted(transcript.ground_truth.keys())
    if len(users) < 2 or len(sessions) < 2:
        raise AnalysisError("linkage needs at least two users and two sessions")
    if bijective is None:
        bijective = len(users) == len(sessions)
    view = coalition.view(transcript)
    enroll_atoms = _enrollment_atoms(view, users)
    session_atoms = _session_atoms(view, sessions)

    weights: dict[tuple[str, str], int] = {}
    for u in users:
        for s in sessions:
            weights[(u, s)] = len(enroll_atoms[u] & session_atoms[s])

    if include_timing:
        enroll_ticks = _dense_ranks({
            u: _first_tick(view, lambda e, u=u: u in (e.sender_label, e.receiver_label))
            for u in users
        })
        session_ticks = _dense_ranks({
            s: _first_tick(view, lambda e, s=s: e.message.session == s) for s in sessions
        })
        for u in users:
            for s in sessions:
                if enroll_ticks[u] is not None and enroll_ticks[u] == session_ticks[s]:
                    weights[(u, s)] += 1

    if bijective:
        candidates = [
            tuple(zip(sessions, perm)) for perm in itertools.permutations(users)
        ]
    else:
        candidates = [
            tuple(zip(sessions, choice))
            for choice in itertools.product(users, repeat=len(sessions))
        ]

    best_score = None
    optima: list[tuple] = []
    for candidate in candidates:
        score = sum(weights[(u, s)] for s, u in candidate)
        if best_score is None or score > best_score:
            best_score, optima = score, [candidate]
        elif score == best_score:
            optima.append(candidate)

    def fraction_correct(candidate) -> Fraction:
        hits = sum(1 for s, u in candidate if transcript.ground_truth[s] == u)
        return Fraction(hits, len(sessions))

    expected = float(sum(fraction_correct(c) for c in optima) / len(optima))
    best = optima[0]
    return LinkageGuess(
        pairing={s: u for s, u in best},
        accuracy=expected,
        best_accuracy=float(fraction_correct(best)),
        baseline=random_matching_baseline(len(users), len(sessions), bijective),
        tied_optima=len(optima),
        users=users,
        sessions=sessions,
    )


# --- audit explainer ----------------------------------------------------------------


@dataclass
class AuditExplanation:
    event_index: int
    decider: str
    outcome: str
    reason: str
    chain: list[tuple[int, str]]  # (ledger seq, entry kind) in citation order
    replay_outcome: str
    replay_reason: str

    @property
    def replay_matches(self) -> bool:
        return self.replay_outcome == self.outcome and (
            self.outcome == AUTHORISED or self.replay_reason == self.reason
        )


def _decision_of(event: Event):
    item = event.message.find(ItemKind.DECISION)
    if item is None:
        raise AnalysisError(f"event {event.index} is not a decision")
    return messages.decision_fields(item)


def _trigger_message(transcript, event, decider) -> Event | None:
    """The request the decider was answering: the latest message delivered to
    it in the same session before the decision."""
    for prior in reversed(transcript.events[: event.index]):
        if prior.receiver == decider and prior.sender != decider and \
                prior.message.session == event.message.session:
            return prior
    return None


def audit_explain(transcript: SessionTranscript, ledger: Ledger | None,
                  event_index: int) -> AuditExplanation:
    if not 0 <= event_index < len(transcript.events):
        raise AnalysisError(f"no event {event_index}")
    event = transcript.events[event_index]
    outcome, reason, cursor, refs = _decision_of(event)
    decider = event.sender
    role = transcript.parties.get(decider)
    if role not in ("ap", "service"):
        raise AnalysisError("only AP and service decisions are auditable")
    if ledger is None:
        raise AnalysisError("audit replay requires a ledger-backed variant")
    prefix = ledger.replay_prefix(cursor) if cursor != NONE_U64 else Ledger(ledger.config)
    chain = []
    for seq in refs:
        if seq <= ledger.head_seq:
            chain.append((seq, ledger.entry(seq).kind.value))
    # widen the chain with the revocations that were in force
    for entry in prefix.entries():
        if entry.kind in (EntryKind.REVOKE_ONE, EntryKind.REVOKE_ALL) and \
                (entry.seq, entry.kind.value) not in chain:
            chain.append((entry.seq, entry.kind.value))
    trigger = _trigger_message(transcript, event, decider)
    if trigger is None:
        replay = (REJECTED, "no-trigger-message")
    elif role == "ap":
        replay = _replay_ap(transcript, event, trigger, prefix)
    else:
        replay = _replay_service(transcript, event, trigger, prefix)
    return AuditExplanation(
        event_index=event_index, decider=decider, outcome=outcome, reason=reason,
        chain=chain, replay_outcome=replay[0], replay_reason=replay[1],
    )


def _replay_ownership(items) -> bool:
    proof = next((i for i in items if i.kind is ItemKind.PROVE_OWNER), None)
    if proof is None:
        return False
    key_id, public_canonical, challenge, response = proof.fields
    try:
        public = crypto.public_key_from_canonical(public_canonical)
    except crypto.CryptoError:
        return False
    return crypto.verify(
        public, crypto.TAG_CHALLENGE + challenge, crypto.Signature(key_id, response)
    )


def _replay_ap(transcript, event, trigger, prefix: Ledger):
    items = trigger.message.items
    kinds = [i.kind for i in items]
    if ItemKind.ERROR in kinds:
        return REJECTED, trigger.message.find(ItemKind.ERROR).fields[0].decode()
    variant = transcript.variant
    offline = any(
        i.kind is ItemKind.REQUEST_PARAM and i.fields[0].startswith(b"otid:") for i in items
    )
    signed = [i for i in items if i.kind is ItemKind.SIGNED]
    note = next((i for i in signed if i.fields[1].startswith(TAG_TOKEN_KEY)), None)
    if note is not None:
        return _replay_ap_spend(items, note, prefix)
    proof = next((i for i in items if i.kind is ItemKind.PROVE_OWNER), None)
    if proof is None:
        return REJECTED, R_BAD_PROOF
    public_canonical = proof.fields[1]
    if variant in (Variant.V4, Variant.V4_OFF):
        cert = next((i for i in signed if i.fields[1].startswith(TAG_CRED_KEY)), None)
        if cert is None:
            return REJECTED, R_NO_CERT
        signer_key_id, body, sig_value = cert.fields
        record = prefix.registry_record(signer_key_id)
        if record is None or record.owner_role != "CP":
            return REJECTED, R_UNKNOWN_CP
        if body != cred_key_message(public_canonical) or not crypto.verify(
            record.public_key(), body, crypto.Signature(signer_key_id, sig_value)
        ):
            return REJECTED, R_BAD_SIG
        if prefix.revocation_status(signer_key_id) != "valid":
            return REJECTED, R_REVOKED
        presented = (signer_key_id, sig_value)
    else:
        cert_entry = None
        for entry in prefix.entries():
            if entry.kind is EntryKind.CERTIFICATE and entry.payload[0] == public_canonical:
                cert_entry = entry
                break
        if cert_entry is None:
            return REJECTED, R_NO_CERT
        record = prefix.registry_record(cert_entry.author_key_id)
        if record is None:
            return REJECTED, R_UNKNOWN_CP
        if not crypto.verify(record.public_key(), cred_key_message(public_canonical),
                             crypto.Signature(cert_entry.author_key_id, cert_entry.payload[1])):
            return REJECTED, R_BAD_SIG
        if prefix.revocation_status(cert_entry.seq) != "valid":
            return REJECTED, R_REVOKED
        presented = (cert_entry.author_key_id, cert_entry.payload[1])
    if not _replay_ownership(items):
        return REJECTED, R_BAD_PROOF
    if offline:
        ap_name = event.sender
        updates_tick = max(
            (e.tick for e in transcript.events[: event.index]
             if e.receiver == ap_name and e.message.find(ItemKind.LEDGER_UPDATES) is not None),
            default=-1,
        )
        bound = int(transcript.config.get(ap_name, {}).get("stale-bound", "10"))
        if event.tick - updates_tick > bound:
            return REJECTED, R_STALE
        has_timely = any(
            r.timely and r.owner == ap_name and r.expiry_tick > event.tick
            for r in prefix.registry_records()
        )
        if not has_timely:
            return REJECTED, R_EXPIRED
        reused = any(
            p.cert_signer_key_id == presented[0] and p.signature == presented[1]
            for p in _presented_payloads(prefix)
        ) or _voucher_reuse_before(transcript, event, presented)
        if reused:
            return REJECTED, R_DUPLICATE
        return AUTHORISED, "ok"
    duplicate = any(
        p.cert_signer_key_id == presented[0] and p.signature == presented[1]
        for p in _presented_payloads(prefix)
    )
    if duplicate and prefix.config.reuse_policy == "disallow":
        return REJECTED, R_DUPLICATE
    return AUTHORISED, "ok"


def _presented_payloads(prefix: Ledger):
    for entry in prefix.entries():
        if entry.kind is EntryKind.PRESENTED_SIGNATURE:
            yield PresentedSignaturePayload.from_fields(entry.payload)


def _voucher_reuse_before(transcript, event, presented) -> bool:
    """Voucher issuance records reuse in the AP's local cache, visible in the
    transcript as earlier authorised voucher decisions for the same credential."""
    for prior in transcript.events[: event.index]:
        if prior.sender != event.sender or prior.receiver != event.sender:
            continue
        item = prior.message.find(ItemKind.DECISION)
        if item is None:
            continue
        outcome, _, _, _ = messages.decision_fields(item)
        if outcome != AUTHORISED:
            continue
        trig = _trigger_message(transcript, prior, event.sender)
        if trig is None:
            continue
        for i in trig.message.items:
            if i.kind is ItemKind.SIGNED and i.fields[1].startswith(TAG_CRED_KEY) and \
                    (i.fields[0], i.fields[2]) == presented:
                return True
    return False


def _replay_ap_spend(items, note, prefix: Ledger):
    cp_key_id, note_body, note_sig = note.fields
    canonical = note_body[len(TAG_TOKEN_KEY):]
    record = prefix.registry_record(cp_key_id)
    if record is None or record.owner_role != "CP":
        return REJECTED, R_UNKNOWN_CP
    if not crypto.verify(record.public_key(), note_body, crypto.Signature(cp_key_id, note_sig)):
        return REJECTED, R_BAD_SIG
    if prefix.revocation_status(cp_key_id) != "valid":
        return REJECTED, R_REVOKED
    endorse = next(
        (i for i in items if i.kind is ItemKind.SIGNED and i.fields[1].startswith(TAG_ENDORSE)),
        None,
    )
    if endorse is None:
        return REJECTED, R_BAD_PROOF
    try:
        token_public = crypto.public_key_from_canonical(canonical)
    except crypto.CryptoError:
        return REJECTED, R_BAD_SIG
    if not crypto.verify(token_public, endorse.fields[1],
                         crypto.Signature(endorse.fields[0], endorse.fields[2])):
        return REJECTED, R_BAD_SIG
    if not _replay_ownership(items):
        return REJECTED, R_BAD_PROOF
    spent = False
    for entry in prefix.entries():
        if entry.kind is EntryKind.TOKEN_TRANSFER and entry.payload[3] == canonical:
            spent = True
    if spent:
        return REJECTED, "double-spend"
    return AUTHORISED, "ok"


def _replay_service(transcript, event, trigger, prefix: Ledger):
    items = trigger.message.items
    kinds = [i.kind for i in items]
    now = event.tick
    if ItemKind.ERROR in kinds:
        return REJECTED, trigger.message.find(ItemKind.ERROR).fields[0].decode()
    if ItemKind.VOUCHER in kinds:
        item = trigger.message.find(ItemKind.VOUCHER)
        one_time_id, signer_key_id, sig_value, _ = item.fields
        record = prefix.registry_record(signer_key_id)
        if record is None or record.owner_role != "AP":
            return REJECTED, R_UNKNOWN_AP
        if record.timely and now >= record.expiry_tick:
            return REJECTED, R_EXPIRED
        if not crypto.verify(record.public_key(), TAG_ONE_TIME_ID + one_time_id,
                             crypto.Signature(signer_key_id, sig_value)):
            return REJECTED, R_BAD_SIG
        if _one_time_id_used_before(transcript, event, one_time_id):
            return REJECTED, R_DUP_OTID
        return AUTHORISED, "ok"
    if ItemKind.OBJECT in kinds:
        item = trigger.message.find(ItemKind.OBJECT)
        one_time_id, seq_bytes, head_hash, signer_key_id, sig_value = item.fields
        record = prefix.registry_record(signer_key_id)
        if record is None or record.owner_role != "AP":
            return REJECTED, R_UNKNOWN_AP
        body = object_message(one_time_id, read_u64(seq_bytes), head_hash)
        if not crypto.verify(record.public_key(), body, crypto.Signature(signer_key_id, sig_value)):
            return REJECTED, R_BAD_SIG
        if _one_time_id_used_before(transcript, event, one_time_id):
            return REJECTED, R_DUP_OTID
        return AUTHORISED, "ok"
    if ItemKind.RECEIPT in kinds and ItemKind.SIGNED in kinds:
        receipt_item = trigger.message.find(ItemKind.RECEIPT)
        signed_item = trigger.message.find(ItemKind.SIGNED)
        seq = read_u64(receipt_item.fields[0])
        signer_key_id, body, sig_value = signed_item.fields
        record = prefix.registry_record(signer_key_id)
        if record is None or record.owner_role != "AP":
            return REJECTED, R_UNKNOWN_AP
        if body != receipt_message(seq, receipt_item.fields[1]) or not crypto.verify(
            record.public_key(), body, crypto.Signature(signer_key_id, sig_value)
        ):
            return REJECTED, R_BAD_SIG
        return AUTHORISED, "ok"
    if ItemKind.SIGNED in kinds:
        signed_item = trigger.message.find(ItemKind.SIGNED)
        signer_key_id, body, sig_value = signed_item.fields
        record = prefix.registry_record(signer_key_id)
        if record is None or record.owner_role != "AP":
            return REJECTED, R_UNKNOWN_AP
        nonce = _session_nonce(transcript, event)
        if nonce is not None and body != TAG_NONCE + nonce:
            return REJECTED, R_BAD_SIG
        if not crypto.verify(record.public_key(), body, crypto.Signature(signer_key_id, sig_value)):
            return REJECTED, R_BAD_SIG
        return AUTHORISED, "ok"
    return REJECTED, "unrecognised-response"


def _session_nonce(transcript, event) -> bytes | None:
    for prior in transcript.events[: event.index]:
        if prior.sender == event.sender and prior.message.session == event.message.session:
            for item in prior.message.find_all(ItemKind.REQUEST_PARAM):
                if item.fields[0].startswith(b"nonce:"):
                    return item.fields[0][len(b"nonce:"):]
    return None


def _one_time_id_used_before(transcript, event, one_time_id) -> bool:
    for prior in transcript.events[: event.index]:
        if prior.sender != event.sender or prior.receiver != event.sender:
            continue
        item = prior.message.find(ItemKind.DECISION)
        if item is None or messages.decision_fields(item)[0] != AUTHORISED:
            continue
        trig = _trigger_message(transcript, prior, event.sender)
        if trig is None:
            continue
        for i in trig.message.items:
            if i.kind in (ItemKind.VOUCHER, ItemKind.OBJECT) and i.fields[0] == one_time_id:
                return True
    return False


def decision_events(transcript: SessionTranscript, roles=("ap", "service")) -> list[Event]:
    return [
        e for e in transcript.events
        if e.message.find(ItemKind.DECISION) is not None
        and transcript.parties.get(e.sender) in roles
    ]


# --- constraint report -----------------------------------------------------------------

LINKAGE_TOLERANCE = 0.10

_GOVERNANCE_NOTES = {
    2: "processes and practices are institutional; the protocol removes the "
       "control points such processes would need",
    4: "trust relationships are chosen per session; no fixed binding is "
       "imposed by the message flows",
    7: "local trust relationships are business decisions outside the protocol",
    8: "business practices and methods are provider-internal policy",
}


@dataclass
class ConstraintFinding:
    number: int
    title: str
    status: str  # pass | fail | governance | not-exercised
    evidence: str


@dataclass
class ConstraintReport:
    findings: list[ConstraintFinding]
    anonymity_sets: dict[tuple[str, str], int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["constraint-report"]
        for f in self.findings:
            lines.append(f"  constraint {f.number} {f.title}: {f.status}")
            lines.append(f"    evidence: {f.evidence}")
        if self.anonymity_sets:
            lines.append("  anonymity-sets")
            for (category, interval), size in sorted(self.anonymity_sets.items()):
                lines.append(f"    category {category} interval {interval}: {size}")
        return "\n".join(lines) + "\n"


def _message_graph_stats(transcript: SessionTranscript):
    roles = transcript.parties
    cp_ap_edges = set()
    for e in transcript.events:
        if e.sender == e.receiver:
            continue
        pair = (roles.get(e.sender), roles.get(e.receiver))
        if set(pair) == {"cp", "ap"}:
            cp_ap_edges.add((e.sender, e.receiver))
    # parties the user talked to, per service session
    path_parties: dict[str, set[str]] = {}
    for session, user in transcript.ground_truth.items():
        touched = set()
        for e in transcript.events:
            if e.message.session != session:
                continue
            if e.sender == user and e.receiver != user:
                touched.add(e.receiver)
            elif e.receiver == user and e.sender != user:
                touched.add(e.sender)
        path_parties[session] = touched
    common = set.intersection(*path_parties.values()) if path_parties else set()
    return cp_ap_edges, path_parties, common


def anonymity_set_sizes(ledger: Ledger | None) -> dict[tuple[str, str], int]:
    if ledger is None:
        return {}
    sizes: dict[tuple[str, str], int] = {}
    for entry in ledger.entries():
        if entry.kind is not EntryKind.CERTIFICATE:
            continue
        record = ledger.registry_record(entry.author_key_id)
        category = record.category if record else "?"
        interval = str(record.interval) if record and record.interval is not None else "-"
        sizes[(category, interval)] = sizes.get((category, interval), 0) + 1
    return sizes


def constraint_report(
    transcript: SessionTranscript,
    ledger: Ledger | None,
    oracle_result: LinkageGuess | None,
) -> ConstraintReport:
    findings: list[ConstraintFinding] = []
    cp_ap_edges, path_parties, common = _message_graph_stats(transcript)
    registrations = 0
    if ledger is not None:
        registrations = sum(
            1 for e in ledger.entries() if e.kind is EntryKind.KEY_REGISTRY
        )
    n_cp = sum(1 for r in transcript.parties.values() if r == "cp")
    n_ap = sum(1 for r in transcript.parties.values() if r == "ap")

    mandatory = sorted(common - {"ledger"} - set(
        name for name, role in transcript.parties.items() if role == "user"
    ))
    structural_ok = not cp_ap_edges and (not path_parties or not mandatory)
    findings.append(ConstraintFinding(
        1, "minimise control points",
        "pass" if structural_ok else "fail",
        f"{n_cp} CPs + {n_ap} APs with {registrations} ledger registrations, "
        f"{len(cp_ap_edges)} direct CP-AP message edges, "
        f"mandatory non-user intermediaries on all paths: {mandatory or 'none'}",
    ))
    findings.append(ConstraintFinding(
        2, "resist abusive processes", "governance", _GOVERNANCE_NOTES[2]))
    if oracle_result is not None:
        leak = oracle_result.accuracy - oracle_result.baseline
        findings.append(ConstraintFinding(
            3, "mitigate mass surveillance",
            "pass" if leak <= LINKAGE_TOLERANCE else "fail",
            f"linkage-oracle accuracy {oracle_result.accuracy:.4f} vs random baseline "
            f"{oracle_result.baseline:.4f} (tolerance {LINKAGE_TOLERANCE:.2f})",
        ))
    else:
        findings.append(ConstraintFinding(
            3, "mitigate mass surveillance", "not-exercised",
            "no linkage experiment was run on this transcript"))
    findings.append(ConstraintFinding(
        4, "no non-consensual trust", "governance", _GOVERNANCE_NOTES[4]))
    if oracle_result is not None:
        leak = oracle_result.accuracy - oracle_result.baseline
        findings.append(ConstraintFinding(
            5, "user-managed linkages",
            "pass" if leak <= LINKAGE_TOLERANCE else "fail",
            "per-credential sessions remain unlinked: oracle at "
            f"{oracle_result.accuracy:.4f} against baseline {oracle_result.baseline:.4f} "
            f"across {len(oracle_result.sessions)} sessions",
        ))
    else:
        findings.append(ConstraintFinding(
            5, "user-managed linkages", "not-exercised",
            "no linkage experiment was run on this transcript"))
    findings.append(ConstraintFinding(
        6, "prevent monopoly position",
        "pass" if structural_ok else "fail",
        f"relationship edges grow as registrations (n+m = {n_cp + n_ap}); "
        f"no provider sits on every user-service path: {mandatory or 'none'}",
    ))
    findings.append(ConstraintFinding(
        7, "local trust relationships", "governance", _GOVERNANCE_NOTES[7]))
    findings.append(ConstraintFinding(
        8, "own business practices", "governance", _GOVERNANCE_NOTES[8]))
    return ConstraintReport(findings=findings, anonymity_sets=anonymity_set_sizes(ledger))

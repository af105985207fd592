"""Deterministic simulated network and clock for multi-party scenario runs.

The scheduler owns a FIFO message queue and a logical clock. Time advances
only through explicit tick boundaries: boundary t fires interval publications
and key rotations stamped t, then pushes ledger updates to subscribed readers.
Given a scenario and a master seed, transcripts are byte-identical across runs.

Channel anonymity is a property of the variant, not of single messages: in the
baseline variants the user is known to the authentication provider, from V2 on
the user reaches it over an anonymous channel. Every recorded event carries the
endpoint labels as the counterparty saw them, which is exactly the material an
adversary coalition gets to work with.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from . import crypto, messages
from .actors import (
    AuthenticationProvider,
    BASELINE_CATEGORY,
    CertificationProvider,
    LEDGER_VARIANTS,
    LedgerNode,
    Party,
    REVOKE_ONE_VARIANTS,
    ServiceProvider,
    TOKEN_VARIANTS,
    UserWallet,
    Variant,
)
from .crypto import DESK, SIM, TOY, ParameterSet
from .encoding import sha256
from .ledger import EntryKind, KeyRegistryRecord, Ledger, LedgerConfig, sign_bytes
from .messages import ItemKind, ProtocolMessage


class ScenarioError(Exception):
    """Malformed scenario script; raised before any event is produced."""


class DeadlockError(Exception):
    pass


LEDGER_PARTY = "ledger"


@dataclass(frozen=True)
class Event:
    index: int
    tick: int
    sender: str
    receiver: str
    sender_label: str
    receiver_label: str
    message: ProtocolMessage

    def frame(self) -> bytes:
        return messages.frame(self.tick, self.sender, self.sender_label, self.receiver,
                              self.receiver_label, self.message)


@dataclass
class SessionTranscript:
    variant: Variant
    parties: dict[str, str]  # name -> role
    events: list[Event] = field(default_factory=list)
    ground_truth: dict[str, str] = field(default_factory=dict)  # session -> user
    scale: str = "desk"
    config: dict[str, dict[str, str]] = field(default_factory=dict)  # per-party run options

    def projection(self, party: str) -> list[Event]:
        """Exactly the events this party sent or received."""
        return [e for e in self.events if party in (e.sender, e.receiver)]

    def sessions_with_decision(self) -> list[str]:
        out = []
        for e in self.events:
            if e.message.find(ItemKind.DECISION) is not None and \
                    self.parties.get(e.sender) == "service" and \
                    e.message.session not in out:
                out.append(e.message.session)
        return out

    def to_text(self) -> str:
        lines = ["credsim-transcript v1",
                 f"variant {self.variant.value}",
                 f"scale {self.scale}"]
        for name, role in self.parties.items():
            lines.append(f"party {name} {role}")
        for name, options in self.config.items():
            opts = " ".join(f"{k}={v}" for k, v in sorted(options.items()))
            lines.append(f"config {name} {opts}")
        for session, user in self.ground_truth.items():
            lines.append(f"truth {session} {user}")
        for e in self.events:
            lines.append(e.frame().hex())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SessionTranscript":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "credsim-transcript v1":
            raise ScenarioError("not a transcript file")
        transcript = cls(variant=Variant.V0, parties={})
        index = 0
        for line in lines[1:]:
            if line.startswith("variant "):
                transcript.variant = Variant(line.split()[1])
            elif line.startswith("scale "):
                transcript.scale = line.split()[1]
            elif line.startswith("party "):
                _, name, role = line.split()
                transcript.parties[name] = role
            elif line.startswith("config "):
                parts = line.split()
                transcript.config[parts[1]] = dict(p.split("=", 1) for p in parts[2:])
            elif line.startswith("truth "):
                _, session, user = line.split()
                transcript.ground_truth[session] = user
            else:
                tick, sender, s_label, receiver, r_label, message = messages.unframe(
                    bytes.fromhex(line)
                )
                transcript.events.append(Event(index, tick, sender, receiver, s_label,
                                               r_label, message))
                index += 1
        return transcript


class Network:
    """FIFO message delivery with explicit partitions and a logical clock."""

    def __init__(self, variant: Variant, master_seed: bytes, shuffle_seed: int | None = None):
        self.variant = variant
        self.master_seed = master_seed
        self.queue: deque = deque()
        self.partitions: set[frozenset] = set()
        self.actors: dict[str, Party] = {}
        self.roles: dict[str, str] = {}
        self.events: list[Event] = []
        self.now = 0
        self.boundary_count = 0
        self._shuffle = random.Random(shuffle_seed) if shuffle_seed is not None else None

    def rng_for(self, label: str) -> random.Random:
        return random.Random(int.from_bytes(sha256(self.master_seed + b"|" + label.encode()), "big"))

    def register(self, actor: Party, role: str):
        self.actors[actor.name] = actor
        self.roles[actor.name] = role

    def partition(self, a: str, b: str):
        self.partitions.add(frozenset((a, b)))

    def unpartition(self, a: str, b: str):
        self.partitions.discard(frozenset((a, b)))

    def is_partitioned(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.partitions

    def _user_label(self, user: str, other: str, session: str) -> str:
        """How the counterparty sees the user end of the channel."""
        other_role = self.roles.get(other)
        if other_role == "service":
            return f"anon:{session}"
        if other_role == "ap" and self.variant not in (Variant.V0, Variant.V1):
            return f"anon:{session}"
        return user

    def labels_for(self, sender: str, receiver: str, session: str) -> tuple[str, str]:
        sender_label, receiver_label = sender, receiver
        if self.roles.get(sender) == "user":
            sender_label = self._user_label(sender, receiver, session)
        if self.roles.get(receiver) == "user":
            receiver_label = self._user_label(receiver, sender, session)
        return sender_label, receiver_label

    def send(self, sender: str, receiver: str, session: str, items) -> bool:
        if receiver not in self.actors:
            raise ScenarioError(f"unknown party {receiver!r}")
        if self.is_partitioned(sender, receiver):
            return False
        self.queue.append((sender, receiver, ProtocolMessage(session=session, items=tuple(items))))
        return True

    def record_decision(self, party: str, session: str, item):
        message = ProtocolMessage(session=session, items=(item,))
        self.events.append(Event(len(self.events), self.now, party, party, party, party, message))

    def pump(self, max_steps: int = 200_000):
        steps = 0
        while self.queue:
            steps += 1
            if steps > max_steps:
                raise DeadlockError(f"message storm: {len(self.queue)} messages still queued")
            if self._shuffle is not None and len(self.queue) > 1:
                idx = self._shuffle.randrange(len(self.queue))
                self.queue.rotate(-idx)
                sender, receiver, message = self.queue.popleft()
                self.queue.rotate(idx)
            else:
                sender, receiver, message = self.queue.popleft()
            sender_label, receiver_label = self.labels_for(sender, receiver, message.session)
            self.events.append(Event(len(self.events), self.now, sender, receiver,
                                     sender_label, receiver_label, message))
            self.actors[receiver].handle(sender, sender_label, message)

    def fire_boundary(self, ledger_node: LedgerNode | None):
        """One tick boundary: clock-driven actor work, then update fan-out."""
        t = self.now
        for actor in self.actors.values():
            actor.on_tick_boundary(t)
        self.pump()
        if ledger_node is not None:
            ledger_node.push_updates()
            self.pump()
        self.boundary_count += 1
        self.now = self.boundary_count


# --- scenario scripts ---------------------------------------------------------------


@dataclass
class PartySpec:
    name: str
    role: str
    options: dict


@dataclass
class ActionSpec:
    verb: str
    positional: list[str]
    options: dict
    line_no: int


@dataclass
class Scenario:
    name: str
    variant: Variant
    parties: list[PartySpec]
    actions: list[ActionSpec]
    test_scale: bool = False
    options: dict = field(default_factory=dict)


_PARTY_ROLES = {"cp": "cp", "ap": "ap", "user": "user", "service": "service"}
_ACTION_VERBS = {
    "enroll", "tick", "authorize", "prefetch", "issue-tokens", "spend",
    "prefetch-object", "redeem", "revoke", "partition", "unpartition",
}


def _parse_tokens(tokens: list[str]) -> tuple[list[str], dict]:
    positional, options = [], {}
    for token in tokens:
        if "=" in token:
            key, value = token.split("=", 1)
            options[key] = value
        else:
            positional.append(token)
    return positional, options


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    variant = None
    parties: list[PartySpec] = []
    actions: list[ActionSpec] = []
    test_scale = False
    options: dict = {}
    seen_names: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "variant":
            try:
                variant = Variant(tokens[1])
            except (IndexError, ValueError):
                raise ScenarioError(f"line {line_no}: unknown variant")
        elif head == "scale":
            test_scale = tokens[1] == "test"
        elif head == "option":
            _, opts = _parse_tokens(tokens[1:])
            options.update(opts)
        elif head in _PARTY_ROLES:
            if len(tokens) < 2:
                raise ScenarioError(f"line {line_no}: party needs a name")
            pname = tokens[1]
            if pname in seen_names or pname == LEDGER_PARTY:
                raise ScenarioError(f"line {line_no}: duplicate party name {pname!r}")
            seen_names.add(pname)
            _, opts = _parse_tokens(tokens[2:])
            parties.append(PartySpec(name=pname, role=_PARTY_ROLES[head], options=opts))
        elif head in _ACTION_VERBS:
            positional, opts = _parse_tokens(tokens[1:])
            actions.append(ActionSpec(verb=head, positional=positional, options=opts,
                                      line_no=line_no))
        else:
            raise ScenarioError(f"line {line_no}: unknown directive {head!r}")
    if variant is None:
        raise ScenarioError("scenario does not declare a variant")
    return Scenario(name=name, variant=variant, parties=parties, actions=actions,
                    test_scale=test_scale, options=options)


# --- scenario runner -----------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    transcript: SessionTranscript
    ledger: Ledger | None
    summary: dict
    network: Network
    actors: dict

    @property
    def protocol_ok(self) -> bool:
        return (
            self.summary["rejections"] == 0
            and self.summary["failures"] == 0
            and not self.summary["action_errors"]
        )

    def summary_text(self) -> str:
        s = self.summary
        lines = [
            f"scenario {self.scenario.name}",
            f"variant {self.scenario.variant.value}",
            f"events {len(self.transcript.events)}",
            f"ticks {s['ticks']}",
            f"sessions {s['sessions']}",
            f"authorisations {s['authorisations']}",
            f"rejections {s['rejections']}",
            f"failures {s['failures']}",
        ]
        for session, reason in sorted(s["rejection_reasons"].items()):
            lines.append(f"rejected {session} {reason}")
        for err in s["action_errors"]:
            lines.append(f"action-error {err}")
        if s["pending_sessions"]:
            lines.append("deadlock pending=" + ",".join(sorted(s["pending_sessions"])))
        return "\n".join(lines) + "\n"


class _Counter:
    def __init__(self):
        self.values: dict[str, int] = {}

    def next(self, prefix: str) -> str:
        n = self.values.get(prefix, 0) + 1
        self.values[prefix] = n
        return f"{prefix}{n:03d}"


def run_scenario(scenario: Scenario, master_seed: bytes = b"0",
                 params: ParameterSet | None = None,
                 shuffle_seed: int | None = None) -> RunResult:
    if params is None:
        params = SIM if scenario.test_scale else DESK
    if params is TOY and not scenario.test_scale:
        raise ScenarioError("TOY parameters are only permitted in test-scale scenarios")
    variant = scenario.variant
    _validate_action_refs(scenario)

    net = Network(variant, master_seed, shuffle_seed=shuffle_seed)
    ledger_node = None
    ledger = None
    genesis = None
    if variant in LEDGER_VARIANTS:
        genesis = crypto.generate_keypair(master_seed + b"|genesis-authority", params)
        ledger = Ledger(LedgerConfig(
            genesis_authority=genesis.public_part,
            allow_revoke_one=variant in REVOKE_ONE_VARIANTS,
            reuse_policy=scenario.options.get("reuse", "disallow"),
        ))
        ledger_node = LedgerNode(LEDGER_PARTY, net, net.rng_for(LEDGER_PARTY), variant, params,
                                 ledger)
        net.register(ledger_node, "ledger")

    cps: dict[str, CertificationProvider] = {}
    aps: dict[str, AuthenticationProvider] = {}
    users: dict[str, UserWallet] = {}
    services: dict[str, ServiceProvider] = {}

    for spec in scenario.parties:
        rng = net.rng_for(spec.name + spec.options.get("seed", ""))
        if spec.role == "cp":
            cp = CertificationProvider(
                spec.name, net, rng, variant, params,
                intervals=int(spec.options.get("intervals", 4)),
                interval_length=int(spec.options.get("interval-length", 1)),
                rejects=set(filter(None, spec.options.get("rejects", "").split(","))),
                ledger_party=LEDGER_PARTY,
            )
            cps[spec.name] = cp
            net.register(cp, "cp")
        elif spec.role == "user":
            wallet = UserWallet(spec.name, net, rng, variant, params)
            users[spec.name] = wallet
            net.register(wallet, "user")

    categories = [cp.category for cp in cps.values()]
    if variant in (Variant.V0, Variant.V1):
        categories = [BASELINE_CATEGORY]

    for spec in scenario.parties:
        if spec.role != "ap":
            continue
        rng = net.rng_for(spec.name + spec.options.get("seed", ""))
        ap = AuthenticationProvider(
            spec.name, net, rng, variant, params,
            categories=categories,
            ledger_party=LEDGER_PARTY,
            ledger_config=ledger.config if ledger else None,
            rotate_period=int(spec.options.get("rotate-period", 10)),
            stale_bound=int(spec.options.get("stale-bound", 10)),
            timely=spec.options.get("timely", "on" if variant.value.endswith("-off") else "off")
            == "on",
            known_cp_keys={cp.base_key.key_id: cp.base_key.public_part for cp in cps.values()},
        )
        aps[spec.name] = ap
        net.register(ap, "ap")

    for spec in scenario.parties:
        if spec.role != "service":
            continue
        rng = net.rng_for(spec.name + spec.options.get("seed", ""))
        policy_cp = spec.options.get("policy")
        if policy_cp is None and cps:
            policy_cp = next(iter(cps))
        policy = cps[policy_cp].category if policy_cp in cps else BASELINE_CATEGORY
        known_ap_keys = {}
        for ap in aps.values():
            for category, kp in ap.category_keys.items():
                known_ap_keys[kp.key_id] = (kp.public_part, category)
        service = ServiceProvider(
            spec.name, net, rng, variant, params,
            policy_category=policy,
            ledger_config=ledger.config if ledger else None,
            known_ap_keys=known_ap_keys,
            accepts_tokens_of=policy_cp,
        )
        services[spec.name] = service
        net.register(service, "service")

    # out-of-band wiring: what each party knows before any message flows
    for cp in cps.values():
        cp.known_identities = set(users)
    for wallet in users.values():
        for cp in cps.values():
            info = {
                "base": cp.base_key.public_part, "base_id": cp.base_key.key_id,
                "category": cp.category,
                "intervals": {i: kp.public_part for i, kp in cp.interval_keys.items()},
                "interval_ids": {i: kp.key_id for i, kp in cp.interval_keys.items()},
            }
            if cp.token_key is not None:
                info["token"] = cp.token_key.public_part
                info["token_id"] = cp.token_key.key_id
            wallet.cp_keys[cp.name] = info
        for ap in aps.values():
            wallet.ap_keys[ap.name] = {
                category: (kp.key_id, kp.public_part)
                for category, kp in ap.category_keys.items()
            }
        for service in services.values():
            wallet.service_policies[service.name] = service.policy_category

    if ledger is not None:
        _register_genesis_keys(ledger, genesis, cps, aps, net)
        for name in list(aps) + list(services):
            ledger_node.subscribe(name)
        ledger_node.push_updates()
        net.pump()

    return _execute_actions(scenario, net, ledger_node, ledger, cps, aps, users, services)


def _validate_action_refs(scenario: Scenario):
    names = {spec.name for spec in scenario.parties} | {LEDGER_PARTY}
    for action in scenario.actions:
        if action.verb in ("tick",):
            continue
        for ref in action.positional:
            if ref in ("one", "all"):
                continue
            if ref not in names:
                raise ScenarioError(
                    f"line {action.line_no}: action references undefined party {ref!r}"
                )


def _register_genesis_keys(ledger: Ledger, genesis, cps, aps, net):
    def register(record: KeyRegistryRecord):
        fields = record.to_fields()
        sig = crypto.sign(genesis.private_part, genesis.public_part,
                          sign_bytes(EntryKind.KEY_REGISTRY, 0, tuple(fields)))
        ledger.append_raw(EntryKind.KEY_REGISTRY, tuple(fields), genesis.key_id, sig.value, 0)

    for cp in cps.values():
        register(KeyRegistryRecord(
            owner_role="CP", owner=cp.name, key_id=cp.base_key.key_id,
            key_value=cp.base_key.public_part.canonical(), category=cp.category,
        ))
        for i, kp in cp.interval_keys.items():
            register(KeyRegistryRecord(
                owner_role="CP", owner=cp.name, key_id=kp.key_id,
                key_value=kp.public_part.canonical(), category=cp.category, interval=i,
            ))
        if cp.token_key is not None:
            register(KeyRegistryRecord(
                owner_role="CP", owner=cp.name, key_id=cp.token_key.key_id,
                key_value=cp.token_key.public_part.canonical(), category=cp.category,
            ))
    for ap in aps.values():
        register(KeyRegistryRecord(
            owner_role="AP", owner=ap.name, key_id=ap.base_key.key_id,
            key_value=ap.base_key.public_part.canonical(), category="",
        ))
        for category, kp in ap.category_keys.items():
            register(KeyRegistryRecord(
                owner_role="AP", owner=ap.name, key_id=kp.key_id,
                key_value=kp.public_part.canonical(), category=category,
            ))


def _execute_actions(scenario, net, ledger_node, ledger, cps, aps, users, services) -> RunResult:
    counter = _Counter()
    ground_truth: dict[str, str] = {}
    action_errors: list[str] = []
    variant = scenario.variant

    def settle():
        net.pump()
        if ledger_node is not None:
            before = ledger_node.ledger.head_seq
            if any(cursor < before for cursor in ledger_node.subscribers.values()):
                ledger_node.push_updates()
                net.pump()

    for action in scenario.actions:
        verb, pos, opts = action.verb, action.positional, action.options
        try:
            if verb == "tick":
                for _ in range(int(pos[0]) if pos else 1):
                    net.fire_boundary(ledger_node)
            elif verb == "enroll":
                user, cp = users[pos[0]], pos[1]
                session = counter.next("e")
                n = int(opts.get("n", "1"))
                intervals = None
                if "intervals" in opts:
                    intervals = [int(x) for x in opts["intervals"].split(",")]
                if variant in TOKEN_VARIANTS:
                    user.begin_token_purchase(session, cp, n)
                else:
                    user.begin_enroll(session, cp, n, intervals=intervals, ap_name=opts.get("ap"))
            elif verb == "issue-tokens":
                user, cp = users[pos[0]], pos[1]
                session = counter.next("t")
                user.begin_token_purchase(session, cp, int(opts.get("n", "1")))
            elif verb == "authorize":
                user, service = users[pos[0]], services[pos[1]]
                ap = pos[2] if len(pos) > 2 else (next(iter(aps)) if aps else None)
                session = counter.next("s")
                ground_truth[session] = user.name
                directive = {"kind": "authorize", "ap": ap}
                if "slot" in opts:
                    directive["slot"] = int(opts["slot"])
                if opts.get("reuse-voucher") == "yes":
                    directive["reuse_voucher"] = True
                user.add_directive(session, **directive)
                service.start_request(session, user.name)
            elif verb == "spend":
                user, service = users[pos[0]], services[pos[1]]
                ap = pos[2] if len(pos) > 2 else next(iter(aps))
                session = counter.next("s")
                ground_truth[session] = user.name
                directive = {"kind": "spend", "ap": ap}
                if "note" in opts:
                    directive["note"] = int(opts["note"])
                user.add_directive(session, **directive)
                service.start_request(session, user.name)
            elif verb == "prefetch":
                user, ap = users[pos[0]], pos[1]
                session = counter.next("p")
                user.begin_prefetch(session, ap,
                                    slot_index=int(opts["slot"]) if "slot" in opts else None)
            elif verb == "prefetch-object":
                user, ap, service = users[pos[0]], pos[1], pos[2]
                session = counter.next("o")
                user.begin_object_prefetch(session, ap, service,
                                           note_index=int(opts["note"]) if "note" in opts else None)
            elif verb == "redeem":
                user, service = users[pos[0]], services[pos[1]]
                session = counter.next("s")
                ground_truth[session] = user.name
                directive = {"kind": "redeem"}
                if opts.get("reuse-object") == "yes":
                    directive["reuse_object"] = True
                user.add_directive(session, **directive)
                service.start_request(session, user.name)
            elif verb == "revoke":
                cp = cps[pos[0]]
                scope = pos[1]
                err = cp.revoke(
                    scope,
                    cert_index=int(opts["cert-index"]) if "cert-index" in opts else None,
                    interval=int(opts["interval"]) if "interval" in opts else None,
                    ap_names=list(aps),
                )
                if err is not None:
                    action_errors.append(f"line {action.line_no}: revoke: {err}")
            elif verb == "partition":
                net.partition(pos[0], pos[1])
            elif verb == "unpartition":
                net.unpartition(pos[0], pos[1])
            settle()
        except (KeyError, IndexError, ValueError) as exc:
            raise ScenarioError(f"line {action.line_no}: bad action {verb}: {exc}") from exc

    transcript = SessionTranscript(
        variant=variant,
        parties=dict(net.roles),
        events=net.events,
        ground_truth=ground_truth,
        scale="test" if scenario.test_scale else "desk",
        config={
            ap.name: {
                "stale-bound": str(ap.stale_bound),
                "rotate-period": str(ap.rotate_period),
            }
            for ap in aps.values()
        },
    )
    summary = _summarise(scenario, net, users, transcript, action_errors)
    actors = {**cps, **aps, **users, **services}
    if ledger_node is not None:
        actors[LEDGER_PARTY] = ledger_node
    return RunResult(scenario=scenario, transcript=transcript, ledger=ledger,
                     summary=summary, network=net, actors=actors)


def _summarise(scenario, net, users, transcript, action_errors) -> dict:
    authorisations = 0
    rejections = 0
    rejection_reasons: dict[str, str] = {}
    for e in transcript.events:
        item = e.message.find(ItemKind.DECISION)
        if item is None or transcript.parties.get(e.sender) != "service":
            continue
        outcome, reason, _cursor, _refs = messages.decision_fields(item)
        if outcome == "authorised":
            authorisations += 1
        else:
            rejections += 1
            rejection_reasons[e.message.session] = reason
    failures = 0
    pending = []
    for wallet in users.values():
        for state in wallet.sessions.values():
            if state.result is None and state.kind != "enroll":
                pending.append(state.session)
            if state.result == "failed" and state.kind in ("enroll", "tokens", "prefetch"):
                failures += 1
    return {
        "sessions": len(transcript.ground_truth),
        "authorisations": authorisations,
        "rejections": rejections,
        "rejection_reasons": rejection_reasons,
        "failures": failures,
        "action_errors": action_errors,
        "pending_sessions": pending,
        "ticks": net.boundary_count,
    }

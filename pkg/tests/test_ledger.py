"""Ledger behaviour: append validation, queries vs brute-force oracles,
revocation semantics, token conservation, chain receipts, and dump round trips.
"""

import random

import pytest

from credsim import crypto
from credsim.crypto import TOY
from credsim.ledger import (
    CertificatePayload,
    CursorError,
    DoubleSpendError,
    DuplicatePresentationError,
    EntryKind,
    InsufficientBalanceError,
    InvalidAuthorError,
    InvalidSignatureError,
    Ledger,
    LedgerConfig,
    MalformedPayloadError,
    PolicyError,
    PresentedSignaturePayload,
    RevokeAllPayload,
    RevokeOnePayload,
    TokenIssuePayload,
    TokenTransferPayload,
    UnknownReferenceError,
    sign_bytes,
)
from conftest import LedgerRig


def test_first_certificate_gets_seq_after_registry(rig):
    rig.register("cp1", "CP")
    receipt = rig.certify("cp1", b"user-key-bytes")
    assert receipt.entry_seq == 1  # entry 0 is the registry record
    assert rig.ledger.verify_receipt(receipt)


def test_certificate_with_metadata_rejected(rig):
    cp = rig.register("cp1", "CP")
    sig = crypto.sign(cp.private_part, cp.public_part, b"subject")
    with pytest.raises(MalformedPayloadError):
        rig.author(
            cp,
            EntryKind.CERTIFICATE,
            None,
            fields=(b"subject", sig.value, b"issued-to: alice"),
        )


def test_certificate_payload_is_exactly_two_fields(rig):
    rig.register("cp1", "CP")
    rig.certify("cp1", b"k1")
    rig.certify("cp1", b"k2")
    for entry in rig.ledger.entries():
        if entry.kind is EntryKind.CERTIFICATE:
            assert len(entry.payload) == 2


def test_unknown_author_rejected(rig):
    stranger = crypto.generate_keypair(b"stranger", TOY)
    sig = crypto.sign(
        stranger.private_part,
        stranger.public_part,
        sign_bytes(EntryKind.CERTIFICATE, 0, (b"s", b"x")),
    )
    with pytest.raises(InvalidAuthorError):
        rig.ledger.append_raw(EntryKind.CERTIFICATE, (b"s", b"x"), stranger.key_id, sig.value, 0)


def test_wrong_role_rejected(rig):
    ap = rig.register("ap1", "AP")
    sig = crypto.sign(
        ap.private_part, ap.public_part, sign_bytes(EntryKind.CERTIFICATE, 0, (b"s", b"x"))
    )
    with pytest.raises(InvalidAuthorError):
        rig.ledger.append_raw(EntryKind.CERTIFICATE, (b"s", b"x"), ap.key_id, sig.value, 0)


def test_bad_author_signature_rejected(rig):
    cp = rig.register("cp1", "CP")
    with pytest.raises(InvalidSignatureError):
        rig.ledger.append_raw(EntryKind.CERTIFICATE, (b"s", b"x"), cp.key_id, b"\x01" * 8, 0)


# --- updates_since -------------------------------------------------------------


def test_updates_since_head_is_empty(rig):
    rig.register("cp1", "CP")
    assert rig.ledger.updates_since(rig.ledger.head_seq) == []


def test_updates_since_returns_tail_in_order(rig):
    rig.register("cp1", "CP")
    for i in range(3):
        rig.certify("cp1", b"k%d" % i)
    tail = rig.ledger.updates_since(0)
    assert [e.seq for e in tail] == [1, 2, 3]


def test_updates_since_consistent_across_readers(rig):
    rig.register("cp1", "CP")
    rig.certify("cp1", b"k")
    a = rig.ledger.updates_since(0)
    b = rig.ledger.updates_since(0)
    assert [e.canonical() for e in a] == [e.canonical() for e in b]


def test_updates_since_cursor_beyond_head(rig):
    with pytest.raises(CursorError):
        rig.ledger.updates_since(5)


# --- certs_by_signer -----------------------------------------------------------


def test_certs_by_signer_unknown_is_empty(rig):
    assert rig.ledger.certs_by_signer(b"\x00" * 32) == []


def test_certs_by_signer_partitions(rig):
    rig.register("cp1", "CP")
    rig.register("cp2", "CP")
    for i in range(5):
        rig.certify("cp1", b"a%d" % i)
    for i in range(3):
        rig.certify("cp2", b"b%d" % i)
    got = rig.ledger.certs_by_signer(rig.keys["cp1"].key_id)
    assert len(got) == 5
    # oracle: a full linear scan filtered by signer
    oracle = [
        e
        for e in rig.ledger.entries()
        if e.kind is EntryKind.CERTIFICATE and e.author_key_id == rig.keys["cp1"].key_id
    ]
    assert got == oracle


# --- revocation ----------------------------------------------------------------


def test_revocation_status_valid_before_any_revocation(rig):
    rig.register("cp1", "CP")
    receipt = rig.certify("cp1", b"k")
    assert rig.ledger.revocation_status(receipt.entry_seq) == "valid"


def test_revoke_all_flips_only_from_its_seq(rig):
    cp = rig.register("cp1", "CP")
    cert = rig.certify("cp1", b"k")
    for i in range(3):
        rig.certify("cp1", b"pad%d" % i)
    rev = rig.author(cp, EntryKind.REVOKE_ALL, RevokeAllPayload(cp.key_id))
    assert rig.ledger.revocation_status(cert.entry_seq, as_of=rev.entry_seq - 1) == "valid"
    assert rig.ledger.revocation_status(cert.entry_seq, as_of=rev.entry_seq) == "revoked-all"


def test_revoke_one_targets_single_certificate(rig):
    cp = rig.register("cp1", "CP")
    c1 = rig.certify("cp1", b"k1")
    c2 = rig.certify("cp1", b"k2")
    rig.author(cp, EntryKind.REVOKE_ONE, RevokeOnePayload(c1.entry_seq))
    assert rig.ledger.revocation_status(c1.entry_seq) == "revoked-one"
    assert rig.ledger.revocation_status(c2.entry_seq) == "valid"


def test_revoke_one_rejected_when_disabled():
    rig = LedgerRig(allow_revoke_one=False)
    cp = rig.register("cp1", "CP")
    cert = rig.certify("cp1", b"k")
    with pytest.raises(PolicyError):
        rig.author(cp, EntryKind.REVOKE_ONE, RevokeOnePayload(cert.entry_seq))


def test_revoke_one_unknown_target(rig):
    cp = rig.register("cp1", "CP")
    with pytest.raises(UnknownReferenceError):
        rig.author(cp, EntryKind.REVOKE_ONE, RevokeOnePayload(99))


def test_revoke_requires_owner(rig):
    rig.register("cp1", "CP")
    cp2 = rig.register("cp2", "CP")
    cert = rig.certify("cp1", b"k")
    with pytest.raises(InvalidAuthorError):
        rig.author(cp2, EntryKind.REVOKE_ONE, RevokeOnePayload(cert.entry_seq))
    with pytest.raises(InvalidAuthorError):
        rig.author(cp2, EntryKind.REVOKE_ALL, RevokeAllPayload(rig.keys["cp1"].key_id))


def test_revocation_status_matches_replay_oracle(rig):
    rng = random.Random(4)
    cp = rig.register("cp1", "CP")
    cert_seqs = []
    for step in range(30):
        if cert_seqs and rng.random() < 0.2:
            target = rng.choice(cert_seqs)
            try:
                rig.author(cp, EntryKind.REVOKE_ONE, RevokeOnePayload(target))
            except Exception:
                pass
        else:
            cert_seqs.append(rig.certify("cp1", b"k%d" % step).entry_seq)
    if rng.random() < 2:  # always revoke-all at the end
        rig.author(cp, EntryKind.REVOKE_ALL, RevokeAllPayload(cp.key_id))
    head = rig.ledger.head_seq
    for seq in cert_seqs:
        for as_of in range(seq, head + 1):
            # oracle: brute-force replay of the prefix
            revoked_one = any(
                e.kind is EntryKind.REVOKE_ONE
                and RevokeOnePayload.from_fields(e.payload).target_seq == seq
                for e in rig.ledger.entries()[: as_of + 1]
            )
            revoked_all = any(
                e.kind is EntryKind.REVOKE_ALL
                and RevokeAllPayload.from_fields(e.payload).target_key_id == cp.key_id
                for e in rig.ledger.entries()[: as_of + 1]
            )
            expected = (
                "revoked-one" if revoked_one else "revoked-all" if revoked_all else "valid"
            )
            assert rig.ledger.revocation_status(seq, as_of=as_of) == expected


def test_revocation_is_monotone(rig):
    cp = rig.register("cp1", "CP")
    cert = rig.certify("cp1", b"k")
    rig.author(cp, EntryKind.REVOKE_ALL, RevokeAllPayload(cp.key_id))
    seen_revoked = False
    for as_of in range(cert.entry_seq, rig.ledger.head_seq + 1):
        status = rig.ledger.revocation_status(cert.entry_seq, as_of=as_of)
        if seen_revoked:
            assert status != "valid"
        seen_revoked = seen_revoked or status != "valid"


# --- key registry ---------------------------------------------------------------


def test_duplicate_key_registration_rejected(rig):
    kp = rig.register("cp1", "CP")
    from credsim.ledger import KeyRegistryRecord

    record = KeyRegistryRecord(
        owner_role="CP",
        owner="cp1",
        key_id=kp.key_id,
        key_value=kp.public_part.canonical(),
        category="",
    )
    with pytest.raises(MalformedPayloadError):
        rig.author(rig.authority, EntryKind.KEY_REGISTRY, record)


def test_single_active_timely_key_per_owner(rig):
    rig.register("ap1", "AP")
    rig.register("ap1-t0", "AP", owner="ap1", timely=True, expiry_tick=10, timestamp=0)
    with pytest.raises(PolicyError):
        rig.register("ap1-t1", "AP", owner="ap1", timely=True, expiry_tick=20, timestamp=5)
    # once the first key expires, rotation is allowed
    rig.register("ap1-t2", "AP", owner="ap1", timely=True, expiry_tick=20, timestamp=10)


def test_timely_key_cannot_be_revoked(rig):
    cp = rig.register("cp1", "CP")
    rig.register("cp1-t", "CP", owner="cp1", timely=True, expiry_tick=10)
    with pytest.raises(PolicyError):
        rig.author(cp, EntryKind.REVOKE_ALL, RevokeAllPayload(rig.keys["cp1-t"].key_id))


def test_registry_self_authoring_requires_same_owner(rig):
    ap = rig.register("ap1", "AP")
    rig.register("ap1-t0", "AP", owner="ap1", timely=True, expiry_tick=10, authored_by=ap)
    with pytest.raises(InvalidAuthorError):
        rig.register("ap2-key", "AP", owner="ap2", authored_by=ap)


def test_revoked_author_cannot_write(rig):
    cp = rig.register("cp1", "CP")
    rig.author(cp, EntryKind.REVOKE_ALL, RevokeAllPayload(cp.key_id))
    with pytest.raises(InvalidAuthorError):
        rig.certify("cp1", b"late")


# --- tokens ---------------------------------------------------------------------


def _issue(rig, cp, amount):
    return rig.author(cp, EntryKind.TOKEN_ISSUE, TokenIssuePayload(cp.key_id, amount))


def _transfer(rig, ap, from_kp, to_account, token_key=b"tok-key", amount=1):
    return rig.author(
        ap,
        EntryKind.TOKEN_TRANSFER,
        TokenTransferPayload(
            from_account=from_kp.key_id,
            to_account=to_account,
            amount=amount,
            token_key_value=token_key,
            cp_sig=b"cp-sig",
            endorsement=b"endorse",
        ),
    )


def test_transfer_from_empty_account_rejected(rig):
    cp = rig.register("cp1", "CP")
    ap = rig.register("ap1", "AP")
    with pytest.raises(InsufficientBalanceError):
        _transfer(rig, ap, cp, b"svc-account")


def test_token_double_spend_rejected(rig):
    cp = rig.register("cp1", "CP")
    ap = rig.register("ap1", "AP")
    _issue(rig, cp, 5)
    _transfer(rig, ap, cp, b"svc", token_key=b"tk1")
    with pytest.raises(DoubleSpendError):
        _transfer(rig, ap, cp, b"svc", token_key=b"tk1")


def test_token_conservation_at_every_seq(rig):
    rng = random.Random(11)
    cp = rig.register("cp1", "CP")
    ap = rig.register("ap1", "AP")
    _issue(rig, cp, 10)
    for i in range(10):
        _transfer(rig, ap, cp, b"svc-%d" % (i % 3), token_key=b"tk%d" % i)
    # oracle: replay every prefix and re-derive balances
    for as_of in range(rig.ledger.head_seq + 1):
        replayed = rig.ledger.replay_prefix(as_of)
        assert sum(replayed.balances().values()) == replayed.issued_total


# --- presented signatures ---------------------------------------------------------


def test_presented_signature_duplicate_disallowed(rig):
    ap = rig.register("ap1", "AP")
    payload = PresentedSignaturePayload(cert_signer_key_id=b"cpkey", signature=b"sig-bytes")
    rig.author(ap, EntryKind.PRESENTED_SIGNATURE, payload)
    with pytest.raises(DuplicatePresentationError):
        rig.author(ap, EntryKind.PRESENTED_SIGNATURE, payload)


def test_presented_signature_distinct_accepted(rig):
    ap = rig.register("ap1", "AP")
    rig.author(ap, EntryKind.PRESENTED_SIGNATURE, PresentedSignaturePayload(b"cpkey", b"sig-a"))
    rig.author(ap, EntryKind.PRESENTED_SIGNATURE, PresentedSignaturePayload(b"cpkey", b"sig-b"))


def test_presented_signature_bind_policy_records_duplicates():
    rig = LedgerRig(reuse_policy="bind")
    ap = rig.register("ap1", "AP")
    payload = PresentedSignaturePayload(b"cpkey", b"sig-a")
    rig.author(ap, EntryKind.PRESENTED_SIGNATURE, payload)
    rig.author(ap, EntryKind.PRESENTED_SIGNATURE, payload)
    dups = [
        e for e in rig.ledger.entries() if e.kind is EntryKind.PRESENTED_SIGNATURE
    ]
    assert len(dups) == 2  # bound to each other ex post


# --- chain, receipts, persistence --------------------------------------------------


def test_hash_chain_recomputable_and_receipts_verify(rig):
    rig.register("cp1", "CP")
    receipts = [rig.certify("cp1", b"k%d" % i) for i in range(4)]
    assert rig.ledger.recompute_chain() == [
        rig.ledger.head_hash(seq) for seq in range(rig.ledger.head_seq + 1)
    ]
    assert all(rig.ledger.verify_receipt(r) for r in receipts)
    assert not rig.ledger.verify_receipt(
        type(receipts[0])(entry_seq=receipts[0].entry_seq, ledger_head_hash=b"\x00" * 32)
    )


def test_dump_load_round_trip(rig):
    cp = rig.register("cp1", "CP")
    rig.register("ap1", "AP")
    rig.certify("cp1", b"k1")
    rig.certify("cp1", b"k2")
    _issue(rig, cp, 3)
    text = rig.ledger.dump()
    loaded = Ledger.load(text)
    assert loaded.dump() == text
    assert loaded.head_hash() == rig.ledger.head_hash()
    assert loaded.balances() == rig.ledger.balances()

"""Unit and enumeration tests for the signature core.

The TOY parameter set keeps the unit group of the modulus small enough to
enumerate, so blinding and unblinding are checked against brute force rather
than against the code paths under test.
"""

import math
import random

import pytest

from credsim import crypto
from credsim.crypto import TOY


def toy_key(seed=b"k1"):
    return crypto.generate_keypair(seed, TOY)


def units(n):
    return [r for r in range(1, n) if math.gcd(r, n) == 1]


# --- keygen -----------------------------------------------------------------


def test_keygen_deterministic():
    assert crypto.generate_keypair(b"a", TOY) == crypto.generate_keypair(b"a", TOY)


def test_keygen_distinct_seeds():
    k1 = crypto.generate_keypair(b"a", TOY)
    k2 = crypto.generate_keypair(b"b", TOY)
    assert k1.key_id != k2.key_id


def _trial_division_prime(x):
    if x < 2:
        return False
    f = 2
    while f * f <= x:
        if x % f == 0:
            return False
        f += 1
    return True


def _oracle_keygen(seed):
    """Independent reimplementation of the keygen routine at TOY scale,
    using trial division instead of the library primality test."""
    rng = random.Random(int.from_bytes(crypto.sha256(b"keygen:" + seed), "big"))

    def find_prime():
        while True:
            c = rng.getrandbits(8) | (3 << 6) | 1
            if _trial_division_prime(c):
                return c

    while True:
        p = find_prime()
        q = find_prime()
        if p == q:
            continue
        n = p * q
        if n > TOY.modulus_cap:
            continue
        lam = math.lcm(p - 1, q - 1)
        if math.gcd(TOY.public_exponent, lam) != 1:
            continue
        return n, pow(TOY.public_exponent, -1, lam)


@pytest.mark.parametrize("seed", [b"a", b"b", b"oracle-1", b"oracle-2"])
def test_keygen_matches_independent_oracle(seed):
    kp = crypto.generate_keypair(seed, TOY)
    n, d = _oracle_keygen(seed)
    assert kp.n == n
    assert kp.private_part.d == d


# --- plain signatures ---------------------------------------------------------


def test_sign_verify_round_trip():
    kp = toy_key()
    s = crypto.sign(kp.private_part, kp.public_part, b"hello")
    assert crypto.verify(kp.public_part, b"hello", s)


def test_wrong_key_rejects():
    k1, k2 = toy_key(b"k1"), toy_key(b"k2")
    s = crypto.sign(k1.private_part, k1.public_part, b"hello")
    assert not crypto.verify(k2.public_part, b"hello", s)


def test_wrong_message_rejects():
    kp = toy_key()
    s = crypto.sign(kp.private_part, kp.public_part, b"hello")
    assert not crypto.verify(kp.public_part, b"hellp", s)


def test_sign_is_deterministic():
    kp = toy_key()
    assert crypto.sign(kp.private_part, kp.public_part, b"m") == crypto.sign(
        kp.private_part, kp.public_part, b"m"
    )


def test_empty_message_rejected():
    kp = toy_key()
    with pytest.raises(crypto.CryptoError):
        crypto.sign(kp.private_part, kp.public_part, b"")


# --- blinding ------------------------------------------------------------------


def test_blind_sign_unblind_verify():
    kp = toy_key()
    rng = random.Random(7)
    f = crypto.sample_blinding_factor(rng, kp.public_part)
    bm = crypto.blind(b"msg", f, kp.public_part)
    sig = crypto.unblind(crypto.sign_blinded(kp.private_part, kp.public_part, bm), f, kp.public_part)
    assert crypto.verify(kp.public_part, b"msg", sig)


def test_blind_injective_in_factor():
    kp = toy_key()
    rng = random.Random(8)
    f1 = crypto.sample_blinding_factor(rng, kp.public_part)
    while True:
        f2 = crypto.sample_blinding_factor(rng, kp.public_part)
        if f2.value != f1.value:
            break
    assert crypto.blind(b"m", f1, kp.public_part) != crypto.blind(b"m", f2, kp.public_part)


def test_wrong_factor_fails_verification():
    kp = toy_key()
    rng = random.Random(9)
    f = crypto.sample_blinding_factor(rng, kp.public_part)
    while True:
        wrong = crypto.sample_blinding_factor(rng, kp.public_part)
        if wrong.value != f.value:
            break
    bm = crypto.blind(b"msg", f, kp.public_part)
    bs = crypto.sign_blinded(kp.private_part, kp.public_part, bm)
    assert not crypto.verify(kp.public_part, b"msg", crypto.unblind(bs, wrong, kp.public_part))


def test_sign_blinded_key_mismatch():
    k1, k2 = toy_key(b"k1"), toy_key(b"k2")
    rng = random.Random(10)
    f = crypto.sample_blinding_factor(rng, k1.public_part)
    bm = crypto.blind(b"m", f, k1.public_part)
    with pytest.raises(crypto.KeyMismatchError):
        crypto.sign_blinded(k2.private_part, k2.public_part, bm)


@pytest.mark.parametrize("bad", [0, 1])
def test_degenerate_factor_rejected(bad):
    kp = toy_key()
    with pytest.raises(crypto.DegenerateFactorError):
        crypto.BlindingFactor(value=bad, signer_key_id=kp.key_id, modulus=kp.n)


def test_non_unit_factor_rejected():
    kp = toy_key()
    p = min(f for f in range(2, kp.n) if kp.n % f == 0)
    with pytest.raises(crypto.DegenerateFactorError):
        crypto.BlindingFactor(value=p, signer_key_id=kp.key_id, modulus=kp.n)


def test_two_users_unblind_only_their_own():
    signer = toy_key(b"signer")
    rng_a, rng_b = random.Random(21), random.Random(22)
    fa = crypto.sample_blinding_factor(rng_a, signer.public_part)
    fb = crypto.sample_blinding_factor(rng_b, signer.public_part)
    assert fa.value != fb.value
    ba = crypto.blind(b"user-a-key", fa, signer.public_part)
    bb = crypto.blind(b"user-b-key", fb, signer.public_part)
    sa = crypto.sign_blinded(signer.private_part, signer.public_part, ba)
    sb = crypto.sign_blinded(signer.private_part, signer.public_part, bb)
    assert crypto.verify(signer.public_part, b"user-a-key", crypto.unblind(sa, fa, signer.public_part))
    assert crypto.verify(signer.public_part, b"user-b-key", crypto.unblind(sb, fb, signer.public_part))
    # crossing the factors recovers nothing
    assert not crypto.verify(signer.public_part, b"user-a-key", crypto.unblind(sa, fb, signer.public_part))
    assert not crypto.verify(signer.public_part, b"user-b-key", crypto.unblind(sb, fa, signer.public_part))


# --- exhaustive enumeration at TOY scale ----------------------------------------


def test_blinding_domain_exhaustive_consistency():
    """Over the full unit group, every blinded value is reachable from every
    message by exactly one factor, so a blinded value carries no information
    about the message."""
    kp = toy_key(b"enum")
    pub = kp.public_part
    messages = [b"m0", b"m1", b"m2"]
    group = units(kp.n)
    group_set = set(group)
    for m in messages:
        h = crypto.fdh(m, kp.n)
        images = set()
        for r in group:
            b = crypto.blind_value(h, r, pub)
            assert b in group_set
            images.add(b)
        assert images == group_set  # bijection: each b hit exactly once


def test_unblind_is_exact_inverse_by_enumeration():
    kp = toy_key(b"enum2")
    pub = kp.public_part
    h = crypto.fdh(b"target", kp.n)
    s_plain = pow(h, kp.private_part.d, kp.n)
    for r in units(kp.n):
        b = crypto.blind_value(h, r, pub)
        sb = pow(b, kp.private_part.d, kp.n)
        assert (sb * pow(r, -1, kp.n)) % kp.n == s_plain


def test_correctness_identity_randomized():
    kp = toy_key(b"prop")
    rng = random.Random(99)
    for _ in range(200):
        m = rng.getrandbits(64).to_bytes(8, "big")
        f = crypto.sample_blinding_factor(rng, kp.public_part)
        bm = crypto.blind(m, f, kp.public_part)
        sig = crypto.unblind(
            crypto.sign_blinded(kp.private_part, kp.public_part, bm), f, kp.public_part
        )
        assert crypto.verify(kp.public_part, m, sig)


# --- ownership proofs --------------------------------------------------------


def test_ownership_accepts_fresh_challenge():
    kp = toy_key()
    reg = crypto.ChallengeRegistry(random.Random(5))
    ch = reg.issue(now=0)
    proof = crypto.prove_ownership(kp, ch)
    ok, reason = reg.verify(kp.public_part, proof, now=1)
    assert ok, reason


def test_ownership_replay_rejected():
    kp = toy_key()
    reg = crypto.ChallengeRegistry(random.Random(5))
    ch = reg.issue(now=0)
    proof = crypto.prove_ownership(kp, ch)
    assert reg.verify(kp.public_part, proof, now=0)[0]
    ok, reason = reg.verify(kp.public_part, proof, now=0)
    assert not ok and reason == "replayed-challenge"


def test_ownership_wrong_challenge_rejected():
    kp = toy_key()
    reg = crypto.ChallengeRegistry(random.Random(5))
    c1 = reg.issue(now=0)
    c2 = reg.issue(now=0)
    # a proof signed over c1 never verifies when presented against c2
    proof_c1 = crypto.prove_ownership(kp, c1)
    crossed = crypto.OwnershipProof(key_id=kp.key_id, challenge=c2, response=proof_c1.response)
    ok, reason = reg.verify(kp.public_part, crossed, now=0)
    assert not ok and reason == "bad-signature"
    # and a proof over a challenge the verifier never issued is unknown
    proof = crypto.prove_ownership(kp, b"\x00" * 32)
    ok, reason = reg.verify(kp.public_part, proof, now=0)
    assert not ok and reason == "unknown-challenge"


def test_ownership_stale_challenge_rejected():
    kp = toy_key()
    reg = crypto.ChallengeRegistry(random.Random(5), window=16)
    ch = reg.issue(now=0)
    proof = crypto.prove_ownership(kp, ch)
    ok, reason = reg.verify(kp.public_part, proof, now=17)
    assert not ok and reason == "stale-challenge"


def test_ownership_wrong_key_rejected():
    k1, k2 = toy_key(b"k1"), toy_key(b"k2")
    reg = crypto.ChallengeRegistry(random.Random(5))
    ch = reg.issue(now=0)
    proof = crypto.prove_ownership(k1, ch)
    ok, reason = reg.verify(k2.public_part, proof, now=0)
    assert not ok and reason == "wrong-key"


# --- sealed payloads ----------------------------------------------------------


def test_seal_round_trip_and_opacity():
    kp = toy_key(b"cp")
    rng = random.Random(3)
    ct = crypto.seal(kp.public_part, b"name=alice", rng)
    assert crypto.open_sealed(kp.private_part, kp.public_part, ct) == b"name=alice"
    assert b"alice" not in ct

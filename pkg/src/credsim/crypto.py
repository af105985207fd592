"""Desk-scale deterministic cryptography: key pairs, plain and blind signatures,
and challenge-response key-ownership proofs.

The signature scheme is RSA with full-domain hashing and multiplicative
blinding, chosen because unblinding is exact and the blinding domain is small
enough to enumerate exhaustively at the TOY parameter set:

    h  = FDH(message) mod n
    blind:        b  = h * r^e  mod n      (r secret, a unit mod n)
    blind-sign:   sb = b^d      mod n
    unblind:      s  = sb * r^(-1) mod n   (= h^d, an ordinary signature)
    verify:       s^e mod n == h

All randomness is drawn from caller-supplied seeded generators; there are no
hidden entropy sources, so every operation is reproducible from seeds.

This module is a simulation-grade implementation: no padding standards, no
side-channel hardening, keys far below production sizes at TOY scale.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import gmpy2

from . import encoding
from .encoding import TAG_CHALLENGE, sha256


class CryptoError(Exception):
    pass


class KeyMismatchError(CryptoError):
    """Operation used a key other than the one the value was produced for."""


class DegenerateFactorError(CryptoError):
    """Blinding factor is 0, 1, or shares a factor with the modulus."""


@dataclass(frozen=True)
class ParameterSet:
    """Key-size regime. TOY admits exhaustive enumeration of the blinding
    domain and is permitted in tests only; DESK is the runtime default."""

    name: str
    prime_bits: int
    modulus_cap: int | None  # TOY keeps n enumerable; None = uncapped
    public_exponent: int


TOY = ParameterSet(name="TOY", prime_bits=8, modulus_cap=1 << 16, public_exponent=7)
DESK = ParameterSet(name="DESK", prime_bits=1024, modulus_cap=None, public_exponent=65537)
# TOY moduli are drawn from so few primes that key fingerprints collide once a
# scenario involves more than a handful of keys; SIM keeps scenario tests fast
# while leaving fingerprints and hash atoms collision-free.
SIM = ParameterSet(name="SIM", prime_bits=48, modulus_cap=None, public_exponent=65537)

PARAMETER_SETS = {"TOY": TOY, "DESK": DESK, "SIM": SIM}


@dataclass(frozen=True)
class PublicKey:
    n: int
    e: int

    def canonical(self) -> bytes:
        n_bytes = self.n.to_bytes((self.n.bit_length() + 7) // 8, "big")
        e_bytes = self.e.to_bytes((self.e.bit_length() + 7) // 8, "big")
        return encoding.encode_fields(b"rsapub:", [n_bytes, e_bytes])

    @property
    def byte_length(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def to_int_bytes(self, value: int) -> bytes:
        return value.to_bytes(self.byte_length, "big")


def public_key_from_canonical(data: bytes) -> PublicKey:
    tag, fields = encoding.decode_fields(data)
    if tag != b"rsapub:" or len(fields) != 2:
        raise CryptoError("not a canonical public key")
    return PublicKey(n=int.from_bytes(fields[0], "big"), e=int.from_bytes(fields[1], "big"))


@dataclass(frozen=True)
class PrivateKey:
    n: int
    d: int


@dataclass(frozen=True)
class KeyPair:
    public_part: PublicKey
    private_part: PrivateKey
    key_id: bytes  # sha256 fingerprint of the canonical public key

    @property
    def n(self) -> int:
        return self.public_part.n


@dataclass(frozen=True)
class Signature:
    signer_key_id: bytes
    value: bytes


@dataclass(frozen=True)
class BlindedMessage:
    value: bytes
    signer_key_id: bytes


@dataclass(frozen=True)
class BlindingFactor:
    """A unit mod n. 0, 1, and non-units are rejected: non-units cannot be
    inverted during unblinding and r=1 leaves the message recognisable."""

    value: int
    signer_key_id: bytes
    modulus: int = field(repr=False)

    def __post_init__(self):
        if self.value in (0, 1):
            raise DegenerateFactorError(f"degenerate blinding factor {self.value}")
        if not 0 < self.value < self.modulus:
            raise DegenerateFactorError("blinding factor outside modulus range")
        if math.gcd(self.value, self.modulus) != 1:
            raise DegenerateFactorError("blinding factor not a unit mod n")


@dataclass(frozen=True)
class OwnershipProof:
    key_id: bytes
    challenge: bytes
    response: Signature


def key_id_of(public: PublicKey) -> bytes:
    return sha256(public.canonical())


def _find_prime(rng: random.Random, bits: int) -> int:
    # top two bits set so the product of two primes has full 2*bits width
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if gmpy2.is_prime(candidate):
            return candidate


def generate_keypair(rng_seed: bytes, params: ParameterSet = DESK) -> KeyPair:
    """Deterministic RSA keygen: identical seeds yield identical pairs.

    Draws odd candidates of params.prime_bits from a generator seeded with
    sha256(seed), takes the first two distinct primes p, q such that e is
    invertible mod lcm(p-1, q-1) (and, at TOY, n stays under the cap), and
    derives d = e^(-1) mod lcm(p-1, q-1).
    """
    rng = random.Random(int.from_bytes(sha256(b"keygen:" + rng_seed), "big"))
    e = params.public_exponent
    while True:
        p = _find_prime(rng, params.prime_bits)
        q = _find_prime(rng, params.prime_bits)
        if p == q:
            continue
        n = p * q
        if params.modulus_cap is not None and n > params.modulus_cap:
            continue
        lam = math.lcm(p - 1, q - 1)
        if math.gcd(e, lam) != 1:
            continue
        d = pow(e, -1, lam)
        public = PublicKey(n=n, e=e)
        return KeyPair(public_part=public, private_part=PrivateKey(n=n, d=d), key_id=key_id_of(public))


def fdh(message: bytes, n: int) -> int:
    """Full-domain hash into the units of Z_n, minus {0, 1}.

    Iterated SHA-256 with a counter; the counter advances until the candidate
    is invertible, so the digest is always usable as a signing base.
    """
    byte_length = (n.bit_length() + 7) // 8
    counter = 0
    while True:
        stream = b""
        block = 0
        while len(stream) < byte_length:
            stream += sha256(message + counter.to_bytes(4, "big") + block.to_bytes(4, "big"))
            block += 1
        candidate = int.from_bytes(stream[:byte_length], "big") % n
        if candidate >= 2 and math.gcd(candidate, n) == 1:
            return candidate
        counter += 1


def sign(private: PrivateKey, public: PublicKey, message: bytes) -> Signature:
    if not message:
        raise CryptoError("refusing to sign an empty message")
    s = pow(fdh(message, private.n), private.d, private.n)
    return Signature(signer_key_id=key_id_of(public), value=public.to_int_bytes(s))


def verify(public: PublicKey, message: bytes, signature: Signature) -> bool:
    s = int.from_bytes(signature.value, "big")
    if not 0 < s < public.n:
        return False
    return pow(s, public.e, public.n) == fdh(message, public.n)


def sample_blinding_factor(rng: random.Random, signer_public: PublicKey) -> BlindingFactor:
    """Uniform over the valid blinding domain (units mod n, excluding 1)."""
    n = signer_public.n
    while True:
        r = rng.randrange(2, n)
        if math.gcd(r, n) == 1:
            return BlindingFactor(value=r, signer_key_id=key_id_of(signer_public), modulus=n)


def blind_value(h: int, r: int, signer_public: PublicKey) -> int:
    """Raw blinding map over the full unit group, used by enumeration tests."""
    return (h * pow(r, signer_public.e, signer_public.n)) % signer_public.n


def blind(message: bytes, factor: BlindingFactor, signer_public: PublicKey) -> BlindedMessage:
    if factor.signer_key_id != key_id_of(signer_public):
        raise KeyMismatchError("blinding factor was sampled for a different signer key")
    b = blind_value(fdh(message, signer_public.n), factor.value, signer_public)
    return BlindedMessage(value=signer_public.to_int_bytes(b), signer_key_id=factor.signer_key_id)


def sign_blinded(private: PrivateKey, public: PublicKey, blinded: BlindedMessage) -> Signature:
    """Sign a blinded value as-is; no metadata is attached to the result."""
    if blinded.signer_key_id != key_id_of(public):
        raise KeyMismatchError("blinded message targets a different signer key")
    b = int.from_bytes(blinded.value, "big")
    if not 0 < b < private.n:
        raise CryptoError("blinded value outside modulus range")
    sb = pow(b, private.d, private.n)
    return Signature(signer_key_id=blinded.signer_key_id, value=public.to_int_bytes(sb))


def unblind(blind_sig: Signature, factor: BlindingFactor, signer_public: PublicKey) -> Signature:
    """Strip the blinding mask; a wrong factor yields a signature that simply
    fails verification, which the caller detects."""
    sb = int.from_bytes(blind_sig.value, "big")
    s = (sb * pow(factor.value, -1, signer_public.n)) % signer_public.n
    return Signature(signer_key_id=blind_sig.signer_key_id, value=signer_public.to_int_bytes(s))


def issue_challenge(rng: random.Random) -> bytes:
    return rng.getrandbits(256).to_bytes(32, "big")


def prove_ownership(keypair: KeyPair, challenge: bytes) -> OwnershipProof:
    response = sign(keypair.private_part, keypair.public_part, TAG_CHALLENGE + challenge)
    return OwnershipProof(key_id=keypair.key_id, challenge=challenge, response=response)


DEFAULT_CHALLENGE_WINDOW = 16


class ChallengeRegistry:
    """Verifier-side challenge issuance with a replay cache and a freshness
    window measured in logical ticks. Confined to a single actor."""

    def __init__(self, rng: random.Random, window: int = DEFAULT_CHALLENGE_WINDOW):
        self._rng = rng
        self._window = window
        self._issued: dict[bytes, int] = {}
        self._used: set[bytes] = set()

    def issue(self, now: int) -> bytes:
        challenge = issue_challenge(self._rng)
        self._issued[challenge] = now
        return challenge

    def verify(self, public: PublicKey, proof: OwnershipProof, now: int) -> tuple[bool, str]:
        issued_at = self._issued.get(proof.challenge)
        if issued_at is None:
            return False, "unknown-challenge"
        if proof.challenge in self._used:
            return False, "replayed-challenge"
        if now - issued_at > self._window:
            return False, "stale-challenge"
        if proof.key_id != key_id_of(public):
            return False, "wrong-key"
        if not verify(public, TAG_CHALLENGE + proof.challenge, proof.response):
            return False, "bad-signature"
        self._used.add(proof.challenge)
        return True, "ok"


def seal(recipient: PublicKey, plaintext: bytes, rng: random.Random) -> bytes:
    """Encrypt bytes to a key holder: an RSA-wrapped seed keys a SHA-256
    stream cipher. Opaque to everyone without the private key."""
    n = recipient.n
    while True:
        k = rng.randrange(2, n)
        if math.gcd(k, n) == 1:
            break
    wrapped = recipient.to_int_bytes(pow(k, recipient.e, n))
    ct = _xor_stream(recipient.to_int_bytes(k), plaintext)
    return encoding.encode_fields(b"sealed:", [wrapped, ct])


def open_sealed(private: PrivateKey, public: PublicKey, sealed: bytes) -> bytes:
    tag, fields = encoding.decode_fields(sealed)
    if tag != b"sealed:" or len(fields) != 2:
        raise CryptoError("not a sealed payload")
    wrapped, ct = fields
    k = pow(int.from_bytes(wrapped, "big"), private.d, private.n)
    return _xor_stream(public.to_int_bytes(k), ct)


def _xor_stream(key: bytes, data: bytes) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < len(data):
        out.extend(sha256(b"stream:" + key + block.to_bytes(4, "big")))
        block += 1
    return bytes(a ^ b for a, b in zip(data, out))

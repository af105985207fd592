import pytest

from credsim import crypto
from credsim.crypto import TOY
from credsim.ledger import (
    EntryKind,
    KeyRegistryRecord,
    Ledger,
    LedgerConfig,
    sign_bytes,
)


class LedgerRig:
    """A ledger plus signing helpers so tests can author entries directly."""

    def __init__(self, allow_revoke_one=True, reuse_policy="disallow"):
        self.authority = crypto.generate_keypair(b"genesis-authority", TOY)
        self.ledger = Ledger(
            LedgerConfig(
                genesis_authority=self.authority.public_part,
                allow_revoke_one=allow_revoke_one,
                reuse_policy=reuse_policy,
            )
        )
        self.keys: dict[str, crypto.KeyPair] = {}

    def author(self, keypair, kind, payload, timestamp=0, fields=None):
        fields = payload.to_fields() if fields is None else fields
        sig = crypto.sign(
            keypair.private_part, keypair.public_part, sign_bytes(kind, timestamp, tuple(fields))
        )
        return self.ledger.append_raw(kind, tuple(fields), keypair.key_id, sig.value, timestamp)

    def register(self, name, role, owner=None, category="", interval=None, timely=False,
                 expiry_tick=None, authored_by=None, timestamp=0):
        kp = crypto.generate_keypair(name.encode(), TOY)
        self.keys[name] = kp
        record = KeyRegistryRecord(
            owner_role=role,
            owner=owner or name,
            key_id=kp.key_id,
            key_value=kp.public_part.canonical(),
            category=category,
            interval=interval,
            timely=timely,
            expiry_tick=expiry_tick,
        )
        self.author(authored_by or self.authority, EntryKind.KEY_REGISTRY, record, timestamp)
        return kp

    def certify(self, cp_name, subject_bytes, timestamp=0):
        kp = self.keys[cp_name]
        sig = crypto.sign(kp.private_part, kp.public_part, subject_bytes)
        from credsim.ledger import CertificatePayload

        payload = CertificatePayload(subject_key_value=subject_bytes, signature=sig.value)
        return self.author(kp, EntryKind.CERTIFICATE, payload, timestamp)


@pytest.fixture
def rig():
    return LedgerRig()

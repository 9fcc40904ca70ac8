"""Signed, hash-chained sealing of sensor batches and a one-way transfer channel.

Signatures are ECDSA over P-256 with SHA-256 and deterministic nonces. The
ledger is an append-only text file whose records each commit to their
predecessor. The diode is a pair of handles: the OT side can only send, the IT
side can only receive.
"""

from __future__ import annotations

import collections
import enum
import hashlib
import hmac
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec

logger = logging.getLogger(__name__)

GENESIS = bytes(32)
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
CONTAINER_MAGIC = b"ASB1"


class Status(enum.Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"


class KeyUnavailable(LookupError):
    pass


class LedgerConnectionError(ConnectionError):
    pass


class DiodeError(IOError):
    pass


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------


@dataclass
class KeyPair:
    device_id: str
    private_key: ec.EllipticCurvePrivateKey

    @property
    def public_key(self) -> ec.EllipticCurvePublicKey:
        return self.private_key.public_key()

    def public_bytes(self) -> bytes:
        return self.public_key.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def _scalar_from(material: bytes) -> int:
    return int.from_bytes(material, "big") % (CURVE_ORDER - 1) + 1


class HsmSim:
    """Key store holding one private key per registered device."""

    def __init__(self, master_seed: bytes | int = 0):
        self._seed = _seed_bytes(master_seed)
        self._keys: dict[str, ec.EllipticCurvePrivateKey] = {}

    def register(self, device_id: str) -> None:
        if device_id not in self._keys:
            digest = hashlib.sha256(b"hsm-provision|" + self._seed + device_id.encode()).digest()
            self._keys[device_id] = ec.derive_private_key(_scalar_from(digest), ec.SECP256R1())

    def get(self, device_id: str) -> KeyPair:
        if device_id not in self._keys:
            raise KeyUnavailable(f"no key stored for device {device_id!r}")
        return KeyPair(device_id, self._keys[device_id])


class PufSim:
    """Deterministic device fingerprint: a keyed hash of the device id."""

    def __init__(self, master_seed: bytes | int = 0, devices=()):
        self._seed = _seed_bytes(master_seed)
        self.devices = set(devices)

    def register(self, device_id: str) -> None:
        self.devices.add(device_id)

    def derive(self, device_id: str) -> KeyPair:
        if device_id not in self.devices:
            raise KeyUnavailable(f"device {device_id!r} is not enrolled")
        mac = hmac.new(self._seed, b"puf|" + device_id.encode(), hashlib.sha256).digest()
        return KeyPair(device_id, ec.derive_private_key(_scalar_from(mac), ec.SECP256R1()))


def _seed_bytes(seed: bytes | int) -> bytes:
    return seed if isinstance(seed, bytes) else int(seed).to_bytes(16, "big", signed=False)


def derive_key(source: str, device_id: str, master_seed: bytes | int = 0, registry=None) -> KeyPair:
    """Key for ``device_id`` from an HSM store or a PUF derivation.

    ``registry`` is an :class:`HsmSim` for ``hsm_sim`` or a :class:`PufSim`
    (or an iterable of enrolled ids) for ``puf_sim``.
    """
    if source == "hsm_sim":
        if not isinstance(registry, HsmSim):
            raise KeyUnavailable("no HSM store configured")
        return registry.get(device_id)
    if source == "puf_sim":
        puf = registry if isinstance(registry, PufSim) else PufSim(master_seed, registry or ())
        return puf.derive(device_id)
    raise ValueError(f"unknown key source {source!r}")


def sign(payload: bytes, key: KeyPair) -> bytes:
    alg = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
    return key.private_key.sign(payload, alg)


def verify(payload: bytes, signature: bytes, public_key: ec.EllipticCurvePublicKey | bytes) -> bool:
    if isinstance(public_key, bytes):
        public_key = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), public_key)
    try:
        public_key.verify(signature, payload, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError):
        return False


# ---------------------------------------------------------------------------
# Sealed batches
# ---------------------------------------------------------------------------


def batch_hash(payload: bytes, signature: bytes) -> bytes:
    return hashlib.sha256(payload + signature).digest()


@dataclass(frozen=True)
class SealedBatch:
    payload: bytes
    signature: bytes
    signer_id: str
    sequence: int

    @property
    def batch_hash(self) -> bytes:
        return batch_hash(self.payload, self.signature)

    def to_bytes(self) -> bytes:
        """``ASB1 | u32 len | payload | u16 len | DER sig | u16 len | signer | u64 seq``, big endian."""
        sid = self.signer_id.encode()
        return b"".join(
            [
                CONTAINER_MAGIC,
                struct.pack(">I", len(self.payload)),
                self.payload,
                struct.pack(">H", len(self.signature)),
                self.signature,
                struct.pack(">H", len(sid)),
                sid,
                struct.pack(">Q", self.sequence),
            ]
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> SealedBatch:
        if blob[:4] != CONTAINER_MAGIC:
            raise ValueError("not a sealed-batch container")
        pos = 4
        (n,) = struct.unpack_from(">I", blob, pos)
        pos += 4
        payload = blob[pos : pos + n]
        pos += n
        (n,) = struct.unpack_from(">H", blob, pos)
        pos += 2
        sig = blob[pos : pos + n]
        pos += n
        (n,) = struct.unpack_from(">H", blob, pos)
        pos += 2
        sid = blob[pos : pos + n].decode()
        pos += n
        (seq,) = struct.unpack_from(">Q", blob, pos)
        if pos + 8 != len(blob):
            raise ValueError("trailing bytes in sealed-batch container")
        return cls(payload, sig, sid, seq)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerRecord:
    sequence: int
    batch_hash: bytes
    prev_record_hash: bytes
    record_hash: bytes

    @staticmethod
    def compute_hash(sequence: int, batch_hash: bytes, prev: bytes) -> bytes:
        return hashlib.sha256(struct.pack(">Q", sequence) + batch_hash + prev).digest()

    def to_line(self) -> str:
        return f"{self.sequence:016x}|{self.batch_hash.hex()}|{self.prev_record_hash.hex()}|{self.record_hash.hex()}"

    @classmethod
    def from_line(cls, line: str) -> LedgerRecord:
        parts = line.strip().split("|")
        if len(parts) != 4 or len(parts[0]) != 16 or any(len(p) != 64 for p in parts[1:]):
            raise ValueError(f"malformed ledger line: {line!r}")
        return cls(int(parts[0], 16), bytes.fromhex(parts[1]), bytes.fromhex(parts[2]), bytes.fromhex(parts[3]))


class Receipt(enum.Enum):
    VALID = "VALID"
    INVALID = "INVALID"


class HashChainLedger:
    """Append-only hash chain, optionally mirrored to a text file (one record per line)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[LedgerRecord] = []
        if self.path is not None and self.path.exists():
            self._records = read_ledger(self.path)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[LedgerRecord, ...]:
        return tuple(self._records)

    @property
    def head(self) -> bytes:
        return self._records[-1].record_hash if self._records else GENESIS

    def submit(self, h_batch: bytes) -> Receipt:
        if len(h_batch) != 32:
            return Receipt.INVALID
        seq = len(self._records)
        rec = LedgerRecord(seq, h_batch, self.head, LedgerRecord.compute_hash(seq, h_batch, self.head))
        self._records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(rec.to_line() + "\n")
        return Receipt.VALID


class UnreachableLedger:
    """Ledger endpoint that always fails to connect."""

    def submit(self, h_batch: bytes) -> Receipt:
        raise LedgerConnectionError("ledger endpoint unreachable")


class RejectingLedger:
    """Ledger endpoint that accepts connections but returns invalid receipts."""

    def submit(self, h_batch: bytes) -> Receipt:
        return Receipt.INVALID


def read_ledger(path: str | Path) -> list[LedgerRecord]:
    with open(path) as fh:
        return [LedgerRecord.from_line(line) for line in fh if line.strip()]


def write_ledger(path: str | Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")


# ---------------------------------------------------------------------------
# Diode
# ---------------------------------------------------------------------------


class _Pipe:
    def __init__(self):
        self.queue: collections.deque[bytes] = collections.deque()
        self.broken = False


class OtSender:
    """OT-side handle. It can only push bytes toward IT."""

    __slots__ = ("_pipe",)

    def __init__(self, pipe: _Pipe):
        self._pipe = pipe

    def send(self, data: bytes) -> Status:
        if self._pipe.broken:
            return Status.FAILURE
        self._pipe.queue.append(bytes(data))
        return Status.SUCCESS


class ItReceiver:
    """IT-side handle. It can only pull bytes that came from OT."""

    __slots__ = ("_pipe",)

    def __init__(self, pipe: _Pipe):
        self._pipe = pipe

    def receive(self) -> bytes | None:
        return self._pipe.queue.popleft() if self._pipe.queue else None

    def pending(self) -> int:
        return len(self._pipe.queue)


@dataclass
class DiodeChannel:
    sender: OtSender
    receiver: ItReceiver

    @classmethod
    def create(cls) -> DiodeChannel:
        pipe = _Pipe()
        return cls(OtSender(pipe), ItReceiver(pipe))

    def break_link(self) -> None:
        """Simulate a hardware fault: every later send fails."""
        self.sender._pipe.broken = True


# ---------------------------------------------------------------------------
# Sealing
# ---------------------------------------------------------------------------


@dataclass
class SealResult:
    status: Status
    batch: SealedBatch | None
    ledger_ok: bool
    notes: list[str] = field(default_factory=list)


def seal_batch(
    payload: bytes,
    key_source: Callable[[], KeyPair] | KeyPair | None,
    ledger,
    sender: OtSender,
    sequence: int,
) -> SealResult:
    """Sign, anchor and publish one batch.

    A missing key fails before signing. A ledger outage or rejected receipt is
    logged as a warning and the batch is still published. A diode fault fails
    the call.
    """
    try:
        key = key_source() if callable(key_source) else key_source
        if key is None:
            raise KeyUnavailable("no key source")
    except KeyUnavailable as exc:
        logger.critical("CRITICAL: signing key unavailable (%s)", exc)
        return SealResult(Status.FAILURE, None, False, ["key_unavailable"])
    sig = sign(payload, key)
    batch = SealedBatch(bytes(payload), sig, key.device_id, sequence)
    notes = []
    ledger_ok = False
    try:
        receipt = ledger.submit(batch.batch_hash)
        if receipt is Receipt.INVALID:
            logger.warning("WARNING: ledger rejected batch %d, audit trail has a gap", sequence)
            notes.append("ledger_invalid_receipt")
        else:
            ledger_ok = True
    except LedgerConnectionError as exc:
        logger.warning("WARNING: ledger connection failed for batch %d (%s), audit trail suspended", sequence, exc)
        notes.append("ledger_connection_error")
    if sender.send(batch.to_bytes()) is not Status.SUCCESS:
        logger.critical("CRITICAL: diode publish failed for batch %d", sequence)
        return SealResult(Status.FAILURE, batch, ledger_ok, notes + ["diode_failure"])
    return SealResult(Status.SUCCESS, batch, ledger_ok, notes)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass
class Finding:
    kind: str  # record_hash | chain_break | bad_signature | hash_mismatch | not_anchored
    sequence: int
    detail: str = ""


def verify_chain(
    records, batches=(), public_keys: dict[str, ec.EllipticCurvePublicKey | bytes] | None = None
) -> list[Finding]:
    """Recompute every record hash, chain link and batch signature/hash.

    Batches are matched to ledger records by sequence number; a batch with no
    record is reported as ``not_anchored`` (no backfill is attempted).
    """
    findings: list[Finding] = []
    prev = GENESIS
    broken = False
    by_seq = {}
    for i, r in enumerate(records):
        if r.record_hash != LedgerRecord.compute_hash(r.sequence, r.batch_hash, r.prev_record_hash):
            findings.append(Finding("record_hash", r.sequence, "stored hash does not match fields"))
        if r.prev_record_hash != prev or r.sequence != i:
            broken = True
            findings.append(Finding("chain_break", r.sequence, "predecessor link broken"))
        elif broken:
            findings.append(Finding("chain_break", r.sequence, "descends from a broken link"))
        prev = r.record_hash
        by_seq[r.sequence] = r
    public_keys = public_keys or {}
    for b in batches:
        pk = public_keys.get(b.signer_id)
        if pk is not None and not verify(b.payload, b.signature, pk):
            findings.append(Finding("bad_signature", b.sequence, b.signer_id))
        rec = by_seq.get(b.sequence)
        if rec is None:
            findings.append(Finding("not_anchored", b.sequence, "no ledger record"))
        elif rec.batch_hash != b.batch_hash:
            findings.append(Finding("hash_mismatch", b.sequence, "payload hash differs from ledger"))
    return findings

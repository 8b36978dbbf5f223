"""In-process permissioned ledger for model coordination.

Clients register an identity (an Ed25519 key pair derived from the network
seed), store serialized weights in a content-addressed blob store, and submit
signed records ``<hash(weights), meta>``. A record is appended only when its
signature verifies and its metadata validates; accepted records are sealed
into hash-chained blocks.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (Ed25519PrivateKey,
                                                               Ed25519PublicKey)

ZERO_DIGEST = "0" * 64


class LedgerError(Exception):
    """Base class for rejected ledger operations."""


class DuplicateIdentity(LedgerError):
    pass


class UnknownIdentity(LedgerError):
    pass


class BadSignature(LedgerError):
    pass


class StaleRound(LedgerError):
    pass


class MissingBlob(LedgerError):
    pass


class IndexGap(LedgerError):
    pass


class InvalidMeta(LedgerError):
    pass


class BlobNotFound(KeyError):
    pass


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


# --------------------------------------------------------------------------
# identities
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    client_id: str
    verify_key: bytes
    _signing_key: Ed25519PrivateKey = field(repr=False, compare=False)

    def sign(self, payload: bytes) -> bytes:
        return self._signing_key.sign(payload)


def _derive_key(network_seed: int, client_id: str) -> Ed25519PrivateKey:
    material = hashlib.sha256(f"{network_seed}:{client_id}".encode()).digest()
    return Ed25519PrivateKey.from_private_bytes(material)


def _raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


# --------------------------------------------------------------------------
# records and blocks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelMeta:
    round: int
    client_id: str
    model_index: int
    sigma: float = 0.0
    epsilon: float | None = None
    delta: float | None = None
    trust_score: float | None = None
    selected: bool = False
    adversary: bool = False
    benign_verdict: bool = True
    kind: str = "local"

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelRecord:
    blob_hash: str
    meta: ModelMeta
    signature: bytes = b""

    def signing_payload(self) -> bytes:
        return signing_payload(self.blob_hash, self.meta)

    def as_dict(self) -> dict:
        return {"blob_hash": self.blob_hash, "meta": self.meta.as_dict(),
                "signature": self.signature.hex()}

    @classmethod
    def from_dict(cls, d) -> "ModelRecord":
        return cls(d["blob_hash"], ModelMeta(**d["meta"]), bytes.fromhex(d["signature"]))


def signing_payload(blob_hash: str, meta: ModelMeta) -> bytes:
    return _canonical({"blob_hash": blob_hash, "meta": meta.as_dict()})


@dataclass(frozen=True)
class LedgerBlock:
    index: int
    prev_hash: str
    payload: bytes
    block_hash: str

    @staticmethod
    def compute_hash(index: int, prev_hash: str, payload: bytes) -> str:
        return digest(struct.pack("<Q", index) + bytes.fromhex(prev_hash) + payload)

    @classmethod
    def build(cls, index: int, prev_hash: str, records: Iterable[ModelRecord]) -> "LedgerBlock":
        payload = _canonical([r.as_dict() for r in records])
        return cls(index, prev_hash, payload, cls.compute_hash(index, prev_hash, payload))

    @property
    def records(self) -> list[ModelRecord]:
        return [ModelRecord.from_dict(d) for d in json.loads(self.payload)]


# --------------------------------------------------------------------------
# blob store
# --------------------------------------------------------------------------

class BlobStore:
    """Content-addressed byte store keyed by SHA-256."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def store(self, data: bytes) -> str:
        h = digest(data)
        with self._lock:
            self._blobs.setdefault(h, bytes(data))
        return h

    def fetch(self, h: str) -> bytes:
        try:
            return self._blobs[h]
        except KeyError:
            raise BlobNotFound(h) from None

    def __contains__(self, h) -> bool:
        return h in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)


# --------------------------------------------------------------------------
# the ledger
# --------------------------------------------------------------------------

QUERY_FILTERS = ("all", "last", "selected_client", "model_index", "adversary", "benign")


@dataclass(frozen=True)
class TxResult:
    accepted: bool
    model_index: int | None = None
    reason: str = ""


class Ledger:
    """Single ordering point: submissions serialize, reads may run concurrently."""

    def __init__(self, seed: int = 0, sigma_bounds=(0.0, 0.2)):
        self.seed = seed
        self.sigma_bounds = (float(sigma_bounds[0]), float(sigma_bounds[1]))
        self.store = BlobStore()
        self.current_round = 0
        self._registry: dict[str, bytes] = {}
        self._pubkeys: dict[str, Ed25519PublicKey] = {}
        self._records: list[ModelRecord] = []
        self._pending: list[ModelRecord] = []
        self._by_client: dict[str, list[int]] = {}
        self._adversary: list[int] = []
        self._benign: list[int] = []
        self._lock = threading.RLock()
        self.blocks: list[LedgerBlock] = [LedgerBlock.build(0, ZERO_DIGEST, [])]

    # identities ---------------------------------------------------------
    def register_identity(self, client_id: str) -> Identity:
        with self._lock:
            if client_id in self._registry:
                raise DuplicateIdentity(f"client {client_id!r} is already registered")
            key = _derive_key(self.seed, client_id)
            vk = _raw_public(key)
            self._registry[client_id] = vk
            self._pubkeys[client_id] = Ed25519PublicKey.from_public_bytes(vk)
        return Identity(client_id, vk, key)

    def verify(self, client_id: str, payload: bytes, signature: bytes) -> bool:
        try:
            pub = self._pubkeys[client_id]
        except KeyError:
            raise UnknownIdentity(f"client {client_id!r} is not registered") from None
        try:
            pub.verify(bytes(signature), bytes(payload))
        except InvalidSignature:
            return False
        return True

    # blobs --------------------------------------------------------------
    def store_blob(self, data: bytes) -> str:
        return self.store.store(data)

    def fetch_blob(self, h: str) -> bytes:
        return self.store.fetch(h)

    # transactions -------------------------------------------------------
    @property
    def next_index(self) -> int:
        return len(self._records)

    def begin_round(self, t: int):
        with self._lock:
            if t < self.current_round:
                raise StaleRound(f"round {t} precedes current round {self.current_round}")
            self.current_round = t

    def make_record(self, identity: Identity, blob_hash: str, **meta_fields) -> ModelRecord:
        """Build and sign a record targeting the next free model index."""
        meta = ModelMeta(round=self.current_round, client_id=identity.client_id,
                         model_index=self.next_index, **meta_fields)
        return ModelRecord(blob_hash, meta, identity.sign(signing_payload(blob_hash, meta)))

    def _validate(self, record: ModelRecord):
        meta = record.meta
        if meta.client_id not in self._pubkeys:
            raise BadSignature(f"VerifySig: client {meta.client_id!r} is not registered")
        if not self.verify(meta.client_id, record.signing_payload(), record.signature):
            raise BadSignature(f"VerifySig: signature of {meta.client_id!r} does not verify")
        if meta.round != self.current_round:
            raise StaleRound(f"ValidateMeta: round {meta.round} != current round {self.current_round}")
        lo, hi = self.sigma_bounds
        if not lo <= meta.sigma <= hi and meta.sigma != 0.0:
            raise InvalidMeta(f"ValidateMeta: sigma {meta.sigma} outside [{lo}, {hi}]")
        if record.blob_hash not in self.store:
            raise MissingBlob(f"ValidateMeta: blob {record.blob_hash[:12]}... not in store")
        if meta.model_index != self.next_index:
            raise IndexGap(f"ValidateMeta: model_index {meta.model_index} != expected {self.next_index}")

    def submit_model(self, record: ModelRecord) -> TxResult:
        """Append ``record`` if VerifySig and ValidateMeta hold, else raise."""
        with self._lock:
            self._validate(record)
            idx = len(self._records)
            self._records.append(record)
            self._pending.append(record)
            self._by_client.setdefault(record.meta.client_id, []).append(idx)
            if record.meta.adversary:
                self._adversary.append(idx)
            if record.meta.benign_verdict:
                self._benign.append(idx)
        return TxResult(True, idx)

    # queries ------------------------------------------------------------
    def query_models(self, kind: str = "all", value=None) -> list[ModelRecord]:
        recs = self._records
        if kind == "all":
            return list(recs)
        if kind == "last":
            return [recs[-1]] if recs else []
        if kind == "model_index":
            i = int(value)
            return [recs[i]] if 0 <= i < len(recs) else []
        if kind == "selected_client":
            return [recs[i] for i in self._by_client.get(value, ()) if recs[i].meta.selected]
        if kind in ("adversary", "benign"):
            idx = self._adversary if kind == "adversary" else self._benign
            return [recs[i] for i in idx if value is None or recs[i].meta.client_id == value]
        raise ValueError(f"unknown query filter {kind!r}; choose from {QUERY_FILTERS}")

    def __len__(self) -> int:
        return len(self._records)

    @property
    def pending(self) -> int:
        return len(self._pending)

    # blocks -------------------------------------------------------------
    def seal_block(self) -> LedgerBlock | None:
        with self._lock:
            if not self._pending:
                return None
            prev = self.blocks[-1]
            block = LedgerBlock.build(prev.index + 1, prev.block_hash, self._pending)
            self.blocks.append(block)
            self._pending = []
            return block

    def verify_chain(self) -> bool:
        """Recompute every block hash, the prev-hash links and all signatures.

        Hash links are checked across the whole chain before any record is
        decoded, so a tampered chain is rejected without signature work.
        """
        blocks = list(self.blocks)
        if not blocks or blocks[0].prev_hash != ZERO_DIGEST or blocks[0].index != 0:
            return False
        prev_hash = ZERO_DIGEST
        for k, b in enumerate(blocks):
            if b.index != k or b.prev_hash != prev_hash:
                return False
            if LedgerBlock.compute_hash(b.index, b.prev_hash, b.payload) != b.block_hash:
                return False
            prev_hash = b.block_hash
        for b in blocks:
            try:
                records = b.records
            except (ValueError, KeyError, TypeError):
                return False
            for r in records:
                try:
                    if not self.verify(r.meta.client_id, r.signing_payload(), r.signature):
                        return False
                except UnknownIdentity:
                    return False
                if r.blob_hash not in self.store:
                    return False
        return True

    def head_digest(self) -> str:
        return self.blocks[-1].block_hash


def tamper_block(ledger: Ledger, block_index: int, byte_offset: int) -> None:
    """Flip one byte of a sealed block's payload in place (for integrity tests)."""
    b = ledger.blocks[block_index]
    data = bytearray(b.payload)
    data[byte_offset % len(data)] ^= 0x01
    ledger.blocks[block_index] = replace(b, payload=bytes(data))


# --------------------------------------------------------------------------
# benchmark harness
# --------------------------------------------------------------------------

BENCH_TASKS = (
    "CreateModel",
    "QueryAllModels",
    "QueryLastModel",
    "QueryModelsBySelectedClientID",
    "QueryModelsByModelIndex",
    "QueryModelsByAdversaryClientID",
    "QueryModelsByBenignClientID",
)
BENCH_COLUMNS = ("Name", "Succ", "Fail", "Send Rate (TPS)", "Max Latency (s)",
                 "Min Latency (s)", "Avg Latency (s)", "Throughput (TPS)")


@dataclass(frozen=True)
class Workload:
    txs: int = 5000
    send_rate: float = 5.0
    tasks: tuple[str, ...] = BENCH_TASKS
    n_clients: int = 20
    block_size: int = 10


@dataclass(frozen=True)
class BenchRow:
    name: str
    succ: int
    fail: int
    send_rate: float
    max_latency: float
    min_latency: float
    avg_latency: float
    throughput: float

    def as_list(self):
        return [self.name, self.succ, self.fail, round(self.send_rate, 1),
                round(self.max_latency, 6), round(self.min_latency, 6),
                round(self.avg_latency, 6), round(self.throughput, 1)]


@dataclass(frozen=True)
class BenchReport:
    workload: Workload
    rows: tuple[BenchRow, ...]
    chain_valid: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in self.rows:
            w.writerow(r.as_list())
        return buf.getvalue()


def _paced_row(name: str, service_times: list[float], failures: int, rate: float) -> BenchRow:
    """Latency and throughput under a virtual issuance clock.

    Transaction ``i`` is issued at ``i / rate``; it starts once issued and the
    previous one has committed, and takes its measured service time. Latency
    is commit time minus issue time.
    """
    n = len(service_times)
    clock = 0.0
    latencies = []
    for i, s in enumerate(service_times):
        issued = i / rate
        start = max(issued, clock)
        clock = start + s
        latencies.append(clock - issued)
    duration = clock if clock > 0 else 1.0 / rate
    succ = n - failures
    return BenchRow(name, succ, failures, n / (n / rate), max(latencies), min(latencies),
                    sum(latencies) / n, succ / duration)


def bench_run(workload: Workload, ledger: Ledger | None = None) -> tuple[BenchReport, Ledger]:
    """Issue every task ``workload.txs`` times and time each transaction."""
    if workload.txs < 1 or not workload.send_rate > 0:
        raise ValueError("need txs >= 1 and send_rate > 0")
    led = ledger if ledger is not None else Ledger(seed=0)
    ids = []
    for c in range(workload.n_clients):
        cid = f"client-{c:02d}"
        ids.append(led.register_identity(cid) if cid not in led._registry
                   else Identity(cid, led._registry[cid], _derive_key(led.seed, cid)))
    rows = []
    for task in workload.tasks:
        times, fails = [], 0
        for i in range(workload.txs):
            t0 = time.perf_counter()
            try:
                _bench_tx(led, task, i, ids, workload)
            except LedgerError:
                fails += 1
            times.append(time.perf_counter() - t0)
        if task == "CreateModel":
            led.seal_block()
        rows.append(_paced_row(task, times, fails, workload.send_rate))
    return BenchReport(workload, tuple(rows), led.verify_chain()), led


def _bench_tx(led: Ledger, task: str, i: int, ids, workload: Workload):
    ident = ids[i % len(ids)]
    if task == "CreateModel":
        blob = struct.pack("<QQ", led.seed, i) + ident.client_id.encode()
        h = led.store_blob(blob)
        rec = led.make_record(ident, h, selected=(i % len(ids) == 0),
                              adversary=(i % 5 == 4), benign_verdict=(i % 5 != 4))
        led.submit_model(rec)
        if led.pending >= workload.block_size:
            led.seal_block()
        return None
    if task == "QueryAllModels":
        return led.query_models("all")
    if task == "QueryLastModel":
        return led.query_models("last")
    if task == "QueryModelsBySelectedClientID":
        return led.query_models("selected_client", ident.client_id)
    if task == "QueryModelsByModelIndex":
        return led.query_models("model_index", i % max(1, len(led)))
    if task == "QueryModelsByAdversaryClientID":
        return led.query_models("adversary", ident.client_id)
    if task == "QueryModelsByBenignClientID":
        return led.query_models("benign", ident.client_id)
    raise ValueError(f"unknown bench task {task!r}")

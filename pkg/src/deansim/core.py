"""Core domain types and hashing rules shared by every other module.

All simulated time is integer milliseconds. All digests are 32-byte SHA-256.

Canonical serialization (compatibility contract, see README):
fields are concatenated in declaration order; integers are 8-byte
big-endian unsigned; coordinates are IEEE-754 binary64 big-endian;
digests are raw 32 bytes; lists are length-prefixed with an 8-byte
big-endian element count.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

HASH_LEN = 32
ZERO_HASH = b"\x00" * HASH_LEN

# Every block carries at least this many transactions.
MIN_TXNS_PER_BLOCK = 12

# Geographic trust parameters (simulated units; the protocol gives none).
GEO_RADIUS_M = 50.0
GEO_SATURATION_MS = 3_600_000          # 1 simulated hour
ACTIVITY_SATURATION_MS = 3_600_000     # 1 simulated hour

# Normalization constant for the free-disk score term, in block slots.
DISK_NORM_SLOTS = 100

_REGISTRATION_TAG = b"dean-node-registration/v1"


class CoreError(Exception):
    pass


class EmptyBlockError(CoreError):
    """Raised when a hash is requested for a block with no transactions."""


class BadWeightsError(CoreError):
    """Raised when trust-score weights are negative or sum to zero."""


def hash_bytes(payload: bytes) -> bytes:
    """SHA-256 digest of an arbitrary byte payload."""
    return hashlib.sha256(payload).digest()


def enc_u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def enc_f64(value: float) -> bytes:
    return struct.pack(">d", value)


def quorum(n: int) -> int:
    """Smallest strict majority of n: floor(n/2) + 1."""
    return n // 2 + 1


class NodeKind(Enum):
    EDGE = 0
    SENSOR = 1


@dataclass(frozen=True, eq=True)
class NodeId:
    """Content-hash identity of a node; digest is unique network-wide."""

    digest: bytes
    kind: NodeKind

    def __post_init__(self):
        if len(self.digest) != HASH_LEN:
            raise ValueError("node digest must be 32 bytes")

    def canonical(self) -> bytes:
        return self.digest + enc_u64(self.kind.value)

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @property
    def short(self) -> str:
        return self.digest.hex()[:12]

    def __repr__(self):
        return f"NodeId({self.kind.name.lower()}:{self.short})"


def registration_record(kind: NodeKind, index: int) -> bytes:
    """Byte record a node registers under; its hash is the node's digest."""
    return _REGISTRATION_TAG + enc_u64(kind.value) + enc_u64(index)


def make_node_id(kind: NodeKind, index: int) -> NodeId:
    return NodeId(digest=hash_bytes(registration_record(kind, index)), kind=kind)


def node_sort_key(node_id: NodeId) -> bytes:
    """Deterministic (lexicographic digest) ordering used for tie-breaks."""
    return node_id.digest


class TxnKind(Enum):
    REGULAR = 0
    CONFIGURATION = 1


@dataclass(frozen=True, eq=True)
class Transaction:
    txn_id: bytes
    kind: TxnKind
    sender: NodeId
    receiver: NodeId
    amount: int
    geo: tuple[float, float]
    created_at: int  # simulated ms

    def id_payload(self) -> bytes:
        """Canonical bytes of every field except txn_id."""
        x, y = self.geo
        return b"".join(
            (
                enc_u64(self.kind.value),
                self.sender.canonical(),
                self.receiver.canonical(),
                enc_u64(self.amount),
                enc_f64(x),
                enc_f64(y),
                enc_u64(self.created_at),
            )
        )

    def canonical(self) -> bytes:
        return self.txn_id + self.id_payload()


def make_transaction(
    kind: TxnKind,
    sender: NodeId,
    receiver: NodeId,
    amount: int,
    geo: tuple[float, float],
    created_at: int,
) -> Transaction:
    """Build a transaction with its id derived from the other fields."""
    if amount < 0:
        raise ValueError("amount must be non-negative")
    if kind is TxnKind.CONFIGURATION and sender.kind is not NodeKind.EDGE:
        raise ValueError("configuration transactions require an edge sender")
    txn = Transaction(ZERO_HASH, kind, sender, receiver, amount, geo, created_at)
    return replace(txn, txn_id=hash_bytes(txn.id_payload()))


@dataclass(frozen=True, eq=True)
class RelocationPointer:
    """Which node holds a relocated payload and under what receipt hash."""

    holder: NodeId
    relocated_hash: bytes

    def canonical(self) -> bytes:
        return self.holder.canonical() + self.relocated_hash


@dataclass(frozen=True, eq=True)
class Block:
    p_hash: bytes
    c_hash: bytes
    timestamp: int  # simulated ms
    txn_list: tuple[Transaction, ...]
    creator: NodeId
    t_hash: bytes = ZERO_HASH
    r_list: tuple[RelocationPointer, ...] = ()
    relocation_flag: bool = False

    def hashed_body(self) -> bytes:
        """Canonical bytes covered by c_hash.

        r_list, t_hash and relocation_flag are mutable routing metadata and
        are deliberately excluded so relocation never invalidates the chain.
        """
        parts = [self.p_hash, enc_u64(self.timestamp), enc_u64(len(self.txn_list))]
        parts.extend(t.canonical() for t in self.txn_list)
        parts.append(self.creator.canonical())
        return b"".join(parts)

    def canonical(self) -> bytes:
        """Payload identity bytes: hashed body plus the stored c_hash."""
        return self.hashed_body() + self.c_hash

    def with_pointer(self, pointer: RelocationPointer) -> "Block":
        return replace(self, r_list=self.r_list + (pointer,))

    def with_t_hash(self, t_hash: bytes) -> "Block":
        return replace(self, t_hash=t_hash)

    def with_relocation_flag(self, flag: bool = True) -> "Block":
        return replace(self, relocation_flag=flag)


def compute_block_hash(block: Block) -> bytes:
    """c_hash of a block: SHA-256 over the canonical hashed body."""
    if not block.txn_list:
        raise EmptyBlockError("block has no transactions")
    return hash_bytes(block.hashed_body())


def make_block(
    p_hash: bytes,
    timestamp: int,
    txn_list: Sequence[Transaction],
    creator: NodeId,
) -> Block:
    block = Block(
        p_hash=p_hash,
        c_hash=ZERO_HASH,
        timestamp=timestamp,
        txn_list=tuple(txn_list),
        creator=creator,
    )
    return replace(block, c_hash=compute_block_hash(block))


def ownership_stamp(c_hash: bytes, node: NodeId, at_ms: int) -> bytes:
    """hash(c_hash || node || timestamp); used for miner stamps and
    relocation receipts."""
    return hash_bytes(c_hash + node.canonical() + enc_u64(at_ms))


GENESIS_CREATOR = make_node_id(NodeKind.EDGE, 0xFFFF_FFFF)


def genesis_block() -> Block:
    """The fixed genesis block: 12 deterministic seed transactions."""
    txns = [
        make_transaction(
            TxnKind.CONFIGURATION,
            GENESIS_CREATOR,
            GENESIS_CREATOR,
            amount=i,
            geo=(0.0, 0.0),
            created_at=0,
        )
        for i in range(MIN_TXNS_PER_BLOCK)
    ]
    return make_block(ZERO_HASH, 0, txns, GENESIS_CREATOR)


@dataclass(frozen=True)
class HollowBlock:
    """Header-only remnant of a disseminated block.

    The payload is erased; c_hash is preserved so chain links still check,
    and r_list points at the nodes that can return the payload.
    """

    p_hash: bytes
    c_hash: bytes
    t_hash: bytes
    timestamp: int
    creator: NodeId
    r_list: tuple[RelocationPointer, ...]

    def __post_init__(self):
        if not self.r_list:
            raise ValueError("a hollow block without pointers is unrecoverable")

    def with_pointer(self, pointer: RelocationPointer) -> "HollowBlock":
        return replace(self, r_list=self.r_list + (pointer,))


ChainEntry = Union[Block, HollowBlock]


def hollow_out(block: Block) -> HollowBlock:
    return HollowBlock(
        p_hash=block.p_hash,
        c_hash=block.c_hash,
        t_hash=block.t_hash,
        timestamp=block.timestamp,
        creator=block.creator,
        r_list=block.r_list,
    )


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    first_bad_index: Optional[int] = None


def validate_chain(chain: Sequence[ChainEntry]) -> ValidityReport:
    """Check link integrity and per-block validity of a chain.

    A block is good when its p_hash equals the previous c_hash, its stored
    c_hash matches the recomputed hash, and it carries at least
    MIN_TXNS_PER_BLOCK transactions. Hollow entries are checked on their
    headers only (the payload lives elsewhere). The empty chain is valid.
    """
    prev_c_hash: Optional[bytes] = None
    for i, entry in enumerate(chain):
        if prev_c_hash is not None and entry.p_hash != prev_c_hash:
            return ValidityReport(False, i)
        if isinstance(entry, Block):
            if len(entry.txn_list) < MIN_TXNS_PER_BLOCK:
                return ValidityReport(False, i)
            if compute_block_hash(entry) != entry.c_hash:
                return ValidityReport(False, i)
        prev_c_hash = entry.c_hash
    return ValidityReport(True, None)


@dataclass(frozen=True)
class AtwWeights:
    """Relative weights of the four trust-score terms.

    The defaults favor adjacency because leader eligibility is gated on it.
    Any non-negative weights with a positive sum are accepted; scaling all
    four by the same constant never changes which node scores highest.
    """

    adjacency: float = 0.4
    geo: float = 0.2
    activity: float = 0.2
    disk: float = 0.2

    def validate(self) -> None:
        ws = (self.adjacency, self.geo, self.activity, self.disk)
        if any(w < 0 for w in ws) or sum(ws) <= 0:
            raise BadWeightsError(f"malformed weights {ws}")


@dataclass(frozen=True)
class AtwRecord:
    """Per-node trust attributes driving leader election (one table row)."""

    node_id: NodeId
    timestamp: int          # simulated ms of last activity
    geo_timer: int          # continuous ms within GEO_RADIUS_M of the pin
    loc: tuple[float, float]
    adj: frozenset[NodeId]
    m_list: int = 0          # blocks mined
    b_list: int = 0          # blocks stored
    disk: int = 0            # free block slots

    def __post_init__(self):
        if self.node_id in self.adj:
            raise ValueError("a node never appears in its own adjacency")


def update_geo_timer(
    record: AtwRecord, now: int, loc: tuple[float, float], pin: tuple[float, float]
) -> AtwRecord:
    """Advance a record's geo timer to `now`, resetting it when the node has
    moved more than GEO_RADIUS_M from the location the timer started at."""
    dx = loc[0] - pin[0]
    dy = loc[1] - pin[1]
    moved = (dx * dx + dy * dy) ** 0.5 > GEO_RADIUS_M
    elapsed = max(0, now - record.timestamp)
    timer = 0 if moved else record.geo_timer + elapsed
    return replace(record, timestamp=now, geo_timer=timer, loc=loc)


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def atw_score(record: AtwRecord, weights: AtwWeights, network_size: int) -> float:
    """Combined trust score in [0, sum(weights)]; 1.0 at most with unit-sum
    weights. Each term is clamped to [0, 1] before weighting."""
    if network_size < 1:
        raise ValueError("network_size must be at least 1")
    weights.validate()
    adj_term = _clamp01(len(record.adj) / network_size)
    geo_term = _clamp01(record.geo_timer / GEO_SATURATION_MS)
    act_term = _clamp01(record.timestamp / ACTIVITY_SATURATION_MS)
    disk_term = _clamp01(record.disk / DISK_NORM_SLOTS)
    return (
        weights.adjacency * adj_term
        + weights.geo * geo_term
        + weights.activity * act_term
        + weights.disk * disk_term
    )

"""Node state machine: trust-adjacency network construction, leader
election, per-block leader locking, block consensus, and node approval.

Handlers here are deterministic event functions: they mutate one node's
state and return the messages it wants sent. All scheduling, delivery,
and fault semantics live in `simnet`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .core import (
    AtwRecord,
    AtwWeights,
    Block,
    ChainEntry,
    HollowBlock,
    NodeId,
    NodeKind,
    atw_score,
    compute_block_hash,
    hash_bytes,
    node_sort_key,
    ownership_stamp,
    quorum,
    registration_record,
)


class ConsensusError(Exception):
    pass


class UnknownBlockError(ConsensusError):
    """A peer decision arrived for a block this node has not judged yet."""


class NoEligibleNodeError(ConsensusError):
    """No record clears the adjacency bar for leader election."""


class AlreadyLockedError(ConsensusError):
    def __init__(self, c_hash: bytes, holder: NodeId):
        super().__init__(f"block {c_hash.hex()[:12]} locked by {holder.short}")
        self.c_hash = c_hash
        self.holder = holder


class MissingParentError(ConsensusError):
    """The parent payload was disseminated away; recover it first."""

    def __init__(self, parent_c_hash: bytes):
        super().__init__(f"parent {parent_c_hash.hex()[:12]} is hollow")
        self.parent_c_hash = parent_c_hash


class BadIdentityError(ConsensusError):
    pass


class FailedChallengeError(ConsensusError):
    pass


class Role(Enum):
    SENSOR = "sensor"
    EDGE = "edge"
    LEADER = "leader"


class Phase(Enum):
    BUILDING = "building"
    STEADY = "steady"


@dataclass(frozen=True)
class NetworkConfig:
    """Static network parameters. Edge counts are odd in the protocol's
    own deployments (2f+1); even counts are accepted for experiment
    geometries and use floor((n-1)/2) as the fault bound."""

    initial_edge_count: int
    sensor_edge_ratio: int = 3
    area_side: float = 600.0
    link_latency_sensor_edge: int = 95    # simulated ms
    link_latency_edge_edge: int = 150     # simulated ms
    atw_share_period: int = 5_000
    atw_timeout: int = 12_500
    jitter_frac: float = 0.10
    send_overhead_ms: int = 1             # per-message serialization at the sender
    validate_delay_ms: int = 1
    probe_timeout_ms: int = 5_000         # lost-assignment / recovery retry delay
    disk_capacity_slots: int = 10_000
    disk_jitter_frac: float = 0.2
    join_fee: int = 1                     # coins
    txns_per_block: int = 12
    event_ceiling: int = 2_000_000
    stall_retry_limit: int = 50

    def __post_init__(self):
        if self.initial_edge_count < 3:
            raise ValueError("need at least 3 edge nodes")
        if self.txns_per_block < 12:
            raise ValueError("blocks carry at least 12 transactions")

    @property
    def fault_bound(self) -> int:
        return (self.initial_edge_count - 1) // 2

    @property
    def quorum(self) -> int:
        return quorum(self.initial_edge_count)


class MessageKind(Enum):
    BLOCK_PROPOSAL = "block-proposal"
    VALIDATION_DECISION = "validation-decision"
    ATW_SHARE = "atw-share"
    JOIN_REQUEST = "join-request"
    JOIN_CHALLENGE = "join-challenge"
    JOIN_RESULT = "join-result"
    LEADER_BROADCAST = "leader-broadcast"
    RELOCATE_BLOCK = "relocate-block"
    RELOCATE_ACK = "relocate-ack"
    RECOVERY_REQUEST = "recovery-request"
    RECOVERY_REPLY = "recovery-reply"
    FAULTY_ANNOUNCEMENT = "faulty-announcement"
    TXN_SUBMIT = "txn-submit"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    src: NodeId
    dst: NodeId
    payload: object
    sent_at: int = 0

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("messages never target their sender")


@dataclass(frozen=True)
class BlockProposalPayload:
    block: Block

    @property
    def stamped(self) -> bool:
        return any(self.block.t_hash)


@dataclass(frozen=True)
class DecisionPayload:
    c_hash: bytes
    verdict: bool


@dataclass(frozen=True)
class AtwSharePayload:
    record: AtwRecord


@dataclass(frozen=True)
class JoinRequestPayload:
    candidate: NodeId
    node_hash: bytes
    registration: bytes


@dataclass(frozen=True)
class JoinChallengePayload:
    block: Block


@dataclass(frozen=True)
class JoinResultPayload:
    c_hash: bytes
    verdict: bool


@dataclass(frozen=True)
class LeaderBroadcastPayload:
    topic: str                       # "leader-elected" | "node-approved"
    leaders: tuple[NodeId, ...] = ()
    max_score: float = 0.0
    candidate: Optional[NodeId] = None
    registration: bytes = b""


@dataclass(frozen=True)
class RelocateBlockPayload:
    block: Block


@dataclass(frozen=True)
class RelocateAckPayload:
    c_hash: bytes
    relocated_hash: Optional[bytes]  # None signals rejection
    holder: NodeId
    received_at: int


@dataclass(frozen=True)
class RecoveryRequestPayload:
    c_hash: bytes


@dataclass(frozen=True)
class RecoveryReplyPayload:
    c_hash: bytes
    blocks: tuple[Block, ...]        # empty when the holder cannot help


@dataclass(frozen=True)
class FaultyPayload:
    suspect: NodeId


@dataclass(frozen=True)
class TxnSubmitPayload:
    txn: object


class LockRegistry:
    """Simulator-scoped mutual exclusion on block hashes.

    Contention is arbitrated by event-processing order: the first lock
    event wins, which makes the grant history fully deterministic.
    """

    def __init__(self):
        self._locks: dict[bytes, tuple[NodeId, int]] = {}

    def acquire(self, c_hash: bytes, holder: NodeId, now: int) -> None:
        current = self._locks.get(c_hash)
        if current is not None and current[0] != holder:
            raise AlreadyLockedError(c_hash, current[0])
        self._locks[c_hash] = (holder, now)

    def release(self, c_hash: bytes, holder: NodeId) -> None:
        current = self._locks.get(c_hash)
        if current is not None and current[0] == holder:
            del self._locks[c_hash]

    def holder_of(self, c_hash: bytes) -> Optional[NodeId]:
        entry = self._locks.get(c_hash)
        return entry[0] if entry else None

    def clear_holder(self, holder: NodeId) -> list[bytes]:
        """Drop every lock a node holds (fail-restart volatility); returns
        the block hashes that were released."""
        released = [ch for ch, (node, _) in self._locks.items() if node == holder]
        for ch in released:
            del self._locks[ch]
        return released


@dataclass
class NodeState:
    """One edge node's full protocol state."""

    id: NodeId
    loc: tuple[float, float]
    known_edges: tuple[NodeId, ...]
    disk_capacity: int
    role: Role = Role.EDGE
    phase: Phase = Phase.BUILDING
    chain: list = field(default_factory=list)
    chain_index: dict = field(default_factory=dict)      # c_hash -> position
    side_chain: list = field(default_factory=list)
    side_index: dict = field(default_factory=dict)
    adjacency: set = field(default_factory=set)
    atw_table: dict = field(default_factory=dict)        # NodeId -> AtwRecord
    hollow_pointers: dict = field(default_factory=dict)  # c_hash -> [RelocationPointer]
    half_coins: int = 0
    m_list: int = 0
    b_list: int = 0
    joined_at: int = 0
    current_leaders: frozenset = frozenset()
    max_atw: float = 0.0

    # volatile state, lost on fail-restart
    pending_locks: set = field(default_factory=set)
    lock_stamps: dict = field(default_factory=dict)      # c_hash -> t_hash
    inflight: dict = field(default_factory=dict)         # c_hash -> Block awaiting validation
    held: dict = field(default_factory=dict)             # parent c_hash -> [Block]
    held_for_recovery: dict = field(default_factory=dict)
    own_decisions: dict = field(default_factory=dict)    # c_hash -> bool
    buffered_decisions: dict = field(default_factory=dict)
    orphans: dict = field(default_factory=dict)          # p_hash -> [Block]
    recovery: dict = field(default_factory=dict)         # c_hash -> holder index
    relocating: set = field(default_factory=set)

    # peer bookkeeping
    suspects: set = field(default_factory=set)           # byzantine, permanent
    dead_marked: set = field(default_factory=set)        # silent, revivable
    last_heard: dict = field(default_factory=dict)       # NodeId -> ms
    pending_joins: dict = field(default_factory=dict)    # candidate -> challenge c_hash
    join_approvals: dict = field(default_factory=dict)   # candidate -> set of leaders

    @property
    def coins(self) -> int:
        return self.half_coins // 2

    @property
    def used_slots(self) -> int:
        full = sum(1 for entry in self.chain if isinstance(entry, Block))
        return full + len(self.side_chain)

    @property
    def free_slots(self) -> int:
        return self.disk_capacity - self.used_slots

    @property
    def tip(self) -> Optional[ChainEntry]:
        return self.chain[-1] if self.chain else None

    def has_block(self, c_hash: bytes) -> bool:
        return c_hash in self.chain_index

    def full_block(self, c_hash: bytes) -> Optional[Block]:
        idx = self.chain_index.get(c_hash)
        if idx is None:
            return None
        entry = self.chain[idx]
        return entry if isinstance(entry, Block) else None

    def append_block(self, block: ChainEntry) -> None:
        self.chain_index[block.c_hash] = len(self.chain)
        self.chain.append(block)
        self.b_list += 1

    def sorted_adjacency(self) -> list[NodeId]:
        return sorted(self.adjacency, key=node_sort_key)

    def own_record(self, now: int) -> AtwRecord:
        return AtwRecord(
            node_id=self.id,
            timestamp=now,
            geo_timer=max(0, now - self.joined_at),
            loc=self.loc,
            adj=frozenset(self.adjacency),
            m_list=self.m_list,
            b_list=self.b_list,
            disk=self.free_slots,
        )

    def clear_volatile(self) -> list[bytes]:
        """Fail-restart semantics: drop in-memory work, keep the persisted
        chain, side chain, coins, and trust tables. Returns the hashes the
        node was actively working on."""
        lost = sorted(self.pending_locks, key=bytes.hex)
        self.pending_locks.clear()
        self.lock_stamps.clear()
        self.inflight.clear()
        self.held.clear()
        self.held_for_recovery.clear()
        self.buffered_decisions.clear()
        self.orphans.clear()
        self.recovery.clear()
        self.relocating.clear()
        return lost


def structurally_valid(block: Block) -> bool:
    try:
        return (
            len(block.txn_list) >= 12
            and compute_block_hash(block) == block.c_hash
        )
    except Exception:
        return False


def links_to(block: Block, tip: Optional[ChainEntry]) -> bool:
    if tip is None:
        return not any(block.p_hash)
    return block.p_hash == tip.c_hash


# ---------------------------------------------------------------------------
# Phase 1: distributed network construction
# ---------------------------------------------------------------------------


def verify_block_phase1(
    state: NodeState, block: Block, now: int, flip: bool = False
) -> tuple[bool, list[Message]]:
    """Validate a bootstrap block, persist it when good and new, and share
    the verdict with every known edge peer.

    `flip` inverts this node's verdict (byzantine fault hook). A repeated
    block keeps its recorded verdict and emits nothing.
    """
    if state.phase is not Phase.BUILDING or state.role is Role.SENSOR:
        raise ConsensusError("phase-1 verification runs on building edge nodes")
    if block.c_hash in state.own_decisions:
        return state.own_decisions[block.c_hash], []

    verdict = links_to(block, state.tip) and structurally_valid(block)
    if flip:
        verdict = not verdict
    appended = False
    if verdict and not state.has_block(block.c_hash) and state.free_slots >= 1:
        state.append_block(block)
        appended = True
    state.own_decisions[block.c_hash] = verdict

    outbound = [
        Message(
            MessageKind.VALIDATION_DECISION,
            state.id,
            peer,
            DecisionPayload(block.c_hash, verdict),
            now,
        )
        for peer in state.known_edges
        if peer != state.id and peer not in state.suspects
    ]
    # buffered peer verdicts for this block can be judged now
    for peer, peer_verdict in state.buffered_decisions.pop(block.c_hash, []):
        build_network_on_decision(state, peer, block.c_hash, peer_verdict, now)
    return (verdict if not appended else True), outbound


def build_network_on_decision(
    state: NodeState, peer: NodeId, c_hash: bytes, verdict: bool, now: int = 0
) -> None:
    """Grow adjacency from a matching peer verdict; record conflicting
    voters as suspects. Raises UnknownBlockError when this node has not
    judged the block yet (callers buffer and retry)."""
    if peer in state.suspects or peer == state.id:
        return
    own = state.own_decisions.get(c_hash)
    if own is None:
        raise UnknownBlockError(c_hash.hex())
    if own == verdict:
        if peer not in state.adjacency:
            state.adjacency.add(peer)
            state.last_heard.setdefault(peer, now)
    else:
        state.suspects.add(peer)
        state.adjacency.discard(peer)


def buffer_decision(state: NodeState, peer: NodeId, c_hash: bytes, verdict: bool) -> None:
    state.buffered_decisions.setdefault(c_hash, []).append((peer, verdict))


def leader_eligible(adjacency_size: int, config: NetworkConfig) -> bool:
    return adjacency_size > config.initial_edge_count / 2


# ---------------------------------------------------------------------------
# Leader election and block consensus
# ---------------------------------------------------------------------------


def elect_leaders(
    records: Iterable[AtwRecord], config: NetworkConfig, weights: AtwWeights
) -> frozenset[NodeId]:
    """All eligible nodes whose trust score equals the maximum.

    Eligibility requires adjacency covering a strict majority of the
    initial edge nodes. Equal maximal scores yield multiple leaders; they
    work in parallel on distinct blocks.
    """
    eligible = [r for r in records if leader_eligible(len(r.adj), config)]
    if not eligible:
        raise NoEligibleNodeError("no node clears the adjacency bar")
    network_size = config.initial_edge_count
    scored = [(atw_score(r, weights, network_size), r.node_id) for r in eligible]
    best = max(s for s, _ in scored)
    return frozenset(node for s, node in scored if s == best)


def max_atw_of(
    records: Iterable[AtwRecord], config: NetworkConfig, weights: AtwWeights
) -> float:
    return max(atw_score(r, weights, config.initial_edge_count) for r in records)


def acquire_block_lock(
    state: NodeState, block: Block, now: int, registry: LockRegistry
) -> bytes:
    """Take the global lock on a block and stamp the miner hash.

    Raises AlreadyLockedError when another leader owns the block. The
    t_hash binds (c_hash, leader, lock time) so any node can verify the
    original miner.
    """
    if state.role is not Role.LEADER:
        raise ConsensusError(f"{state.id.short} is not a leader")
    if state.has_block(block.c_hash):
        raise ConsensusError("block already stored on this leader")
    registry.acquire(block.c_hash, state.id, now)
    t_hash = ownership_stamp(block.c_hash, state.id, now)
    state.pending_locks.add(block.c_hash)
    state.lock_stamps[block.c_hash] = t_hash
    return t_hash


def consensus_validate(
    state: NodeState,
    block: Block,
    now: int,
    registry: LockRegistry,
    flip: bool = False,
) -> tuple[bool, list[Message]]:
    """Leader-side validation of a locked block.

    On success the stamped block is persisted to the leader's chain, the
    mining reward is credited, replication goes out to every adjacency
    peer, and the lock is released. On failure the lock is released and
    the caller requeues the block. Raises MissingParentError when the
    parent payload was disseminated away.
    """
    c_hash = block.c_hash
    if c_hash not in state.pending_locks:
        raise ConsensusError("leader does not hold the lock for this block")

    parent = state.tip
    if isinstance(parent, HollowBlock) and block.p_hash == parent.c_hash:
        raise MissingParentError(parent.c_hash)

    ok = (
        links_to(block, parent)
        and structurally_valid(block)
        and state.free_slots >= 1
    )
    if flip:
        ok = not ok
    if not ok:
        registry.release(c_hash, state.id)
        state.pending_locks.discard(c_hash)
        state.lock_stamps.pop(c_hash, None)
        return False, []

    stamped = block.with_t_hash(state.lock_stamps[c_hash])
    state.append_block(stamped)
    state.m_list += 1
    state.half_coins += 2  # one coin mining reward
    outbound = [
        Message(MessageKind.BLOCK_PROPOSAL, state.id, peer, BlockProposalPayload(stamped), now)
        for peer in state.sorted_adjacency()
    ]
    registry.release(c_hash, state.id)
    state.pending_locks.discard(c_hash)
    state.lock_stamps.pop(c_hash, None)
    return True, outbound


def rereplicate(state: NodeState, c_hash: bytes, now: int) -> list[Message]:
    """Completion path: the block is already persisted here (an earlier
    round aborted mid-replication); push the stored copy out again without
    re-mining or re-crediting."""
    stored = state.full_block(c_hash)
    if stored is None:
        return []
    return [
        Message(MessageKind.BLOCK_PROPOSAL, state.id, peer, BlockProposalPayload(stored), now)
        for peer in state.sorted_adjacency()
    ]


def replica_receive_block(
    state: NodeState, block: Block, src: NodeId, now: int, flip: bool = False
) -> list[bytes]:
    """Steady-state replication at a non-mining edge node.

    Appends the block when it extends the tip, buffers it when the parent
    has not arrived yet, and drains any orphans unblocked by the append.
    Returns the c_hashes appended (possibly several).
    """
    appended: list[bytes] = []
    pending = [block]
    while pending:
        blk = pending.pop(0)
        if state.has_block(blk.c_hash):
            continue
        ok = links_to(blk, state.tip) and structurally_valid(blk)
        if flip:
            ok = not ok
        if ok and state.free_slots >= 1:
            state.append_block(blk)
            appended.append(blk.c_hash)
            if src not in state.suspects and src != state.id:
                state.adjacency.add(src)
                state.last_heard.setdefault(src, now)
            pending.extend(state.orphans.pop(blk.c_hash, []))
        elif not state.has_block(blk.p_hash) and structurally_valid(blk) and not flip:
            state.orphans.setdefault(blk.p_hash, []).append(blk)
        # otherwise: structurally bad or stale duplicate; drop silently
    return appended


# ---------------------------------------------------------------------------
# New node approval
# ---------------------------------------------------------------------------


def verify_registration(node_hash: bytes, registration: bytes) -> bool:
    return hash_bytes(registration) == node_hash


def approve_new_node(
    state: NodeState, request: JoinRequestPayload, now: int
) -> list[Message]:
    """Leader half of the join handshake: verify the candidate's identity
    hash and send a challenge block for it to validate."""
    if state.role is not Role.LEADER:
        raise ConsensusError(f"{state.id.short} is not a leader")
    if not verify_registration(request.node_hash, request.registration):
        raise BadIdentityError(f"candidate {request.candidate.short} failed the digest check")
    challenge = None
    for entry in reversed(state.chain):
        if isinstance(entry, Block):
            challenge = entry
            break
    if challenge is None:
        raise ConsensusError("leader has no full block to challenge with")
    state.pending_joins[request.candidate] = (challenge.c_hash, request.registration)
    return [
        Message(
            MessageKind.JOIN_CHALLENGE,
            state.id,
            request.candidate,
            JoinChallengePayload(challenge),
            now,
        )
    ]


def complete_join(
    state: NodeState,
    candidate: NodeId,
    result: JoinResultPayload,
    config: NetworkConfig,
    now: int,
) -> tuple[int, list[Message]]:
    """Leader half, step two: accept the candidate's challenge verdict.

    Returns the joining fee in half-coins (debited from the candidate by
    the caller) plus the approval broadcast to every known edge.
    Raises FailedChallengeError on a wrong verdict.
    """
    pending = state.pending_joins.pop(candidate, None)
    if pending is None:
        raise ConsensusError("no pending challenge for this candidate")
    expected_c_hash, registration = pending
    if not result.verdict or result.c_hash != expected_c_hash:
        raise FailedChallengeError(f"candidate {candidate.short} returned a wrong verdict")
    state.adjacency.add(candidate)
    state.last_heard[candidate] = now
    fee_halves = 2 * config.join_fee
    state.half_coins += fee_halves
    broadcast = LeaderBroadcastPayload(
        topic="node-approved", candidate=candidate, registration=registration
    )
    outbound = [
        Message(MessageKind.LEADER_BROADCAST, state.id, peer, broadcast, now)
        for peer in state.known_edges
        if peer != state.id and peer != candidate
    ]
    return fee_halves, outbound


def handle_leader_broadcast(
    state: NodeState, src: NodeId, payload: LeaderBroadcastPayload, now: int
) -> None:
    if payload.topic == "leader-elected":
        state.phase = Phase.STEADY
        state.current_leaders = frozenset(payload.leaders)
        state.max_atw = payload.max_score
        state.role = Role.LEADER if state.id in state.current_leaders else Role.EDGE
        return
    if payload.topic == "node-approved":
        candidate = payload.candidate
        if candidate is None or candidate == state.id:
            return
        if not verify_registration(candidate.digest, payload.registration):
            return
        approvals = state.join_approvals.setdefault(candidate, set())
        approvals.add(src)
        known = max(1, len(state.current_leaders))
        if len(approvals) > known / 2 and candidate not in state.suspects:
            state.adjacency.add(candidate)
            state.last_heard.setdefault(candidate, now)


# ---------------------------------------------------------------------------
# ATW gossip and failure detection
# ---------------------------------------------------------------------------


def atw_gossip_tick(
    state: NodeState, now: int, config: NetworkConfig
) -> list[Message]:
    """Periodic trust-table share plus silence detection.

    Shares this node's fresh record with its adjacency, then removes any
    peer whose last share is older than the timeout and announces it as
    faulty to the remaining peers.
    """
    record = state.own_record(now)
    state.atw_table[state.id] = record
    outbound = [
        Message(MessageKind.ATW_SHARE, state.id, peer, AtwSharePayload(record), now)
        for peer in state.sorted_adjacency()
    ]
    newly_faulty = [
        peer
        for peer in state.sorted_adjacency()
        if now - state.last_heard.get(peer, state.joined_at) > config.atw_timeout
    ]
    for peer in newly_faulty:
        state.adjacency.discard(peer)
        state.dead_marked.add(peer)
    for peer in newly_faulty:
        for target in state.sorted_adjacency():
            outbound.append(
                Message(
                    MessageKind.FAULTY_ANNOUNCEMENT,
                    state.id,
                    target,
                    FaultyPayload(peer),
                    now,
                )
            )
    return outbound


def handle_atw_share(state: NodeState, src: NodeId, record: AtwRecord, now: int) -> None:
    if src in state.suspects:
        return
    state.last_heard[src] = now
    previous = state.atw_table.get(src)
    if previous is None or record.timestamp >= previous.timestamp:
        state.atw_table[src] = record
    if src in state.dead_marked:
        # the peer recovered; resume trusting it
        state.dead_marked.discard(src)
        state.adjacency.add(src)


def should_drop_message(state: NodeState, msg: Message) -> bool:
    """Honest nodes ignore traffic from suspects, and everything except a
    reviving trust share from peers they marked silent-faulty."""
    if msg.src in state.suspects:
        return True
    if msg.src in state.dead_marked and msg.kind is not MessageKind.ATW_SHARE:
        return True
    return False

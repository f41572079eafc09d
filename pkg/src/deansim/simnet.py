"""Seeded discrete-event network simulator.

All time is simulated integer milliseconds. Events are processed in
(fire_at, seq) order, so a (seed, config, workload, faults) tuple fully
determines the trace. The event loop is single threaded; parallel trials
own separate World instances.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

from .core import (
    AtwRecord,
    AtwWeights,
    Block,
    HollowBlock,
    NodeId,
    NodeKind,
    ZERO_HASH,
    atw_score,
    compute_block_hash,
    genesis_block,
    make_block,
    make_node_id,
    node_sort_key,
    quorum,
)
from .consensus import (
    AlreadyLockedError,
    AtwSharePayload,
    BadIdentityError,
    BlockProposalPayload,
    ConsensusError,
    DecisionPayload,
    FailedChallengeError,
    FaultyPayload,
    JoinChallengePayload,
    JoinRequestPayload,
    JoinResultPayload,
    LeaderBroadcastPayload,
    LockRegistry,
    Message,
    MessageKind,
    MissingParentError,
    NetworkConfig,
    NodeState,
    NoEligibleNodeError,
    Phase,
    RecoveryReplyPayload,
    RecoveryRequestPayload,
    RelocateAckPayload,
    RelocateBlockPayload,
    Role,
    TxnSubmitPayload,
    UnknownBlockError,
    acquire_block_lock,
    atw_gossip_tick,
    buffer_decision,
    build_network_on_decision,
    complete_join,
    consensus_validate,
    elect_leaders,
    handle_atw_share,
    handle_leader_broadcast,
    approve_new_node,
    leader_eligible,
    rereplicate,
    replica_receive_block,
    should_drop_message,
    structurally_valid,
    verify_block_phase1,
)
from .storage import (
    BadAckError,
    DiskGauge,
    NoEligibleNeighborError,
    StorageError,
    disseminate_oldest,
    finalize_dissemination,
    over_trigger,
    receive_relocated_block,
    restore_block,
    side_chain_lookup,
)
from .workload import WorkloadItem, WorkloadSpec, generate


class SimError(Exception):
    pass


class UnknownNodeError(SimError):
    pass


class EventStormError(SimError):
    """The event queue blew past its ceiling; a protocol livelock."""


# ---------------------------------------------------------------------------
# Topology and faults
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Topology:
    """Edge nodes form a full mesh; each sensor attaches to one edge."""

    edge_nodes: tuple[tuple[NodeId, tuple[float, float]], ...]
    sensor_nodes: tuple[tuple[NodeId, tuple[float, float], NodeId], ...]
    area_side: float

    def node_ids(self) -> frozenset[NodeId]:
        ids = {node for node, _ in self.edge_nodes}
        ids.update(node for node, _, _ in self.sensor_nodes)
        return frozenset(ids)


def build_topology(config: NetworkConfig, seed: int) -> Topology:
    rng = random.Random(seed ^ 0x70_70_70)
    side = config.area_side

    def place():
        return (round(rng.uniform(0, side), 3), round(rng.uniform(0, side), 3))

    edges = tuple(
        (make_node_id(NodeKind.EDGE, i), place()) for i in range(config.initial_edge_count)
    )
    sensors = []
    n_sensors = config.initial_edge_count * config.sensor_edge_ratio
    for j in range(n_sensors):
        node = make_node_id(NodeKind.SENSOR, j)
        loc = place()
        attached = min(
            edges, key=lambda e: (math.hypot(e[1][0] - loc[0], e[1][1] - loc[1]), e[0].digest)
        )[0]
        sensors.append((node, loc, attached))
    return Topology(edge_nodes=edges, sensor_nodes=tuple(sensors), area_side=side)


@dataclass(frozen=True)
class SilentFault:
    target: NodeId
    start: int = 0


@dataclass(frozen=True)
class RestartFault:
    target: NodeId
    at: int
    down_for: int


@dataclass(frozen=True)
class ByzantineFlipFault:
    target: NodeId
    probability: float = 1.0
    seed: int = 0


Fault = Union[SilentFault, RestartFault, ByzantineFlipFault]


@dataclass(frozen=True)
class SimEvent:
    fire_at: int
    seq: int
    kind: str           # "deliver" | "timer" | "inject"
    payload: object


def schedule_send(
    msg: Message,
    topology: Topology,
    config: NetworkConfig,
    now: int,
    rng: random.Random,
    seq: int = 0,
    membership: Optional[frozenset] = None,
) -> SimEvent:
    """Latency-stamp a message: base latency by link class plus uniform
    jitter from the seeded RNG. Raises UnknownNodeError for endpoints
    outside the topology."""
    known = membership if membership is not None else topology.node_ids()
    if msg.src not in known or msg.dst not in known:
        raise UnknownNodeError(f"{msg.src!r} -> {msg.dst!r}")
    if msg.src.kind is NodeKind.SENSOR or msg.dst.kind is NodeKind.SENSOR:
        base = config.link_latency_sensor_edge
    else:
        base = config.link_latency_edge_edge
    spread = round(base * config.jitter_frac)
    jitter = rng.randint(-spread, spread) if spread > 0 else 0
    return SimEvent(fire_at=now + base + jitter, seq=seq, kind="deliver", payload=msg)


def _payload_digest(kind: MessageKind, payload) -> str:
    if isinstance(payload, BlockProposalPayload):
        return payload.block.c_hash.hex()[:16]
    if isinstance(payload, DecisionPayload):
        return payload.c_hash.hex()[:12] + (":1" if payload.verdict else ":0")
    if isinstance(payload, AtwSharePayload):
        return payload.record.node_id.short
    if isinstance(payload, RelocateBlockPayload):
        return payload.block.c_hash.hex()[:16]
    if isinstance(payload, RelocateAckPayload):
        ok = "1" if payload.relocated_hash else "0"
        return payload.c_hash.hex()[:12] + ":" + ok
    if isinstance(payload, (RecoveryRequestPayload, RecoveryReplyPayload)):
        return payload.c_hash.hex()[:16]
    if isinstance(payload, FaultyPayload):
        return payload.suspect.short
    if isinstance(payload, LeaderBroadcastPayload):
        return payload.topic
    if isinstance(payload, TxnSubmitPayload):
        return payload.txn.txn_id.hex()[:16]
    if isinstance(payload, (JoinRequestPayload,)):
        return payload.candidate.short
    if isinstance(payload, JoinChallengePayload):
        return payload.block.c_hash.hex()[:16]
    if isinstance(payload, JoinResultPayload):
        return payload.c_hash.hex()[:12]
    return kind.value


class TraceCollector:
    """Per-event trace records: (simTime, nodeId, eventKind, payloadDigest).

    level "full" records every handled event plus lifecycle records;
    "lifecycle" keeps only protocol lifecycle records (locks, commits,
    aborts, faults) that the invariant checkers need.
    """

    SCHEMA = "dean-trace/1"

    def __init__(self, level: str = "full"):
        if level not in ("full", "lifecycle"):
            raise ValueError(f"unknown trace level {level!r}")
        self.level = level
        self.records: list[tuple[int, str, str, str]] = []

    def event(self, t: int, node: str, kind: str, digest: str) -> None:
        if self.level == "full":
            self.records.append((t, node, kind, digest))

    def lifecycle(self, t: int, node: str, kind: str, digest: str) -> None:
        self.records.append((t, node, kind, digest))

    def to_jsonl(self, header: Optional[dict] = None) -> str:
        lines = []
        head = {"schema": self.SCHEMA}
        if header:
            head.update(header)
        lines.append(json.dumps(head, sort_keys=True, separators=(",", ":")))
        for t, node, kind, digest in self.records:
            lines.append(
                json.dumps(
                    {"simTime": t, "nodeId": node, "eventKind": kind, "payloadDigest": digest},
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# The world
# ---------------------------------------------------------------------------


class World:
    """Full simulation state: nodes, queue, lock registry, fault status,
    the shared transaction pool, and the block dispatcher."""

    def __init__(
        self,
        config: NetworkConfig,
        workload_spec: Optional[WorkloadSpec] = None,
        *,
        seed: int = 0,
        weights: Optional[AtwWeights] = None,
        trace_level: str = "lifecycle",
    ):
        self.config = config
        self.seed = seed
        self.weights = weights or AtwWeights()
        self.topology = build_topology(config, seed)
        self.trace = TraceCollector(trace_level)
        self.registry = LockRegistry()
        self.rng = random.Random(seed ^ 0x5EED)
        self.clock = 0
        self.processed = 0
        self._queue: list[tuple[int, int, str, object]] = []
        self._seq = 0

        self.genesis = genesis_block()
        self.edge_ids: list[NodeId] = [node for node, _ in self.topology.edge_nodes]
        self.locs: dict[NodeId, tuple[float, float]] = {
            node: loc for node, loc in self.topology.edge_nodes
        }
        self.locs.update({node: loc for node, loc, _ in self.topology.sensor_nodes})
        self.attached: dict[NodeId, NodeId] = {
            node: edge for node, _, edge in self.topology.sensor_nodes
        }
        self._membership = set(self.locs)

        known = tuple(sorted(self.edge_ids, key=node_sort_key))
        cap_rng = random.Random(seed ^ 0xD15C)
        self.nodes: dict[NodeId, NodeState] = {}
        for node in self.edge_ids:
            jitter = config.disk_jitter_frac
            capacity = max(4, round(config.disk_capacity_slots * (1 + jitter * (cap_rng.random() * 2 - 1))))
            state = NodeState(
                id=node,
                loc=self.locs[node],
                known_edges=known,
                disk_capacity=capacity,
            )
            state.append_block(self.genesis)
            self.nodes[node] = state

        # block pipeline
        self.txn_pool: deque = deque()
        self.assembler_tip: bytes = self.genesis.c_hash
        self.blocks_by_hash: dict[bytes, Block] = {}
        self.block_order: list[bytes] = []
        self.pending_blocks: deque = deque()
        self._pending_set: set[bytes] = set()
        self.assigned: dict[bytes, NodeId] = {}
        self.attempts: dict[bytes, int] = {}
        self.holders: dict[bytes, set[NodeId]] = {self.genesis.c_hash: set(self.edge_ids)}
        self.committed: set[bytes] = {self.genesis.c_hash}
        self.dropped: set[bytes] = set()
        self.lock_time: dict[bytes, int] = {}
        self.commit_time: dict[bytes, int] = {}
        self.committed_txns = 0
        self.outstanding_blocks = 0
        self.remaining_txn_deliveries = 0
        self._rr = 0
        self._dispatch_retry_pending = False
        self._dispatch_stalls = 0

        # leadership
        self.phase = Phase.BUILDING
        self.leaders: frozenset[NodeId] = frozenset()
        self.max_atw = 0.0
        self.steady_since: Optional[int] = None
        self.last_gossip_emitted: dict[NodeId, int] = {}

        # faults
        self.silent_from: dict[NodeId, int] = {}
        self.down_until: dict[NodeId, int] = {}
        self.byz: dict[NodeId, tuple[float, random.Random]] = {}

        self.joined_nodes: set[NodeId] = set()
        self.candidate_registrations: dict[NodeId, bytes] = {}

        if workload_spec is not None:
            self.load_workload(workload_spec)
        for node in self.edge_ids:
            self._push_timer(config.atw_share_period, ("gossip", node))
        self._push_timer(config.atw_share_period, ("election",))

    # -- plumbing -----------------------------------------------------------

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _push(self, fire_at: int, kind: str, payload) -> None:
        heapq.heappush(self._queue, (fire_at, self._next_seq(), kind, payload))

    def _push_timer(self, fire_at: int, tag: tuple) -> None:
        self._push(fire_at, "timer", tag)

    def node_down(self, node: NodeId, t: Optional[int] = None) -> bool:
        t = self.clock if t is None else t
        if node in self.silent_from and t >= self.silent_from[node]:
            return True
        until = self.down_until.get(node)
        return until is not None and t < until

    def flip_decision(self, node: NodeId) -> bool:
        fault = self.byz.get(node)
        if fault is None:
            return False
        probability, rng = fault
        if probability >= 1.0:
            return True
        return rng.random() < probability

    def view_alive(self, node: NodeId) -> bool:
        """Liveness as the network perceives it: a node is presumed alive
        until its trust shares have been silent past the timeout."""
        last = self.last_gossip_emitted.get(node, 0)
        return self.clock - last <= self.config.atw_timeout

    def active(self) -> bool:
        return self.remaining_txn_deliveries > 0 or self.outstanding_blocks > 0

    def send_batch(self, src: NodeId, msgs: Sequence[Message]) -> int:
        """Queue a handler's outbound messages with per-message send
        serialization. Down and silent nodes emit nothing."""
        if self.node_down(src):
            return 0
        for k, msg in enumerate(msgs):
            depart = self.clock + k * self.config.send_overhead_ms
            ev = schedule_send(
                msg, self.topology, self.config, depart, self.rng,
                seq=self._next_seq(), membership=self._membership,
            )
            heapq.heappush(self._queue, (ev.fire_at, ev.seq, "deliver", msg))
        return len(msgs)

    def load_workload(self, spec: WorkloadSpec) -> list[WorkloadItem]:
        items = generate(spec, self.topology)
        for item in items:
            msg = Message(
                MessageKind.TXN_SUBMIT,
                item.sensor,
                self.attached[item.sensor],
                TxnSubmitPayload(item.txn),
                sent_at=item.issue_at,
            )
            ev = schedule_send(
                msg, self.topology, self.config, item.issue_at, self.rng,
                seq=self._next_seq(), membership=self._membership,
            )
            heapq.heappush(self._queue, (ev.fire_at, ev.seq, "deliver", msg))
        self.remaining_txn_deliveries += len(items)
        return items

    def inject_faults(self, plan: Iterable[Fault]) -> None:
        for fault in plan:
            if isinstance(fault, SilentFault):
                if fault.target not in self.nodes:
                    raise UnknownNodeError(repr(fault.target))
                self._push(max(fault.start, self.clock), "inject", fault)
            elif isinstance(fault, RestartFault):
                if fault.target not in self.nodes:
                    raise UnknownNodeError(repr(fault.target))
                self._push(max(fault.at, self.clock), "inject", fault)
            elif isinstance(fault, ByzantineFlipFault):
                if fault.target not in self.nodes:
                    raise UnknownNodeError(repr(fault.target))
                self._push(self.clock, "inject", fault)
            else:
                raise SimError(f"unknown fault {fault!r}")

    # -- event loop ----------------------------------------------------------

    def run_until(
        self,
        stop_at: Optional[int] = None,
        boundary_hook: Optional[Callable[["World", int], None]] = None,
    ) -> TraceCollector:
        """Process events in total order until the queue is empty or the
        clock would pass stop_at. Raises EventStormError when the queue
        exceeds the configured ceiling."""
        if stop_at is not None and stop_at < self.clock:
            raise SimError("stop_at precedes the current clock")
        while self._queue:
            if len(self._queue) > self.config.event_ceiling:
                raise EventStormError(f"{len(self._queue)} events queued")
            fire_at = self._queue[0][0]
            if stop_at is not None and fire_at > stop_at:
                break
            fire_at, _, kind, payload = heapq.heappop(self._queue)
            self.clock = max(self.clock, fire_at)
            if kind == "deliver":
                self._handle_deliver(payload)
            elif kind == "timer":
                self._handle_timer(payload)
            else:
                self._handle_inject(payload)
            self.processed += 1
            if boundary_hook is not None:
                boundary_hook(self, self.processed)
        return self.trace

    # -- fault handling -----------------------------------------------------

    def _handle_inject(self, fault: Fault) -> None:
        if isinstance(fault, SilentFault):
            self.trace.lifecycle(self.clock, fault.target.short, "fault-silent", "")
            self.silent_from[fault.target] = self.clock
            self._on_node_down(fault.target)
        elif isinstance(fault, RestartFault):
            self.trace.lifecycle(self.clock, fault.target.short, "fault-restart", str(fault.down_for))
            self.down_until[fault.target] = self.clock + fault.down_for
            self._on_node_down(fault.target)
            self._push_timer(self.clock + fault.down_for, ("restart-up", fault.target))
        elif isinstance(fault, ByzantineFlipFault):
            self.trace.lifecycle(self.clock, fault.target.short, "fault-byz", f"{fault.probability}")
            self.byz[fault.target] = (fault.probability, random.Random(fault.seed))

    def _on_node_down(self, target: NodeId) -> None:
        state = self.nodes[target]
        released = self.registry.clear_holder(target)
        state.clear_volatile()
        for c_hash in released:
            self.trace.lifecycle(self.clock, target.short, "abort", c_hash.hex()[:16])
            self._requeue(c_hash)
        for c_hash, who in list(self.assigned.items()):
            if who == target and c_hash not in self.committed:
                self.trace.lifecycle(self.clock, target.short, "abort", c_hash.hex()[:16])
                self._requeue(c_hash)

    # -- dispatcher ----------------------------------------------------------

    def _resolved(self, c_hash: bytes) -> bool:
        return c_hash in self.committed or c_hash in self.dropped

    def _requeue(self, c_hash: bytes) -> None:
        if self._resolved(c_hash) or c_hash in self._pending_set:
            self.assigned.pop(c_hash, None)
            return
        self.assigned.pop(c_hash, None)
        self.attempts[c_hash] = self.attempts.get(c_hash, 0) + 1
        if self.attempts[c_hash] > self.config.stall_retry_limit:
            self.dropped.add(c_hash)
            self.outstanding_blocks -= 1
            self.trace.lifecycle(self.clock, "world", "stall-drop", c_hash.hex()[:16])
            return
        self.pending_blocks.append(self.blocks_by_hash[c_hash])
        self._pending_set.add(c_hash)
        self.trace.lifecycle(self.clock, "world", "requeue", c_hash.hex()[:16])
        self._dispatch()

    def _leader_rotation(self) -> list[NodeId]:
        return [n for n in sorted(self.leaders, key=node_sort_key) if self.view_alive(n)]

    def _dispatch(self) -> None:
        if self.phase is Phase.BUILDING:
            return
        rotation = self._leader_rotation()
        if not rotation:
            if self.pending_blocks and not self._dispatch_retry_pending:
                self._dispatch_stalls += 1
                if self._dispatch_stalls > self.config.stall_retry_limit:
                    while self.pending_blocks:
                        block = self.pending_blocks.popleft()
                        self._pending_set.discard(block.c_hash)
                        if not self._resolved(block.c_hash):
                            self.dropped.add(block.c_hash)
                            self.outstanding_blocks -= 1
                            self.trace.lifecycle(
                                self.clock, "world", "stall-drop", block.c_hash.hex()[:16]
                            )
                    return
                self._dispatch_retry_pending = True
                self._push_timer(self.clock + self.config.atw_share_period, ("dispatch-retry",))
            return
        self._dispatch_stalls = 0
        while self.pending_blocks:
            block = self.pending_blocks.popleft()
            self._pending_set.discard(block.c_hash)
            if self._resolved(block.c_hash) or block.c_hash in self.assigned:
                continue
            leader = rotation[self._rr % len(rotation)]
            self._rr += 1
            self.assigned[block.c_hash] = leader
            self.trace.lifecycle(self.clock, leader.short, "dispatch", block.c_hash.hex()[:16])
            self._deliver_assignment(block, leader)

    def _deliver_assignment(self, block: Block, leader: NodeId) -> None:
        if block.creator == leader:
            self._push_timer(self.clock + self.config.send_overhead_ms, ("self-assign", leader, block))
            return
        msg = Message(
            MessageKind.BLOCK_PROPOSAL,
            block.creator,
            leader,
            BlockProposalPayload(block),
            self.clock,
        )
        if self.send_batch(block.creator, [msg]) == 0:
            self._bounce(block.c_hash)  # creator is down; the queue retries

    def _bounce(self, c_hash: bytes) -> None:
        """A mining assignment could not reach its leader; retry after the
        probe timeout (models heartbeat detection of lost work)."""
        self.trace.lifecycle(self.clock, "world", "bounce", c_hash.hex()[:16])
        self._push_timer(self.clock + self.config.probe_timeout_ms, ("rebound", c_hash))

    # -- assembly ------------------------------------------------------------

    def _try_assemble(self, creator: NodeId) -> None:
        tpb = self.config.txns_per_block
        while len(self.txn_pool) >= tpb:
            batch = [self.txn_pool.popleft() for _ in range(tpb)]
            block = make_block(self.assembler_tip, self.clock, batch, creator)
            self.assembler_tip = block.c_hash
            self.blocks_by_hash[block.c_hash] = block
            self.block_order.append(block.c_hash)
            self.holders.setdefault(block.c_hash, set())
            self.outstanding_blocks += 1
            self.trace.lifecycle(self.clock, creator.short, "assembled", block.c_hash.hex()[:16])
            self._push_timer(
                self.clock + 10 * self.config.probe_timeout_ms,
                ("progress-check", block.c_hash, self.attempts.get(block.c_hash, 0)),
            )
            if self.phase is Phase.BUILDING:
                self._flood_building_block(block, creator)
            else:
                self.pending_blocks.append(block)
                self._pending_set.add(block.c_hash)
        if self.pending_blocks:
            self._dispatch()

    def _flood_building_block(self, block: Block, creator: NodeId) -> None:
        msgs = [
            Message(MessageKind.BLOCK_PROPOSAL, creator, node, BlockProposalPayload(block), self.clock)
            for node in sorted(self.edge_ids, key=node_sort_key)
            if node != creator
        ]
        self.send_batch(creator, msgs)
        self._push_timer(self.clock + self.config.send_overhead_ms, ("self-flood", creator, block))

    # -- deliver handlers ----------------------------------------------------

    def _handle_deliver(self, msg: Message) -> None:
        self.trace.event(self.clock, msg.dst.short, msg.kind.value, _payload_digest(msg.kind, msg.payload))
        if msg.dst not in self.nodes:
            return  # sensors consume nothing in this model
        if self.node_down(msg.dst):
            if msg.kind is MessageKind.TXN_SUBMIT:
                self.remaining_txn_deliveries -= 1
            elif msg.kind is MessageKind.BLOCK_PROPOSAL and not msg.payload.stamped:
                self._bounce(msg.payload.block.c_hash)
            return
        state = self.nodes[msg.dst]
        if should_drop_message(state, msg):
            return

        kind = msg.kind
        if kind is MessageKind.TXN_SUBMIT:
            self.remaining_txn_deliveries -= 1
            self.txn_pool.append(msg.payload.txn)
            self._try_assemble(msg.dst)
        elif kind is MessageKind.BLOCK_PROPOSAL:
            self._on_block_proposal(state, msg)
        elif kind is MessageKind.VALIDATION_DECISION:
            self._on_decision(state, msg)
        elif kind is MessageKind.ATW_SHARE:
            handle_atw_share(state, msg.src, msg.payload.record, self.clock)
        elif kind is MessageKind.LEADER_BROADCAST:
            handle_leader_broadcast(state, msg.src, msg.payload, self.clock)
        elif kind is MessageKind.FAULTY_ANNOUNCEMENT:
            pass  # informational; local timers drive each node's own marking
        elif kind is MessageKind.RELOCATE_BLOCK:
            self._on_relocate_block(state, msg)
        elif kind is MessageKind.RELOCATE_ACK:
            self._on_relocate_ack(state, msg)
        elif kind is MessageKind.RECOVERY_REQUEST:
            self._on_recovery_request(state, msg)
        elif kind is MessageKind.RECOVERY_REPLY:
            self._on_recovery_reply(state, msg)
        elif kind is MessageKind.JOIN_REQUEST:
            self._on_join_request(state, msg)
        elif kind is MessageKind.JOIN_CHALLENGE:
            self._on_join_challenge(state, msg)
        elif kind is MessageKind.JOIN_RESULT:
            self._on_join_result(state, msg)

    def _on_block_proposal(self, state: NodeState, msg: Message) -> None:
        payload: BlockProposalPayload = msg.payload
        if payload.stamped:
            self._replica_append(state, payload.block, msg.src)
        elif state.phase is Phase.BUILDING:
            self._building_block(state, payload.block)
        else:
            self._on_assignment(state.id, payload.block)

    def _building_block(self, state: NodeState, block: Block) -> None:
        worklist = [block]
        while worklist:
            blk = worklist.pop(0)
            if blk.c_hash in state.own_decisions:
                continue
            tip = state.tip
            if (
                tip is not None
                and blk.p_hash != tip.c_hash
                and blk.p_hash not in state.chain_index
                and structurally_valid(blk)
            ):
                state.orphans.setdefault(blk.p_hash, []).append(blk)
                continue
            flip = self.flip_decision(state.id)
            _, outbound = verify_block_phase1(state, blk, self.clock, flip)
            self.send_batch(state.id, outbound)
            if state.has_block(blk.c_hash):
                self._on_append(state.id, blk.c_hash)
                worklist.extend(state.orphans.pop(blk.c_hash, []))
        self._maybe_first_election(state)

    def _on_decision(self, state: NodeState, msg: Message) -> None:
        # processed in both phases: nodes below quorum adjacency keep
        # growing it while leaders already validate new blocks
        payload: DecisionPayload = msg.payload
        try:
            build_network_on_decision(state, msg.src, payload.c_hash, payload.verdict, self.clock)
        except UnknownBlockError:
            if state.phase is Phase.BUILDING:
                buffer_decision(state, msg.src, payload.c_hash, payload.verdict)
            return
        self._maybe_first_election(state)

    def _replica_append(self, state: NodeState, block: Block, src: NodeId) -> None:
        flip = self.flip_decision(state.id)
        appended = replica_receive_block(state, block, src, self.clock, flip)
        for c_hash in appended:
            self._on_append(state.id, c_hash)
        if appended:
            self._drain_held(state)
        self._check_disk(state.id)

    def _on_assignment(self, leader_id: NodeId, block: Block) -> None:
        state = self.nodes[leader_id]
        c_hash = block.c_hash
        if self._resolved(c_hash):
            self.assigned.pop(c_hash, None)
            return
        if state.phase is not Phase.STEADY or state.role is not Role.LEADER:
            self._bounce(c_hash)
            return
        if state.has_block(c_hash):
            # aborted mid-replication earlier; push the stored copy again
            outbound = rereplicate(state, c_hash, self.clock)
            self.trace.lifecycle(self.clock, leader_id.short, "rereplicate", c_hash.hex()[:16])
            self.send_batch(leader_id, outbound)
            self._push_timer(self.clock + self.config.probe_timeout_ms, ("commit-check", c_hash, leader_id))
            return
        if block.p_hash not in state.chain_index:
            state.held.setdefault(block.p_hash, []).append(block)
            self.trace.lifecycle(self.clock, leader_id.short, "held", c_hash.hex()[:16])
            return
        try:
            acquire_block_lock(state, block, self.clock, self.registry)
        except AlreadyLockedError:
            self.trace.lifecycle(self.clock, leader_id.short, "lock-denied", c_hash.hex()[:16])
            if self.assigned.get(c_hash) == leader_id:
                self.assigned.pop(c_hash, None)
            return
        self.trace.lifecycle(self.clock, leader_id.short, "lock", c_hash.hex()[:16])
        self.lock_time.setdefault(c_hash, self.clock)
        state.inflight[c_hash] = block
        self._push_timer(self.clock + self.config.validate_delay_ms, ("validate", leader_id, c_hash))

    def _validate_now(self, leader_id: NodeId, c_hash: bytes) -> None:
        state = self.nodes[leader_id]
        if c_hash not in state.pending_locks or c_hash not in state.inflight:
            return
        block = state.inflight.pop(c_hash)
        flip = self.flip_decision(leader_id)
        try:
            ok, outbound = consensus_validate(state, block, self.clock, self.registry, flip)
        except MissingParentError as exc:
            self.trace.lifecycle(self.clock, leader_id.short, "missing-parent", exc.parent_c_hash.hex()[:16])
            state.held_for_recovery.setdefault(exc.parent_c_hash, []).append(block)
            self._start_recovery(leader_id, exc.parent_c_hash)
            return
        if ok:
            self.trace.lifecycle(self.clock, leader_id.short, "mined", c_hash.hex()[:16])
            self.trace.lifecycle(self.clock, leader_id.short, "reward", "2")
            self._on_append(leader_id, c_hash)
            self.send_batch(leader_id, outbound)
            self._check_disk(leader_id)
            self._drain_held(state)
        else:
            self.trace.lifecycle(self.clock, leader_id.short, "abort", c_hash.hex()[:16])
            self.trace.lifecycle(self.clock, leader_id.short, "release", c_hash.hex()[:16])
            self._requeue(c_hash)

    def _drain_held(self, state: NodeState) -> None:
        ready = [ch for ch in state.held if ch in state.chain_index]
        for parent in ready:
            for child in state.held.pop(parent, []):
                self._on_assignment(state.id, child)

    def _on_append(self, node: NodeId, c_hash: bytes) -> None:
        self.trace.lifecycle(self.clock, node.short, "append", c_hash.hex()[:16])
        held = self.holders.setdefault(c_hash, set())
        held.add(node)
        if c_hash not in self.committed and len(held) >= quorum(len(self.edge_ids)):
            self.committed.add(c_hash)
            self.commit_time[c_hash] = self.clock
            block = self.blocks_by_hash.get(c_hash)
            if block is not None:
                self.committed_txns += len(block.txn_list)
                self.outstanding_blocks -= 1
            self.assigned.pop(c_hash, None)
            self.trace.lifecycle(self.clock, "world", "commit", c_hash.hex()[:16])

    # -- memory balance -------------------------------------------------------

    def _check_disk(self, node: NodeId) -> None:
        state = self.nodes[node]
        if not over_trigger(state.used_slots, state.disk_capacity):
            return
        gauges = {
            peer: DiskGauge(capacity=max(rec.disk, 0), used=0)
            for peer, rec in state.atw_table.items()
            if peer != node
        }
        try:
            outbound = disseminate_oldest(state, gauges, self.clock)
        except NoEligibleNeighborError:
            self.trace.lifecycle(self.clock, node.short, "capacity-alarm", str(state.used_slots))
            return
        for msg in outbound:
            self.trace.lifecycle(
                self.clock, node.short, "reloc-sent", msg.payload.block.c_hash.hex()[:16]
            )
        self.send_batch(node, outbound)

    def _on_relocate_block(self, state: NodeState, msg: Message) -> None:
        block = msg.payload.block
        try:
            ack = receive_relocated_block(state, block, msg.src, self.clock)
            self.trace.lifecycle(self.clock, state.id.short, "reloc-stored", block.c_hash.hex()[:16])
        except StorageError:
            self.trace.lifecycle(self.clock, state.id.short, "reloc-reject", block.c_hash.hex()[:16])
            ack = RelocateAckPayload(block.c_hash, None, state.id, self.clock)
        reply = Message(MessageKind.RELOCATE_ACK, state.id, msg.src, ack, self.clock)
        self.send_batch(state.id, [reply])
        self._check_disk(state.id)

    def _on_relocate_ack(self, state: NodeState, msg: Message) -> None:
        ack: RelocateAckPayload = msg.payload
        if ack.relocated_hash is None:
            state.relocating.discard(ack.c_hash)
            return
        try:
            pay = finalize_dissemination(state, ack, ack.holder)
        except StorageError:
            self.trace.lifecycle(self.clock, state.id.short, "reloc-badack", ack.c_hash.hex()[:16])
            return
        holder_state = self.nodes.get(ack.holder)
        if pay and holder_state is not None:
            holder_state.half_coins += pay
        self.trace.lifecycle(self.clock, state.id.short, "reloc-final", ack.c_hash.hex()[:16])

    def _start_recovery(self, node: NodeId, c_hash: bytes) -> None:
        state = self.nodes[node]
        if c_hash in state.recovery:
            return
        idx = state.chain_index.get(c_hash)
        entry = state.chain[idx] if idx is not None else None
        if not isinstance(entry, HollowBlock):
            return
        state.recovery[c_hash] = 0
        self.trace.lifecycle(self.clock, node.short, "recover-start", c_hash.hex()[:16])
        self._send_recovery_request(node, c_hash, 0)

    def _send_recovery_request(self, node: NodeId, c_hash: bytes, attempt: int) -> None:
        state = self.nodes[node]
        entry = state.chain[state.chain_index[c_hash]]
        pointers = entry.r_list
        holder = pointers[attempt].holder
        msg = Message(MessageKind.RECOVERY_REQUEST, node, holder, RecoveryRequestPayload(c_hash), self.clock)
        self.send_batch(node, [msg])
        self._push_timer(self.clock + self.config.probe_timeout_ms, ("recover-retry", node, c_hash, attempt))

    def _advance_recovery(self, node: NodeId, c_hash: bytes, failed_attempt: int) -> None:
        state = self.nodes[node]
        if state.recovery.get(c_hash) != failed_attempt:
            return
        entry = state.chain[state.chain_index[c_hash]]
        nxt = failed_attempt + 1
        if nxt >= len(entry.r_list):
            state.recovery.pop(c_hash, None)
            self.trace.lifecycle(self.clock, node.short, "unrecoverable", c_hash.hex()[:16])
            for child in state.held_for_recovery.pop(c_hash, []):
                self.registry.release(child.c_hash, node)
                state.pending_locks.discard(child.c_hash)
                state.lock_stamps.pop(child.c_hash, None)
                self.trace.lifecycle(self.clock, node.short, "abort", child.c_hash.hex()[:16])
                self._requeue(child.c_hash)
            return
        state.recovery[c_hash] = nxt
        self._send_recovery_request(node, c_hash, nxt)

    def _on_recovery_request(self, state: NodeState, msg: Message) -> None:
        c_hash = msg.payload.c_hash
        block = side_chain_lookup(state, c_hash) or state.full_block(c_hash)
        blocks = (block,) if block is not None else ()
        reply = Message(MessageKind.RECOVERY_REPLY, state.id, msg.src, RecoveryReplyPayload(c_hash, blocks), self.clock)
        self.send_batch(state.id, [reply])

    def _on_recovery_reply(self, state: NodeState, msg: Message) -> None:
        payload: RecoveryReplyPayload = msg.payload
        if payload.c_hash == ZERO_HASH:
            self._adopt_chain_sync(state, payload.blocks)
            return
        attempt = state.recovery.get(payload.c_hash)
        if attempt is None:
            return
        good = next(
            (b for b in payload.blocks if compute_block_hash(b) == payload.c_hash), None
        )
        if good is None:
            self._advance_recovery(state.id, payload.c_hash, attempt)
            return
        try:
            restore_block(state, good)
        except StorageError:
            self.trace.lifecycle(self.clock, state.id.short, "recover-nospace", payload.c_hash.hex()[:16])
            state.recovery.pop(payload.c_hash, None)
            return
        state.recovery.pop(payload.c_hash, None)
        self.trace.lifecycle(self.clock, state.id.short, "recover-ok", payload.c_hash.hex()[:16])
        for child in state.held_for_recovery.pop(payload.c_hash, []):
            if child.c_hash in state.pending_locks:
                state.inflight[child.c_hash] = child
                self._push_timer(
                    self.clock + self.config.validate_delay_ms,
                    ("validate", state.id, child.c_hash),
                )

    # -- joins ----------------------------------------------------------------

    def add_candidate(self, index: int, loc: tuple[float, float]) -> NodeId:
        """Create a prospective edge node (outside the quorum until a
        leader approves it) carrying the joining fee."""
        from .core import registration_record

        node = make_node_id(NodeKind.EDGE, index)
        if node in self.nodes:
            raise SimError("candidate index already used")
        state = NodeState(
            id=node,
            loc=loc,
            known_edges=tuple(sorted(self.edge_ids, key=node_sort_key)),
            disk_capacity=self.config.disk_capacity_slots,
            phase=Phase.STEADY,
            joined_at=self.clock,
        )
        state.append_block(self.genesis)
        state.half_coins = 2 * self.config.join_fee
        state.current_leaders = self.leaders
        self.nodes[node] = state
        self.locs[node] = loc
        self._membership.add(node)
        self.candidate_registrations[node] = registration_record(NodeKind.EDGE, index)
        return node

    def request_join(self, candidate: NodeId, forged_hash: Optional[bytes] = None) -> None:
        payload = JoinRequestPayload(
            candidate=candidate,
            node_hash=forged_hash if forged_hash is not None else candidate.digest,
            registration=self.candidate_registrations[candidate],
        )
        msgs = [
            Message(MessageKind.JOIN_REQUEST, candidate, leader, payload, self.clock)
            for leader in sorted(self.leaders, key=node_sort_key)
            if leader != candidate
        ]
        self.send_batch(candidate, msgs)

    def _on_join_request(self, state: NodeState, msg: Message) -> None:
        try:
            outbound = approve_new_node(state, msg.payload, self.clock)
        except (BadIdentityError, ConsensusError):
            self.trace.lifecycle(self.clock, state.id.short, "join-reject", msg.payload.candidate.short)
            return
        self.send_batch(state.id, outbound)

    def _on_join_challenge(self, state: NodeState, msg: Message) -> None:
        block = msg.payload.block
        verdict = structurally_valid(block)
        if self.flip_decision(state.id):
            verdict = not verdict
        reply = Message(
            MessageKind.JOIN_RESULT, state.id, msg.src, JoinResultPayload(block.c_hash, verdict), self.clock
        )
        self.send_batch(state.id, [reply])

    def _on_join_result(self, state: NodeState, msg: Message) -> None:
        candidate = msg.src
        if candidate not in state.pending_joins:
            return
        try:
            fee_halves, outbound = complete_join(
                state, candidate, msg.payload, self.config, self.clock
            )
        except (FailedChallengeError, ConsensusError):
            self.trace.lifecycle(self.clock, state.id.short, "join-reject", candidate.short)
            return
        cand_state = self.nodes[candidate]
        cand_state.half_coins -= fee_halves
        if candidate not in self.joined_nodes:
            self.joined_nodes.add(candidate)
            self.edge_ids.append(candidate)
        self.trace.lifecycle(self.clock, state.id.short, "join-ok", candidate.short)
        self.trace.lifecycle(self.clock, state.id.short, "fee", str(fee_halves))
        self.send_batch(state.id, outbound)
        sync_blocks = tuple(b for b in state.chain[1:] if isinstance(b, Block))
        if sync_blocks:
            sync = Message(
                MessageKind.RECOVERY_REPLY,
                state.id,
                candidate,
                RecoveryReplyPayload(ZERO_HASH, sync_blocks),
                self.clock,
            )
            self.send_batch(state.id, [sync])

    def _adopt_chain_sync(self, state: NodeState, blocks: tuple[Block, ...]) -> None:
        for block in blocks:
            if state.has_block(block.c_hash):
                continue
            tip = state.tip
            if tip is not None and block.p_hash == tip.c_hash and structurally_valid(block):
                if state.free_slots >= 1:
                    state.append_block(block)
                    self._on_append(state.id, block.c_hash)

    # -- timers ----------------------------------------------------------------

    def _handle_timer(self, tag: tuple) -> None:
        kind = tag[0]
        self.trace.event(self.clock, "world", "timer", kind)
        if kind == "gossip":
            node = tag[1]
            if not self.node_down(node):
                state = self.nodes[node]
                outbound = atw_gossip_tick(state, self.clock, self.config)
                announced = {m.payload.suspect for m in outbound if isinstance(m.payload, FaultyPayload)}
                for suspect in sorted(announced, key=node_sort_key):
                    self.trace.lifecycle(self.clock, node.short, "faulty-marked", suspect.short)
                self.send_batch(node, outbound)
                self.last_gossip_emitted[node] = self.clock
            if self.active():
                self._push_timer(self.clock + self.config.atw_share_period, ("gossip", node))
        elif kind == "election":
            self._run_election()
            if self.active():
                self._push_timer(self.clock + self.config.atw_share_period, ("election",))
        elif kind == "dispatch-retry":
            self._dispatch_retry_pending = False
            self._dispatch()
        elif kind == "validate":
            _, leader, c_hash = tag
            if not self.node_down(leader):
                self._validate_now(leader, c_hash)
        elif kind == "self-assign":
            _, leader, block = tag
            if not self.node_down(leader):
                self._on_assignment(leader, block)
            else:
                self._bounce(block.c_hash)
        elif kind == "self-flood":
            _, node, block = tag
            if self.node_down(node):
                self._bounce(block.c_hash)
            else:
                state = self.nodes[node]
                if state.phase is Phase.BUILDING:
                    self._building_block(state, block)
                else:
                    self._on_assignment(node, block)
        elif kind == "rebound":
            _, c_hash = tag
            if not self._resolved(c_hash):
                self._requeue(c_hash)
        elif kind == "progress-check":
            _, c_hash, attempts_then = tag
            if not self._resolved(c_hash):
                if self.attempts.get(c_hash, 0) == attempts_then and c_hash not in self._pending_set:
                    self.trace.lifecycle(self.clock, "world", "abort", c_hash.hex()[:16])
                    self._requeue(c_hash)
                self._push_timer(
                    self.clock + 10 * self.config.probe_timeout_ms,
                    ("progress-check", c_hash, self.attempts.get(c_hash, 0)),
                )
        elif kind == "commit-check":
            _, c_hash, leader = tag
            if not self._resolved(c_hash) and self.assigned.get(c_hash) == leader:
                self.trace.lifecycle(self.clock, "world", "abort", c_hash.hex()[:16])
                self._requeue(c_hash)
        elif kind == "recover-retry":
            _, node, c_hash, attempt = tag
            if not self.node_down(node):
                self._advance_recovery(node, c_hash, attempt)
        elif kind == "restart-up":
            node = tag[1]
            self.down_until.pop(node, None)
            self.trace.lifecycle(self.clock, node.short, "restart-up", "")
            self._push_timer(self.clock + 1, ("revive-share", node))
        elif kind == "revive-share":
            node = tag[1]
            if not self.node_down(node):
                state = self.nodes[node]
                outbound = atw_gossip_tick(state, self.clock, self.config)
                self.send_batch(node, outbound)
                self.last_gossip_emitted[node] = self.clock

    # -- elections ---------------------------------------------------------------

    def _maybe_first_election(self, state: NodeState) -> None:
        if self.phase is not Phase.BUILDING:
            return
        if leader_eligible(len(state.adjacency), self.config):
            self._run_election()

    def _run_election(self) -> None:
        records = [
            self.nodes[e].own_record(self.clock)
            for e in self.edge_ids
            if self.view_alive(e)
        ]
        try:
            new_leaders = elect_leaders(records, self.config, self.weights)
        except NoEligibleNodeError:
            return
        if new_leaders == self.leaders and self.phase is Phase.STEADY:
            return
        self.leaders = new_leaders
        by_id = {r.node_id: r for r in records}
        sample = by_id[next(iter(new_leaders))]
        self.max_atw = atw_score(sample, self.weights, self.config.initial_edge_count)
        first_steady = self.phase is Phase.BUILDING
        self.phase = Phase.STEADY
        if first_steady:
            self.steady_since = self.clock
        ordered = tuple(sorted(new_leaders, key=node_sort_key))
        self.trace.lifecycle(
            self.clock, "world", "leaders", ",".join(n.short for n in ordered)
        )
        origin = ordered[0]
        payload = LeaderBroadcastPayload(
            topic="leader-elected", leaders=ordered, max_score=self.max_atw
        )
        handle_leader_broadcast(self.nodes[origin], origin, payload, self.clock)
        msgs = [
            Message(MessageKind.LEADER_BROADCAST, origin, node, payload, self.clock)
            for node in sorted(self.edge_ids, key=node_sort_key)
            if node != origin
        ]
        self.send_batch(origin, msgs)
        self._dispatch()

    # -- reporting helpers ---------------------------------------------------------

    def commit_latencies_ms(self) -> list[int]:
        """Per-block lock-to-quorum-replication latency, mined blocks only."""
        return [
            self.commit_time[ch] - self.lock_time[ch]
            for ch in self.block_order
            if ch in self.commit_time and ch in self.lock_time
        ]

    def throughput_tps(self) -> float:
        if not self.commit_time or self.steady_since is None:
            return 0.0
        horizon = max(self.commit_time.values()) - self.steady_since
        if horizon <= 0:
            return 0.0
        return 1000.0 * self.committed_txns / horizon

    def chain_snapshot(self) -> dict[NodeId, list[bytes]]:
        return {node: [e.c_hash for e in self.nodes[node].chain] for node in self.edge_ids}

    def total_half_coins(self) -> int:
        return sum(state.half_coins for state in self.nodes.values())

    def dump_node_states(self) -> list[dict]:
        """Side-chain and hollow-block state per node, for postmortems."""
        out = []
        for node in self.edge_ids:
            state = self.nodes[node]
            hollow = [
                {"cHash": e.c_hash.hex(), "holders": [p.holder.hex for p in e.r_list]}
                for e in state.chain
                if isinstance(e, HollowBlock)
            ]
            out.append(
                {
                    "nodeId": node.hex,
                    "role": state.role.value,
                    "phase": state.phase.value,
                    "chainLength": len(state.chain),
                    "tip": state.tip.c_hash.hex() if state.tip else None,
                    "sideChain": [b.c_hash.hex() for b in state.side_chain],
                    "hollowBlocks": hollow,
                    "halfCoins": state.half_coins,
                    "adjacency": len(state.adjacency),
                    "usedSlots": state.used_slots,
                    "diskCapacity": state.disk_capacity,
                }
            )
        return out


def inject_faults(world: World, plan: Iterable[Fault]) -> World:
    world.inject_faults(plan)
    return world

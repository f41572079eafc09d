"""Synthetic key-value transaction generator and block assembly policy.

Transactions are YCSB-flavored synthetic records: sensor senders, edge
receivers drawn uniformly, seeded amounts from the key space. Contents
are opaque to the protocol; only structure is validated downstream.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, asdict
from typing import Iterator, Optional, Sequence

from .core import (
    Block,
    NodeId,
    NodeKind,
    Transaction,
    TxnKind,
    make_block,
    make_transaction,
)


@dataclass(frozen=True)
class WorkloadSpec:
    total_txns: int = 28_000       # desk-scale default, 1/100 of the full run
    txn_rate_per_sensor: float = 2.0   # transactions per simulated second
    txns_per_block: int = 12
    key_space: int = 1_000
    read_write_mix: float = 0.5    # recorded for reproducibility; contents synthetic
    seed: int = 0

    def __post_init__(self):
        if self.txns_per_block < 12:
            raise ValueError("blocks carry at least 12 transactions")
        if self.txn_rate_per_sensor <= 0 or self.txn_rate_per_sensor > 10_000:
            raise ValueError("per-sensor rate must be in (0, 10000] txn/s")


@dataclass(frozen=True)
class WorkloadItem:
    txn: Transaction
    issue_at: int      # simulated ms
    sensor: NodeId


def generate(spec: WorkloadSpec, topology) -> list[WorkloadItem]:
    """Deterministic transaction stream for a topology.

    Sensors issue round-robin at their configured rate; receivers are
    drawn uniformly from the edge nodes, amounts from the key space.
    Sorted by (issue time, sensor) so replay order is total.
    """
    sensors = [(node, loc) for node, loc, _ in topology.sensor_nodes]
    if not sensors:
        raise ValueError("topology has no sensors")
    edges = [node for node, _ in topology.edge_nodes]
    rng = random.Random(spec.seed ^ 0x9E3779B9)
    interval_ms = max(1, round(1000.0 / spec.txn_rate_per_sensor))

    items = []
    per_sensor_issued = [0] * len(sensors)
    for k in range(spec.total_txns):
        slot = k % len(sensors)
        sensor, loc = sensors[slot]
        issue_at = (per_sensor_issued[slot] + 1) * interval_ms
        per_sensor_issued[slot] += 1
        receiver = edges[rng.randrange(len(edges))]
        amount = rng.randrange(spec.key_space)
        txn = make_transaction(
            TxnKind.REGULAR, sensor, receiver, amount, loc, created_at=issue_at
        )
        items.append(WorkloadItem(txn, issue_at, sensor))
    items.sort(key=lambda it: (it.issue_at, it.sensor.digest, it.txn.txn_id))
    return items


def assemble_blocks(
    pending: deque,
    tip: Block,
    creator: NodeId,
    now: int,
    txns_per_block: int = 12,
) -> Optional[Block]:
    """Cut one block from the front of the pending queue when enough
    transactions are waiting; FIFO order, parent = the given tip."""
    if len(pending) < txns_per_block:
        return None
    batch = [pending.popleft() for _ in range(txns_per_block)]
    return make_block(tip.c_hash, now, batch, creator)


# ---------------------------------------------------------------------------
# Replay files: one JSON object per line for cross-run reproduction.
# ---------------------------------------------------------------------------


def dump_replay(items: Sequence[WorkloadItem], path: str) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(
                json.dumps(
                    {
                        "issueAt": it.issue_at,
                        "sensor": it.sensor.hex,
                        "txnId": it.txn.txn_id.hex(),
                        "receiver": it.txn.receiver.hex,
                        "amount": it.txn.amount,
                        "geo": list(it.txn.geo),
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )

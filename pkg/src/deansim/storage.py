"""Memory balancing: disk-pressure dissemination to side chains, hollow
block bookkeeping, reward splitting, and payload recovery."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

from .core import (
    Block,
    HollowBlock,
    NodeId,
    RelocationPointer,
    compute_block_hash,
    hollow_out,
    ownership_stamp,
)
from .consensus import (
    Message,
    MessageKind,
    NodeState,
    RelocateAckPayload,
    RelocateBlockPayload,
)

# Dissemination starts once this share of the disk is occupied.
OCCUPANCY_TRIGGER_PERCENT = 51


class StorageError(Exception):
    pass


class NoEligibleNeighborError(StorageError):
    """Every neighbor is full, unknown, or already holds this block."""


class NotRelocationError(StorageError):
    pass


class DuplicateSideBlockError(StorageError):
    pass


class BadSourceHashError(StorageError):
    pass


class NoDiskSpaceError(StorageError):
    pass


class BadAckError(StorageError):
    pass


class UnrecoverableError(StorageError):
    pass


@dataclass(frozen=True)
class DiskGauge:
    capacity: int
    used: int

    def __post_init__(self):
        if not 0 <= self.used <= self.capacity:
            raise ValueError("used slots out of range")

    @property
    def free(self) -> int:
        return self.capacity - self.used


def over_trigger(used: int, capacity: int) -> bool:
    return used * 100 >= OCCUPANCY_TRIGGER_PERCENT * capacity


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def disseminate_oldest(
    state: NodeState,
    neighbor_gauges: Mapping[NodeId, DiskGauge],
    now: int,
) -> list[Message]:
    """Push the oldest own-chain blocks toward the closest neighbors with
    free disk until occupancy falls back under the trigger.

    Neighbors already in a block's relocation list are skipped for that
    block, as is the genesis block. Relocations already in flight count as
    freed when deciding how many more to send. Raises
    NoEligibleNeighborError when pressure remains but nothing can move.
    """
    if not over_trigger(state.used_slots, state.disk_capacity):
        return []

    # oldest first; chain order breaks timestamp ties
    candidates = [
        entry
        for i, entry in enumerate(state.chain)
        if i > 0 and isinstance(entry, Block) and entry.c_hash not in state.relocating
    ]
    candidates.sort(key=lambda b: b.timestamp)

    free = {
        peer: gauge.free
        for peer, gauge in neighbor_gauges.items()
        if peer != state.id and peer in state.atw_table
    }
    projected = state.used_slots - len(state.relocating)
    outbound: list[Message] = []
    for block in candidates:
        if not over_trigger(projected, state.disk_capacity):
            break
        taken = {ptr.holder for ptr in block.r_list}
        eligible = [peer for peer, slots in free.items() if slots > 0 and peer not in taken]
        if not eligible:
            continue
        target = min(eligible, key=lambda p: (_distance(state.loc, state.atw_table[p].loc), p.digest))
        flagged = block.with_relocation_flag(True)
        outbound.append(
            Message(MessageKind.RELOCATE_BLOCK, state.id, target, RelocateBlockPayload(flagged), now)
        )
        state.relocating.add(block.c_hash)
        free[target] -= 1
        projected -= 1

    if not outbound and over_trigger(projected, state.disk_capacity):
        raise NoEligibleNeighborError(f"{state.id.short} cannot shed load")
    return outbound


def receive_relocated_block(
    state: NodeState, block: Block, src: NodeId, now: int
) -> RelocateAckPayload:
    """Store a relocated block on this node's side chain and return the
    receipt hash the sender will keep as a relocation pointer."""
    if not block.relocation_flag:
        raise NotRelocationError("block is not flagged for relocation")
    if block.c_hash in state.side_index:
        raise DuplicateSideBlockError(block.c_hash.hex())
    if compute_block_hash(block) != block.c_hash:
        raise BadSourceHashError("payload does not hash to the claimed c_hash")
    if state.free_slots < 1:
        raise NoDiskSpaceError(f"{state.id.short} has no free slot")
    relocated_hash = ownership_stamp(block.c_hash, state.id, now)
    state.side_index[block.c_hash] = len(state.side_chain)
    state.side_chain.append(block)
    state.b_list += 1
    return RelocateAckPayload(block.c_hash, relocated_hash, state.id, now)


def finalize_dissemination(
    state: NodeState, ack: RelocateAckPayload, holder: NodeId
) -> int:
    """Verify the holder's receipt, swap the local block for a hollow one,
    and split the block's mining reward.

    Returns the half-coins owed to the holder (the caller settles the
    transfer; a sender that never held the reward owes nothing). Raises
    BadAckError and keeps the payload when the receipt does not verify.
    """
    c_hash = ack.c_hash
    if ack.relocated_hash is None or ack.relocated_hash != ownership_stamp(
        c_hash, holder, ack.received_at
    ):
        state.relocating.discard(c_hash)
        raise BadAckError(f"receipt for {c_hash.hex()[:12]} does not verify")

    idx = state.chain_index.get(c_hash)
    if idx is None:
        state.relocating.discard(c_hash)
        raise StorageError("acked block is not on this chain")
    entry = state.chain[idx]
    if isinstance(entry, HollowBlock):
        state.relocating.discard(c_hash)
        return 0  # duplicate ack; payload already erased

    pointer = RelocationPointer(holder, ack.relocated_hash)
    hollow = hollow_out(entry.with_pointer(pointer))
    state.chain[idx] = hollow
    state.hollow_pointers[c_hash] = list(hollow.r_list)
    state.relocating.discard(c_hash)

    pay = 1 if state.half_coins >= 1 else 0
    state.half_coins -= pay
    return pay


def side_chain_lookup(state: NodeState, c_hash: bytes) -> Optional[Block]:
    idx = state.side_index.get(c_hash)
    return state.side_chain[idx] if idx is not None else None


def recover_block(
    state: NodeState,
    c_hash: bytes,
    fetch: Callable[[NodeId, bytes], Optional[Block]],
) -> Block:
    """Fetch a hollow block's payload back from its relocation holders.

    Holders are tried in pointer order (oldest first); the first reply
    that re-hashes to c_hash wins. `fetch` returns the holder's copy or
    None for a faulty or empty holder. Raises UnrecoverableError when no
    holder can produce a matching payload.
    """
    idx = state.chain_index.get(c_hash)
    if idx is None or not isinstance(state.chain[idx], HollowBlock):
        raise StorageError("node holds no hollow block for this hash")
    pointers = state.chain[idx].r_list
    for ptr in pointers:
        candidate = fetch(ptr.holder, c_hash)
        if candidate is None:
            continue
        if compute_block_hash(candidate) == c_hash:
            return candidate
    raise UnrecoverableError(f"no live holder returned {c_hash.hex()[:12]}")


def restore_block(state: NodeState, block: Block) -> None:
    """Swap a recovered payload back over its hollow header. Keeps the
    hollow entry's pointer list (the payload stays relocated elsewhere)."""
    idx = state.chain_index.get(block.c_hash)
    if idx is None or not isinstance(state.chain[idx], HollowBlock):
        raise StorageError("no hollow slot to restore into")
    if state.free_slots < 1:
        raise NoDiskSpaceError("no free slot to restore the payload")
    hollow = state.chain[idx]
    restored = Block(
        p_hash=block.p_hash,
        c_hash=block.c_hash,
        timestamp=block.timestamp,
        txn_list=block.txn_list,
        creator=block.creator,
        t_hash=hollow.t_hash,
        r_list=hollow.r_list,
        relocation_flag=False,
    )
    state.chain[idx] = restored

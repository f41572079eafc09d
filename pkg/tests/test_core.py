"""Core hashing, chain validity, and trust-score tests."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deansim.core import (
    ACTIVITY_SATURATION_MS,
    DISK_NORM_SLOTS,
    GEO_SATURATION_MS,
    MIN_TXNS_PER_BLOCK,
    ZERO_HASH,
    AtwRecord,
    AtwWeights,
    BadWeightsError,
    EmptyBlockError,
    Block,
    NodeKind,
    RelocationPointer,
    TxnKind,
    atw_score,
    compute_block_hash,
    genesis_block,
    hash_bytes,
    make_block,
    make_node_id,
    make_transaction,
    node_sort_key,
    quorum,
    update_geo_timer,
    validate_chain,
)

# ---------------------------------------------------------------------------
# Independent SHA-256 oracle (FIPS 180-4, written from the round constants).
# Deliberately separate from hashlib so hash_bytes gets a real cross-check.
# ---------------------------------------------------------------------------

_K = [
    0x428A2F98, 0x71374491, 0xB5C0FBCF, 0xE9B5DBA5, 0x3956C25B, 0x59F111F1,
    0x923F82A4, 0xAB1C5ED5, 0xD807AA98, 0x12835B01, 0x243185BE, 0x550C7DC3,
    0x72BE5D74, 0x80DEB1FE, 0x9BDC06A7, 0xC19BF174, 0xE49B69C1, 0xEFBE4786,
    0x0FC19DC6, 0x240CA1CC, 0x2DE92C6F, 0x4A7484AA, 0x5CB0A9DC, 0x76F988DA,
    0x983E5152, 0xA831C66D, 0xB00327C8, 0xBF597FC7, 0xC6E00BF3, 0xD5A79147,
    0x06CA6351, 0x14292967, 0x27B70A85, 0x2E1B2138, 0x4D2C6DFC, 0x53380D13,
    0x650A7354, 0x766A0ABB, 0x81C2C92E, 0x92722C85, 0xA2BFE8A1, 0xA81A664B,
    0xC24B8B70, 0xC76C51A3, 0xD192E819, 0xD6990624, 0xF40E3585, 0x106AA070,
    0x19A4C116, 0x1E376C08, 0x2748774C, 0x34B0BCB5, 0x391C0CB3, 0x4ED8AA4A,
    0x5B9CCA4F, 0x682E6FF3, 0x748F82EE, 0x78A5636F, 0x84C87814, 0x8CC70208,
    0x90BEFFFA, 0xA4506CEB, 0xBEF9A3F7, 0xC67178F2,
]

_MASK = 0xFFFFFFFF


def _rotr(x, n):
    return ((x >> n) | (x << (32 - n))) & _MASK


def reference_sha256(message: bytes) -> bytes:
    h = [
        0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A,
        0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19,
    ]
    length = len(message) * 8
    message += b"\x80"
    message += b"\x00" * ((56 - len(message) % 64) % 64)
    message += length.to_bytes(8, "big")
    for off in range(0, len(message), 64):
        w = [int.from_bytes(message[off + 4 * i : off + 4 * i + 4], "big") for i in range(16)]
        for i in range(16, 64):
            s0 = _rotr(w[i - 15], 7) ^ _rotr(w[i - 15], 18) ^ (w[i - 15] >> 3)
            s1 = _rotr(w[i - 2], 17) ^ _rotr(w[i - 2], 19) ^ (w[i - 2] >> 10)
            w.append((w[i - 16] + s0 + w[i - 7] + s1) & _MASK)
        a, b, c, d, e, f, g, hh = h
        for i in range(64):
            s1 = _rotr(e, 6) ^ _rotr(e, 11) ^ _rotr(e, 25)
            ch = (e & f) ^ (~e & g)
            t1 = (hh + s1 + ch + _K[i] + w[i]) & _MASK
            s0 = _rotr(a, 2) ^ _rotr(a, 13) ^ _rotr(a, 22)
            maj = (a & b) ^ (a & c) ^ (b & c)
            t2 = (s0 + maj) & _MASK
            hh, g, f, e, d, c, b, a = g, f, e, (d + t1) & _MASK, c, b, a, (t1 + t2) & _MASK
        h = [(x + y) & _MASK for x, y in zip(h, (a, b, c, d, e, f, g, hh))]
    return b"".join(x.to_bytes(4, "big") for x in h)


def test_hash_bytes_empty_vector():
    assert hash_bytes(b"").hex() == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )


def test_hash_bytes_abc_vector():
    assert hash_bytes(b"abc").hex() == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )


def test_hash_bytes_matches_independent_implementation():
    rng = random.Random(0xDEA0)
    for size in (0, 1, 55, 56, 64, 65, 1024):
        payload = rng.randbytes(size)
        assert hash_bytes(payload) == reference_sha256(payload)


# ---------------------------------------------------------------------------
# Blocks and chains
# ---------------------------------------------------------------------------

EDGE_A = make_node_id(NodeKind.EDGE, 1)
EDGE_B = make_node_id(NodeKind.EDGE, 2)
SENSOR_A = make_node_id(NodeKind.SENSOR, 100)

# Pinned once from this build; any change to canonical serialization or the
# genesis recipe must be deliberate and update this value.
GENESIS_C_HASH = "6def7673d648fd7bd013c6d2d7a00cf6f4dd215d6b2d99953ef6bc99eb603e28"


def _txn(i, created_at=5, kind=TxnKind.REGULAR):
    return make_transaction(kind, SENSOR_A, EDGE_A, amount=i, geo=(1.0, 2.0), created_at=created_at)


def _block_on(tip, n_txns=MIN_TXNS_PER_BLOCK, timestamp=10, salt=0):
    txns = [_txn(i + salt * 1000, created_at=timestamp) for i in range(n_txns)]
    return make_block(tip.c_hash, timestamp, txns, EDGE_A)


def _chain(length=3):
    chain = [genesis_block()]
    for k in range(1, length):
        chain.append(_block_on(chain[-1], timestamp=10 * k, salt=k))
    return chain


def test_genesis_digest_is_pinned():
    assert genesis_block().c_hash.hex() == GENESIS_C_HASH


def test_block_hash_deterministic_and_mutation_sensitive():
    b = _chain(2)[1]
    assert compute_block_hash(b) == b.c_hash
    tampered_txns = (_txn(999),) + b.txn_list[1:]
    tampered = Block(
        b.p_hash, b.c_hash, b.timestamp, tampered_txns, b.creator, b.t_hash, b.r_list, b.relocation_flag
    )
    assert compute_block_hash(tampered) != b.c_hash


def test_block_hash_ignores_relocation_metadata():
    b = _chain(2)[1]
    pointer = RelocationPointer(EDGE_B, hash_bytes(b"receipt"))
    decorated = b.with_pointer(pointer).with_t_hash(hash_bytes(b"stamp")).with_relocation_flag()
    assert compute_block_hash(decorated) == b.c_hash


def test_block_hash_rejects_empty_block():
    empty = Block(ZERO_HASH, ZERO_HASH, 0, (), EDGE_A)
    with pytest.raises(EmptyBlockError):
        compute_block_hash(empty)


def test_validate_chain_empty_is_valid():
    assert validate_chain([]).valid


def test_validate_chain_three_linked_blocks():
    report = validate_chain(_chain(3))
    assert report.valid and report.first_bad_index is None


def test_validate_chain_flags_tampered_middle_block():
    chain = _chain(3)
    bad = Block(
        chain[1].p_hash,
        chain[1].c_hash,
        chain[1].timestamp,
        (_txn(777),) + chain[1].txn_list[1:],
        chain[1].creator,
    )
    report = validate_chain([chain[0], bad, chain[2]])
    assert not report.valid
    assert report.first_bad_index == 1


def test_validate_chain_flags_short_txn_list():
    g = genesis_block()
    short = make_block(g.c_hash, 5, [_txn(i) for i in range(MIN_TXNS_PER_BLOCK - 1)], EDGE_A)
    report = validate_chain([g, short])
    assert not report.valid and report.first_bad_index == 1


def test_validate_chain_flags_broken_link():
    chain = _chain(3)
    unlinked = make_block(hash_bytes(b"elsewhere"), 99, chain[2].txn_list, EDGE_A)
    report = validate_chain([chain[0], chain[1], unlinked])
    assert not report.valid and report.first_bad_index == 2


@given(st.integers(min_value=0, max_value=6), st.integers(min_value=0, max_value=6))
@settings(max_examples=25, deadline=None)
def test_validate_chain_prefix_property(length, cut):
    chain = _chain(length + 1)
    assert validate_chain(chain).valid
    assert validate_chain(chain[: min(cut, len(chain))]).valid


@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=1, max_value=4))
@settings(max_examples=40, deadline=None)
def test_validate_chain_random_tampering_always_detected(seed, index):
    """Chain-integrity fuzz: any byte flip in a hashed field is caught."""
    rng = random.Random(seed)
    chain = _chain(5)
    index = min(index, len(chain) - 1)
    victim = chain[index]
    mode = rng.choice(["txn", "timestamp", "p_hash", "creator"])
    if mode == "txn":
        mutated_txn = make_transaction(
            TxnKind.REGULAR, SENSOR_A, EDGE_A, rng.randrange(2**31), (3.0, 4.0), rng.randrange(2**31)
        )
        pos = rng.randrange(len(victim.txn_list))
        txns = victim.txn_list[:pos] + (mutated_txn,) + victim.txn_list[pos + 1 :]
        bad = Block(victim.p_hash, victim.c_hash, victim.timestamp, txns, victim.creator)
    elif mode == "timestamp":
        bad = Block(
            victim.p_hash, victim.c_hash, victim.timestamp + 1 + rng.randrange(100),
            victim.txn_list, victim.creator,
        )
    elif mode == "p_hash":
        bad = Block(
            hash_bytes(rng.randbytes(8)), victim.c_hash, victim.timestamp,
            victim.txn_list, victim.creator,
        )
    else:
        bad = Block(
            victim.p_hash, victim.c_hash, victim.timestamp, victim.txn_list,
            make_node_id(NodeKind.EDGE, 555),
        )
    chain[index] = bad
    report = validate_chain(chain)
    assert not report.valid
    assert report.first_bad_index <= index


# ---------------------------------------------------------------------------
# Trust scoring
# ---------------------------------------------------------------------------


def _record(adj_count=0, geo_timer=0, timestamp=0, disk=0, index=1):
    me = make_node_id(NodeKind.EDGE, index)
    adj = frozenset(make_node_id(NodeKind.EDGE, 1000 + i) for i in range(adj_count))
    return AtwRecord(me, timestamp=timestamp, geo_timer=geo_timer, loc=(0.0, 0.0), adj=adj, disk=disk)


def test_atw_score_all_terms_maxed_is_one():
    rec = _record(
        adj_count=10, geo_timer=GEO_SATURATION_MS, timestamp=ACTIVITY_SATURATION_MS,
        disk=DISK_NORM_SLOTS,
    )
    assert atw_score(rec, AtwWeights(), network_size=10) == pytest.approx(1.0)


def test_atw_score_all_terms_zero_is_zero():
    assert atw_score(_record(), AtwWeights(), network_size=10) == 0.0


def test_atw_score_single_adjacency_term():
    rec = _record(adj_count=6)
    assert atw_score(rec, AtwWeights(), network_size=10) == pytest.approx(0.24)


def test_atw_score_rejects_bad_weights():
    with pytest.raises(BadWeightsError):
        atw_score(_record(), AtwWeights(adjacency=-0.1), network_size=5)
    with pytest.raises(BadWeightsError):
        atw_score(_record(), AtwWeights(0.0, 0.0, 0.0, 0.0), network_size=5)


@given(
    st.integers(min_value=0, max_value=12),
    st.integers(min_value=0, max_value=12),
    st.integers(min_value=0, max_value=2 * GEO_SATURATION_MS),
    st.integers(min_value=0, max_value=2 * GEO_SATURATION_MS),
    st.integers(min_value=0, max_value=2 * DISK_NORM_SLOTS),
    st.integers(min_value=0, max_value=2 * DISK_NORM_SLOTS),
)
@settings(max_examples=60, deadline=None)
def test_atw_score_monotone_in_adjacency_geo_disk(a1, a2, g1, g2, d1, d2):
    lo = _record(adj_count=min(a1, a2), geo_timer=min(g1, g2), disk=min(d1, d2))
    hi = _record(adj_count=max(a1, a2), geo_timer=max(g1, g2), disk=max(d1, d2))
    w = AtwWeights()
    assert atw_score(lo, w, network_size=12) <= atw_score(hi, w, network_size=12) + 1e-12


@given(
    st.lists(
        st.tuples(
            st.integers(min_value=0, max_value=9),
            st.integers(min_value=0, max_value=GEO_SATURATION_MS),
            st.integers(min_value=0, max_value=ACTIVITY_SATURATION_MS),
            st.integers(min_value=0, max_value=DISK_NORM_SLOTS),
        ),
        min_size=2,
        max_size=8,
    ),
    st.floats(min_value=0.01, max_value=50.0, allow_nan=False),
)
@settings(max_examples=60, deadline=None)
def test_atw_score_argmax_scale_invariance(rows, scale):
    records = [
        _record(adj_count=a, geo_timer=g, timestamp=t, disk=d, index=i + 1)
        for i, (a, g, t, d) in enumerate(rows)
    ]
    base = AtwWeights()
    scaled = AtwWeights(
        base.adjacency * scale, base.geo * scale, base.activity * scale, base.disk * scale
    )

    def argmax(weights):
        scored = [(atw_score(r, weights, network_size=9), node_sort_key(r.node_id)) for r in records]
        return max(scored)[1]

    assert argmax(base) == argmax(scaled)


def test_geo_timer_accumulates_and_resets_on_move():
    rec = _record(index=3)
    pin = (0.0, 0.0)
    rec = update_geo_timer(rec, now=1000, loc=(10.0, 0.0), pin=pin)
    assert rec.geo_timer == 1000
    rec = update_geo_timer(rec, now=2500, loc=(30.0, 30.0), pin=pin)
    assert rec.geo_timer == 2500
    rec = update_geo_timer(rec, now=3000, loc=(100.0, 0.0), pin=pin)
    assert rec.geo_timer == 0


def test_adjacency_never_contains_self():
    me = make_node_id(NodeKind.EDGE, 7)
    with pytest.raises(ValueError):
        AtwRecord(me, 0, 0, (0.0, 0.0), adj=frozenset({me}))


def test_quorum_values():
    assert quorum(3) == 2
    assert quorum(5) == 3
    assert quorum(7) == 4
    assert quorum(9) == 5
    assert quorum(50) == 26


def test_configuration_txn_requires_edge_sender():
    with pytest.raises(ValueError):
        make_transaction(TxnKind.CONFIGURATION, SENSOR_A, EDGE_A, 1, (0.0, 0.0), 0)


def test_txn_id_binds_all_fields():
    t1 = _txn(5)
    t2 = make_transaction(t1.kind, t1.sender, t1.receiver, 6, t1.geo, t1.created_at)
    assert t1.txn_id != t2.txn_id
    assert t1.txn_id == hash_bytes(t1.id_payload())

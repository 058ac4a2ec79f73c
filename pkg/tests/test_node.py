from dataclasses import replace

import pytest

from trail.core import KeyPair, MerkleProof, Transaction, Txo, block_size, sign_all
from trail.node import (
    CHECK_AMOUNTS,
    CHECK_ANCHOR,
    CHECK_INDEX,
    CHECK_MEMPOOL_CONFLICT,
    CHECK_PROOF,
    BlockRejected,
    CompactBlock,
    NodeConfig,
    TrailNode,
    UnknownParent,
    ValidationError,
    check_block,
    decode_compact,
    encode_compact,
    fill_missing,
    refresh_mempool,
)
from trail.tree import verify_proof
from trail.core import leaf_hash_unused


def _check(node, tx):
    with pytest.raises(ValidationError) as info:
        node.validate(tx)
    return info.value


def test_valid_payment_flows(world):
    tx = world.pay(0, 1, 30)
    prop = world.mine([tx])
    assert prop.txs == [tx]
    assert world.clients[1].balance() == 130
    assert world.clients[0].balance() == 70
    assert world.node.mempool == []


def test_stale_anchor(world):
    tx = world.pay(0, 1, 5)
    world.mine()
    assert _check(world.node, tx).check == CHECK_ANCHOR


def test_mempool_double_spend(world):
    c = world.clients[0]
    t = c.unused_at()[0]
    proof = c.proof(t)
    a = sign_all(Transaction(c.latest_block, ((t, proof),), (Txo(c.address, 100),)), [c.keypair])
    b = sign_all(Transaction(c.latest_block, ((t, proof),), (Txo(world.keys[1].address, 100),)), [c.keypair])
    world.node.submit(a)
    assert _check(world.node, b).check == CHECK_MEMPOOL_CONFLICT
    twice = sign_all(Transaction(c.latest_block, ((t, proof), (t, proof)), (Txo(c.address, 1),)), [c.keypair])
    assert _check(TrailNode(world.node.latest_block), twice).check == CHECK_MEMPOOL_CONFLICT


def test_bad_proof_and_replay(world):
    c = world.clients[0]
    t = c.unused_at()[0]
    proof = c.proof(t)
    wrong = MerkleProof((b"\x01" * 32,) + proof.siblings[1:])
    tx = sign_all(Transaction(c.latest_block, ((t, wrong),), (Txo(c.address, 100),)), [c.keypair])
    assert _check(world.node, tx).check == CHECK_PROOF
    world.mine([world.pay(0, 1, 100)])
    replay = sign_all(Transaction(world.node.latest_hash, ((t, world.full.proof_at(t.index, world.node.latest_hash)),),
                                  (Txo(c.address, 100),)), [c.keypair])
    assert _check(world.node, replay).check == CHECK_PROOF


def test_insufficient_inputs_and_fee(make_world):
    w = make_world(config=NodeConfig(fee_per_input=3))
    c = w.clients[0]
    t = c.unused_at()[0]
    proof = c.proof(t)
    over = sign_all(Transaction(c.latest_block, ((t, proof),), (Txo(c.address, 98),)), [c.keypair])
    assert _check(w.node, over).check == CHECK_AMOUNTS
    ok = sign_all(Transaction(c.latest_block, ((t, proof),), (Txo(c.address, 97),)), [c.keypair])
    w.node.validate(ok)


def test_future_index(world):
    c = world.clients[0]
    forged = Txo(c.address, 10**9, world.node.latest_block.rightmost_index + 1, world.node.latest_hash)
    tx = sign_all(Transaction(world.node.latest_hash, ((forged, MerkleProof(world.node.latest_block.rightmost_proof)),),
                              (Txo(c.address, 1),)), [c.keypair])
    assert _check(world.node, tx).check == CHECK_INDEX


def test_signature_required(world):
    c = world.clients[0]
    t = c.unused_at()[0]
    thief = KeyPair.from_seed("thief")
    tx = sign_all(Transaction(c.latest_block, ((t, c.proof(t)),), (Txo(thief.address, 100),)), [thief])
    err = _check(world.node, tx)
    assert err.check is None and err.code == "bad-signature"


def test_check_order_anchor_first(world):
    tx = world.pay(0, 1, 5)
    world.node.submit(tx)
    world.mine()
    # stale and conflicting at once: the anchor check fires first
    assert _check(world.node, tx).check == CHECK_ANCHOR


def test_truncated_proof_expanded_in_mempool(make_world):
    w = make_world(H=8, trunc_height=3)
    tx = w.pay(0, 1, 10)
    assert all(p.truncated and len(p.siblings) == 3 for _, p in tx.inputs)
    kept = w.node.submit(tx)
    assert all(not p.truncated and len(p.siblings) == 8 for _, p in kept.inputs)
    w.mine()
    assert w.clients[1].balance() == 110


def test_pending_proof_refresh_over_several_blocks(world):
    """A held-back transaction stays valid as its proof is refreshed."""
    held = world.pay(0, 2, 40)
    world.node.submit(held)
    for k in range(5):
        other = world.pay(1, 2, 1)
        world.node.mempool, kept = [], list(world.node.mempool)
        world.mine([other])
        world.node.mempool = refresh_mempool(kept, world.full.get_record(world.node.latest_hash).delta,
                                             world.node.latest_block, world.config)
        assert len(world.node.mempool) == 1
        refreshed = world.node.mempool[0]
        assert refreshed.block_hash == world.node.latest_hash
        (txo, proof), = refreshed.inputs
        assert verify_proof(leaf_hash_unused(txo), txo.index, proof, world.node.latest_block.root)
    prop = world.mine()
    assert [t.payload_id() for t in prop.txs] == [held.payload_id()]


def test_refresh_drops_spent(world):
    tx = world.pay(0, 1, 5)
    world.node.submit(tx)
    prop = world.node.propose_block()
    assert refresh_mempool([tx], prop.delta, prop.block) == []


def test_check_block_detects_tampering(world):
    tx = world.pay(0, 1, 5)
    world.node.submit(tx)
    prop = world.node.propose_block()
    parent = world.node.latest_block
    check_block(parent, prop.block, prop.txs)
    fields = {"root": b"\x00" * 32, "rightmost_hash": b"\x00" * 32, "rightmost_index": 99}
    for name, value in fields.items():
        bad = replace(prop.block, **{name: value})
        with pytest.raises(BlockRejected) as info:
            check_block(parent, bad, prop.txs)
        assert name in info.value.mismatched
    with pytest.raises(BlockRejected) as info:
        check_block(parent, prop.block, [])
    assert info.value.mismatched
    with pytest.raises(UnknownParent):
        check_block(prop.block, prop.block, [])


def test_rejected_block_leaves_state(world):
    tx = world.pay(0, 1, 5)
    world.node.submit(tx)
    prop = world.node.propose_block()
    before = (world.node.latest_block, list(world.node.mempool))
    bad = replace(prop.block, root=b"\x00" * 32)
    with pytest.raises(BlockRejected):
        world.node.apply_block(bad, prop.txs)
    assert (world.node.latest_block, world.node.mempool) == before


def test_node_state_is_bounded(world):
    for _ in range(4):
        world.mine([world.pay(0, 1, 1)])
    block, mempool = world.node.retained_state()
    assert mempool == []
    assert world.node.state_bytes() == block_size(world.H)
    assert set(vars(world.node)) == {"latest_block", "config", "mempool", "_latest_hash"}


def test_compact_relay(world):
    txs = [world.pay(0, 1, 5), world.pay(1, 2, 5)]
    peer = TrailNode(world.node.latest_block, world.config)
    for tx in txs:
        world.node.submit(tx)
    peer.submit(txs[0])
    prop = world.node.propose_block()
    compact = encode_compact(prop.block, prop.txs)
    raw = compact.to_bytes()
    assert len(raw) == block_size(world.H) + 8 * len(prop.txs)
    assert CompactBlock.from_bytes(raw, world.H) == compact
    partial, missing = decode_compact(compact, peer.mempool)
    assert missing == [txs[1].short_id()]
    full = fill_missing(compact, partial, [txs[1]])
    peer.apply_block(prop.block, full)
    assert peer.latest_hash == prop.hash
    with pytest.raises(KeyError):
        fill_missing(compact, partial, [])


def test_reward_output(make_world):
    reward = KeyPair.from_seed("miner").address
    w = make_world(config=NodeConfig(fee_per_input=2, reward_address=reward))
    prop = w.mine([w.pay(0, 1, 10)])
    assert prop.outputs[-1].owner == reward and prop.outputs[-1].balance == 2

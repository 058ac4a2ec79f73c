import pytest

from trail.core import BranchID, Txo, leaf_hash_unused, leaf_hash_used, sibling_path
from trail.fullnode import FullNode, NotAncestor, UnknownBlock, sync_node
from trail.node import BlockRejected, TrailNode, make_genesis
from trail.tree import DenseTree, verify_proof


def _fork(world):
    """Two children of the current tip, each spending something different."""
    base = world.node.latest_block
    a_tx = world.pay(0, 1, 10)
    b_tx = world.pay(1, 2, 10)
    a_node, b_node = TrailNode(base, world.config), TrailNode(base, world.config)
    a_node.submit(a_tx)
    b_node.submit(b_tx)
    a, b = a_node.propose_block(), b_node.propose_block()
    world.full.record_block(a.block, a.txs)
    world.full.record_block(b.block, b.txs)
    return a, b


def test_record_and_queries(world):
    p1 = world.mine([world.pay(0, 1, 10)])
    p2 = world.mine([world.pay(1, 2, 20)])
    full = world.full
    assert full.tip == p2.hash and full.height_of(p2.hash) == 2
    assert full.path(None, p2.hash) == [full.genesis_hash, p1.hash, p2.hash]
    assert full.path(p1.hash, p2.hash) == [p2.hash]
    assert full.path(p2.hash, p2.hash) == []
    assert full.is_ancestor(p2.hash, p2.hash)
    assert full.is_ancestor(full.genesis_hash, p2.hash)
    assert not full.is_ancestor(p2.hash, p1.hash)
    with pytest.raises(NotAncestor):
        full.path(p2.hash, p1.hash)
    with pytest.raises(UnknownBlock):
        full.get_block(b"\x00" * 32)
    assert full.get_transactions(p1.hash) == p1.txs


def test_record_rejects_bad_block(world):
    tx = world.pay(0, 1, 10)
    world.node.submit(tx)
    prop = world.node.propose_block()
    with pytest.raises(BlockRejected):
        world.full.record_block(prop.block, [])
    with pytest.raises(UnknownBlock):
        other = FullNode.bootstrap([Txo(world.keys[0].address, 1)], world.H)
        other.record_block(prop.block, prop.txs)


def test_latest_updates_interval(world):
    p1 = world.mine([world.pay(0, 1, 10)])
    p2 = world.mine()
    p3 = world.mine([world.pay(2, 0, 5)])
    full = world.full
    branches = list(full.get_record(p1.hash).delta)
    got = full.latest_updates(branches, p1.hash, p3.hash)
    for b, (h, value) in got.items():
        assert h == p3.hash and full.get_record(p3.hash).delta[b] == value
    assert full.latest_updates(branches, p1.hash, p2.hash) == {}
    everything = full.latest_updates(branches, None, p3.hash)
    assert set(everything) == set(branches)


def test_proof_at_matches_dense_tree(world):
    for k in range(4):
        world.mine([world.pay(k % 3, (k + 1) % 3, 3)])
    full = world.full
    tip = full.tip
    leaves = {}
    for h in full.path(None, tip):
        rec = full.get_record(h)
        for t in rec.inputs:
            leaves.pop(t.index)
        for t in rec.outputs:
            leaves[t.index] = t
    tree = DenseTree(world.H)
    for h in full.path(None, tip):
        rec = full.get_record(h)
        for t in rec.inputs:
            tree.set_leaf(t.index, leaf_hash_used(t))
        for t in rec.outputs:
            tree.set_leaf(t.index, leaf_hash_unused(t))
    assert tree.root == full.get_block(tip).root
    for i, t in leaves.items():
        proof = full.proof_at(i, tip)
        assert proof == tree.proof(i)
        assert verify_proof(leaf_hash_unused(t), i, proof, tree.root, world.H)
    assert set(full.unspent(tip)) == set(leaves)


def test_txos_for(world):
    p1 = world.mine([world.pay(0, 1, 10)])
    new, used = world.full.txos_for(world.keys[0].address, None, p1.hash)
    assert [h for _, h in used] == [p1.hash]
    assert {t.balance for t, _ in new} == {100, 90}


def test_fork_choice_first_seen(world):
    a, b = _fork(world)
    full = world.full
    assert full.tip == a.hash
    assert set(full.tips()) == {a.hash, b.hash}
    assert full.common_ancestor(a.hash, b.hash) == a.block.parent
    node = TrailNode(b.block, world.config)
    c = node.propose_block()
    full.record_block(c.block, c.txs)
    assert full.tip == c.hash


def test_sync_node_reorg_reinjects(world):
    a, b = _fork(world)
    node = TrailNode(world.node.latest_block, world.config)
    node.apply_block(a.block, a.txs)
    extender = TrailNode(b.block, world.config)
    c = extender.propose_block()
    world.full.record_block(c.block, c.txs)
    rejected = sync_node(node, world.full, c.hash)
    assert node.latest_hash == c.hash
    assert rejected == []
    # the orphaned payment is back in the mempool with fresh proofs
    assert [t.payload_id() for t in node.mempool] == [a.txs[0].payload_id()]
    prop = node.propose_block()
    world.full.record_block(prop.block, prop.txs)


def test_sync_node_catch_up(world):
    lagging = TrailNode(world.node.latest_block, world.config)
    for _ in range(3):
        world.mine([world.pay(0, 1, 1)])
    assert sync_node(lagging, world.full, world.full.tip) == []
    assert lagging.latest_hash == world.full.tip


def test_persistence_roundtrip(tmp_path, make_world):
    w = make_world()
    path = tmp_path / "chain.bin"
    full = FullNode(make_genesis([Txo(k.address, 100) for k in w.keys], w.H), w.config, path)
    assert full.genesis_hash == w.full.genesis_hash
    for _ in range(3):
        prop = w.mine([w.pay(0, 1, 2)])
        full.record_block(prop.block, prop.txs)
    loaded = FullNode.load(path, w.config)
    assert loaded.tip == full.tip
    assert loaded.stored_bytes() == full.stored_bytes()
    assert loaded.get_record(loaded.tip).delta == full.get_record(full.tip).delta


def test_branch_log_keys(world):
    prop = world.mine([world.pay(0, 1, 1)])
    assert BranchID(world.H, 0) in world.full.branch_log
    for b in sibling_path(0, world.H):
        entries = world.full.branch_log.get(b, [])
        assert all(h in world.full.blocks for h, _, _ in entries)
    assert prop.hash in {h for h, _, _ in world.full.branch_log[BranchID(world.H, 0)]}

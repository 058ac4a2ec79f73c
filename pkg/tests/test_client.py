import pytest

from trail.client import ArchiveParams, Client, InsufficientBalance, MissingHistory, SyncRequired, filter_response
from trail.core import TXO_LEN, KeyPair, leaf_hash_unused
from trail.node import NodeConfig, TrailNode
from trail.tree import verify_proof


def _assert_proofs_current(client, full, tip=None):
    tip = tip or client.latest_block
    root = full.get_block(tip).root
    for t in client.unused_at(tip):
        proof = client.proof(t, tip)
        assert proof == full.proof_at(t.index, tip)
        assert verify_proof(leaf_hash_unused(t), t.index, proof, root, client.tree_height)


def _filtered_twin(world, i):
    twin = Client(world.keys[i], world.H, name="twin")
    g = world.full.get_record(world.full.genesis_hash)
    twin.on_genesis(g.block, g.outputs, g.delta)
    return twin


def _feed_filtered(client, full, h):
    rec = full.get_record(h)
    req = client.subscription_request(rec.block)
    return client.on_response(filter_response(req, rec.block, rec.outputs, rec.inputs, rec.delta))


def test_proofs_stay_current(world):
    for k in range(6):
        world.mine([world.pay(k % 3, (k + 2) % 3, 7)])
        for c in world.clients:
            _assert_proofs_current(c, world.full)
    assert sum(c.balance() for c in world.clients) == 300


def test_filtered_subscription_matches_full_delta(world):
    twin = _filtered_twin(world, 0)
    for k in range(6):
        prop = world.mine([world.pay(k % 3, (k + 1) % 3, 5)])
        _feed_filtered(twin, world.full, prop.hash)
        assert twin.unused_at() == world.clients[0].unused_at()
        assert twin.proofs() == world.clients[0].proofs()
    # the filtered client keeps far fewer node hashes
    assert twin.memory.entry_count() <= world.clients[0].memory.entry_count()


def test_sync_after_missing_blocks(world):
    lagging = world.clients[1]
    start = lagging.latest_block
    for k in range(5):
        world.mine([world.pay(0, 1, 3), world.pay(2, 0, 1)], clients=[world.clients[0], world.clients[2]])
    with pytest.raises(SyncRequired):
        lagging.on_block(world.full.get_block(world.full.tip), [], [], {})
    lagging.sync(world.full, start, world.full.tip)
    assert lagging.latest_block == world.full.tip
    assert lagging.balance() == 115
    _assert_proofs_current(lagging, world.full)
    prop = world.mine([world.pay(1, 2, 100)])
    assert len(prop.txs) == 1


def test_resync_onto_other_fork(world):
    base = world.node.latest_block
    c = world.clients[0]
    tx = world.pay(0, 1, 10)
    a_node = TrailNode(base, world.config)
    a_node.submit(tx)
    a = a_node.propose_block()
    world.full.record_block(a.block, a.txs)
    rec = world.full.get_record(a.hash)
    c.on_block(a.block, rec.outputs, rec.inputs, rec.delta)
    assert c.balance() == 90
    b_node = TrailNode(base, world.config)
    b1 = b_node.propose_block()
    world.full.record_block(b1.block, b1.txs)
    b_node.commit(b1)
    b2 = b_node.propose_block()
    world.full.record_block(b2.block, b2.txs)
    assert world.full.tip == b2.hash
    shared = c.resync(world.full, b2.hash)
    assert shared == world.full.genesis_hash
    assert c.latest_block == b2.hash and c.balance() == 100
    assert not c.pending
    _assert_proofs_current(c, world.full)
    # the fork the client left is still answerable
    assert c.balance(a.hash) == 90


def test_pending_inputs_are_not_reused(world):
    c = world.clients[0]
    world.pay(0, 1, 10)
    with pytest.raises(InsufficientBalance):
        world.pay(0, 1, 10)
    c.expire_pending(-1)
    assert world.pay(0, 1, 10)


def test_insufficient_balance_counts_fee(make_world):
    w = make_world(config=NodeConfig(fee_per_input=1))
    with pytest.raises(InsufficientBalance):
        w.pay(0, 1, 100)
    tx = w.pay(0, 1, 99)
    assert [o.balance for o in tx.outputs] == [99]


def test_device_bytes_accounting(world):
    world.mine([world.pay(0, 1, 10)])
    c = world.clients[0]
    assert c.device_bytes() == 32 * c.memory.entry_count() + TXO_LEN * len(c.unused_at())
    assert c.archive_bytes() == 32 * c.archive.entry_count() + TXO_LEN * len(c.used)


def test_archive_moves_spent_branches(make_world, archive_params):
    w = make_world(archive=archive_params)
    c = w.clients[0]
    before = c.memory.entry_count()
    assert before > 0 and c.archive.entry_count() == 0
    w.mine([w.pay(0, 1, 100)])
    assert c.unused_at() == []
    assert c.memory.entry_count() == 0
    assert c.archive.entry_count() >= before
    for other in w.clients[1:]:
        _assert_proofs_current(other, w.full)


def test_prune_keeps_recent_window(make_world, archive_params):
    w = make_world(archive=archive_params)
    for k in range(6):
        w.mine([w.pay(2, 2, 1)])
    c = w.clients[2]
    cutoff = c.latest_height - archive_params.h_archive
    for hist in c.memory.data.values():
        assert all(c.heights[h] >= cutoff for h in hist)
    _assert_proofs_current(c, w.full)


def test_deleted_history_is_restored(make_world, archive_params):
    w = make_world(archive=archive_params)
    c = w.clients[0]
    # client 2 churns its own leaf; the leaf next to client 0's TXO never changes
    for k in range(archive_params.h_delete + 2):
        w.mine([w.pay(2, 2, 1)])
    (t,) = c.unused_at()
    with pytest.raises(MissingHistory) as info:
        c.proof(t)
    assert info.value.branches
    with pytest.raises(MissingHistory):
        w.pay(0, 1, 1)
    c.restore_history(w.full, t)
    _assert_proofs_current(c, w.full)
    w.mine([w.pay(0, 1, 1)])
    assert w.clients[1].balance() == 101


def test_realized_forks(make_world, archive_params):
    w = make_world(archive=archive_params)
    assert w.clients[0].realized_forks() == 1
    base = w.node.latest_block
    for k in range(2):
        node = TrailNode(base, w.config)
        node.submit(w.pay(k, 2, 1 + k))
        prop = node.propose_block()
        w.full.record_block(prop.block, prop.txs)
        rec = w.full.get_record(prop.hash)
        w.clients[0].on_block(prop.block, rec.outputs, rec.inputs, rec.delta)
    assert w.clients[0].realized_forks() == 2


def test_archive_params_validation():
    with pytest.raises(ValueError):
        ArchiveParams(h_archive=5, h_delete=5)
    with pytest.raises(ValueError):
        ArchiveParams(h_archive=0)


def test_payment_to_outsider(world):
    stranger = KeyPair.from_seed("stranger")
    c = world.clients[0]
    world.mine([c.create_transaction([(stranger.address, 10)])])
    assert c.balance() == 90
    assert all(t.owner == c.address for t in c.unused_at())
    assert sum(cl.balance() for cl in world.clients) == 290

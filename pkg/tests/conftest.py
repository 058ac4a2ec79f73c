from __future__ import annotations

import re

import pytest

from trail.client import ArchiveParams, Client
from trail.core import KeyPair, Txo
from trail.fullnode import FullNode
from trail.node import NodeConfig, TrailNode


class World:
    """A full node, one Trail node and some clients fed full block deltas."""

    def __init__(self, n_clients=3, H=8, balance=100, txos_each=1, config=None, archive=None, trunc_height=None):
        self.H = H
        self.config = config or NodeConfig()
        self.keys = [KeyPair.from_seed(f"world-{i}") for i in range(n_clients)]
        allocations = [Txo(k.address, balance) for k in self.keys for _ in range(txos_each)]
        self.full = FullNode.bootstrap(allocations, H, self.config)
        g = self.full.get_record(self.full.genesis_hash)
        self.node = TrailNode(g.block, self.config)
        self.clients = [
            Client(k, H, archive=archive, trunc_height=trunc_height,
                   fee_per_input=self.config.fee_per_input, name=f"c{i}")
            for i, k in enumerate(self.keys)
        ]
        for c in self.clients:
            c.on_genesis(g.block, g.outputs, g.delta)

    def mine(self, txs=(), clients=None):
        """Submit ``txs`` to the node, propose, record and deliver."""
        for tx in txs:
            self.node.submit(tx)
        prop = self.node.propose_block()
        self.full.record_block(prop.block, prop.txs, prop.delta)
        self.node.commit(prop)
        rec = self.full.get_record(prop.hash)
        for c in self.clients if clients is None else clients:
            c.on_block(prop.block, rec.outputs, rec.inputs, rec.delta)
        return prop

    def pay(self, payer: int, payee: int, amount: int, **kw):
        return self.clients[payer].create_transaction([(self.clients[payee].address, amount)], **kw)


@pytest.fixture
def world():
    return World()


@pytest.fixture
def make_world():
    return World


@pytest.fixture
def archive_params():
    return ArchiveParams(h_archive=3, h_delete=8, b=10, n=4)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; printed again in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (ok, detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    seen = set()
    for key, reports in terminalreporter.stats.items():
        if key == "deselected":
            continue
        for r in reports:
            m = re.search(r"test_criterion_(\d+)_", getattr(r, "nodeid", ""))
            if m:
                seen.add(int(m.group(1)))
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(seen):
        ok, detail = ACCEPTANCE.get(number, (False, "did not run to completion"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")

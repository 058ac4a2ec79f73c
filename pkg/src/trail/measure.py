"""Build real objects at a given tree height and report their serialized sizes."""

from __future__ import annotations

from dataclasses import dataclass

from .core import (
    Block,
    KeyPair,
    Transaction,
    Txo,
    serialize_block,
    sha256,
    sign_all,
    transaction_body,
)
from .node import CompactBlock, Proposal, make_genesis
from .tree import (
    can_truncate,
    compute_block_delta,
    proof_from_nodes,
    truncate_proof,
    truncation_height,
)


@dataclass
class Funded:
    keypair: KeyPair
    genesis: Proposal

    @property
    def tree_height(self) -> int:
        return self.genesis.block.height

    def proof(self, txo: Txo, truncate_at: int | None = None):
        proof = proof_from_nodes(txo.index, self.genesis.delta, self.tree_height)
        if truncate_at is not None and can_truncate(txo.index, self.genesis.block.rightmost_index, truncate_at):
            proof = truncate_proof(proof, truncate_at)
        return proof


def funded_genesis(count: int, tree_height: int, balance: int = 100, seed: str = "measure") -> Funded:
    kp = KeyPair.from_seed(seed)
    return Funded(kp, make_genesis([Txo(kp.address, balance)] * count, tree_height))


def spend_each(funded: Funded, count: int, sign: bool = True) -> list[Transaction]:
    """One transaction per genesis TXO, each paying the whole balance onward."""
    g = funded.genesis
    anchor = g.hash
    txs = []
    for txo in g.outputs[:count]:
        tx = Transaction(anchor, ((txo, funded.proof(txo)),), (Txo(funded.keypair.address, txo.balance),))
        txs.append(sign_all(tx, [funded.keypair]) if sign else tx)
    return txs


def block_with_txs(tree_height: int, count: int) -> tuple[Block, list[Transaction]]:
    """A block over a funded genesis that carries ``count`` transactions."""
    funded = funded_genesis(max(count, 1), tree_height)
    txs = spend_each(funded, count)
    spent = [inp for tx in txs for inp in tx.inputs]
    created = [o for tx in txs for o in tx.outputs]
    g = funded.genesis
    result = compute_block_delta(g.block, spent, created, tree_height, g.hash)
    return result.block(g.hash), txs


def measure_block(tree_height: int, count: int = 0) -> int:
    return len(serialize_block(block_with_txs(tree_height, count)[0]))


def truncated_tx(i: int, o: int, tree_height: int = 255, t: float = 604800, interval: float = 15,
                 n: float = 10_000) -> Transaction:
    k = truncation_height(t, interval, n, tree_height)
    funded = funded_genesis(i, tree_height, balance=o)
    g = funded.genesis
    inputs = tuple((txo, funded.proof(txo, k)) for txo in g.outputs)
    outputs = tuple(Txo(funded.keypair.address, 1) for _ in range(o))
    return sign_all(Transaction(g.hash, inputs, outputs), [funded.keypair])


def measure_tx(p) -> int:
    return len(transaction_body(truncated_tx(p.i, p.o, p.H, p.t, p.interval, p.n)))


def measure_compact(tree_height: int, count: int) -> int:
    block = funded_genesis(1, tree_height).genesis.block
    ids = tuple(sha256(k.to_bytes(4, "big"))[:8] for k in range(count))
    return len(CompactBlock(block, ids).to_bytes())

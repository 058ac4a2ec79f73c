"""Archival node: every block, its approved transactions and its tree delta.

Serves the latest-update query clients use to resynchronize, plus block and
transaction fetches for Trail nodes that missed blocks.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import (
    Block,
    BranchID,
    MerkleProof,
    Transaction,
    Txo,
    block_hash,
    block_size,
    deserialize_block,
    deserialize_transaction,
    deserialize_txo,
    serialize_block,
    serialize_transaction,
    serialize_txo,
    sibling_path,
)
from .node import (
    BlockRejected,
    NodeConfig,
    Proposal,
    TrailNode,
    ValidationError,
    check_block,
    make_genesis,
)
from .tree import (
    DELTA_ENTRY_LEN,
    DELTA_HEADER_LEN,
    TreeDelta,
    deserialize_delta,
    null_hash,
    proof_from_nodes,
    serialize_delta,
)

log = logging.getLogger(__name__)


class UnknownBlock(KeyError):
    pass


class NotAncestor(ValueError):
    pass


@dataclass
class StoredBlock:
    block: Block
    height: int
    txs: list[Transaction]
    delta: TreeDelta
    outputs: list[Txo]
    inputs: list[Txo] = field(default_factory=list)

    @property
    def parent(self) -> bytes:
        return self.block.parent


class FullNode(TrailNode):
    """A Trail node that additionally keeps everything it has seen."""

    def __init__(self, genesis: Proposal, config: NodeConfig | None = None, path: str | Path | None = None):
        super().__init__(genesis.block, config or NodeConfig())
        self.genesis_hash = genesis.hash
        self.blocks: dict[bytes, StoredBlock] = {}
        self.children: dict[bytes, list[bytes]] = {}
        self.branch_log: dict[BranchID, list[tuple[bytes, int, bytes]]] = {}
        self.tip = self.genesis_hash
        self._stored_bytes = 0
        self._path = Path(path) if path is not None else None
        self._store(self.genesis_hash, StoredBlock(genesis.block, 0, [], genesis.delta, list(genesis.outputs)))
        if self._path is not None and not self._path.exists():
            self._append(_genesis_record(genesis.block.height, genesis.outputs))

    @classmethod
    def bootstrap(cls, allocations: Sequence[Txo], tree_height: int,
                  config: NodeConfig | None = None, path: str | Path | None = None) -> "FullNode":
        return cls(make_genesis(allocations, tree_height), config, path)

    # -- storage -------------------------------------------------------------

    def _store(self, h: bytes, rec: StoredBlock) -> None:
        self.blocks[h] = rec
        self._stored_bytes += (block_size(rec.block.height) + sum(len(serialize_transaction(t)) for t in rec.txs)
                               + DELTA_HEADER_LEN + DELTA_ENTRY_LEN * len(rec.delta))
        self.children.setdefault(h, [])
        if h != self.genesis_hash:
            self.children.setdefault(rec.parent, []).append(h)
        for branch, value in rec.delta.items():
            self.branch_log.setdefault(branch, []).append((h, rec.height, value))

    def record_block(self, block: Block, txs: Sequence[Transaction], delta: TreeDelta | None = None) -> bytes:
        """Re-validate and store a block. Returns its hash."""
        h = block_hash(block)
        if h in self.blocks:
            return h
        parent = self.blocks.get(block.parent)
        if parent is None:
            raise UnknownBlock(block.parent)
        result = check_block(parent.block, block, txs, self.config, block.parent)
        if delta is not None and dict(delta) != result.delta:
            raise BlockRejected("delta-mismatch")
        inputs = [txo for tx in txs for txo, _ in tx.inputs]
        self._store(h, StoredBlock(block, parent.height + 1, list(txs), result.delta, result.outputs, inputs))
        if self._path is not None:
            self._append(_block_record(block, txs))
        # longest chain, first seen wins ties
        if self.blocks[h].height > self.blocks[self.tip].height:
            self.tip = h
        return h

    def tips(self) -> list[bytes]:
        return [h for h, kids in self.children.items() if not kids]

    def height_of(self, h: bytes) -> int:
        return self._get(h).height

    def _get(self, h: bytes) -> StoredBlock:
        try:
            return self.blocks[h]
        except KeyError:
            raise UnknownBlock(h) from None

    def get_block(self, h: bytes) -> Block:
        return self._get(h).block

    def get_transactions(self, h: bytes) -> list[Transaction]:
        return list(self._get(h).txs)

    def get_record(self, h: bytes) -> StoredBlock:
        return self._get(h)

    # -- ancestry ------------------------------------------------------------

    def is_ancestor(self, a: bytes, b: bytes) -> bool:
        """True iff walking parent links from ``b`` reaches ``a`` (reflexive)."""
        target = self._get(a)
        cur = self._get(b)
        h = b
        while cur.height > target.height:
            h = cur.parent
            cur = self.blocks[h]
        return h == a

    def path(self, from_: bytes | None, to: bytes) -> list[bytes]:
        """Block hashes of the half-open interval (from_, to], oldest first.

        ``from_=None`` starts at (and includes) genesis.
        """
        if from_ is not None and not self.is_ancestor(from_, to):
            raise NotAncestor(f"{from_.hex()[:12]} is not an ancestor of {to.hex()[:12]}")
        out = []
        h = to
        while h != from_:
            out.append(h)
            if h == self.genesis_hash:
                break
            h = self.blocks[h].parent
        out.reverse()
        return out

    def common_ancestor(self, a: bytes, b: bytes) -> bytes:
        ra, rb = self._get(a), self._get(b)
        while ra.height > rb.height:
            a = ra.parent
            ra = self.blocks[a]
        while rb.height > ra.height:
            b = rb.parent
            rb = self.blocks[b]
        while a != b:
            a, b = ra.parent, rb.parent
            ra, rb = self.blocks[a], self.blocks[b]
        return a

    # -- queries -------------------------------------------------------------

    def latest_updates(self, branch_ids: Iterable[BranchID], from_: bytes | None,
                       to: bytes) -> dict[BranchID, tuple[bytes, bytes]]:
        """Most recent value of each branch updated in (from_, to].

        Branches not updated in the interval are omitted.
        """
        on_path = {h: self.blocks[h].height for h in self.path(from_, to)}
        out: dict[BranchID, tuple[bytes, bytes]] = {}
        for branch in branch_ids:
            for h, _, value in reversed(self.branch_log.get(branch, ())):
                if h in on_path:
                    out[branch] = (h, value)
                    break
        return out

    def proof_at(self, leaf_index: int, tip: bytes) -> MerkleProof:
        H = self.tree_height
        updates = self.latest_updates(sibling_path(leaf_index, H), None, tip)
        return proof_from_nodes(leaf_index, {b: v for b, (_, v) in updates.items()}, H)

    def txos_for(self, address: bytes, from_: bytes | None, to: bytes) -> tuple[list[tuple[Txo, bytes]], list[tuple[Txo, bytes]]]:
        """Own outputs created and own TXOs spent in (from_, to]."""
        new, used = [], []
        for h in self.path(from_, to):
            rec = self.blocks[h]
            new.extend((t, h) for t in rec.outputs if t.owner == address)
            used.extend((t, h) for t in rec.inputs if t.owner == address)
        return new, used

    def unspent(self, tip: bytes) -> dict[int, Txo]:
        live: dict[int, Txo] = {}
        for h in self.path(None, tip):
            rec = self.blocks[h]
            for t in rec.inputs:
                live.pop(t.index, None)
            for t in rec.outputs:
                live[t.index] = t
        return live

    def serve_subscription(self, request):
        from .client import filter_response

        rec = self._get(request.block_hash)
        return filter_response(request, rec.block, rec.outputs, rec.inputs, rec.delta)

    def stored_bytes(self) -> int:
        """Blocks, transactions and serialized deltas held by this node."""
        return self._stored_bytes

    # -- persistence ---------------------------------------------------------

    def _append(self, payload: bytes) -> None:
        with open(self._path, "ab") as fh:
            fh.write(struct.pack(">I", len(payload)) + payload)

    @classmethod
    def load(cls, path: str | Path, config: NodeConfig | None = None) -> "FullNode":
        records = list(_read_records(Path(path)))
        if not records or records[0][0] != 0:
            raise ValueError("store does not start with a genesis record")
        tree_height, outputs = _parse_genesis(records[0])
        node = cls(make_genesis([t.unplaced() for t in outputs], tree_height), config)
        for rec in records[1:]:
            block, txs = _parse_block(rec, tree_height)
            node.record_block(block, txs)
        node._path = Path(path)
        return node


def _genesis_record(tree_height: int, outputs: Sequence[Txo]) -> bytes:
    return bytes([0, tree_height]) + struct.pack(">I", len(outputs)) + b"".join(serialize_txo(t) for t in outputs)


def _block_record(block: Block, txs: Sequence[Transaction]) -> bytes:
    parts = [bytes([1]), serialize_block(block), struct.pack(">I", len(txs))]
    for tx in txs:
        raw = serialize_transaction(tx)
        parts.append(struct.pack(">I", len(raw)) + raw)
    return b"".join(parts)


def _read_records(path: Path):
    data = path.read_bytes()
    pos = 0
    while pos < len(data):
        (length,) = struct.unpack_from(">I", data, pos)
        pos += 4
        yield data[pos : pos + length]
        pos += length


def _parse_genesis(rec: bytes) -> tuple[int, list[Txo]]:
    tree_height = rec[1]
    (count,) = struct.unpack_from(">I", rec, 2)
    outs = [deserialize_txo(rec[6 + 128 * k : 134 + 128 * k]) for k in range(count)]
    return tree_height, outs


def _parse_block(rec: bytes, tree_height: int) -> tuple[Block, list[Transaction]]:
    size = 128 + 32 * tree_height
    block = deserialize_block(rec[1 : 1 + size], tree_height)
    pos = 1 + size
    (count,) = struct.unpack_from(">I", rec, pos)
    pos += 4
    txs = []
    for _ in range(count):
        (length,) = struct.unpack_from(">I", rec, pos)
        pos += 4
        txs.append(deserialize_transaction(rec[pos : pos + length]))
        pos += length
    return block, txs


def sync_node(node: TrailNode, full: FullNode, target: bytes) -> list[Transaction]:
    """Bring ``node`` to ``target`` using blocks and transactions from ``full``.

    If the node sits on another fork, its orphaned transactions and mempool
    are re-injected with proofs rebuilt at the new tip; the ones that no
    longer validate are returned.
    """
    current = node.latest_hash
    if current == target:
        return []
    fork = full.common_ancestor(current, target)
    leftovers: list[Transaction] = []
    if fork != current:
        for h in full.path(fork, current):
            leftovers.extend(full.get_transactions(h))
        leftovers.extend(node.reset_tip(full.get_block(fork)))
    for h in full.path(fork, target):
        node.apply_block(full.get_block(h), full.get_transactions(h))
    rejected = []
    for tx in leftovers:
        proofs = [full.proof_at(txo.index, target) for txo, _ in tx.inputs]
        try:
            node.submit(tx.with_proofs(proofs, block_hash=target))
        except ValidationError:
            rejected.append(tx)
    return rejected

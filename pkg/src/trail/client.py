"""Wallet side: own TXOs per fork, proof update histories, archiving, sync.

A client proves its own balance. It keeps, for every sibling node on the
paths of its unused TXOs, the values that node took in each block; a proof
at a given tip is assembled by taking, per sibling, the entry from the
nearest ancestor of that tip.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from .core import (
    HASH_LEN,
    TXO_LEN,
    Block,
    BranchID,
    KeyPair,
    MerkleProof,
    Transaction,
    Txo,
    block_hash,
    sibling_path,
    sign_all,
)
from .tree import TreeDelta, can_truncate, null_hash, truncate_proof

if TYPE_CHECKING:
    from .fullnode import FullNode

log = logging.getLogger(__name__)


class SyncRequired(Exception):
    def __init__(self, block: bytes):
        super().__init__(f"unknown block {block.hex()[:12]}; sync first")
        self.block = block


class InsufficientBalance(Exception):
    pass


class MissingHistory(Exception):
    """A proof node's history was deleted; fetch it from a full node."""

    def __init__(self, branches: Sequence[BranchID]):
        super().__init__(f"{len(branches)} proof nodes need a full-node fetch")
        self.branches = list(branches)


@dataclass(frozen=True)
class ArchiveParams:
    h_archive: int = 100
    h_delete: int = 100_000
    u: int = 1
    f: int = 2
    b: int = 40320
    n: int = 10_000
    t: float = 604800
    interval: float = 15

    def __post_init__(self) -> None:
        if not (self.h_delete > self.h_archive >= 1):
            raise ValueError("need h_delete > h_archive >= 1")


class HistoryStore:
    """BranchID -> {block hash -> node hash}, with byte accounting."""

    def __init__(self) -> None:
        self.data: dict[BranchID, dict[bytes, bytes]] = {}

    def put(self, branch: BranchID, block: bytes, value: bytes) -> None:
        self.data.setdefault(branch, {})[block] = value

    def get(self, branch: BranchID) -> dict[bytes, bytes] | None:
        return self.data.get(branch)

    def delete(self, branch: BranchID) -> None:
        self.data.pop(branch, None)

    def merge(self, branch: BranchID, entries: Mapping[bytes, bytes]) -> None:
        if entries:
            self.data.setdefault(branch, {}).update(entries)

    def pop(self, branch: BranchID) -> dict[bytes, bytes]:
        return self.data.pop(branch, {})

    def __contains__(self, branch: BranchID) -> bool:
        return branch in self.data

    def entry_count(self) -> int:
        return sum(len(v) for v in self.data.values())

    def total_bytes(self) -> int:
        return HASH_LEN * self.entry_count()

    def snapshot(self) -> dict[BranchID, dict[bytes, bytes]]:
        return {b: dict(v) for b, v in self.data.items()}


@dataclass(frozen=True)
class SubscriptionRequest:
    block_hash: bytes
    address: bytes
    branch_ids: tuple[BranchID, ...]


@dataclass(frozen=True)
class SubscriptionResponse:
    block: Block
    new_txos: tuple[Txo, ...]
    used_txos: tuple[Txo, ...]
    node_hashes: TreeDelta


def filter_response(request: SubscriptionRequest, block: Block, outputs: Iterable[Txo],
                    inputs: Iterable[Txo], delta: Mapping[BranchID, bytes]) -> SubscriptionResponse:
    """Node side of a subscription: only what concerns ``request.address``.

    Besides the requested branches, the sibling nodes of the client's new
    outputs are included so the client can build their first proofs.
    """
    new = tuple(t for t in outputs if t.owner == request.address)
    used = tuple(t for t in inputs if t.owner == request.address)
    wanted = set(request.branch_ids)
    for t in new:
        wanted.update(sibling_path(t.index, block.height))
    nodes = {b: delta[b] for b in sorted(wanted) if b in delta}
    return SubscriptionResponse(block, new, used, nodes)


class Client:
    def __init__(self, keypair: KeyPair, tree_height: int, *, archive: ArchiveParams | None = None,
                 trunc_height: int | None = None, fee_per_input: int = 0, name: str = ""):
        self.keypair = keypair
        self.address = keypair.address
        self.tree_height = tree_height
        self.params = archive
        self.trunc_height = trunc_height
        self.fee_per_input = fee_per_input
        self.name = name

        self.latest_block: bytes | None = None
        self.blocks: dict[bytes, bytes] = {}
        self.heights: dict[bytes, int] = {}
        self.headers: dict[bytes, Block] = {}
        self.children: dict[bytes, int] = {}
        self.used: dict[Txo, list[bytes]] = {}
        self.memory = HistoryStore()
        self.archive = HistoryStore()
        self.incomplete: set[BranchID] = set()
        self.pending: dict[int, int] = {}  # leaf index -> height the spend was issued at
        self._unused_at: dict[bytes, tuple[Txo, ...]] = {}
        self._ancestry_cache: tuple[bytes, dict[bytes, int]] | None = None

    # -- chain bookkeeping ---------------------------------------------------

    @property
    def latest_height(self) -> int:
        return self.heights[self.latest_block] if self.latest_block else -1

    def tips(self) -> list[bytes]:
        return [h for h in self.blocks if not self.children.get(h)]

    @property
    def unused(self) -> dict[bytes, list[Txo]]:
        """Unused TXOs at the latest block of each fork."""
        return {h: list(self._unused_at[h]) for h in self.tips() if h in self._unused_at}

    def unused_at(self, tip: bytes | None = None) -> list[Txo]:
        return list(self._unused_at.get(tip or self.latest_block, ()))

    def balance(self, tip: bytes | None = None) -> int:
        return sum(t.balance for t in self.unused_at(tip))

    def _add_header(self, h: bytes, block: Block, height: int) -> None:
        if h in self.blocks:
            return
        self.blocks[h] = block.parent
        self.heights[h] = height
        self.headers[h] = block
        self.children.setdefault(h, 0)
        if block.parent in self.blocks:
            self.children[block.parent] = self.children.get(block.parent, 0) + 1

    def _maybe_adopt(self, h: bytes) -> None:
        if self.latest_block is None or self.heights[h] > self.heights[self.latest_block]:
            self.latest_block = h

    def _ancestry(self, tip: bytes) -> dict[bytes, int]:
        if self._ancestry_cache and self._ancestry_cache[0] == tip:
            return self._ancestry_cache[1]
        anc = {}
        h = tip
        while h in self.heights:
            anc[h] = self.heights[h]
            h = self.blocks[h]
        self._ancestry_cache = (tip, anc)
        return anc

    # -- receiving blocks ----------------------------------------------------

    def on_genesis(self, block: Block, outputs: Sequence[Txo], delta: Mapping[BranchID, bytes]) -> None:
        h = block_hash(block)
        self._add_header(h, block, 0)
        mine = tuple(t for t in outputs if t.owner == self.address)
        self._unused_at[h] = mine
        self._maybe_adopt(h)
        self._record(h, delta)

    def on_block(self, block: Block, new_txos: Iterable[Txo], used_txos: Iterable[Txo],
                 node_hashes: Mapping[BranchID, bytes]) -> bytes:
        h = block_hash(block)
        if h in self.blocks:
            return h
        if block.parent not in self._unused_at:
            raise SyncRequired(block.parent)
        self._add_header(h, block, self.heights[block.parent] + 1)
        unused = list(self._unused_at[block.parent])
        spent = {t.index: t for t in used_txos if t.owner == self.address}
        for t in spent.values():
            self.used.setdefault(t, []).append(h)
            self.pending.pop(t.index, None)
        unused = [t for t in unused if t.index not in spent]
        unused.extend(t for t in new_txos if t.owner == self.address)
        self._unused_at[h] = tuple(unused)
        self._maybe_adopt(h)
        self._record(h, node_hashes)
        return h

    def on_response(self, response: SubscriptionResponse) -> bytes:
        return self.on_block(response.block, response.new_txos, response.used_txos, response.node_hashes)

    def _record(self, h: bytes, node_hashes: Mapping[BranchID, bytes]) -> None:
        if self.params is not None:
            self.archive_update(h, node_hashes)
            self.prune_and_delete(self.latest_height)
            return
        for t in self._unused_at[h]:
            for branch in sibling_path(t.index, self.tree_height):
                value = node_hashes.get(branch)
                if value is not None:
                    self.memory.put(branch, h, value)

    # -- archiving -----------------------------------------------------------

    def archive_update(self, h: bytes, node_hashes: Mapping[BranchID, bytes]) -> None:
        """Rebuild device memory around the unused TXOs at block ``h``;
        everything else moves to the archive."""
        memory = self.memory.data
        new_memory: dict[BranchID, dict[bytes, bytes]] = {}
        for t in self._unused_at[h]:
            index = t.index
            for level in range(self.tree_height):
                index = index + 1 if index % 2 == 0 else index - 1
                i = BranchID(level, index)
                if i in new_memory:
                    updates = new_memory[i]
                    if i in node_hashes:
                        updates[h] = node_hashes[i]
                elif i in memory:
                    updates = memory[i]
                    if i in node_hashes:
                        updates[h] = node_hashes[i]
                elif i in node_hashes:
                    updates = self.archive.pop(i)
                    updates[h] = node_hashes[i]
                else:
                    updates = self.archive.pop(i)
                new_memory[i] = updates
                index >>= 1
        for i, updates in memory.items():
            if i not in new_memory:
                self.archive.merge(i, updates)
        self.memory.data = new_memory

    def prune_and_delete(self, h_latest: int) -> None:
        if self.params is None:
            return
        # keep exactly h_archive heights on the device, matching the size model
        cut_archive = h_latest - self.params.h_archive + 1
        cut_delete = h_latest - self.params.h_delete
        if cut_archive <= 0:
            return
        heights = self.heights
        for branch, hist in self.memory.data.items():
            old = [bh for bh in hist if heights[bh] < cut_archive]
            if old:
                self.archive.merge(branch, {bh: hist.pop(bh) for bh in old})
        if cut_delete <= 0:
            return
        for branch in list(self.archive.data):
            hist = self.archive.data[branch]
            old = [bh for bh in hist if heights[bh] < cut_delete]
            for bh in old:
                del hist[bh]
            if old:
                self.incomplete.add(branch)
            if not hist:
                del self.archive.data[branch]
        for txo in [t for t, hs in self.used.items() if all(heights[b] < cut_delete for b in hs)]:
            del self.used[txo]
        tips = set(self.tips())
        for bh in [b for b in self._unused_at if heights[b] < cut_delete and b not in tips]:
            del self._unused_at[bh]

    # -- proofs --------------------------------------------------------------

    def proof(self, txo: Txo, tip: bytes | None = None) -> MerkleProof:
        tip = tip or self.latest_block
        anc = self._ancestry(tip)
        siblings = []
        missing = []
        for branch in sibling_path(txo.index, self.tree_height):
            best, best_h = None, -1
            for store in (self.memory, self.archive):
                hist = store.data.get(branch)
                if not hist:
                    continue
                for bh, value in hist.items():
                    hh = anc.get(bh)
                    if hh is not None and hh > best_h:
                        best, best_h = value, hh
            if best is None:
                if branch in self.incomplete:
                    missing.append(branch)
                best = null_hash(branch.height)
            siblings.append(best)
        if missing:
            raise MissingHistory(missing)
        return MerkleProof(tuple(siblings))

    def proofs(self, tip: bytes | None = None) -> dict[int, MerkleProof]:
        tip = tip or self.latest_block
        return {t.index: self.proof(t, tip) for t in self._unused_at.get(tip, ())}

    def restore_history(self, full: "FullNode", txo: Txo, tip: bytes | None = None) -> None:
        """Refetch a TXO's proof nodes from a full node after local deletion."""
        tip = tip or self.latest_block
        branches = sibling_path(txo.index, self.tree_height)
        for branch, (bh, value) in full.latest_updates(branches, None, tip).items():
            self.memory.put(branch, bh, value)
        self.incomplete.difference_update(branches)

    # -- issuing transactions ------------------------------------------------

    def create_transaction(self, payments: Sequence[tuple[bytes, int]], *,
                           consolidate: bool = False) -> Transaction:
        """Pay ``payments`` from the unused TXOs at the latest block.

        Inputs are picked largest first to keep their count (and the fee)
        low; with ``consolidate`` every available TXO is spent so the change
        leaves a single unused TXO.
        """
        tip = self.latest_block
        need = sum(amount for _, amount in payments)
        avail = sorted((t for t in self._unused_at.get(tip, ()) if t.index not in self.pending),
                       key=lambda t: (-t.balance, t.index))
        chosen: list[Txo] = []
        total = 0
        for t in avail:
            if total >= need + self.fee_per_input * len(chosen) and not consolidate:
                break
            chosen.append(t)
            total += t.balance
        fee = self.fee_per_input * len(chosen)
        if not chosen or total < need + fee:
            raise InsufficientBalance(f"have {total}, need {need} + fee {fee}")

        outputs = [Txo(addr, amount) for addr, amount in payments]
        if total - need - fee:
            outputs.append(Txo(self.address, total - need - fee))
        rightmost = self.headers[tip].rightmost_index
        inputs = []
        for t in chosen:
            proof = self.proof(t, tip)
            if self.trunc_height is not None and can_truncate(t.index, rightmost, self.trunc_height):
                proof = truncate_proof(proof, self.trunc_height)
            inputs.append((t, proof))
        tx = sign_all(Transaction(tip, tuple(inputs), tuple(outputs)), [self.keypair])
        for t in chosen:
            self.pending[t.index] = self.latest_height
        return tx

    def expire_pending(self, max_age: int) -> None:
        cutoff = self.latest_height - max_age
        for idx in [i for i, h in self.pending.items() if h < cutoff]:
            del self.pending[idx]

    # -- subscription and sync -----------------------------------------------

    def subscription_request(self, block: Block) -> SubscriptionRequest:
        base = self._unused_at.get(block.parent, ())
        ids: set[BranchID] = set()
        for t in base:
            ids.update(sibling_path(t.index, self.tree_height))
        return SubscriptionRequest(block_hash(block), self.address, tuple(sorted(ids)))

    def sync(self, full: "FullNode", from_: bytes, to: bytes) -> None:
        """Catch up from ``from_`` (a block we hold) to ``to`` in one request
        round: missing headers, own new/used TXOs, and the latest value of
        every sibling node of our unused TXOs in the interval."""
        if from_ == to:
            return
        path = full.path(from_, to)
        if from_ not in self._unused_at:
            raise SyncRequired(from_)
        for h in path:
            blk = full.get_block(h)
            self._add_header(h, blk, self.heights[blk.parent] + 1)
        new, used = full.txos_for(self.address, from_, to)
        events: dict[bytes, tuple[list[Txo], list[Txo]]] = {h: ([], []) for h in path}
        for t, h in new:
            events[h][0].append(t)
        for t, h in used:
            events[h][1].append(t)
        unused = list(self._unused_at[from_])
        for h in path:
            created, spent = events[h]
            gone = {t.index for t in spent}
            for t in spent:
                self.used.setdefault(t, []).append(h)
                self.pending.pop(t.index, None)
            unused = [t for t in unused if t.index not in gone] + created
        self._unused_at[to] = tuple(unused)
        wanted: set[BranchID] = set()
        for t in unused:
            wanted.update(sibling_path(t.index, self.tree_height))
        for branch, (bh, value) in full.latest_updates(sorted(wanted), from_, to).items():
            self.memory.put(branch, bh, value)
        self.latest_block = to
        if self.params is not None:
            self.archive_update(to, {})
            self.prune_and_delete(self.heights[to])

    def resync(self, full: "FullNode", to: bytes) -> bytes:
        """Sync to ``to`` from the nearest block we share with its chain."""
        start = self.latest_block
        h = start
        while h is not None and not (h in full.blocks and full.is_ancestor(h, to) and h in self._unused_at):
            h = self.blocks.get(h)
        if h is None:
            raise SyncRequired(to)
        if h != start:
            # spends issued on the abandoned fork may never confirm
            self.pending.clear()
        self.sync(full, h, to)
        return h

    # -- storage accounting --------------------------------------------------

    def device_bytes(self) -> int:
        tips = self.unused
        return self.memory.total_bytes() + TXO_LEN * sum(len(v) for v in tips.values())

    def archive_bytes(self) -> int:
        return self.archive.total_bytes() + TXO_LEN * len(self.used)

    def realized_forks(self) -> int:
        if self.params is None or self.latest_block is None:
            return max(1, len(self.tips()))
        floor = self.latest_height - self.params.h_archive
        return max(1, sum(1 for h in self.tips() if self.heights[h] >= floor))

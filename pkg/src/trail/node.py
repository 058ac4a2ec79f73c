"""Block proposer / validator that keeps nothing but the latest block and
its pending transactions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .core import (
    HASH_LEN,
    NO_INDEX,
    SHORT_ID_LEN,
    Block,
    BranchID,
    EncodingError,
    Transaction,
    Txo,
    block_hash,
    block_size,
    deserialize_block,
    leaf_hash_unused,
    leaf_hash_used,
    serialize_block,
    serialize_transaction,
    verify_signatures,
)
from .tree import (
    BlockDelta,
    TreeDelta,
    TreeError,
    compute_block_delta,
    empty_block,
    expand_proof,
    update_proof,
    verify_proof,
)

log = logging.getLogger(__name__)

# check numbers follow the order the five checks are listed in the protocol;
# they are evaluated in the order 1, 2, 5, 3, 4 so that a forged future index
# is reported as such rather than as a bad proof
CHECK_ANCHOR = 1
CHECK_MEMPOOL_CONFLICT = 2
CHECK_PROOF = 3
CHECK_AMOUNTS = 4
CHECK_INDEX = 5

ERROR_CODES = {
    CHECK_ANCHOR: "stale-anchor",
    CHECK_MEMPOOL_CONFLICT: "double-spend-in-mempool",
    CHECK_PROOF: "bad-proof",
    CHECK_AMOUNTS: "insufficient-inputs",
    CHECK_INDEX: "future-index",
}


class ValidationError(Exception):
    def __init__(self, check: int | None, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.check = check
        self.code = code
        self.detail = detail


def _fail(check: int, detail: str = "") -> ValidationError:
    return ValidationError(check, ERROR_CODES[check], detail)


class BlockRejected(Exception):
    def __init__(self, reason: str, mismatched: Sequence[str] = (), error: ValidationError | None = None):
        super().__init__(reason if not mismatched else f"{reason}: {', '.join(mismatched)}")
        self.reason = reason
        self.mismatched = list(mismatched)
        self.error = error


class UnknownParent(BlockRejected):
    def __init__(self, parent: bytes):
        super().__init__("unknown-parent")
        self.parent = parent


@dataclass(frozen=True)
class NodeConfig:
    fee_per_input: int = 0
    strict_sigs: bool = False
    reward_address: bytes | None = None  # None: fees are burned
    max_txs: int | None = None


def validate_transaction(
    tx: Transaction,
    latest: Block,
    pending: Iterable[Transaction] = (),
    config: NodeConfig = NodeConfig(),
    latest_hash: bytes | None = None,
) -> Transaction:
    """Run the five checks plus signatures against ``latest``.

    Returns the transaction with any truncated proofs expanded, which is the
    form nodes keep in their mempool.
    """
    try:
        tx.check_shape()
    except EncodingError as exc:
        raise ValidationError(None, "malformed", str(exc)) from exc
    if latest_hash is None:
        latest_hash = block_hash(latest)

    if tx.block_hash != latest_hash:
        raise _fail(CHECK_ANCHOR, "block hash is not the latest block")

    taken = {i for other in pending for i in other.input_indexes}
    own = tx.input_indexes
    if len(set(own)) != len(own):
        raise _fail(CHECK_MEMPOOL_CONFLICT, "input repeated within transaction")
    clash = taken.intersection(own)
    if clash:
        raise _fail(CHECK_MEMPOOL_CONFLICT, f"leaf {min(clash)} already pending")

    for i in own:
        if latest.rightmost_index == NO_INDEX or i > latest.rightmost_index:
            raise _fail(CHECK_INDEX, f"leaf {i} beyond rightmost index")

    proofs = []
    for txo, proof in tx.inputs:
        try:
            full = expand_proof(proof, latest) if proof.truncated else proof
            ok = verify_proof(leaf_hash_unused(txo), txo.index, full, latest.root, latest.height)
        except TreeError:
            ok = False
        if not ok:
            raise _fail(CHECK_PROOF, f"proof for leaf {txo.index} does not reach the root")
        proofs.append(full)

    fee_floor = config.fee_per_input * len(tx.inputs)
    if tx.output_total + fee_floor > tx.input_total:
        raise _fail(CHECK_AMOUNTS, f"outputs {tx.output_total} + fee {fee_floor} > inputs {tx.input_total}")

    if not verify_signatures(tx, config.strict_sigs):
        raise ValidationError(None, "bad-signature")
    if any(p.truncated for _, p in tx.inputs):
        tx = tx.with_proofs(proofs)
    return tx


def spent_by(delta: TreeDelta, txo: Txo) -> bool:
    return delta.get(BranchID(0, txo.index)) == leaf_hash_used(txo)


def refresh_mempool(
    mempool: Sequence[Transaction],
    delta: TreeDelta,
    new_block: Block,
    config: NodeConfig = NodeConfig(),
) -> list[Transaction]:
    """Carry pending transactions over to ``new_block``.

    Transactions with an input spent by the block are dropped; the rest get
    their proofs updated from ``delta`` and their anchor rewritten.
    """
    new_hash = block_hash(new_block)
    kept: list[Transaction] = []
    for tx in mempool:
        if any(spent_by(delta, txo) for txo, _ in tx.inputs):
            log.debug("dropping %s: input spent by new block", tx.short_id().hex())
            continue
        proofs = [update_proof(p, txo.index, delta) for txo, p in tx.inputs]
        refreshed = tx.with_proofs(proofs, block_hash=new_hash)
        try:
            kept.append(validate_transaction(refreshed, new_block, kept, config, new_hash))
        except ValidationError as exc:
            log.debug("dropping %s after refresh: %s", tx.short_id().hex(), exc)
    return kept


def block_outputs(txs: Sequence[Transaction], config: NodeConfig) -> list[Txo]:
    created = [txo for tx in txs for txo in tx.outputs]
    if config.reward_address is not None:
        fees = sum(tx.input_total - tx.output_total for tx in txs)
        if fees:
            created.append(Txo(config.reward_address, fees))
    return created


def check_block(
    parent: Block,
    block: Block,
    txs: Sequence[Transaction],
    config: NodeConfig = NodeConfig(),
    parent_hash: bytes | None = None,
) -> BlockDelta:
    """Validate ``txs`` against ``parent`` and recompute the tree fields.

    Raises :class:`BlockRejected` unless every derived field byte-matches
    ``block``.
    """
    if parent_hash is None:
        parent_hash = block_hash(parent)
    if block.parent != parent_hash:
        raise UnknownParent(block.parent)
    accepted: list[Transaction] = []
    for tx in txs:
        try:
            accepted.append(validate_transaction(tx, parent, accepted, config, parent_hash))
        except ValidationError as exc:
            raise BlockRejected("invalid-transaction", error=exc) from exc
    spent = [inp for tx in accepted for inp in tx.inputs]
    try:
        result = compute_block_delta(parent, spent, block_outputs(accepted, config),
                                     parent.height, parent_hash)
    except TreeError as exc:
        raise BlockRejected(f"tree-recomputation-failed: {exc}") from exc
    expected = result.block(parent_hash)
    mismatched = [
        name for name in ("parent", "root", "rightmost_index", "rightmost_hash", "rightmost_proof")
        if getattr(expected, name) != getattr(block, name)
    ]
    if mismatched:
        raise BlockRejected("field-mismatch", mismatched)
    return result


@dataclass
class Proposal:
    block: Block
    delta: TreeDelta
    txs: list[Transaction]
    outputs: list[Txo]

    @property
    def hash(self) -> bytes:
        return block_hash(self.block)


def make_genesis(allocations: Sequence[Txo], tree_height: int) -> Proposal:
    """First block: the initial allocations appended to the empty tree."""
    parent = empty_block(tree_height)
    result = compute_block_delta(parent, [], [t.unplaced() for t in allocations], tree_height)
    return Proposal(result.block(block_hash(parent)), result.delta, [], result.outputs)


@dataclass
class TrailNode:
    """A validator holding one block and its mempool."""

    latest_block: Block
    config: NodeConfig = field(default_factory=NodeConfig)
    mempool: list[Transaction] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._latest_hash = block_hash(self.latest_block)

    @property
    def latest_hash(self) -> bytes:
        return self._latest_hash

    @property
    def tree_height(self) -> int:
        return self.latest_block.height

    def retained_state(self) -> tuple[Block, list[Transaction]]:
        return self.latest_block, self.mempool

    def state_bytes(self) -> int:
        return block_size(self.tree_height) + sum(len(serialize_transaction(t)) for t in self.mempool)

    def validate(self, tx: Transaction) -> Transaction:
        return validate_transaction(tx, self.latest_block, self.mempool, self.config, self._latest_hash)

    def submit(self, tx: Transaction) -> Transaction:
        accepted = self.validate(tx)
        self.mempool.append(accepted)
        return accepted

    def propose_block(self, select: Callable[[Transaction], bool] | None = None) -> Proposal:
        txs = [tx for tx in self.mempool if select is None or select(tx)]
        if self.config.max_txs is not None:
            txs = txs[: self.config.max_txs]
        spent = [inp for tx in txs for inp in tx.inputs]
        result = compute_block_delta(self.latest_block, spent, block_outputs(txs, self.config),
                                     self.tree_height, self._latest_hash)
        return Proposal(result.block(self._latest_hash), result.delta, txs, result.outputs)

    def apply_block(self, block: Block, txs: Sequence[Transaction]) -> BlockDelta:
        result = check_block(self.latest_block, block, txs, self.config, self._latest_hash)
        self._advance(block, result.delta)
        return result

    def commit(self, proposal: Proposal) -> None:
        """Adopt our own proposal without recomputing it."""
        if proposal.block.parent != self._latest_hash:
            raise UnknownParent(proposal.block.parent)
        self._advance(proposal.block, proposal.delta)

    def _advance(self, block: Block, delta: TreeDelta) -> None:
        self.latest_block = block
        self._latest_hash = block_hash(block)
        self.mempool = refresh_mempool(self.mempool, delta, block, self.config)

    def reset_tip(self, block: Block) -> list[Transaction]:
        """Jump to another block, returning the abandoned mempool."""
        dropped = self.mempool
        self.latest_block = block
        self._latest_hash = block_hash(block)
        self.mempool = []
        return dropped


# -- compact relay -----------------------------------------------------------


@dataclass(frozen=True)
class CompactBlock:
    block: Block
    short_ids: tuple[bytes, ...]

    def to_bytes(self) -> bytes:
        return serialize_block(self.block) + b"".join(self.short_ids)

    @classmethod
    def from_bytes(cls, data: bytes, tree_height: int) -> "CompactBlock":
        size = block_size(tree_height)
        if len(data) < size or (len(data) - size) % SHORT_ID_LEN:
            raise EncodingError("bad compact block length")
        block = deserialize_block(data[:size], tree_height)
        ids = tuple(bytes(data[p : p + SHORT_ID_LEN]) for p in range(size, len(data), SHORT_ID_LEN))
        return cls(block, ids)

    def __len__(self) -> int:
        return block_size(self.block.height) + SHORT_ID_LEN * len(self.short_ids)


def encode_compact(block: Block, txs: Sequence[Transaction]) -> CompactBlock:
    return CompactBlock(block, tuple(tx.short_id() for tx in txs))


def decode_compact(compact: CompactBlock, mempool: Iterable[Transaction]) -> tuple[list[Transaction | None], list[bytes]]:
    """Resolve short ids against ``mempool``.

    Returns the transaction list in block order with ``None`` holes, plus the
    unresolved ids. Prefix collisions inside the mempool count as unresolved.
    """
    table: dict[bytes, Transaction | None] = {}
    for tx in mempool:
        sid = tx.short_id()
        table[sid] = None if sid in table else tx
    txs: list[Transaction | None] = []
    missing: list[bytes] = []
    for sid in compact.short_ids:
        tx = table.get(sid)
        txs.append(tx)
        if tx is None:
            missing.append(sid)
    return txs, missing


def fill_missing(compact: CompactBlock, partial: Sequence[Transaction | None],
                 fetched: Iterable[Transaction]) -> list[Transaction]:
    """Fill the holes left by :func:`decode_compact` with fetched transactions."""
    by_id = {tx.short_id(): tx for tx in fetched}
    out = []
    for sid, tx in zip(compact.short_ids, partial, strict=True):
        if tx is None:
            tx = by_id.get(sid)
            if tx is None:
                raise KeyError(f"short id {sid.hex()} still unresolved")
        out.append(tx)
    return out

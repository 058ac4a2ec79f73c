"""The TXO tree: a perfect binary Merkle tree over every output ever created.

Nobody stores the tree. A block carries the root plus the rightmost leaf and
its proof; proposers rebuild the touched part of the tree from those and the
proofs carried by transaction inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .core import (
    BRANCH_ID_LEN,
    HASH_LEN,
    NO_INDEX,
    Block,
    BranchID,
    EncodingError,
    MerkleProof,
    Txo,
    block_hash,
    hash_pair,
    leaf_hash_unused,
    leaf_hash_used,
    sha256,
)

TreeDelta = dict  # BranchID -> 32-byte hash

DENSE_MAX_HEIGHT = 20


class TreeError(ValueError):
    """Base class for failures while recomputing a block's tree state."""


class ProofError(TreeError):
    pass


class InconsistentProofs(TreeError):
    pass


class MissingSibling(TreeError):
    pass


class IndexOverflow(TreeError):
    pass


@lru_cache(maxsize=None)
def null_chain(height: int) -> tuple[bytes, ...]:
    """Null hashes N_0..N_height with N_0 = H("") and N_{h+1} = H(N_h || N_h)."""
    chain = [sha256(b"")]
    for _ in range(height):
        chain.append(hash_pair(chain[-1], chain[-1]))
    return tuple(chain)


def null_hash(h: int) -> bytes:
    return null_chain(max(h, 0))[h]


def fold_proof(leaf_hash: bytes, index: int, siblings: Sequence[bytes]) -> bytes:
    node = leaf_hash
    for h, sib in enumerate(siblings):
        node = hash_pair(sib, node) if (index >> h) & 1 else hash_pair(node, sib)
    return node


def verify_proof(leaf_hash: bytes, index: int, proof: MerkleProof | Sequence[bytes], root: bytes,
                 tree_height: int | None = None) -> bool:
    siblings = proof.siblings if isinstance(proof, MerkleProof) else tuple(proof)
    if isinstance(proof, MerkleProof) and proof.truncated:
        raise ProofError("truncated proof must be expanded before verification")
    if tree_height is not None and len(siblings) != tree_height:
        raise ProofError(f"proof has {len(siblings)} entries, tree height is {tree_height}")
    if index >> len(siblings):
        return False
    return fold_proof(leaf_hash, index, siblings) == root


# -- dense oracle -----------------------------------------------------------


def dense_root(leaves: Mapping[int, bytes], tree_height: int) -> tuple[bytes, list[list[bytes]]]:
    """Materialize all 2^H leaves and every internal node.

    Returns the root and ``levels`` where ``levels[h][i]`` is the node at
    branchID(h, i). Test-scale only.
    """
    if tree_height > DENSE_MAX_HEIGHT:
        raise ValueError(f"dense tree limited to height {DENSE_MAX_HEIGHT}")
    width = 1 << tree_height
    level = [null_hash(0)] * width
    for i, value in leaves.items():
        if not 0 <= i < width:
            raise IndexError(f"leaf {i} outside tree of height {tree_height}")
        level[i] = value
    levels = [level]
    for _ in range(tree_height):
        prev = levels[-1]
        levels.append([hash_pair(prev[2 * j], prev[2 * j + 1]) for j in range(len(prev) // 2)])
    return levels[-1][0], levels


class DenseTree:
    """Fully materialized tree with point updates; the reference the sparse
    computation is checked against."""

    def __init__(self, tree_height: int, leaves: Mapping[int, bytes] | None = None):
        if tree_height > DENSE_MAX_HEIGHT:
            raise ValueError(f"dense tree limited to height {DENSE_MAX_HEIGHT}")
        self.height = tree_height
        if leaves:
            _, self.levels = dense_root(leaves, tree_height)
        else:
            self.levels = [[null_hash(h)] * (1 << (tree_height - h)) for h in range(tree_height + 1)]
        self.leaves = dict(leaves or {})

    def copy(self) -> "DenseTree":
        other = DenseTree.__new__(DenseTree)
        other.height = self.height
        other.levels = [list(level) for level in self.levels]
        other.leaves = dict(self.leaves)
        return other

    @property
    def root(self) -> bytes:
        return self.levels[self.height][0]

    def set_leaf(self, index: int, value: bytes) -> None:
        self.leaves[index] = value
        self.levels[0][index] = value
        for h in range(self.height):
            index >>= 1
            below = self.levels[h]
            self.levels[h + 1][index] = hash_pair(below[2 * index], below[2 * index + 1])

    def node(self, branch: BranchID) -> bytes:
        return self.levels[branch.height][branch.index]

    def proof(self, index: int) -> MerkleProof:
        return MerkleProof(tuple(self.levels[h][(index >> h) ^ 1] for h in range(self.height)))


# -- block-level sparse recomputation ----------------------------------------


@dataclass
class BlockDelta:
    root: bytes
    rightmost_index: int
    rightmost_hash: bytes
    rightmost_proof: tuple[bytes, ...]
    delta: TreeDelta
    outputs: list[Txo]
    provenance: dict = field(default_factory=dict, repr=False)

    def block(self, parent_hash: bytes) -> Block:
        return Block(parent_hash, self.root, self.rightmost_index, self.rightmost_hash, self.rightmost_proof)


def empty_block(tree_height: int) -> Block:
    """The pre-genesis block: an all-null tree with no rightmost leaf."""
    nulls = null_chain(tree_height)
    return Block(bytes(HASH_LEN), nulls[tree_height], NO_INDEX, nulls[0], nulls[:tree_height])


_STATE_TAGS = ("input-proof", "rightmost-proof", "rightmost-hash")


def compute_block_delta(
    parent: Block,
    spent: Sequence[tuple[Txo, MerkleProof]],
    created: Sequence[Txo],
    tree_height: int | None = None,
    parent_hash: bytes | None = None,
) -> BlockDelta:
    """Recompute the tree for a child of ``parent``.

    ``spent`` proofs must be full length and valid against ``parent.root``.
    Created outputs get consecutive indexes after the parent's rightmost
    leaf. Per level, values are assigned in the order: input proof entries,
    the parent's rightmost proof entry, then (leaf level) the rightmost hash,
    new outputs and spent leaves, or (upper levels) values computed from the
    level below. Later assignments win.
    """
    H = parent.height if tree_height is None else tree_height
    if len(parent.rightmost_proof) != H:
        raise ProofError("parent rightmost proof has wrong length")
    if parent_hash is None:
        parent_hash = block_hash(parent)

    r = None if parent.rightmost_index == NO_INDEX else parent.rightmost_index
    if not spent and not created:
        return BlockDelta(parent.root, parent.rightmost_index, parent.rightmost_hash,
                          parent.rightmost_proof, {}, [])

    seen: set[int] = set()
    for txo, proof in spent:
        if txo.index is None:
            raise ProofError("spent TXO without index")
        if txo.index in seen:
            raise InconsistentProofs(f"leaf {txo.index} spent twice")
        seen.add(txo.index)
        if proof.truncated or len(proof.siblings) != H:
            raise ProofError(f"proof for leaf {txo.index} is not full length")
        if r is None or txo.index > r:
            raise ProofError(f"leaf {txo.index} is beyond the rightmost index")
        if not verify_proof(leaf_hash_unused(txo), txo.index, proof, parent.root):
            raise ProofError(f"proof for leaf {txo.index} does not match parent root")

    start = 0 if r is None else r + 1
    outputs = [txo.placed(start + j, parent_hash) for j, txo in enumerate(created)]
    new_r = outputs[-1].index if outputs else r
    if new_r >= (1 << H):
        raise IndexOverflow(f"output index {new_r} exceeds tree capacity 2^{H}")

    delta: TreeDelta = {}
    provenance: dict[BranchID, str] = {}
    levels: list[dict[int, bytes]] = []
    computed: dict[int, bytes] = {}
    for h in range(H):
        cur: dict[int, bytes] = {}
        tags: dict[int, str] = {}
        # values read from the parent's state; all must agree unless overwritten
        stale: dict[int, bytes] = {}
        conflicts: set[int] = set()

        def assign_state(pos: int, value: bytes, tag: str) -> None:
            if pos in stale and stale[pos] != value:
                conflicts.add(pos)
            stale[pos] = value
            cur[pos] = value
            tags[pos] = tag

        for txo, proof in spent:
            assign_state((txo.index >> h) ^ 1, proof.siblings[h], "input-proof")
        if r is not None:
            assign_state((r >> h) ^ 1, parent.rightmost_proof[h], "rightmost-proof")
        if h == 0:
            if r is not None:
                assign_state(r, parent.rightmost_hash, "rightmost-hash")
            for txo in outputs:
                cur[txo.index] = leaf_hash_unused(txo)
                tags[txo.index] = "new-output"
            for txo, _ in spent:
                cur[txo.index] = leaf_hash_used(txo)
                tags[txo.index] = "spent-input"
        else:
            for pos, value in computed.items():
                cur[pos] = value
                tags[pos] = "computed"

        unresolved = [p for p in conflicts if tags[p] in _STATE_TAGS]
        if unresolved:
            raise InconsistentProofs(f"conflicting proof values at height {h}, index {min(unresolved)}")

        rightmost = max(cur)
        if rightmost % 2 == 0 and rightmost + 1 not in cur:
            cur[rightmost + 1] = null_hash(h)
            tags[rightmost + 1] = "null-fill"

        computed = {}
        for pos in sorted({p >> 1 for p in cur}):
            left, right = cur.get(2 * pos), cur.get(2 * pos + 1)
            if left is None or right is None:
                missing = 2 * pos if left is None else 2 * pos + 1
                raise MissingSibling(f"no value for branchID({h}, {missing})")
            computed[pos] = hash_pair(left, right)

        for pos, value in cur.items():
            delta[BranchID(h, pos)] = value
            provenance[BranchID(h, pos)] = tags[pos]
        levels.append(cur)

    root = computed[0]
    delta[BranchID(H, 0)] = root
    provenance[BranchID(H, 0)] = "computed"
    rightmost_proof = tuple(levels[h][(new_r >> h) ^ 1] for h in range(H))
    return BlockDelta(root, new_r, levels[0][new_r], rightmost_proof, delta, outputs, provenance)


def update_proof(proof: MerkleProof, leaf_index: int, delta: Mapping[BranchID, bytes]) -> MerkleProof:
    if not delta:
        return proof
    siblings = list(proof.siblings)
    for h in range(len(siblings)):
        value = delta.get(BranchID(h, (leaf_index >> h) ^ 1))
        if value is not None:
            siblings[h] = value
    return MerkleProof(tuple(siblings), proof.truncated)


def proof_from_nodes(leaf_index: int, nodes: Mapping[BranchID, bytes], tree_height: int) -> MerkleProof:
    """Read a proof off a node map, treating absent siblings as null subtrees."""
    nulls = null_chain(tree_height)
    return MerkleProof(tuple(
        nodes.get(BranchID(h, (leaf_index >> h) ^ 1), nulls[h]) for h in range(tree_height)
    ))


# -- truncation --------------------------------------------------------------


def truncation_height(t: float, interval: float, n: float, tree_height: int | None = None) -> int:
    """ceil(log2(t*n/interval)), capped at the tree height."""
    span = t * n / interval
    if span <= 1:
        raise ValueError("t*n/interval must exceed 1")
    k = math.ceil(math.log2(span))
    return k if tree_height is None else min(k, tree_height)


def can_truncate(leaf_index: int, rightmost_index: int, trunc_height: int) -> bool:
    """Entries at heights >= trunc_height coincide with the rightmost proof
    exactly when the leaf and the rightmost leaf share that ancestor."""
    if rightmost_index == NO_INDEX:
        return False
    return leaf_index >> trunc_height == rightmost_index >> trunc_height


def truncate_proof(proof: MerkleProof, trunc_height: int) -> MerkleProof:
    if proof.truncated:
        raise ProofError("proof already truncated")
    if not 0 <= trunc_height <= len(proof.siblings):
        raise ValueError("truncation height out of range")
    return MerkleProof(proof.siblings[:trunc_height], truncated=True)


def expand_proof(proof: MerkleProof, latest: Block) -> MerkleProof:
    if not proof.truncated:
        raise ProofError("proof is not truncated")
    k = len(proof.siblings)
    if k > latest.height:
        raise ProofError("truncated proof longer than tree height")
    return MerkleProof(proof.siblings + latest.rightmost_proof[k:])


# -- delta wire format -------------------------------------------------------

DELTA_HEADER_LEN = 4
DELTA_ENTRY_LEN = BRANCH_ID_LEN + HASH_LEN


def serialize_delta(delta: Mapping[BranchID, bytes]) -> bytes:
    parts = [struct.pack(">I", len(delta))]
    for branch in sorted(delta):
        parts.append(branch.to_bytes())
        parts.append(delta[branch])
    return b"".join(parts)


def deserialize_delta(data: bytes) -> TreeDelta:
    if len(data) < 4:
        raise EncodingError("delta too short")
    (count,) = struct.unpack_from(">I", data, 0)
    record = DELTA_ENTRY_LEN
    if len(data) != 4 + count * record:
        raise EncodingError("delta length mismatch")
    out: TreeDelta = {}
    for k in range(count):
        pos = 4 + k * record
        out[BranchID.from_bytes(data[pos : pos + BRANCH_ID_LEN])] = bytes(data[pos + BRANCH_ID_LEN : pos + record])
    return out


def delta_subset(delta: Mapping[BranchID, bytes], branches: Iterable[BranchID]) -> TreeDelta:
    return {b: delta[b] for b in branches if b in delta}

"""Domain types, byte layouts, hashing and signatures.

Every layout here is fixed-width and big-endian; these bytes are what the
other modules hash, sign, store and put on the wire.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

HASH_LEN = 32
TXO_LEN = 128
BRANCH_ID_LEN = 33
SHORT_ID_LEN = 8
DEFAULT_HEIGHT = 255
MAX_HEIGHT = 255
UINT256_MAX = (1 << 256) - 1
# rightmost_index of the empty tree; serialized as all-ones
NO_INDEX = UINT256_MAX
ZERO_HASH = bytes(HASH_LEN)

PUBKEY_LEN = 32
SIG_LEN = 64


class EncodingError(ValueError):
    """Raised on malformed byte input or out-of-range field values."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_pair(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(left + right).digest()


def u256(value: int) -> bytes:
    if not 0 <= value <= UINT256_MAX:
        raise EncodingError(f"value out of uint256 range: {value}")
    return value.to_bytes(32, "big")


def _check_hash(value: bytes, name: str) -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != HASH_LEN:
        raise EncodingError(f"{name} must be {HASH_LEN} bytes")


def checked_add(a: int, b: int) -> int:
    total = a + b
    if total > UINT256_MAX:
        raise OverflowError("uint256 overflow")
    return total


class BranchID(NamedTuple):
    """Address of a tree node: ``height`` 0 is the leaf level."""

    height: int
    index: int

    def to_bytes(self) -> bytes:
        if not 0 <= self.height <= MAX_HEIGHT:
            raise EncodingError(f"height out of range: {self.height}")
        return bytes([self.height]) + u256(self.index)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BranchID":
        if len(data) != BRANCH_ID_LEN:
            raise EncodingError("branchID must be 33 bytes")
        return cls(data[0], int.from_bytes(data[1:], "big"))

    def sibling(self) -> "BranchID":
        return BranchID(self.height, self.index ^ 1)

    def parent(self) -> "BranchID":
        return BranchID(self.height + 1, self.index >> 1)

    def valid_for(self, tree_height: int) -> bool:
        return 0 <= self.height <= tree_height and 0 <= self.index < (1 << (tree_height - self.height))


def sibling_path(leaf_index: int, tree_height: int) -> list[BranchID]:
    """Branch IDs of the proof siblings of a leaf, ordered from the leaf up."""
    return [BranchID(h, (leaf_index >> h) ^ 1) for h in range(tree_height)]


@dataclass(frozen=True)
class Txo:
    owner: bytes
    balance: int
    index: int | None = None  # None while the output is not yet in a block
    parent_block: bytes = ZERO_HASH

    def __post_init__(self) -> None:
        _check_hash(self.owner, "owner")
        _check_hash(self.parent_block, "parent_block")
        if not 0 <= self.balance <= UINT256_MAX:
            raise EncodingError(f"balance out of range: {self.balance}")
        if self.index is not None and not 0 <= self.index <= UINT256_MAX:
            raise EncodingError(f"index out of range: {self.index}")

    @property
    def assigned(self) -> bool:
        return self.index is not None

    def placed(self, index: int, parent_block: bytes) -> "Txo":
        return replace(self, index=index, parent_block=parent_block)

    def unplaced(self) -> "Txo":
        return replace(self, index=None, parent_block=ZERO_HASH)


def serialize_txo(txo: Txo) -> bytes:
    """Index, ParentBlock, OwnerAddress, Balance; 32 bytes each.

    An unassigned index is written as zero; the surrounding transaction
    layout carries the fact that outputs are unassigned.
    """
    return u256(txo.index or 0) + txo.parent_block + txo.owner + u256(txo.balance)


def deserialize_txo(data: bytes, assigned: bool = True) -> Txo:
    if len(data) != TXO_LEN:
        raise EncodingError("TXO must be 128 bytes")
    index = int.from_bytes(data[0:32], "big")
    return Txo(
        owner=bytes(data[64:96]),
        balance=int.from_bytes(data[96:128], "big"),
        index=index if assigned else None,
        parent_block=bytes(data[32:64]),
    )


def _require_index(txo: Txo) -> None:
    if txo.index is None:
        raise ValueError("TXO has no assigned leaf index")


def leaf_hash_unused(txo: Txo) -> bytes:
    _require_index(txo)
    return sha256(serialize_txo(txo))


def leaf_hash_used(txo: Txo) -> bytes:
    _require_index(txo)
    raw = serialize_txo(txo)
    return sha256(raw + raw)


@dataclass(frozen=True)
class MerkleProof:
    """Sibling hashes from the leaf upward.

    A truncated proof keeps only the entries below ``len(siblings)``; the
    rest are taken from the latest block's rightmost proof.
    """

    siblings: tuple[bytes, ...]
    truncated: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "siblings", tuple(self.siblings))

    @property
    def truncation_height(self) -> int | None:
        return len(self.siblings) if self.truncated else None

    def __len__(self) -> int:
        return len(self.siblings)


@dataclass(frozen=True)
class Block:
    parent: bytes
    root: bytes
    rightmost_index: int
    rightmost_hash: bytes
    rightmost_proof: tuple[bytes, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rightmost_proof", tuple(self.rightmost_proof))

    @property
    def height(self) -> int:
        return len(self.rightmost_proof)

    @property
    def is_empty_tree(self) -> bool:
        return self.rightmost_index == NO_INDEX

    def hash(self) -> bytes:
        return block_hash(self)

    @cached_property
    def _digest(self) -> bytes:
        return sha256(serialize_block(self))


def block_size(tree_height: int) -> int:
    return 4 * HASH_LEN + HASH_LEN * tree_height


def serialize_block(block: Block, tree_height: int | None = None) -> bytes:
    expected = block.height if tree_height is None else tree_height
    if len(block.rightmost_proof) != expected or expected == 0:
        raise EncodingError(
            f"rightmost proof must have {expected} entries, got {len(block.rightmost_proof)}"
        )
    for name in ("parent", "root", "rightmost_hash"):
        _check_hash(getattr(block, name), name)
    parts = [block.parent, block.root, u256(block.rightmost_index), block.rightmost_hash]
    if any(len(entry) != HASH_LEN for entry in block.rightmost_proof):
        raise EncodingError(f"rightmost_proof entries must be {HASH_LEN} bytes")
    parts.extend(block.rightmost_proof)
    return b"".join(parts)


def deserialize_block(data: bytes, tree_height: int) -> Block:
    if len(data) != block_size(tree_height):
        raise EncodingError(f"block must be {block_size(tree_height)} bytes, got {len(data)}")
    proof = tuple(bytes(data[128 + 32 * h : 160 + 32 * h]) for h in range(tree_height))
    return Block(
        parent=bytes(data[0:32]),
        root=bytes(data[32:64]),
        rightmost_index=int.from_bytes(data[64:96], "big"),
        rightmost_hash=bytes(data[96:128]),
        rightmost_proof=proof,
    )


def block_hash(block: Block) -> bytes:
    # blocks are immutable, so the digest is computed once per object
    return block._digest


# -- keys and signatures ----------------------------------------------------


def address_of(pubkey: bytes) -> bytes:
    return sha256(pubkey)


@dataclass(frozen=True)
class Signature:
    pubkey: bytes
    sig: bytes

    def __post_init__(self) -> None:
        if len(self.pubkey) != PUBKEY_LEN or len(self.sig) != SIG_LEN:
            raise EncodingError("malformed signature")

    @property
    def address(self) -> bytes:
        return address_of(self.pubkey)

    def to_bytes(self) -> bytes:
        return self.pubkey + self.sig


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    pubkey: bytes = field(init=False)
    _key: Ed25519PrivateKey = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.secret) != 32:
            raise EncodingError("secret key must be 32 bytes")
        key = Ed25519PrivateKey.from_private_bytes(self.secret)
        raw = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        object.__setattr__(self, "pubkey", raw)
        object.__setattr__(self, "_key", key)

    @classmethod
    def from_seed(cls, seed: bytes | str | int) -> "KeyPair":
        if isinstance(seed, int):
            seed = seed.to_bytes(8, "big")
        elif isinstance(seed, str):
            seed = seed.encode()
        return cls(sha256(b"trail-key" + seed))

    @property
    def address(self) -> bytes:
        return address_of(self.pubkey)

    def sign_bytes(self, payload: bytes) -> Signature:
        return Signature(self.pubkey, self._key.sign(payload))


# -- transactions -----------------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    block_hash: bytes
    inputs: tuple[tuple[Txo, MerkleProof], ...]
    outputs: tuple[Txo, ...]
    sigs: tuple[Signature, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple((t, p) for t, p in self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "sigs", tuple(self.sigs))

    def check_shape(self) -> None:
        if not self.inputs or not self.outputs:
            raise EncodingError("transaction needs at least one input and one output")
        for txo, _ in self.inputs:
            if txo.index is None:
                raise EncodingError("input TXO without leaf index")
        for txo in self.outputs:
            if txo.index is not None:
                raise EncodingError("output TXO must not carry a leaf index")

    @property
    def input_total(self) -> int:
        return sum(t.balance for t, _ in self.inputs)

    @property
    def output_total(self) -> int:
        return sum(t.balance for t in self.outputs)

    @property
    def input_indexes(self) -> list[int]:
        return [t.index for t, _ in self.inputs]

    def input_owners(self) -> list[bytes]:
        seen: dict[bytes, None] = {}
        for txo, _ in self.inputs:
            seen.setdefault(txo.owner, None)
        return list(seen)

    def with_proofs(self, proofs: Sequence[MerkleProof], block_hash: bytes | None = None) -> "Transaction":
        inputs = tuple((txo, proof) for (txo, _), proof in zip(self.inputs, proofs, strict=True))
        return replace(self, inputs=inputs, block_hash=self.block_hash if block_hash is None else block_hash)

    def txid(self) -> bytes:
        return txid(self)

    def short_id(self) -> bytes:
        return txid(self)[:SHORT_ID_LEN]

    def payload_id(self) -> bytes:
        """Stable identity that survives proof refresh and anchor rewrite."""
        return sha256(signing_payload(self) + b"".join(s.to_bytes() for s in self.sigs))


def signing_payload(tx: Transaction) -> bytes:
    """Bytes covered by signatures.

    Proofs and the block-hash anchor are excluded so nodes may refresh them;
    output index and parent-block fields are zeroed because they are only
    fixed at block inclusion.
    """
    parts = [b"trail-tx", struct.pack(">HH", len(tx.inputs), len(tx.outputs))]
    parts.extend(serialize_txo(txo) for txo, _ in tx.inputs)
    parts.extend(serialize_txo(txo.unplaced()) for txo in tx.outputs)
    return b"".join(parts)


def transaction_body(tx: Transaction) -> bytes:
    """BlockHash, then each input TXO with its proof entries, then outputs.

    This is the part whose size the transaction-size model describes; the
    envelope added by :func:`serialize_transaction` holds counts, the
    truncation flags and signatures.
    """
    parts = [tx.block_hash]
    for txo, proof in tx.inputs:
        parts.append(serialize_txo(txo))
        parts.extend(proof.siblings)
    parts.extend(serialize_txo(txo) for txo in tx.outputs)
    return b"".join(parts)


def serialize_transaction(tx: Transaction) -> bytes:
    header = [struct.pack(">HHH", len(tx.inputs), len(tx.outputs), len(tx.sigs))]
    for _, proof in tx.inputs:
        header.append(struct.pack(">BB", 1 if proof.truncated else 0, len(proof.siblings) & 0xFF))
        if len(proof.siblings) > MAX_HEIGHT:
            raise EncodingError("proof longer than 255 entries")
    sigs = b"".join(s.to_bytes() for s in tx.sigs)
    return b"".join(header) + transaction_body(tx) + sigs


def deserialize_transaction(data: bytes) -> Transaction:
    try:
        n_in, n_out, n_sig = struct.unpack_from(">HHH", data, 0)
        pos = 6
        proof_shapes = []
        for _ in range(n_in):
            flag, length = struct.unpack_from(">BB", data, pos)
            proof_shapes.append((bool(flag), length))
            pos += 2
        anchor = bytes(data[pos : pos + 32])
        pos += 32
        inputs = []
        for truncated, length in proof_shapes:
            txo = deserialize_txo(data[pos : pos + TXO_LEN])
            pos += TXO_LEN
            sibs = tuple(bytes(data[pos + 32 * k : pos + 32 * k + 32]) for k in range(length))
            pos += 32 * length
            inputs.append((txo, MerkleProof(sibs, truncated)))
        outputs = []
        for _ in range(n_out):
            outputs.append(deserialize_txo(data[pos : pos + TXO_LEN], assigned=False))
            pos += TXO_LEN
        sigs = []
        for _ in range(n_sig):
            chunk = data[pos : pos + PUBKEY_LEN + SIG_LEN]
            sigs.append(Signature(bytes(chunk[:PUBKEY_LEN]), bytes(chunk[PUBKEY_LEN:])))
            pos += PUBKEY_LEN + SIG_LEN
    except (struct.error, IndexError) as exc:
        raise EncodingError(f"truncated transaction: {exc}") from exc
    if pos != len(data) or len(anchor) != HASH_LEN:
        raise EncodingError("transaction length mismatch")
    return Transaction(anchor, tuple(inputs), tuple(outputs), tuple(sigs))


def txid(tx: Transaction) -> bytes:
    return sha256(serialize_transaction(tx))


def sign(tx: Transaction, keypair: KeyPair) -> Signature:
    return keypair.sign_bytes(signing_payload(tx))


def verify(tx: Transaction, sig: Signature, address: bytes) -> bool:
    if sig.address != address:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(sig.pubkey).verify(sig.sig, signing_payload(tx))
    except (InvalidSignature, ValueError):
        return False
    return True


def required_signers(tx: Transaction, strict: bool = False) -> list[bytes]:
    owners = tx.input_owners()
    if strict:
        for txo in tx.outputs:
            if txo.owner not in owners:
                owners.append(txo.owner)
    return owners


def verify_signatures(tx: Transaction, strict: bool = False) -> bool:
    """Every required owner address must have a valid signature in ``tx.sigs``."""
    payload = signing_payload(tx)
    by_address = {}
    for sig in tx.sigs:
        by_address.setdefault(sig.address, sig)
    for owner in required_signers(tx, strict):
        sig = by_address.get(owner)
        if sig is None:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(sig.pubkey).verify(sig.sig, payload)
        except (InvalidSignature, ValueError):
            return False
    return True


def sign_all(tx: Transaction, keypairs: Sequence[KeyPair]) -> Transaction:
    return replace(tx, sigs=tuple(sign(tx, kp) for kp in keypairs))

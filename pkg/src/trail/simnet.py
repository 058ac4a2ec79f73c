"""Deterministic discrete-event harness for clients, Trail nodes and full nodes.

Time is logical: each block height spans ``TICKS`` ticks. Clients gossip
transactions first, proposers act mid-height, and compact blocks, client
notifications and subscription traffic are delivered with seeded delays.
Consensus is a scripted proposer rotation; forks and partitions are injected
from the scenario.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .client import (
    ArchiveParams,
    Client,
    InsufficientBalance,
    MissingHistory,
    SyncRequired,
    filter_response,
)
from .core import (
    NO_INDEX,
    BranchID,
    KeyPair,
    MerkleProof,
    Transaction,
    Txo,
    block_hash,
    deserialize_block,
    deserialize_transaction,
    leaf_hash_unused,
    leaf_hash_used,
    serialize_block,
    serialize_transaction,
    sign_all,
    transaction_body,
)
from .fullnode import FullNode, sync_node
from .node import (
    BlockRejected,
    CompactBlock,
    NodeConfig,
    Proposal,
    TrailNode,
    ValidationError,
    decode_compact,
    encode_compact,
    fill_missing,
)
from .tree import (
    DENSE_MAX_HEIGHT,
    DenseTree,
    TreeError,
    compute_block_delta,
    truncation_height,
    verify_proof,
)

log = logging.getLogger(__name__)

TICKS = 20
PROPOSE_AT = 10
HOPS = 3  # notice, subscription request, subscription response

FIXTURE_KINDS = {
    # kind -> expected outcome (check number, or failure label for blocks)
    "mempool-double-spend": 2,
    "stale-anchor": 1,
    "stale-proof": 3,
    "replay-spent": 3,
    "future-index": 5,
    "bad-signature": "bad-signature",
    "block-double-spend": 2,
    "tampered-root": "root",
}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    seed: int = 0
    tree_height: int = 16
    clients: int = 4
    trail_nodes: int = 1
    full_nodes: int = 1
    blocks: int = 10
    txs_per_block: int = 2
    initial_balance: int = 1000
    initial_txos: int = 1
    payment_min: int = 1
    payment_max: int = 50
    fee_per_input: int = 0
    reward: bool = False
    consolidate: bool = True
    # height -> proposer node indexes competing at that height
    forks: dict[int, list[int]] = field(default_factory=dict)
    # client index -> list of [first, last] offline heights
    churn: dict[int, list[list[int]]] = field(default_factory=dict)
    # list of {"start", "end", "groups": [[participant ids]]}
    partitions: list[dict] = field(default_factory=list)
    # list of {"height", "kind"}
    fixtures: list[dict] = field(default_factory=list)
    # clients mirrored by an always-online filtered subscriber with the same key
    shadows: list[int] = field(default_factory=list)
    archive: dict | None = None
    trunc: dict | None = None  # {"t", "interval", "n"}
    max_delay: int = 0
    loss_rate: float = 0.0
    tx_fanout: int = 0  # nodes each transaction is sent to; 0 means all
    pending_expiry: int = 3
    oracle: bool = True
    proof_check_every: int = 1
    record_blocks: bool = True

    def validate(self) -> None:
        if not 1 <= self.tree_height <= 255:
            raise ScenarioError("tree_height must be in 1..255")
        if self.trail_nodes < 1 or self.full_nodes < 1 or self.clients < 0:
            raise ScenarioError("need at least one trail node and one full node")
        if self.clients * self.initial_txos > (1 << self.tree_height):
            raise ScenarioError("initial allocations exceed tree capacity")
        if HOPS * (1 + self.max_delay) >= TICKS - PROPOSE_AT:
            raise ScenarioError(f"max_delay must be below {(TICKS - PROPOSE_AT) // HOPS - 1}")
        if not 0 <= self.tx_fanout <= self.trail_nodes:
            raise ScenarioError("tx_fanout must be in 0..trail_nodes")
        for h, props in self.forks.items():
            if not 1 <= int(h) <= self.blocks or len(props) < 2:
                raise ScenarioError(f"bad fork entry at height {h}")
            if any(not 0 <= p < self.trail_nodes for p in props) or len(set(props)) != len(props):
                raise ScenarioError(f"fork at {h} names unknown or repeated proposers")
        for c, ranges in self.churn.items():
            if not 0 <= int(c) < self.clients:
                raise ScenarioError(f"churn names unknown client {c}")
            for lo, hi in ranges:
                if lo > hi or lo < 1:
                    raise ScenarioError(f"bad churn range {lo}-{hi}")
        for c in self.shadows:
            if not 0 <= c < self.clients:
                raise ScenarioError(f"shadow of unknown client {c}")
        for fx in self.fixtures:
            if fx.get("kind") not in FIXTURE_KINDS:
                raise ScenarioError(f"unknown fixture {fx.get('kind')}")
            if not 1 <= fx.get("height", 0) <= self.blocks:
                raise ScenarioError("fixture height out of range")
        if self.archive is not None:
            ArchiveParams(**self.archive)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        data = dict(data)
        if "forks" in data:
            data["forks"] = {int(k): list(v) for k, v in data["forks"].items()}
        if "churn" in data:
            data["churn"] = {int(k): [list(r) for r in v] for k, v in data["churn"].items()}
        sc = cls(**data)
        sc.validate()
        return sc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def offline(self, client: int, height: int) -> bool:
        return any(lo <= height <= hi for lo, hi in self.churn.get(client, ()))


class EventLog:
    def __init__(self) -> None:
        self.records: list[dict] = []

    def add(self, record_type: str, /, **fields: Any) -> None:
        fields["type"] = record_type
        self.records.append(fields)

    def __iter__(self) -> Iterator[dict]:
        return iter(self.records)

    def of(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["type"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "EventLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.records.append(json.loads(line))
        return out

    @property
    def violations(self) -> list[dict]:
        return self.of("violation")


@dataclass(order=True)
class _Envelope:
    time: int
    seq: int
    src: str = field(compare=False)
    dst: str = field(compare=False)
    kind: str = field(compare=False)
    payload: Any = field(compare=False)
    size: int = field(compare=False)
    origin: str | None = field(default=None, compare=False)


class Network:
    """Seeded message queue; drops to offline or partitioned participants."""

    def __init__(self, rng: random.Random, log: EventLog, max_delay: int = 0, loss_rate: float = 0.0):
        self.rng = rng
        self.log = log
        self.max_delay = max_delay
        self.loss_rate = loss_rate
        self.queue: list[_Envelope] = []
        self.seq = itertools.count()
        self.offline: set[str] = set()
        self.groups: dict[str, int] = {}

    def set_offline(self, who: str, offline: bool) -> None:
        if offline:
            self.offline.add(who)
        else:
            self.offline.discard(who)

    def partition(self, groups: list[list[str]] | None) -> None:
        self.groups = {}
        for g, members in enumerate(groups or ()):
            for m in members:
                self.groups[m] = g

    def connected(self, a: str, b: str) -> bool:
        ga, gb = self.groups.get(a), self.groups.get(b)
        return ga is None or gb is None or ga == gb

    def send(self, now: int, src: str, dst: str, kind: str, payload: Any, size: int,
             origin: str | None = None) -> None:
        if dst in self.offline or src in self.offline or not self.connected(origin or src, dst):
            self.log.add("drop", t=now, kind=kind, src=src, dst=dst, bytes=size)
            return
        if self.loss_rate and self.rng.random() < self.loss_rate:
            self.log.add("drop", t=now, kind=kind, src=src, dst=dst, bytes=size, lost=True)
            return
        delay = 1 + (self.rng.randint(0, self.max_delay) if self.max_delay else 0)
        heapq.heappush(self.queue, _Envelope(now + delay, next(self.seq), src, dst, kind, payload, size, origin))

    def due(self, until: int) -> Iterator[_Envelope]:
        while self.queue and self.queue[0].time <= until:
            env = heapq.heappop(self.queue)
            if env.dst in self.offline or not self.connected(env.origin or env.src, env.dst):
                self.log.add("drop", t=env.time, kind=env.kind, src=env.src, dst=env.dst, bytes=env.size)
                continue
            self.log.add("msg", t=env.time, kind=env.kind, src=env.src, dst=env.dst, bytes=env.size)
            yield env


def tx_size_expected(tx: Transaction, tree_height: int) -> int:
    """Body size predicted from the input count, output count and which
    inputs carry truncated proofs."""
    size = 32 + 128 * len(tx.outputs)
    for _, proof in tx.inputs:
        size += 128 + 32 * (len(proof.siblings) if proof.truncated else tree_height)
    return size


class ChainOracle:
    """Independent per-block safety checks over every recorded block.

    Tracks each block's leaf map to catch double spends and leaf reuse,
    conserves supply against burned fees, and (at small heights) checks the
    block's tree fields against a dense recomputation.
    """

    def __init__(self, genesis_hash: bytes, genesis_outputs, tree_height: int,
                 reward_address: bytes | None = None, dense: bool = True):
        self.H = tree_height
        self.reward_address = reward_address
        self.initial_supply = sum(t.balance for t in genesis_outputs)
        self.burned = {genesis_hash: 0}
        self.supply = {genesis_hash: self.initial_supply}
        self.leaves = {genesis_hash: {t.index: leaf_hash_unused(t) for t in genesis_outputs}}
        self.use_dense = dense and tree_height <= DENSE_MAX_HEIGHT
        self._dense: tuple[bytes, DenseTree] | None = None
        self.dense_checked = 0

    def check(self, h: bytes, rec) -> list[tuple[str, dict]]:
        problems: list[tuple[str, dict]] = []
        parent = rec.block.parent
        reward = 0
        if self.reward_address is not None and rec.outputs and rec.outputs[-1].owner == self.reward_address:
            reward = rec.outputs[-1].balance
        fees = sum(tx.input_total - tx.output_total for tx in rec.txs)
        self.burned[h] = self.burned[parent] + fees - reward
        self.supply[h] = (self.supply[parent] + sum(t.balance for t in rec.outputs)
                          - sum(t.balance for t in rec.inputs))
        if self.supply[h] != self.initial_supply - self.burned[h]:
            problems.append(("supply", {"block": h.hex(), "supply": self.supply[h],
                                        "expected": self.initial_supply - self.burned[h]}))
        leaves = dict(self.leaves[parent])
        for t in rec.inputs:
            if leaves.get(t.index) != leaf_hash_unused(t):
                problems.append(("double-spend", {"block": h.hex(), "leaf": t.index}))
            leaves[t.index] = leaf_hash_used(t)
        for t in rec.outputs:
            if t.index in leaves:
                problems.append(("leaf-reassigned", {"block": h.hex(), "leaf": t.index}))
            leaves[t.index] = leaf_hash_unused(t)
        self.leaves[h] = leaves
        if self.use_dense and not self._dense_matches(h, parent, rec):
            problems.append(("oracle-mismatch", {"block": h.hex()}))
        return problems

    def _dense_matches(self, h: bytes, parent: bytes, rec) -> bool:
        if self._dense is not None and self._dense[0] == parent:
            tree = self._dense[1]
        else:
            tree = DenseTree(self.H, self.leaves[parent])
        for t in rec.inputs:
            tree.set_leaf(t.index, leaf_hash_used(t))
        for t in rec.outputs:
            tree.set_leaf(t.index, leaf_hash_unused(t))
        self._dense = (h, tree)
        self.dense_checked += 1
        blk = rec.block
        ok = tree.root == blk.root
        if blk.rightmost_index != NO_INDEX:
            ok = ok and tree.levels[0][blk.rightmost_index] == blk.rightmost_hash
            ok = ok and tree.proof(blk.rightmost_index).siblings == blk.rightmost_proof
        return ok


class Simulation:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = scenario
        self.H = scenario.tree_height
        self.rng = random.Random(scenario.seed)
        self.log = EventLog()
        self.net = Network(random.Random(scenario.seed ^ 0x5EED), self.log, scenario.max_delay, scenario.loss_rate)
        self.now = 0
        self.height = 0

        self.trunc_height = None
        if scenario.trunc:
            self.trunc_height = truncation_height(scenario.trunc["t"], scenario.trunc["interval"],
                                                  scenario.trunc["n"], self.H)
        params = ArchiveParams(**scenario.archive) if scenario.archive else None
        self.archive_params = params

        reward_kp = KeyPair.from_seed(f"proposer-{scenario.seed}")
        self.config = NodeConfig(fee_per_input=scenario.fee_per_input,
                                 reward_address=reward_kp.address if scenario.reward else None)
        self.keys = [KeyPair.from_seed(f"client-{scenario.seed}-{i}") for i in range(scenario.clients)]
        self.clients = [
            Client(kp, self.H, archive=params, trunc_height=self.trunc_height,
                   fee_per_input=scenario.fee_per_input, name=f"c{i}")
            for i, kp in enumerate(self.keys)
        ]
        self.shadows = {
            i: Client(self.keys[i], self.H, archive=None, name=f"s{i}") for i in scenario.shadows
        }
        allocations = [Txo(kp.address, scenario.initial_balance)
                       for kp in self.keys for _ in range(scenario.initial_txos)]
        self.initial_supply = sum(t.balance for t in allocations)
        self.full_nodes = [FullNode.bootstrap(allocations, self.H, self.config) for _ in range(scenario.full_nodes)]
        self.full = self.full_nodes[0]
        genesis = self.full.get_record(self.full.genesis_hash)
        self.nodes = [TrailNode(genesis.block, self.config) for _ in range(scenario.trail_nodes)]
        for c in itertools.chain(self.clients, self.shadows.values()):
            c.on_genesis(genesis.block, genesis.outputs, genesis.delta)

        self.relay_cache: dict[str, dict[bytes, Transaction]] = {}
        self.pending_compact: dict[str, tuple[CompactBlock, list]] = {}
        self.origin: dict[bytes, str] = {self.full.genesis_hash: "genesis"}
        self.oracle = ChainOracle(self.full.genesis_hash, genesis.outputs, self.H,
                                  self.config.reward_address, dense=scenario.oracle)
        self.issued: dict[bytes, tuple[int, int]] = {}  # payload id -> (client, height)
        self.returning: set[int] = set()
        self.inclusion_delay: list[int] = []
        self.stats = {"device_max": [0] * len(self.clients), "archive_max": [0] * len(self.clients),
                      "u_max": [0] * len(self.clients), "f_max": [1] * len(self.clients),
                      "outputs_max": 0, "block_sizes": set(), "compact_mismatch": 0,
                      "tx_size_mismatch": 0, "node_state_max": 0, "full_bytes": 0}

        self.log.add("genesis", tree_height=self.H, scenario=scenario.to_dict(),
                     allocations=[[t.owner.hex(), t.balance] for t in allocations],
                     fee_per_input=scenario.fee_per_input,
                     reward_address=self.config.reward_address.hex() if self.config.reward_address else None,
                     hash=self.full.genesis_hash.hex())

    # -- helpers ---------------------------------------------------------------

    def violation(self, what: str, **fields: Any) -> None:
        self.log.add("violation", t=self.now, height=self.height, what=what, **fields)

    def _client_id(self, i: int) -> str:
        return f"c{i}"

    # -- main loop -------------------------------------------------------------

    def run(self) -> EventLog:
        for k in range(1, self.sc.blocks + 1):
            self.step(k)
        self.drain(self.now + TICKS)
        self.finish()
        return self.log

    def step(self, k: int) -> None:
        self.height = k
        base = k * TICKS
        self.now = base
        self._apply_partitions(k)
        self._apply_churn(k)
        for c in self.clients:
            c.expire_pending(self.sc.pending_expiry)
        self._issue_transactions(k)
        self.drain(base + PROPOSE_AT - 1)
        self.now = base + PROPOSE_AT - 1
        for fx in self.sc.fixtures:
            if fx["height"] == k:
                self._run_fixture(fx["kind"])
        self.now = base + PROPOSE_AT
        self._propose(k)
        self.drain(base + TICKS - 1)
        self.now = base + TICKS - 1
        self._sweep(k)

    def drain(self, until: int) -> None:
        for env in self.net.due(until):
            self.now = env.time
            getattr(self, f"_on_{env.kind}")(env)

    # -- schedules -------------------------------------------------------------

    def _apply_partitions(self, k: int) -> None:
        groups = None
        for p in self.sc.partitions:
            if p["start"] <= k <= p["end"]:
                groups = p["groups"]
        fork = self.sc.forks.get(k)
        if fork:
            sides: list[list[str]] = [[] for _ in fork]
            for j, p in enumerate(fork):
                sides[j].append(f"n{p}")
            others = [i for i in range(len(self.nodes)) if i not in fork]
            for pos, i in enumerate(others):
                sides[pos % len(fork)].append(f"n{i}")
            for i in range(len(self.clients)):
                sides[i % len(fork)].append(self._client_id(i))
            groups = sides
        self.net.partition(groups)
        if groups:
            self.log.add("partition", t=self.now, height=k, groups=groups)

    def _apply_churn(self, k: int) -> None:
        for i, c in enumerate(self.clients):
            cid = self._client_id(i)
            off = self.sc.offline(i, k)
            was = cid in self.net.offline
            if off and not was:
                self.net.set_offline(cid, True)
                self.log.add("offline", t=self.now, client=cid, height=k)
            elif was and not off:
                self.net.set_offline(cid, False)
                self.log.add("online", t=self.now, client=cid, height=k)
                self._resync_client(i, self.full.tip, reason="reconnect")
                self.returning.add(i)

    def _resync_client(self, i: int, target: bytes, reason: str) -> None:
        c = self.clients[i]
        if c.latest_block == target:
            return
        before = c.latest_block
        start = c.resync(self.full, target)
        self.log.add("client-sync", t=self.now, client=self._client_id(i), reason=reason,
                     latest=before.hex(), fork_point=start.hex(), to=target.hex(),
                     height=self.full.height_of(target))
        shadow = self.shadows.get(i)
        if shadow is not None and shadow.latest_block == c.latest_block:
            try:
                same = c.proofs() == shadow.proofs() and c.unused_at() == shadow.unused_at()
            except MissingHistory:
                return
            self.log.add("twin-check", t=self.now, client=self._client_id(i), proofs=len(c.unused_at()), equal=same)
            if not same:
                self.violation("twin-mismatch-after-sync", client=self._client_id(i))

    # -- clients ---------------------------------------------------------------

    def _issue_transactions(self, k: int) -> None:
        online = [i for i in range(len(self.clients)) if self._client_id(i) not in self.net.offline]
        candidates = [i for i in online if self.clients[i].balance() > self.sc.fee_per_input
                      and any(t.index not in self.clients[i].pending for t in self.clients[i].unused_at())]
        self.rng.shuffle(candidates)
        # a client back from churn spends straight away
        candidates.sort(key=lambda i: i not in self.returning)
        self.returning.clear()
        for i in candidates[: self.sc.txs_per_block]:
            c = self.clients[i]
            payees = [j for j in range(len(self.clients)) if j != i] or [i]
            payee = self.clients[self.rng.choice(payees)]
            free = sum(t.balance for t in c.unused_at() if t.index not in c.pending)
            n_inputs = len([t for t in c.unused_at() if t.index not in c.pending]) if self.sc.consolidate else 1
            budget = free - self.sc.fee_per_input * n_inputs
            if budget < self.sc.payment_min:
                continue
            amount = self.rng.randint(self.sc.payment_min, min(self.sc.payment_max, budget))
            try:
                tx = self._create(c, [(payee.address, amount)])
            except InsufficientBalance:
                continue
            self.issued[tx.payload_id()] = (i, k)
            size = len(serialize_transaction(tx))
            self.log.add("tx-issued", t=self.now, client=c.name, id=tx.payload_id().hex()[:16],
                         inputs=len(tx.inputs), outputs=len(tx.outputs), bytes=size,
                         body_bytes=len(transaction_body(tx)))
            if len(transaction_body(tx)) != tx_size_expected(tx, self.H):
                self.stats["tx_size_mismatch"] += 1
            targets = range(len(self.nodes))
            if self.sc.tx_fanout:
                targets = sorted(self.rng.sample(targets, self.sc.tx_fanout))
            for n in targets:
                self.net.send(self.now, c.name, f"n{n}", "tx", tx, size)

    def _create(self, c: Client, payments) -> Transaction:
        try:
            return c.create_transaction(payments, consolidate=self.sc.consolidate)
        except MissingHistory:
            for t in c.unused_at():
                c.restore_history(self.full, t)
            self.log.add("history-restore", t=self.now, client=c.name)
            return c.create_transaction(payments, consolidate=self.sc.consolidate)

    def _on_notice(self, env: _Envelope) -> None:
        i = int(env.dst[1:])
        c = self.clients[i]
        block = env.payload
        h = block_hash(block)
        if h in c.blocks:
            return
        if block.parent not in c.blocks:
            if self.full.height_of(h) > c.latest_height:
                self._resync_client(i, h, reason="unknown-parent")
            return
        req = c.subscription_request(block)
        self.net.send(self.now, env.dst, env.src, "subreq", req, 32 + 32 + 33 * len(req.branch_ids))

    def _on_subreq(self, env: _Envelope) -> None:
        full = self.full_nodes[int(env.dst[1:])]
        resp = full.serve_subscription(env.payload)
        size = (len(serialize_block(resp.block)) + 128 * (len(resp.new_txos) + len(resp.used_txos))
                + 65 * len(resp.node_hashes))
        self.net.send(self.now, env.dst, env.src, "subresp", resp, size)

    def _on_subresp(self, env: _Envelope) -> None:
        i = int(env.dst[1:])
        try:
            self.clients[i].on_response(env.payload)
        except SyncRequired:
            self._resync_client(i, block_hash(env.payload.block), reason="unknown-parent")

    # -- nodes -----------------------------------------------------------------

    def _on_tx(self, env: _Envelope) -> None:
        node = self.nodes[int(env.dst[1:])]
        tx: Transaction = env.payload
        try:
            node.submit(tx)
            self.log.add("tx-accepted", t=self.now, node=env.dst, id=tx.payload_id().hex()[:16])
        except ValidationError as exc:
            self.log.add("tx-rejected", t=self.now, node=env.dst, id=tx.payload_id().hex()[:16],
                         code=exc.code, check=exc.check)

    def _propose(self, k: int) -> None:
        proposers = self.sc.forks.get(k) or [(k - 1) % len(self.nodes)]
        for side, p in enumerate(proposers):
            node = self.nodes[p]
            name = f"n{p}"
            if len(proposers) > 1:
                # competing proposers split the mempool so their blocks differ
                order = sorted(tx.short_id() for tx in node.mempool)
                mine = {sid for j, sid in enumerate(order) if j % len(proposers) == side}
                prop = node.propose_block(lambda tx: tx.short_id() in mine)
            else:
                prop = node.propose_block()
            if prop.hash in self.full.blocks:
                self.log.add("fork-collapsed", t=self.now, height=k, proposer=name)
                node.commit(prop)
                continue
            h = prop.hash
            for full in self.full_nodes:
                try:
                    full.record_block(prop.block, prop.txs, prop.delta)
                except (BlockRejected, KeyError) as exc:
                    self.violation("honest-block-unrecordable", node=name, error=str(exc))
                    return
            node.commit(prop)
            self.origin[h] = name
            self.relay_cache[name] = {tx.short_id(): tx for tx in prop.txs}
            self._on_recorded(h, prop)
            compact = encode_compact(prop.block, prop.txs)
            size = len(compact.to_bytes())
            if size != len(compact):
                self.stats["compact_mismatch"] += 1
            self.stats["block_sizes"].add(len(serialize_block(prop.block)))
            rec = {"t": self.now, "height": self.full.height_of(h), "hash": h.hex(), "proposer": name,
                   "parent": prop.block.parent.hex(), "txs": len(prop.txs), "outputs": len(prop.outputs),
                   "block_bytes": len(serialize_block(prop.block)), "compact_bytes": size,
                   "tx_ids": [tx.payload_id().hex()[:16] for tx in prop.txs]}
            if self.sc.record_blocks:
                rec["block"] = serialize_block(prop.block).hex()
                rec["tx_data"] = [serialize_transaction(tx).hex() for tx in prop.txs]
            self.log.add("block", **rec)
            for n in range(len(self.nodes)):
                if n != p:
                    self.net.send(self.now, name, f"n{n}", "compact", compact, size)
            for i in range(len(self.clients)):
                self.net.send(self.now, "f0", self._client_id(i), "notice", prop.block,
                              len(serialize_block(prop.block)), origin=name)

    def _on_compact(self, env: _Envelope) -> None:
        name = env.dst
        node = self.nodes[int(name[1:])]
        compact: CompactBlock = env.payload
        h = block_hash(compact.block)
        if h == node.latest_hash:
            return
        if compact.block.parent != node.latest_hash:
            self._maybe_switch(name, node, h)
            return
        partial, missing = decode_compact(compact, node.mempool)
        if missing:
            self.pending_compact[name] = (compact, partial)
            self.log.add("compact-missing", t=self.now, node=name, missing=len(missing))
            self.net.send(self.now, name, env.src, "txreq", (h, missing), 8 * len(missing))
            return
        self._apply(name, node, compact.block, partial)

    def _on_txreq(self, env: _Envelope) -> None:
        _, missing = env.payload
        cache = self.relay_cache.get(env.dst, {})
        txs = [cache[sid] for sid in missing if sid in cache]
        self.net.send(self.now, env.dst, env.src, "txresp", (env.payload[0], txs),
                      sum(len(serialize_transaction(t)) for t in txs))

    def _on_txresp(self, env: _Envelope) -> None:
        name = env.dst
        node = self.nodes[int(name[1:])]
        h, txs = env.payload
        pending = self.pending_compact.pop(name, None)
        if pending is None or block_hash(pending[0].block) != h:
            return
        compact, partial = pending
        if compact.block.parent != node.latest_hash:
            self._maybe_switch(name, node, h)
            return
        try:
            full_list = fill_missing(compact, partial, txs)
        except KeyError:
            self._maybe_switch(name, node, h)
            return
        self._apply(name, node, compact.block, full_list)

    def _apply(self, name: str, node: TrailNode, block, txs) -> None:
        try:
            node.apply_block(block, txs)
            self.log.add("block-accepted", t=self.now, node=name, hash=block_hash(block).hex())
        except BlockRejected as exc:
            self.violation("honest-block-rejected", node=name, reason=str(exc))

    def _maybe_switch(self, name: str, node: TrailNode, h: bytes) -> None:
        full = self.full
        if h not in full.blocks or full.height_of(h) <= full.height_of(node.latest_hash):
            self.log.add("block-ignored", t=self.now, node=name, hash=h.hex())
            return
        reorg = not full.is_ancestor(node.latest_hash, h)
        try:
            dropped = sync_node(node, full, h)
        except BlockRejected as exc:
            self.violation("node-sync-failed", node=name, reason=str(exc))
            return
        self.log.add("node-sync", t=self.now, node=name, to=h.hex(), reorg=reorg, dropped=len(dropped))

    # -- bookkeeping on every recorded block -----------------------------------

    def _on_recorded(self, h: bytes, prop: Proposal) -> None:
        rec = self.full.get_record(h)
        for what, fields in self.oracle.check(h, rec):
            self.violation(what, **fields)
        if len(rec.outputs) > self.stats["outputs_max"]:
            self.stats["outputs_max"] = len(rec.outputs)
        for tx in rec.txs:
            issued = self.issued.pop(tx.payload_id(), None)
            if issued is not None:
                self.inclusion_delay.append(self.height - issued[1])
        for i, shadow in self.shadows.items():
            try:
                req = shadow.subscription_request(prop.block)
                shadow.on_response(filter_response(req, prop.block, rec.outputs, rec.inputs, rec.delta))
            except SyncRequired:
                self.violation("shadow-desync", client=f"s{i}")

    # -- fixtures --------------------------------------------------------------

    def _fixture_candidates(self) -> Iterator[tuple[int, TrailNode, Client, Txo]]:
        """Clients at the same tip as some node, with a free unused TXO."""
        order = list(range(len(self.clients)))
        self.rng.shuffle(order)
        for i in order:
            c = self.clients[i]
            if self._client_id(i) in self.net.offline:
                continue
            for n, node in enumerate(self.nodes):
                if node.latest_hash != c.latest_block:
                    continue
                taken = {idx for tx in node.mempool for idx in tx.input_indexes}
                for t in c.unused_at():
                    if t.index not in c.pending and t.index not in taken and t.balance > self.sc.fee_per_input:
                        yield n, node, c, t
                break

    def _submit_fixture(self, kind: str, node: TrailNode, tx: Transaction) -> None:
        expected = FIXTURE_KINDS[kind]
        try:
            node.validate(tx)
            actual: Any = "accepted"
        except ValidationError as exc:
            actual = exc.check if exc.check is not None else exc.code
        self._fixture_result(kind, expected, actual)

    def _fixture_result(self, kind: str, expected: Any, actual: Any) -> None:
        ok = expected == actual
        self.log.add("fixture", t=self.now, height=self.height, kind=kind, expected=expected, actual=actual, ok=ok)
        if not ok:
            self.violation("fixture-not-rejected", kind=kind, expected=expected, actual=actual)

    def _after_fee(self, amount: int) -> int:
        return amount - self.sc.fee_per_input

    def _signed(self, c: Client, tip: bytes, inputs, outputs) -> Transaction:
        return sign_all(Transaction(tip, tuple(inputs), tuple(outputs)), [c.keypair])

    def _run_fixture(self, kind: str) -> None:
        if kind == "stale-proof":
            for n, node, c, t in self._fixture_candidates():
                old = self._older_proof(c, t, node.latest_hash)
                if old is not None:
                    tx = self._signed(c, node.latest_hash, [(t, old)], [Txo(c.address, self._after_fee(t.balance))])
                    self._submit_fixture(kind, node, tx)
                    return
            self.log.add("fixture-skipped", t=self.now, height=self.height, kind=kind, reason="no outdated proof")
            return
        setup = next(self._fixture_candidates(), None)
        if setup is None:
            self.log.add("fixture-skipped", t=self.now, height=self.height, kind=kind, reason="no eligible client")
            return
        n, node, c, t = setup
        tip = node.latest_hash
        proof = c.proof(t, tip)
        if kind == "mempool-double-spend":
            first = self._signed(c, tip, [(t, proof)], [Txo(c.address, self._after_fee(t.balance))])
            node.submit(first)
            c.pending[t.index] = self.height
            second = self._signed(c, tip, [(t, proof)], [Txo(self.clients[0].address, self._after_fee(t.balance))])
            self._submit_fixture(kind, node, second)
        elif kind == "stale-anchor":
            tx = self._signed(c, node.latest_block.parent, [(t, proof)], [Txo(c.address, self._after_fee(t.balance))])
            self._submit_fixture(kind, node, tx)
        elif kind == "replay-spent":
            spent = [u for u in c.used if self.full.is_ancestor(c.used[u][-1], tip)]
            if not spent:
                self.log.add("fixture-skipped", t=self.now, height=self.height, kind=kind, reason="nothing spent yet")
                return
            u = min(spent, key=lambda x: x.index)
            tx = self._signed(c, tip, [(u, self.full.proof_at(u.index, tip))], [Txo(c.address, self._after_fee(u.balance))])
            self._submit_fixture(kind, node, tx)
        elif kind == "future-index":
            forged = Txo(c.address, 10**6, node.latest_block.rightmost_index + 1, tip)
            fake = MerkleProof(tuple(node.latest_block.rightmost_proof))
            tx = self._signed(c, tip, [(forged, fake)], [Txo(c.address, self._after_fee(10**6))])
            self._submit_fixture(kind, node, tx)
        elif kind == "bad-signature":
            thief = KeyPair.from_seed(f"thief-{self.height}")
            tx = sign_all(Transaction(tip, ((t, proof),), (Txo(thief.address, self._after_fee(t.balance)),)), [thief])
            self._submit_fixture(kind, node, tx)
        elif kind in ("block-double-spend", "tampered-root"):
            self._block_fixture(kind, n, node, c, t, proof)

    def _older_proof(self, c: Client, t: Txo, tip: bytes) -> MerkleProof | None:
        """The TXO's proof at some earlier block, if it differs from now."""
        current = c.proof(t, tip)
        created = self.full.height_of(self._created_in(t, tip))
        for bh in reversed(self.full.path(None, tip)):
            if self.full.height_of(bh) < created:
                return None
            old = self.full.proof_at(t.index, bh)
            if old != current:
                return old
        return None

    def _created_in(self, t: Txo, tip: bytes) -> bytes:
        for h in reversed(self.full.path(None, tip)):
            if any(o.index == t.index for o in self.full.get_record(h).outputs):
                return h
        return self.full.genesis_hash

    def _block_fixture(self, kind: str, n: int, node: TrailNode, c: Client, t: Txo, proof: MerkleProof) -> None:
        tip = node.latest_hash
        peers = [m for m, other in enumerate(self.nodes) if m != n and other.latest_hash == tip]
        if not peers:
            # validate with a scratch node holding the same block
            victim = TrailNode(node.latest_block, self.config)
        else:
            victim = self.nodes[peers[0]]
        first = self._signed(c, tip, [(t, proof)], [Txo(c.address, self._after_fee(t.balance))])
        if kind == "block-double-spend":
            second = self._signed(c, tip, [(t, proof)], [Txo(self.clients[0].address, self._after_fee(t.balance))])
            txs = [first, second]
            forged = compute_block_delta(node.latest_block, list(first.inputs),
                                         list(first.outputs) + list(second.outputs), self.H, tip)
            block = forged.block(tip)
        else:
            txs = [first]
            honest = compute_block_delta(node.latest_block, list(first.inputs), list(first.outputs), self.H, tip)
            block = honest.block(tip)
            block = type(block)(block.parent, bytes(32), block.rightmost_index, block.rightmost_hash,
                                block.rightmost_proof)
        before = (victim.latest_hash, list(victim.mempool))
        try:
            _check_only(victim, block, txs)
            actual: Any = "accepted"
        except BlockRejected as exc:
            actual = exc.error.check if exc.error is not None else (exc.mismatched[0] if exc.mismatched else exc.reason)
        if (victim.latest_hash, victim.mempool) != before:
            self.violation("rejected-block-changed-state", kind=kind)
        self._fixture_result(kind, FIXTURE_KINDS[kind], actual)

    # -- per-height sweep ------------------------------------------------------

    def _sweep(self, k: int) -> None:
        check_proofs = self.sc.proof_check_every and k % self.sc.proof_check_every == 0
        bad = 0
        for c in self.clients:
            if c.latest_block is None:
                continue
            if check_proofs:
                root = c.headers[c.latest_block].root
                for t in c.unused_at():
                    try:
                        proof = c.proof(t)
                    except MissingHistory:
                        continue
                    if not verify_proof(leaf_hash_unused(t), t.index, proof, root, self.H):
                        bad += 1
                        self.violation("client-proof", client=c.name, leaf=t.index)
        for i, shadow in self.shadows.items():
            c = self.clients[i]
            if c.latest_block == shadow.latest_block and check_proofs:
                try:
                    if c.proofs() != shadow.proofs():
                        self.violation("shadow-proof-mismatch", client=c.name)
                except MissingHistory:
                    pass

        tip = self.full.tip
        live = self.full.unspent(tip)
        total = sum(t.balance for t in live.values())
        if total != self.initial_supply - self.oracle.burned[tip]:
            self.violation("supply-at-tip", supply=total, expected=self.initial_supply - self.oracle.burned[tip])

        device = [c.device_bytes() for c in self.clients]
        archive = [c.archive_bytes() for c in self.clients]
        us = [max((len(v) for v in c.unused.values()), default=0) for c in self.clients]
        fs = [c.realized_forks() for c in self.clients]
        for i in range(len(self.clients)):
            self.stats["device_max"][i] = max(self.stats["device_max"][i], device[i])
            self.stats["archive_max"][i] = max(self.stats["archive_max"][i], archive[i])
            self.stats["u_max"][i] = max(self.stats["u_max"][i], us[i])
            self.stats["f_max"][i] = max(self.stats["f_max"][i], fs[i])
        node_state = [n.state_bytes() for n in self.nodes]
        self.stats["node_state_max"] = max([self.stats["node_state_max"], *node_state])
        for node in self.nodes:
            state = vars(node)
            if set(state) - {"latest_block", "config", "mempool", "_latest_hash"}:
                self.violation("node-retains-extra-state", fields=sorted(state))
        self.log.add("measure", t=self.now, height=k, tip=tip.hex(), node_tips=[n.latest_hash.hex()[:16] for n in self.nodes],
                     node_state_bytes=node_state, full_node_bytes=self.full.stored_bytes(),
                     device_bytes=device, archive_bytes=archive, u=us, f=fs, unspent=total, burned=self.oracle.burned[tip])

    def finish(self) -> None:
        self.stats["full_bytes"] = self.full.stored_bytes()
        self.log.add("summary", **self.summary())

    def summary(self) -> dict:
        s = self.stats
        return {
            "blocks": len(self.full.blocks) - 1,
            "tip": self.full.tip.hex(),
            "tip_height": self.full.height_of(self.full.tip),
            "violations": len(self.log.violations),
            "fixtures": len(self.log.of("fixture")),
            "fixtures_ok": sum(1 for r in self.log.of("fixture") if r["ok"]),
            "block_sizes": sorted(s["block_sizes"]),
            "compact_mismatch": s["compact_mismatch"],
            "tx_size_mismatch": s["tx_size_mismatch"],
            "device_max": s["device_max"],
            "archive_max": s["archive_max"],
            "u_max": s["u_max"],
            "f_max": s["f_max"],
            "outputs_max": s["outputs_max"],
            "node_state_max": s["node_state_max"],
            "full_node_bytes": s["full_bytes"],
            "max_inclusion_delay": max(self.inclusion_delay, default=0),
            "unconfirmed": len(self.issued),
        }


def _check_only(node: TrailNode, block, txs) -> None:
    from .node import check_block

    check_block(node.latest_block, block, txs, node.config, node.latest_hash)


def simulate(scenario: Scenario) -> Simulation:
    sim = Simulation(scenario)
    sim.run()
    return sim


def run(scenario: Scenario) -> EventLog:
    return simulate(scenario).log


def verify_log(log: EventLog) -> list[dict]:
    """Replay a run's blocks through a fresh full node and the chain oracle.

    Returns one problem record per failed check; an empty list means the
    log is consistent. Violations and failed fixtures recorded during the
    run are reported too.
    """
    problems: list[dict] = [dict(r, source="run") for r in log.violations]
    problems += [dict(r, source="run") for r in log.of("fixture") if not r["ok"]]
    genesis = log.of("genesis")
    if len(genesis) != 1:
        return problems + [{"what": "missing-genesis"}]
    g = genesis[0]
    H = g["tree_height"]
    reward = bytes.fromhex(g["reward_address"]) if g.get("reward_address") else None
    config = NodeConfig(fee_per_input=g["fee_per_input"], reward_address=reward)
    allocations = [Txo(bytes.fromhex(owner), balance) for owner, balance in g["allocations"]]
    full = FullNode.bootstrap(allocations, H, config)
    if full.genesis_hash.hex() != g["hash"]:
        problems.append({"what": "genesis-mismatch"})
        return problems
    oracle = ChainOracle(full.genesis_hash, full.get_record(full.genesis_hash).outputs, H, reward)
    for r in log.of("block"):
        if "block" not in r:
            problems.append({"what": "block-not-recorded", "hash": r["hash"]})
            continue
        try:
            block = deserialize_block(bytes.fromhex(r["block"]), H)
            txs = [deserialize_transaction(bytes.fromhex(x)) for x in r["tx_data"]]
            h = full.record_block(block, txs)
        except (BlockRejected, KeyError, ValueError) as exc:
            problems.append({"what": "block-invalid", "hash": r["hash"], "error": repr(exc)})
            continue
        if h.hex() != r["hash"]:
            problems.append({"what": "hash-mismatch", "hash": r["hash"]})
        for what, fields in oracle.check(h, full.get_record(h)):
            problems.append(dict(fields, what=what))
    summary = log.of("summary")
    if summary and summary[-1]["tip"] != full.tip.hex():
        problems.append({"what": "tip-mismatch", "logged": summary[-1]["tip"], "replayed": full.tip.hex()})
    return problems


SCENARIOS: dict[str, dict] = {
    "smoke": {"seed": 1, "tree_height": 8, "clients": 4, "trail_nodes": 2, "blocks": 10, "txs_per_block": 2},
    "fork": {"seed": 3, "tree_height": 12, "clients": 8, "trail_nodes": 3, "blocks": 12, "txs_per_block": 3,
             "initial_txos": 2, "forks": {"4": [0, 1], "8": [1, 2]}, "shadows": [1]},
    "churn": {"seed": 5, "tree_height": 12, "clients": 6, "trail_nodes": 2, "blocks": 16, "txs_per_block": 3,
              "initial_txos": 2, "churn": {"0": [[5, 9]]}, "shadows": [0]},
    "reorder": {"seed": 9, "tree_height": 10, "clients": 8, "trail_nodes": 3, "blocks": 12,
                "txs_per_block": 4, "max_delay": 2, "tx_fanout": 1},
    "e2e": {"seed": 11, "tree_height": 16, "clients": 50, "trail_nodes": 3, "blocks": 100,
            "txs_per_block": 10, "initial_txos": 2, "fee_per_input": 1, "max_delay": 1,
            "forks": {"30": [0, 1], "70": [1, 2]}, "churn": {"4": [[20, 29]], "9": [[50, 60]]},
            "shadows": [4],
            "fixtures": [{"height": h, "kind": k} for h in (15, 45, 85) for k in FIXTURE_KINDS]},
    "paper-params": {"seed": 7, "tree_height": 255, "clients": 6, "trail_nodes": 2, "blocks": 12,
                     "txs_per_block": 2, "trunc": {"t": 604800, "interval": 15, "n": 10000},
                     "oracle": False},
    "archive": {"seed": 13, "tree_height": 255, "clients": 8, "trail_nodes": 1, "blocks": 500,
                "txs_per_block": 2, "payment_max": 5, "oracle": False, "proof_check_every": 25,
                "record_blocks": False,
                "archive": {"h_archive": 20, "h_delete": 200, "b": 250, "n": 4}},
}


def load_scenario(name_or_path: str, seed: int | None = None) -> Scenario:
    if name_or_path in SCENARIOS:
        data = json.loads(json.dumps(SCENARIOS[name_or_path]))
    else:
        data = json.loads(Path(name_or_path).read_text())
    if seed is not None:
        data["seed"] = seed
    return Scenario.from_dict(data)

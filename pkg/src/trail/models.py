"""Closed-form size models and model-versus-measurement reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

from .core import HASH_LEN, TXO_LEN, block_size


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SizeModelParams:
    i: int = 1
    o: int = 1
    t: float = 604800  # seconds between a client's transactions
    interval: float = 15  # seconds per block
    n: int = 10_000  # TXOs added per block
    u: int = 1  # unused TXOs per fork tip
    f: int = 2  # forks within h_archive
    b: int = 40320  # blocks a TXO stays unspent
    h_archive: int = 100
    h_delete: int = 100_000
    H: int = 255

    def __post_init__(self) -> None:
        for name in ("t", "interval", "n", "b", "h_archive", "h_delete", "H"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        for name in ("i", "o", "u", "f"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be non-negative")
        if self.h_delete <= self.h_archive:
            raise ModelError("h_delete must exceed h_archive")


HEADLINE = SizeModelParams()


def _log_bn(p: SizeModelParams) -> float:
    bn = p.b * p.n
    if bn <= 1:
        raise ModelError("b*n must exceed 1")
    # a proof cannot be longer than the tree
    return min(math.log2(bn), p.H)


def proof_entries(p: SizeModelParams) -> int:
    """Truncated proof length: ceil(log2(t*n/interval)), capped at H."""
    x = p.t * p.n / p.interval
    if x <= 1:
        raise ModelError("t*n/interval must exceed 1")
    return min(math.ceil(math.log2(x)), p.H)


def input_size_model(p: SizeModelParams, truncated: bool = True) -> int:
    k = proof_entries(p) if truncated else p.H
    return TXO_LEN + HASH_LEN * k


def tx_size_model(p: SizeModelParams, truncated: bool = True) -> int:
    return HASH_LEN + p.i * input_size_model(p, truncated) + p.o * TXO_LEN


def block_size_model(H: int) -> int:
    return 128 + 32 * H


def compact_block_size_model(H: int, tx_count: int) -> int:
    return block_size_model(H) + 8 * tx_count


def device_memory_model(p: SizeModelParams) -> float:
    """Per-client device bytes: histories within h_archive plus unused TXOs."""
    if p.u == 0:
        return 0.0
    L = _log_bn(p)
    return min(p.h_archive, p.b) * HASH_LEN * p.f * (p.u * L + p.H - L) + TXO_LEN * p.u * p.f


def archive_size_model(p: SizeModelParams) -> float:
    """Per-client archive bytes: histories and used TXOs kept until h_delete."""
    if p.h_delete < p.b:
        raise ModelError("h_delete must be at least b")
    L = _log_bn(p)
    r = p.h_delete / p.b
    histories = HASH_LEN * r * p.f * (p.u * p.b * L + r * (p.H - L))
    used = TXO_LEN * r * r * p.u * p.f
    return histories + used


@dataclass
class Row:
    metric: str
    model: float | None
    measured: float | None
    note: str = ""

    @property
    def ratio(self) -> float | None:
        if self.model in (None, 0) or self.measured is None:
            return None
        return self.measured / self.model


class Report:
    def __init__(self, title: str = ""):
        self.title = title
        self.rows: list[Row] = []

    def add(self, metric: str, model: float | None, measured: float | None, note: str = "") -> Row:
        row = Row(metric, model, measured, note)
        self.rows.append(row)
        return row

    def get(self, metric: str) -> Row:
        for row in self.rows:
            if row.metric == metric:
                return row
        raise KeyError(metric)

    def to_dict(self) -> dict:
        return {"title": self.title,
                "rows": [dict(asdict(r), ratio=r.ratio) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = ["metric\tmodel\tmeasured\tratio\tnote"]
        for r in self.rows:
            lines.append("\t".join([r.metric, _raw(r.model), _raw(r.measured), _raw(r.ratio), r.note]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cells = [("metric", "model", "measured", "ratio", "note")]
        for r in self.rows:
            cells.append((r.metric, _fmt(r.model), _fmt(r.measured),
                          "" if r.ratio is None else f"{r.ratio:.4f}", r.note))
        widths = [max(len(row[c]) for row in cells) for c in range(4)]
        out = [self.title] if self.title else []
        for row in cells:
            out.append("  ".join(row[c].rjust(widths[c]) if c else row[c].ljust(widths[c])
                                 for c in range(4)) + ("  " + row[4] if row[4] else ""))
        return "\n".join(out) + "\n"


def _raw(x: float | None) -> str:
    if x is None:
        return ""
    return str(int(x)) if float(x).is_integer() else f"{x:.6f}"


def _fmt(x: float | None) -> str:
    if x is None:
        return "-"
    if abs(x) >= 1e6:
        return f"{x:,.0f} ({x / 1e6:.2f} MB)"
    return f"{x:,.0f}" if float(x).is_integer() else f"{x:,.2f}"


PRESETS = {"paper": HEADLINE}


def preset_report(p: SizeModelParams = HEADLINE, title: str = "headline parameters") -> Report:
    """Every headline figure, modelled and measured from real serialization."""
    from .measure import measure_block, measure_compact, measure_tx

    rep = Report(title)
    rep.add("block bytes", block_size_model(p.H), measure_block(p.H), f"H={p.H}")
    one, two = measure_tx(replace(p, i=1, o=1)), measure_tx(replace(p, i=2, o=1))
    rep.add("input bytes (truncated)", input_size_model(p), two - one,
            f"proof entries={proof_entries(p)}")
    rep.add("input bytes (full proof)", input_size_model(p, truncated=False), None)
    for i, o in ((1, 1), (2, 2), (5, 5)):
        q = replace(p, i=i, o=o)
        rep.add(f"tx body bytes i={i} o={o}", tx_size_model(q), measure_tx(q), "truncated proofs")
    rep.add("compact block bytes, 10^4 txs", compact_block_size_model(p.H, 10_000),
            measure_compact(p.H, 10_000), "8-byte ids after a real block")
    L = math.log2(p.b * p.n)
    note = f"log2(bn)={L:.3f}, ceil={math.ceil(L)}"
    rep.add("device memory bytes", device_memory_model(p), None,
            f"u={p.u} f={p.f} h_archive={p.h_archive} b={p.b}; {note}")
    rep.add("archive bytes", archive_size_model(p), None, f"h_delete={p.h_delete}; {note}")
    if not L.is_integer():
        # same formulas with the log term rounded up to a whole proof length
        q = replace(p, n=2 ** math.ceil(L) / p.b)
        rep.add("device memory bytes (ceil log2)", device_memory_model(q), None)
        rep.add("archive bytes (ceil log2)", archive_size_model(q), None)
    return rep


def scenario_report(scenario: dict, summary: dict, title: str = "") -> Report:
    """Model-versus-measured rows for one simulation run."""
    H = scenario["tree_height"]
    rep = Report(title or f"scenario seed={scenario['seed']} H={H} blocks={scenario['blocks']}")
    sizes = summary["block_sizes"]
    rep.add("block bytes", block_size_model(H), max(sizes) if sizes else None,
            "constant" if len(sizes) <= 1 else f"VARIES: {sizes}")
    rep.add("compact block size mismatches", 0, summary["compact_mismatch"])
    rep.add("tx body size mismatches", 0, summary["tx_size_mismatch"])
    rep.add("node state bytes (max)", None, summary["node_state_max"], "latest block plus mempool")
    rep.add("full node bytes", None, summary["full_node_bytes"])
    archive = scenario.get("archive")
    worst = max(range(len(summary["device_max"])), key=lambda i: summary["device_max"][i], default=None)
    if archive and worst is not None:
        p = device_params(scenario, summary, worst)
        rep.add("device bytes (worst client)", device_memory_model(p), summary["device_max"][worst],
                f"u={p.u} f={p.f} n={p.n} b={p.b} h_archive={p.h_archive}")
        if p.h_delete >= p.b:
            rep.add("archive bytes (same client)", archive_size_model(p), summary["archive_max"][worst],
                    f"h_delete={p.h_delete}")
    else:
        rep.add("device bytes (max)", None, max(summary["device_max"], default=0), "no archiving configured")
    rep.add("violations", 0, summary["violations"])
    rep.add("fixtures rejected", summary["fixtures"], summary["fixtures_ok"])
    return rep


def device_params(scenario: dict, summary: dict, client: int) -> SizeModelParams:
    """Model parameters from a run: the client's realized u and f, the
    scenario's archive settings and the largest output count per block."""
    a = scenario["archive"]
    return SizeModelParams(
        u=summary["u_max"][client], f=summary["f_max"][client], b=a.get("b", 40320),
        n=max(summary["outputs_max"], 2), h_archive=a.get("h_archive", 100),
        h_delete=a.get("h_delete", 100_000), H=scenario["tree_height"],
    )

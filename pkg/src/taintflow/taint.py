"""Haircut taint propagation.

Starting from a set of seed transactions, tainted value is pushed forward
through the UTXO graph.  Every transaction is popped from a priority queue in
canonical ledger order, gets its purity (the value-weighted share of tainted
input), and is expanded only while that purity stays at or above the
threshold and the transaction is within the time window of the earliest
seed.  Expanding a transaction taints each of its outputs by the same
fraction.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError, SeedNotFound
from .ledger import Ledger

__all__ = [
    "DAY",
    "TaintConfig",
    "TaintEdge",
    "TaintFlow",
    "purity",
    "extract_flow",
    "flow_stats",
    "coinbase_seeds",
    "month_index",
    "write_flow_tsv",
    "read_flow_tsv",
    "read_seed_table",
]

DAY = 86400
FLOW_COLUMNS = (
    "src_txid", "dst_txid", "address", "cluster",
    "amount_sat", "amount_flow", "time", "purity_src",
)


@dataclass(frozen=True)
class TaintConfig:
    seeds: frozenset[str]
    purity_min: float = 0.001
    time_max: int = 365 * DAY

    def __post_init__(self):
        object.__setattr__(self, "seeds", frozenset(self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed transaction is required")
        if not 0 < self.purity_min <= 1:
            raise ConfigError("purity_min must lie in (0, 1]")
        if self.time_max <= 0:
            raise ConfigError("time_max must be positive")


@dataclass(frozen=True)
class TaintEdge:
    src_txid: str
    vout: int
    dst_txid: str | None
    address: str
    cluster: str
    amount: int
    amount_flow: float
    time: int
    purity_src: float

    @property
    def node_id(self) -> str:
        """Endpoint id: the spender, or ``src:vout`` for an unspent output."""
        return self.dst_txid if self.dst_txid is not None else f"{self.src_txid}:{self.vout}"


@dataclass
class TaintFlow:
    seeds: tuple[str, ...]
    edges: list[TaintEdge]
    purity: dict[str, float]
    depth: dict[str, int]
    node_time: dict[str, int]
    expanded: frozenset[str]
    source_clusters: frozenset[str] = frozenset()
    flow_id: str = ""
    source_label: str | None = None
    zero_input: frozenset[str] = frozenset()

    @property
    def seed_time(self) -> int:
        return min(self.node_time[s] for s in self.seeds)

    @property
    def source_month(self) -> str:
        t = datetime.fromtimestamp(self.seed_time, tz=timezone.utc)
        return f"{t.year:04d}-{t.month:02d}"

    @property
    def dissolved_at_seed(self) -> bool:
        return not (self.expanded & set(self.seeds))

    def nodes(self) -> list[str]:
        """Transactions reached by the flow, seeds first."""
        seen = dict.fromkeys(self.seeds)
        for e in self.edges:
            if e.dst_txid is not None:
                seen.setdefault(e.dst_txid)
        return list(seen)

    def clusters(self) -> set[str]:
        return {e.cluster for e in self.edges}


def purity(ledger: Ledger, txid: str, purity_map: Mapping[str, float], seeds: Iterable[str] = ()) -> float:
    """Value-weighted mean of the input sources' purities.

    Sources missing from ``purity_map`` count as untainted.  Seeds are pure by
    definition.  A transaction whose inputs carry no value gets purity 0.
    """
    if txid in seeds:
        return 1.0
    ins = ledger.inputs_of(txid)
    total = sum(i.value for i in ins)
    if total == 0:  # also covers a coinbase that is not a seed
        return 0.0
    tainted = math.fsum(purity_map.get(i.src_txid, 0.0) * i.value for i in ins)
    return tainted / total


def extract_flow(ledger: Ledger, actors, config: TaintConfig, flow_id: str = "",
                 source_label: str | None = None) -> TaintFlow:
    """Run the priority-queue expansion from ``config.seeds``.

    ``actors`` maps addresses to clusters (an ActorIndex); pass None to use
    the raw address as cluster id.
    """
    for s in sorted(config.seeds):
        if s not in ledger:
            raise SeedNotFound(f"seed {s} not in ledger")
    cluster_of = actors.cluster_of if actors is not None else (lambda a: a)
    rank = ledger.rank
    seeds = tuple(sorted(config.seeds, key=rank.__getitem__))
    t_stop = min(ledger.tx(s).time for s in seeds) + config.time_max

    heap = [(rank[s], s) for s in seeds]
    heapq.heapify(heap)
    queued = set(seeds)
    depth = {s: 0 for s in seeds}
    rho: dict[str, float] = {}
    node_time: dict[str, int] = {}
    # Only expanded transactions pass taint downstream.
    live: dict[str, float] = {}
    zero_input = set()
    edges: list[TaintEdge] = []

    while heap:
        _, txid = heapq.heappop(heap)
        tx = ledger.tx(txid)
        node_time[txid] = tx.time
        p = purity(ledger, txid, live, config.seeds)
        if txid not in config.seeds and ledger.input_value(txid) == 0:
            zero_input.add(txid)
        rho[txid] = p
        if not (p >= config.purity_min and tx.time <= t_stop):
            continue
        live[txid] = p
        for vout, out in enumerate(tx.outputs):
            dst = out.spent_by
            t = tx.time if dst is None else ledger.tx(dst).time
            edges.append(TaintEdge(
                txid, vout, dst, out.address, cluster_of(out.address),
                out.value, out.value * p, t, p,
            ))
            if dst is None:
                continue
            d = depth[txid] + 1
            if d < depth.get(dst, d + 1):
                depth[dst] = d
            if dst not in queued:
                queued.add(dst)
                heapq.heappush(heap, (rank[dst], dst))

    sources = frozenset(cluster_of(o.address) for s in seeds for o in ledger.tx(s).outputs)
    return TaintFlow(
        seeds=seeds, edges=edges, purity=rho, depth=depth, node_time=node_time,
        expanded=frozenset(live), source_clusters=sources, flow_id=flow_id,
        source_label=source_label, zero_input=frozenset(zero_input),
    )


def flow_stats(flow: TaintFlow) -> dict:
    nodes = flow.nodes()
    return {
        "flow_id": flow.flow_id,
        "n_seeds": len(flow.seeds),
        "n_transactions": len(nodes),
        "n_clusters": len(flow.clusters()),
        "n_edges": len(flow.edges),
        "n_unspent_edges": sum(e.dst_txid is None for e in flow.edges),
        "max_depth": max(flow.depth[n] for n in nodes),
        "n_dissolved": sum(n not in flow.expanded for n in nodes),
        "tainted_value_out": math.fsum(e.amount_flow for e in flow.edges),
        "source_month": flow.source_month,
    }


# -- seed selection ---------------------------------------------------------------

def month_index(t: int) -> int:
    """Calendar month of unix time ``t`` as ``12 * year + month - 1`` (UTC)."""
    d = datetime.fromtimestamp(t, tz=timezone.utc)
    return d.year * 12 + d.month - 1


def coinbase_seeds(ledger: Ledger, actors, cluster: str, date: str) -> list[str]:
    """Coinbase transactions paying ``cluster`` on the UTC day ``date`` (YYYY-MM-DD).

    ``cluster`` may also be a label name, matching every cluster carrying it.
    """
    day = datetime.strptime(date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    lo = int(day.timestamp())
    hi = lo + DAY

    def matches(addr):
        cid = actors.cluster_of(addr)
        if cid == cluster:
            return True
        lab = actors.label(cid)
        return lab is not None and lab.name == cluster

    return [
        tx.txid for tx in ledger
        if tx.is_coinbase and lo <= tx.time < hi and any(matches(o.address) for o in tx.outputs)
    ]


# -- flow TSV ---------------------------------------------------------------------

def write_flow_tsv(flow: TaintFlow, path) -> None:
    """Edge table with ``#`` metadata lines (flow id, seeds, per-node data)."""
    lines = [
        f"#flow_id\t{flow.flow_id}",
        f"#source\t{flow.source_label or ''}",
        f"#source_clusters\t{' '.join(sorted(flow.source_clusters))}",
        f"#seeds\t{' '.join(flow.seeds)}",
    ]
    for n in sorted(flow.node_time, key=lambda n: (flow.node_time[n], n)):
        lines.append(
            f"#node\t{n}\t{flow.node_time[n]}\t{flow.depth.get(n, -1)}\t"
            f"{flow.purity.get(n, 0.0)!r}\t{int(n in flow.expanded)}"
        )
    lines.append("\t".join(FLOW_COLUMNS))
    for e in flow.edges:
        lines.append("\t".join((
            e.src_txid, e.dst_txid or "", e.address, e.cluster, str(e.amount),
            repr(e.amount_flow), str(e.time), repr(e.purity_src),
        )))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_flow_tsv(path) -> TaintFlow:
    meta: dict[str, str] = {}
    purity_, depth, node_time = {}, {}, {}
    expanded = set()
    edges = []
    vouts: dict[str, int] = {}
    header_seen = False
    with open(Path(path), encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#node\t"):
                _, n, t, d, p, x = line.split("\t")
                node_time[n] = int(t)
                if int(d) >= 0:
                    depth[n] = int(d)
                purity_[n] = float(p)
                if x == "1":
                    expanded.add(n)
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("\t")
                meta[key] = value
                continue
            cols = line.split("\t")
            if not header_seen:
                header_seen = True
                if tuple(cols) != FLOW_COLUMNS:
                    raise ValueError(f"{path}: unexpected flow header {cols}")
                continue
            src, dst, addr, cid, amt, flow_amt, t, p = cols
            vout = vouts.get(src, 0)
            vouts[src] = vout + 1
            edges.append(TaintEdge(src, vout, dst or None, addr, cid, int(amt),
                                   float(flow_amt), int(t), float(p)))
    return TaintFlow(
        seeds=tuple(meta.get("seeds", "").split()),
        edges=edges, purity=purity_, depth=depth, node_time=node_time,
        expanded=frozenset(expanded),
        source_clusters=frozenset(meta.get("source_clusters", "").split()),
        flow_id=meta.get("flow_id", ""),
        source_label=meta.get("source") or None,
    )


def read_seed_table(path) -> list[dict]:
    """Flow definitions from a seeds file.

    A CSV with a ``seeds`` column (plus optional ``flow_id``, ``source`` or
    ``actor``, and ``month``) defines one flow per row, seeds separated by
    spaces.  Anything else is read as a plain list of txids, one per line,
    forming a single flow named after the file.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    first = text.lstrip().split("\n", 1)[0]
    if "seeds" in [c.strip() for c in first.split(",")]:
        rows = []
        for i, row in enumerate(csv.DictReader(text.lstrip().splitlines())):
            rows.append({
                "flow_id": (row.get("flow_id") or f"flow{i:04d}").strip(),
                "source": (row.get("source") or row.get("actor") or "").strip(),
                "month": (row.get("month") or "").strip(),
                "seeds": row["seeds"].split(),
            })
        return rows
    seeds = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return [{"flow_id": path.stem, "source": "", "month": "", "seeds": seeds}]

"""Walk sampling over taint flows and conversion of walks into token documents.

A walk visits transactions of a flow along tainted edges, always forward in
time.  Unspent tainted outputs end in a terminal node named ``txid:vout`` so
that the holders of never-spent coins still show up in walks.  Each visited
node is labelled by the cluster owning the output the walk used to reach it.

Randomness is drawn per walk from a Philox generator keyed by
``sha256(rng_seed, flow_id)`` with the walk index in the high counter word,
so walk ``i`` of a flow is the same no matter how flows are scheduled.
"""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .actors import ActorIndex, ActorType, TagActorSet, tag_actor_set
from .errors import ConfigError, EmptyAfterPruning
from .taint import DAY, TaintFlow

__all__ = [
    "WalkConfig",
    "RawWalk",
    "WalkCorpus",
    "MINING",
    "walk_rng",
    "walk_graph",
    "random_walks",
    "shortest_path_walks",
    "temporal_bucket",
    "tokenize",
    "build_corpus",
]

MINING = "mining"
STRATEGIES = ("rw", "spw")


@dataclass(frozen=True)
class WalkConfig:
    strategy: str = "rw"
    vocabulary: str = "all"
    temporal: bool = False
    walks_per_flow: int = 1000
    max_walk_length: int = 100
    rng_seed: int = 42

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown walk strategy {self.strategy!r}")
        if self.vocabulary not in ("all", "frequent", "known_name", "known_type"):
            raise ConfigError(f"unknown vocabulary {self.vocabulary!r}")
        if self.walks_per_flow < 1:
            raise ConfigError("walks_per_flow must be >= 1")
        if self.max_walk_length < 2:
            raise ConfigError("max_walk_length must be >= 2")


@dataclass(frozen=True)
class RawWalk:
    """Visited node ids and, per node, the index of the flow edge used to enter it."""

    nodes: tuple[str, ...]
    via: tuple[int | None, ...]

    def __len__(self):
        return len(self.nodes)


def walk_rng(rng_seed: int, flow_id: str, index: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{rng_seed}:{flow_id}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key, counter=index << 192))


@dataclass
class _Graph:
    out: dict[str, list[int]]
    time: dict[str, int]
    seeds: tuple[str, ...]

    def leaves(self) -> list[str]:
        return sorted(n for n in self.time if not self.out.get(n))


def walk_graph(flow: TaintFlow) -> _Graph:
    out: dict[str, list[int]] = {}
    time = {s: flow.node_time[s] for s in flow.seeds}
    for i, e in enumerate(flow.edges):
        out.setdefault(e.src_txid, []).append(i)
        time.setdefault(e.node_id, e.time)
    return _Graph(out, time, tuple(flow.seeds))


def random_walks(flow: TaintFlow, config: WalkConfig, actors=None) -> list[RawWalk]:
    """Unweighted forward walks from a uniformly chosen seed.

    A walk stops at a node without tainted out-edges or after
    ``max_walk_length`` nodes (truncated, not restarted).
    """
    g = walk_graph(flow)
    walks = []
    for k in range(config.walks_per_flow):
        rng = walk_rng(config.rng_seed, flow.flow_id, k)
        node = g.seeds[int(rng.integers(len(g.seeds)))]
        nodes, via = [node], [None]
        while len(nodes) < config.max_walk_length:
            choices = g.out.get(node)
            if not choices:
                break
            ei = choices[int(rng.integers(len(choices)))]
            node = flow.edges[ei].node_id
            nodes.append(node)
            via.append(ei)
        walks.append(RawWalk(tuple(nodes), tuple(via)))
    return walks


def _lexmin_shortest_paths(flow: TaintFlow, g: _Graph):
    """Per node: the fewest-hop path from any seed, smallest id sequence among ties."""
    best: dict[str, tuple[str, ...]] = {s: (s,) for s in g.seeds}
    via: dict[str, tuple[int | None, ...]] = {s: (None,) for s in g.seeds}
    layer = sorted(g.seeds)
    while layer:
        cand: dict[str, tuple[tuple[str, ...], tuple]] = {}
        for u in layer:
            for ei in g.out.get(u, ()):
                v = flow.edges[ei].node_id
                if v in best:
                    continue
                path = best[u] + (v,)
                old = cand.get(v)
                # out-edges are in vout order, so the first edge found from u wins
                if old is None or path < old[0]:
                    cand[v] = (path, via[u] + (ei,))
        for v, (path, vv) in cand.items():
            best[v] = path
            via[v] = vv
        layer = sorted(cand)
    return best, via


def shortest_path_walks(flow: TaintFlow, config: WalkConfig) -> list[RawWalk]:
    """Seed-to-leaf shortest paths to uniformly sampled leaves."""
    g = walk_graph(flow)
    leaves = g.leaves()
    best, via = _lexmin_shortest_paths(flow, g)
    walks = []
    for k in range(config.walks_per_flow):
        rng = walk_rng(config.rng_seed, flow.flow_id, k)
        leaf = leaves[int(rng.integers(len(leaves)))]
        walks.append(RawWalk(best[leaf], via[leaf]))
    return walks


def temporal_bucket(seconds: int) -> int:
    """``floor(log2(days))`` of an elapsed time, with days clamped to at least 1."""
    days = max(1, int(seconds) // DAY)
    return days.bit_length() - 1


_UNSAFE = re.compile(r"[\s|]+")


def _clean(label: str) -> str:
    return _UNSAFE.sub("_", label)


def _masked_clusters(flow: TaintFlow, actors: ActorIndex | None):
    names = set()
    if actors is not None:
        for c in flow.source_clusters:
            lab = actors.label(c)
            if lab is not None:
                names.add(lab.name)
    return names


def tokenize(walk: RawWalk, flow: TaintFlow, actors: ActorIndex | None,
             tag_set: TagActorSet, config: WalkConfig, _source_names=None) -> list[str]:
    """Map a raw walk to its token sequence.

    Seeds, the flow's own source clusters (and any cluster sharing a source
    label name) and every cluster typed ``mining`` become ``mining``.  Other
    nodes outside ``tag_set`` are dropped.
    """
    if _source_names is None:
        _source_names = _masked_clusters(flow, actors)
    t0 = flow.seed_time
    tokens = []
    for node, ei in zip(walk.nodes, walk.via):
        if ei is None:
            label = MINING
            t = flow.node_time[node]
        else:
            edge = flow.edges[ei]
            t = edge.time
            cid = edge.cluster
            lab = actors.label(cid) if actors is not None else None
            if (cid in flow.source_clusters
                    or (lab is not None and (lab.type is ActorType.MINING or lab.name in _source_names))):
                label = MINING
            elif cid not in tag_set:
                continue
            elif config.vocabulary == "known_name":
                label = _clean(lab.name)
            elif config.vocabulary == "known_type":
                label = lab.type.value
            else:
                label = _clean(cid)
        if config.temporal:
            label = f"{label}|d{temporal_bucket(t - t0)}"
        tokens.append(label)
    if not tokens:
        raise EmptyAfterPruning(f"walk in flow {flow.flow_id} has no tag actors")
    return tokens


@dataclass
class WalkCorpus:
    """Token documents, one per flow, each a list of walks."""

    docs: dict[str, list[list[str]]]
    meta: dict[str, tuple[str, str]] = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.docs)

    def flow_ids(self) -> list[str]:
        return list(self.docs)

    def counts(self) -> Counter:
        c: Counter[str] = Counter()
        for walks in self.docs.values():
            for w in walks:
                c.update(w)
        return c

    def vocab_table(self) -> dict[str, int]:
        """Token -> id, ids assigned by descending count then token."""
        ranked = sorted(self.counts().items(), key=lambda kv: (-kv[1], kv[0]))
        return {tok: i for i, (tok, _) in enumerate(ranked)}

    def write(self, path, vocab_path=None) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for fid, walks in self.docs.items():
                for w in walks:
                    fh.write(f"{fid}\t{' '.join(w)}\n")
        vocab_path = Path(vocab_path) if vocab_path else path.with_suffix(".vocab.tsv")
        counts = self.counts()
        with open(vocab_path, "w", encoding="utf-8") as fh:
            fh.write("token\tid\tcount\n")
            for tok, i in self.vocab_table().items():
                fh.write(f"{tok}\t{i}\t{counts[tok]}\n")

    @classmethod
    def read(cls, path) -> "WalkCorpus":
        docs: dict[str, list[list[str]]] = {}
        with open(Path(path), encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                fid, _, rest = line.partition("\t")
                toks = rest.split()
                if toks:
                    docs.setdefault(fid, []).append(toks)
        return cls(docs)


def build_corpus(flows: Sequence[TaintFlow], actors: ActorIndex | None, config: WalkConfig,
                 tag_set: TagActorSet | None = None) -> WalkCorpus:
    """Sample and tokenize walks for every flow.

    The frequent-cluster vocabulary is computed over ``flows`` unless a
    ``tag_set`` is given.
    """
    if tag_set is None:
        tag_set = tag_actor_set(config.vocabulary, actors or ActorIndex({}), flows)
    sampler = random_walks if config.strategy == "rw" else shortest_path_walks
    docs, meta, dropped = {}, {}, {}
    for flow in flows:
        names = _masked_clusters(flow, actors)
        seqs = []
        n_drop = 0
        for w in sampler(flow, config):
            try:
                seqs.append(tokenize(w, flow, actors, tag_set, config, names))
            except EmptyAfterPruning:
                n_drop += 1
        dropped[flow.flow_id] = n_drop
        if seqs:
            docs[flow.flow_id] = seqs
            meta[flow.flow_id] = (flow.source_label or "", flow.source_month)
    return WalkCorpus(docs, meta, dropped)

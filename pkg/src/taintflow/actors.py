"""Address clustering and actor labels.

Addresses are grouped with the common-input heuristic: every input address
of a (non-CoinJoin) transaction belongs to the same owner.  A cluster is
named after its lexicographically smallest address.
"""
from __future__ import annotations

import csv
import enum
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from scipy.cluster.hierarchy import DisjointSet

from .errors import ConflictingLabel, EmptyCorpus, UnknownType
from .ledger import Ledger, Transaction

__all__ = [
    "ActorType",
    "Label",
    "ActorIndex",
    "TagActorSet",
    "cluster_addresses",
    "is_coinjoin",
    "load_labels",
    "frequent_clusters",
    "tag_actor_set",
]


class ActorType(str, enum.Enum):
    EXCHANGE = "exchange"
    WALLET = "wallet"
    SERVICE = "service"
    MARKETPLACE = "marketplace"
    MIXER = "mixer"
    LENDING = "lending"
    GAMBLING = "gambling"
    MINING = "mining"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: str) -> "ActorType":
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise UnknownType(f"unknown actor type {value!r}") from None


@dataclass(frozen=True)
class Label:
    name: str
    type: ActorType


def is_coinjoin(tx: Transaction, ledger: Ledger) -> bool:
    """Equal-output-value CoinJoin heuristic.

    Flags a transaction with at least two inputs and three outputs whose most
    common output value repeats, provided there are at least as many distinct
    input addresses as equal-valued outputs.
    """
    if len(tx.inputs) < 2 or len(tx.outputs) < 3:
        return False
    n_equal = Counter(o.value for o in tx.outputs).most_common(1)[0][1]
    if n_equal < 2:
        return False
    n_in_addr = len({i.address for i in ledger.inputs_of(tx.txid)})
    return n_in_addr >= n_equal


class ActorIndex:
    """Partition of the address universe plus optional per-cluster labels."""

    def __init__(self, cluster_of: Mapping[str, str], labels: Mapping[str, Label] | None = None):
        self._cluster_of = dict(cluster_of)
        members: dict[str, set[str]] = {}
        for addr, cid in self._cluster_of.items():
            members.setdefault(cid, set()).add(addr)
        self._members = {cid: frozenset(m) for cid, m in members.items()}
        self._labels = dict(labels or {})

    def __len__(self) -> int:
        return len(self._members)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActorIndex):
            return NotImplemented
        return self._cluster_of == other._cluster_of and self._labels == other._labels

    def cluster_of(self, address: str) -> str:
        """Cluster id of ``address``; unseen addresses form their own cluster."""
        return self._cluster_of.get(address, address)

    def members(self, cluster: str) -> frozenset[str]:
        return self._members.get(cluster, frozenset({cluster}))

    def clusters(self) -> list[str]:
        return sorted(self._members)

    def partition(self) -> set[frozenset[str]]:
        return set(self._members.values())

    def label(self, cluster: str) -> Label | None:
        return self._labels.get(cluster)

    def labeled_clusters(self) -> dict[str, Label]:
        return dict(self._labels)

    def with_labels(self, table: Mapping[str, Label]) -> "ActorIndex":
        """Attach address labels, spreading each to its whole cluster."""
        labels = dict(self._labels)
        for addr in sorted(table):
            lab = table[addr]
            cid = self.cluster_of(addr)
            old = labels.get(cid)
            if old is not None and old != lab:
                raise ConflictingLabel(
                    f"cluster {cid} labeled both {old.name}/{old.type.value} "
                    f"and {lab.name}/{lab.type.value}"
                )
            labels[cid] = lab
        return ActorIndex(self._cluster_of, labels)

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "clusters": {cid: sorted(m) for cid, m in sorted(self._members.items())},
            "labels": {
                cid: {"name": lab.name, "type": lab.type.value}
                for cid, lab in sorted(self._labels.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ActorIndex":
        cluster_of = {a: cid for cid, addrs in obj["clusters"].items() for a in addrs}
        labels = {
            cid: Label(v["name"], ActorType.parse(v["type"]))
            for cid, v in obj.get("labels", {}).items()
        }
        return cls(cluster_of, labels)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ActorIndex":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def cluster_addresses(ledger: Ledger, coinjoin_filter: bool = True) -> ActorIndex:
    """Common-input clustering over every address in ``ledger``."""
    ds = DisjointSet(sorted(ledger.addresses()))
    for tx in ledger:
        if tx.is_coinbase:
            continue
        if coinjoin_filter and is_coinjoin(tx, ledger):
            continue
        addrs = sorted({i.address for i in ledger.inputs_of(tx.txid)})
        for a in addrs[1:]:
            ds.merge(addrs[0], a)
    cluster_of = {}
    for subset in ds.subsets():
        cid = min(subset)
        for a in subset:
            cluster_of[a] = cid
    return ActorIndex(cluster_of)


def load_labels(path) -> dict[str, Label]:
    """Read an ``address,name,type`` CSV into an address -> Label table."""
    table: dict[str, Label] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"address", "name", "type"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"labels file lacks columns {sorted(missing)}")
        for row in reader:
            addr = row["address"].strip()
            lab = Label(row["name"].strip(), ActorType.parse(row["type"]))
            old = table.get(addr)
            if old is not None and old != lab:
                raise ConflictingLabel(f"address {addr} labeled both {old.name} and {lab.name}")
            table[addr] = lab
    return table


# -- tag actors -----------------------------------------------------------------

VOCABULARIES = ("all", "frequent", "known_name", "known_type")


@dataclass(frozen=True)
class TagActorSet:
    """Clusters kept as walk vocabulary.  ``members`` is None for mode ``all``."""

    mode: str
    members: frozenset[str] | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.mode not in VOCABULARIES:
            raise ValueError(f"unknown vocabulary mode {self.mode!r}")

    def __contains__(self, cluster) -> bool:
        return self.members is None or cluster in self.members

    def __len__(self) -> int:
        return -1 if self.members is None else len(self.members)


def _flow_clusters(flow) -> set[str]:
    if hasattr(flow, "clusters"):
        return set(flow.clusters())
    return set(flow)


def frequent_clusters(flows: Iterable, threshold: float = 0.5) -> TagActorSet:
    """Clusters present in strictly more than ``threshold`` of the flows.

    ``flows`` holds TaintFlow objects or plain iterables of cluster ids.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    flows = list(flows)
    if not flows:
        raise EmptyCorpus("frequent_clusters needs at least one flow")
    counts: Counter[str] = Counter()
    for flow in flows:
        counts.update(_flow_clusters(flow))
    cutoff = threshold * len(flows)
    return TagActorSet("frequent", frozenset(c for c, n in counts.items() if n > cutoff), threshold)


def tag_actor_set(mode: str, actors: ActorIndex, flows: Iterable = (), threshold: float = 0.5) -> TagActorSet:
    """Build the tag-actor set for a walk vocabulary."""
    if mode == "all":
        return TagActorSet("all")
    if mode == "frequent":
        return frequent_clusters(flows, threshold)
    if mode in ("known_name", "known_type"):
        return TagActorSet(mode, frozenset(actors.labeled_clusters()))
    raise ValueError(f"unknown vocabulary mode {mode!r}")

"""Synthetic ledgers with known sources, owners and counterparty habits.

Each source actor is a mining pool.  For every (pool, month) flow the pool
mines a few coinbases on a random day, pays them out to a set of miners,
and each miner's coins then hop through a chain of counterparties.  The
counterparty type at each hop is drawn from the pool's archetype weights,
so flows from one pool end up at similar kinds of actors.

Known counterparties never forward a deposit untouched: they pay out of a
pooled balance funded with ``background_ratio`` times as much untainted
value, which is what makes taint dissolve.  Those balances come from fresh
coinbases to the counterparty's own hot address.

Output directory layout::

    ledger.ndjson   one transaction per line, sorted by (time, txid)
    labels.csv      address,name,type for pools and known counterparties
    seeds.csv       flow_id,actor,month,seeds (space separated txids)
    truth.csv       address,owner for every address in the ledger
    summary.json    emitted counts
"""
from __future__ import annotations

import calendar
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .actors import ActorType
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "COUNTERPARTY_TYPES",
    "Archetype",
    "ScenarioConfig",
    "Scenario",
    "default_archetypes",
    "time_graded_scenario",
    "generate",
    "load_scenario",
    "write_scenario",
]

DAY = 86400
COIN = 100_000_000
FEE = 1_000

COUNTERPARTY_TYPES = ("exchange", "gambling", "mixer", "marketplace", "lending", "service", "wallet")


@dataclass(frozen=True)
class Archetype:
    """How one source actor's coins tend to travel."""

    name: str
    counterparty_weights: dict
    drift_weights: dict | None = None
    fanout: tuple[int, int] = (10, 20)
    hops: tuple[int, int] = (2, 5)
    hop_delay_days: float = 3.0
    background_ratio: float = 3.0
    wallet_hop_prob: float = 0.2
    coinbases: tuple[int, int] = (1, 3)

    def __post_init__(self):
        object.__setattr__(self, "fanout", tuple(self.fanout))
        object.__setattr__(self, "hops", tuple(self.hops))
        object.__setattr__(self, "coinbases", tuple(self.coinbases))
        for w in (self.counterparty_weights, self.drift_weights):
            if w is None:
                continue
            unknown = set(w) - set(COUNTERPARTY_TYPES)
            if unknown:
                raise ConfigError(f"{self.name}: unknown counterparty types {sorted(unknown)}")
            if any(v < 0 for v in w.values()) or abs(sum(w.values()) - 1.0) > 1e-9:
                raise ConfigError(f"{self.name}: counterparty weights must be >= 0 and sum to 1")
        for lo_hi, what, floor in ((self.fanout, "fanout", 1), (self.hops, "hops", 1),
                                   (self.coinbases, "coinbases", 1)):
            if len(lo_hi) != 2 or lo_hi[0] < floor or lo_hi[1] < lo_hi[0]:
                raise ConfigError(f"{self.name}: bad {what} range {lo_hi}")
        if self.hop_delay_days < 1:
            raise ConfigError(f"{self.name}: hop_delay_days must be >= 1")
        if self.background_ratio < 0:
            raise ConfigError(f"{self.name}: background_ratio must be >= 0")
        if not 0 <= self.wallet_hop_prob < 1:
            raise ConfigError(f"{self.name}: wallet_hop_prob must lie in [0, 1)")

    def weights_at(self, frac: float) -> np.ndarray:
        """Counterparty type distribution a fraction ``frac`` through the time span."""
        w0 = np.array([self.counterparty_weights.get(t, 0.0) for t in COUNTERPARTY_TYPES])
        if self.drift_weights is None:
            return w0
        w1 = np.array([self.drift_weights.get(t, 0.0) for t in COUNTERPARTY_TYPES])
        w = (1 - frac) * w0 + frac * w1
        return w / w.sum()


def default_archetypes(n: int, separability: float = 0.9, types_each: int = 2) -> list[Archetype]:
    """``n`` pools with disjoint preferred counterparty types.

    Each pool puts ``separability`` of its mass on its own ``types_each``
    types and spreads the rest evenly over all types.
    """
    if not 0 <= separability <= 1:
        raise ConfigError("separability must lie in [0, 1]")
    archetypes = []
    n_types = len(COUNTERPARTY_TYPES)
    delays = (2.0, 6.0, 15.0, 4.0, 10.0)
    for i in range(n):
        own = [COUNTERPARTY_TYPES[(i * types_each + j) % n_types] for j in range(types_each)]
        w = {t: (1 - separability) / n_types for t in COUNTERPARTY_TYPES}
        for t in own:
            w[t] += separability / types_each
        archetypes.append(Archetype(
            name=f"Pool{chr(ord('A') + i % 26)}{'' if i < 26 else i // 26}",
            counterparty_weights=w,
            hop_delay_days=delays[i % len(delays)],
        ))
    return archetypes


@dataclass(frozen=True)
class ScenarioConfig:
    archetypes: tuple[Archetype, ...] = ()
    n_source_actors: int = 3
    flows_per_actor: int = 12
    months: int = 12
    start_month: str = "2014-01"
    counterparties_per_type: int = 3
    addresses_per_counterparty: int = 4
    pool_addresses: int = 3
    rng_seed: int = 7

    def __post_init__(self):
        archetypes = tuple(self.archetypes) or tuple(default_archetypes(self.n_source_actors))
        object.__setattr__(self, "archetypes", archetypes)
        object.__setattr__(self, "n_source_actors", len(archetypes))
        names = [a.name for a in archetypes]
        if len(set(names)) != len(names):
            raise ConfigError("archetype names must be unique")
        if self.flows_per_actor < 1 or self.months < 1:
            raise ConfigError("flows_per_actor and months must be >= 1")
        if self.counterparties_per_type < 1 or self.addresses_per_counterparty < 1 or self.pool_addresses < 1:
            raise ConfigError("actor address counts must be >= 1")
        try:
            datetime.strptime(self.start_month, "%Y-%m")
        except ValueError:
            raise ConfigError(f"start_month must be YYYY-MM, got {self.start_month!r}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["archetypes"] = [asdict(a) for a in self.archetypes]
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}")
        try:
            arch = tuple(Archetype(**a) for a in obj.pop("archetypes", ()))
        except TypeError as exc:
            raise ConfigError(f"bad archetype: {exc}") from None
        return cls(archetypes=arch, **obj)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario from ``.toml`` or ``.json``."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
    else:
        obj = json.loads(path.read_text(encoding="utf-8"))
    return ScenarioConfig.from_dict(obj.get("scenario", obj))


def time_graded_scenario(n_actors: int = 2, flows_per_month: int = 2, months: int = 12,
                         rng_seed: int = 11) -> ScenarioConfig:
    """Pools sharing one counterparty mix that drifts steadily across the time span."""
    start = {t: 0.0 for t in COUNTERPARTY_TYPES}
    end = dict(start)
    start.update(exchange=0.5, gambling=0.5)
    end.update(mixer=0.5, lending=0.5)
    pools = tuple(
        Archetype(f"Pool{chr(ord('A') + i)}", counterparty_weights=start, drift_weights=end)
        for i in range(n_actors)
    )
    return ScenarioConfig(archetypes=pools, flows_per_actor=flows_per_month * months,
                          months=months, rng_seed=rng_seed)


# -- generation ------------------------------------------------------------------

@dataclass
class Scenario:
    """Everything :func:`generate` emits, held in memory."""

    config: ScenarioConfig
    records: list[dict]
    labels: list[tuple[str, str, str]]
    flows: list[dict]
    owners: dict[str, str]
    summary: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        write_scenario(self, out_dir)


class _Builder:
    def __init__(self, seed: int):
        self.seed = seed
        self.records: list[dict] = []
        self.owners: dict[str, str] = {}
        self._n = 0
        self._addr_n: dict[str, int] = {}
        self._wallets = 0

    def txid(self) -> str:
        self._n += 1
        return hashlib.sha256(f"synth:{self.seed}:{self._n}".encode()).hexdigest()

    def fresh(self, owner: str) -> str:
        k = self._addr_n.get(owner, 0)
        self._addr_n[owner] = k + 1
        addr = f"{owner}.{k}"
        self.owners[addr] = owner
        return addr

    def wallet(self) -> str:
        self._wallets += 1
        return self.fresh(f"wallet-{self._wallets:06d}")

    def emit(self, time, inputs, outputs, coinbase=False) -> str:
        txid = self.txid()
        self.records.append({
            "txid": txid,
            "time": int(time),
            "coinbase": coinbase,
            "inputs": [{"src": s, "vout": v} for s, v in inputs],
            "outputs": [{"addr": a, "value": int(x)} for a, x in outputs],
        })
        for a, _ in outputs:
            self.owners.setdefault(a, a)
        return txid


def _split(rng, total: int, parts: int) -> list[int]:
    w = rng.dirichlet(np.ones(parts))
    vals = np.floor(w * total).astype(np.int64)
    vals[0] += total - vals.sum()
    return [int(v) for v in vals]


def _month_start(start_month: str, offset: int) -> tuple[int, int]:
    d = datetime.strptime(start_month, "%Y-%m")
    m = d.year * 12 + d.month - 1 + offset
    return m // 12, m % 12 + 1


def generate(config: ScenarioConfig) -> Scenario:
    """Build a ledger and its ground truth; identical output for identical config."""
    rng = np.random.default_rng(config.rng_seed)
    b = _Builder(config.rng_seed)
    labels: list[tuple[str, str, str]] = []

    pools = {}
    for a in config.archetypes:
        addrs = [b.fresh(a.name) for _ in range(config.pool_addresses)]
        pools[a.name] = addrs
        labels += [(x, a.name, ActorType.MINING.value) for x in addrs]

    # known counterparties: deposit addresses plus one hot wallet each
    counterparties: dict[str, list[dict]] = {}
    for t in COUNTERPARTY_TYPES:
        for j in range(config.counterparties_per_type):
            name = f"{t}-{j:02d}"
            deposits = [b.fresh(name) for _ in range(config.addresses_per_counterparty)]
            hot = b.fresh(name)
            counterparties.setdefault(t, []).append({"name": name, "deposits": deposits, "hot": hot})
            labels += [(x, name, t) for x in deposits + [hot]]

    flows = []
    for ai, arch in enumerate(config.archetypes):
        for f in range(config.flows_per_actor):
            month_off = f * config.months // config.flows_per_actor
            year, month = _month_start(config.start_month, month_off)
            frac = month_off / (config.months - 1) if config.months > 1 else 0.0
            weights = arch.weights_at(frac)
            n_days = calendar.monthrange(year, month)[1]
            day = int(rng.integers(1, n_days + 1))
            t0 = int(datetime(year, month, day, tzinfo=timezone.utc).timestamp())
            t0 += int(rng.integers(0, DAY // 2))

            n_cb = int(rng.integers(arch.coinbases[0], arch.coinbases[1] + 1))
            seeds = []
            for c in range(n_cb):
                addr = pools[arch.name][int(rng.integers(len(pools[arch.name])))]
                seeds.append(b.emit(t0 + 600 * c, [], [(addr, 50 * COIN)], coinbase=True))
            t = t0 + 600 * n_cb + int(rng.integers(600, 3 * 3600))
            n_miners = int(rng.integers(arch.fanout[0], arch.fanout[1] + 1))
            miners = [b.fresh(f"miner-{arch.name}-{f:03d}-{m:02d}") for m in range(n_miners)]
            shares = _split(rng, 50 * COIN * n_cb - FEE, n_miners)
            payout = b.emit(t, [(s, 0) for s in seeds], list(zip(miners, shares)))

            for m, value in enumerate(shares):
                _chain(b, rng, arch, weights, counterparties, payout, m, value, t)

            month = f"{year:04d}-{month:02d}"
            flows.append({
                "flow_id": f"{arch.name}-{month}-{f:03d}",
                "actor": arch.name,
                "month": month,
                "seeds": seeds,
            })

    records = sorted(b.records, key=lambda r: (r["time"], r["txid"]))
    n_edges = sum(len(r["inputs"]) for r in records)
    n_outputs = sum(len(r["outputs"]) for r in records)
    summary = {
        "n_transactions": len(records),
        "n_coinbase": sum(r["coinbase"] for r in records),
        "n_edges": n_edges,
        "n_outputs": n_outputs,
        "n_unspent": n_outputs - n_edges,
        "n_addresses": len({o["addr"] for r in records for o in r["outputs"]}),
        "n_flows": len(flows),
        "n_labeled_addresses": len(labels),
    }
    used = {o["addr"] for r in records for o in r["outputs"]}
    owners = {a: o for a, o in sorted(b.owners.items()) if a in used}
    return Scenario(config, records, labels, flows, owners, summary)


def _chain(b: _Builder, rng, arch: Archetype, weights, counterparties, src_tx, vout, value, t):
    """Move one miner's share through ``hops`` owners; the last output stays unspent."""
    n_hops = int(rng.integers(arch.hops[0], arch.hops[1] + 1))
    holder = None  # counterparty dict while a known actor holds the coins
    for _ in range(n_hops):
        t += int(rng.geometric(1.0 / arch.hop_delay_days)) * DAY + int(rng.integers(0, 3600))
        if value <= 2 * FEE:
            break
        if rng.random() < arch.wallet_hop_prob:
            dst = b.wallet()
            next_holder = None
        else:
            ctype = COUNTERPARTY_TYPES[int(rng.choice(len(COUNTERPARTY_TYPES), p=weights))]
            pool = counterparties[ctype]
            next_holder = pool[int(rng.integers(len(pool)))]
            dst = next_holder["deposits"][int(rng.integers(len(next_holder["deposits"])))]
        inputs = [(src_tx, vout)]
        outputs = [(dst, value - FEE)]
        if holder is not None and arch.background_ratio > 0:
            # pay out of a pooled balance funded with untainted coins
            bg = int(round(value * arch.background_ratio))
            bg_tx = b.emit(t - 1, [], [(holder["hot"], bg)], coinbase=True)
            inputs.append((bg_tx, 0))
            outputs.append((holder["hot"], bg))
        src_tx = b.emit(t, inputs, outputs)
        vout = 0
        value -= FEE
        holder = next_holder


# -- files -------------------------------------------------------------------------

def write_scenario(scenario: Scenario, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / n for k, n in (("ledger", "ledger.ndjson"), ("labels", "labels.csv"),
                                     ("seeds", "seeds.csv"), ("truth", "truth.csv"),
                                     ("summary", "summary.json"))}
    with open(paths["ledger"], "w", encoding="utf-8", newline="\n") as fh:
        for r in scenario.records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")
    with open(paths["labels"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "name", "type"])
        w.writerows(sorted(scenario.labels))
    with open(paths["seeds"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flow_id", "actor", "month", "seeds"])
        for f in scenario.flows:
            w.writerow([f["flow_id"], f["actor"], f["month"], " ".join(f["seeds"])])
    with open(paths["truth"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "owner"])
        w.writerows(sorted(scenario.owners.items()))
    summary = dict(scenario.summary, config=scenario.config.to_dict())
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


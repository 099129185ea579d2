"""Ledger builders and independent oracles shared by the test modules."""
from __future__ import annotations

import json

import numpy as np

from taintflow.ledger import Ledger, parse_record

DAY = 86400
T0 = 1_388_534_400  # 2014-01-01


def rec(txid, time, inputs=(), outputs=()):
    """Record dict; inputs are (src, vout), outputs are (addr, value)."""
    return {
        "txid": txid,
        "time": time,
        "coinbase": not inputs,
        "inputs": [{"src": s, "vout": v} for s, v in inputs],
        "outputs": [{"addr": a, "value": x} for a, x in outputs],
    }


def build(records) -> Ledger:
    return Ledger(parse_record(r) for r in records)


def write_ndjson(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def random_records(rng: np.random.Generator, n_tx: int, n_addr: int = 40,
                   n_coinbase: int = 3, coarse_time: bool = True):
    """Random valid ledger: each tx spends 1-3 earlier unspent outputs.

    With ``coarse_time`` many transactions share a timestamp, which exercises
    the equal-time ordering rules.
    """
    records = []
    unspent = []  # (txid, vout, value, time)
    t = T0
    for i in range(n_tx):
        txid = f"{rng.integers(0, 2**63):016x}{i:04x}"
        t += int(rng.integers(0, 2)) * DAY if coarse_time else int(rng.integers(1, 5 * DAY))
        if i < n_coinbase or not unspent or rng.random() < 0.05:
            value = int(rng.integers(10**6, 10**9))
            n_out = int(rng.integers(1, 4))
            cuts = np.sort(rng.integers(0, value, n_out - 1))
            vals = np.diff(np.concatenate([[0], cuts, [value]])).astype(int).tolist()
            outs = [(f"a{rng.integers(n_addr)}", v) for v in vals]
            records.append(rec(txid, t, (), outs))
            unspent.extend((txid, k, v, t) for k, v in enumerate(vals))
            continue
        k = int(min(len(unspent), rng.integers(1, 4)))
        picks = sorted(rng.choice(len(unspent), size=k, replace=False).tolist(), reverse=True)
        spent = [unspent.pop(j) for j in picks]
        total = sum(s[2] for s in spent)
        fee = int(rng.integers(0, max(1, total // 100)))
        value = total - fee
        n_out = int(rng.integers(1, 4))
        cuts = np.sort(rng.integers(0, value + 1, n_out - 1))
        vals = np.diff(np.concatenate([[0], cuts, [value]])).astype(int).tolist()
        outs = [(f"a{rng.integers(n_addr)}", v) for v in vals]
        records.append(rec(txid, t, [(s[0], s[1]) for s in spent], outs))
        unspent.extend((txid, k, v, t) for k, v in enumerate(vals))
    return records


def fixed_point_purity(records, seeds, purity_min, time_max):
    """Iterate the purity equation over the whole graph until nothing changes.

    Works on raw records without any ordering: every transaction is
    re-evaluated each sweep (Jacobi style).  Returns ``(purity, expanded,
    reached)`` where ``reached`` are transactions holding a tainted input
    plus the seeds.
    """
    by_id = {r["txid"]: r for r in records}
    seeds = set(seeds)
    t_stop = min(by_id[s]["time"] for s in seeds) + time_max
    p = {t: 0.0 for t in by_id}
    expanded: set[str] = set()
    for _ in range(len(records) + 2):
        reached = set(seeds)
        new_p = {}
        for t, r in by_id.items():
            if t in seeds:
                new_p[t] = 1.0
                continue
            num = 0.0
            den = 0
            for inp in r["inputs"]:
                v = by_id[inp["src"]]["outputs"][inp["vout"]]["value"]
                den += v
                if inp["src"] in expanded:
                    reached.add(t)
                    num += p[inp["src"]] * v
            new_p[t] = num / den if den else 0.0
        new_exp = {
            t for t in reached
            if new_p[t] >= purity_min and by_id[t]["time"] <= t_stop
        }
        if new_p == p and new_exp == expanded:
            return p, expanded, reached
        p, expanded = new_p, new_exp
    raise AssertionError("fixed point did not converge")

"""Follow one coin through a hand-built ledger until it dissolves.

    python demos/dissolution.py

A pool mines 1 BTC and pays it to a miner, who splits it.  One half is
deposited into an exchange hot wallet that already holds 700 BTC; the other
is spent by a shop together with 1.5 BTC of its own coins.  Every merge with
untainted coins lowers purity, and tracing stops once it falls below 0.001.
"""
import tempfile
from pathlib import Path

from taintflow.ledger import Ledger, parse_record
from taintflow.taint import TaintConfig, extract_flow, flow_stats, write_flow_tsv

BTC = 100_000_000
T0 = 1_388_534_400  # 2014-01-01 UTC
DAY = 86_400


def tx(txid, day, inputs, outputs):
    return {
        "txid": txid, "time": T0 + day * DAY, "coinbase": not inputs,
        "inputs": [{"src": s, "vout": v} for s, v in inputs],
        "outputs": [{"addr": a, "value": x} for a, x in outputs],
    }


records = [
    tx("mined", 0, [], [("pool", BTC)]),
    tx("payout", 1, [("mined", 0)], [("miner", BTC)]),
    tx("split", 2, [("payout", 0)], [("miner2", BTC // 2), ("shop", BTC // 2)]),
    tx("hot", 0, [], [("exchange", 700 * BTC)]),
    tx("deposit", 3, [("split", 0), ("hot", 0)], [("exchange", 700 * BTC + BTC // 2)]),
    tx("withdraw", 9, [("deposit", 0)], [("user", 200 * BTC), ("exchange", 500 * BTC + BTC // 2)]),
    tx("till", 0, [], [("shop", 3 * BTC // 2)]),
    tx("spend", 4, [("split", 1), ("till", 0)], [("cafe", BTC), ("shop", BTC)]),
    tx("resale", 6, [("spend", 0)], [("roaster", BTC)]),
]
ledger = Ledger(parse_record(r) for r in records)
flow = extract_flow(ledger, None, TaintConfig(seeds={"mined"}), flow_id="demo", source_label="pool")

print(f"{'tx':10} {'depth':>5} {'purity':>12}  status")
for t in sorted(flow.purity, key=lambda t: (flow.depth[t], t)):
    status = "followed" if t in flow.expanded else "dissolved"
    print(f"{t:10} {flow.depth[t]:5d} {flow.purity[t]:12.6f}  {status}")

# 0.5 / 700.5 ~ 0.000714 at the deposit: below 0.001, so the exchange side
# ends there and the withdrawal is never visited.  The shop merge gives 0.25,
# which the roaster inherits.
print(flow_stats(flow))
out = Path(tempfile.mkdtemp()) / "demo.tsv"
write_flow_tsv(flow, out)
print(f"flow table written to {out}")

"""UTXO transaction graph.

Transactions are nodes, outputs are edges from the creating transaction to
the spending one.  A :class:`Ledger` is built once (from NDJSON or from
in-memory records), validated, and never mutated afterwards.

File format, one transaction per line::

    {"txid": "ab12..", "time": 1388534400, "coinbase": false,
     "inputs": [{"src": "cd34..", "vout": 0}],
     "outputs": [{"addr": "1Foo..", "value": 5000000000}]}
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import (
    DanglingInput,
    DoubleSpend,
    NonCausalSpend,
    NonMonotonicValue,
    ParseError,
    UnknownTx,
)

__all__ = [
    "UtxoRef",
    "UtxoOut",
    "Transaction",
    "Ledger",
    "ingest",
    "outputs_of",
    "parse_record",
    "dump_record",
]


@dataclass(frozen=True)
class UtxoRef:
    src_txid: str
    vout: int


@dataclass(frozen=True)
class UtxoOut:
    address: str
    value: int
    spent_by: str | None = None


@dataclass(frozen=True)
class Transaction:
    txid: str
    time: int
    is_coinbase: bool
    inputs: tuple[UtxoRef, ...]
    outputs: tuple[UtxoOut, ...]


@dataclass(frozen=True)
class ResolvedInput:
    """An input joined with the output it spends."""

    src_txid: str
    vout: int
    address: str
    value: int


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse_record(obj, line: int | None = None) -> Transaction:
    """Validate one decoded JSON object and turn it into a Transaction."""
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", line)
    try:
        txid = obj["txid"]
        time = obj["time"]
        coinbase = obj["coinbase"]
        raw_inputs = obj["inputs"]
        raw_outputs = obj["outputs"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line) from None
    if not isinstance(txid, str) or not txid:
        raise ParseError("txid must be a non-empty string", line)
    if not _is_int(time):
        raise ParseError(f"{txid}: time must be an integer", line)
    if not isinstance(coinbase, bool):
        raise ParseError(f"{txid}: coinbase must be a boolean", line)
    if not isinstance(raw_inputs, list) or not isinstance(raw_outputs, list):
        raise ParseError(f"{txid}: inputs and outputs must be lists", line)
    if coinbase != (len(raw_inputs) == 0):
        raise ParseError(f"{txid}: coinbase flag must match an empty input list", line)

    inputs = []
    for item in raw_inputs:
        if not isinstance(item, dict) or not isinstance(item.get("src"), str) \
                or not _is_int(item.get("vout")) or item["vout"] < 0:
            raise ParseError(f"{txid}: malformed input {item!r}", line)
        inputs.append(UtxoRef(item["src"], item["vout"]))

    outputs = []
    for item in raw_outputs:
        if not isinstance(item, dict) or not isinstance(item.get("addr"), str) \
                or not _is_int(item.get("value")):
            raise ParseError(f"{txid}: malformed output {item!r}", line)
        if item["value"] < 0:
            raise NonMonotonicValue(f"{txid}: negative output value {item['value']}")
        outputs.append(UtxoOut(item["addr"], item["value"]))

    return Transaction(txid, time, coinbase, tuple(inputs), tuple(outputs))


def dump_record(tx: Transaction) -> str:
    """Serialize a transaction back to one NDJSON line (no trailing newline)."""
    return json.dumps(
        {
            "txid": tx.txid,
            "time": tx.time,
            "coinbase": tx.is_coinbase,
            "inputs": [{"src": r.src_txid, "vout": r.vout} for r in tx.inputs],
            "outputs": [{"addr": o.address, "value": o.value} for o in tx.outputs],
        },
        separators=(",", ":"),
    )


class Ledger:
    """Immutable, fully resolved transaction graph.

    ``order`` is the canonical traversal order: ascending ``(time, txid)``,
    adjusted only where equal-time transactions spend each other so that
    every source precedes its spender.  ``rank[txid]`` is the position in
    that order.
    """

    def __init__(self, transactions: Iterable[Transaction], lines: Mapping[str, int] | None = None):
        lines = lines or {}
        txs: dict[str, Transaction] = {}
        for tx in transactions:
            if tx.txid in txs:
                raise ParseError(f"duplicate txid {tx.txid}", lines.get(tx.txid))
            txs[tx.txid] = tx

        spent_by: dict[tuple[str, int], str] = {}
        resolved: dict[str, tuple[ResolvedInput, ...]] = {}
        for tx in txs.values():
            ins = []
            for ref in tx.inputs:
                src = txs.get(ref.src_txid)
                if src is None or ref.vout >= len(src.outputs):
                    raise DanglingInput(
                        f"{tx.txid} spends unknown output {ref.src_txid}:{ref.vout}"
                        + (f" (line {lines[tx.txid]})" if tx.txid in lines else "")
                    )
                key = (ref.src_txid, ref.vout)
                if key in spent_by:
                    raise DoubleSpend(
                        f"{ref.src_txid}:{ref.vout} spent by both {spent_by[key]} and {tx.txid}"
                    )
                if src.time > tx.time:
                    raise NonCausalSpend(
                        f"{tx.txid} (t={tx.time}) spends {ref.src_txid} created at t={src.time}"
                    )
                spent_by[key] = tx.txid
                out = src.outputs[ref.vout]
                ins.append(ResolvedInput(ref.src_txid, ref.vout, out.address, out.value))
            resolved[tx.txid] = tuple(ins)
            if not tx.is_coinbase:
                fee = sum(i.value for i in ins) - sum(o.value for o in tx.outputs)
                if fee < 0:
                    raise NonMonotonicValue(f"{tx.txid} spends {-fee} sat more than it receives")

        linked = {}
        for txid, tx in txs.items():
            outs = tuple(
                UtxoOut(o.address, o.value, spent_by.get((txid, v)))
                for v, o in enumerate(tx.outputs)
            )
            linked[txid] = Transaction(tx.txid, tx.time, tx.is_coinbase, tx.inputs, outs)

        self._txs = linked
        self._inputs = resolved
        self.order: tuple[str, ...] = _canonical_order(linked, resolved)
        self.rank: dict[str, int] = {txid: i for i, txid in enumerate(self.order)}
        self.stats = self._compute_stats()

    # -- lookup --------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._txs)

    def __contains__(self, txid) -> bool:
        return txid in self._txs

    def __iter__(self) -> Iterator[Transaction]:
        return (self._txs[t] for t in self.order)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Ledger):
            return NotImplemented
        return self.order == other.order and self._txs == other._txs

    def tx(self, txid: str) -> Transaction:
        try:
            return self._txs[txid]
        except KeyError:
            raise UnknownTx(f"unknown transaction {txid}") from None

    def outputs_of(self, txid: str) -> list[UtxoOut]:
        return list(self.tx(txid).outputs)

    def inputs_of(self, txid: str) -> list[ResolvedInput]:
        self.tx(txid)
        return list(self._inputs[txid])

    def input_value(self, txid: str) -> int:
        return sum(i.value for i in self._inputs[txid])

    def edges(self) -> Iterator[tuple[str, int, str]]:
        """Yield ``(src_txid, vout, dst_txid)`` for every spent output."""
        for txid in self.order:
            for v, out in enumerate(self._txs[txid].outputs):
                if out.spent_by is not None:
                    yield txid, v, out.spent_by

    def addresses(self) -> set[str]:
        return {o.address for tx in self._txs.values() for o in tx.outputs}

    def _compute_stats(self) -> dict:
        n_out = n_spent = total_out = fees = coinbase_value = 0
        for txid, tx in self._txs.items():
            out_sum = sum(o.value for o in tx.outputs)
            total_out += out_sum
            n_out += len(tx.outputs)
            n_spent += sum(o.spent_by is not None for o in tx.outputs)
            if tx.is_coinbase:
                coinbase_value += out_sum
            else:
                fees += self.input_value(txid) - out_sum
        times = [tx.time for tx in self._txs.values()]
        return {
            "n_transactions": len(self._txs),
            "n_coinbase": sum(tx.is_coinbase for tx in self._txs.values()),
            "n_outputs": n_out,
            "n_edges": n_spent,
            "n_unspent": n_out - n_spent,
            "n_addresses": len(self.addresses()),
            "total_output_value": total_out,
            "coinbase_value": coinbase_value,
            "total_fees": fees,
            "time_min": min(times) if times else None,
            "time_max": max(times) if times else None,
        }


def _canonical_order(txs, resolved) -> tuple[str, ...]:
    # Kahn's algorithm keyed on (time, txid): identical to the plain time sort
    # unless equal-time transactions spend each other out of txid order.
    indeg = {txid: 0 for txid in txs}
    children: dict[str, list[str]] = {txid: [] for txid in txs}
    for txid, ins in resolved.items():
        for src in {i.src_txid for i in ins}:
            indeg[txid] += 1
            children[src].append(txid)
    heap = [(txs[t].time, t) for t, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, txid = heapq.heappop(heap)
        order.append(txid)
        for child in children[txid]:
            indeg[child] -= 1
            if indeg[child] == 0:
                heapq.heappush(heap, (txs[child].time, child))
    if len(order) != len(txs):
        raise NonCausalSpend("transactions spend each other in a cycle")
    return tuple(order)


def ingest(path, format: str = "ndjson") -> Ledger:
    """Read an NDJSON ledger file."""
    if format != "ndjson":
        raise ValueError(f"unsupported ledger format {format!r}")
    txs = []
    lines = {}
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            tx = parse_record(obj, lineno)
            lines.setdefault(tx.txid, lineno)
            txs.append(tx)
    return Ledger(txs, lines)


def outputs_of(ledger: Ledger, txid: str) -> list[UtxoOut]:
    return ledger.outputs_of(txid)

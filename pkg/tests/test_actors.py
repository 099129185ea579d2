import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import T0, build, rec, random_records
from taintflow.actors import (
    ActorIndex, ActorType, Label, TagActorSet, cluster_addresses, frequent_clusters,
    is_coinjoin, load_labels, tag_actor_set,
)
from taintflow.errors import ConflictingLabel, EmptyCorpus, UnknownType


def brute_partition(records, addresses, skip=()):
    """Merge overlapping input-address sets until nothing changes."""
    by_id = {r["txid"]: r for r in records}
    groups = [{a} for a in addresses]
    for r in records:
        if not r["inputs"] or r["txid"] in skip:
            continue
        groups.append({by_id[i["src"]]["outputs"][i["vout"]]["addr"] for i in r["inputs"]})
    changed = True
    while changed:
        changed = False
        out = []
        for g in groups:
            for h in out:
                if g & h:
                    h |= g
                    changed = True
                    break
            else:
                out.append(set(g))
        groups = out
    return {frozenset(g) for g in groups}


def test_transitive_merge():
    led = build([
        rec("c1", T0, (), [("a", 5), ("b", 5)]),
        rec("c2", T0, (), [("c", 5)]),
        rec("t1", T0 + 1, [("c1", 0), ("c1", 1)], [("b", 10)]),
        rec("t2", T0 + 2, [("t1", 0), ("c2", 0)], [("z", 15)]),
    ])
    idx = cluster_addresses(led)
    assert idx.cluster_of("c") == "a"
    assert idx.members("a") == {"a", "b", "c"}
    assert idx.cluster_of("z") == "z"


def test_coinbase_only_ledger_is_all_singletons():
    led = build([rec(f"c{i}", T0, (), [(f"x{i}", 1), (f"y{i}", 1)]) for i in range(5)])
    idx = cluster_addresses(led)
    assert all(len(m) == 1 for m in idx.partition())
    assert len(idx) == 10


def _cj_ledger(values, n_inputs=2, same_addr=False):
    coin = [rec(f"c{i}", T0, (), [("u" if same_addr else f"u{i}", 100)]) for i in range(n_inputs)]
    tx = rec("t", T0 + 1, [(f"c{i}", 0) for i in range(n_inputs)], [(f"o{j}", v) for j, v in enumerate(values)])
    led = build(coin + [tx])
    return led, led.tx("t")


def test_coinjoin_predicate():
    led, tx = _cj_ledger([5, 5, 3])
    assert is_coinjoin(tx, led)
    led, tx = _cj_ledger([5, 5, 3], n_inputs=1)
    assert not is_coinjoin(tx, led)
    led, tx = _cj_ledger([4, 5, 3], n_inputs=3)
    assert not is_coinjoin(tx, led)
    led, tx = _cj_ledger([5, 5], n_inputs=2)
    assert not is_coinjoin(tx, led)
    # three equal outputs but only two distinct input owners
    led, tx = _cj_ledger([3, 3, 3, 1], n_inputs=2)
    assert not is_coinjoin(tx, led)
    led, tx = _cj_ledger([5, 5, 3], n_inputs=2, same_addr=True)
    assert not is_coinjoin(tx, led)


def test_coinjoin_does_not_merge():
    led, _ = _cj_ledger([5, 5, 3])
    assert cluster_addresses(led).cluster_of("u1") == "u1"
    assert cluster_addresses(led, coinjoin_filter=False).cluster_of("u1") == "u0"


@pytest.mark.parametrize("seed", range(10))
def test_partition_matches_brute_force(seed):
    records = random_records(np.random.default_rng(seed), 300, n_addr=150)
    led = build(records)
    skip = {tx.txid for tx in led if not tx.is_coinbase and is_coinjoin(tx, led)}
    assert cluster_addresses(led).partition() == brute_partition(records, led.addresses(), skip)
    assert cluster_addresses(led, False).partition() == brute_partition(records, led.addresses())


def test_idempotent_and_order_independent():
    records = random_records(np.random.default_rng(7), 200, n_addr=80)
    a = cluster_addresses(build(records))
    shuffled = list(records)
    random.Random(3).shuffle(shuffled)
    assert a == cluster_addresses(build(shuffled))
    assert a == cluster_addresses(build(records))
    for cid in a.clusters():
        assert cid == min(a.members(cid))


def _write_labels(tmp_path, rows):
    p = tmp_path / "labels.csv"
    p.write_text("address,name,type\n" + "".join(",".join(r) + "\n" for r in rows), encoding="utf-8")
    return p


def test_labels_spread_to_cluster(tmp_path):
    led = build([
        rec("c1", T0, (), [("addr1", 5), ("addr0", 5)]),
        rec("t", T0 + 1, [("c1", 0), ("c1", 1)], [("z", 10)]),
    ])
    idx = cluster_addresses(led).with_labels(load_labels(_write_labels(tmp_path, [("addr1", "Bitstamp.net", "exchange")])))
    assert idx.label(idx.cluster_of("addr0")) == Label("Bitstamp.net", ActorType.EXCHANGE)
    assert idx.label("z") is None
    assert ActorIndex.from_json(idx.to_json()) == idx


def test_label_errors(tmp_path):
    with pytest.raises(UnknownType):
        load_labels(_write_labels(tmp_path, [("a", "Lucky", "casino")]))
    led = build([
        rec("c1", T0, (), [("a", 5), ("b", 5)]),
        rec("t", T0 + 1, [("c1", 0), ("c1", 1)], [("z", 10)]),
    ])
    table = load_labels(_write_labels(tmp_path, [("a", "X", "exchange"), ("b", "Y", "exchange")]))
    with pytest.raises(ConflictingLabel):
        cluster_addresses(led).with_labels(table)
    with pytest.raises(ConflictingLabel):
        load_labels(_write_labels(tmp_path, [("a", "X", "exchange"), ("a", "Y", "exchange")]))


def test_frequent_strictly_more_than_threshold():
    flows = [{"x", "y"}, {"x", "y"}, {"x"}, {"z"}]
    tags = frequent_clusters(flows, 0.5)
    assert "x" in tags          # 3 of 4
    assert "y" not in tags      # exactly 2 of 4
    with pytest.raises(EmptyCorpus):
        frequent_clusters([], 0.5)
    with pytest.raises(ValueError):
        frequent_clusters(flows, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sets(st.sampled_from("abcdefgh"), max_size=6), min_size=1, max_size=100),
       st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_frequent_matches_recount(flows, threshold):
    expected = {c for c in "abcdefgh" if sum(c in f for f in flows) > threshold * len(flows)}
    assert frequent_clusters(flows, threshold).members == expected


def test_tag_sets():
    idx = ActorIndex({"a": "a", "b": "a", "c": "c"}, {"a": Label("Ex", ActorType.EXCHANGE)})
    assert "anything" in tag_actor_set("all", idx)
    known = tag_actor_set("known_type", idx)
    assert "a" in known and "c" not in known
    with pytest.raises(ValueError):
        TagActorSet("bogus")

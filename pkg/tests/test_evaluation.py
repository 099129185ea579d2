import itertools
import math

import networkx as nx
import numpy as np
import pytest
from sklearn import metrics as skm

from helpers import T0, build, rec
from taintflow.errors import DegenerateData, LengthMismatch, TooFewSamples
from taintflow.evaluation import (
    FEATURE_NAMES, EvalReport, clustering_scores, cluster_graph, evaluate, kmeans, kmeans_select,
    knn_loocv, month_number, network_features, pairwise_distances, silhouette, time_correlation,
)
from taintflow.taint import TaintConfig, extract_flow


# -- naive oracles --------------------------------------------------------------

def naive_dist(a, b, metric):
    if metric == "euclidean":
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - sum(x * y for x, y in zip(a, b)) / (na * nb)


def naive_knn(X, labels, k, metric):
    n = len(X)
    preds = []
    for i in range(n):
        ds = sorted((naive_dist(X[i], X[j], metric), j) for j in range(n) if j != i)
        near = [labels[j] for _, j in ds[:k]]
        votes = {c: near.count(c) for c in near}
        top = max(votes.values())
        preds.append(next(c for c in near if votes[c] == top))
    classes = sorted(set(labels))
    f1s = []
    for c in classes:
        tp = sum(p == c and t == c for p, t in zip(preds, labels))
        fp = sum(p == c and t != c for p, t in zip(preds, labels))
        fn = sum(p != c and t == c for p, t in zip(preds, labels))
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    acc = sum(p == t for p, t in zip(preds, labels)) / n
    return acc, sum(f1s) / len(f1s), preds


def naive_silhouette(X, lab, metric):
    n = len(X)
    s = []
    for i in range(n):
        same = [naive_dist(X[i], X[j], metric) for j in range(n) if j != i and lab[j] == lab[i]]
        if not same:
            s.append(0.0)
            continue
        a = sum(same) / len(same)
        b = min(
            np.mean([naive_dist(X[i], X[j], metric) for j in range(n) if lab[j] == c])
            for c in set(lab) if c != lab[i]
        )
        s.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(s) / n


def naive_scores(a, b):
    """Textbook formulas straight from a contingency table of python ints."""
    n = len(a)
    ca, cb = sorted(set(a)), sorted(set(b))
    table = [[sum(1 for x, y in zip(a, b) if x == i and y == j) for j in cb] for i in ca]
    ra = [sum(r) for r in table]
    rb = [sum(table[i][j] for i in range(len(ca))) for j in range(len(cb))]
    c2 = lambda x: x * (x - 1) // 2
    idx = sum(c2(v) for r in table for v in r)
    sa, sb, tot = sum(map(c2, ra)), sum(map(c2, rb)), c2(n)
    exp = sa * sb / tot
    ari = (idx - exp) / ((sa + sb) / 2 - exp)
    H = lambda cs: -sum(c / n * math.log(c / n) for c in cs if c)
    ha, hb = H(ra), H(rb)
    mi = sum(v / n * math.log(n * v / (ra[i] * rb[j]))
             for i, r in enumerate(table) for j, v in enumerate(r) if v)
    emi = 0.0
    for x in ra:
        for y in rb:
            for nij in range(max(1, x + y - n), min(x, y) + 1):
                p = math.comb(y, nij) * math.comb(n - y, x - nij) / math.comb(n, x)
                emi += p * nij / n * math.log(n * nij / (x * y))
    nmi = mi / ((ha + hb) / 2)
    ami = (mi - emi) / ((ha + hb) / 2 - emi)
    return nmi, ari, ami


def naive_rank(xs):
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    r = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        for t in range(i, j + 1):
            r[order[t]] = (i + j) / 2 + 1
        i = j + 1
    return r


def naive_spearman(x, y):
    rx, ry = naive_rank(x), naive_rank(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))


def naive_lloyd_inertia(X, k, rng, iters=300):
    C = X[rng.choice(len(X), k, replace=False)]
    for _ in range(iters):
        lab = np.array([np.argmin([np.sum((x - c) ** 2) for c in C]) for x in X])
        new = np.array([X[lab == j].mean(0) if np.any(lab == j) else C[j] for j in range(k)])
        if np.allclose(new, C):
            break
        C = new
    return sum(min(np.sum((x - c) ** 2) for c in C) for x in X)


def blobs(rng, centers, n_each, spread=0.05):
    X = np.concatenate([c + spread * rng.standard_normal((n_each, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_each)
    return X, y


# -- kNN ----------------------------------------------------------------------

def test_knn_separated_blobs():
    X = np.array([[0, 0], [0.1, 0], [0, 0.1], [10, 10], [10.1, 10], [10, 10.1]])
    r = knn_loocv(X, list("aaabbb"), k=2, metric="euclidean")
    assert r.accuracy == 1.0 and r.macro_f1 == 1.0
    assert r.confusion.tolist() == [[3, 0], [0, 3]]


def test_knn_identical_points_deterministic():
    X = np.ones((6, 3))
    labels = list("ababab")
    r1 = knn_loocv(X, labels, 3)
    r2 = knn_loocv(X, labels, 3)
    assert r1.predictions == r2.predictions
    # neighbours ordered by index: flow 0 sees 1,2,3 -> b,a,b -> b
    assert r1.predictions[0] == "b"
    acc, _, preds = naive_knn(X.tolist(), labels, 3, "cosine")
    assert preds == r1.predictions and acc == r1.accuracy


@pytest.mark.parametrize("metric", ["cosine", "euclidean"])
def test_knn_matches_oracle(metric):
    rng = np.random.default_rng(3)
    for trial in range(20):
        n = int(rng.integers(8, 51))
        X = rng.standard_normal((n, 4))
        labels = [f"c{x}" for x in rng.integers(0, 3, n)]
        if len(set(labels)) < 2:
            continue
        for k in (1, 3, 4):
            r = knn_loocv(X, labels, k, metric)
            acc, f1, preds = naive_knn(X.tolist(), labels, k, metric)
            assert r.predictions == preds
            assert abs(r.accuracy - acc) < 1e-9 and abs(r.macro_f1 - f1) < 1e-9


def test_knn_even_k_tie_goes_to_nearest():
    X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [100.0]])
    labels = ["x", "a", "b", "a", "b", "b"]
    r = knn_loocv(X, labels, k=4, metric="euclidean")
    assert r.predictions[0] == "a"


def test_knn_relabel_invariant_and_row_sums():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 5))
    labels = list(rng.choice(["p", "q", "r"], 30))
    r = knn_loocv(X, labels)
    mapping = {"p": "zz", "q": "aa", "r": "mm"}
    r2 = knn_loocv(X, [mapping[x] for x in labels])
    assert r.accuracy == r2.accuracy and r.macro_f1 == pytest.approx(r2.macro_f1, abs=1e-15)
    support = [labels.count(c) for c in r.classes]
    assert r.confusion.sum(1).tolist() == support


def test_knn_errors():
    with pytest.raises(TooFewSamples):
        knn_loocv(np.zeros((3, 2)), list("abb"), k=3)
    with pytest.raises(TooFewSamples):
        knn_loocv(np.ones((5, 2)), list("aaaaa"))
    with pytest.raises(LengthMismatch):
        knn_loocv(np.ones((5, 2)), list("ab"))


# -- k-means ----------------------------------------------------------------------

def test_kmeans_three_blobs():
    rng = np.random.default_rng(1)
    X, y = blobs(rng, [(0, 0), (5, 0), (0, 5)], 15, 0.2)
    r = kmeans_select(X, metric="euclidean")
    assert r.k == 3 and r.silhouette > 0.8
    assert clustering_scores(r.labels, y)["ari"] == 1.0


def test_kmeans_two_blobs_cosine():
    rng = np.random.default_rng(2)
    X, _ = blobs(rng, [(1, 0, 0), (0, 0, 1)], 20, 0.05)
    r = kmeans_select(X)
    assert r.k == 2
    assert all(r.scores[2] > r.scores[k] for k in range(3, 12))


def test_kmeans_not_worse_than_naive_restarts():
    # same restart budget on both sides
    rng = np.random.default_rng(5)
    X = rng.standard_normal((50, 3))
    for k in range(2, 12):
        _, _, inertia = kmeans(X, k, restarts=100, seed=0)
        oracle = min(naive_lloyd_inertia(X, k, np.random.default_rng(1000 * k + r)) for r in range(100))
        assert inertia <= oracle * (1 + 1e-6), k


def test_kmeans_deterministic_and_errors():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((20, 3))
    a, b = kmeans_select(X), kmeans_select(X)
    assert a.k == b.k and np.array_equal(a.labels, b.labels)
    with pytest.raises(DegenerateData):
        kmeans_select(np.ones((20, 2)))
    with pytest.raises(TooFewSamples):
        kmeans_select(X[:11])


@pytest.mark.parametrize("metric", ["cosine", "euclidean"])
def test_silhouette_matches_oracle(metric):
    rng = np.random.default_rng(6)
    for _ in range(20):
        n = int(rng.integers(5, 51))
        X = rng.standard_normal((n, 3))
        lab = rng.integers(0, int(rng.integers(2, 6)), n)
        if len(set(lab)) < 2:
            continue
        got = silhouette(pairwise_distances(X, metric), lab)
        assert abs(got - naive_silhouette(X.tolist(), lab.tolist(), metric)) < 1e-9


def test_silhouette_matches_sklearn():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 4))
    lab = rng.integers(0, 4, 40)
    got = silhouette(pairwise_distances(X, "euclidean"), lab)
    assert got == pytest.approx(skm.silhouette_score(X, lab), abs=1e-9)


# -- partition agreement -------------------------------------------------------------

def test_scores_identical_up_to_permutation():
    truth = [0, 0, 1, 1, 2, 2, 2]
    pred = [5, 5, 9, 9, 1, 1, 1]
    s = clustering_scores(pred, truth)
    assert s == pytest.approx({"nmi": 1.0, "ari": 1.0, "ami": 1.0})


def test_scores_single_cluster():
    s = clustering_scores([0] * 10, [0] * 5 + [1] * 5)
    assert s["ari"] == 0.0 and s["nmi"] == 0.0 and abs(s["ami"]) < 1e-12


def test_scores_match_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n = int(rng.integers(6, 51))
        a = rng.integers(0, int(rng.integers(2, 6)), n).tolist()
        b = rng.integers(0, int(rng.integers(2, 6)), n).tolist()
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        s = clustering_scores(a, b)
        nmi, ari, ami = naive_scores(b, a)
        assert abs(s["nmi"] - nmi) < 1e-9
        assert abs(s["ari"] - ari) < 1e-9
        assert abs(s["ami"] - ami) < 1e-9
        assert s["ami"] == pytest.approx(skm.adjusted_mutual_info_score(b, a), abs=1e-9)
        assert s["ari"] == pytest.approx(skm.adjusted_rand_score(b, a), abs=1e-9)


def test_scores_permutation_invariant():
    rng = np.random.default_rng(9)
    a = rng.integers(0, 4, 30)
    b = rng.integers(0, 3, 30)
    perm = np.array([2, 0, 3, 1])
    assert clustering_scores(perm[a], b) == pytest.approx(clustering_scores(a, b), abs=1e-12)


def test_shuffled_scores_near_zero():
    rng = np.random.default_rng(10)
    truth = np.repeat(np.arange(3), 12)
    pred = np.repeat(np.arange(3), 12)
    aris, amis = [], []
    for _ in range(200):
        s = clustering_scores(rng.permutation(pred), truth)
        aris.append(s["ari"])
        amis.append(s["ami"])
    assert abs(np.mean(aris)) < 0.05 and abs(np.mean(amis)) < 0.05


def test_scores_length_mismatch():
    with pytest.raises(LengthMismatch):
        clustering_scores([0, 1], [0])
    with pytest.raises(LengthMismatch):
        clustering_scores([], [])


# -- time correlation ----------------------------------------------------------------

def test_time_correlation_proportional():
    months = list(range(8))
    X = np.array([[float(m), 0.0] for m in months])
    assert time_correlation(X, months, "euclidean") == pytest.approx(1.0)


def test_time_correlation_anti_proportional():
    # gaps (0,1)=1 (0,2)=3 (1,2)=2 against distances 3, 1, 2
    months = [0, 1, 3]
    X = np.array([[0.0, 0.0], [3.0, 0.0], [1.0, 0.0]])
    assert time_correlation(X, months, "euclidean") == pytest.approx(-1.0)


def test_time_correlation_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = 12
        months = rng.integers(0, 12, n).tolist()
        X = rng.standard_normal((n, 3))
        got = time_correlation(X, months)
        pairs = list(itertools.combinations(range(n), 2))
        gaps = [abs(months[i] - months[j]) for i, j in pairs]
        dist = [naive_dist(X[i], X[j], "cosine") for i, j in pairs]
        assert abs(got - naive_spearman(gaps, dist)) < 1e-9


def test_time_correlation_monotone_invariant_and_constant():
    rng = np.random.default_rng(12)
    months = rng.integers(0, 6, 10)
    X = rng.random((10, 3))
    D = pairwise_distances(X, "euclidean")
    a = time_correlation(X, months, "euclidean")
    b = time_correlation(np.exp(3 * D) - 1, months, "precomputed")
    assert a == pytest.approx(b, abs=1e-12)
    assert time_correlation(X, [3] * 10, "euclidean") is None


def test_month_number():
    assert month_number("2014-03") == 2014 * 12 + 2
    assert month_number(24170) == 24170
    assert month_number("24170") == 24170


# -- network features ---------------------------------------------------------------------

def naive_features(nodes, edges):
    G = nx.DiGraph()
    G.add_nodes_from(nodes)
    G.add_edges_from(edges)
    n, m = G.number_of_nodes(), G.number_of_edges()
    if n < 2:
        return np.array([n, m] + [0.0] * 34)
    dens = nx.density(G)
    src = [G.out_degree(u) for u, _ in G.edges]
    dst = [G.in_degree(v) for _, v in G.edges]
    assort = 0.0
    if m >= 2 and np.std(src) > 0 and np.std(dst) > 0:
        assort = float(np.corrcoef(src, dst)[0, 1])
    U = G.to_undirected()
    order = list(nodes)
    indeg = [G.in_degree(v) for v in order]
    outdeg = [G.out_degree(v) for v in order]
    cc = nx.clustering(U)
    ec = nx.eigenvector_centrality(U, max_iter=5000, tol=1e-12)
    feats = [n, m, dens, assort]
    for x in (indeg, outdeg, [cc[v] for v in order], [ec[v] for v in order]):
        x = np.asarray(x, dtype=float)
        feats += [x.min(), *np.quantile(x, [0.25, 0.5, 0.75]), x.max(), x.mean(),
                  math.sqrt(((x - x.mean()) ** 2).mean()), np.abs(x - x.mean()).mean()]
    return np.array(feats)


def test_three_cycle():
    f = network_features(nodes=["a", "b", "c"], edges=[("a", "b"), ("b", "c"), ("c", "a")])
    d = dict(zip(FEATURE_NAMES, f))
    assert len(f) == 36
    assert d["n_nodes"] == 3 and d["n_edges"] == 3 and d["density"] == 0.5
    for s in ("min", "max", "mean"):
        assert d[f"in_degree_{s}"] == 1 and d[f"out_degree_{s}"] == 1
    assert d["clustering_mean"] == 1.0
    assert d["eigenvector_mean"] == pytest.approx(1 / math.sqrt(3))


def test_star_assortativity_fallback():
    f = network_features(nodes=list("hxyz"), edges=[("h", "x"), ("h", "y"), ("h", "z")])
    assert f[FEATURE_NAMES.index("assortativity")] == 0.0
    assert np.all(np.isfinite(f))


def test_single_node_zeros():
    f = network_features(nodes=["a"], edges=[])
    assert f[0] == 1 and np.all(f[1:] == 0)


def test_random_graph_matches_networkx():
    rng = np.random.default_rng(13)
    for trial in range(5):
        nodes = [f"n{i:02d}" for i in range(50)]
        G = nx.gnp_random_graph(50, 0.08, seed=trial, directed=True)
        edges = [(nodes[u], nodes[v]) for u, v in G.edges]
        # keep the symmetrized graph connected so the centrality vector is unique
        edges += [(nodes[i], nodes[i + 1]) for i in range(49)]
        edges = sorted(set(edges))
        got = network_features(nodes=nodes, edges=edges)
        want = naive_features(nodes, edges)
        assert np.allclose(got, want, atol=1e-6), np.flatnonzero(~np.isclose(got, want, atol=1e-6))


def test_cluster_graph_from_flow():
    recs = [
        rec("s", T0, [], [("pool", 100)]),
        rec("t1", T0 + 10, [("s", 0)], [("x", 60), ("y", 40)]),
        rec("t2", T0 + 20, [("t1", 0)], [("y", 60)]),
    ]
    led = build(recs)
    flow = extract_flow(led, None, TaintConfig(seeds=("s",)))
    nodes, edges = cluster_graph(flow)
    assert nodes == ["pool", "x", "y"]
    assert edges == {("pool", "x"), ("pool", "y"), ("x", "y")}
    assert network_features(flow)[1] == 3


# -- report ----------------------------------------------------------------------

def test_evaluate_and_report(tmp_path):
    rng = np.random.default_rng(14)
    X, y = blobs(rng, [(1, 0, 0), (0, 1, 0), (0, 0, 1)], 6, 0.05)
    sources = [f"pool{c}" for c in y]
    months = [f"2014-{1 + i % 12:02d}" for i in range(len(y))]
    rep = evaluate(X, sources, months)
    assert rep.accuracy == 1.0 and rep.chosen_k == 3 and rep.ari == 1.0
    rep.write(tmp_path / "r.json", {"metric": "cosine"}, tmp_path / "c.csv")
    text = (tmp_path / "r.json").read_text()
    assert '"config"' in text and '"time_correlation"' in text
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "pool0,6,0,0"


def test_report_invariants():
    base = dict(n_flows=3, metric="cosine", k=3, accuracy=0.5, macro_f1=0.5, nmi=0.5, ari=0.1, ami=0.1,
                silhouette=0.2, chosen_k=2, time_correlation=None, classes=[], confusion=[])
    EvalReport(**base)
    with pytest.raises(ValueError):
        EvalReport(**{**base, "accuracy": 1.5})

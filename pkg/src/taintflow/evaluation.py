"""Scoring flow embeddings against their known sources.

Covers leave-one-out kNN classification, k-means with silhouette-based model
selection, partition agreement scores (NMI, ARI, AMI), the month/embedding
distance rank correlation, and the hand-crafted network-feature baseline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln
from scipy.stats import spearmanr

from .errors import DegenerateData, LengthMismatch, TooFewSamples

__all__ = [
    "METRICS",
    "pairwise_distances",
    "KnnResult",
    "knn_loocv",
    "KMeansResult",
    "kmeans",
    "silhouette",
    "kmeans_select",
    "clustering_scores",
    "time_correlation",
    "month_number",
    "FEATURE_NAMES",
    "network_features",
    "cluster_graph",
    "EvalReport",
    "evaluate",
]

METRICS = ("cosine", "euclidean")


def pairwise_distances(X, metric: str = "cosine") -> np.ndarray:
    """Distance matrix; ``metric="precomputed"`` passes a square matrix through."""
    X = np.asarray(X, dtype=float)
    if metric == "precomputed":
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise ValueError("precomputed distances must be a square matrix")
        return X
    if metric == "euclidean":
        sq = (X * X).sum(1)
        D = sq[:, None] + sq[None, :] - 2 * X @ X.T
        np.maximum(D, 0, out=D)
        D = np.sqrt(D)
    elif metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        U = np.divide(X, norms[:, None], out=np.zeros_like(X), where=norms[:, None] > 0)
        D = 1.0 - U @ U.T
        np.clip(D, 0.0, 2.0, out=D)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(D, 0.0)
    return D


# -- classification -------------------------------------------------------------

@dataclass
class KnnResult:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray
    classes: list
    predictions: list


def _vote(neighbor_labels):
    counts: dict = {}
    for lab in neighbor_labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    # nearest neighbour among the tied classes decides
    for lab in neighbor_labels:
        if counts[lab] == top:
            return lab


def _macro_f1(confusion: np.ndarray) -> float:
    tp = np.diag(confusion).astype(float)
    pred = confusion.sum(0)
    true = confusion.sum(1)
    denom = pred + true
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def knn_loocv(X, labels: Sequence, k: int = 3, metric: str = "cosine") -> KnnResult:
    """Leave-one-out k-nearest-neighbour classification.

    Neighbours are ordered by distance, then index.  A vote tie goes to the
    tied class with the nearest member.
    """
    labels = list(labels)
    n = len(labels)
    if len(X) != n:
        raise LengthMismatch("vectors and labels differ in length")
    if n < k + 1:
        raise TooFewSamples(f"need at least {k + 1} samples for k={k}")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise TooFewSamples("need at least two classes")
    D = pairwise_distances(X, metric)
    idx = np.arange(n)
    preds = []
    for i in range(n):
        others = idx[idx != i]
        order = others[np.lexsort((others, D[i, others]))][:k]
        preds.append(_vote([labels[j] for j in order]))
    pos = {c: j for j, c in enumerate(classes)}
    C = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(labels, preds):
        C[pos[t], pos[p]] += 1
    return KnnResult(float(np.trace(C) / n), _macro_f1(C), C, classes, preds)


# -- clustering -----------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    k: int
    silhouette: float
    inertia: float
    scores: dict = field(default_factory=dict)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            j = rng.integers(n)
        else:
            j = min(int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right")), n - 1)
        centers.append(X[j])
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(X, centers, max_iter=300, tol=1e-6):
    k = len(centers)
    prev = np.inf
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(2)
        lab = d2.argmin(1)
        inertia = float(d2[np.arange(len(X)), lab].sum())
        new = centers.copy()
        for c in range(k):
            members = X[lab == c]
            if len(members):
                new[c] = members.mean(0)
            else:
                # reseed an empty cluster at the worst-fit point
                new[c] = X[d2[np.arange(len(X)), lab].argmax()]
        centers = new
        if prev - inertia <= tol * max(inertia, 1e-300):
            break
        prev = inertia
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(2)
    lab = d2.argmin(1)
    return _hartigan(X, lab, k)


def _hartigan(X, lab, k, max_sweeps=100):
    """Single-point moves from a Lloyd fixed point while any move lowers inertia."""
    lab = lab.copy()
    sizes = np.bincount(lab, minlength=k).astype(float)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, lab, X)
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(X)):
            a = lab[i]
            if sizes[a] <= 1:
                continue
            centers = sums / np.maximum(sizes, 1)[:, None]
            d2 = ((centers - X[i]) ** 2).sum(1)
            cost_out = sizes[a] / (sizes[a] - 1) * d2[a]
            cost_in = sizes / (sizes + 1) * d2
            cost_in[a] = np.inf
            b = int(cost_in.argmin())
            if cost_in[b] < cost_out * (1 - 1e-12):
                sums[a] -= X[i]
                sums[b] += X[i]
                sizes[a] -= 1
                sizes[b] += 1
                lab[i] = b
                moved = True
        if not moved:
            break
    centers = sums / np.maximum(sizes, 1)[:, None]
    inertia = float(((X - centers[lab]) ** 2).sum())
    return lab, centers, inertia


def kmeans(X, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 300, tol: float = 1e-6):
    """Best-of-``restarts`` Lloyd k-means with k-means++ seeding.

    Returns ``(labels, centers, inertia)``.
    """
    X = np.asarray(X, dtype=float)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, r]))
        lab, cen, inertia = _lloyd(X, _kmeanspp(X, k, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (lab, cen, inertia)
    return best


def silhouette(D: np.ndarray, labels) -> float:
    """Mean silhouette from a precomputed distance matrix (singletons score 0)."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    n = len(labels)
    M = np.stack([labels == c for c in uniq], axis=1).astype(float)  # n x k
    sums = D @ M
    sizes = M.sum(0)
    own = np.searchsorted(uniq, labels)
    own_size = sizes[own]
    a = np.divide(sums[np.arange(n), own], own_size - 1, out=np.zeros(n), where=own_size > 1)
    other = sums / sizes
    other[np.arange(n), own] = np.inf
    b = other.min(1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(n), where=denom > 0)
    s[own_size == 1] = 0.0
    return float(s.mean())


def kmeans_select(X, k_min: int = 2, k_max: int = 11, restarts: int = 10, metric: str = "cosine",
                  seed: int = 0) -> KMeansResult:
    """Fit k-means for every k in ``[k_min, k_max]`` and keep the best silhouette.

    Under the cosine metric rows are L2-normalised before clustering.  Ties
    on silhouette favour the smaller k.
    """
    X = np.asarray(X, dtype=float)
    if len(X) <= k_max:
        raise TooFewSamples(f"need more than {k_max} samples")
    if np.all(X == X[0]):
        raise DegenerateData("all points are identical")
    Z = X
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        Z = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    D = pairwise_distances(X, metric)
    best = None
    scores = {}
    for k in range(k_min, k_max + 1):
        lab, _, inertia = kmeans(Z, k, restarts, seed)
        s = silhouette(D, lab)
        scores[k] = s
        if best is None or s > best.silhouette:
            best = KMeansResult(lab, k, s, inertia)
    best.scores = scores
    return best


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    C = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(C, (ai, bi), 1)
    return C


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mutual_info(C):
    n = C.sum()
    a = C.sum(1)
    b = C.sum(0)
    nz = C > 0
    nij = C[nz].astype(float)
    outer = np.outer(a, b)[nz].astype(float)
    return float((nij / n * (np.log(nij) + np.log(n) - np.log(outer))).sum())


def _expected_mutual_info(C):
    """Expected MI of two random partitions with the same marginals (hypergeometric)."""
    N = int(C.sum())
    a = C.sum(1).astype(np.int64)
    b = C.sum(0).astype(np.int64)
    emi = 0.0
    lgN = gammaln(N + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - N)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=float)
            term1 = nij / N * (np.log(N * nij) - np.log(ai * bj))
            log_p = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(N - ai + 1) + gammaln(N - bj + 1)
                     - lgN - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                     - gammaln(N - ai - bj + nij + 1))
            emi += float((term1 * np.exp(log_p)).sum())
    return emi


def clustering_scores(assignment, truth) -> dict:
    """NMI, ARI and AMI; both mutual-information scores use arithmetic-mean normalisation."""
    assignment = np.asarray(assignment)
    truth = np.asarray(truth)
    if len(assignment) != len(truth):
        raise LengthMismatch("assignment and truth differ in length")
    if len(truth) == 0:
        raise LengthMismatch("empty labelling")
    C = _contingency(truth, assignment)
    n = C.sum()
    trivial = C.shape[0] == C.shape[1] and (C.shape[0] in (1, n))

    comb = lambda x: x * (x - 1) / 2.0
    index = comb(C.astype(float)).sum()
    sa = comb(C.sum(1).astype(float)).sum()
    sb = comb(C.sum(0).astype(float)).sum()
    total = comb(float(n))
    expected = sa * sb / total if total else 0.0
    max_index = (sa + sb) / 2.0
    ari = 1.0 if trivial or max_index == expected else (index - expected) / (max_index - expected)

    h_t = _entropy(C.sum(1))
    h_a = _entropy(C.sum(0))
    mi = 0.0 if 1 in C.shape else _mutual_info(C)
    mean_h = (h_t + h_a) / 2.0
    if trivial or (h_t == 0 and h_a == 0):
        nmi = ami = 1.0
    else:
        nmi = mi / mean_h if mean_h > 0 else 0.0
        emi = _expected_mutual_info(C)
        denom = mean_h - emi
        eps = np.finfo(float).eps
        denom = min(denom, -eps) if denom < 0 else max(denom, eps)
        ami = (mi - emi) / denom
    return {"nmi": float(max(0.0, min(1.0, nmi))), "ari": float(ari), "ami": float(ami)}


# -- time correlation -----------------------------------------------------------

def month_number(month) -> int:
    """Month index ``12 * year + month - 1`` from ``YYYY-MM`` strings or ints."""
    if isinstance(month, (int, np.integer)):
        return int(month)
    s = str(month).strip()
    if s.lstrip("-").isdigit():
        return int(s)
    d = datetime.strptime(s[:7], "%Y-%m").replace(tzinfo=timezone.utc)
    return d.year * 12 + d.month - 1


def time_correlation(X, months, metric: str = "cosine") -> float | None:
    """Spearman correlation of month gaps vs embedding distances over all pairs.

    Returns None when either series is constant.
    """
    m = np.array([month_number(x) for x in months], dtype=float)
    if len(m) != len(X):
        raise LengthMismatch("vectors and months differ in length")
    if len(m) < 3:
        raise TooFewSamples("need at least three flows")
    D = pairwise_distances(X, metric)
    iu = np.triu_indices(len(m), 1)
    gaps = np.abs(m[:, None] - m[None, :])[iu]
    dist = D[iu]
    if np.all(gaps == gaps[0]) or np.all(dist == dist[0]):
        return None
    rho = spearmanr(gaps, dist).correlation
    return float(rho)


# -- network features -------------------------------------------------------------

_STATS = ("min", "q1", "q2", "q3", "max", "mean", "std", "mad")
_NODE_FEATURES = ("in_degree", "out_degree", "clustering", "eigenvector")
FEATURE_NAMES = ["n_nodes", "n_edges", "density", "assortativity"] + [
    f"{f}_{s}" for f in _NODE_FEATURES for s in _STATS
]


def cluster_graph(flow) -> tuple[list[str], set[tuple[str, str]]]:
    """Actor-level graph of a flow.

    A tainted output paying cluster ``c`` from a transaction whose own
    tainted inputs were held by cluster ``o`` yields the edge ``o -> c``.
    Self-loops are dropped and parallel edges merged.
    """
    owners: dict[str, set[str]] = {}
    for e in flow.edges:
        if e.dst_txid is not None:
            owners.setdefault(e.dst_txid, set()).add(e.cluster)
    nodes = sorted({e.cluster for e in flow.edges})
    edges = set()
    for e in flow.edges:
        for o in owners.get(e.src_txid, ()):
            if o != e.cluster:
                edges.add((o, e.cluster))
    return nodes, edges


def _describe(x: np.ndarray) -> list[float]:
    q1, q2, q3 = np.percentile(x, [25, 50, 75])
    mean = x.mean()
    return [x.min(), q1, q2, q3, x.max(), mean, x.std(), np.abs(x - mean).mean()]


def _eigenvector_centrality(S: np.ndarray, max_iter: int = 1000, tol: float = 1e-8) -> np.ndarray:
    n = len(S)
    x = np.full(n, 1.0 / n)
    M = S + np.eye(n)
    for _ in range(max_iter):
        new = M @ x
        norm = np.linalg.norm(new)
        if norm == 0:
            return np.zeros(n)
        new /= norm
        if np.abs(new - x).sum() < tol:
            return new
        x = new
    return x


def network_features(flow=None, *, nodes=None, edges=None) -> np.ndarray:
    """The 36 descriptive statistics of a flow's actor graph.

    Pass a flow, or explicit ``nodes`` and directed ``edges``.
    """
    if flow is not None:
        nodes, edges = cluster_graph(flow)
    nodes = list(nodes)
    edges = sorted(set(edges))
    n, m = len(nodes), len(edges)
    out = np.zeros(len(FEATURE_NAMES))
    out[0], out[1] = n, m
    if n < 2:
        return out
    pos = {v: i for i, v in enumerate(nodes)}
    A = np.zeros((n, n))
    for u, v in edges:
        A[pos[u], pos[v]] = 1.0
    out[2] = m / (n * (n - 1))
    indeg = A.sum(0)
    outdeg = A.sum(1)
    if m >= 2:
        src = np.array([outdeg[pos[u]] for u, _ in edges])
        dst = np.array([indeg[pos[v]] for _, v in edges])
        if src.std() > 0 and dst.std() > 0:
            out[3] = float(np.corrcoef(src, dst)[0, 1])
    S = ((A + A.T) > 0).astype(float)
    deg = S.sum(1)
    tri = np.diag(S @ S @ S) / 2.0
    possible = deg * (deg - 1) / 2.0
    clust = np.divide(tri, possible, out=np.zeros(n), where=possible > 0)
    eig = _eigenvector_centrality(S)
    feats = []
    for x in (indeg, outdeg, clust, eig):
        feats.extend(_describe(x))
    out[4:] = feats
    return out


# -- report -----------------------------------------------------------------------

@dataclass
class EvalReport:
    n_flows: int
    metric: str
    k: int
    accuracy: float
    macro_f1: float
    nmi: float
    ari: float
    ami: float
    silhouette: float
    chosen_k: int
    time_correlation: float | None
    classes: list
    confusion: list

    def __post_init__(self):
        for name in ("accuracy", "macro_f1", "nmi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("ari", "ami", "silhouette"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [-1, 1]")

    def to_json(self, config: dict | None = None) -> str:
        obj = asdict(self)
        if config is not None:
            obj["config"] = config
        return json.dumps(obj, indent=2, sort_keys=True)

    def write(self, path, config: dict | None = None, confusion_csv=None) -> None:
        Path(path).write_text(self.to_json(config) + "\n", encoding="utf-8")
        if confusion_csv is not None:
            rows = [",".join(["true\\pred"] + [str(c) for c in self.classes])]
            for c, row in zip(self.classes, self.confusion):
                rows.append(",".join([str(c)] + [str(x) for x in row]))
            Path(confusion_csv).write_text("\n".join(rows) + "\n", encoding="utf-8")


def evaluate(X, sources: Sequence, months: Sequence, metric: str = "cosine", k: int = 3,
             k_min: int = 2, k_max: int = 11, restarts: int = 10, seed: int = 0) -> EvalReport:
    """Run classification, clustering and time correlation on one embedding."""
    X = np.asarray(X, dtype=float)
    knn = knn_loocv(X, sources, k, metric)
    k_max = min(k_max, len(X) - 1)
    km = kmeans_select(X, k_min, k_max, restarts, metric, seed)
    scores = clustering_scores(km.labels, sources)
    return EvalReport(
        n_flows=len(X), metric=metric, k=k,
        accuracy=knn.accuracy, macro_f1=knn.macro_f1,
        nmi=scores["nmi"], ari=scores["ari"], ami=scores["ami"],
        silhouette=km.silhouette, chosen_k=km.k,
        time_correlation=time_correlation(X, months, metric),
        classes=[str(c) for c in knn.classes], confusion=knn.confusion.tolist(),
    )

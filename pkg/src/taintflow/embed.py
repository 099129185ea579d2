"""PV-DM document vectors for walk corpora.

Each flow is one document; each of its walks is one sentence.  A center
token is predicted from the mean of the document vector and the vectors of
the tokens within ``window`` positions on either side, trained with
negative sampling from the unigram distribution raised to 0.75.  By default
the span at each position is drawn uniformly from ``1..window``.
"""
from __future__ import annotations

import io
import json
import logging
import os
import warnings
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _pvdm
from .errors import ConfigError, EmptyVocabulary, NoKnownTokens, NonFiniteLoss
from .walks import WalkCorpus

__all__ = [
    "EmbedConfig",
    "Vocabulary",
    "EmbeddingMatrix",
    "build_vocab",
    "train_pvdm",
    "infer_vector",
    "holdout_distances",
    "write_embeddings_tsv",
    "read_embeddings_tsv",
]

log = logging.getLogger(__name__)

MODEL_FORMAT = "taintflow-pvdm/1"


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 128
    window: int = 5
    negative: int = 5
    epochs: int = 20
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    min_count: int = 1
    rng_seed: int = 42
    workers: int = 1
    dynamic_window: bool = True

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.negative < 1:
            raise ConfigError("negative must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.min_learning_rate <= self.learning_rate:
            raise ConfigError("need 0 < min_learning_rate <= learning_rate")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: np.ndarray
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def noise(self) -> np.ndarray:
        """Negative-sampling distribution, proportional to count ** 0.75."""
        w = self.counts.astype(float) ** 0.75
        return w / w.sum()

    @property
    def cumulative(self) -> np.ndarray:
        c = np.cumsum(self.noise)
        c[-1] = 1.0
        return c

    def encode(self, walk) -> list[int]:
        return [self.index[t] for t in walk if t in self.index]


def build_vocab(corpus: WalkCorpus, min_count: int = 1) -> Vocabulary:
    """Tokens occurring at least ``min_count`` times, most frequent first."""
    counts = corpus.counts()
    kept = sorted(((t, c) for t, c in counts.items() if c >= min_count), key=lambda kv: (-kv[1], kv[0]))
    if not kept:
        raise EmptyVocabulary(f"no token occurs at least {min_count} times")
    return Vocabulary([t for t, _ in kept], [c for _, c in kept])


@dataclass
class EmbeddingMatrix:
    """Trained PV-DM model: one row per flow plus the word and output matrices."""

    flow_ids: list[str]
    doc_vectors: np.ndarray
    word_vectors: np.ndarray
    out_vectors: np.ndarray
    vocab: Vocabulary
    config: EmbedConfig
    loss_trace: list[float]

    def __len__(self):
        return len(self.flow_ids)

    def vector(self, flow_id: str) -> np.ndarray:
        return self.doc_vectors[self.flow_ids.index(flow_id)]

    def save(self, path) -> None:
        """Write an ``.npz`` archive; fixed entry timestamps keep it byte-stable."""
        meta = {
            "format": MODEL_FORMAT,
            "config": asdict(self.config),
            "flow_ids": self.flow_ids,
            "tokens": self.vocab.tokens,
            "loss_trace": self.loss_trace,
        }
        arrays = {
            "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            "counts": self.vocab.counts,
            "doc_vectors": self.doc_vectors,
            "word_vectors": self.word_vectors,
            "out_vectors": self.out_vectors,
        }
        with zipfile.ZipFile(Path(path), "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        with np.load(Path(path)) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("format") != MODEL_FORMAT:
                raise ValueError(f"{path}: not a {MODEL_FORMAT} model")
            return cls(
                flow_ids=meta["flow_ids"],
                doc_vectors=z["doc_vectors"],
                word_vectors=z["word_vectors"],
                out_vectors=z["out_vectors"],
                vocab=Vocabulary(meta["tokens"], z["counts"]),
                config=EmbedConfig(**meta["config"]),
                loss_trace=meta["loss_trace"],
            )


def _encode(corpus: WalkCorpus, vocab: Vocabulary, flow_ids):
    tokens, starts, walk_doc = [], [0], []
    for d, fid in enumerate(flow_ids):
        for walk in corpus.docs[fid]:
            ids = vocab.encode(walk)
            if not ids:
                continue
            tokens.extend(ids)
            starts.append(len(tokens))
            walk_doc.append(d)
    return (np.asarray(tokens, dtype=np.int64), np.asarray(starts, dtype=np.int64),
            np.asarray(walk_doc, dtype=np.int64))


def _init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return (rng.random((rows, dim)) - 0.5) / dim


def _workers(config: EmbedConfig) -> int:
    cap = os.environ.get("TAINTFLOW_THREADS")
    n = config.workers
    if cap:
        n = max(1, min(n, int(cap)))
    return n


def _fit(doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, cum, config, train_words, seed):
    """Run all epochs in place; returns the per-epoch mean loss."""
    n_walks = len(starts) - 1
    order = np.arange(n_walks, dtype=np.int64)
    lr0, lr1, E = config.learning_rate, config.min_learning_rate, config.epochs
    workers = _workers(config)
    if workers > 1:
        warnings.warn("parallel PV-DM training is not reproducible across runs", RuntimeWarning,
                      stacklevel=3)
        import numba
        numba.set_num_threads(min(workers, numba.config.NUMBA_NUM_THREADS))
        shard_starts = np.linspace(0, n_walks, workers + 1).astype(np.int64)
        states = np.array([[(seed + 0x632BE59BD9B4E019 * (s + 1)) % 2**64] for s in range(workers)],
                          dtype=np.uint64)
    else:
        state = np.array([seed % 2**64], dtype=np.uint64)

    trace = []
    for e in range(E):
        lr_from = lr0 - (lr0 - lr1) * e / E
        lr_to = lr0 - (lr0 - lr1) * (e + 1) / E
        if workers > 1:
            losses, counts, bad = _pvdm.run_walks_sharded(
                doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, order, shard_starts,
                cum, config.window, config.negative, lr_from, lr_to, states, train_words,
                config.dynamic_window)
            if (bad >= 0).any():
                raise NonFiniteLoss(e, int(bad[bad >= 0][0]))
            loss, n = float(losses.sum()), int(counts.sum())
        else:
            loss, n, bad = _pvdm.run_walks(
                doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, order, cum,
                config.window, config.negative, lr_from, lr_to, state, train_words,
                config.dynamic_window)
            if bad >= 0:
                raise NonFiniteLoss(e, int(bad))
        trace.append(loss / max(n, 1))
        log.debug("epoch %d mean loss %.6f", e, trace[-1])
    return trace


def train_pvdm(corpus: WalkCorpus, config: EmbedConfig = EmbedConfig(),
               vocab: Vocabulary | None = None) -> EmbeddingMatrix:
    """Train document, word and output vectors over the whole corpus.

    Single-worker training is deterministic for a fixed ``rng_seed``.
    """
    if not len(corpus):
        raise EmptyVocabulary("corpus has no documents")
    vocab = vocab or build_vocab(corpus, config.min_count)
    flow_ids = corpus.flow_ids()
    tokens, starts, walk_doc = _encode(corpus, vocab, flow_ids)
    rng = np.random.Generator(np.random.Philox(config.rng_seed))
    word_vecs = _init(rng, len(vocab), config.dim)
    doc_vecs = _init(rng, len(flow_ids), config.dim)
    out_vecs = np.zeros((len(vocab), config.dim))
    trace = _fit(doc_vecs, word_vecs, out_vecs, tokens, starts, walk_doc, vocab.cumulative,
                 config, True, config.rng_seed)
    return EmbeddingMatrix(flow_ids, doc_vecs, word_vecs, out_vecs, vocab, config, trace)


def infer_vector(model: EmbeddingMatrix, walks, config: EmbedConfig | None = None) -> np.ndarray:
    """Fit a vector for an unseen document with word and output matrices frozen."""
    config = config or model.config
    if config.dim != model.config.dim:
        raise ConfigError("inference dim differs from the trained model")
    encoded = [model.vocab.encode(w) for w in walks]
    encoded = [w for w in encoded if w]
    if not encoded:
        raise NoKnownTokens("document has no in-vocabulary tokens")
    tokens = np.asarray([t for w in encoded for t in w], dtype=np.int64)
    starts = np.cumsum([0] + [len(w) for w in encoded]).astype(np.int64)
    walk_doc = np.zeros(len(encoded), dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(config.rng_seed))
    doc = _init(rng, 1, config.dim)
    # frozen matrices are still passed writable; train_words=False leaves them untouched
    _fit(doc, model.word_vectors, model.out_vectors, tokens, starts, walk_doc,
         model.vocab.cumulative, config, False, config.rng_seed)
    return doc[0]


def holdout_distances(corpus: WalkCorpus, config: EmbedConfig = EmbedConfig(),
                      metric: str = "cosine") -> np.ndarray:
    """Leave-one-out distances where no flow ever trains the model it is judged by.

    Row ``i`` comes from a model retrained without flow ``i``: its vector is
    inferred with the word matrices frozen and compared with the trained
    vectors of the other flows in that same model.  Separately trained models
    live in unrelated coordinate systems, so each row is only meaningful on
    its own.  A flow with no token known to its reduced vocabulary is given
    a zero vector.  The diagonal is zero.
    """
    from .evaluation import pairwise_distances

    ids = corpus.flow_ids()
    D = np.zeros((len(ids), len(ids)))
    for i, fid in enumerate(ids):
        rest = WalkCorpus({f: w for f, w in corpus.docs.items() if f != fid})
        model = train_pvdm(rest, config)
        try:
            v = infer_vector(model, corpus.docs[fid], config)
        except NoKnownTokens:
            log.warning("flow %s has no tokens known to its holdout model", fid)
            v = np.zeros(config.dim)
        pos = {f: j for j, f in enumerate(model.flow_ids)}
        others = [j for j, f in enumerate(ids) if f != fid]
        M = np.vstack([v, model.doc_vectors[[pos[ids[j]] for j in others]]])
        D[i, others] = pairwise_distances(M, metric)[0, 1:]
    return D


def write_embeddings_tsv(path, flow_ids, vectors) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for fid, v in zip(flow_ids, vectors):
            fh.write(fid + "\t" + "\t".join(repr(float(x)) for x in v) + "\n")


def read_embeddings_tsv(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fid, *vals = line.split("\t")
            ids.append(fid)
            rows.append([float(x) for x in vals])
    return ids, np.asarray(rows, dtype=float)

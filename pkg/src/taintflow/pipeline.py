"""Staged run: ingest, cluster, taint, walks, embed, eval.

Every stage records the content hashes of its inputs, its parameters and
the package code in ``manifest.json``, plus the hashes of what it wrote.  A
stage is skipped when all of those still match, so a repeated run only
redoes the stages whose inputs, settings or outputs changed.

Artifacts in ``out_dir``::

    ledger_stats.json  actors.json  flows/*.tsv  flows/index.csv
    corpus.txt  corpus.vocab.tsv  model.npz  embeddings.tsv
    report.json  confusion.csv  [holdout_distances.tsv]  [baseline_report.json]
    manifest.json
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .actors import ActorIndex, cluster_addresses, load_labels
from .embed import EmbedConfig, holdout_distances, read_embeddings_tsv, train_pvdm, write_embeddings_tsv
from .errors import ConfigError, TaintflowError
from .evaluation import METRICS, EvalReport, evaluate, knn_loocv, network_features
from .ledger import Ledger, ingest
from .taint import DAY, TaintConfig, extract_flow, flow_stats, read_flow_tsv, read_seed_table, write_flow_tsv
from .walks import WalkConfig, WalkCorpus, build_corpus

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "EvalOptions",
    "PipelineConfig",
    "StageFailed",
    "RunResult",
    "load_config",
    "run_pipeline",
    "code_hash",
    "read_flow_index",
]

log = logging.getLogger(__name__)

STAGES = ("ingest", "cluster", "taint", "walks", "embed", "eval")


class StageFailed(TaintflowError):
    """A stage raised; carries the stage name and the original exit code."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage {stage}: {cause}")


@dataclass(frozen=True)
class EvalOptions:
    metric: str = "cosine"
    k: int = 3
    k_min: int = 2
    k_max: int = 11
    restarts: int = 10
    loocv: str = "train_once"
    baseline: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.loocv not in ("train_once", "holdout"):
            raise ConfigError("loocv must be train_once or holdout")
        if self.k < 1 or self.k_min < 2 or self.k_max < self.k_min or self.restarts < 1:
            raise ConfigError("bad k / k-range / restarts")


@dataclass(frozen=True)
class PipelineConfig:
    ledger: Path
    seeds: Path
    out_dir: Path
    labels: Path | None = None
    rng_seed: int = 42
    coinjoin_filter: bool = True
    purity_min: float = 0.001
    time_max_days: float = 365
    walks: WalkConfig = WalkConfig()
    embed: EmbedConfig = EmbedConfig()
    eval: EvalOptions = EvalOptions()

    def params(self) -> dict:
        """Run settings without any paths (echoed into the report)."""
        return {
            "rng_seed": self.rng_seed,
            "coinjoin_filter": self.coinjoin_filter,
            "taint": {"purity_min": self.purity_min, "time_max_days": self.time_max_days},
            "walks": asdict(self.walks),
            "embed": asdict(self.embed),
            "eval": asdict(self.eval),
        }

    def check_inputs(self) -> None:
        for name in ("ledger", "seeds", "labels"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")


def _section(cls, obj: dict, where: str, **defaults):
    names = {f.name for f in fields(cls)}
    extra = set(obj) - names
    if extra:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(extra)}")
    try:
        return cls(**{**defaults, **obj})
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(obj: dict, base_dir=".") -> PipelineConfig:
    """Build a config from the parsed TOML/JSON layout; relative paths resolve against ``base_dir``."""
    obj = dict(obj)
    base = Path(base_dir)
    top = {"ledger", "seeds", "out_dir", "labels", "rng_seed", "coinjoin_filter", "taint", "walks", "embed", "eval"}
    extra = set(obj) - top
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    for key in ("ledger", "seeds", "out_dir"):
        if key not in obj:
            raise ConfigError(f"config lacks {key!r}")

    def path(v):
        return None if v is None else (base / Path(v) if not Path(v).is_absolute() else Path(v))

    seed = int(obj.get("rng_seed", 42))
    taint = dict(obj.get("taint", {}))
    extra = set(taint) - {"purity_min", "time_max_days"}
    if extra:
        raise ConfigError(f"unknown keys in [taint]: {sorted(extra)}")
    walks = dict(obj.get("walks", {}))
    if "vocabulary" in walks:
        walks["vocabulary"] = walks["vocabulary"].replace("-", "_")
    cfg = PipelineConfig(
        ledger=path(obj["ledger"]),
        seeds=path(obj["seeds"]),
        out_dir=path(obj["out_dir"]),
        labels=path(obj.get("labels")),
        rng_seed=seed,
        coinjoin_filter=bool(obj.get("coinjoin_filter", True)),
        purity_min=float(taint.get("purity_min", 0.001)),
        time_max_days=float(taint.get("time_max_days", 365)),
        walks=_section(WalkConfig, walks, "walks", rng_seed=seed),
        embed=_section(EmbedConfig, obj.get("embed", {}), "embed", rng_seed=seed),
        eval=_section(EvalOptions, obj.get("eval", {}), "eval"),
    )
    TaintConfig(seeds=("x",), purity_min=cfg.purity_min, time_max=int(cfg.time_max_days * DAY))
    return cfg


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read a pipeline config from ``.toml`` or ``.json``; ``overrides`` are merged on top."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
    else:
        obj = json.loads(path.read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            sec, sub = key.split(".", 1)
            obj.setdefault(sec, {})[sub] = value
        else:
            obj[key] = value
    return config_from_dict(obj, path.parent)


# -- hashing ------------------------------------------------------------------------

def _sha_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha_path(path: Path) -> str | None:
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode() + b"\0" + _sha_file(p).encode())
        return h.hexdigest()
    if path.is_file():
        return _sha_file(path)
    return None


def code_hash() -> str:
    """Hash of the package's own source files."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for p in sorted(pkg.glob("*.py")):
        h.update(p.name.encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def _params_hash(params) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True, default=str).encode()).hexdigest()


# -- run ----------------------------------------------------------------------------

@dataclass
class RunResult:
    out_dir: Path
    status: dict[str, str] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    report: EvalReport | None = None

    @property
    def cached(self) -> bool:
        return all(v == "cached" for v in self.status.values())


class _Runner:
    def __init__(self, cfg: PipelineConfig, force: bool):
        self.cfg = cfg
        self.force = force
        self.out = Path(cfg.out_dir)
        self.manifest_path = self.out / "manifest.json"
        self.code = code_hash()
        self.manifest = self._read_manifest()
        self.result = RunResult(self.out)
        self._ledger: Ledger | None = None
        self._actors: ActorIndex | None = None

    def _read_manifest(self) -> dict:
        try:
            m = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            if isinstance(m, dict) and isinstance(m.get("stages"), dict):
                return m
        except (OSError, ValueError):
            pass
        return {"stages": {}}

    def _rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(self.out.resolve()).as_posix()
        except ValueError:
            return str(p)

    def ledger(self) -> Ledger:
        if self._ledger is None:
            self._ledger = ingest(self.cfg.ledger)
        return self._ledger

    def actors(self) -> ActorIndex:
        if self._actors is None:
            self._actors = ActorIndex.load(self.out / "actors.json")
        return self._actors

    def stage(self, name: str, inputs: list, params, outputs: list, fn: Callable[[], None]) -> None:
        key = {
            "inputs": {self._rel(p): _sha_path(p) for p in inputs},
            "params": _params_hash(params),
            "code": self.code,
        }
        prev = self.manifest["stages"].get(name)
        t0 = time.perf_counter()
        if (not self.force and prev and prev.get("key") == key
                and all(_sha_path(o) == prev["outputs"].get(self._rel(o)) for o in outputs)):
            self.result.status[name] = "cached"
            log.info("%s: cached", name)
        else:
            log.info("%s: running", name)
            try:
                fn()
            except TaintflowError as exc:
                raise StageFailed(name, exc) from exc
            self.manifest["stages"][name] = {
                "key": key,
                "params": params,
                "outputs": {self._rel(o): _sha_path(o) for o in outputs},
            }
            self.result.status[name] = "ran"
            self._write_manifest()
        self.result.seconds[name] = time.perf_counter() - t0

    def _write_manifest(self) -> None:
        self.manifest.update({
            "version": __version__,
            "code_hash": self.code,
            "config_hash": _params_hash(self.cfg.params()),
            "rng_seed": self.cfg.rng_seed,
            "python": "%d.%d" % sys.version_info[:2],
            "numpy": np.__version__,
        })
        self.manifest["stages"] = {s: self.manifest["stages"][s] for s in STAGES if s in self.manifest["stages"]}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.manifest_path)


def _safe_name(flow_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", flow_id) or "flow"


def extract_flows(ledger: Ledger, actors: ActorIndex, seed_rows: list[dict], purity_min: float,
                  time_max_days: float, out_dir) -> list[dict]:
    """Extract every flow of a seed table into ``out_dir``; returns the index rows."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    index = []
    seen = set()
    for row in seed_rows:
        fid = row["flow_id"]
        if fid in seen:
            raise ConfigError(f"duplicate flow id {fid}")
        seen.add(fid)
        cfg = TaintConfig(seeds=tuple(row["seeds"]), purity_min=purity_min,
                          time_max=int(round(time_max_days * DAY)))
        flow = extract_flow(ledger, actors, cfg, fid, row.get("source") or None)
        fname = _safe_name(fid) + ".tsv"
        write_flow_tsv(flow, out_dir / fname)
        st = flow_stats(flow)
        index.append({
            "flow_id": fid,
            "source": row.get("source", ""),
            "month": row.get("month") or flow.source_month,
            "file": fname,
            "n_transactions": st["n_transactions"],
            "n_edges": st["n_edges"],
            "max_depth": st["max_depth"],
        })
    with open(out_dir / "index.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(index[0]) if index else ["flow_id"], lineterminator="\n")
        w.writeheader()
        w.writerows(index)
    return index


def read_flow_index(path) -> list[dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_flows(flow_dir) -> list:
    flow_dir = Path(flow_dir)
    index = flow_dir / "index.csv"
    if index.is_file():
        return [read_flow_tsv(flow_dir / r["file"]) for r in read_flow_index(index)]
    return [read_flow_tsv(p) for p in sorted(flow_dir.glob("*.tsv"))]


def _standardize(F: np.ndarray) -> np.ndarray:
    mu = F.mean(0)
    sd = F.std(0)
    return np.divide(F - mu, sd, out=np.zeros_like(F), where=sd > 0)


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> RunResult:
    """Run (or reuse) every stage in order and return per-stage status."""
    cfg.check_inputs()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    r = _Runner(cfg, force)
    flows_dir = out / "flows"
    corpus_path = out / "corpus.txt"
    vocab_path = out / "corpus.vocab.tsv"
    emb_path = out / "embeddings.tsv"
    holdout_path = out / "holdout_distances.tsv"
    model_path = out / "model.npz"
    report_path = out / "report.json"
    confusion_path = out / "confusion.csv"
    baseline_path = out / "baseline_report.json"

    def do_ingest():
        stats = r.ledger().stats
        (out / "ledger_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    r.stage("ingest", [cfg.ledger], {}, [out / "ledger_stats.json"], do_ingest)

    def do_cluster():
        actors = cluster_addresses(r.ledger(), cfg.coinjoin_filter)
        if cfg.labels is not None:
            actors = actors.with_labels(load_labels(cfg.labels))
        actors.save(out / "actors.json")
        r._actors = actors

    cluster_inputs = [cfg.ledger] + ([cfg.labels] if cfg.labels else [])
    r.stage("cluster", cluster_inputs, {"coinjoin_filter": cfg.coinjoin_filter}, [out / "actors.json"], do_cluster)

    def do_taint():
        extract_flows(r.ledger(), r.actors(), read_seed_table(cfg.seeds), cfg.purity_min,
                      cfg.time_max_days, flows_dir)

    r.stage("taint", [cfg.ledger, out / "actors.json", cfg.seeds],
            {"purity_min": cfg.purity_min, "time_max_days": cfg.time_max_days}, [flows_dir], do_taint)

    def do_walks():
        corpus = build_corpus(load_flows(flows_dir), r.actors(), cfg.walks)
        corpus.write(corpus_path, vocab_path)
        dropped = {k: v for k, v in corpus.dropped.items() if v}
        if dropped:
            log.info("walks pruned to nothing: %s", dropped)

    r.stage("walks", [flows_dir, out / "actors.json"], asdict(cfg.walks), [corpus_path, vocab_path], do_walks)

    holdout = cfg.eval.loocv == "holdout"

    def do_embed():
        corpus = WalkCorpus.read(corpus_path)
        model = train_pvdm(corpus, cfg.embed)
        model.save(model_path)
        write_embeddings_tsv(emb_path, model.flow_ids, model.doc_vectors)
        if holdout:
            D = holdout_distances(corpus, cfg.embed, cfg.eval.metric)
            write_embeddings_tsv(holdout_path, corpus.flow_ids(), D)

    embed_outputs = [emb_path, model_path] + ([holdout_path] if holdout else [])
    r.stage("embed", [corpus_path], {**asdict(cfg.embed), "holdout": holdout and cfg.eval.metric}, embed_outputs, do_embed)

    def do_eval():
        report = evaluate_files(emb_path, flows_dir / "index.csv", cfg.eval, cfg.rng_seed,
                                holdout_path if holdout else None)
        report.write(report_path, cfg.params(), confusion_path)
        if cfg.eval.baseline:
            base = baseline_report(load_flows(flows_dir), cfg.eval, cfg.rng_seed)
            base.write(baseline_path, {**cfg.params(), "features": "network"})

    eval_inputs = [emb_path, flows_dir] + ([holdout_path] if holdout else [])
    eval_outputs = [report_path, confusion_path] + ([baseline_path] if cfg.eval.baseline else [])
    r.stage("eval", eval_inputs, {**asdict(cfg.eval), "echo": cfg.params()}, eval_outputs, do_eval)

    if not r.manifest_path.exists():
        r._write_manifest()
    return r.result


def read_eval_labels(path) -> dict[str, tuple[str, str]]:
    """``flow_id -> (source, month)`` from a CSV with those columns."""
    labels = {}
    for row in read_flow_index(path):
        labels[row["flow_id"]] = (row.get("source", ""), row.get("month", ""))
    return labels


def evaluate_files(emb_path, labels_path, opts: EvalOptions = EvalOptions(), seed: int = 0,
                   holdout_path=None) -> EvalReport:
    """Evaluate an embeddings TSV against a ``flow_id,source,month`` table."""
    ids, X = read_embeddings_tsv(emb_path)
    labels = read_eval_labels(labels_path)
    missing = [f for f in ids if f not in labels]
    if missing:
        raise ConfigError(f"no label for flows {missing[:5]}")
    sources = [labels[f][0] for f in ids]
    months = [labels[f][1] for f in ids]
    k_max = min(opts.k_max, len(ids) - 1)
    report = evaluate(X, sources, months, opts.metric, opts.k, opts.k_min, k_max, opts.restarts, seed)
    if holdout_path is not None:
        hids, D = read_embeddings_tsv(holdout_path)
        pos = [{f: i for i, f in enumerate(hids)}[f] for f in ids]
        knn = knn_loocv(D[np.ix_(pos, pos)], sources, opts.k, "precomputed")
        report = replace(report, accuracy=knn.accuracy, macro_f1=knn.macro_f1,
                         classes=[str(c) for c in knn.classes], confusion=knn.confusion.tolist())
    return report


def baseline_report(flows, opts: EvalOptions = EvalOptions(), seed: int = 0) -> EvalReport:
    """Same evaluation on standardized network features (euclidean distance)."""
    F = _standardize(np.array([network_features(f) for f in flows]))
    sources = [f.source_label or "" for f in flows]
    months = [f.source_month for f in flows]
    k_max = min(opts.k_max, len(flows) - 1)
    return evaluate(F, sources, months, "euclidean", opts.k, opts.k_min, k_max, opts.restarts, seed)

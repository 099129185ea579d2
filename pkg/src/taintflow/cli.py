"""Command line entry point: ``taintflow <subcommand> ...``.

Exit codes: 0 success, 1 other error, 2 bad usage, 3 ledger, 4 actors,
5 taint, 6 walks, 7 embed, 8 eval, 9 config, 10 file system.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .actors import ActorIndex, cluster_addresses, load_labels
from .embed import EmbedConfig, train_pvdm, write_embeddings_tsv
from .errors import ConfigError, TaintflowError
from .evaluation import METRICS
from .ledger import ingest
from .pipeline import EvalOptions, evaluate_files, extract_flows, load_config, load_flows, run_pipeline
from .synth import ScenarioConfig, generate, load_scenario, time_graded_scenario, write_scenario
from .taint import DAY, TaintConfig, coinbase_seeds, extract_flow, read_flow_tsv, read_seed_table, write_flow_tsv
from .walks import WalkConfig, WalkCorpus, build_corpus

log = logging.getLogger("taintflow")

EXIT_USAGE = 2
EXIT_OS = 10


def _dump(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_ingest(a) -> None:
    _dump(ingest(a.ledger).stats, a.stats_out)


def cmd_cluster(a) -> None:
    actors = cluster_addresses(ingest(a.ledger), not a.no_coinjoin_filter)
    if a.labels:
        actors = actors.with_labels(load_labels(a.labels))
    actors.save(a.out)
    log.info("%d clusters", len(actors.clusters()))


def _seed_rows(arg: str, ledger, actors) -> list[dict]:
    if arg.startswith("coinbase:"):
        try:
            _, cluster, date = arg.split(":", 2)
        except ValueError:
            raise ConfigError("seed argument must be coinbase:<cluster>:<YYYY-MM-DD>") from None
        seeds = coinbase_seeds(ledger, actors, cluster, date)
        if not seeds:
            raise ConfigError(f"no coinbase transactions for {cluster} on {date}")
        return [{"flow_id": f"{cluster}_{date}", "source": cluster, "month": date[:7], "seeds": seeds}]
    return read_seed_table(arg)


def cmd_taint(a) -> None:
    ledger = ingest(a.ledger)
    actors = ActorIndex.load(a.actors) if a.actors else None
    rows = _seed_rows(a.seeds, ledger, actors)
    out = Path(a.out)
    if len(rows) > 1 or out.is_dir() or not out.suffix:
        if actors is None:
            raise ConfigError("--actors is required for a multi-flow seed table")
        extract_flows(ledger, actors, rows, a.purity_min, a.time_max_days, out)
        return
    row = rows[0]
    cfg = TaintConfig(seeds=tuple(row["seeds"]), purity_min=a.purity_min,
                      time_max=int(round(a.time_max_days * DAY)))
    write_flow_tsv(extract_flow(ledger, actors, cfg, row["flow_id"], row.get("source") or None), out)


def cmd_walks(a) -> None:
    src = Path(a.flows)
    flows = load_flows(src) if src.is_dir() else [read_flow_tsv(src)]
    actors = ActorIndex.load(a.actors) if a.actors else None
    cfg = WalkConfig(strategy=a.strategy, vocabulary=a.vocab.replace("-", "_"), temporal=a.temporal,
                     walks_per_flow=a.n_walks, max_walk_length=a.max_length, rng_seed=a.seed)
    build_corpus(flows, actors, cfg).write(a.out)


def cmd_embed(a) -> None:
    cfg = EmbedConfig(dim=a.dim, window=a.window, negative=a.neg, epochs=a.epochs,
                      learning_rate=a.lr, min_learning_rate=a.min_lr, min_count=a.min_count,
                      rng_seed=a.seed, workers=a.workers, dynamic_window=not a.fixed_window)
    model = train_pvdm(WalkCorpus.read(a.corpus), cfg)
    write_embeddings_tsv(a.out, model.flow_ids, model.doc_vectors)
    if a.model_out:
        model.save(a.model_out)


def cmd_eval(a) -> None:
    opts = EvalOptions(metric=a.metric, k=a.k, k_min=a.k_min, k_max=a.k_max, restarts=a.restarts)
    report = evaluate_files(a.embeddings, a.labels, opts, a.seed)
    params = {"metric": a.metric, "k": a.k, "k_min": a.k_min, "k_max": a.k_max,
              "restarts": a.restarts, "rng_seed": a.seed}
    if a.report:
        report.write(a.report, params, a.confusion)
    else:
        sys.stdout.write(report.to_json(params) + "\n")


def cmd_synth(a) -> None:
    if a.scenario:
        cfg = load_scenario(a.scenario)
    elif a.preset == "time-graded":
        cfg = time_graded_scenario()
    else:
        cfg = ScenarioConfig()
    if a.seed is not None:
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), "rng_seed": a.seed})
    scenario = generate(cfg)
    write_scenario(scenario, a.out_dir)
    log.info("%d transactions, %d flows", scenario.summary["n_transactions"], scenario.summary["n_flows"])


def cmd_pipeline(a) -> None:
    overrides = {"out_dir": a.out_dir and str(Path(a.out_dir).resolve()), "rng_seed": a.seed}
    result = run_pipeline(load_config(a.config, overrides), force=a.force)
    for stage, status in result.status.items():
        print(f"{stage}\t{status}\t{result.seconds[stage]:.2f}s")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taintflow", description="Taint-flow extraction, embedding and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate a ledger and print statistics")
    s.add_argument("--ledger", required=True)
    s.add_argument("--stats-out", default="-")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("cluster", help="common-input address clustering")
    s.add_argument("--ledger", required=True)
    s.add_argument("--labels")
    s.add_argument("--no-coinjoin-filter", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("taint", help="extract taint flows from seeds")
    s.add_argument("--ledger", required=True)
    s.add_argument("--actors")
    s.add_argument("--seeds", required=True, help="seed file, seed table, or coinbase:<cluster>:<date>")
    s.add_argument("--purity-min", type=float, default=0.001)
    s.add_argument("--time-max-days", type=float, default=365)
    s.add_argument("--out", required=True, help="flow TSV, or a directory for a seed table")
    s.set_defaults(func=cmd_taint)

    s = sub.add_parser("walks", help="sample and tokenize walks")
    s.add_argument("--flows", required=True, help="flow TSV or directory of them")
    s.add_argument("--actors")
    s.add_argument("--strategy", choices=("rw", "spw"), default="rw")
    s.add_argument("--vocab", choices=("all", "frequent", "known-name", "known-type"), default="all")
    s.add_argument("--temporal", action="store_true")
    s.add_argument("--n-walks", type=int, default=1000)
    s.add_argument("--max-length", type=int, default=100)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_walks)

    d = EmbedConfig()
    s = sub.add_parser("embed", help="train flow vectors")
    s.add_argument("--corpus", required=True)
    s.add_argument("--dim", type=int, default=d.dim)
    s.add_argument("--window", type=int, default=d.window)
    s.add_argument("--neg", type=int, default=d.negative)
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--lr", type=float, default=d.learning_rate)
    s.add_argument("--min-lr", type=float, default=d.min_learning_rate)
    s.add_argument("--min-count", type=int, default=d.min_count)
    s.add_argument("--workers", type=int, default=d.workers)
    s.add_argument("--fixed-window", action="store_true", help="always use the full context window")
    s.add_argument("--seed", type=int, default=d.rng_seed)
    s.add_argument("--out", required=True)
    s.add_argument("--model-out")
    s.set_defaults(func=cmd_embed)

    e = EvalOptions()
    s = sub.add_parser("eval", help="classification, clustering and time correlation")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True, help="CSV with flow_id,source,month")
    s.add_argument("--metric", choices=METRICS, default=e.metric)
    s.add_argument("--k", type=int, default=e.k)
    s.add_argument("--k-min", type=int, default=e.k_min)
    s.add_argument("--k-max", type=int, default=e.k_max)
    s.add_argument("--restarts", type=int, default=e.restarts)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.add_argument("--confusion")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic ledger with ground truth")
    s.add_argument("--scenario", help="TOML or JSON scenario file")
    s.add_argument("--preset", choices=("default", "time-graded"), default="default")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="run every stage from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true", help="ignore the cache")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TaintflowError as exc:
        print(f"taintflow: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"taintflow: {exc}", file=sys.stderr)
        return EXIT_OS
    return 0


if __name__ == "__main__":
    sys.exit(main())

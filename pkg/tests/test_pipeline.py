import json
import time

import pytest

from taintflow.errors import ConfigError, LedgerError
from taintflow.pipeline import StageFailed, load_config, run_pipeline
from taintflow.synth import ScenarioConfig, generate, write_scenario

ARTIFACTS = (
    "ledger_stats.json", "actors.json", "flows/index.csv", "corpus.txt", "corpus.vocab.tsv",
    "model.npz", "embeddings.tsv", "report.json", "confusion.csv", "baseline_report.json",
    "manifest.json",
)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenario")
    write_scenario(generate(ScenarioConfig(flows_per_actor=4, months=4, rng_seed=1)), root / "data")
    return root


def write_config(root, name="run.toml", out="out", extra=""):
    path = root / name
    path.write_text(
        'ledger = "data/ledger.ndjson"\nlabels = "data/labels.csv"\nseeds = "data/seeds.csv"\n'
        f'out_dir = "{out}"\nrng_seed = 3\n\n'
        '[walks]\nvocabulary = "known-type"\ntemporal = true\nwalks_per_flow = 100\n\n'
        '[embed]\ndim = 16\nepochs = 5\n\n'
        '[eval]\nk_max = 5\nbaseline = true\n' + extra,
        encoding="utf-8",
    )
    return path


def test_full_run_then_cache_hit(data_dir):
    cfg = load_config(write_config(data_dir))
    first = run_pipeline(cfg)
    assert set(first.status.values()) == {"ran"}
    out = cfg.out_dir
    for name in ARTIFACTS:
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"ingest", "cluster", "taint", "walks", "embed", "eval"}
    for entry in manifest["stages"].values():
        assert entry["outputs"] and all(entry["outputs"].values())
        assert entry["key"]["code"] == manifest["code_hash"]
    assert manifest["rng_seed"] == 3 and manifest["version"]
    report = json.loads((out / "report.json").read_text())
    assert report["n_flows"] == 12
    assert "ledger" not in json.dumps(report["config"])

    before = {n: (out / n).read_bytes() for n in ARTIFACTS if (out / n).is_file()}
    t0 = time.perf_counter()
    second = run_pipeline(load_config(write_config(data_dir)))
    assert time.perf_counter() - t0 < 1.0
    assert second.cached
    assert before == {n: (out / n).read_bytes() for n in before}


def test_corrupted_intermediate_reruns_downstream(data_dir):
    cfg = load_config(write_config(data_dir, out="out_c"))
    run_pipeline(cfg)
    reference = (cfg.out_dir / "embeddings.tsv").read_bytes()
    corpus = cfg.out_dir / "corpus.txt"
    corpus.write_text("garbage\tx y\n", encoding="utf-8")
    result = run_pipeline(cfg)
    assert result.status["walks"] == "ran"
    assert result.status["ingest"] == result.status["taint"] == "cached"
    # the rebuilt corpus matches the original, so embed sees unchanged input
    assert result.status["embed"] == "cached"
    assert (cfg.out_dir / "embeddings.tsv").read_bytes() == reference


def test_param_change_invalidates_only_downstream(data_dir):
    cfg = load_config(write_config(data_dir, out="out_p"))
    run_pipeline(cfg)
    changed = load_config(write_config(data_dir, name="run2.toml", out="out_p", extra='metric = "euclidean"\n'))
    result = run_pipeline(changed)
    assert [s for s, v in result.status.items() if v == "ran"] == ["eval"]
    assert json.loads((cfg.out_dir / "report.json").read_text())["metric"] == "euclidean"


def test_force_and_determinism(data_dir):
    a = load_config(write_config(data_dir, out="det_a"))
    b = load_config(write_config(data_dir, name="b.toml", out="det_b"))
    run_pipeline(a)
    run_pipeline(b)
    for name in ("embeddings.tsv", "report.json", "corpus.txt", "model.npz"):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes(), name
    forced = run_pipeline(a, force=True)
    assert set(forced.status.values()) == {"ran"}
    assert (a.out_dir / "report.json").read_bytes() == (b.out_dir / "report.json").read_bytes()


def test_holdout_mode(data_dir):
    cfg = load_config(write_config(data_dir, out="out_h", extra='loocv = "holdout"\n'))
    run_pipeline(cfg)
    assert (cfg.out_dir / "holdout_distances.tsv").exists()
    report = json.loads((cfg.out_dir / "report.json").read_text())
    assert 0.0 <= report["accuracy"] <= 1.0


def test_config_errors(data_dir, tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(data_dir, name="bad.toml", extra="bogus = 1\n"))
    missing = data_dir / "missing.json"
    missing.write_text(json.dumps({"ledger": "nope.ndjson", "seeds": "data/seeds.csv", "out_dir": "x"}))
    with pytest.raises(ConfigError):
        run_pipeline(load_config(missing))
    with pytest.raises(ConfigError):
        load_config(write_config(data_dir, name="bad2.toml", extra='metric = "manhattan"\n'))


def test_stage_error_carries_stage_and_exit_code(tmp_path):
    (tmp_path / "ledger.ndjson").write_text("{not json\n")
    (tmp_path / "seeds.txt").write_text("aa\n")
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"ledger": "ledger.ndjson", "seeds": "seeds.txt", "out_dir": "o"}))
    with pytest.raises(StageFailed) as info:
        run_pipeline(load_config(cfg_path))
    assert info.value.stage == "ingest"
    assert isinstance(info.value.cause, LedgerError)
    assert info.value.exit_code == 3

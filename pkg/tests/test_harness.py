from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from rlanomaly.harness.cli import main
from rlanomaly.harness.config import (
    ConfigError,
    ExperimentConfig,
    OutlierFamily,
    dump_config,
    load_config,
    parse_config_text,
)
from rlanomaly.harness.experiments import (
    EVAL_COLUMNS,
    TRAIN_COLUMNS,
    _assert_separated,
    read_csv,
    run_eval_experiment,
    run_train_experiment,
    sensitivity_sweep,
)
from rlanomaly.harness.manifest import RunManifest
from rlanomaly.harness.plots import line_chart
from rlanomaly.persist import save_policy


def gaussian_config(tmp_path, **kw):
    base = dict(source="gaussian", outliers=(OutlierFamily("far", 1.0),), methods=("MD",),
                alphas=(0.05,), lambdas=(0.0,), k=None, n_fit=600, n_test=400, out_dir=str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


# --- config ------------------------------------------------------------------------


def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig(methods=("MD", "RMD"), alphas=(0.01, 0.1), k=None, seeds=(3, 4),
                           outliers=(OutlierFamily("random", 0.25), OutlierFamily("ood", 0.0, "ring")))
    path = tmp_path / "exp.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path).digest() == cfg.digest()


def test_config_parsing_details():
    vals = parse_config_text("# comment\nmethods = MD, RMD  # trailing\n\nk = none\nplot = yes\n")
    assert vals == {"methods": ("MD", "RMD"), "k": None, "plot": True}
    assert OutlierFamily.parse("ood:ring_far") == OutlierFamily("ood", 0.0, "ring_far")


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "alphas = 0.05\nalphas = 0.1",
    "lambdas = 1.0",
    "alphas = 0",
    "methods =",
    "outliers = random:-1",
    "outliers = ood",
    "k = 0",
    "scenario = other",
    "no equals sign",
    "methods = Auto",
    "n_test = 3",
])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_source_and_outlier_kinds_must_agree():
    with pytest.raises(ConfigError):
        ExperimentConfig(source="gaussian")
    with pytest.raises(ConfigError):
        ExperimentConfig(outliers=(OutlierFamily("far", 1.0),))
    assert ExperimentConfig(scenario="train", methods=("Auto", "Random", "MD")).methods[0] == "Auto"


# --- eval grid ----------------------------------------------------------------------


def test_single_cell_grid_has_one_row(tmp_path):
    rows, man = run_eval_experiment(gaussian_config(tmp_path))
    text = (tmp_path / "eval.csv").read_text().splitlines()
    assert len(rows) == 1 and len(text) == 2
    assert text[0] == ",".join(EVAL_COLUMNS)
    assert rows[0]["accuracy"] >= 0.95 and rows[0]["n_test"] == 400


def test_reruns_are_byte_identical(tmp_path):
    cfg = gaussian_config(tmp_path / "a", methods=("E2", "MD", "RMD"), lambdas=(0.0, 0.1),
                          outliers=(OutlierFamily("far", 1.0), OutlierFamily("noise", 0.5)))
    run_eval_experiment(cfg)
    run_eval_experiment(cfg.with_overrides(out_dir=str(tmp_path / "b")))
    run_eval_experiment(cfg.with_overrides(out_dir=str(tmp_path / "c"), workers=2))
    a = (tmp_path / "a" / "eval.csv").read_bytes()
    assert a == (tmp_path / "b" / "eval.csv").read_bytes() == (tmp_path / "c" / "eval.csv").read_bytes()


def test_manifest_lists_every_file(tmp_path):
    cfg = gaussian_config(tmp_path, plot=True, lambdas=(0.0, 0.1))
    _, man = run_eval_experiment(cfg)
    on_disk = {str(p) for p in Path(tmp_path).iterdir()}
    assert set(man.artifacts) == on_disk
    loaded = RunManifest.load(tmp_path / "eval_manifest.json")
    assert loaded.config_hash == cfg.digest() and loaded.seeds == [0] and loaded.finished


def test_policy_source_trains_or_loads(tmp_path, trained_policy):
    ck = save_policy(trained_policy, tmp_path / "pol.json")
    cfg = ExperimentConfig(methods=("MD",), alphas=(0.05,), lambdas=(0.0,), policy=str(ck),
                           train_policy=False, n_fit=1200, n_test=400, out_dir=str(tmp_path / "o"),
                           outliers=(OutlierFamily("ood", 0.0, "ring_far"),))
    rows, man = run_eval_experiment(cfg)
    assert rows[0]["accuracy"] >= 0.9
    with pytest.raises(ConfigError):
        run_eval_experiment(cfg.with_overrides(policy=str(tmp_path / "missing.json")))


def test_separation_guard():
    X = np.random.default_rng(0).standard_normal((10, 3))
    _assert_separated(X[:5], X[5:])
    with pytest.raises(AssertionError):
        _assert_separated(X[:6], X[5:])


def test_sweep_full_rank_matches_no_projection(tmp_path):
    cfg = gaussian_config(tmp_path, methods=("E1", "TMD", "MD", "RMD"), lambdas=(0.0, 0.1),
                          outliers=(OutlierFamily("noise", 0.5),))
    rows, _ = sensitivity_sweep(cfg, [None, 8])
    base = [r for r in rows if r["k"] is None]
    full = [r for r in rows if r["k"] == 8]
    for a, b in zip(base, full):
        assert a["method"] == b["method"] and abs(a["accuracy"] - b["accuracy"]) <= 1e-9


def test_single_k_sweep_equals_eval(tmp_path):
    cfg = gaussian_config(tmp_path, k=4)
    sweep, _ = sensitivity_sweep(cfg, [4])
    plain, _ = run_eval_experiment(cfg)
    assert sweep == plain
    with pytest.raises(ConfigError):
        sensitivity_sweep(cfg, [])
    with pytest.raises(ConfigError):
        sensitivity_sweep(cfg, [9])


# --- training curves ------------------------------------------------------------------


def test_train_experiment_csvs(tmp_path):
    cfg = ExperimentConfig(scenario="train", methods=("Auto", "Random"), seeds=(0, 1), iterations=6,
                           alphas=(0.05,), outliers=(OutlierFamily("ood", 0.0, "ring_far"),),
                           out_dir=str(tmp_path), plot=True)
    rows, man = run_train_experiment(cfg)
    assert len(rows) == 2 * 2 * 6
    per_seed = read_csv(tmp_path / "train.csv")
    means = read_csv(tmp_path / "train_mean.csv")
    assert list(per_seed[0]) == list(TRAIN_COLUMNS)
    assert len(means) == 2 * 6 and {r["seed"] for r in means} == {"mean"}
    assert per_seed[0]["det_accuracy"] == ""  # warmup iterations have no detection metrics
    assert all(float(r["det_accuracy"]) == 1.0 for r in per_seed if r["method"] == "Auto" and r["det_accuracy"])
    for svg in tmp_path.glob("*.svg"):
        ET.parse(svg)


def test_line_chart_handles_nan_and_flat(tmp_path):
    p = line_chart({"a": ([0, 1, 2], [1.0, float("nan"), 1.0]), "b": ([], [])}, tmp_path / "c.svg", title="t<&>")
    root = ET.parse(p).getroot()
    assert root.tag.endswith("svg")


# --- CLI ------------------------------------------------------------------------------


def test_cli_eval_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["eval-exp", "--source", "gaussian", "--outliers", "far:1", "--methods", "MD", "--alphas", "0.05",
            "--lambdas", "0", "--k", "none", "--n-fit", "400", "--n-test", "200", "--out-dir", str(out), "--seed", "2"]
    assert main(args) == 0
    rows = read_csv(out / "eval.csv")
    assert len(rows) == 1 and rows[0]["seed"] == "2"
    assert main(["eval-exp", "--alphas", "3"]) == 1
    assert main(["no-such-command"]) == 1
    cfg = tmp_path / "c.cfg"
    cfg.write_text("source = gaussian\noutliers = far:1\nk = 50\nn_fit = 200\nn_test = 100\n")
    assert main(["eval-exp", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 1  # k > dim
    assert main(["score", "--detector", str(tmp_path / "nope.txt"), "--data", str(cfg)]) == 2


def test_cli_fit_and_score(tmp_path, capsys):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 4))
    data = np.column_stack([X, np.arange(300) % 2])
    np.savetxt(tmp_path / "train.csv", data, delimiter=",")
    probes = np.vstack([np.zeros((1, 4)), np.full((1, 4), 50.0)])
    np.savetxt(tmp_path / "probe.csv", probes, delimiter=",")
    det = tmp_path / "det.txt"
    assert main(["fit", "--data", str(tmp_path / "train.csv"), "--k", "none", "--output", str(det)]) == 0
    capsys.readouterr()
    assert main(["score", "--detector", str(det), "--data", str(tmp_path / "probe.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "distance,class,label"
    assert lines[1].endswith("inlier") and lines[2].endswith("outlier")
    bad = tmp_path / "bad.txt"
    bad.write_text("\n".join(det.read_text().splitlines()[:5]))
    assert main(["score", "--detector", str(bad), "--data", str(tmp_path / "probe.csv")]) == 2


def test_cli_train_policy(tmp_path, capsys):
    assert main(["train-policy", "--iterations", "2", "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "policy.json").read_text())
    assert doc["format"] == "softmax-policy/1" and doc["iterations"] == 2
    assert len(read_csv(tmp_path / "policy.csv")) == 2

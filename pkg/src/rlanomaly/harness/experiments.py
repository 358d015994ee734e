"""Experiment drivers: detection accuracy grids, training curves and k sweeps.

Every data-generating step draws from a seed derived from the run seed and the
grid cell, so cells can run in any order (or in parallel) and still produce
identical rows. Rows are always written in grid order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..detectors import evaluate_detector, fit_detector
from ..estimators import EstimationConfig
from ..online import OnlineConfig, OnlineTrainer
from ..outliers import OutlierSpec, make_outliers
from ..persist import load_policy, save_policy
from ..synthetic import make_gaussian_classes
from ..toyrl.envs import make_env
from ..toyrl.policy import SoftmaxPolicy
from ..toyrl.ppo import TrainerConfig, VecRollout, train_policy
from .config import ConfigError, ExperimentConfig, OutlierFamily
from .manifest import RunManifest
from .plots import line_chart

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ("method", "outlier_kind", "strength", "alpha", "lambda", "k", "seed", "accuracy", "f1", "n_test")
TRAIN_COLUMNS = ("method", "seed", "iteration", "mean_return", "det_accuracy", "det_f1", "retained_fraction")

# fixed PPO settings for the checkpoint an eval run trains on demand
POLICY_LR = 0.1


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    if value is None:
        return "none"
    return str(value)


def write_csv(path: Path, columns, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cell_seed(seed: int, *key) -> np.random.SeedSequence:
    """Seed for one grid cell, independent of the order cells are visited in."""
    tag = zlib.crc32("|".join(map(str, key)).encode())
    return np.random.SeedSequence([int(seed), tag])


# --- policy checkpoint ---------------------------------------------------------


def obtain_policy(config: ExperimentConfig, manifest: RunManifest | None = None) -> SoftmaxPolicy:
    """Load the configured checkpoint, training (and saving) one if allowed."""
    if config.policy and Path(config.policy).exists():
        return load_policy(config.policy)
    if not config.train_policy:
        raise ConfigError(f"policy checkpoint {config.policy!r} not found and train_policy is off")
    tc = TrainerConfig(env_id=config.target_env, iterations=config.policy_iterations,
                       lr=POLICY_LR, seed=config.seeds[0], n_envs=config.n_envs)
    logger.info("training a %s policy for %d iterations", config.target_env, tc.iterations)
    policy, _ = train_policy(tc)
    path = Path(config.policy) if config.policy else Path(config.out_dir) / "policy.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_policy(policy, path, env_id=config.target_env, seed=tc.seed, iterations=tc.iterations)
    if manifest is not None:
        manifest.add(path)
    return policy


# --- evaluation-phase grid -----------------------------------------------------


def _clean_states(policy: SoftmaxPolicy, env_id: str, n: int, n_envs: int, ss) -> np.ndarray:
    vec = VecRollout(env_id, n_envs, seed=ss)
    T = -(-n // n_envs)
    trajs = vec.collect(policy, T)
    S = np.concatenate([tr.obs for tr in trajs])
    return S[:n]


def _outlier_spec(family: OutlierFamily, env_id: str, seed: int) -> OutlierSpec:
    env = make_env(env_id)
    return OutlierSpec(family.kind, family.strength, family.source, seed, env.lo, env.hi)


def _assert_separated(fit_rows: np.ndarray, test_rows: np.ndarray) -> None:
    """No test row may also appear in the fitting set."""
    seen = {r.tobytes() for r in np.ascontiguousarray(fit_rows)}
    if any(r.tobytes() in seen for r in np.ascontiguousarray(test_rows)):
        raise AssertionError("test states leaked into the detector fitting set")


def _policy_cell(policy, config, family, lam, seed):
    """Fitting features/labels and balanced test features/truth on the policy source."""
    fit_ss, test_ss, out_ss = cell_seed(seed, "policy", family, lam).spawn(3)
    rng = np.random.default_rng(out_ss)
    spec = _outlier_spec(family, config.target_env, seed)
    n_out = int(round(lam * config.n_fit))
    S_fit = _clean_states(policy, config.target_env, config.n_fit, config.n_envs, fit_ss)
    if n_out:
        idx = rng.choice(config.n_fit, size=n_out, replace=False)
        S_fit[idx] = make_outliers(spec, S_fit[idx], policy, rng)
    half = config.n_test // 2
    S_test = _clean_states(policy, config.target_env, config.n_test, config.n_envs, test_ss)
    S_test[half:] = make_outliers(spec, S_test[half:], policy, rng)
    truth = np.r_[np.zeros(half, bool), np.ones(config.n_test - half, bool)]
    _assert_separated(S_fit, S_test)
    f_fit, probs, _ = policy.forward(S_fit)
    # a state's class is the action the agent would take there
    return f_fit, np.argmax(probs, axis=1), policy.features(S_test), truth


def _gaussian_cell(config, family, lam, seed):
    fit_ss, test_ss = cell_seed(seed, "gaussian", family, lam).spawn(2)
    g = make_gaussian_classes(seed=seed)
    rng = np.random.default_rng(fit_ss)
    n_out = int(round(lam * config.n_fit))
    X, y = g.sample(config.n_fit - n_out, rng)
    if n_out:
        Xo, yo = g.outliers(family.kind, n_out, rng, family.strength)
        X, y = np.vstack([X, Xo]), np.concatenate([y, yo])
    rng = np.random.default_rng(test_ss)
    half = config.n_test // 2
    Xi, _ = g.sample(half, rng)
    Xo, _ = g.outliers(family.kind, config.n_test - half, rng, family.strength)
    T = np.vstack([Xi, Xo])
    _assert_separated(X, T)
    return X, y, T, np.r_[np.zeros(half, bool), np.ones(config.n_test - half, bool)]


def _eval_unit(args) -> list[dict]:
    config, policy, family, lam, seed = args
    if config.source == "policy":
        X, y, T, truth = _policy_cell(policy, config, family, lam, seed)
    else:
        X, y, T, truth = _gaussian_cell(config, family, lam, seed)
    k = config.k
    if k is not None and k > X.shape[1]:
        raise ConfigError(f"k={k} exceeds the feature dimension {X.shape[1]}")
    rows = []
    for method in config.methods:
        est = EstimationConfig(method=method, seed=int(cell_seed(seed, "fit", family, lam, method).generate_state(1)[0]))
        model = fit_detector(X, y, method=method, k=k, alpha=config.alphas[0], config=est)
        for alpha in config.alphas:
            rep = evaluate_detector(model.with_alpha(alpha), T, truth)
            rows.append({
                "method": method,
                "outlier_kind": family.kind if family.kind != "ood" else f"ood:{family.source}",
                "strength": float(family.strength),
                "alpha": float(alpha),
                "lambda": float(lam),
                "k": k,
                "seed": seed,
                "accuracy": rep.accuracy,
                "f1": rep.f1,
                "n_test": rep.total,
            })
    return rows


def eval_rows(config: ExperimentConfig, policy: SoftmaxPolicy | None = None) -> list[dict]:
    units = [(config, policy, fam, lam, seed)
             for fam in config.outliers for lam in config.lambdas for seed in config.seeds]
    if config.workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(_eval_unit, units))
    else:
        chunks = [_eval_unit(u) for u in units]
    return [row for chunk in chunks for row in chunk]


def run_eval_experiment(config: ExperimentConfig, name: str = "eval") -> tuple[list[dict], RunManifest]:
    """Detection accuracy on balanced test sets over the full config grid."""
    out = Path(config.out_dir)
    manifest = RunManifest.start(config, name)
    policy = obtain_policy(config, manifest) if config.source == "policy" else None
    rows = eval_rows(config, policy)
    manifest.add(write_csv(out / f"{name}.csv", EVAL_COLUMNS, rows))
    if config.plot:
        for path in _eval_plots(config, rows, out, name):
            manifest.add(path)
    manifest.finish(out / f"{name}_manifest.json")
    return rows, manifest


def _eval_plots(config, rows, out: Path, name: str) -> list[Path]:
    """Accuracy against lambda, one chart per outlier family, first alpha only."""
    paths = []
    alpha = config.alphas[0]
    for label in dict.fromkeys(r["outlier_kind"] for r in rows):
        series = {}
        for m in config.methods:
            sel = [r for r in rows if r["method"] == m and r["outlier_kind"] == label and r["alpha"] == alpha]
            lams = sorted({r["lambda"] for r in sel})
            accs = [float(np.mean([r["accuracy"] for r in sel if r["lambda"] == lam])) for lam in lams]
            series[m] = (lams, accs)
        paths.append(line_chart(series, out / f"{name}_{label.replace(':', '_')}.svg",
                                title=f"{label}, alpha={alpha}", xlabel="lambda", ylabel="accuracy"))
    return paths


# --- training-phase curves -----------------------------------------------------


def training_run(config: ExperimentConfig, method: str, seed: int) -> list[dict]:
    """One online-detection training run; contamination uses the first outlier family."""
    family = config.outliers[0]
    spec = _outlier_spec(family, config.target_env, seed)
    trainer = TrainerConfig(env_id=config.target_env, iterations=config.iterations, lr=config.lr,
                            seed=seed, n_envs=config.n_envs)
    online = OnlineConfig(method=method, k=config.k, alpha=config.alphas[0],
                          warmup_fraction=config.warmup_fraction)
    plan = {i: spec for i in range(config.contaminated_envs)}
    history = OnlineTrainer(online, trainer, plan).run()
    return [{"method": method, "seed": seed, **m.row()} for m in history]


def mean_curves(rows: list[dict], methods) -> list[dict]:
    out = []
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        for it in sorted({r["iteration"] for r in mine}):
            at = [r for r in mine if r["iteration"] == it]
            row = {"method": m, "seed": "mean", "iteration": it}
            for col in TRAIN_COLUMNS[3:]:
                vals = [r[col] for r in at if not math.isnan(r[col])]
                row[col] = float(np.mean(vals)) if vals else float("nan")
            out.append(row)
    return out


def run_train_experiment(config: ExperimentConfig, name: str = "train") -> tuple[list[dict], RunManifest]:
    """Per-iteration return and detection curves for every method and seed."""
    if config.source != "policy" or config.outliers[0].kind not in ("random", "adversarial", "ood"):
        raise ConfigError("training runs need a policy-source outlier family")
    out = Path(config.out_dir)
    manifest = RunManifest.start(config, name)
    rows = [r for m in config.methods for s in config.seeds for r in training_run(config, m, s)]
    manifest.add(write_csv(out / f"{name}.csv", TRAIN_COLUMNS, rows))
    means = mean_curves(rows, config.methods)
    manifest.add(write_csv(out / f"{name}_mean.csv", TRAIN_COLUMNS, means))
    if config.plot:
        for col in ("mean_return", "det_accuracy"):
            series = {}
            for m in config.methods:
                pts = [(r["iteration"], r[col]) for r in means if r["method"] == m and not math.isnan(r[col])]
                series[m] = ([p[0] for p in pts], [p[1] for p in pts])
            manifest.add(line_chart(series, out / f"{name}_{col}.svg", title=col, xlabel="iteration", ylabel=col))
    manifest.finish(out / f"{name}_manifest.json")
    return rows, manifest


# --- PCA dimension sweep -------------------------------------------------------


def sensitivity_sweep(config: ExperimentConfig, ks, name: str = "sweep_k") -> tuple[list[dict], RunManifest]:
    """The eval grid repeated for each PCA dimension in ``ks`` (``None`` = no projection)."""
    ks = list(ks)
    if not ks:
        raise ConfigError("the k list is empty")
    out = Path(config.out_dir)
    manifest = RunManifest.start(config, name)
    policy = obtain_policy(config, manifest) if config.source == "policy" else None
    rows = []
    for k in ks:
        rows += eval_rows(replace(config, k=k), policy)
    manifest.add(write_csv(out / f"{name}.csv", EVAL_COLUMNS, rows))
    manifest.finish(out / f"{name}_manifest.json")
    return rows, manifest


"""Command line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..detectors import classify_batch, fit_detector
from ..estimators import METHODS, EstimationConfig
from ..persist import load_detector, load_policy, save_detector, save_policy
from ..toyrl.envs import ENVIRONMENTS
from ..toyrl.ppo import TrainerConfig, VecRollout, evaluate_policy, train_policy
from .config import CONFIG_KEYS, ConfigError, load_config, parse_value
from .experiments import (
    TRAIN_COLUMNS,
    run_eval_experiment,
    run_train_experiment,
    sensitivity_sweep,
    write_csv,
)

log = logging.getLogger("rlanomaly")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="single seed (overrides seeds)")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key in CONFIG_KEYS:
        if key == "out_dir":
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE",
                       help=f"config key {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlanomaly", description="Mahalanobis-type state anomaly detection for toy RL")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-policy", help="train a clean PPO policy and save a checkpoint")
    _common(p)
    p.add_argument("--env", default="grid", choices=sorted(ENVIRONMENTS))
    p.add_argument("--iterations", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--output", help="checkpoint path (default <out-dir>/policy.json)")

    for name, text in (("eval-exp", "detection accuracy grid"),
                       ("train-exp", "training curves with online detection"),
                       ("sweep-k", "eval grid repeated over PCA dimensions")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _experiment_flags(p)
        if name == "sweep-k":
            p.add_argument("--ks", required=True, help="comma separated k values, 'none' for no projection")

    p = sub.add_parser("fit", help="fit a detector and save it")
    _common(p)
    p.add_argument("--data", help="CSV of feature columns plus a final class column")
    p.add_argument("--policy", help="policy checkpoint; states are collected when --data is absent")
    p.add_argument("--env", default="grid", choices=sorted(ENVIRONMENTS))
    p.add_argument("--n", type=int, default=4000, help="states to collect from the policy")
    p.add_argument("--method", default="MD", choices=METHODS)
    p.add_argument("--k", default="16", help="PCA dimension or 'none'")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--output", required=True, help="detector file to write")

    p = sub.add_parser("score", help="score feature rows with a saved detector")
    _common(p)
    p.add_argument("--detector", required=True)
    p.add_argument("--data", required=True, help="CSV of feature rows (a trailing class column is ignored)")
    p.add_argument("--output", help="CSV to write (default stdout)")
    return parser


def _experiment_config(args, scenario: str):
    overrides = {}
    for key in CONFIG_KEYS:
        raw = getattr(args, key, None)
        if raw is not None and key != "out_dir":
            overrides[key] = parse_value(key, raw)
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    overrides["scenario"] = scenario
    return load_config(args.config, **overrides)


def _read_matrix(path) -> np.ndarray:
    try:
        M = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return M


def cmd_train_policy(args) -> int:
    out = Path(args.out_dir or ".")
    cfg = TrainerConfig(env_id=args.env, iterations=args.iterations, lr=args.lr, seed=args.seed or 0)
    policy, history = train_policy(cfg)
    path = Path(args.output) if args.output else out / "policy.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_policy(policy, path, env_id=args.env, seed=cfg.seed, iterations=cfg.iterations)
    rows = [{"method": "PPO", "seed": cfg.seed, "iteration": h["iteration"], "mean_return": h["mean_return"],
             "det_accuracy": float("nan"), "det_f1": float("nan"), "retained_fraction": 1.0} for h in history]
    write_csv(path.with_suffix(".csv"), TRAIN_COLUMNS, rows)
    score = evaluate_policy(policy, args.env, seed=cfg.seed)
    print(f"saved {path}; mean return {score:.4f}")
    return 0


def cmd_fit(args) -> int:
    k = parse_value("k", args.k)
    if args.data:
        M = _read_matrix(args.data)
        X, y = M[:, :-1], M[:, -1].astype(int)
    elif args.policy:
        policy = load_policy(args.policy)
        vec = VecRollout(args.env, 8, seed=args.seed or 0)
        trajs = vec.collect(policy, -(-args.n // 8))
        S = np.concatenate([tr.obs for tr in trajs])[: args.n]
        X, probs, _ = policy.forward(S)
        y = np.argmax(probs, axis=1)
    else:
        raise ConfigError("fit needs --data or --policy")
    model = fit_detector(X, y, method=args.method, k=k, alpha=args.alpha,
                         config=EstimationConfig(method=args.method, seed=args.seed or 0))
    save_detector(model, args.output)
    for msg in model.metadata.get("ridge_warnings", []):
        log.warning(msg)
    print(f"saved {args.output}: {args.method}, {len(model.classes)} classes, k={model.k}, "
          f"threshold {model.threshold:.6g}")
    return 0


def cmd_score(args) -> int:
    model = load_detector(args.detector)
    M = _read_matrix(args.data)
    if M.shape[1] == model.input_dim + 1:
        M = M[:, :-1]
    if M.shape[1] != model.input_dim:
        raise ConfigError(f"data has {M.shape[1]} columns, detector expects {model.input_dim}")
    labels, dist, cls = classify_batch(model, M)
    lines = ["distance,class,label"]
    lines += [f"{d!r},{c},{'outlier' if v == 1 else 'inlier'}" for d, c, v in zip(dist.tolist(), cls, labels)]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train-policy":
            return cmd_train_policy(args)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "score":
            return cmd_score(args)
        if args.command == "eval-exp":
            _, man = run_eval_experiment(_experiment_config(args, "eval"))
        elif args.command == "train-exp":
            _, man = run_train_experiment(_experiment_config(args, "train"))
        else:
            ks = [parse_value("k", t) for t in args.ks.split(",")]
            _, man = sensitivity_sweep(_experiment_config(args, "eval"), ks)
        for path in man.artifacts:
            print(path)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

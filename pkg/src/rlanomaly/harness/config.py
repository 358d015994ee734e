"""Experiment configuration and its flat ``key = value`` text form.

Lists are comma separated. Outlier families are written ``kind:strength``
(``random:0.5``, ``adversarial:0.1``, ``far:1``, ``noise:0.5``) or
``ood:<source env>``. Blank lines and ``#`` comments are ignored.

Keys
----
scenario            eval | train
source              policy | gaussian  (eval only; where features come from)
target_env          toy environment the policy acts in
ood_env             environment OOD states are drawn from
methods             detector methods, plus Auto/Random for training
outliers            outlier families (see above)
alphas              significance levels
lambdas             contamination ratios of the fitting set, each in [0, 1)
k                   PCA dimension, or ``none`` for no projection
seeds               seed list
out_dir             output directory
policy              policy checkpoint path (eval on the policy source)
train_policy        train a policy when the checkpoint is missing
policy_iterations   PPO iterations when training that policy
n_fit               fitting-set size
n_test              balanced test-set size (half outliers)
iterations          PPO iterations of a training run
lr                  PPO learning rate of a training run
contaminated_envs   number of contaminated environments in a training run
n_envs              parallel environments
warmup_fraction     clean warmup share of a training run
plot                also write SVG line charts
workers             worker processes for eval grid cells
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..estimators import METHODS
from ..online import BASELINES
from ..outliers import KINDS
from ..synthetic import OUTLIER_KINDS
from ..toyrl.envs import ENVIRONMENTS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OutlierFamily:
    kind: str
    strength: float = 0.0
    source: str | None = None

    @classmethod
    def parse(cls, text: str) -> OutlierFamily:
        kind, _, arg = text.strip().partition(":")
        if kind == "ood":
            if not arg:
                raise ConfigError("ood outliers need a source environment, e.g. ood:ring_far")
            return cls(kind, 0.0, arg)
        if kind not in KINDS + OUTLIER_KINDS:
            raise ConfigError(f"unknown outlier kind {kind!r}")
        try:
            strength = float(arg)
        except ValueError:
            raise ConfigError(f"outlier {text!r}: strength must be a number") from None
        if not strength > 0:
            raise ConfigError(f"outlier {text!r}: strength must be positive")
        return cls(kind, strength, None)

    def __str__(self) -> str:
        return f"ood:{self.source}" if self.kind == "ood" else f"{self.kind}:{self.strength!r}"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "eval"
    source: str = "policy"
    target_env: str = "grid"
    ood_env: str = "ring_far"
    methods: tuple = ("E1", "E2", "TMD", "MD", "RMD")
    outliers: tuple = (
        OutlierFamily("random", 0.1),
        OutlierFamily("random", 0.3),
        OutlierFamily("adversarial", 0.01),
        OutlierFamily("adversarial", 0.05),
        OutlierFamily("ood", 0.0, "ring_far"),
    )
    alphas: tuple = (0.01, 0.05, 0.1)
    lambdas: tuple = (0.0, 0.01, 0.1)
    k: int | None = 16
    seeds: tuple = (0,)
    out_dir: str = "runs"
    policy: str | None = None
    train_policy: bool = True
    policy_iterations: int = 60
    n_fit: int = 4000
    n_test: int = 2000
    iterations: int = 100
    lr: float = 0.01
    contaminated_envs: int = 4
    n_envs: int = 8
    warmup_fraction: float = 0.5
    plot: bool = False
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scenario not in ("eval", "train"):
            raise ConfigError(f"scenario must be eval or train, not {self.scenario!r}")
        if self.source not in ("policy", "gaussian"):
            raise ConfigError(f"source must be policy or gaussian, not {self.source!r}")
        for env in (self.target_env, self.ood_env):
            if env not in ENVIRONMENTS:
                raise ConfigError(f"unknown environment {env!r}")
        for name in ("methods", "outliers", "alphas", "lambdas", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        allowed = METHODS + (BASELINES if self.scenario == "train" else ())
        for m in self.methods:
            if m not in allowed:
                raise ConfigError(f"method {m!r} is not available for the {self.scenario} scenario")
        for a in self.alphas:
            if not 0 < a < 1:
                raise ConfigError(f"alpha {a} outside (0, 1)")
        for lam in self.lambdas:
            if not 0 <= lam < 1:
                raise ConfigError(f"lambda {lam} outside [0, 1)")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be positive or none")
        kinds = {o.kind for o in self.outliers}
        if self.source == "gaussian" and not kinds <= set(OUTLIER_KINDS):
            raise ConfigError(f"the gaussian source supports outliers {OUTLIER_KINDS}")
        if self.source == "policy" and not kinds <= set(KINDS):
            raise ConfigError(f"the policy source supports outliers {KINDS}")
        if self.n_fit < 2 or self.n_test < 2 or self.n_test % 2:
            raise ConfigError("n_fit must be >= 2 and n_test a positive even number")
        if not 0 <= self.contaminated_envs <= self.n_envs:
            raise ConfigError("contaminated_envs must lie in [0, n_envs]")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.iterations < 2 or self.policy_iterations < 1 or self.workers < 1:
            raise ConfigError("iterations, policy_iterations and workers must be positive")

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **kw)

    def canonical(self) -> dict:
        d = asdict(self)
        d["outliers"] = [str(o) for o in self.outliers]
        for key in ("methods", "alphas", "lambdas", "seeds"):
            d[key] = list(d[key])
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("none", "") else int(text)


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


_PARSERS = {
    "scenario": str.strip,
    "source": str.strip,
    "target_env": str.strip,
    "ood_env": str.strip,
    "methods": lambda s: tuple(_split(s)),
    "outliers": lambda s: tuple(OutlierFamily.parse(t) for t in _split(s)),
    "alphas": lambda s: tuple(float(t) for t in _split(s)),
    "lambdas": lambda s: tuple(float(t) for t in _split(s)),
    "k": _opt_int,
    "seeds": lambda s: tuple(int(t) for t in _split(s)),
    "out_dir": str.strip,
    "policy": lambda s: None if s.strip().lower() in ("", "none") else s.strip(),
    "train_policy": _bool,
    "policy_iterations": int,
    "n_fit": int,
    "n_test": int,
    "iterations": int,
    "lr": float,
    "contaminated_envs": int,
    "n_envs": int,
    "warmup_fraction": float,
    "plot": _bool,
    "workers": int,
}

CONFIG_KEYS = tuple(_PARSERS)


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return ExperimentConfig(**values)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for key in CONFIG_KEYS:
        value = getattr(config, key)
        if isinstance(value, tuple):
            text = ",".join(str(v) if not isinstance(v, float) else repr(v) for v in value)
        elif value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"

"""Random, adversarial (FGSM) and out-of-distribution state outliers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toyrl.envs import make_env, reencode
from .toyrl.policy import SoftmaxPolicy

KINDS = ("random", "adversarial", "ood")


@dataclass(frozen=True)
class OutlierSpec:
    """One outlier family.

    ``strength`` is the noise std for ``random`` and the attack budget for
    ``adversarial``; ``source_env`` names the environment OOD states come from.
    """

    kind: str
    strength: float = 0.0
    source_env: str | None = None
    seed: int = 0
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown outlier kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "random" and not self.strength > 0:
            raise ValueError("random outliers need std > 0")
        if self.kind == "adversarial" and not self.strength > 0:
            raise ValueError("adversarial outliers need epsilon > 0")
        if self.kind == "ood" and not self.source_env:
            raise ValueError("ood outliers need a source environment")

    @property
    def label(self) -> str:
        return self.source_env if self.kind == "ood" else repr(float(self.strength))


@dataclass(frozen=True, eq=False)
class AdversarialTarget:
    action: int
    target: np.ndarray


def _clamp(x, lo, hi):
    if lo is None and hi is None:
        return x
    return np.clip(x, lo, hi)


def gaussian_noise(state, std: float, rng: np.random.Generator, lo=None, hi=None) -> np.ndarray:
    """Add per-coordinate N(0, std^2) noise and clamp to the observation range."""
    if not std > 0:
        raise ValueError("std must be positive")
    state = np.asarray(state, dtype=float)
    return _clamp(state + std * rng.standard_normal(state.shape), lo, hi)


def worst_actions(policy: SoftmaxPolicy, states) -> np.ndarray:
    _, probs, _ = policy.forward(np.atleast_2d(states))
    # argmin returns the first minimum: smallest action id on ties
    return np.argmin(probs, axis=1)


def worst_action(policy: SoftmaxPolicy, state) -> AdversarialTarget:
    a = int(worst_actions(policy, state)[0])
    target = np.zeros(policy.n_actions)
    target[a] = 1.0
    return AdversarialTarget(action=a, target=target)


def fgsm_perturb(policy: SoftmaxPolicy, state, eps: float, lo=None, hi=None) -> np.ndarray:
    """Single signed-gradient step that pulls the policy toward its worst action.

    Takes ``s - eps * sign(grad_s J)`` where ``J`` is the cross-entropy against
    the one-hot worst action, then clamps to the observation range. Works on a
    single state or a batch of states.
    """
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    state = np.asarray(state, dtype=float)
    S = np.atleast_2d(state)
    worst = worst_actions(policy, S)
    targets = np.eye(policy.n_actions)[worst]
    g = policy.grad_state(S, targets)
    out = _clamp(S - eps * np.sign(g), lo, hi)
    return out.reshape(state.shape)


def ood_sample(
    source_env: str,
    target_dim: int,
    rng: np.random.Generator,
    n: int = 1,
    max_steps: int | None = None,
) -> np.ndarray:
    """States visited by a uniformly random policy in ``source_env``.

    Each sample restarts the source environment, walks a random number of
    random steps and re-encodes the observation to ``target_dim`` coordinates.
    """
    env = make_env(source_env, seed=int(rng.integers(2**63)))
    limit = env.horizon if max_steps is None else max_steps
    out = np.empty((n, target_dim))
    for i in range(n):
        obs = env.reset()
        for _ in range(int(rng.integers(limit))):
            obs, _, done = env.step(int(rng.integers(env.n_actions)))
            if done:
                obs = env.reset()
        out[i] = reencode(obs, target_dim)
    return out


def make_outliers(
    spec: OutlierSpec,
    states: np.ndarray,
    policy: SoftmaxPolicy | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Turn a batch of clean observations into outliers of the given family."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if spec.kind == "random":
        return gaussian_noise(states, spec.strength, rng, spec.lo, spec.hi)
    if spec.kind == "adversarial":
        if policy is None:
            raise ValueError("adversarial outliers need a policy")
        return fgsm_perturb(policy, states, spec.strength, spec.lo, spec.hi)
    return ood_sample(spec.source_env, states.shape[1], rng, n=states.shape[0])

"""GAE, clipped-surrogate PPO with hand-written gradients, and vectorized rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..outliers import OutlierSpec, fgsm_perturb, gaussian_noise
from .envs import ToyEnv, make_env, reencode
from .policy import SoftmaxPolicy, log_softmax, softmax

logger = logging.getLogger(__name__)

CLEAN = "clean"


@dataclass
class TrainerConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.9
    clip: float = 0.2
    lr: float = 0.1
    epochs: int = 4
    minibatch: int = 256
    n_envs: int = 8
    horizon: int = 128
    iterations: int = 150
    hidden: int = 64
    value_coef: float = 0.5
    max_grad_norm: float | None = 1.0
    normalize_advantages: bool = True
    env_id: str = "grid"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.clip < 1:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")


@dataclass(eq=False)
class Trajectory:
    env: int
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    tags: list[str]
    features: np.ndarray | None = None
    last_value: float = 0.0
    episode_returns: list[float] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def tag(self) -> str:
        return self.tags[0] if self.tags else CLEAN

    @property
    def contaminated(self) -> np.ndarray:
        return np.array([t != CLEAN for t in self.tags])

    def compute_advantages(self, gamma: float, lam: float) -> None:
        self.advantages = gae(self.rewards, self.values, self.dones, gamma, lam, self.last_value)
        self.returns = self.advantages + self.values


def gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0) -> np.ndarray:
    """Generalized advantage estimates; ``last_value`` bootstraps the final step."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have equal lengths")
    T = rewards.shape[0]
    adv = np.zeros(T)
    nxt_value = float(last_value)
    running = 0.0
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        nxt_value = values[t]
    return adv


# --- PPO loss --------------------------------------------------------------


def ppo_loss_and_grad(policy: SoftmaxPolicy, obs, actions, logp_old, adv, returns, clip, value_coef):
    """Negated clipped surrogate plus value loss, and its parameter gradient."""
    obs = np.asarray(obs, dtype=float)
    actions = np.asarray(actions, dtype=int)
    n = obs.shape[0]
    f = policy.features(obs)
    z = f @ policy.W2.T + policy.b2
    logp_all = log_softmax(z)
    logp = logp_all[np.arange(n), actions]
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1 - clip, 1 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    values = f @ policy.v + policy.c
    vf = 0.5 * (values - returns) ** 2
    loss = -surr.mean() + value_coef * vf.mean()

    # the clipped branch has zero slope once the ratio leaves [1-eps, 1+eps]
    # in the direction the advantage rewards
    active = ~(((adv > 0) & (ratio > 1 + clip)) | ((adv < 0) & (ratio < 1 - clip)))
    dlogp = -(active * ratio * adv) / n
    probs = softmax(z)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    dvalue = value_coef * (values - returns) / n
    grads = policy.backward(obs, dlogits, dvalue)
    stats = {
        "loss": float(loss),
        "policy_loss": float(-surr.mean()),
        "value_loss": float(vf.mean()),
        "clipfrac": float(np.mean(np.abs(ratio - 1) > clip)),
        "approx_kl": float(np.mean(logp_old - logp)),
    }
    return loss, grads, stats


def ppo_update(
    policy: SoftmaxPolicy,
    trajectories: list[Trajectory],
    config: TrainerConfig,
    rng: np.random.Generator,
) -> tuple[SoftmaxPolicy, dict]:
    """Minibatch gradient descent on the PPO loss; returns a new policy."""
    if not trajectories:
        raise ValueError("empty batch")
    for tr in trajectories:
        if tr.advantages is None:
            raise ValueError("advantages must be computed before the update")
    obs = np.concatenate([tr.obs for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    logp_old = np.concatenate([tr.logp for tr in trajectories])
    adv = np.concatenate([tr.advantages for tr in trajectories])
    returns = np.concatenate([tr.returns for tr in trajectories])
    if config.normalize_advantages and adv.shape[0] > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    policy = policy.copy()
    n = obs.shape[0]
    mb = min(config.minibatch, n)
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start : start + mb]
            loss, grads, stats = ppo_loss_and_grad(
                policy, obs[idx], actions[idx], logp_old[idx], adv[idx], returns[idx],
                config.clip, config.value_coef,
            )
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss: {stats}")
            scale = config.lr
            if config.max_grad_norm is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > config.max_grad_norm:
                    scale *= config.max_grad_norm / norm
            for name, g in grads.items():
                setattr(policy, name, getattr(policy, name) - scale * g)
            history.append(stats)
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    return policy, summary


# --- rollouts -----------------------------------------------------------------


class VecRollout:
    """N environment copies with independent RNG streams derived from the seed.

    The per-env streams make collection independent of evaluation order, so a
    parallel collector would reproduce the serial trajectories exactly.
    """

    def __init__(self, env_id: str, n_envs: int, seed=0):
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = root.spawn(n_envs)
        self.env_id = env_id
        self.envs: list[ToyEnv] = []
        self.rngs: list[np.random.Generator] = []
        for ss in children:
            env_ss, rng_ss = ss.spawn(2)
            self.envs.append(make_env(env_id, seed=env_ss))
            self.rngs.append(np.random.default_rng(rng_ss))
        self.obs = np.stack([e.reset() for e in self.envs])
        self.ep_returns = np.zeros(n_envs)
        self._sources: dict[int, ToyEnv] = {}
        self._source_obs: dict[int, np.ndarray] = {}

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    @property
    def obs_dim(self) -> int:
        return self.envs[0].obs_dim

    @property
    def n_actions(self) -> int:
        return self.envs[0].n_actions

    def _source(self, i: int, env_id: str) -> ToyEnv:
        src = self._sources.get(i)
        if src is None or src.env_id != env_id:
            seed = int(self.rngs[i].integers(2**63))
            src = make_env(env_id, seed=seed)
            self._sources[i] = src
            self._source_obs[i] = src.reset()
        return src

    def _seen(self, i: int, spec: OutlierSpec | None, policy: SoftmaxPolicy) -> np.ndarray:
        env = self.envs[i]
        o = self.obs[i]
        if spec is None:
            return o
        if spec.kind == "random":
            return gaussian_noise(o, spec.strength, self.rngs[i], env.lo, env.hi)
        if spec.kind == "adversarial":
            return fgsm_perturb(policy, o, spec.strength, env.lo, env.hi)
        self._source(i, spec.source_env)
        return reencode(self._source_obs[i], env.obs_dim)

    def collect(
        self,
        policy: SoftmaxPolicy,
        T: int,
        plan: dict[int, OutlierSpec | None] | None = None,
    ) -> list[Trajectory]:
        """Run ``T`` steps in every environment.

        Contaminated environments store the perturbed observation. Under random
        and adversarial noise the policy acts on what it sees; under OOD
        contamination the stored states come from the source environment and the
        action is uniform over the target's action space.
        """
        plan = plan or {}
        N, d = self.n_envs, self.obs_dim
        obs = np.empty((N, T, d))
        actions = np.empty((N, T), dtype=int)
        logp = np.empty((N, T))
        rewards = np.empty((N, T))
        values = np.empty((N, T))
        dones = np.empty((N, T), dtype=bool)
        feats = np.empty((N, T, policy.feature_dim))
        finished: list[list[float]] = [[] for _ in range(N)]

        for t in range(T):
            seen = np.stack([self._seen(i, plan.get(i), policy) for i in range(N)])
            f, probs, v = policy.forward(seen)
            for i in range(N):
                spec = plan.get(i)
                rng = self.rngs[i]
                if spec is not None and spec.kind == "ood":
                    a = int(rng.integers(self.n_actions))
                    src = self._sources[i]
                    o2, _, d2 = src.step(int(rng.integers(src.n_actions)))
                    self._source_obs[i] = src.reset() if d2 else o2
                else:
                    a = int(rng.choice(self.n_actions, p=probs[i]))
                o, r, done = self.envs[i].step(a)
                self.ep_returns[i] += r
                if done:
                    finished[i].append(float(self.ep_returns[i]))
                    self.ep_returns[i] = 0.0
                    o = self.envs[i].reset()
                self.obs[i] = o
                obs[i, t] = seen[i]
                actions[i, t] = a
                logp[i, t] = np.log(max(probs[i, a], 1e-300))
                rewards[i, t] = r
                values[i, t] = v[i]
                dones[i, t] = done
                feats[i, t] = f[i]

        _, _, last_v = policy.forward(self.obs)
        out = []
        for i in range(N):
            spec = plan.get(i)
            tag = CLEAN if spec is None else spec.kind
            out.append(
                Trajectory(
                    env=i,
                    obs=obs[i],
                    actions=actions[i],
                    logp=logp[i],
                    rewards=rewards[i],
                    values=values[i],
                    dones=dones[i],
                    tags=[tag] * T,
                    features=feats[i],
                    last_value=float(last_v[i]),
                    episode_returns=finished[i],
                )
            )
        return out


def rollout(
    vec: VecRollout,
    policy: SoftmaxPolicy,
    T: int,
    plan: dict[int, OutlierSpec | None] | None = None,
) -> list[Trajectory]:
    return vec.collect(policy, T, plan)


def mean_episode_return(trajectories: list[Trajectory], clean_only: bool = True) -> float:
    vals = [r for tr in trajectories if not (clean_only and tr.tag != CLEAN) for r in tr.episode_returns]
    return float(np.mean(vals)) if vals else float("nan")


def train_policy(config: TrainerConfig, callback=None) -> tuple[SoftmaxPolicy, list[dict]]:
    """Plain PPO on a clean environment; returns the policy and per-iteration stats."""
    ss_policy, ss_env, ss_update = np.random.SeedSequence(config.seed).spawn(3)
    vec = VecRollout(config.env_id, config.n_envs, seed=ss_env)
    policy = SoftmaxPolicy.init(vec.obs_dim, vec.n_actions, config.hidden, seed=ss_policy)
    rng = np.random.default_rng(ss_update)
    history = []
    for it in range(config.iterations):
        trajs = vec.collect(policy, config.horizon)
        for tr in trajs:
            tr.compute_advantages(config.gamma, config.gae_lambda)
        policy, stats = ppo_update(policy, trajs, config, rng)
        stats = {"iteration": it, "mean_return": mean_episode_return(trajs), **stats}
        history.append(stats)
        if callback is not None:
            callback(stats)
    return policy, history


def evaluate_policy(policy: SoftmaxPolicy, env_id: str, episodes: int = 200, seed: int = 0) -> float:
    """Mean undiscounted return of the stochastic policy over fresh episodes."""
    env = make_env(env_id, seed=seed)
    rng = np.random.default_rng(seed + 1)
    total = 0.0
    for _ in range(episodes):
        o = env.reset()
        done = False
        while not done:
            _, probs, _ = policy.forward(o[None])
            o, r, done = env.step(int(rng.choice(env.n_actions, p=probs[0])))
            total += r
    return total / episodes

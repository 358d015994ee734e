"""One-hidden-layer softmax policy with a shared value head and exact gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2", "v", "c")


@dataclass(eq=False)
class SoftmaxPolicy:
    """``f(s) = tanh(W1 s + b1)``; logits ``W2 f + b2``; value ``v . f + c``."""

    W1: np.ndarray  # (p, d_obs)
    b1: np.ndarray  # (p,)
    W2: np.ndarray  # (C, p)
    b2: np.ndarray  # (C,)
    v: np.ndarray  # (p,)
    c: float | np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(())

    @classmethod
    def init(cls, obs_dim: int, n_actions: int, hidden: int = 64, seed=0) -> SoftmaxPolicy:
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.standard_normal((hidden, obs_dim)) / np.sqrt(obs_dim),
            b1=np.zeros(hidden),
            W2=0.01 * rng.standard_normal((n_actions, hidden)) / np.sqrt(hidden),
            b2=np.zeros(n_actions),
            v=np.zeros(hidden),
            c=0.0,
        )

    @property
    def obs_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def n_actions(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> SoftmaxPolicy:
        return SoftmaxPolicy(**{k: np.array(v, copy=True) for k, v in self.params().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, n)) for n in PARAM_NAMES])

    def with_flat(self, theta: np.ndarray) -> SoftmaxPolicy:
        out = {}
        i = 0
        for n in PARAM_NAMES:
            ref = np.asarray(getattr(self, n))
            out[n] = np.asarray(theta[i : i + ref.size], dtype=float).reshape(ref.shape)
            i += ref.size
        return SoftmaxPolicy(**out)

    # --- forward ---------------------------------------------------------

    def features(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        return np.tanh(S @ self.W1.T + self.b1)

    def logits(self, S) -> np.ndarray:
        return self.features(S) @ self.W2.T + self.b2

    def forward(self, S):
        """Features, action probabilities and state values for one or many states."""
        S = np.asarray(S, dtype=float)
        if S.shape[-1] != self.obs_dim:
            raise ValueError(f"state has {S.shape[-1]} coordinates, policy expects {self.obs_dim}")
        if not np.all(np.isfinite(S)):
            raise ValueError("non-finite state")
        f = self.features(S)
        z = f @ self.W2.T + self.b2
        probs = softmax(z)
        value = f @ self.v + self.c
        return f, probs, value

    def log_prob(self, S, actions) -> np.ndarray:
        z = self.logits(S)
        return log_softmax(z)[np.arange(z.shape[0]), np.asarray(actions, dtype=int)]

    # --- gradients -------------------------------------------------------

    def grad_state(self, S, targets) -> np.ndarray:
        """Gradient w.r.t. the state of ``J = -sum_i p_i log pi(a_i|s)``.

        ``targets`` holds one probability vector per state (one-hot for the
        worst-action attack).
        """
        S = np.atleast_2d(np.asarray(S, dtype=float))
        P = np.atleast_2d(np.asarray(targets, dtype=float))
        f = self.features(S)
        probs = softmax(f @ self.W2.T + self.b2)
        # dJ/dz = sum(p) * pi - p
        dz = P.sum(axis=1, keepdims=True) * probs - P
        dpre = (dz @ self.W2) * (1.0 - f * f)
        return dpre @ self.W1

    def backward(self, S, dlogits, dvalue) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients on logits and values."""
        S = np.asarray(S, dtype=float)
        f = self.features(S)
        df = dlogits @ self.W2 + np.outer(dvalue, self.v)
        dpre = df * (1.0 - f * f)
        return {
            "W1": dpre.T @ S,
            "b1": dpre.sum(axis=0),
            "W2": dlogits.T @ f,
            "b2": dlogits.sum(axis=0),
            "v": f.T @ dvalue,
            "c": np.asarray(dvalue.sum()),
        }


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

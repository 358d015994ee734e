"""Detection during PPO training: moving-window refits and double detectors.

The first ``warmup_fraction`` of iterations train on clean data and fill the
inlier buffer. Afterwards every collected trajectory is scored state by state,
flagged trajectories are dropped from the PPO batch and routed to the outlier
buffer, and both detectors are refit from their windows every ``C * N_c``
new samples.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .detectors import (
    INLIER,
    OUTLIER,
    DetectionLabel,
    DetectorModel,
    classify_batch,
    decide,
    detection_distances,
    fit_detector,
    report_from_labels,
)
from .estimators import EstimationConfig
from .numstat import PCAModel, fit_pca
from .outliers import OutlierSpec
from .toyrl.policy import SoftmaxPolicy
from .toyrl.ppo import (
    TrainerConfig,
    Trajectory,
    VecRollout,
    mean_episode_return,
    ppo_update,
)

logger = logging.getLogger(__name__)

DETECTOR_METHODS = ("E1", "E2", "TMD", "MD", "RMD")
BASELINES = ("Auto", "Random")


@dataclass
class OnlineConfig:
    method: str = "MD"
    k: int | None = 16
    alpha: float = 0.05
    window: int = 2
    n_per_class: int = 512
    warmup_fraction: float = 0.5
    pca_period: int = 300
    flag_threshold: float = 0.5
    double: bool = True
    mcd_restarts: int = 100

    def __post_init__(self):
        if self.method not in DETECTOR_METHODS + BASELINES:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not 0 < self.flag_threshold <= 1:
            raise ValueError("flag_threshold must lie in (0, 1]")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.window < 1 or self.n_per_class < 1:
            raise ValueError("window and n_per_class must be positive")


class WindowBuffer:
    """Per-class FIFO windows of raw feature vectors."""

    def __init__(self, capacity_per_class: int):
        self.capacity = capacity_per_class
        self._queues: dict[int, deque] = {}
        self.since_refit = 0

    def push(self, features, classes) -> None:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        for x, c in zip(features, np.asarray(classes, dtype=int)):
            q = self._queues.get(int(c))
            if q is None:
                q = self._queues[int(c)] = deque(maxlen=self.capacity)
            q.append(x)
        self.since_refit += features.shape[0]

    def occupancy(self, c: int) -> int:
        q = self._queues.get(c)
        return len(q) if q is not None else 0

    def classes(self) -> list[int]:
        return sorted(c for c, q in self._queues.items() if q)

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in self.classes():
            q = self._queues[c]
            xs.append(np.stack(q))
            ys.append(np.full(len(q), c, dtype=int))
        if not xs:
            return np.empty((0, 0)), np.empty(0, dtype=int)
        return np.concatenate(xs), np.concatenate(ys)


@dataclass
class DoubleDetector:
    inlier: DetectorModel | None
    outlier: DetectorModel | None
    rng: np.random.Generator

    def __post_init__(self):
        if self.inlier is not None and self.outlier is not None:
            if self.inlier.k != self.outlier.k or self.inlier.alpha != self.outlier.alpha:
                raise ValueError("both detectors must share k and alpha")


def combine_verdicts(a_outlier: np.ndarray, b_member: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Agreement decides; each disagreement is a fair coin from ``rng``."""
    a_outlier = np.asarray(a_outlier, dtype=bool)
    b_member = np.asarray(b_member, dtype=bool)
    out = np.where(a_outlier, OUTLIER, INLIER)
    conflict = a_outlier != b_member
    n = int(conflict.sum())
    if n:
        coins = rng.random(n) < 0.5
        out[conflict] = np.where(coins, OUTLIER, INLIER)
    return out


def double_detect_batch(dd: DoubleDetector, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dd.inlier is None:
        raise ValueError("inlier detector is not fitted")
    a_labels, M, cls = classify_batch(dd.inlier, X)
    a_out = a_labels == OUTLIER
    if dd.outlier is None:
        b_member = a_out
    else:
        M_out, _ = detection_distances(dd.outlier, X)
        b_member = decide(M_out, dd.outlier.threshold) == INLIER
    return combine_verdicts(a_out, b_member, dd.rng), M, cls


def double_detect(dd: DoubleDetector, feature) -> DetectionLabel:
    labels, M, cls = double_detect_batch(dd, np.asarray(feature, dtype=float)[None])
    return DetectionLabel(int(labels[0]), float(M[0]), int(cls[0]))


def flag_trajectory(labels, threshold: float = 0.5) -> bool:
    """True when at least ``threshold`` of the states are labelled outliers."""
    if len(labels) == 0:
        raise ValueError("cannot flag an empty trajectory")
    vals = [lab.value if isinstance(lab, DetectionLabel) else int(lab) for lab in labels]
    return sum(v == OUTLIER for v in vals) / len(vals) >= threshold


def refit_from_buffer(
    buffer: WindowBuffer,
    method: str,
    k: int | None,
    alpha: float,
    pca: PCAModel | None = None,
    config: EstimationConfig | None = None,
    previous: DetectorModel | None = None,
) -> DetectorModel | None:
    """Fit a detector on the buffer window, or keep ``previous`` if data are too thin."""
    X, y = buffer.arrays()
    if X.shape[0]:
        if pca is not None:
            dim = pca.output_dim
        else:
            dim = k if k is not None and k < X.shape[1] else X.shape[1]
    if not X.shape[0] or all(buffer.occupancy(c) < dim + 2 for c in buffer.classes()):
        logger.warning("buffer too small for a refit (%d samples); keeping previous detector", len(buffer))
        return previous
    if pca is None and dim < X.shape[1]:
        pca = fit_pca(X, dim)
    cfg = config or EstimationConfig(method=method)
    return fit_detector(X, y, method=method, k=dim if pca is not None else None,
                        alpha=alpha, config=cfg, pca=pca)


# --- training loop -------------------------------------------------------------


@dataclass
class IterationMetrics:
    iteration: int
    mean_return: float
    det_accuracy: float = float("nan")
    det_f1: float = float("nan")
    retained_fraction: float = 1.0
    refits_done: int = 0
    warmup: bool = True

    def row(self) -> dict:
        return {
            "iteration": self.iteration,
            "mean_return": self.mean_return,
            "det_accuracy": self.det_accuracy,
            "det_f1": self.det_f1,
            "retained_fraction": self.retained_fraction,
            "refits_done": self.refits_done,
        }


@dataclass
class OnlineState:
    policy: SoftmaxPolicy
    config: OnlineConfig
    trainer: TrainerConfig
    inliers: WindowBuffer
    outliers: WindowBuffer
    update_rng: np.random.Generator
    detect_rng: np.random.Generator
    n_actions: int
    pca: PCAModel | None = None
    inlier_det: DetectorModel | None = None
    outlier_det: DetectorModel | None = None
    iteration: int = 0
    pca_fitted_at: int = -1
    refits: int = 0
    history: list = field(default_factory=list)

    @property
    def warmup_iterations(self) -> int:
        return int(self.trainer.iterations * self.config.warmup_fraction)

    @property
    def in_warmup(self) -> bool:
        return self.iteration < self.warmup_iterations

    @property
    def refit_every(self) -> int:
        return self.n_actions * self.config.n_per_class

    def estimation(self) -> EstimationConfig:
        method = self.config.method if self.config.method in DETECTOR_METHODS else "MD"
        return EstimationConfig(method=method, restarts=self.config.mcd_restarts,
                                seed=self.trainer.seed + self.refits)


def _fit_pca_from(state: OnlineState) -> None:
    X, _ = state.inliers.arrays()
    k = state.config.k
    if k is not None and X.shape[0] > k and k < X.shape[1]:
        state.pca = fit_pca(X, k)
    else:
        state.pca = None
    state.pca_fitted_at = state.iteration


def _refit(state: OnlineState, which: str) -> None:
    method = state.config.method
    k = state.pca.output_dim if state.pca is not None else None
    buf = state.inliers if which == "inlier" else state.outliers
    prev = state.inlier_det if which == "inlier" else state.outlier_det
    model = refit_from_buffer(buf, method, k, state.config.alpha, state.pca, state.estimation(), prev)
    if which == "inlier":
        state.inlier_det = model
    else:
        state.outlier_det = model
    buf.since_refit = 0
    state.refits += 1


def _labels_for(state: OnlineState, tr: Trajectory) -> np.ndarray:
    method = state.config.method
    n = len(tr)
    if method == "Auto":
        return np.where(tr.contaminated, OUTLIER, INLIER)
    if method == "Random":
        return np.where(state.detect_rng.random(n) < 0.5, OUTLIER, INLIER)
    if not state.config.double:
        return classify_batch(state.inlier_det, tr.features)[0]
    dd = DoubleDetector(state.inlier_det, state.outlier_det, state.detect_rng)
    return double_detect_batch(dd, tr.features)[0]


def training_step(state: OnlineState, trajectories: list[Trajectory]) -> IterationMetrics:
    """One detect-filter-update iteration over the trajectories of all actors.

    Contamination tags on the trajectories feed only the reported metrics
    (and the ``Auto`` oracle baseline); detector-based routing never reads them.
    """
    cfg = state.config
    for tr in trajectories:
        if tr.advantages is None:
            tr.compute_advantages(state.trainer.gamma, state.trainer.gae_lambda)
    metrics = IterationMetrics(iteration=state.iteration, mean_return=mean_episode_return(trajectories))

    if state.in_warmup:
        for tr in trajectories:
            state.inliers.push(tr.features, tr.actions)
        state.policy, _ = ppo_update(state.policy, trajectories, state.trainer, state.update_rng)
        metrics.refits_done = state.refits
        state.iteration += 1
        state.history.append(metrics)
        return metrics

    metrics.warmup = False
    needs_detector = cfg.method in DETECTOR_METHODS
    if needs_detector and state.inlier_det is None:
        _fit_pca_from(state)
        _refit(state, "inlier")
        if state.inlier_det is None:
            raise RuntimeError("could not fit an initial inlier detector from the warmup window")

    kept, all_pred, all_true = [], [], []
    for tr in trajectories:
        labels = _labels_for(state, tr)
        all_pred.append(labels)
        all_true.append(tr.contaminated)
        if flag_trajectory(labels, cfg.flag_threshold):
            state.outliers.push(tr.features, tr.actions)
        else:
            state.inliers.push(tr.features, tr.actions)
            kept.append(tr)

    report = report_from_labels(np.concatenate(all_pred), np.concatenate(all_true))
    metrics.det_accuracy = report.accuracy
    metrics.det_f1 = report.f1
    metrics.retained_fraction = len(kept) / len(trajectories)
    if kept:
        state.policy, _ = ppo_update(state.policy, kept, state.trainer, state.update_rng)

    if needs_detector:
        if state.iteration - state.pca_fitted_at >= cfg.pca_period:
            _fit_pca_from(state)
            _refit(state, "inlier")
            if cfg.double and len(state.outliers):
                _refit(state, "outlier")
        else:
            if state.inliers.since_refit >= state.refit_every:
                _refit(state, "inlier")
            if cfg.double and state.outliers.since_refit >= state.refit_every:
                _refit(state, "outlier")
    metrics.refits_done = state.refits
    state.iteration += 1
    state.history.append(metrics)
    return metrics


class OnlineTrainer:
    """Owns the rollout, the policy and the detection state for one run."""

    def __init__(
        self,
        config: OnlineConfig,
        trainer: TrainerConfig,
        contamination: dict[int, OutlierSpec] | None = None,
    ):
        ss_policy, ss_env, ss_update, ss_detect = np.random.SeedSequence(trainer.seed).spawn(4)
        self.vec = VecRollout(trainer.env_id, trainer.n_envs, seed=ss_env)
        policy = SoftmaxPolicy.init(self.vec.obs_dim, self.vec.n_actions, trainer.hidden, seed=ss_policy)
        cap = config.window * config.n_per_class
        self.state = OnlineState(
            policy=policy,
            config=config,
            trainer=trainer,
            inliers=WindowBuffer(cap),
            outliers=WindowBuffer(cap),
            update_rng=np.random.default_rng(ss_update),
            detect_rng=np.random.default_rng(ss_detect),
            n_actions=self.vec.n_actions,
        )
        self.contamination = dict(contamination or {})

    def step(self) -> IterationMetrics:
        plan = {} if self.state.in_warmup else self.contamination
        trajs = self.vec.collect(self.state.policy, self.state.trainer.horizon, plan)
        return training_step(self.state, trajs)

    def run(self, callback=None) -> list[IterationMetrics]:
        while self.state.iteration < self.state.trainer.iterations:
            m = self.step()
            if callback is not None:
                callback(m)
        return self.state.history

"""On-disk formats: detector models, policy checkpoints and trajectory dumps.

Detector file
-------------
One ``key = <json value>`` pair per line, in a fixed order::

    format_version = 1
    method = "MD"
    alpha = 0.05
    k = 5
    pca = true                      # false when no projection is used
    pca.mean = [...]
    pca.components = [[...], ...]
    pca.explained_variance = [...]
    classes = 2
    class.0.id = 0
    class.0.n = 512
    class.0.fallback = false
    class.0.mu = [...]
    class.0.sigma = [[...], ...]
    class.0.logdet = -3.2
    ...
    metadata.seed = 0
    metadata.ridge_warnings = [...]
    end = true

Floats are written with ``repr`` (shortest round-trip form), so loading
reproduces every stored value bit for bit. Factorizations are recomputed on
load. Because every field has its own line, a truncated file fails with the
name of the first missing field.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .detectors import DetectorModel
from .estimators import ClassGaussian
from .numstat import PCAModel, cholesky
from .toyrl.policy import PARAM_NAMES, SoftmaxPolicy
from .toyrl.ppo import Trajectory

FORMAT_VERSION = 1
POLICY_FORMAT = "softmax-policy/1"
TRAJECTORY_HEADER = "# trajectory dump v1: env,t,obs_0..obs_{d-1},action,logp,reward,done,tag"


class DetectorFileError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.line = line


def _dump(value) -> str:
    if isinstance(value, np.ndarray):
        value = value.tolist()
    return json.dumps(value, allow_nan=False)


def detector_lines(model: DetectorModel) -> list[str]:
    rows: list[tuple[str, object]] = [
        ("format_version", FORMAT_VERSION),
        ("method", model.method),
        ("alpha", float(model.alpha)),
        ("k", int(model.k)),
        ("pca", model.pca is not None),
    ]
    if model.pca is not None:
        rows += [
            ("pca.mean", model.pca.mean),
            ("pca.components", model.pca.components),
            ("pca.explained_variance", model.pca.explained_variance),
        ]
    rows.append(("classes", len(model.classes)))
    for i, c in enumerate(model.class_ids):
        g = model.classes[int(c)]
        rows += [
            (f"class.{i}.id", int(c)),
            (f"class.{i}.n", int(g.n)),
            (f"class.{i}.fallback", bool(g.fallback)),
            (f"class.{i}.mu", g.location),
            (f"class.{i}.sigma", g.scatter),
            (f"class.{i}.logdet", float(g.chol.logdet)),
        ]
    meta = model.metadata or {}
    rows += [
        ("metadata.seed", meta.get("seed")),
        ("metadata.ridge_warnings", list(meta.get("ridge_warnings", []))),
        ("end", True),
    ]
    return [f"{key} = {_dump(val)}" for key, val in rows]


def save_detector(model: DetectorModel, path) -> Path:
    path = Path(path)
    path.write_text("\n".join(detector_lines(model)) + "\n", encoding="utf-8")
    return path


class _Reader:
    def __init__(self, text: str):
        self.entries: list[tuple[int, str, str]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            key, sep, value = raw.partition("=")
            if not sep:
                raise DetectorFileError("expected 'key = value'", line=lineno)
            self.entries.append((lineno, key.strip(), value.strip()))
        self.pos = 0

    def take(self, field: str):
        if self.pos >= len(self.entries):
            last = self.entries[-1][0] + 1 if self.entries else 1
            raise DetectorFileError("missing field", field=field, line=last)
        lineno, key, value = self.entries[self.pos]
        if key != field:
            raise DetectorFileError(f"expected field {field!r}, found {key!r}", field=field, line=lineno)
        self.pos += 1
        try:
            return json.loads(value), lineno
        except json.JSONDecodeError as exc:
            raise DetectorFileError(f"malformed value: {exc.msg}", field=field, line=lineno) from None

    def array(self, field: str, ndim: int) -> np.ndarray:
        value, lineno = self.take(field)
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError):
            raise DetectorFileError("not a numeric array", field=field, line=lineno) from None
        if arr.ndim != ndim:
            raise DetectorFileError(f"expected a {ndim}-D array", field=field, line=lineno)
        return arr

    def scalar(self, field: str, kind):
        value, lineno = self.take(field)
        if kind is bool:
            ok = isinstance(value, bool)
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, kind)
        if not ok:
            raise DetectorFileError(f"expected {kind.__name__}", field=field, line=lineno)
        return value


def parse_detector(text: str) -> DetectorModel:
    r = _Reader(text)
    version = r.scalar("format_version", int)
    if version != FORMAT_VERSION:
        raise DetectorFileError(f"unsupported format_version {version}", field="format_version", line=1)
    method = r.scalar("method", str)
    alpha = r.scalar("alpha", float)
    k = r.scalar("k", int)
    pca = None
    if r.scalar("pca", bool):
        pca = PCAModel(
            mean=r.array("pca.mean", 1),
            components=r.array("pca.components", 2),
            explained_variance=r.array("pca.explained_variance", 1),
        )
    n_classes = r.scalar("classes", int)
    classes = {}
    shared = None
    for i in range(n_classes):
        cid = r.scalar(f"class.{i}.id", int)
        n = r.scalar(f"class.{i}.n", int)
        fallback = r.scalar(f"class.{i}.fallback", bool)
        mu = r.array(f"class.{i}.mu", 1)
        sigma = r.array(f"class.{i}.sigma", 2)
        r.scalar(f"class.{i}.logdet", float)
        if method == "TMD" and shared is not None and np.array_equal(shared[0], sigma):
            sigma, chol = shared
        else:
            chol = cholesky(sigma)
            if method == "TMD":
                shared = (sigma, chol)
        classes[cid] = ClassGaussian(cid, mu, sigma, chol, n, fallback)
    seed = r.take("metadata.seed")[0]
    warnings = r.take("metadata.ridge_warnings")[0]
    r.scalar("end", bool)
    try:
        return DetectorModel(method, pca, classes, k, alpha, {"seed": seed, "ridge_warnings": warnings})
    except ValueError as exc:
        raise DetectorFileError(f"inconsistent detector: {exc}") from None


def load_detector(path) -> DetectorModel:
    return parse_detector(Path(path).read_text(encoding="utf-8"))


# --- policies -----------------------------------------------------------------


def save_policy(policy: SoftmaxPolicy, path, **extra) -> Path:
    doc = {"format": POLICY_FORMAT, **extra}
    for name, value in policy.params().items():
        doc[name] = np.asarray(value).tolist()
    path = Path(path)
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return path


def load_policy(path) -> SoftmaxPolicy:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != POLICY_FORMAT:
        raise ValueError(f"unsupported policy format {doc.get('format')!r}")
    missing = [n for n in PARAM_NAMES if n not in doc]
    if missing:
        raise ValueError(f"policy checkpoint missing fields {missing}")
    return SoftmaxPolicy(**{n: np.asarray(doc[n], dtype=float) for n in PARAM_NAMES})


# --- trajectories -------------------------------------------------------------


def dump_trajectories(trajectories: list[Trajectory], path) -> Path:
    lines = [TRAJECTORY_HEADER]
    for tr in trajectories:
        for t in range(len(tr)):
            fields = [str(tr.env), str(t)]
            fields += [repr(float(x)) for x in tr.obs[t]]
            fields += [
                str(int(tr.actions[t])),
                repr(float(tr.logp[t])),
                repr(float(tr.rewards[t])),
                "1" if tr.dones[t] else "0",
                tr.tags[t],
            ]
            lines.append(",".join(fields))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_trajectories(path) -> list[Trajectory]:
    """Inverse of :func:`dump_trajectories` (values and advantages are not stored)."""
    rows: dict[int, list[list[str]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 8:
            raise ValueError(f"line {lineno}: too few fields")
        rows.setdefault(int(parts[0]), []).append(parts)
    out = []
    for env, recs in rows.items():
        recs.sort(key=lambda p: int(p[1]))
        obs = np.array([[float(x) for x in p[2:-5]] for p in recs])
        out.append(
            Trajectory(
                env=env,
                obs=obs,
                actions=np.array([int(p[-5]) for p in recs]),
                logp=np.array([float(p[-4]) for p in recs]),
                rewards=np.array([float(p[-3]) for p in recs]),
                values=np.zeros(len(recs)),
                dones=np.array([p[-2] == "1" for p in recs]),
                tags=[p[-1] for p in recs],
            )
        )
    return out

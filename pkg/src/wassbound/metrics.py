"""Metrics on R^d, estimator settings and the paired-trajectory container."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

EUCLIDEAN = "euclidean"
CAPPED = "capped-euclidean"


@dataclass(frozen=True)
class Metric:
    kind: str = EUCLIDEAN
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, CAPPED):
            raise InvalidInputError(f"unknown metric kind {self.kind!r}")
        if not self.cap > 0:
            raise InvalidInputError("cap must be positive")

    @classmethod
    def capped(cls, cap: float = 1.0) -> "Metric":
        return cls(CAPPED, cap)

    @property
    def name(self) -> str:
        return self.kind if self.kind == EUCLIDEAN else f"{self.kind}({self.cap:g})"


def distance(m: Metric, x, y):
    """Distance between points; broadcasts over leading axes of `x` and `y`."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1:] != y.shape[-1:]:
        raise InvalidInputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    r = np.linalg.norm(x - y, axis=-1)
    if m.kind == CAPPED:
        r = np.minimum(r, m.cap)
    return r


def pairwise_cost_matrix(m: Metric, p: float, xs, ys) -> np.ndarray:
    """Matrix with entry (i, j) equal to distance(xs[i], ys[j]) ** p."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise InvalidInputError("empty point set")
    if xs.shape[0] != ys.shape[0]:
        raise InvalidInputError("point sets must have equal counts")
    if xs.shape[1] != ys.shape[1]:
        raise InvalidInputError("dimension mismatch")
    sq = (
        np.einsum("ij,ij->i", xs, xs)[:, None]
        + np.einsum("ij,ij->i", ys, ys)[None, :]
        - 2.0 * xs @ ys.T
    )
    r = np.sqrt(np.maximum(sq, 0.0))
    # the expansion above loses precision for nearly coincident points
    close = r < 1e-6 * (1.0 + np.sqrt(np.abs(sq).max()))
    if close.any():
        i, j = np.nonzero(close)
        r[i, j] = np.linalg.norm(xs[i] - ys[j], axis=-1)
    if m.kind == CAPPED:
        r = np.minimum(r, m.cap)
    return r**p


@dataclass(frozen=True)
class EstimatorConfig:
    p: float = 2.0
    num_chains: int = 5
    burn_in: int = 0
    horizon: int = 1000
    master_seed: int = 0

    def __post_init__(self):
        if not self.p >= 1:
            raise InvalidInputError("p must be >= 1")
        if self.num_chains < 1:
            raise InvalidInputError("need at least one chain")
        if self.burn_in < 0:
            raise InvalidInputError("burn-in must be nonnegative")
        if self.horizon <= self.burn_in:
            raise InvalidInputError("horizon T must exceed burn-in S")
        if not 0 <= self.master_seed < 2**64:
            raise InvalidInputError("master_seed must fit in 64 unsigned bits")


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Paired trajectories of `num_chains` coupled chains over steps 0..horizon.

    `distances` has shape (I, T+1). `xs`/`ys` have shape (I, T+1, d) unless the
    batch was recorded distances-only, in which case they are None.
    """

    dimension: int
    distances: np.ndarray
    xs: np.ndarray | None = None
    ys: np.ndarray | None = None
    metric: Metric = field(default_factory=Metric)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dist = _frozen(self.distances)
        if dist.ndim != 2:
            raise InvalidInputError("distances must be a (chains, steps) array")
        object.__setattr__(self, "distances", dist)
        object.__setattr__(self, "xs", _frozen(self.xs))
        object.__setattr__(self, "ys", _frozen(self.ys))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if (self.xs is None) != (self.ys is None):
            raise InvalidInputError("store both state sequences or neither")
        if self.xs is not None:
            want = dist.shape + (self.dimension,)
            if self.xs.shape != want or self.ys.shape != want:
                raise InvalidInputError(f"state arrays must have shape {want}")

    @property
    def num_chains(self) -> int:
        return self.distances.shape[0]

    @property
    def horizon(self) -> int:
        return self.distances.shape[1] - 1

    @property
    def distances_only(self) -> bool:
        return self.xs is None

    def recomputed_distances(self) -> np.ndarray:
        if self.xs is None:
            raise InvalidInputError("batch holds distances only")
        return distance(self.metric, self.xs, self.ys)

    def marginal_samples(self, burn_in: int = 0, horizon: int | None = None):
        """Pool states with burn_in < t <= horizon across chains, as (N, d) arrays."""
        if self.xs is None:
            raise InvalidInputError("batch holds distances only")
        T = self.horizon if horizon is None else horizon
        d = self.dimension
        return (
            self.xs[:, burn_in + 1 : T + 1].reshape(-1, d),
            self.ys[:, burn_in + 1 : T + 1].reshape(-1, d),
        )

    # -- CSV round trip -------------------------------------------------

    def to_csv(self, path=None) -> str:
        I, n = self.distances.shape
        chain = np.repeat(np.arange(I), n)
        t = np.tile(np.arange(n), I)
        cols = [chain, t, self.distances.reshape(-1)]
        header = ["chain", "t", "dist"]
        if self.xs is not None:
            cols += list(self.xs.reshape(-1, self.dimension).T)
            cols += list(self.ys.reshape(-1, self.dimension).T)
            header += [f"x_{j}" for j in range(self.dimension)]
            header += [f"y_{j}" for j in range(self.dimension)]
        buf = io.StringIO()
        meta = {"dimension": self.dimension, "metric": self.metric.kind,
                "cap": self.metric.cap, **self.metadata}
        buf.write("# " + json.dumps(meta, sort_keys=True, default=str) + "\n")
        buf.write(",".join(header) + "\n")
        body = np.column_stack(cols)
        fmt = ["%d", "%d"] + ["%.17g"] * (body.shape[1] - 2)
        np.savetxt(buf, body, fmt=fmt, delimiter=",")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "TrajectoryBatch":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "TrajectoryBatch":
        lines = text.splitlines()
        meta = json.loads(lines[0][1:]) if lines[0].startswith("#") else {}
        body_start = 1 if lines[0].startswith("#") else 0
        header = lines[body_start].split(",")
        data = np.loadtxt(io.StringIO("\n".join(lines[body_start + 1 :])), delimiter=",", ndmin=2)
        I = int(data[:, 0].max()) + 1
        n = data.shape[0] // I
        dim = int(meta.pop("dimension", (len(header) - 3) // 2))
        metric = Metric(meta.pop("metric", EUCLIDEAN), float(meta.pop("cap", 1.0)))
        dist = data[:, 2].reshape(I, n)
        xs = ys = None
        if len(header) > 3:
            xs = data[:, 3 : 3 + dim].reshape(I, n, dim)
            ys = data[:, 3 + dim : 3 + 2 * dim].reshape(I, n, dim)
        return cls(dim, dist, xs, ys, metric, meta)

"""Linear noising path, timestep-pair sampling and 2-D toy datasets."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.datasets import make_moons

DATASETS = ("delta", "gaussian", "eight_gaussians", "checkerboard", "two_moons")
DELTA_POINT = np.array([0.5, -0.5])
NUM_CLASSES = {"delta": 0, "gaussian": 0, "eight_gaussians": 8, "checkerboard": 0, "two_moons": 2}

EIGHT_GAUSSIAN_RADIUS = 2.0
EIGHT_GAUSSIAN_STD = 0.1


@dataclass(frozen=True)
class DataPoint:
    x: np.ndarray
    label: int | None = None


@dataclass(frozen=True)
class TimestepPair:
    t: float
    r: float
    is_boundary: bool

    def __post_init__(self):
        if not 0.0 <= self.r <= self.t <= 1.0:
            raise ValueError(f"need 0 <= r <= t <= 1, got r={self.r}, t={self.t}")
        if self.is_boundary != (self.r == self.t):
            raise ValueError("is_boundary must be set exactly when r == t")


@dataclass(frozen=True)
class PathSample:
    z_t: np.ndarray
    v: np.ndarray
    epsilon: np.ndarray
    x: np.ndarray
    pair: TimestepPair


@dataclass
class PathBatch:
    """A batch of path samples, one row per sample.

    ``t`` and ``r`` are column vectors of shape ``(n, 1)`` so they broadcast
    against ``(n, d)`` data. ``labels`` holds class indices, with ``-1``
    meaning the null class; ``None`` for unconditional data.
    """

    x: np.ndarray
    epsilon: np.ndarray
    t: np.ndarray
    r: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.epsilon = np.atleast_2d(np.asarray(self.epsilon, dtype=np.float64))
        n = self.x.shape[0]
        self.t = np.asarray(self.t, dtype=np.float64).reshape(n, 1)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(n, 1)
        if self.x.shape != self.epsilon.shape:
            raise ValueError(f"x shape {self.x.shape} != epsilon shape {self.epsilon.shape}")
        if np.any(self.r > self.t) or np.any(self.r < 0) or np.any(self.t > 1):
            raise ValueError("need 0 <= r <= t <= 1 for every sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def z_t(self) -> np.ndarray:
        return (1.0 - self.t) * self.x + self.t * self.epsilon

    @property
    def v(self) -> np.ndarray:
        return self.epsilon - self.x

    @property
    def is_boundary(self) -> np.ndarray:
        return (self.r == self.t).ravel()

    def subset(self, mask) -> "PathBatch":
        labels = None if self.labels is None else self.labels[mask]
        return PathBatch(self.x[mask], self.epsilon[mask], self.t[mask], self.r[mask], labels)

    def with_r(self, r) -> "PathBatch":
        return PathBatch(self.x, self.epsilon, self.t, r, self.labels)

    def with_boundary(self) -> "PathBatch":
        """Same samples with ``r`` collapsed onto ``t``."""
        return self.with_r(self.t.copy())

    def samples(self) -> list[PathSample]:
        out = []
        z, v = self.z_t, self.v
        for i in range(len(self)):
            t, r = float(self.t[i, 0]), float(self.r[i, 0])
            out.append(PathSample(z[i], v[i], self.epsilon[i], self.x[i], TimestepPair(t, r, r == t)))
        return out


def _draw(name: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    if name == "delta":
        return np.tile(DELTA_POINT, (n, 1)), None
    if name == "gaussian":
        return rng.standard_normal((n, 2)), None
    if name == "eight_gaussians":
        labels = rng.integers(0, 8, size=n)
        centers = eight_gaussian_means()[labels]
        return centers + EIGHT_GAUSSIAN_STD * rng.standard_normal((n, 2)), labels
    if name == "checkerboard":
        # 4x4 board on [-2, 2]^2, points on the cells where (col + row) is even
        col = rng.integers(0, 4, size=n)
        row = 2 * rng.integers(0, 2, size=n) + (col % 2)
        u = rng.random((n, 2))
        x = np.stack([col + u[:, 0], row + u[:, 1]], axis=1) - 2.0
        return x, None
    if name == "two_moons":
        x, y = make_moons(n, noise=0.05, random_state=int(rng.integers(0, 2**31 - 1)))
        return 2.0 * (x - np.array([0.5, 0.25])), y.astype(np.int64)
    raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")


def eight_gaussian_means() -> np.ndarray:
    angles = 2 * np.pi * np.arange(8) / 8
    return EIGHT_GAUSSIAN_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_dataset(name: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw ``n`` points of a named 2-D dataset.

    Returns ``(X, y)`` in the style of ``sklearn.datasets``; ``y`` is ``None``
    for datasets without class structure.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    return _draw(name, n, np.random.default_rng(seed))


def to_points(X, y=None) -> list[DataPoint]:
    return [DataPoint(np.asarray(x), None if y is None else int(c))
            for x, c in zip(X, y if y is not None else [None] * len(X))]


class DataStream:
    """Infinite minibatch source over a named dataset or a fixed array."""

    def __init__(self, rng: np.random.Generator, name: str | None = None, X=None, y=None):
        if (name is None) == (X is None):
            raise ValueError("give exactly one of a dataset name or an array")
        if name is not None and name not in DATASETS:
            raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
        self.rng = rng
        self.name = name
        self.X = None if X is None else np.asarray(X, dtype=np.float64)
        self.y = None if y is None else np.asarray(y, dtype=np.int64)

    @property
    def dim(self) -> int:
        return 2 if self.X is None else self.X.shape[1]

    def next(self, n: int) -> tuple[np.ndarray, np.ndarray | None]:
        if self.name is not None:
            return _draw(self.name, n, self.rng)
        idx = self.rng.integers(0, self.X.shape[0], size=n)
        return self.X[idx], None if self.y is None else self.y[idx]


def write_points_csv(path, X, y=None) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1", "label"])
        for i, x in enumerate(np.asarray(X)):
            w.writerow([repr(float(x[0])), repr(float(x[1])), "" if y is None else int(y[i])])


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    X = np.array([[float(r["x0"]), float(r["x1"])] for r in rows])
    labels = [r["label"] for r in rows]
    y = None if all(lab == "" for lab in labels) else np.array([int(lab) for lab in labels])
    return X, y


def logit_normal(rng: np.random.Generator, size, loc: float = -0.4, scale: float = 1.0) -> np.ndarray:
    return expit(loc + scale * rng.standard_normal(size))


def sample_t_r_batch(rng: np.random.Generator, n: int, ratio_r_eq_t: float = 0.25,
                     loc: float = -0.4, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` (t, r) pairs; returns column vectors ``t, r`` of shape (n, 1).

    Two independent logit-normal draws are ordered so that t >= r, then a
    ``ratio_r_eq_t`` fraction of pairs is collapsed to r = t.
    """
    if not 0.0 <= ratio_r_eq_t <= 1.0:
        raise ValueError("ratio_r_eq_t must lie in [0, 1]")
    a = logit_normal(rng, n, loc, scale)
    b = logit_normal(rng, n, loc, scale)
    t = np.maximum(a, b)
    r = np.minimum(a, b)
    collapse = rng.random(n) < ratio_r_eq_t
    r = np.where(collapse, t, r)
    return t.reshape(n, 1), r.reshape(n, 1)


def sample_t_r(rng: np.random.Generator, ratio_r_eq_t: float = 0.25,
               loc: float = -0.4, scale: float = 1.0) -> TimestepPair:
    t, r = sample_t_r_batch(rng, 1, ratio_r_eq_t, loc, scale)
    t, r = float(t[0, 0]), float(r[0, 0])
    return TimestepPair(t, r, r == t)


def interpolate(x, epsilon, pair: TimestepPair) -> PathSample:
    x = np.asarray(x, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if x.shape != epsilon.shape:
        raise ValueError(f"x shape {x.shape} != epsilon shape {epsilon.shape}")
    z_t = (1.0 - pair.t) * x + pair.t * epsilon
    return PathSample(z_t, epsilon - x, epsilon, x, pair)


def make_batch(rng: np.random.Generator, x, labels=None, ratio_r_eq_t: float = 0.25,
               loc: float = -0.4, scale: float = 1.0) -> PathBatch:
    """Pair data rows with fresh noise and timesteps."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = rng.standard_normal(x.shape)
    t, r = sample_t_r_batch(rng, x.shape[0], ratio_r_eq_t, loc, scale)
    return PathBatch(x, eps, t, r, labels)

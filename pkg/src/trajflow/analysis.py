"""Gradient-alignment and loss-tracking measurements, plus a 2-D sample-quality metric."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .network import ModelParams
from .objectives import LossTerms, grad_of_loss, loss_terms
from .paths import DataStream, PathBatch, make_batch

DEFAULT_PAIRS = (("tfm", "tc_c"), ("fm_prime", "tc_c"))
COSINE_HEADER = ("pair", "iteration", "cosine")


class UndefinedCosine(ValueError):
    """A gradient in the pair has zero norm."""


@dataclass(frozen=True)
class CosineReport:
    loss_a: str
    loss_b: str
    mean: float
    p05: float
    p95: float
    iterations: int
    batch_size: int
    undefined: int = 0

    @property
    def pair(self) -> str:
        return f"{self.loss_a}:{self.loss_b}"


def _batch_for(loss_id: str, batch: PathBatch) -> PathBatch:
    # the boundary-only loss is evaluated on the same samples with r set to t
    return batch.with_boundary() if loss_id == "fm_prime" else batch


def loss_gradient(params: ModelParams, batch: PathBatch, loss_id: str) -> np.ndarray:
    return grad_of_loss(loss_id, params, _batch_for(loss_id, batch))


def cosine(ga: np.ndarray, gb: np.ndarray) -> float:
    na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosine("zero-norm gradient")
    return float(np.clip(np.dot(ga, gb) / (na * nb), -1.0, 1.0))


def grad_cosine_pair(params: ModelParams, batch: PathBatch, loss_a: str, loss_b: str) -> float:
    """Cosine between the flattened gradients of two losses on one batch.

    Raises :class:`UndefinedCosine` if either gradient vanishes.
    """
    ga = loss_gradient(params, batch, loss_a)
    gb = ga if loss_b == loss_a else loss_gradient(params, batch, loss_b)
    return cosine(ga, gb)


def _stream(dataset: str | None, X, y, rng):
    if X is not None:
        return DataStream(rng, X=X, y=y)
    return DataStream(rng, name=dataset)


def _labels_for(params: ModelParams, labels):
    if params.config.num_classes == 0:
        return None
    return labels


def fresh_batches(params: ModelParams, iterations: int, batch_size: int, seed: int,
                  dataset: str | None = "eight_gaussians", X=None, y=None,
                  ratio_r_eq_t: float = 0.25, t_loc: float = -0.4, t_scale: float = 1.0):
    """Yield ``iterations`` independent path batches from one seeded stream."""
    data_rng, path_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    stream = _stream(dataset, X, y, data_rng)
    for _ in range(iterations):
        x, labels = stream.next(batch_size)
        yield make_batch(path_rng, x, _labels_for(params, labels), ratio_r_eq_t, t_loc, t_scale)


def cosine_protocol(params: ModelParams, pairs=DEFAULT_PAIRS, iterations: int = 200,
                    batch_size: int = 128, seed: int = 0, dataset: str | None = "eight_gaussians",
                    X=None, y=None, ratio_r_eq_t: float = 0.25
                    ) -> tuple[list[CosineReport], dict[str, list[float]]]:
    """Repeat :func:`grad_cosine_pair` on fresh batches.

    Every pair sees the same batch in a given iteration, and each distinct
    loss gradient is computed once per batch. Returns the per-pair reports
    and the raw cosine lists (NaN where undefined).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pairs = [tuple(p) for p in pairs]
    raw: dict[str, list[float]] = {f"{a}:{b}": [] for a, b in pairs}
    for batch in fresh_batches(params, iterations, batch_size, seed, dataset, X, y, ratio_r_eq_t):
        grads = {}
        for loss_id in sorted({lid for p in pairs for lid in p}):
            grads[loss_id] = loss_gradient(params, batch, loss_id)
        for a, b in pairs:
            try:
                value = cosine(grads[a], grads[b])
            except UndefinedCosine:
                value = float("nan")
            raw[f"{a}:{b}"].append(value)
    reports = []
    for a, b in pairs:
        values = np.asarray(raw[f"{a}:{b}"])
        ok = values[np.isfinite(values)]
        if ok.size:
            mean, p05, p95 = float(ok.mean()), *map(float, np.percentile(ok, [5, 95]))
        else:
            mean = p05 = p95 = float("nan")
        reports.append(CosineReport(a, b, mean, p05, p95, iterations, batch_size,
                                    int(values.size - ok.size)))
    return reports, raw


def write_cosine_csv(path, reports: list[CosineReport], raw: dict[str, list[float]]) -> None:
    """Raw rows ``pair,iteration,cosine`` followed by summary rows per pair.

    Summary rows use the iteration field for the statistic name (``mean``,
    ``p05``, ``p95``).
    """
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COSINE_HEADER)
        for rep in reports:
            for i, c in enumerate(raw[rep.pair]):
                w.writerow([rep.pair, i, repr(float(c))])
        for rep in reports:
            for stat in ("mean", "p05", "p95"):
                w.writerow([rep.pair, stat, repr(getattr(rep, stat))])


@dataclass(frozen=True)
class TermSummary:
    name: str
    mean: float
    p05: float
    p95: float


LOSS_TERM_NAMES = tuple(f.name for f in fields(LossTerms))


def eval_loss_suite(params: ModelParams, batches) -> tuple[list[TermSummary], list[LossTerms]]:
    """Evaluate every decomposition term on each batch and aggregate.

    Returns one :class:`TermSummary` per term (including ``c_const``) and
    the per-batch values.
    """
    per_batch = [loss_terms(params, b) for b in batches]
    if not per_batch:
        raise ValueError("need at least one batch")
    summaries = []
    for name in LOSS_TERM_NAMES:
        vals = np.array([getattr(t, name) for t in per_batch])
        p05, p95 = np.percentile(vals, [5, 95])
        summaries.append(TermSummary(name, float(vals.mean()), float(p05), float(p95)))
    return summaries, per_batch


def write_loss_suite_csv(path, summaries: list[TermSummary], per_batch: list[LossTerms]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("term", "batch", "value"))
        for i, terms in enumerate(per_batch):
            for name, v in asdict(terms).items():
                w.writerow([name, i, repr(float(v))])
        for s in summaries:
            for stat in ("mean", "p05", "p95"):
                w.writerow([s.name, stat, repr(getattr(s, stat))])


def energy_distance(A, B) -> float:
    """Two-sample energy distance 2 E|a - b| - E|a - a'| - E|b - b'|.

    All pair averages include the diagonal (V-statistic), so identical
    samples give exactly 0 and two single points give twice their distance.
    Symmetric in its arguments bit-for-bit.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    within_a = cdist(A, A).mean()
    within_b = cdist(B, B).mean()
    # mean of the cross matrix and of its transpose differ in summation order
    cross = 0.5 * (cdist(A, B).mean() + cdist(B, A).mean())
    return float(2.0 * cross - (within_a + within_b))

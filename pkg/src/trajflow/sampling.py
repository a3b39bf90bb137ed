"""Few-step generation: ODE jumps and consistency denoise/re-noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .network import ModelParams, as_velocity_fn

ODE = "ode"
CONSISTENCY = "consistency"

_INTERMEDIATE = {"b": 0.5, "xl": 0.55, "xl+": 0.5}


@dataclass(frozen=True)
class SamplerConfig:
    """``labels`` is None (uniform random when the model is conditional), an
    int (fixed), ``"balanced"``, or a per-sample sequence."""

    mode: str = ODE
    timesteps: tuple[float, ...] = (1.0, 0.0)
    num_samples: int = 1000
    labels: object = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "timesteps", tuple(float(t) for t in self.timesteps))
        check_timesteps(self.timesteps)
        if self.mode not in (ODE, CONSISTENCY):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.num_samples <= 0:
            raise ValueError("num_samples must be positive")

    @property
    def nfe(self) -> int:
        return len(self.timesteps) - 1


def check_timesteps(ts) -> None:
    ts = list(ts)
    if len(ts) < 2 or ts[0] != 1.0 or ts[-1] != 0.0:
        raise ValueError(f"timesteps must start at 1 and end at 0, got {ts}")
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError(f"timesteps must be strictly decreasing, got {ts}")


def make_timesteps(nfe: int, mid: float | None = None) -> tuple[float, ...]:
    """(1, 0) for one step; (1, mid, 0) for two; evenly spaced beyond that."""
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    if nfe == 1:
        return (1.0, 0.0)
    if nfe == 2:
        return (1.0, default_intermediate() if mid is None else float(mid), 0.0)
    return tuple(float(t) for t in np.linspace(1.0, 0.0, nfe + 1))


def default_intermediate(scale_hint: str | None = None) -> float:
    """Intermediate time for 2-step sampling; 0.5 unless a known model scale says otherwise."""
    if scale_hint is None:
        return 0.5
    return _INTERMEDIATE.get(scale_hint.lower(), 0.5)


def resolve_labels(labels, n: int, num_classes: int, rng: np.random.Generator):
    if num_classes == 0:
        return None
    if labels is None:
        return rng.integers(0, num_classes, size=n)
    if isinstance(labels, str):
        if labels != "balanced":
            raise ValueError(f"unknown label option {labels!r}")
        return np.arange(n) % num_classes
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 0:
        return np.full(n, int(labels))
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got {labels.shape}")
    return labels


def generate(model, config: SamplerConfig, num_classes: int | None = None):
    """Run the configured sampler; returns ``(samples, labels)``.

    ``model`` is ``ModelParams`` or a callable ``fn(z, r, t, labels)``.
    """
    fn = as_velocity_fn(model)
    if num_classes is None:
        num_classes = model.config.num_classes if isinstance(model, ModelParams) else 0
    data_dim = model.config.data_dim if isinstance(model, ModelParams) else 2
    rng = np.random.default_rng(config.seed)
    n = config.num_samples
    labels = resolve_labels(config.labels, n, num_classes, rng)
    z = rng.standard_normal((n, data_dim))
    ts = config.timesteps
    for t_n, t_m in zip(ts, ts[1:]):
        if config.mode == CONSISTENCY:
            z = z - t_n * ad.value(fn(z, np.zeros((n, 1)), np.full((n, 1), t_n), labels))
            if t_m > 0:
                z = z + t_m * rng.standard_normal(z.shape)
        else:
            z = z - (t_n - t_m) * ad.value(fn(z, np.full((n, 1), t_m), np.full((n, 1), t_n), labels))
    return z, labels


def delta_oracle(x0):
    """Exact average velocity (z - x0) / t of the straight path into the point mass ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)

    def fn(z, r, t, labels=None):
        return (np.asarray(z) - x0) / np.asarray(t)

    return fn


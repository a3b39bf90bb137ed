"""Consistency-step-ratio curriculum: alpha annealed from 1 to 0 over training."""
from __future__ import annotations

from dataclasses import dataclass

from scipy.special import expit


@dataclass(frozen=True)
class ScheduleConfig:
    """Sigmoid schedule from ``k_s`` to ``k_e`` with temperature and clamp."""

    k_s: float
    k_e: float
    gamma: float = 25.0
    eta: float = 5e-3

    def __post_init__(self):
        if self.k_s > self.k_e:
            raise ValueError("need k_s <= k_e")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0.0 < self.eta < 0.5:
            raise ValueError("eta must lie in (0, 0.5)")

    def alpha_at(self, k: float) -> float:
        return alpha_at(self, k)


@dataclass(frozen=True)
class ConstantSchedule:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def alpha_at(self, k: float) -> float:
        return float(self.alpha)


def pre_clamp_alpha(config: ScheduleConfig, k: float) -> float:
    """1 - sigmoid(gamma * (k - mid) / (k_e - k_s)), before clamping.

    The argument is the same affine map as ``scale * k + offset`` but written
    around the midpoint so that it is exactly 0 there and exactly antisymmetric
    about it. Degenerate ``k_s == k_e`` is a hard step at ``k_s``.
    """
    if k < 0:
        raise ValueError("iteration must be non-negative")
    if config.k_e == config.k_s:
        return 1.0 if k < config.k_s else 0.0
    mid = (config.k_s + config.k_e) / 2
    x = (k - mid) / (config.k_e - config.k_s) * config.gamma
    # 1 - sigmoid(x) == sigmoid(-x); evaluating the small tail directly keeps
    # alpha(mid + d) + alpha(mid - d) == 1 bit-exactly
    if x >= 0:
        return float(expit(-x))
    return float(1.0 - expit(x))


def alpha_at(config, k: float) -> float:
    """Clamped alpha in {0} U [eta, 1 - eta] U {1}."""
    if isinstance(config, ConstantSchedule):
        return config.alpha_at(k)
    a = pre_clamp_alpha(config, k)
    if a > 1.0 - config.eta:
        return 1.0
    if a < config.eta:
        return 0.0
    return a

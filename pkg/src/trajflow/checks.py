"""Numerical self-checks: autodiff rules, loss identities, schedule and sampler exactness.

Each check returns a :class:`CheckResult` with the measured value and the
tolerance it is held to. ``run_checks(scope)`` drives a subset.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .network import ModelConfig, ModelParams, init_params, predict_u
from .objectives import (BOOTSTRAP, AlphaLossConfig, ct_discrete_equiv_check, grad_of_loss,
                         loss_alpha, loss_mf, loss_shortcut, loss_tc_c, loss_tfm)
from .paths import DELTA_POINT, PathBatch, make_batch, sample_dataset
from .sampling import CONSISTENCY, ODE, SamplerConfig, delta_oracle, generate
from .schedule import ScheduleConfig, alpha_at, pre_clamp_alpha

SCOPES = ("autodiff", "identities", "schedule", "sampler")
FD_STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    relation: str = "<"
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.value:.3e} {self.relation} {self.tolerance:.3e}"
                f" ({self.seconds:.2f}s)")


def _below(name, value, tol):
    value = float(value)
    return CheckResult(name, value, tol, bool(np.isfinite(value) and value < tol), "<")


def _at_least(name, value, tol):
    value = float(value)
    return CheckResult(name, value, tol, bool(np.isfinite(value) and value >= tol), ">=")


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# autodiff


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def primitive_cases() -> dict[str, tuple[Callable, list[Callable]]]:
    """Per primitive: a function of arrays and generators for its inputs."""
    normal = lambda shape: (lambda rng: rng.standard_normal(shape))  # noqa: E731
    away = lambda shape: (lambda rng: _away_from_zero(rng, shape))  # noqa: E731
    return {
        "matmul": (ad.matmul, [normal((3, 4)), normal((4, 2))]),
        "add": (ad.add, [normal((3, 4)), normal((4,))]),
        "sub": (ad.sub, [normal((3, 1)), normal((3, 4))]),
        "mul": (ad.mul, [normal((3, 4)), normal((1, 4))]),
        "scale": (lambda a: ad.scale(a, 1.7), [normal((3, 4))]),
        "sum": (lambda a: ad.sum(a, axis=0), [normal((3, 4))]),
        "mean": (lambda a: ad.mean(a, axis=1, keepdims=True), [normal((3, 4))]),
        "square": (ad.square, [normal((3, 4))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=-1), [normal((3, 2)), normal((3, 3))]),
        "sigmoid": (ad.sigmoid, [normal((3, 4))]),
        "tanh": (ad.tanh, [normal((3, 4))]),
        "relu": (ad.relu, [away((3, 4))]),
        "sin": (ad.sin, [normal((3, 4))]),
        "cos": (ad.cos, [normal((3, 4))]),
        "silu": (ad.silu, [normal((3, 4))]),
        "add_bias": (ad.add_bias, [normal((3, 4)), normal((4,))]),
        "stopgrad": (ad.stopgrad, [normal((3, 4))]),
    }


def _fd_directional(fn, xs, ts, h=FD_STEP):
    plus = ad.value(fn(*[x + h * t for x, t in zip(xs, ts)]))
    minus = ad.value(fn(*[x - h * t for x, t in zip(xs, ts)]))
    return (plus - minus) / (2 * h)


def _fd_gradient(fn, xs, w, h=FD_STEP):
    grads = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = 1.0
            ts = [e if j == i else np.zeros_like(xj) for j, xj in enumerate(xs)]
            g[idx] = np.sum(w * _fd_directional(fn, xs, ts, h))
        grads.append(g)
    return grads


def _reverse_gradient(fn, xs, w):
    tape = ad.Tape()
    leaves = [tape.watch(f"x{i}", x) for i, x in enumerate(xs)]
    out = ad.sum(ad.mul(fn(*leaves), w))
    grads = ad.backward(tape, out)
    return [grads[f"x{i}"] for i in range(len(xs))]


def primitive_errors(name: str, seed: int = 0) -> dict[str, float]:
    """Reverse, tangent and duality errors for one primitive."""
    fn, gens = primitive_cases()[name]
    rng = np.random.default_rng(seed)
    xs = [g(rng) for g in gens]
    ts = [rng.standard_normal(x.shape) for x in xs]
    out = ad.value(fn(*xs))
    w = rng.standard_normal(out.shape)
    _, tangent = ad.jvp(fn, xs, ts)
    grads = _reverse_gradient(fn, xs, w)
    lhs = float(np.sum(w * tangent))
    rhs = float(sum(np.sum(g * t) for g, t in zip(grads, ts)))
    duality = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    if name == "stopgrad":
        # blocked by definition: both derivatives must be exactly zero
        zero = float(np.abs(tangent).max() + max(np.abs(g).max() for g in grads))
        return {"reverse": zero, "tangent": zero, "duality": 0.0 if lhs == rhs == 0 else duality}
    fd_t = _fd_directional(fn, xs, ts)
    fd_g = _fd_gradient(fn, xs, w)
    reverse = _rel(np.concatenate([g.ravel() for g in grads]),
                   np.concatenate([g.ravel() for g in fd_g]))
    return {"reverse": reverse, "tangent": _rel(tangent, fd_t), "duality": duality}


def _small_random_params(seed: int, hidden=(16, 16), num_classes=0, out_scale=0.5) -> ModelParams:
    params = init_params(ModelConfig(hidden_dims=hidden, num_classes=num_classes, seed=seed))
    rng = np.random.default_rng(seed + 10_000)
    tensors = dict(params.tensors)
    tensors["out.weight"] = out_scale * rng.standard_normal(tensors["out.weight"].shape)
    tensors["out.bias"] = out_scale * rng.standard_normal(tensors["out.bias"].shape)
    return ModelParams(params.config, tensors)


def _random_batch(seed: int, n: int = 16, ratio: float = 0.25, dataset="eight_gaussians",
                  r_zero=False) -> PathBatch:
    rng = np.random.default_rng(seed)
    x, _ = sample_dataset(dataset, n, seed)
    batch = make_batch(rng, x, None, ratio)
    return batch.with_r(np.zeros_like(batch.t)) if r_zero else batch


def network_jvp_error(seed: int = 0, h: float = FD_STEP) -> float:
    """Tangent of u along (v, 0, 1) against central differences."""
    params = _small_random_params(seed)
    batch = _random_batch(seed, ratio=0.0)
    f = lambda z, r, t: predict_u(params, z, r, t)  # noqa: E731
    # keep t + h <= 1 so the FD stencil stays inside the valid domain
    t = np.minimum(batch.t, 1.0 - 2 * h)
    fd = (ad.value(f(batch.z_t + h * batch.v, batch.r, t + h))
          - ad.value(f(batch.z_t - h * batch.v, batch.r, t - h))) / (2 * h)
    _, tangent = ad.jvp(f, (batch.z_t, batch.r, t), (batch.v, 0.0, 1.0))
    return _rel(tangent, fd)


def check_autodiff() -> list[CheckResult]:
    results = []
    for name in ad.primitive_set():
        errs = primitive_errors(name)
        results.append(_below(f"autodiff.{name}.reverse_vs_fd", errs["reverse"], 1e-6))
        results.append(_below(f"autodiff.{name}.tangent_vs_fd", errs["tangent"], 1e-6))
        results.append(_below(f"autodiff.{name}.duality", errs["duality"], 1e-10))
    results.append(_below("network.tangent_vs_fd", network_jvp_error(), 1e-5))
    return results


# ---------------------------------------------------------------------------
# loss identities


def decomposition_residual(seed: int) -> tuple[float, float]:
    """Relative gradient residual of MF = TFM + TC_c, and the drift of the
    batch constant when the live weights move with the target held fixed."""
    params = _small_random_params(seed)
    batch = _random_batch(seed)
    target = params.detached()
    g_mf = grad_of_loss("mf", params, batch, target=target)
    g_tfm = grad_of_loss("tfm", params, batch, target=target)
    g_tc = grad_of_loss("tc_c", params, batch, target=target)
    residual = np.linalg.norm(g_mf - g_tfm - g_tc) / np.linalg.norm(g_mf)

    def constant(p):
        return (float(loss_mf(p, batch, target)[0]) - float(loss_tfm(p, batch))
                - float(loss_tc_c(p, batch, target)))

    rng = np.random.default_rng(seed + 1)
    moved = params.from_flat(params.flat() + 0.1 * rng.standard_normal(params.size))
    c0, c1 = constant(params), constant(moved)
    return float(residual), abs(c1 - c0) / abs(c0)


def alpha_endpoint_equalities(seed: int) -> tuple[float, float]:
    """Relative gaps of L_{alpha=1} vs TFM and of L_{1/2, bootstrap} / 2 vs the shortcut loss."""
    params = _small_random_params(seed)
    batch = _random_batch(seed)
    l1 = float(loss_alpha(params, batch, AlphaLossConfig(alpha=1.0))[0])
    tfm = float(loss_tfm(params, batch))
    half = float(loss_alpha(params, batch, AlphaLossConfig(alpha=0.5, v_tilde_mode=BOOTSTRAP))[0])
    sc = float(loss_shortcut(params, batch))
    return abs(l1 - tfm) / abs(tfm), abs(0.5 * half - sc) / abs(sc)


def alpha_limit(seed: int = 0) -> tuple[float, float]:
    """Cosine of grad L_{1e-4} with grad L_MF, and e(1e-2) / e(1e-4)."""
    params = _small_random_params(seed, hidden=(32, 32))
    batch = _random_batch(seed, n=32, ratio=0.0)
    g_mf = grad_of_loss("mf", params, batch)

    def g_alpha(a):
        return grad_of_loss("alpha", params, batch, AlphaLossConfig(alpha=a))

    g_small = g_alpha(1e-4)
    cos = float(np.dot(g_small, g_mf) / (np.linalg.norm(g_small) * np.linalg.norm(g_mf)))
    ratio = np.linalg.norm(g_alpha(1e-2) - g_mf) / np.linalg.norm(g_small - g_mf)
    return cos, float(ratio)


def ct_discrete_error(seed: int = 0, n: int = 100) -> float:
    params = _small_random_params(seed)
    batch = _random_batch(seed, n=n, r_zero=True)
    rng = np.random.default_rng(seed + 2)
    delta_t = rng.uniform(0.05, 0.95, (n, 1)) * batch.t
    lhs, rhs = ct_discrete_equiv_check(params, batch, delta_t)
    return float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))


def ct_continuous_error(seed: int = 0) -> float:
    params = _small_random_params(seed)
    batch = _random_batch(seed, n=32, r_zero=True)
    g_mf = grad_of_loss("mf", params, batch)
    g_ct = grad_of_loss("ct_c", params, batch)
    return _rel(g_ct, g_mf)


def check_identities(draws: int = 50) -> list[CheckResult]:
    residuals, drifts, eq1, eq_half = [], [], [], []
    for seed in range(draws):
        r, c = decomposition_residual(seed)
        residuals.append(r)
        drifts.append(c)
        a, b = alpha_endpoint_equalities(seed)
        eq1.append(a)
        eq_half.append(b)
    cos, ratio = alpha_limit()
    return [
        _below("identity.decomposition_gradient", max(residuals), 1e-8),
        _below("identity.decomposition_constant", max(drifts), 1e-8),
        _below("identity.alpha_one_equals_tfm", max(eq1), 1e-12),
        _below("identity.alpha_half_equals_shortcut", max(eq_half), 1e-12),
        _at_least("identity.alpha_limit_cosine", cos, 0.999),
        _at_least("identity.alpha_limit_error_ratio", ratio, 10.0),
        _below("identity.ct_discrete", ct_discrete_error(), 1e-10),
        _below("identity.ct_continuous_gradient", ct_continuous_error(), 1e-8),
    ]


# ---------------------------------------------------------------------------
# schedule


def check_schedule() -> list[CheckResult]:
    results = []
    cfgs = [ScheduleConfig(5_000, 10_000), ScheduleConfig(150_000, 250_000), ScheduleConfig(0, 1)]
    mid_err = max(abs(pre_clamp_alpha(c, (c.k_s + c.k_e) / 2) - 0.5) for c in cfgs)
    results.append(_below("schedule.midpoint_half", mid_err, np.finfo(float).tiny))
    plateau = 0.0
    monotone_violations = 0
    range_violations = 0
    for c in cfgs:
        ks = np.linspace(0, 2 * c.k_e + 10, 5001)
        vals = np.array([alpha_at(c, k) for k in ks])
        plateau = max(plateau, abs(alpha_at(c, c.k_s) - 1.0), abs(alpha_at(c, 0) - 1.0),
                      abs(alpha_at(c, c.k_e)), abs(alpha_at(c, 2 * c.k_e + 10)))
        monotone_violations += int(np.count_nonzero(np.diff(vals) > 0))
        inside = (vals == 0) | (vals == 1) | ((vals >= c.eta) & (vals <= 1 - c.eta))
        range_violations += int(np.count_nonzero(~inside))
    results.append(_below("schedule.plateaus_exact", plateau, np.finfo(float).tiny))
    results.append(_below("schedule.monotone_violations", monotone_violations, 0.5))
    results.append(_below("schedule.range_violations", range_violations, 0.5))
    c = cfgs[0]
    mid = (c.k_s + c.k_e) / 2
    sym = max(abs(pre_clamp_alpha(c, mid + d) + pre_clamp_alpha(c, mid - d) - 1.0)
              for d in np.linspace(0, mid, 1001))
    results.append(_below("schedule.symmetry", sym, np.finfo(float).tiny))
    return results


# ---------------------------------------------------------------------------
# sampler


SAMPLER_GRID = (
    (1.0, 0.0),
    (1.0, 0.5, 0.0),
    (1.0, 0.55, 0.0),
    (1.0, 0.3, 0.0),
    (1.0, 0.75, 0.5, 0.25, 0.0),
    tuple(np.linspace(1.0, 0.0, 11)),
    (1.0, 0.9, 0.2, 0.01, 0.0),
)


def oracle_sampler_error(num_samples: int = 200) -> float:
    oracle = delta_oracle(DELTA_POINT)
    worst = 0.0
    for mode in (ODE, CONSISTENCY):
        for i, ts in enumerate(SAMPLER_GRID):
            z, _ = generate(oracle, SamplerConfig(mode=mode, timesteps=ts,
                                                  num_samples=num_samples, seed=i))
            worst = max(worst, float(np.abs(z - DELTA_POINT).max()))
    return worst


def check_sampler() -> list[CheckResult]:
    params = _small_random_params(3)
    z_ode, _ = generate(params, SamplerConfig(mode=ODE, num_samples=64, seed=5))
    z_ct, _ = generate(params, SamplerConfig(mode=CONSISTENCY, num_samples=64, seed=5))
    return [
        _below("sampler.oracle_exact", oracle_sampler_error(), 1e-12),
        _below("sampler.one_step_modes_agree", float(np.abs(z_ode - z_ct).max()),
               np.finfo(float).tiny),
    ]


CHECKS: dict[str, Callable[[], list[CheckResult]]] = {
    "autodiff": check_autodiff,
    "identities": check_identities,
    "schedule": check_schedule,
    "sampler": check_sampler,
}


def run_checks(scope: str = "all") -> list[CheckResult]:
    if scope != "all" and scope not in CHECKS:
        raise ValueError(f"unknown scope {scope!r}; expected 'all' or one of {SCOPES}")
    names = SCOPES if scope == "all" else (scope,)
    results = []
    for name in names:
        start = time.perf_counter()
        batch = CHECKS[name]()
        elapsed = time.perf_counter() - start
        results.extend(CheckResult(r.name, r.value, r.tolerance, r.passed, r.relation,
                                   elapsed / len(batch)) for r in batch)
    return results

"""Training objectives for trajectory flow models.

Every loss takes a *model* (``ModelParams`` or a plain callable
``fn(z, r, t, labels)``) and a :class:`~trajflow.paths.PathBatch`. When the
model's tensors are taped, the returned loss is a taped scalar so it can be
differentiated; otherwise it is a 0-d array.

Bootstrap targets use a frozen copy of the weights (``target``). It defaults
to a detached copy of ``model``; pass the EMA shadow or an older snapshot to
hold it fixed while ``model`` moves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .network import NULL_LABEL, ModelParams, as_velocity_fn
from .paths import PathBatch

CONDITIONAL = "conditional"
BOOTSTRAP = "bootstrap"
LOSS_IDS = ("fm_prime", "tfm", "tc_c", "mf", "alpha", "shortcut")


@dataclass(frozen=True)
class AlphaLossConfig:
    alpha: float = 1.0
    v_tilde_mode: str = CONDITIONAL
    use_ema_for_target: bool = False
    adaptive_c: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.v_tilde_mode not in (CONDITIONAL, BOOTSTRAP):
            raise ValueError(f"unknown v_tilde_mode {self.v_tilde_mode!r}")


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 0.2
    kappa: float = 0.92
    t_range: tuple[float, float] = (0.0, 0.75)
    class_drop_prob: float = 0.1
    enabled: bool = False

    def __post_init__(self):
        lo, hi = self.t_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"t_range must be a sub-interval of [0, 1], got {self.t_range}")

    @property
    def null_weight(self) -> float:
        return 1.0 - self.w - self.kappa


@dataclass
class LossTerms:
    l_fm_prime: float
    l_tfm: float
    l_tc_c: float
    l_mf: float
    l_alpha: float
    c_const: float = field(init=False)

    def __post_init__(self):
        self.c_const = self.l_mf - self.l_tfm - self.l_tc_c


def _frozen(model, target=None):
    if target is not None:
        model = target
    if isinstance(model, ModelParams):
        return as_velocity_fn(model.detached())
    return as_velocity_fn(model)


def _labels(batch: PathBatch):
    return batch.labels


def sq_norm_rows(x):
    """Per-sample squared Euclidean norm of an (n, d) array or tensor."""
    return ad.sum(ad.square(x), axis=1)


def _result(raw):
    return ad.mean(raw), np.array(ad.value(raw))


# ---------------------------------------------------------------------------
# flow matching


def loss_tfm(model, batch: PathBatch):
    """Trajectory flow matching: mean ||u(z_t, r, t) - v||^2 over random r <= t."""
    u = as_velocity_fn(model)(batch.z_t, batch.r, batch.t, _labels(batch))
    return ad.mean(sq_norm_rows(ad.sub(u, batch.v)))


def loss_fm_prime(model, batch: PathBatch):
    """Flow matching on the r = t slice; every sample must be a boundary sample."""
    if not np.all(batch.is_boundary):
        raise ValueError("loss_fm_prime needs a batch with r == t for every sample")
    return loss_tfm(model, batch)


# ---------------------------------------------------------------------------
# MeanFlow and its decomposition


def meanflow_dudt(target_fn, batch: PathBatch, velocity=None):
    """Total derivative du/dt along the path, i.e. the JVP along (v, 0, 1)."""
    v = batch.v if velocity is None else velocity
    labels = _labels(batch)
    return ad.jvp(lambda z, r, t: target_fn(z, r, t, labels),
                  (batch.z_t, batch.r, batch.t), (v, 0.0, 1.0))


def meanflow_target(target_fn, batch: PathBatch, velocity=None) -> np.ndarray:
    v = batch.v if velocity is None else velocity
    _, dudt = meanflow_dudt(target_fn, batch, v)
    return v - (batch.t - batch.r) * dudt


def loss_mf(model, batch: PathBatch, target=None):
    """MeanFlow loss. Returns ``(loss, per-sample squared errors)``."""
    tgt = meanflow_target(_frozen(model, target), batch)
    u = as_velocity_fn(model)(batch.z_t, batch.r, batch.t, _labels(batch))
    return _result(sq_norm_rows(ad.sub(u, tgt)))


def loss_tc_c(model, batch: PathBatch, target=None):
    """Trajectory consistency: mean 2 (t - r) <u, sg(du/dt)>. Can be negative."""
    _, dudt = meanflow_dudt(_frozen(model, target), batch)
    weighted = 2.0 * (batch.t - batch.r) * dudt
    u = as_velocity_fn(model)(batch.z_t, batch.r, batch.t, _labels(batch))
    return ad.mean(ad.sum(ad.mul(u, weighted), axis=1))


# ---------------------------------------------------------------------------
# alpha-Flow family


def alpha_target(target_fn, batch: PathBatch, alpha, v_tilde_mode: str = CONDITIONAL,
                 velocity=None) -> np.ndarray:
    """Bootstrap target alpha * v~ + (1 - alpha) * u(z_s, r, s).

    ``alpha`` may be a scalar or an (n, 1) column. ``velocity`` overrides the
    conditional velocity (used for guided targets).
    """
    z_t, t, r, labels = batch.z_t, batch.t, batch.r, _labels(batch)
    alpha = np.asarray(alpha, dtype=np.float64)
    s = alpha * r + (1.0 - alpha) * t
    if v_tilde_mode == CONDITIONAL:
        v_tilde = batch.v if velocity is None else velocity
    elif v_tilde_mode == BOOTSTRAP:
        v_tilde = ad.value(target_fn(z_t, s, t, labels))
    else:
        raise ValueError(f"unknown v_tilde_mode {v_tilde_mode!r}")
    if np.all(alpha == 1.0):
        return v_tilde.copy()
    z_s = z_t - (t - s) * v_tilde
    return alpha * v_tilde + (1.0 - alpha) * ad.value(target_fn(z_s, r, s, labels))


def loss_alpha(model, batch: PathBatch, config: AlphaLossConfig, target=None):
    """alpha^-1 * mean ||u(z_t, r, t) - target||^2.

    Returns ``(loss, raw)``; ``raw`` holds the unscaled per-sample squared
    errors used by adaptive weighting.
    """
    if not 0.0 < config.alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {config.alpha}")
    tgt = alpha_target(_frozen(model, target), batch, config.alpha, config.v_tilde_mode)
    u = as_velocity_fn(model)(batch.z_t, batch.r, batch.t, _labels(batch))
    raw = sq_norm_rows(ad.sub(u, tgt))
    return ad.scale(ad.mean(raw), 1.0 / config.alpha), np.array(ad.value(raw))


def loss_shortcut(model, batch: PathBatch, target=None):
    """Shortcut self-consistency: one jump t -> r against two half jumps."""
    fn = _frozen(model, target)
    z_t, t, r, labels = batch.z_t, batch.t, batch.r, _labels(batch)
    s = (t + r) / 2
    first = ad.value(fn(z_t, s, t, labels))
    z_s = z_t - (t - s) * first
    second = ad.value(fn(z_s, r, s, labels))
    u = as_velocity_fn(model)(z_t, r, t, labels)
    return ad.mean(sq_norm_rows(ad.sub(u, first / 2 + second / 2)))


# ---------------------------------------------------------------------------
# consistency-training equivalences (z0-parametrisation f(z, t) = z - t u(z, 0, t))


def z0_prediction(fn, z, t, labels=None):
    u = fn(z, 0.0, t, labels)
    return ad.sub(z, ad.mul(t, u))


def ct_discrete_equiv_check(model, batch: PathBatch, delta_t) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample alpha-loss with alpha = dt / t next to the discrete CT form.

    Returns ``(lhs, rhs)`` with rhs = ||f(z_t, t) - f^-(z_t - dt v, t - dt)||^2 / (t dt).
    """
    if np.any(batch.r != 0):
        raise ValueError("the discrete consistency check needs r = 0")
    delta_t = np.broadcast_to(np.asarray(delta_t, dtype=np.float64).reshape(-1, 1), batch.t.shape)
    if np.any(delta_t <= 0) or np.any(delta_t > batch.t):
        raise ValueError("need 0 < delta_t <= t")
    live = as_velocity_fn(model)
    frozen = _frozen(model)
    alpha = delta_t / batch.t
    tgt = alpha_target(frozen, batch, alpha, CONDITIONAL)
    u = ad.value(live(batch.z_t, batch.r, batch.t, _labels(batch)))
    lhs = np.sum((u - tgt) ** 2, axis=1) / alpha.ravel()

    z_t, t, v = batch.z_t, batch.t, batch.v
    s = t - delta_t
    z_s = z_t - delta_t * v
    f_live = ad.value(z0_prediction(live, z_t, t, _labels(batch)))
    f_frozen = ad.value(z0_prediction(frozen, z_s, s, _labels(batch)))
    rhs = np.sum((f_live - f_frozen) ** 2, axis=1) / (t * delta_t).ravel()
    return lhs, rhs


def loss_ct_continuous(model, batch: PathBatch, target=None):
    """1/t-weighted continuous consistency loss mean (2/t) <f(z_t, t), sg(df^-/dt)>."""
    if np.any(batch.r != 0):
        raise ValueError("the continuous consistency form needs r = 0")
    frozen = _frozen(model, target)
    labels = _labels(batch)
    _, dfdt = ad.jvp(lambda z, t: z0_prediction(frozen, z, t, labels),
                     (batch.z_t, batch.t), (batch.v, 1.0))
    f = z0_prediction(as_velocity_fn(model), batch.z_t, batch.t, labels)
    return ad.mean(ad.sum(ad.mul(f, (2.0 / batch.t) * dfdt), axis=1))


# ---------------------------------------------------------------------------
# weighting and guidance


def adaptive_weights(raw, alpha: float, c: float = 1e-3, power: float = 1.0) -> np.ndarray:
    """Per-sample weights alpha / (raw + c)^power (numerator 1 when alpha == 0)."""
    if c <= 0:
        raise ValueError("c must be positive")
    raw = np.asarray(ad.value(raw))
    num = np.where(np.asarray(alpha) > 0, alpha, 1.0)
    return num / (raw + c) ** power


def adaptive_weighted(raw, alpha: float, c: float = 1e-3, power: float = 1.0):
    """Mean of sg(w) * raw; gradients flow only through ``raw``."""
    return ad.mean(ad.mul(raw, adaptive_weights(raw, alpha, c, power)))


def cfg_target(target_fn, z_t, t, v_cond, labels, config: GuidanceConfig) -> np.ndarray:
    """Guided shift velocity w v + kappa u(z, t, t | c) + (1 - w - kappa) u(z, t, t | null).

    Applied per sample where t lies in ``config.t_range`` and a real class
    label is present; other samples keep ``v_cond``.
    """
    if not config.enabled:
        raise ValueError("guidance is disabled")
    v_cond = np.asarray(v_cond, dtype=np.float64)
    n = v_cond.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (n,))
    lo, hi = config.t_range
    active = ((t[:, 0] >= lo) & (t[:, 0] <= hi) & (labels != NULL_LABEL))
    if not np.any(active):
        return v_cond.copy()
    u_cond = ad.value(target_fn(z_t, t, t, labels))
    u_null = ad.value(target_fn(z_t, t, t, np.full(n, NULL_LABEL)))
    guided = config.w * v_cond + config.kappa * u_cond + config.null_weight * u_null
    return np.where(active[:, None], guided, v_cond)


# ---------------------------------------------------------------------------
# gradients and batch summaries


def taped_params(tape: ad.Tape, params: ModelParams) -> ModelParams:
    return params.map(lambda k, v: tape.watch(k, ad.value(v)))


def loss_value(loss_id: str, model, batch: PathBatch, alpha_config: AlphaLossConfig | None = None,
               target=None):
    """Scalar loss by id, on the tape if ``model`` is taped."""
    if loss_id == "fm_prime":
        return loss_fm_prime(model, batch)
    if loss_id == "tfm":
        return loss_tfm(model, batch)
    if loss_id == "tc_c":
        return loss_tc_c(model, batch, target)
    if loss_id == "mf":
        return loss_mf(model, batch, target)[0]
    if loss_id == "alpha":
        return loss_alpha(model, batch, alpha_config or AlphaLossConfig(), target)[0]
    if loss_id == "shortcut":
        return loss_shortcut(model, batch, target)
    if loss_id == "ct_c":
        return loss_ct_continuous(model, batch, target)
    raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


def grad_of_loss(loss_id: str, params: ModelParams, batch: PathBatch,
                 alpha_config: AlphaLossConfig | None = None, target: ModelParams | None = None
                 ) -> np.ndarray:
    """Flat gradient in ``params.names()`` order (see :class:`ModelParams`)."""
    if target is None:
        target = params.detached()
    tape = ad.Tape()
    live = taped_params(tape, params)
    loss = loss_value(loss_id, live, batch, alpha_config, target)
    grads = ad.backward(tape, loss)
    return np.concatenate([grads[k].ravel() for k in params.names()])


def loss_terms(model, batch: PathBatch, alpha_config: AlphaLossConfig | None = None,
               target=None) -> LossTerms:
    """All decomposition terms on one batch; FM' uses the batch with r set to t."""
    cfg = alpha_config or AlphaLossConfig(alpha=5e-3)
    return LossTerms(
        l_fm_prime=float(loss_fm_prime(model, batch.with_boundary())),
        l_tfm=float(loss_tfm(model, batch)),
        l_tc_c=float(loss_tc_c(model, batch, target)),
        l_mf=float(loss_mf(model, batch, target)[0]),
        l_alpha=float(loss_alpha(model, batch, cfg, target)[0]),
    )

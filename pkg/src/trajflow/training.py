"""Curriculum training loop for trajectory flow models."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .network import (NULL_LABEL, EmaState, ModelConfig, ModelParams, as_velocity_fn, ema_update,
                      init_params, predict_u, save_checkpoint)
from .objectives import (CONDITIONAL, GuidanceConfig, adaptive_weights, alpha_target, cfg_target,
                         meanflow_target, sq_norm_rows, taped_params)
from .paths import DATASETS, NUM_CLASSES, DataStream, PathBatch, sample_t_r_batch
from .schedule import ConstantSchedule, ScheduleConfig, alpha_at

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "alpha", "loss", "frac_fm", "frac_alpha", "frac_mf", "grad_norm")
BRANCH_FM, BRANCH_ALPHA, BRANCH_MF = 0, 1, 2


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    dataset: str = "eight_gaussians"
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 16.0
    ratio_r_eq_t: float = 0.25
    t_loc: float = -0.4
    t_scale: float = 1.0
    schedule: ScheduleConfig | ConstantSchedule = field(
        default_factory=lambda: ScheduleConfig(k_s=5_000, k_e=10_000))
    v_tilde_mode: str = CONDITIONAL
    use_ema_for_target: bool = False
    ema_halflife: float = 6931.0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    adaptive_c: float = 1e-3
    eval_interval: int = 100
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS and self.dataset != "array":
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if not 0.0 <= self.ratio_r_eq_t <= 1.0:
            raise ValueError("ratio_r_eq_t must lie in [0, 1]")
        if self.steps < 0 or self.batch_size <= 0:
            raise ValueError("steps must be >= 0 and batch_size > 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def adam_update(moments: AdamState, grads: dict[str, np.ndarray], lr: float,
                betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                weight_decay: float = 0.0, params: ModelParams | None = None
                ) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam. Returns ``(deltas, new_moments)``; add deltas to params."""
    b1, b2 = betas
    step = moments.step + 1
    m, v, delta = {}, {}, {}
    for k, g in grads.items():
        if weight_decay:
            g = g + weight_decay * params[k]
        m[k] = b1 * moments.m[k] + (1 - b1) * g
        v[k] = b2 * moments.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** step)
        v_hat = v[k] / (1 - b2 ** step)
        delta[k] = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return delta, AdamState(m, v, step)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float
                        ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


@dataclass
class TrainState:
    step: int
    params: ModelParams
    ema: EmaState
    adam: AdamState
    stream: DataStream
    noise_rng: np.random.Generator
    time_rng: np.random.Generator
    label_rng: np.random.Generator


def init_state(config: TrainConfig, X=None, y=None, params: ModelParams | None = None) -> TrainState:
    """Fresh training state. Pass ``X`` (and optionally ``y``) to train on a fixed array."""
    data_rng, noise_rng, time_rng, label_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4))
    if X is not None:
        stream = DataStream(data_rng, X=X, y=y)
    else:
        stream = DataStream(data_rng, name=config.dataset)
    params = params if params is not None else init_params(config.model)
    if params.config.data_dim != stream.dim:
        raise ValueError(f"model data_dim {params.config.data_dim} != data dimension {stream.dim}")
    return TrainState(0, params, EmaState(params.detached(), config.ema_halflife),
                      AdamState.zeros_like(params), stream, noise_rng, time_rng, label_rng)


def _draw_batch(state: TrainState, config: TrainConfig) -> PathBatch:
    n = config.batch_size
    x, labels = state.stream.next(n)
    if state.params.config.num_classes == 0:
        labels = None
    elif labels is None:
        labels = np.full(n, NULL_LABEL)
    elif config.guidance.enabled and config.guidance.class_drop_prob > 0:
        drop = state.label_rng.random(n) < config.guidance.class_drop_prob
        labels = np.where(drop, NULL_LABEL, labels)
    eps = state.noise_rng.standard_normal(x.shape)
    t, r = sample_t_r_batch(state.time_rng, n, config.ratio_r_eq_t, config.t_loc, config.t_scale)
    return PathBatch(x, eps, t, r, labels)


def build_targets(params: ModelParams, target_params: ModelParams, batch: PathBatch, alpha: float,
                  config: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample regression targets, branch ids and adaptive-weight alphas.

    Boundary samples (r == t) regress the shift velocity directly. Other
    samples use the MeanFlow target when ``alpha == 0`` and the alpha-Flow
    bootstrap target otherwise.
    """
    n = len(batch)
    velocity = batch.v
    if config.guidance.enabled and batch.labels is not None:
        # guidance never reads the EMA weights
        velocity = cfg_target(as_velocity_fn(params), batch.z_t, batch.t, batch.v, batch.labels,
                              config.guidance)
    boundary = batch.is_boundary
    target = velocity.copy()
    branch = np.full(n, BRANCH_FM)
    weight_alpha = np.ones((n,))
    rest = ~boundary
    if np.any(rest):
        sub = batch.subset(rest)
        tfn = as_velocity_fn(target_params)
        if alpha == 0.0:
            target[rest] = meanflow_target(tfn, sub, velocity[rest])
            branch[rest] = BRANCH_MF
        else:
            target[rest] = alpha_target(tfn, sub, alpha, config.v_tilde_mode, velocity[rest])
            branch[rest] = BRANCH_ALPHA
            weight_alpha[rest] = alpha
    return target, branch, weight_alpha


def train_step(state: TrainState, config: TrainConfig) -> tuple[TrainState, dict]:
    """One optimisation step; returns the new state and a metrics row."""
    k = state.step
    alpha = alpha_at(config.schedule, k)
    batch = _draw_batch(state, config)
    target_params = state.ema.shadow if config.use_ema_for_target else state.params
    try:
        target, branch, weight_alpha = build_targets(state.params, target_params, batch, alpha, config)
        tape = ad.Tape()
        live = taped_params(tape, state.params)
        u = predict_u(live, batch.z_t, batch.r, batch.t, batch.labels)
        raw = sq_norm_rows(ad.sub(u, target))
        w = adaptive_weights(raw, weight_alpha, config.adaptive_c)
        loss = ad.mean(ad.mul(raw, w))
        grads = ad.backward(tape, loss)
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value at step {k}: {exc}",
                               {"step": k, "alpha": alpha, "params": state.params}) from exc
    grads, norm = clip_by_global_norm(grads, config.grad_clip)
    if not np.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient at step {k}",
                               {"step": k, "alpha": alpha, "params": state.params})
    delta, adam = adam_update(state.adam, grads, config.lr, config.betas,
                              weight_decay=config.weight_decay, params=state.params)
    params = ModelParams(state.params.config,
                         {name: a + delta[name] for name, a in state.params.tensors.items()})
    ema = ema_update(state.ema, params)
    n = len(batch)
    metrics = {
        "step": k,
        "alpha": alpha,
        "loss": float(ad.value(loss)),
        "frac_fm": np.count_nonzero(branch == BRANCH_FM) / n,
        "frac_alpha": np.count_nonzero(branch == BRANCH_ALPHA) / n,
        "frac_mf": np.count_nonzero(branch == BRANCH_MF) / n,
        "grad_norm": norm,
    }
    return replace(state, step=k + 1, params=params, ema=ema, adam=adam), metrics


def format_metrics_row(row: dict) -> list[str]:
    return [str(row["step"])] + [repr(float(row[k])) for k in METRICS_HEADER[1:]]


def run_training(config: TrainConfig, run_dir=None, X=None, y=None,
                 state: TrainState | None = None) -> tuple[TrainState, list[dict]]:
    """Train for ``config.steps`` steps from ``state`` (or a fresh state).

    Every ``eval_interval`` steps a metrics row is logged; with ``run_dir``
    they are written to ``metrics.csv`` and checkpoints to
    ``ckpt_<step>.npz`` every ``checkpoint_interval`` steps plus a final
    ``final.npz``.
    """
    state = state if state is not None else init_state(config, X, y)
    run_dir = Path(run_dir) if run_dir is not None else None
    log: list[dict] = []
    writer = fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    try:
        end = state.step + config.steps
        while state.step < end:
            state, row = train_step(state, config)
            done = state.step
            if config.eval_interval and (done % config.eval_interval == 0 or done == end):
                log.append(row)
                if writer is not None:
                    writer.writerow(format_metrics_row(row))
                logger.info("step %d alpha %.4g loss %.5g", row["step"], row["alpha"], row["loss"])
            if run_dir is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
                write_state_checkpoint(run_dir / f"ckpt_{done:07d}.npz", state, config)
    except TrainingDiverged as exc:
        if run_dir is not None:
            save_checkpoint(run_dir / "diverged.npz", exc.diagnostics["params"],
                            meta={"step": exc.diagnostics["step"], "alpha": exc.diagnostics["alpha"],
                                  "dataset": config.dataset})
        raise
    finally:
        if fh is not None:
            fh.close()
    if run_dir is not None:
        write_state_checkpoint(run_dir / "final.npz", state, config)
    return state, log


def write_state_checkpoint(path, state: TrainState, config: TrainConfig | None = None) -> None:
    """Live weights under ``params``, the EMA shadow under ``ema``."""
    meta = {"step": state.step, "ema_halflife": state.ema.halflife}
    if config is not None:
        meta["dataset"] = config.dataset
    save_checkpoint(path, state.params, extra={"ema": state.ema.shadow}, meta=meta)


def default_model_config(dataset: str, **overrides) -> ModelConfig:
    kw = {"num_classes": NUM_CLASSES.get(dataset, 0)}
    kw.update(overrides)
    return ModelConfig(**kw)

"""scikit-learn style wrapper around training and sampling."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .analysis import energy_distance
from .network import ModelConfig
from .objectives import CONDITIONAL, GuidanceConfig
from .sampling import ODE, SamplerConfig, generate, make_timesteps
from .schedule import ConstantSchedule, ScheduleConfig
from .training import TrainConfig, run_training


class TrajectoryFlowGenerator(BaseEstimator):
    """Few-step generative model trained with the alpha-annealed curriculum.

    ``fit(X, y=None)`` learns to map Gaussian noise onto the rows of ``X``;
    integer ``y`` turns on class conditioning. ``sample`` draws new points
    and ``score`` returns the negative energy distance to held-out data.

    ``alpha`` fixes a constant consistency step ratio instead of the sigmoid
    schedule from ``k_start`` to ``k_end``.
    """

    def __init__(self, steps=20_000, batch_size=128, lr=1e-4, hidden_dims=(256, 256, 256),
                 embed_dim=None, k_start=5_000, k_end=10_000, alpha=None, ratio_r_eq_t=0.25,
                 v_tilde_mode=CONDITIONAL, ema_halflife=6931.0, guidance=False,
                 sample_weights="params", random_state=0):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.k_start = k_start
        self.k_end = k_end
        self.alpha = alpha
        self.ratio_r_eq_t = ratio_r_eq_t
        self.v_tilde_mode = v_tilde_mode
        self.ema_halflife = ema_halflife
        self.guidance = guidance
        self.sample_weights = sample_weights
        self.random_state = random_state

    def _train_config(self, data_dim: int, num_classes: int) -> TrainConfig:
        if self.sample_weights not in ("params", "ema"):
            raise ValueError("sample_weights must be 'params' or 'ema'")
        model_kw = {} if self.embed_dim is None else {"embed_dim": self.embed_dim}
        model = ModelConfig(data_dim=data_dim, hidden_dims=tuple(self.hidden_dims),
                            num_classes=num_classes, seed=self._seed(), **model_kw)
        schedule = (ConstantSchedule(self.alpha) if self.alpha is not None
                    else ScheduleConfig(self.k_start, self.k_end))
        return TrainConfig(dataset="array", model=model, steps=self.steps,
                           batch_size=self.batch_size, lr=self.lr, ratio_r_eq_t=self.ratio_r_eq_t,
                           schedule=schedule, v_tilde_mode=self.v_tilde_mode,
                           ema_halflife=self.ema_halflife,
                           guidance=GuidanceConfig(enabled=bool(self.guidance)),
                           eval_interval=max(1, self.steps // 100) if self.steps else 1,
                           seed=self._seed())

    def _seed(self) -> int:
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        num_classes = 0
        if y is not None:
            y = np.asarray(y)
            if y.shape != (X.shape[0],):
                raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
            self.classes_, y = np.unique(y, return_inverse=True)
            num_classes = len(self.classes_)
        config = self._train_config(X.shape[1], num_classes)
        state, log = run_training(config, X=X, y=y)
        self.params_ = state.params
        self.ema_params_ = state.ema.shadow
        self.training_log_ = log
        self.n_features_in_ = X.shape[1]
        return self

    def _weights(self):
        return self.ema_params_ if self.sample_weights == "ema" else self.params_

    def sample(self, n_samples=1000, nfe=1, mode=ODE, mid=None, labels=None, random_state=None):
        """Draw ``n_samples`` points; returns ``X`` or ``(X, y)`` for a conditional fit.

        ``labels`` takes original class values (or None for uniform classes).
        """
        check_is_fitted(self, "params_")
        seed = self._seed() if random_state is None else int(
            check_random_state(random_state).randint(0, 2**31 - 1))
        classes = getattr(self, "classes_", None)
        if labels is not None and classes is not None:
            labels = np.asarray(labels)
            idx = np.searchsorted(classes, labels)
            if np.any(idx >= len(classes)) or np.any(classes[np.minimum(idx, len(classes) - 1)] != labels):
                raise ValueError("labels must be classes seen during fit")
            labels = idx
        cfg = SamplerConfig(mode=mode, timesteps=make_timesteps(nfe, mid), num_samples=n_samples,
                            labels=labels, seed=seed)
        z, drawn = generate(self._weights(), cfg)
        if classes is None:
            return z
        return z, classes[drawn]

    def score(self, X, y=None):
        """Negative energy distance between ``X`` and an equal number of samples."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = self.sample(len(X))
        samples = out[0] if isinstance(out, tuple) else out
        return -energy_distance(samples, X)

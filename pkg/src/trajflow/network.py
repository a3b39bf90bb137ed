"""Trajectory-conditioned velocity MLP u(z, r, t, c) and its weight averaging."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad

NULL_LABEL = -1


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int = 2
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 2
    num_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if self.embed_dim <= 0 or self.embed_dim % 2:
            raise ValueError("embed_dim must be a positive even integer")
        if self.num_classes < 0 or self.data_dim <= 0:
            raise ValueError("invalid data_dim or num_classes")

    @property
    def input_dim(self) -> int:
        n = self.data_dim + 2 * self.embed_dim
        return n + (self.embed_dim if self.num_classes else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class ModelParams:
    """Named weights of the velocity network.

    ``tensors`` maps names to arrays (or to taped Tensors while computing
    gradients). The name order is fixed by :func:`init_params` and defines
    the layout of :meth:`flat`: ``layer0.weight, layer0.bias, ...,
    out.weight, out.bias`` then ``class_embed`` when conditional.
    """

    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def map(self, fn: Callable) -> "ModelParams":
        return ModelParams(self.config, {k: fn(k, v) for k, v in self.tensors.items()})

    def detached(self) -> "ModelParams":
        return self.map(lambda k, v: np.array(ad.value(v), dtype=np.float64))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(ad.value(v)) for v in self.tensors.values()])

    def from_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = {}, 0
        for k, v in self.tensors.items():
            shape = np.shape(ad.value(v))
            n = int(np.prod(shape))
            out[k] = vec[i:i + n].reshape(shape).copy()
            i += n
        if i != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, params need {i}")
        return ModelParams(self.config, out)

    @property
    def size(self) -> int:
        return int(sum(np.size(ad.value(v)) for v in self.tensors.values()))


def init_params(config: ModelConfig) -> ModelParams:
    """Random hidden layers (variance 1/fan_in), zero output layer."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    fan_in = config.input_dim
    for i, width in enumerate(config.hidden_dims):
        tensors[f"layer{i}.weight"] = rng.standard_normal((fan_in, width)) / np.sqrt(fan_in)
        tensors[f"layer{i}.bias"] = np.zeros(width)
        fan_in = width
    tensors["out.weight"] = np.zeros((fan_in, config.data_dim))
    tensors["out.bias"] = np.zeros(config.data_dim)
    if config.num_classes:
        # last row is the null class
        tensors["class_embed"] = rng.standard_normal((config.num_classes + 1, config.embed_dim))
    return ModelParams(config, tensors)


def fourier_features(s, embed_dim: int):
    """[sin(2^k pi s), cos(2^k pi s)] for k < embed_dim / 2; ``s`` has shape (n, 1)."""
    freqs = (np.pi * 2.0 ** np.arange(embed_dim // 2)).reshape(1, -1)
    phase = ad.matmul(s, freqs)
    return ad.concat([ad.sin(phase), ad.cos(phase)], axis=-1)


def _column(s, n: int):
    if isinstance(s, (ad.Tensor, ad.DualTensor)):
        if s.shape != (n, 1):
            raise ValueError(f"time input must have shape ({n}, 1), got {s.shape}")
        return s
    return np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(-1, 1), (n, 1)).copy()


def one_hot_labels(labels, num_classes: int, n: int) -> np.ndarray:
    if labels is None:
        idx = np.full(n, num_classes)
    else:
        idx = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (n,)).copy()
        if np.any(idx >= num_classes) or np.any(idx < NULL_LABEL):
            raise ValueError(f"labels must lie in [0, {num_classes}) or be {NULL_LABEL} (null)")
        idx[idx == NULL_LABEL] = num_classes
    out = np.zeros((n, num_classes + 1))
    out[np.arange(n), idx] = 1.0
    return out


def predict_u(params: ModelParams, z, r, t, labels=None):
    """Average velocity u(z, r, t | label) for a batch.

    ``z`` is (n, d); ``r`` and ``t`` are scalars or (n, 1) columns. Any input
    or parameter may be a taped Tensor or a DualTensor. ``labels=None`` (or
    entries equal to ``NULL_LABEL``) selects the null class.
    """
    cfg = params.config
    if isinstance(z, (ad.Tensor, ad.DualTensor)):
        n = z.shape[0]
    else:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = z.shape[0]
    if z.shape[1] != cfg.data_dim:
        raise ValueError(f"z has dimension {z.shape[1]}, model expects {cfg.data_dim}")
    r, t = _column(r, n), _column(t, n)
    parts = [z, fourier_features(t, cfg.embed_dim), fourier_features(r, cfg.embed_dim)]
    if cfg.num_classes:
        parts.append(ad.matmul(one_hot_labels(labels, cfg.num_classes, n), params["class_embed"]))
    elif labels is not None and np.any(np.asarray(labels) != NULL_LABEL):
        raise ValueError("unconditional model got class labels")
    h = ad.concat(parts, axis=-1)
    for i in range(len(cfg.hidden_dims)):
        h = ad.silu(ad.add_bias(ad.matmul(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"]))
    return ad.add_bias(ad.matmul(h, params["out.weight"]), params["out.bias"])


def as_velocity_fn(model) -> Callable:
    """Normalise a ModelParams or a plain callable to ``fn(z, r, t, labels)``."""
    if isinstance(model, ModelParams):
        return lambda z, r, t, labels=None: predict_u(model, z, r, t, labels)
    if callable(model):
        return model
    raise TypeError(f"expected ModelParams or a callable, got {type(model).__name__}")


@dataclass
class EmaState:
    shadow: ModelParams
    halflife: float = 6931.0

    @property
    def decay(self) -> float:
        return ema_decay(self.halflife)


def ema_decay(halflife: float) -> float:
    return 2.0 ** (-1.0 / halflife)


def ema_update(state: EmaState, params: ModelParams) -> EmaState:
    d = state.decay
    if state.shadow.names() != params.names():
        raise ValueError("EMA shadow and params have different tensors")
    new = {}
    for k, s in state.shadow.tensors.items():
        p = ad.value(params[k])
        if p.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {s.shape} vs {p.shape}")
        new[k] = d * s + (1.0 - d) * p
    return EmaState(ModelParams(state.shadow.config, new), state.halflife)


def save_checkpoint(path, params: ModelParams, extra: dict[str, ModelParams] | None = None,
                    meta: dict | None = None) -> None:
    """Write named float64 arrays plus the model config to an ``.npz`` file.

    ``extra`` stores additional parameter sets (e.g. the EMA shadow) under a
    ``<prefix>/`` namespace.
    """
    arrays = {f"params/{k}": np.asarray(ad.value(v)) for k, v in params.tensors.items()}
    for prefix, p in (extra or {}).items():
        arrays.update({f"{prefix}/{k}": np.asarray(ad.value(v)) for k, v in p.tensors.items()})
    header = {"config": params.config.to_dict(), "meta": meta or {},
              "order": params.names()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, which: str = "params") -> tuple[ModelParams, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        config = ModelConfig(**header["config"])
        if not any(k.startswith(f"{which}/") for k in data.files):
            raise KeyError(f"checkpoint has no parameter set {which!r}")
        tensors = {k: np.array(data[f"{which}/{k}"]) for k in header["order"]}
    return ModelParams(config, tensors), header["meta"]

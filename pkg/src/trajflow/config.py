"""Flat ``key = value`` run configuration with a fixed, typed schema.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Keys may be dotted (``schedule.k_s``) but there is no nesting syntax.
Unknown keys, repeated keys and malformed values are rejected with the
offending line number.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .network import ModelConfig
from .objectives import BOOTSTRAP, CONDITIONAL, GuidanceConfig
from .paths import DATASETS, NUM_CLASSES
from .schedule import ConstantSchedule, ScheduleConfig
from .training import TrainConfig

FILE_DATASET = "file"


class ConfigError(ValueError):
    """Bad configuration input; ``line`` is 1-based or None for overrides."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.key = key
        self.line = line


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _parse_auto_int(text: str):
    return "auto" if text == "auto" else int(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Field:
    parse: object
    default: object
    choices: tuple = ()
    help: str = ""


_DEFAULT_MODEL = ModelConfig()

SCHEMA: dict[str, Field] = {
    "run_dir": Field(str, "run", help="output directory"),
    "dataset": Field(str, "eight_gaussians", DATASETS + (FILE_DATASET,)),
    "data.path": Field(str, "", help="points CSV when dataset = file"),
    "steps": Field(int, 20_000),
    "batch_size": Field(int, 128),
    "lr": Field(float, 1e-4),
    "adam.beta1": Field(float, 0.9),
    "adam.beta2": Field(float, 0.95),
    "weight_decay": Field(float, 0.0),
    "grad_clip": Field(float, 16.0),
    "ratio_r_eq_t": Field(float, 0.25),
    "t_loc": Field(float, -0.4),
    "t_scale": Field(float, 1.0),
    "schedule.kind": Field(str, "sigmoid", ("sigmoid", "constant")),
    "schedule.k_s": Field(float, 5_000.0),
    "schedule.k_e": Field(float, 10_000.0),
    "schedule.gamma": Field(float, 25.0),
    "schedule.eta": Field(float, 5e-3),
    "schedule.alpha": Field(float, 0.0, help="used when schedule.kind = constant"),
    "v_tilde_mode": Field(str, CONDITIONAL, (CONDITIONAL, BOOTSTRAP)),
    "use_ema_for_target": Field(_parse_bool, False),
    "ema_halflife": Field(float, 6931.0),
    "adaptive_c": Field(float, 1e-3),
    "guidance.enabled": Field(_parse_bool, False),
    "guidance.w": Field(float, 0.2),
    "guidance.kappa": Field(float, 0.92),
    "guidance.t_min": Field(float, 0.0),
    "guidance.t_max": Field(float, 0.75),
    "guidance.class_drop_prob": Field(float, 0.1),
    "model.hidden_dims": Field(_parse_ints, _DEFAULT_MODEL.hidden_dims),
    "model.embed_dim": Field(int, _DEFAULT_MODEL.embed_dim),
    "model.num_classes": Field(_parse_auto_int, "auto", help="'auto' follows the dataset"),
    "model.seed": Field(int, 0),
    "eval_interval": Field(int, 100),
    "checkpoint_interval": Field(int, 0),
    "seed": Field(int, 0),
}


def parse_value(key: str, text: str, line: int | None = None):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}", key, line)
    spec = SCHEMA[key]
    try:
        value = spec.parse(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", key, line) from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key!r} must be one of {', '.join(spec.choices)}; got {text!r}", key, line)
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: f.default for k, f in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Overrides are raw strings, typed like file values."""
        values = dict(self.values)
        for key, text in overrides.items():
            values[key] = parse_value(key, str(text))
        return RunConfig(values)

    def to_text(self) -> str:
        """Resolved snapshot; parsing it back yields an equal config."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    def num_classes(self) -> int:
        n = self.values["model.num_classes"]
        if n == "auto":
            return NUM_CLASSES.get(self.values["dataset"], 0)
        return n

    def to_train_config(self) -> TrainConfig:
        v = self.values
        try:
            if v["schedule.kind"] == "constant":
                schedule = ConstantSchedule(v["schedule.alpha"])
            else:
                schedule = ScheduleConfig(v["schedule.k_s"], v["schedule.k_e"],
                                          v["schedule.gamma"], v["schedule.eta"])
            model = ModelConfig(data_dim=2, hidden_dims=v["model.hidden_dims"],
                                embed_dim=v["model.embed_dim"], num_classes=self.num_classes(),
                                seed=v["model.seed"])
            guidance = GuidanceConfig(w=v["guidance.w"], kappa=v["guidance.kappa"],
                                      t_range=(v["guidance.t_min"], v["guidance.t_max"]),
                                      class_drop_prob=v["guidance.class_drop_prob"],
                                      enabled=v["guidance.enabled"])
            return TrainConfig(
                dataset="array" if v["dataset"] == FILE_DATASET else v["dataset"],
                model=model, steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"],
                betas=(v["adam.beta1"], v["adam.beta2"]), weight_decay=v["weight_decay"],
                grad_clip=v["grad_clip"], ratio_r_eq_t=v["ratio_r_eq_t"], t_loc=v["t_loc"],
                t_scale=v["t_scale"], schedule=schedule, v_tilde_mode=v["v_tilde_mode"],
                use_ema_for_target=v["use_ema_for_target"], ema_halflife=v["ema_halflife"],
                guidance=guidance, adaptive_c=v["adaptive_c"], eval_interval=v["eval_interval"],
                checkpoint_interval=v["checkpoint_interval"], seed=v["seed"])
        except ValueError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None


def parse_config_text(text: str) -> RunConfig:
    values = {k: f.default for k, f in SCHEMA.items()}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", None, lineno)
        key, text_value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"key {key!r} repeats line {seen[key]}", key, lineno)
        values[key] = parse_value(key, text_value, lineno)
        seen[key] = lineno
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)

"""Run configuration: flat key-value text with dotted sections.

The format accepts either ``[section]`` headers or fully dotted keys::

    [run]
    engine = mebqat
    seed = 7

    tasks.weight_bits = [1, 2, 4, 8, FP]

Values are parsed as JSON where possible; bare words fall back to
strings, and list entries may be unquoted. The resolved configuration
(every default filled in) is echoed next to the run outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Any, Optional

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config"]

ENGINES = ("qat", "mebqat", "mebqat-maml", "mebqat-pn")
MODEL_KINDS = ("conv4-pn", "conv5-maml", "conv8", "conv8-reduced")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        pass
    # unquoted list entries (quote entries that contain commas)
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part) for part in inner.split(",")]
    return raw


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse to a flat ``section.key -> value`` mapping."""
    values: dict[str, Any] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        full = f"{section}.{key}" if section and "." not in key else key
        values[full] = _parse_value(raw)
    return values


@dataclass
class RunConfig:
    """Validated, fully resolved settings for one run."""

    engine: str = "mebqat"
    seed: int = 0
    out_dir: str = "runs/out"

    model_kind: str = ""  # resolved per engine when empty
    model_width: int = 0  # classes / embedding channels; resolved from data
    input_channels: int = 1
    input_size: int = 0  # resolved from data

    data_source: str = "synthetic"  # synthetic | idx
    data_classes: int = 10
    samples_per_class: int = 256
    test_samples_per_class: int = 64
    image_size: int = 28
    holdout_classes: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    weight_bits: tuple = ("FP",)
    activation_bits: tuple = ()
    minor_weight_bits: tuple = ()
    task_pairs: tuple = ()
    fix_first_fp: bool = True

    epochs: int = 10
    branches: int = 4
    batch_size: int = 64
    kd: bool = True
    qat_task: str = "FP,FP"

    ways: int = 5
    shots: int = 1
    query_shots: int = 0  # 0 resolves to 15 for pn, 5 for maml

    inner_steps: int = 5
    inner_lr: float = 0.1
    meta_test_steps: int = 5

    optimizer_kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0

    schedule_kind: str = "constant"
    milestones: tuple = ()
    decay_factor: float = 0.1
    t_max: int = 0  # 0 resolves to epochs

    eval_tasks: tuple = ("FP,FP",)
    eval_episodes: int = 600
    eval_batch_size: int = 256

    wall_clock: bool = False
    log_every: int = 1


# flat config key -> (RunConfig attribute, type)
_KEYMAP: dict[str, tuple[str, type]] = {
    "run.engine": ("engine", str),
    "run.seed": ("seed", int),
    "run.out_dir": ("out_dir", str),
    "model.kind": ("model_kind", str),
    "model.width": ("model_width", int),
    "model.input_channels": ("input_channels", int),
    "model.input_size": ("input_size", int),
    "data.source": ("data_source", str),
    "data.classes": ("data_classes", int),
    "data.samples_per_class": ("samples_per_class", int),
    "data.test_samples_per_class": ("test_samples_per_class", int),
    "data.image_size": ("image_size", int),
    "data.holdout_classes": ("holdout_classes", int),
    "data.train_images": ("train_images", str),
    "data.train_labels": ("train_labels", str),
    "data.test_images": ("test_images", str),
    "data.test_labels": ("test_labels", str),
    "tasks.weight_bits": ("weight_bits", tuple),
    "tasks.activation_bits": ("activation_bits", tuple),
    "tasks.minor_weight_bits": ("minor_weight_bits", tuple),
    "tasks.pairs": ("task_pairs", tuple),
    "tasks.fix_first_fp": ("fix_first_fp", bool),
    "train.epochs": ("epochs", int),
    "train.branches": ("branches", int),
    "train.batch_size": ("batch_size", int),
    "train.kd": ("kd", bool),
    "train.task": ("qat_task", str),
    "episode.ways": ("ways", int),
    "episode.shots": ("shots", int),
    "episode.query_shots": ("query_shots", int),
    "inner.steps": ("inner_steps", int),
    "inner.lr": ("inner_lr", float),
    "inner.meta_test_steps": ("meta_test_steps", int),
    "optimizer.kind": ("optimizer_kind", str),
    "optimizer.lr": ("lr", float),
    "optimizer.weight_decay": ("weight_decay", float),
    "schedule.kind": ("schedule_kind", str),
    "schedule.milestones": ("milestones", tuple),
    "schedule.factor": ("decay_factor", float),
    "schedule.t_max": ("t_max", int),
    "eval.tasks": ("eval_tasks", tuple),
    "eval.episodes": ("eval_episodes", int),
    "eval.batch_size": ("eval_batch_size", int),
    "telemetry.wall_clock": ("wall_clock", bool),
    "telemetry.log_every": ("log_every", int),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEYMAP.items()}


def _coerce(key: str, value: Any, target: type) -> Any:
    try:
        if target is tuple:
            if isinstance(value, (list, tuple)):
                return tuple(value)
            return (value,)
        if target is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError(value)
        if target is int:
            if isinstance(value, bool) or (
                isinstance(value, float) and not value.is_integer()
            ):
                raise ValueError(value)
            return int(value)
        if target is float:
            return float(value)
        if target is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{key}: expected {target.__name__}, got {value!r}")


def config_from_mapping(values: dict[str, Any]) -> RunConfig:
    cfg = RunConfig()
    for key, value in values.items():
        if key not in _KEYMAP:
            raise ConfigError(f"{key}: unknown configuration key")
        attr, target = _KEYMAP[key]
        setattr(cfg, attr, _coerce(key, value, target))
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_mapping(parse_config_text(f.read()))


def validate_config(cfg: RunConfig) -> None:
    if cfg.engine not in ENGINES:
        raise ConfigError(f"run.engine: must be one of {ENGINES}, got {cfg.engine!r}")
    if cfg.model_kind and cfg.model_kind not in MODEL_KINDS:
        raise ConfigError(
            f"model.kind: must be one of {MODEL_KINDS}, got {cfg.model_kind!r}"
        )
    if cfg.data_source not in ("synthetic", "idx"):
        raise ConfigError(f"data.source: must be synthetic or idx, got {cfg.data_source!r}")
    if cfg.data_source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"data.{key}: required when data.source = idx")
    if cfg.seed < 0:
        raise ConfigError(f"run.seed: must be >= 0, got {cfg.seed}")
    for key, value in (
        ("train.epochs", cfg.epochs),
        ("train.branches", cfg.branches),
        ("train.batch_size", cfg.batch_size),
        ("episode.ways", cfg.ways),
        ("episode.shots", cfg.shots),
        ("inner.steps", cfg.inner_steps),
    ):
        if value < 1:
            raise ConfigError(f"{key}: must be positive, got {value}")
    if not cfg.weight_bits and not cfg.task_pairs:
        raise ConfigError("tasks.weight_bits: must not be empty")
    if cfg.optimizer_kind not in ("sgd", "adam", "adamw"):
        raise ConfigError(f"optimizer.kind: unknown optimizer {cfg.optimizer_kind!r}")
    if cfg.schedule_kind not in ("constant", "step", "cosine"):
        raise ConfigError(f"schedule.kind: unknown schedule {cfg.schedule_kind!r}")
    if cfg.log_every < 1:
        raise ConfigError(f"telemetry.log_every: must be >= 1, got {cfg.log_every}")
    if cfg.engine in ("mebqat-maml", "mebqat-pn") and cfg.holdout_classes < 1:
        raise ConfigError(
            "data.holdout_classes: episodic engines need held-out meta-test classes"
        )


def resolve_defaults(cfg: RunConfig, num_classes: int, image_size: int) -> None:
    """Fill engine- and data-dependent defaults in place."""
    if not cfg.model_kind:
        cfg.model_kind = {
            "qat": "conv8-reduced",
            "mebqat": "conv8-reduced",
            "mebqat-maml": "conv5-maml",
            "mebqat-pn": "conv4-pn",
        }[cfg.engine]
    if cfg.model_width == 0:
        if cfg.engine == "mebqat-pn":
            cfg.model_width = 64
        elif cfg.engine == "mebqat-maml":
            cfg.model_width = cfg.ways
        else:
            cfg.model_width = num_classes
    if cfg.input_size == 0:
        cfg.input_size = image_size
    if cfg.query_shots == 0:
        cfg.query_shots = 15 if cfg.engine == "mebqat-pn" else 5
    if not cfg.activation_bits:
        cfg.activation_bits = cfg.weight_bits
    if cfg.t_max == 0:
        cfg.t_max = max(cfg.epochs, 1)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Serialize every field explicitly, grouped by section, sorted."""
    grouped: dict[str, list[tuple[str, Any]]] = {}
    for f in fields(cfg):
        key = _ATTR_TO_KEY[f.name]
        section, short = key.split(".", 1)
        grouped.setdefault(section, []).append((short, getattr(cfg, f.name)))
    lines = []
    for section in sorted(grouped):
        lines.append(f"[{section}]")
        for short, value in sorted(grouped[section]):
            lines.append(f"{short} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)

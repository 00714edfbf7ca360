"""Run configuration: nested dataclasses with a flat key=value file format.

Config files are plain text, one ``dotted.key = value`` per line, so they
diff cleanly and need no parser beyond the stdlib. Tuples are
comma-separated, booleans are true/false, everything else follows its
dataclass field type. Command-line overrides use the same syntax and are
applied after the file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from .features import MATCH_MODES
from .losses import LossConfig
from .model import ModelConfig


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam with polynomial learning-rate decay lr*(1 - t/T)^exponent."""

    lr: float = 0.001
    poly_exponent: float = 0.9
    batch_size: int = 12
    epochs: int = 30

    def __post_init__(self):
        if self.lr <= 0 or self.poly_exponent <= 0:
            raise ValueError("lr and poly_exponent must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    """Dataset location, synthesis volume and correspondence sampling."""

    dataset_dir: str = "data/synth"
    corpus_dir: str = ""  # empty: built-in synthetic corner scenes
    pair_count: int = 2000
    crop_size: int = 400
    seed: int = 0
    n_points: int = 400
    grid: tuple[int, int] = (40, 40)
    nms_radius: int = 4

    def __post_init__(self):
        if self.pair_count < 0:
            raise ValueError("pair_count must be >= 0")
        if self.crop_size < 32 or self.crop_size % 8:
            raise ValueError("crop_size must be >= 32 and divisible by 8")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")


@dataclass(frozen=True)
class InferenceConfig:
    """Keypoint extraction and matching settings."""

    alpha: float = 0.9
    nms_radius: int = 4
    max_keypoints: int = 2000
    match_mode: str = "plain"

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.max_keypoints < 1 or self.nms_radius < 0:
            raise ValueError("bad extraction limits")
        if self.match_mode not in MATCH_MODES:
            raise ValueError(f"match_mode must be one of {MATCH_MODES}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    inference: InferenceConfig = InferenceConfig()

    @classmethod
    def toy(cls) -> "RunConfig":
        """Desk-scale preset: quarter-width model, small fast dataset.

        n_points is reduced with the image area so that sampled
        correspondences stay concentrated on labeled structure instead of
        empty background.
        """
        return cls(
            model=ModelConfig.toy(),
            optimizer=OptimizerConfig(lr=0.003, batch_size=2, epochs=5),
            data=DataConfig(pair_count=200, crop_size=256, n_points=64),
        )


class UnknownConfigKeyError(KeyError):
    pass


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, target_type):
    origin = typing.get_origin(target_type)
    if origin is tuple:
        args = typing.get_args(target_type)
        parts = [p for p in raw.split(",") if p != ""]
        if len(parts) != len(args):
            raise ValueError(
                f"expected {len(args)} comma-separated values, got {len(parts)}"
            )
        return tuple(_convert(p.strip(), t) for p, t in zip(parts, args))
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    raise ValueError(f"unsupported config field type {target_type}")


def flatten_config(cfg: RunConfig) -> dict[str, str]:
    """All leaves of the config tree as dotted-key -> formatted value."""
    out: dict[str, str] = {}

    def walk(obj, prefix: str):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value):
                walk(value, key + ".")
            else:
                out[key] = _format_value(value)

    walk(cfg, "")
    return out


def _nest(items: dict[str, str]) -> dict:
    """Group flat dotted keys into a nested dict of raw string values."""
    tree: dict = {}
    for dotted, raw in items.items():
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UnknownConfigKeyError(dotted)
        if isinstance(node.get(parts[-1]), dict):
            raise UnknownConfigKeyError(dotted)
        node[parts[-1]] = raw
    return tree


def replace_config(cfg, items: dict[str, str]):
    """Return a copy of cfg with the given dotted keys replaced.

    All keys touching the same dataclass are applied in a single replace,
    so coupled fields (say a descriptor width and its per-branch share)
    can change together without tripping validation halfway through.
    """

    def build(obj, updates: dict, prefix: str):
        names = {f.name for f in dataclasses.fields(obj)}
        hints = typing.get_type_hints(type(obj))
        changes = {}
        for name, value in updates.items():
            if name not in names:
                raise UnknownConfigKeyError(prefix + name)
            child = getattr(obj, name)
            if isinstance(value, dict):
                if not dataclasses.is_dataclass(child):
                    raise UnknownConfigKeyError(prefix + name)
                changes[name] = build(child, value, prefix + name + ".")
            elif dataclasses.is_dataclass(child):
                raise UnknownConfigKeyError(prefix + name)
            else:
                changes[name] = _convert(value, hints[name])
        return dataclasses.replace(obj, **changes)

    return build(cfg, _nest(items), "")


def set_config_value(cfg, dotted_key: str, raw_value: str):
    """Return a copy of cfg with one dotted key replaced (type-checked)."""
    return replace_config(cfg, {dotted_key: raw_value})


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply "dotted.key=value" strings; later entries win on repeats."""
    items: dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        items[key.strip()] = value.strip()
    return replace_config(cfg, items)


def write_config(path: str | Path, cfg: RunConfig):
    """Write the fully resolved config, one key = value per line."""
    lines = [f"{k} = {v}" for k, v in flatten_config(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat config file on top of base (default RunConfig())."""
    cfg = base if base is not None else RunConfig()
    items: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return replace_config(cfg, items)

"""Model configuration and the flat key-value config file format.

Config files are plain text, one ``dotted.key = value`` per line, ``#``
comments allowed. Values are numbers or strings; width lists are
comma-separated ("32,48,64") and branch lists additionally separate
branches with "|" ("32|32,32|32,48,64"). The same file drives the CLI and
the tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError

Branches = tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class ModelConfig:
    """Scalable hyperparameters of the full network.

    The reference preset reproduces the 38/18/8 grid pyramid from a
    10x299x299x3 input; the toy preset (10x64x64x1) is used by CI-grade
    tests. The spatial average-pool window is clamped to the feature grid,
    so small presets degrade gracefully.
    """

    frames: int = 10
    height: int = 299
    width: int = 299
    channels: int = 3
    num_classes: int = 7
    stem_widths: tuple[int, ...] = (32, 48, 64)
    stem_strides: tuple[int, ...] = (2, 2, 2)
    block_a_branches: Branches = ((32,), (32, 32), (32, 48, 64))
    block_a_repeats: int = 1
    reduction_a_branches: Branches = ((96,), (48, 48, 64))
    block_b_branches: Branches = ((64,), (48, 56, 64))
    block_b_repeats: int = 1
    reduction_b_branches: Branches = ((64, 96), (64, 80), (64, 72, 80))
    block_c_branches: Branches = ((96,), (96, 96, 96))
    block_c_repeats: int = 1
    avgpool_window: int = 2
    lstm_hidden: int = 200
    lstm_input_mode: str = "flatten"   # 'flatten' | 'pooled'
    dropout_rate: float = 0.2
    residual_scale: float = 1.0
    mask_window: int = 7
    mask_slope: float = 0.1
    mask_background: float = 0.0
    mask_mode: str = "landmarks"       # 'landmarks' | 'ones'
    dtype: str = "float32"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("input extents must be positive")
        if len(self.stem_widths) != len(self.stem_strides) or not self.stem_widths:
            raise ConfigError("stage stem: widths and strides must align and be non-empty")
        for stage, branches in (("block_a", self.block_a_branches),
                                ("block_b", self.block_b_branches),
                                ("block_c", self.block_c_branches),
                                ("reduction_a", self.reduction_a_branches),
                                ("reduction_b", self.reduction_b_branches)):
            if not branches or any(len(b) == 0 for b in branches):
                raise ConfigError(f"stage {stage}: empty branch specification")
            if any(w < 1 for b in branches for w in b):
                raise ConfigError(f"stage {stage}: widths must be positive")
        if min(self.block_a_repeats, self.block_b_repeats, self.block_c_repeats) < 1:
            raise ConfigError("block repeat counts must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.avgpool_window < 1:
            raise ConfigError("avgpool window must be >= 1")
        if self.lstm_hidden < 1:
            raise ConfigError("lstm hidden size must be >= 1")
        if self.lstm_input_mode not in ("flatten", "pooled"):
            raise ConfigError(f"unknown lstm input mode {self.lstm_input_mode!r}")
        if self.mask_window < 1 or self.mask_window % 2 == 0:
            raise ConfigError(f"mask window must be odd, got {self.mask_window}")
        if not 0.0 <= self.mask_background <= 1.0:
            raise ConfigError("mask background weight must lie in [0, 1]")
        if self.mask_mode not in ("landmarks", "ones"):
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def with_overrides(self, **kwargs) -> "ModelConfig":
        cfg = replace(self, **kwargs)
        cfg.validate()
        return cfg


def _fmt_tuple(v: tuple[int, ...]) -> str:
    return ",".join(str(x) for x in v)


def _parse_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip() != "")


def _fmt_branches(v: Branches) -> str:
    return "|".join(_fmt_tuple(b) for b in v)


def _parse_branches(s: str) -> Branches:
    return tuple(_parse_tuple(b) for b in s.split("|") if b.strip() != "")


_KEYS: dict[str, tuple[str, object, object]] = {
    "input.frames": ("frames", int, str),
    "input.height": ("height", int, str),
    "input.width": ("width", int, str),
    "input.channels": ("channels", int, str),
    "head.num_classes": ("num_classes", int, str),
    "stem.widths": ("stem_widths", _parse_tuple, _fmt_tuple),
    "stem.spatial_strides": ("stem_strides", _parse_tuple, _fmt_tuple),
    "block_a.branches": ("block_a_branches", _parse_branches, _fmt_branches),
    "block_a.repeats": ("block_a_repeats", int, str),
    "reduction_a.branches": ("reduction_a_branches", _parse_branches, _fmt_branches),
    "block_b.branches": ("block_b_branches", _parse_branches, _fmt_branches),
    "block_b.repeats": ("block_b_repeats", int, str),
    "reduction_b.branches": ("reduction_b_branches", _parse_branches, _fmt_branches),
    "block_c.branches": ("block_c_branches", _parse_branches, _fmt_branches),
    "block_c.repeats": ("block_c_repeats", int, str),
    "pool.window": ("avgpool_window", int, str),
    "lstm.hidden": ("lstm_hidden", int, str),
    "lstm.input_mode": ("lstm_input_mode", str, str),
    "dropout.rate": ("dropout_rate", float, repr),
    "residual.scale": ("residual_scale", float, repr),
    "mask.window": ("mask_window", int, str),
    "mask.slope": ("mask_slope", float, repr),
    "mask.background": ("mask_background", float, repr),
    "mask.mode": ("mask_mode", str, str),
    "precision.dtype": ("dtype", str, str),
}

_FIELD_TO_KEY = {f: k for k, (f, _, _) in _KEYS.items()}


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_kv(kv: dict[str, str]) -> ModelConfig:
    values = {}
    for key, raw in kv.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        name, parse, _ = _KEYS[key]
        try:
            values[name] = parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    cfg = ModelConfig(**values)
    cfg.validate()
    return cfg


def config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        key = _FIELD_TO_KEY[f.name]
        _, _, fmt = _KEYS[key]
        out[key] = fmt(getattr(cfg, f.name))
    return out


def canonical_text(cfg: ModelConfig) -> str:
    kv = config_to_kv(cfg)
    return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))


def config_hash(cfg: ModelConfig) -> bytes:
    return hashlib.sha256(canonical_text(cfg).encode()).digest()


def load_config(path_or_preset: str | Path) -> ModelConfig:
    """Load a config file, or one of the shipped presets by bare name."""
    p = Path(path_or_preset)
    if p.suffix == "" and not p.exists():
        return load_preset(str(path_or_preset))
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return config_from_kv(parse_kv(p.read_text()))


def preset_names() -> list[str]:
    pkg = resources.files("fer3d") / "configs"
    return sorted(f.name[:-4] for f in pkg.iterdir() if f.name.endswith(".cfg"))


def load_preset(name: str) -> ModelConfig:
    pkg = resources.files("fer3d") / "configs" / f"{name}.cfg"
    if not pkg.is_file():
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return config_from_kv(parse_kv(pkg.read_text()))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(canonical_text(cfg))

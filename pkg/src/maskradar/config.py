"""Run configuration: one YAML section per subsystem, validated on load."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 2
    num_classes: int = 3
    widths: tuple[int, ...] = (32, 64, 128)
    heads: tuple[int, ...] = (2, 4, 8)
    window: tuple[int, int, int] = (4, 4, 4)
    kernel: tuple[int, int, int] = (9, 5, 5)
    stride: tuple[int, int, int] = (1, 2, 2)
    ffn_ratio: int = 4
    rel_pos_bias: bool = True
    attn_scale: bool = True
    gamma_init: float = 0.5
    beta_init: float = 0.0
    head_prior: float = 0.01  # initial sigmoid output of both heads
    cmam_scale: bool = False
    cmam_share_qk: bool = False
    cmam_max_tokens: int = 65536
    init_seed: int = 0
    precision: str = "float32"

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class ShiftConfig:
    pattern: str = "C"
    cell: tuple[tuple[int, ...], ...] | None = None
    ratio: float = 0.25


@dataclass
class TrainConfig:
    lr: float = 1e-4
    schedule: str = "constant"  # or "cosine": decay to zero at ``steps``
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.4
    reduction: str = "sum"
    steps: int = 1000
    batch_size: int = 1
    checkpoint_every: int = 100
    seed: int = 0


@dataclass
class DetectConfig:
    class_names: tuple[str, ...] = ("pedestrian", "cyclist", "car")
    k_cls: tuple[float, ...] = (0.02, 0.03, 0.05)
    meters_per_bin: float = 0.23
    range_min_m: float = 1.0
    azimuth_fov_deg: float = 120.0
    min_score: float = 0.1
    nms_threshold: float = 0.3
    same_class_nms: bool = False
    ols_start: float = 0.5
    ols_stop: float = 0.9
    ols_step: float = 0.05

    @property
    def thresholds(self) -> tuple[float, ...]:
        n = int(round((self.ols_stop - self.ols_start) / self.ols_step)) + 1
        return tuple(round(self.ols_start + i * self.ols_step, 10) for i in range(n))


@dataclass
class DataConfig:
    n_frames: int = 16
    height: int = 128
    width: int = 128
    n_scenes: int = 8
    difficulty: int = 1
    split: float = 0.75
    seed: int = 0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {f.name: _plain(dataclasses.asdict(getattr(self, f.name))) for f in dataclasses.fields(self)}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    def write(self, directory: str | Path, name: str = "config.resolved.yaml") -> Path:
        path = Path(directory) / name
        path.write_text(self.dump())
        return path


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(value, template, where):
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(template, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if template:
            return tuple(_coerce(v, template[0], f"{where}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    return value


def _section(cls, raw: dict, name: str):
    default = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in raw.items():
        if name == "shift" and key == "cell":
            kwargs[key] = None if value is None else tuple(
                tuple(_coerce(v, 0, f"shift.cell") for v in row) for row in value)
            continue
        kwargs[key] = _coerce(value, getattr(default, key), f"{name}.{key}")
    return dataclasses.replace(default, **kwargs)


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: Config) -> Config:
    m, s, t, d, g = cfg.model, cfg.shift, cfg.train, cfg.detect, cfg.data
    _require(len(m.widths) >= 1 and len(m.widths) == len(m.heads), "model.widths and model.heads need equal, non-zero length")
    for w, h in zip(m.widths, m.heads):
        _require(w > 0 and h > 0 and w % h == 0, f"model: width {w} not divisible by {h} heads")
    _require(m.in_channels > 0 and m.num_classes > 0, "model: channel and class counts must be positive")
    _require(len(m.window) == 3 and min(m.window) > 0, "model.window needs three positive extents")
    _require(len(m.kernel) == 3 and min(m.kernel) > 0, "model.kernel needs three positive extents")
    _require(len(m.stride) == 3 and min(m.stride) > 0 and m.stride[0] == 1,
             "model.stride needs three positive entries with temporal stride 1")
    _require(m.ffn_ratio > 0, "model.ffn_ratio must be positive")
    _require(0.0 <= m.gamma_init <= 1.0, "model.gamma_init must lie in [0, 1]")
    _require(0.0 < m.head_prior < 1.0, "model.head_prior must lie in (0, 1)")
    _require(m.cmam_max_tokens > 0, "model.cmam_max_tokens must be positive")
    _require(m.precision in ("float32", "float64"), "model.precision must be float32 or float64")
    _require(s.pattern in ("A", "B", "C", "none", "custom"), "shift.pattern must be A, B, C, none or custom")
    _require(s.pattern != "custom" or s.cell is not None, "shift.pattern custom requires shift.cell")
    _require(0.0 <= s.ratio <= 1.0, "shift.ratio must lie in [0, 1]")
    _require(t.lr > 0 and 0 <= t.beta1 < 1 and 0 <= t.beta2 < 1 and t.adam_eps > 0, "train: invalid Adam settings")
    _require(t.alpha >= 0, "train.alpha must be non-negative")
    _require(t.schedule in ("constant", "cosine"), "train.schedule must be constant or cosine")
    _require(t.warmup_steps >= 0, "train.warmup_steps must be non-negative")
    _require(t.reduction in ("sum", "mean"), "train.reduction must be sum or mean")
    _require(t.steps >= 0 and t.batch_size >= 1 and t.checkpoint_every >= 1, "train: steps/batch/checkpoint counts invalid")
    _require(len(d.class_names) == m.num_classes == len(d.k_cls), "detect: class_names and k_cls must match model.num_classes")
    _require(all(k > 0 for k in d.k_cls), "detect.k_cls must be positive")
    _require(d.meters_per_bin > 0 and d.range_min_m > 0, "detect: range mapping must be positive")
    _require(0 < d.azimuth_fov_deg <= 360, "detect.azimuth_fov_deg must lie in (0, 360]")
    _require(0.0 <= d.min_score <= 1.0 and 0.0 < d.nms_threshold <= 1.0, "detect: score/nms thresholds out of range")
    _require(0 < d.ols_start <= d.ols_stop <= 1.0 and d.ols_step > 0, "detect: OLS sweep out of range")
    _require(g.n_frames >= 1 and g.height >= 1 and g.width >= 1, "data: extents must be positive")
    _require(g.n_scenes >= 1 and 0 < g.split <= 1.0, "data: scene count / split out of range")
    _require(0 <= g.difficulty <= 3, "data.difficulty must lie in 0..3")
    return cfg


SECTIONS = {"model": ModelConfig, "shift": ShiftConfig, "train": TrainConfig,
            "detect": DetectConfig, "data": DataConfig}


def from_dict(raw: dict[str, Any] | None) -> Config:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name)
        section = {} if section is None else section
        if not isinstance(section, dict):
            raise ConfigError(f"section [{name}] must be a mapping")
        parts[name] = _section(cls, section, name)
    return validate(Config(**parts))


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> Config:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not isinstance(raw.get(section), dict):
            raw[section] = {}
        raw[section][key] = value
    return from_dict(raw)


def toy_config() -> Config:
    """Reduced setting for desk-scale training: 2x8x32x32 input, widths 16/32/64.

    The 32x32 grid is a crop of the full 128x128 map at the same per-bin
    resolution, placed 10 m out so object tolerances span about a bin.
    Training uses a higher rate with warmup and cosine decay to fit the
    2000-step budget at batch size 1.
    """
    return from_dict({
        "model": {"widths": [16, 32, 64], "heads": [2, 4, 8]},
        "data": {"n_frames": 8, "height": 32, "width": 32, "n_scenes": 8, "split": 1.0},
        "detect": {"range_min_m": 10.0, "azimuth_fov_deg": round(31 * 120.0 / 127, 4)},
        "train": {"lr": 4e-3, "schedule": "cosine", "warmup_steps": 100, "steps": 2000},
    })

"""Experiment configuration: strict ``section.key=value`` files and seed fan-out.

Example::

    seed=7
    trajectory.n_spokes=435
    train.steps=20000
    recon.phases=30

Unknown keys and malformed values are errors. Lines starting with ``#``
are comments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .reconstruction import GriddingConfig
from .training import TrainConfig
from .trajectory import TINY_GOLDEN_ANGLE_DEG, CardiacTiming


class ConfigError(ValueError):
    """Invalid configuration file or override."""


def sub_seed(seed: int, label: str) -> int:
    """Independent 64-bit seed for one component, from a labelled hash."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str):
    parts = [float(p) for p in text.split(",")]
    return parts[0] if len(parts) == 1 else tuple(parts)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "nik_out"
    # phantom / acquisition
    phantom_path: str = ""
    n_coils: int = 6
    static: bool = False
    noise_std: float = 0.0
    noise_rel_dc: float = 0.0
    # trajectory / timing
    n_spokes: int = 8960
    n_samples_per_spoke: int = 128
    angle_increment_deg: float = TINY_GOLDEN_ANGLE_DEG
    tr_ms: float = 2.3
    rr_interval_ms: float = 1000.0
    rr_jitter_std_ms: float = 0.0
    heartbeats: int = 0  # 0 keeps every acquired spoke
    # learning
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_seed: int | None = None
    # reconstruction
    grid: int = 64
    phases: int = 30
    xt_row: int | None = None
    use_sensitivities: bool = True
    gridding: GriddingConfig = field(default_factory=GriddingConfig)

    def __post_init__(self):
        if self.heartbeats < 0:
            raise ConfigError("timing.heartbeats must be >= 0")
        if self.phantom_path and not Path(self.phantom_path).is_file():
            raise ConfigError(f"phantom config {self.phantom_path} does not exist")

    @property
    def timing(self) -> CardiacTiming:
        return CardiacTiming(
            rr_interval_ms=self.rr_interval_ms,
            n_heartbeats_used=max(self.heartbeats, 1),
            rr_jitter_std_ms=self.rr_jitter_std_ms,
        )

    def seeds(self) -> dict:
        seeds = {label: sub_seed(self.seed, label) for label in ("phantom-noise", "model-init", "encoder-B", "shuffle")}
        if self.train_seed is not None:
            seeds["shuffle"] = int(self.train_seed)
        return seeds

    def resolved_model(self) -> ModelConfig:
        return replace(self.model, encoder_seed=self.seeds()["encoder-B"])

    def resolved_train(self) -> TrainConfig:
        return replace(self.train, seed=self.seeds()["shuffle"])


_TOP = {"seed": ("seed", int), "out": ("out", str)}

_PLAIN = {
    "phantom.path": ("phantom_path", str),
    "phantom.n_coils": ("n_coils", int),
    "phantom.static": ("static", _bool),
    "acquisition.noise_std": ("noise_std", float),
    "acquisition.noise_rel_dc": ("noise_rel_dc", float),
    "trajectory.n_spokes": ("n_spokes", int),
    "trajectory.n_samples_per_spoke": ("n_samples_per_spoke", int),
    "trajectory.angle_increment_deg": ("angle_increment_deg", float),
    "trajectory.tr_ms": ("tr_ms", float),
    "timing.rr_interval_ms": ("rr_interval_ms", float),
    "timing.rr_jitter_std_ms": ("rr_jitter_std_ms", float),
    "timing.heartbeats": ("heartbeats", int),
    "recon.grid": ("grid", int),
    "recon.phases": ("phases", int),
    "recon.xt_row": ("xt_row", int),
    "recon.sensitivities": ("use_sensitivities", _bool),
}

_MODEL = {
    "model.depth": ("depth", int),
    "model.width": ("width", int),
    "model.n_features": ("n_features", int),
    "model.omega0": ("omega0", float),
    "model.omega_hidden": ("omega_hidden", float),
    "model.feature_scale": ("feature_scale", _floats),
    "model.output_scale": ("output_scale", float),
}

# documented training keys; ``precision`` lives on the model config
_TRAIN = {
    "train.steps": ("steps", int),
    "train.points_per_step": ("points_per_step", int),
    "train.lr": ("lr", float),
    "train.beta1": ("beta1", float),
    "train.beta2": ("beta2", float),
    "train.eps_adam": ("eps_adam", float),
    "train.log_every": ("log_every", int),
}

_LOSS = {
    "train.lambda": ("lam", float),
    "train.eps_hdr": ("eps", float),
    "train.sigma": ("sigma", float),
    "train.kernel_exponent": ("kernel_exponent", int),
    "train.detach_weight": ("detach_weight", _bool),
}

_GRIDDING = {
    "gridding.oversampling": ("oversampling", float),
    "gridding.width": ("width", int),
    "gridding.beta": ("beta", float),
}

TRAINING_KEYS = sorted(k.split(".", 1)[1] for k in (*_TRAIN, *_LOSS)) + ["precision", "seed"]
KNOWN_KEYS = sorted({*_TOP, *_PLAIN, *_MODEL, *_TRAIN, *_LOSS, *_GRIDDING, "train.seed", "train.precision"})


def parse_lines(lines, source: str = "<config>") -> dict:
    """``key=value`` lines to a dict; duplicate keys are errors."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(items: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply parsed ``items`` on top of ``base`` (defaults when omitted)."""
    cfg = base or ExperimentConfig()
    top, model, train, loss, grid = {}, {}, {}, {}, {}
    for key, text in items.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        try:
            if key in _TOP or key in _PLAIN:
                name, conv = {**_TOP, **_PLAIN}[key]
                top[name] = conv(text)
            elif key in _MODEL:
                name, conv = _MODEL[key]
                model[name] = conv(text)
            elif key == "train.precision":
                model["precision"] = text
            elif key == "train.seed":
                top["train_seed"] = int(text)
            elif key in _TRAIN:
                name, conv = _TRAIN[key]
                train[name] = conv(text)
            elif key in _LOSS:
                name, conv = _LOSS[key]
                loss[name] = conv(text)
            else:
                name, conv = _GRIDDING[key]
                grid[name] = conv(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    try:
        model_cfg = replace(cfg.model, **model)
        loss_cfg = replace(cfg.train.loss, **loss)
        train_cfg = replace(cfg.train, loss=loss_cfg, **train)
        grid_cfg = replace(cfg.gridding, **grid)
        return replace(cfg, model=model_cfg, train=train_cfg, gridding=grid_cfg, **top)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    items = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        items = parse_lines(path.read_text().splitlines(), str(path))
    for key, value in (overrides or {}).items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        items[key] = str(value)
    return build_config(items)


def dump_config(cfg: ExperimentConfig, include_out: bool = True) -> str:
    """Round-trippable ``key=value`` text for ``cfg``."""
    lines = [f"seed={cfg.seed}"] + ([f"out={cfg.out}"] if include_out else [])
    for key, (name, conv) in _PLAIN.items():
        value = getattr(cfg, name)
        if value is None or (key == "phantom.path" and not value):
            continue
        lines.append(f"{key}={_fmt(value)}")
    for key, (name, _) in _MODEL.items():
        lines.append(f"{key}={_fmt(getattr(cfg.model, name))}")
    lines.append(f"train.precision={cfg.model.precision}")
    if cfg.train_seed is not None:
        lines.append(f"train.seed={cfg.train_seed}")
    for key, (name, _) in _TRAIN.items():
        lines.append(f"{key}={_fmt(getattr(cfg.train, name))}")
    for key, (name, _) in _LOSS.items():
        lines.append(f"{key}={_fmt(getattr(cfg.train.loss, name))}")
    for key, (name, _) in _GRIDDING.items():
        value = getattr(cfg.gridding, name)
        if value is not None:
            lines.append(f"{key}={_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)

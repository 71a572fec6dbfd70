"""Run configuration: parsing, validation, canonical serialization.

The on-disk form is line-oriented ``key = value`` text with ``#`` comments.
Parsing is strict: unknown keys, malformed values, and out-of-bound numbers
are errors that name the offending line. ``to_text()`` emits a canonical
sorted form so that identical configurations serialize identically inside
checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import Architecture

ENV_SEED = "SC_SEED"


@dataclass
class RunConfig:
    # Geometry
    height: int = 64
    width: int = 64
    channels: int = 1
    patch: int = 8
    # Model
    d: int = 64
    n_blocks: int = 2
    mlp_hidden: int = 128
    saliency_hidden: tuple[int, int] = (512, 256)
    saliency_input: str = "embedded"
    d_z: int = 32
    n_classes: int = 2
    # Sparsity and losses
    rho: float = 0.3
    tau: float = 0.1
    lam: float = 0.5
    theta: float | None = None  # None means the uniform level 1/L
    t_ind: float = 0.05
    bias_mode: str = "saliency"
    # Training
    alt_period: int = 1
    reuse_cache: bool = True
    static_sparse: bool = False
    batch: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    seed: int = 0
    precision: str = "single"
    log_every: int = 100
    # Augmentation
    flip_prob: float = 0.5
    noise_std: float = 0.04
    jitter: float = 0.05
    crop_min: float = 0.9
    crop_max: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.t_ind <= 0:
            raise ConfigError(f"t_ind must be positive, got {self.t_ind}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.theta is not None and not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if self.bias_mode not in ("none", "saliency"):
            raise ConfigError(f"bias_mode must be none|saliency, got {self.bias_mode!r}")
        if self.saliency_input not in ("raw", "embedded"):
            raise ConfigError(f"saliency_input must be raw|embedded, got {self.saliency_input!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single|double, got {self.precision!r}")
        if self.alt_period < 0:
            raise ConfigError(f"alt_period must be >= 0, got {self.alt_period}")
        if self.batch < 1 or self.steps < 0:
            raise ConfigError("batch must be >= 1 and steps >= 0")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ConfigError(f"need 0 < crop_min <= crop_max <= 1, got "
                              f"({self.crop_min}, {self.crop_max})")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def theta_value(self) -> float:
        return self.theta if self.theta is not None else 1.0 / self.n_patches

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def arch(self) -> Architecture:
        return Architecture(
            height=self.height, width=self.width, channels=self.channels,
            patch=self.patch, d=self.d, n_blocks=self.n_blocks,
            mlp_hidden=self.mlp_hidden, sal_hidden=self.saliency_hidden,
            saliency_input=self.saliency_input, d_z=self.d_z,
            n_classes=self.n_classes)

    def to_text(self) -> str:
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{_FIELD_TO_KEY[f.name]} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_FIELD_TO_KEY = {f.name: ("lambda" if f.name == "lam" else f.name)
                 for f in dataclasses.fields(RunConfig)}
_KEY_TO_FIELD = {v: k for k, v in _FIELD_TO_KEY.items()}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(field: dataclasses.Field, raw: str, lineno: int):
    kind = field.type
    try:
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw == "auto" else float(raw)
        if kind == "tuple[int, int]":
            parts = tuple(int(x) for x in raw.split(","))
            if len(parts) != 2:
                raise ValueError("expected two comma-separated integers")
            return parts
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for '{_FIELD_TO_KEY[field.name]}': {exc}") from None


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines into a validated RunConfig.

    ``env`` (typically os.environ) may supply SC_SEED to override the seed;
    setting the seed both there and in the text is an error.
    """
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    explicit: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        fname = _KEY_TO_FIELD[key]
        if fname in explicit:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[fname] = _parse_value(fields[fname], raw, lineno)
        explicit.add(fname)
    if env and ENV_SEED in env:
        if "seed" in explicit:
            raise ConfigError(
                f"seed set both in config and {ENV_SEED}; remove one")
        values["seed"] = _parse_int_env(env[ENV_SEED])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _parse_int_env(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_SEED} must be an integer, got {raw!r}") from None

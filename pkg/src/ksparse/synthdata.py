"""Synthetic localized-anomaly images and their on-disk format.

Each image is a smooth low-frequency background plus sensor noise; label-1
images additionally contain one bright blob with a flat core and Gaussian
falloff at a continuous (patch-unaligned) position. The anomaly mask lists
every patch containing a pixel where the blob profile reaches at least half
its peak; that geometric rule keeps masks well-defined even when the
amplitude is zeroed for control experiments.

Dataset file layout (all little-endian), documented here and in the README:

    magic   4 bytes  b"SCDS"
    version u16      1
    header  n u32, H u16, W u16, C u16, P u16, L u32
    sample  label u8
            mask_len u16, mask u16 * mask_len (sorted patch indices)
            pixels f32 * H*W*C (row-major, channel-last)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FileFormatError

MAGIC = b"SCDS"
VERSION = 1

# Blob profile: flat core of the drawn radius, then a Gaussian skirt.
SKIRT_SIGMA = 2.5
# Anomaly pixels are the blob core: profile at least this fraction of peak.
CORE_CUTOFF = 0.9
# How far past the core radius the anomaly/core region extends.
CORE_REACH = SKIRT_SIGMA * np.sqrt(2.0 * np.log(1.0 / CORE_CUTOFF))
# Centering margin keeps the half-peak disk inside the image.
BOUNDS_REACH = SKIRT_SIGMA * np.sqrt(2.0 * np.log(2.0))


@dataclass
class SynthSpec:
    """Everything that determines a generated dataset, including the seed."""

    n_images: int = 512
    height: int = 64
    width: int = 64
    channels: int = 1
    patch: int = 8
    amplitude: float = 0.6
    amplitude_jitter: float = 0.3
    radius_range: tuple[float, float] = (6.0, 8.5)
    max_footprint: int = 16
    background_level: float = 0.2
    background_amp: float = 0.03
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("image dims must be divisible by the patch size")
        if self.channels != 1:
            raise ConfigError("only single-channel synthetic images are supported")
        if self.radius_range[0] > self.radius_range[1] or self.radius_range[0] <= 0:
            raise ConfigError(f"bad radius_range {self.radius_range}")
        if not 0.0 <= self.amplitude_jitter < 1.0:
            raise ConfigError(f"amplitude_jitter must be in [0, 1), got {self.amplitude_jitter}")
        if 2 * (self.radius_range[1] + BOUNDS_REACH) > min(self.height, self.width):
            raise ConfigError(
                f"anomaly radius {self.radius_range[1]} exceeds image bounds "
                f"{self.height}x{self.width}")
        # Worst-case patch span of the anomaly core along one axis.
        span = int(2 * (self.radius_range[1] + CORE_REACH) // self.patch) + 2
        if span * span > self.max_footprint:
            raise ConfigError(
                f"radius_range allows a {span}x{span}-patch footprint, above "
                f"max_footprint={self.max_footprint}")
        if self.max_footprint > int(0.3 * self.n_patches):
            raise ConfigError(
                f"max_footprint {self.max_footprint} exceeds the default top-K "
                f"budget floor(0.3*L)={int(0.3 * self.n_patches)}")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


@dataclass
class SynthSample:
    image: np.ndarray
    label: int
    anomaly_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def validate(self, spec_or_L) -> None:
        L = spec_or_L.n_patches if isinstance(spec_or_L, SynthSpec) else int(spec_or_L)
        if (self.label == 1) != (self.anomaly_mask.size > 0):
            raise FileFormatError("label/mask mismatch: label=1 iff mask non-empty")
        if self.anomaly_mask.size and (self.anomaly_mask.min() < 0 or self.anomaly_mask.max() >= L):
            raise FileFormatError("anomaly mask index out of range")


_SPEC_FIELDS = {
    "n_images": int, "height": int, "width": int, "channels": int, "patch": int,
    "amplitude": float, "amplitude_jitter": float, "radius_min": float, "radius_max": float,
    "max_footprint": int, "background_level": float, "background_amp": float,
    "noise_std": float, "seed": int,
}


def parse_synth_spec(text: str) -> SynthSpec:
    """Parse ``key = value`` lines into a SynthSpec (strict keys)."""
    values: dict = {}
    radius = dict(radius_min=None, radius_max=None)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _SPEC_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        try:
            value = _SPEC_FIELDS[key](raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {raw!r}") from None
        if key in radius:
            radius[key] = value
        else:
            values[key] = value
    default_range = SynthSpec.__dataclass_fields__["radius_range"].default
    lo = radius["radius_min"] if radius["radius_min"] is not None else default_range[0]
    hi = radius["radius_max"] if radius["radius_max"] is not None else default_range[1]
    return SynthSpec(radius_range=(lo, hi), **values)


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    img = np.full((spec.height, spec.width), spec.background_level, dtype=np.float64)
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase_y, phase_x = rng.uniform(0, 2 * np.pi, size=2)
        img += (spec.background_amp / 3.0) * (
            np.cos(2 * np.pi * fy * yy / spec.height + phase_y)
            * np.cos(2 * np.pi * fx * xx / spec.width + phase_x))
    img += rng.normal(0.0, spec.noise_std, size=img.shape)
    return img


def _blob_profile(spec: SynthSpec, rng: np.random.Generator):
    """Draw a blob; return its unit-peak profile and the core-patch mask."""
    radius = rng.uniform(*spec.radius_range)
    reach = radius + BOUNDS_REACH
    cy = rng.uniform(reach, spec.height - reach)
    cx = rng.uniform(reach, spec.width - reach)
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    skirt = np.maximum(dist - radius, 0.0)
    profile = np.exp(-(skirt ** 2) / (2.0 * SKIRT_SIGMA ** 2))
    anomaly_pixels = profile >= CORE_CUTOFF
    gw = spec.width // spec.patch
    py, px = np.nonzero(anomaly_pixels)
    mask = np.unique((py // spec.patch) * gw + (px // spec.patch))
    return profile, mask


def generate(spec: SynthSpec) -> list[SynthSample]:
    """Deterministically generate a class-balanced sample list.

    Even indices are label 0 (background only), odd indices label 1
    (background plus one blob), so any prefix is balanced to within one.
    Blob radius and peak brightness vary per image; together they form an
    image signature carried by the anomaly itself, mirroring the premise
    that the localized finding is the informative content.
    """
    samples = []
    for i in range(spec.n_images):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, i))))
        img = _background(spec, rng)
        label = i % 2
        mask = np.zeros(0, dtype=np.int64)
        if label == 1:
            profile, mask = _blob_profile(spec, rng)
            amp = spec.amplitude * rng.uniform(1.0 - spec.amplitude_jitter,
                                               1.0 + spec.amplitude_jitter)
            img = img + amp * profile
            if not 1 <= mask.size <= spec.max_footprint:
                raise ConfigError(
                    f"generated mask spans {mask.size} patches, outside "
                    f"[1, {spec.max_footprint}]")
        img = np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]
        samples.append(SynthSample(image=img, label=label, anomaly_mask=mask))
    return samples


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_dataset(samples: list[SynthSample], path: str, patch: int = 8) -> None:
    first = samples[0].image
    h, w, c = first.shape
    gh, gw = h // patch, w // patch
    L = gh * gw
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<IHHHHI", len(samples), h, w, c, patch, L))
        for s in samples:
            if s.image.shape != (h, w, c):
                raise FileFormatError(f"inconsistent image shape {s.image.shape}")
            f.write(struct.pack("<B", s.label))
            mask = np.asarray(s.anomaly_mask, dtype="<u2")
            f.write(struct.pack("<H", mask.size))
            f.write(mask.tobytes())
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(
            f"truncated dataset: expected {n} bytes for {what}, got {len(buf)}",
            offset=offset)
    return buf


def load_dataset(path: str) -> tuple[list[SynthSample], dict]:
    """Load and validate a dataset; returns (samples, header dict)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise FileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != VERSION:
            raise FileFormatError(f"unsupported dataset version {version}", offset=4)
        n, h, w, c, patch, L = struct.unpack("<IHHHHI", _read_exact(f, 16, "header"))
        if patch == 0 or h % patch or w % patch or (h // patch) * (w // patch) != L:
            raise FileFormatError(f"inconsistent header dims {h}x{w} patch {patch} L {L}", offset=6)
        samples = []
        for i in range(n):
            (label,) = struct.unpack("<B", _read_exact(f, 1, f"sample {i} label"))
            if label not in (0, 1):
                raise FileFormatError(f"sample {i}: bad label {label}", offset=f.tell() - 1)
            (mask_len,) = struct.unpack("<H", _read_exact(f, 2, f"sample {i} mask length"))
            if mask_len > L:
                raise FileFormatError(f"sample {i}: mask length {mask_len} > L={L}",
                                      offset=f.tell() - 2)
            mask = np.frombuffer(_read_exact(f, 2 * mask_len, f"sample {i} mask"),
                                 dtype="<u2").astype(np.int64)
            pixels = np.frombuffer(_read_exact(f, 4 * h * w * c, f"sample {i} pixels"),
                                   dtype="<f4")
            sample = SynthSample(image=pixels.reshape(h, w, c).copy(), label=int(label),
                                 anomaly_mask=mask)
            sample.validate(L)
            if mask.size and np.any(np.diff(mask) <= 0):
                raise FileFormatError(f"sample {i}: mask indices not strictly increasing")
            samples.append(sample)
        trailing = f.read(1)
        if trailing:
            raise FileFormatError("trailing bytes after final sample", offset=f.tell() - 1)
    header = {"n": n, "height": h, "width": w, "channels": c, "patch": patch, "L": L}
    return samples, header

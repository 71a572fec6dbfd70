"""Versioned binary persistence for checkpoints and attention caches.

Checkpoint (magic ``SCKP``, little-endian):

    magic 4s, version u16
    config_len u32, canonical config text (utf-8)
    n_params u32
    per param: name_len u16 + utf-8 name, ndim u8, dims u32 * ndim,
               data f32 * prod(dims)
    opt_flag u8; if 1: step u64, n_entries u32,
               per entry: name_len u16 + name, m f32 * size, v f32 * size

Attention cache (magic ``SCAC``):

    magic 4s, version u16
    n u32, L u32, K u32
    per image: image_id u32, k u16, indices u16 * k (sorted),
               s_hat f32 * L

Save -> load -> save is byte-identical; loading validates every parameter
shape against the architecture implied by the embedded config.
"""

from __future__ import annotations

import struct

import numpy as np

from . import model as mdl
from .autodiff import AdamW, Tensor
from .config import RunConfig, parse_config
from .errors import FileFormatError
from .training import AttnCache

CKPT_MAGIC = b"SCKP"
CACHE_MAGIC = b"SCAC"
VERSION = 1


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(f"truncated file: expected {n} bytes for {what}, "
                              f"got {len(buf)}", offset=offset)
    return buf


def _check_magic(f, magic: bytes) -> None:
    got = _read_exact(f, 4, "magic")
    if got != magic:
        raise FileFormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
    if version != VERSION:
        raise FileFormatError(f"unsupported format version {version} "
                              f"(this build reads version {VERSION})", offset=4)


def save_checkpoint(path: str, params: mdl.ModelParams, cfg: RunConfig,
                    opt: AdamW | None = None) -> None:
    config_bytes = cfg.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(params.tensors)))
        for name, t in params.tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        if opt is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", opt.t))
            f.write(struct.pack("<I", len(opt.m)))
            for name in opt.m:
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(np.ascontiguousarray(opt.m[name], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(opt.v[name], dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[mdl.ModelParams, RunConfig, dict | None]:
    """Load and shape-validate a checkpoint.

    Returns (params, config, optimizer state or None); the optimizer state
    is a dict with keys "t", "m", "v" when present.
    """
    with open(path, "rb") as f:
        _check_magic(f, CKPT_MAGIC)
        (config_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg = parse_config(_read_exact(f, config_len, "config text").decode("utf-8"))
        arch = cfg.arch()
        rng = np.random.Generator(np.random.PCG64(0))
        reference = mdl.init_params(arch, rng, dtype=cfg.dtype)
        (n_params,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        if n_params != len(reference.tensors):
            raise FileFormatError(
                f"checkpoint has {n_params} tensors, architecture expects "
                f"{len(reference.tensors)}")
        tensors: dict[str, Tensor] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} dims"))
            if name not in reference.tensors:
                raise FileFormatError(f"unexpected tensor '{name}' in checkpoint")
            expected = reference.tensors[name].data.shape
            if tuple(shape) != expected:
                raise FileFormatError(
                    f"tensor '{name}' has shape {tuple(shape)}, architecture "
                    f"expects {expected}")
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * size, f"{name} data"),
                                 dtype="<f4").reshape(shape)
            tensors[name] = Tensor(data.astype(cfg.dtype), requires_grad=True)
        (opt_flag,) = struct.unpack("<B", _read_exact(f, 1, "optimizer flag"))
        opt_state = None
        if opt_flag == 1:
            (t,) = struct.unpack("<Q", _read_exact(f, 8, "optimizer step"))
            (n_entries,) = struct.unpack("<I", _read_exact(f, 4, "optimizer entry count"))
            m, v = {}, {}
            for _ in range(n_entries):
                (name_len,) = struct.unpack("<H", _read_exact(f, 2, "optimizer name length"))
                name = _read_exact(f, name_len, "optimizer name").decode("utf-8")
                if name not in tensors:
                    raise FileFormatError(f"optimizer state for unknown tensor '{name}'")
                size = tensors[name].data.size
                shape = tensors[name].data.shape
                m[name] = np.frombuffer(_read_exact(f, 4 * size, f"{name} m"),
                                        dtype="<f4").reshape(shape).copy()
                v[name] = np.frombuffer(_read_exact(f, 4 * size, f"{name} v"),
                                        dtype="<f4").reshape(shape).copy()
            opt_state = {"t": t, "m": m, "v": v}
        elif opt_flag != 0:
            raise FileFormatError(f"bad optimizer flag {opt_flag}", offset=f.tell() - 1)
        if f.read(1):
            raise FileFormatError("trailing bytes after checkpoint", offset=f.tell() - 1)
    return mdl.ModelParams(arch=arch, tensors=tensors), cfg, opt_state


def save_cache(path: str, cache: AttnCache) -> None:
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<III", len(cache.entries), cache.L, cache.K))
        for image_id in sorted(cache.entries):
            S, s_hat = cache.entries[image_id]
            f.write(struct.pack("<IH", image_id, len(S)))
            f.write(np.asarray(S, dtype="<u2").tobytes())
            f.write(np.ascontiguousarray(s_hat, dtype="<f4").tobytes())


def load_cache(path: str) -> AttnCache:
    with open(path, "rb") as f:
        _check_magic(f, CACHE_MAGIC)
        n, L, K = struct.unpack("<III", _read_exact(f, 12, "cache header"))
        cache = AttnCache(K=K, L=L, rho=K / L)
        for i in range(n):
            image_id, k = struct.unpack("<IH", _read_exact(f, 6, f"entry {i} header"))
            if k != K:
                raise FileFormatError(f"entry {image_id}: |S|={k} != K={K}")
            S = np.frombuffer(_read_exact(f, 2 * k, f"entry {image_id} indices"),
                              dtype="<u2").astype(np.int64)
            if S.size and (np.any(np.diff(S) <= 0) or S.max() >= L):
                raise FileFormatError(f"entry {image_id}: indices not sorted or out of range")
            s_hat = np.frombuffer(_read_exact(f, 4 * L, f"entry {image_id} saliency"),
                                  dtype="<f4").copy()
            cache.entries[image_id] = (S, s_hat)
        if f.read(1):
            raise FileFormatError("trailing bytes after cache", offset=f.tell() - 1)
    return cache

"""Patch handling and the trainable networks.

Components, by parameter-name prefix:

* ``embed``    linear patch projection plus a learned position table
* ``block{i}`` pre-norm transformer blocks (attention + 2-layer MLP)
* ``saliency`` per-patch relevance MLP (scores one real per patch)
* ``proj``     contrastive projection head (outputs unit vectors)
* ``cls``      mean-pool linear classifier with softmax output
* ``recon``    linear decoder from a patch embedding back to pixel space

All forwards accept a single instance ``(L, .)`` or a stacked batch
``(B, L, .)``; row-wise layers are flattened to one big matmul so batched
training runs at BLAS speed. When a sparse set S is supplied, every block's
attention restricts its keys/values to S, which is what realizes the
O(L*K*d) cost; with S=None the blocks run the dense reference form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatchError

_saliency_calls = 0


def saliency_call_count() -> int:
    """Number of saliency_forward invocations since the last reset."""
    return _saliency_calls


def reset_saliency_calls() -> None:
    global _saliency_calls
    _saliency_calls = 0


@dataclass
class Architecture:
    """Shape descriptor every parameter tensor is validated against."""

    height: int = 64
    width: int = 64
    channels: int = 1
    patch: int = 8
    d: int = 64
    n_blocks: int = 2
    mlp_hidden: int = 128
    sal_hidden: tuple[int, int] = (512, 256)
    saliency_input: str = "embedded"
    d_z: int = 32
    n_classes: int = 2

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.saliency_input not in ("embedded", "raw"):
            raise ConfigError(f"saliency_input must be 'embedded' or 'raw', got {self.saliency_input!r}")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def saliency_in_dim(self) -> int:
        return self.d if self.saliency_input == "embedded" else self.patch_dim


@dataclass
class PatchGrid:
    """An image cut into L non-overlapping patches, flattened row-major."""

    patches: np.ndarray
    grid: tuple[int, int]
    patch: int
    channels: int
    source_id: int = -1


def partition_patches(image: np.ndarray, patch: int) -> PatchGrid:
    """Cut an (H, W) or (H, W, C) image into flattened P*P*C patch vectors.

    Patch order is row-major from the top-left; the operation is lossless
    and errors out rather than padding indivisible dimensions.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeMismatchError("partition_patches", img.shape)
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    blocks = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(patches=blocks.reshape(gh * gw, patch * patch * c),
                     grid=(gh, gw), patch=patch, channels=c)


def reassemble_patches(grid: PatchGrid) -> np.ndarray:
    """Invert partition_patches bit-exactly."""
    gh, gw = grid.grid
    p, c = grid.patch, grid.channels
    blocks = grid.patches.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * p, gw * p, c)


@dataclass
class ModelParams:
    """Named parameter tensors plus the architecture they instantiate."""

    arch: Architecture
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefixes)}

    def saliency_group(self) -> dict[str, Tensor]:
        return self.group("saliency.")

    def backbone_group(self) -> dict[str, Tensor]:
        """Everything trained on non-saliency steps: embedder, blocks, heads."""
        return {k: v for k, v in self.tensors.items() if not k.startswith("saliency.")}

    def finetune_group(self) -> dict[str, Tensor]:
        """Downstream-trainable tensors: embedder, blocks, classifier."""
        return self.group("embed.", "block", "cls.")

    def set_trainable(self, names, trainable: bool) -> None:
        for k in names:
            self.tensors[k].requires_grad = trainable

    def all_trainable(self) -> None:
        self.set_trainable(self.tensors, True)


def init_params(arch: Architecture, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity layer norms."""
    t: dict[str, Tensor] = {}

    def linear(prefix: str, d_in: int, d_out: int):
        t[f"{prefix}.weight"] = ad.glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype)
        t[f"{prefix}.bias"] = ad.zeros_param((d_out,), dtype)

    d, L = arch.d, arch.n_patches
    t["embed.weight"] = ad.glorot_uniform(rng, (arch.patch_dim, d), arch.patch_dim, d, dtype)
    t["embed.pos"] = ad.glorot_uniform(rng, (L, d), L, d, dtype)
    h1, h2 = arch.sal_hidden
    linear("saliency.fc1", arch.saliency_in_dim, h1)
    linear("saliency.fc2", h1, h2)
    linear("saliency.out", h2, 1)
    for i in range(arch.n_blocks):
        t[f"block{i}.ln1.gamma"] = ad.ones_param((d,), dtype)
        t[f"block{i}.ln1.beta"] = ad.zeros_param((d,), dtype)
        # q/k/v carry no bias: a key bias shifts every logit in a row equally,
        # which softmax cancels, leaving a parameter with exactly zero gradient.
        for name in ("wq", "wk", "wv"):
            t[f"block{i}.attn.{name}.weight"] = ad.glorot_uniform(rng, (d, d), d, d, dtype)
        linear(f"block{i}.attn.wo", d, d)
        t[f"block{i}.ln2.gamma"] = ad.ones_param((d,), dtype)
        t[f"block{i}.ln2.beta"] = ad.zeros_param((d,), dtype)
        linear(f"block{i}.mlp.fc1", d, arch.mlp_hidden)
        linear(f"block{i}.mlp.fc2", arch.mlp_hidden, d)
    linear("proj.fc1", d, d)
    linear("proj.fc2", d, arch.d_z)
    linear("cls", d, arch.n_classes)
    linear("recon", d, arch.patch_dim)
    return ModelParams(arch=arch, tensors=t)


def _rowwise_linear(x: Tensor, w: Tensor, b: Tensor | None,
                    relu_after: bool = False) -> Tensor:
    """Apply a linear layer to the last axis, flattening leading axes so the
    whole batch runs as a single matmul."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = ad.linear(flat, w, b, relu_after=relu_after)
    if x.data.ndim != 2:
        out = ad.reshape(out, lead + (w.shape[-1],))
    return out


def embed_patches(patches: Tensor, params: ModelParams) -> Tensor:
    """Project flattened patches to d dims and add the position table."""
    w = params["embed.weight"]
    if patches.shape[-1] != w.shape[0]:
        raise ShapeMismatchError("embed_patches", patches.shape, w.shape)
    return ad.add(_rowwise_linear(patches, w, None), params["embed.pos"])


def saliency_forward(x: Tensor, params: ModelParams) -> Tensor:
    """Score each patch's relevance with the two-hidden-layer relu MLP.

    Input rows are either raw patch vectors or embedded patches, matching
    the architecture's ``saliency_input`` switch. Output shape is the input
    shape minus the feature axis: one real score per patch.
    """
    global _saliency_calls
    _saliency_calls += 1
    h = _rowwise_linear(x, params["saliency.fc1.weight"], params["saliency.fc1.bias"], relu_after=True)
    h = _rowwise_linear(h, params["saliency.fc2.weight"], params["saliency.fc2.bias"], relu_after=True)
    out = _rowwise_linear(h, params["saliency.out.weight"], params["saliency.out.bias"])
    return ad.reshape(out, out.shape[:-1])


def backbone_forward(x: Tensor, params: ModelParams, S: np.ndarray | None = None,
                     s_hat: Tensor | None = None, bias_mode: str = "none",
                     collect_maps: list | None = None) -> Tensor:
    """Run the transformer blocks; keys/values restrict to S when given.

    Each block is pre-norm: x + Attn(LN(x)) followed by x + MLP(LN(x)).
    With S=None attention is the dense reference; with S the sparse kernel
    is used in every block (same S throughout), optionally biased by the
    normalized saliency scores. ``collect_maps`` receives one attention map
    per block when supplied (inspection only).
    """
    h = x
    for i in range(params.arch.n_blocks):
        pre = f"block{i}"
        normed = ad.layer_norm(h, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        q = _rowwise_linear(normed, params[f"{pre}.attn.wq.weight"], None)
        k = _rowwise_linear(normed, params[f"{pre}.attn.wk.weight"], None)
        v = _rowwise_linear(normed, params[f"{pre}.attn.wv.weight"], None)
        if S is None:
            att, amap = attn.dense_attention(q, k, v)
        else:
            att, amap = attn.sparse_attention(q, k, v, S, s_hat=s_hat, bias_mode=bias_mode)
        if collect_maps is not None:
            collect_maps.append(amap)
        att = _rowwise_linear(att, params[f"{pre}.attn.wo.weight"], params[f"{pre}.attn.wo.bias"])
        h = ad.add(h, att)
        normed = ad.layer_norm(h, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
        m = _rowwise_linear(normed, params[f"{pre}.mlp.fc1.weight"], params[f"{pre}.mlp.fc1.bias"], relu_after=True)
        m = _rowwise_linear(m, params[f"{pre}.mlp.fc2.weight"], params[f"{pre}.mlp.fc2.bias"])
        h = ad.add(h, m)
    return h


def projection_forward(f: Tensor, params: ModelParams) -> Tensor:
    """Mean-pool over patches, apply the 2-layer head, L2-normalize."""
    pooled = ad.mean_axis(f, -2)
    h = _rowwise_linear(pooled, params["proj.fc1.weight"], params["proj.fc1.bias"], relu_after=True)
    z = _rowwise_linear(h, params["proj.fc2.weight"], params["proj.fc2.bias"])
    return ad.l2_normalize_rows(z)


def classifier_forward(f: Tensor, params: ModelParams) -> Tensor:
    """Mean-pool over patches, one linear layer, softmax probabilities."""
    pooled = ad.mean_axis(f, -2)
    logits = _rowwise_linear(pooled, params["cls.weight"], params["cls.bias"])
    return ad.row_softmax(logits)


def recon_forward(h_sel: Tensor, params: ModelParams) -> Tensor:
    """Decode selected patch embeddings back to flattened pixel vectors."""
    return _rowwise_linear(h_sel, params["recon.weight"], params["recon.bias"])

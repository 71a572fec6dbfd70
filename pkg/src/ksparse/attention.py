"""Saliency-gated top-K sparse attention and its dense reference.

The sparse path computes scores only against the K selected key columns, so
its cost is O(L*K*d) instead of O(L*L*d); the full L-by-L map exists only
when explicitly materialized for inspection. A module-level counter tracks
the multiply-adds spent inside the two attention kernels so benchmarks can
compare the measured cost against the analytic model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeMismatchError

BIAS_MODES = ("none", "saliency")

_attn_madds = 0


def attention_madds() -> int:
    """Multiply-adds spent inside dense_attention/sparse_attention calls."""
    return _attn_madds


def reset_attention_madds() -> None:
    global _attn_madds
    _attn_madds = 0


@dataclass
class SaliencyState:
    """Raw scores, their softmax normalization, and the selected sparse set."""

    s: np.ndarray
    s_hat: np.ndarray
    theta: float
    rho: float
    K: int
    S: np.ndarray

    def validate(self) -> None:
        L = self.s.shape[-1]
        if abs(float(self.s_hat.sum()) - 1.0) > 1e-6 or np.any(self.s_hat <= 0):
            raise DomainError("SaliencyState: s_hat is not a positive probability vector")
        if self.K != max(1, int(np.floor(self.rho * L + 1e-9))) or self.S.shape[-1] != self.K:
            raise DomainError("SaliencyState: K inconsistent with rho and L")
        if np.any(np.diff(self.S) <= 0):
            raise DomainError("SaliencyState: S must be strictly increasing")
        if self.S.min() < 0 or self.S.max() >= L:
            raise DomainError("SaliencyState: S index out of range")


@dataclass
class AttentionMap:
    """Row-stochastic attention weights restricted to the support columns.

    ``weights`` holds only the K selected columns; ``dense()`` scatters them
    into the full L-by-L map with exact zeros elsewhere (inspection only,
    never on the hot path).
    """

    weights: Tensor
    support: np.ndarray
    n_tokens: int

    def dense(self) -> np.ndarray:
        w = self.weights.data
        full = np.zeros(w.shape[:-1] + (self.n_tokens,), dtype=w.dtype)
        if self.support.ndim == 1:
            full[..., self.support] = w
        else:
            np.put_along_axis(full, np.broadcast_to(self.support[:, None, :], w.shape), w, axis=-1)
        return full

    def row_sums(self) -> np.ndarray:
        return self.weights.data.sum(axis=-1)


def normalize_scores(s: Tensor) -> Tensor:
    """Softmax the raw saliency scores over the patch axis."""
    if np.any(np.isnan(s.data)):
        raise DomainError("normalize_scores: NaN in saliency scores")
    return ad.row_softmax(s)


def build_saliency_state(s: Tensor, rho: float, theta: float | None = None) -> SaliencyState:
    """Normalize, select, and package one image's saliency decision."""
    if s.data.ndim != 1:
        raise ShapeMismatchError("build_saliency_state expects a single score vector", s.shape)
    s_hat = normalize_scores(s)
    K, S = select_topk(s_hat.data, rho)
    L = s.data.shape[-1]
    state = SaliencyState(s=s.data.copy(), s_hat=s_hat.data.copy(),
                          theta=theta if theta is not None else 1.0 / L,
                          rho=rho, K=K, S=S)
    state.validate()
    return state


def select_topk(s_hat, rho: float) -> tuple[int, np.ndarray]:
    """Return (K, S): the K = max(1, floor(rho*L)) largest-saliency indices.

    Ties break toward the lower index, and S comes back sorted ascending.
    Accepts a single (L,) vector or a batch (..., L); the index array mirrors
    the leading shape.
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    values = s_hat.data if isinstance(s_hat, Tensor) else np.asarray(s_hat)
    L = values.shape[-1]
    # The epsilon keeps floor(rho*L) at the intended integer when rho*L is
    # an exact multiple computed inexactly in binary (e.g. 0.3 * 10).
    K = max(1, int(np.floor(rho * L + 1e-9)))
    # Stable argsort of the negated scores makes ties resolve to lower indices.
    order = np.argsort(-values, axis=-1, kind="stable")
    S = np.sort(order[..., :K], axis=-1)
    return K, S


def dense_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Reference scaled dot-product attention: softmax(q k^T / sqrt(d)) v."""
    global _attn_madds
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeMismatchError("dense_attention", q.shape, k.shape, v.shape)
    d = q.shape[-1]
    before = ad.madds_total()
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), float(1.0 / np.sqrt(d)))
    a = ad.row_softmax(scores)
    f = ad.matmul(a, v)
    _attn_madds += ad.madds_total() - before
    return f, a


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, S: np.ndarray,
                     s_hat: Tensor | None = None,
                     bias_mode: str = "none") -> tuple[Tensor, AttentionMap]:
    """Attention with key/value columns restricted to the selected set S.

    With ``bias_mode="saliency"`` each selected key's numerator is multiplied
    by its normalized saliency (implemented as an additive log term on the
    logits), which gives the saliency predictor a gradient path through
    whatever loss consumes the output. ``bias_mode="none"`` is the plain
    masked form. Rows are renormalized over S either way.
    """
    global _attn_madds
    if bias_mode not in BIAS_MODES:
        raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {bias_mode!r}")
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeMismatchError("sparse_attention", q.shape, k.shape, v.shape)
    S = np.asarray(S)
    if S.shape[-1] == 0:
        raise DomainError("sparse_attention: empty sparse set S")
    if bias_mode == "saliency" and s_hat is None:
        raise ConfigError("sparse_attention: bias_mode='saliency' requires s_hat")
    d = q.shape[-1]
    before = ad.madds_total()
    k_sel = ad.gather_rows(k, S)
    v_sel = ad.gather_rows(v, S)
    logits = ad.scale(ad.matmul(q, ad.transpose(k_sel)), float(1.0 / np.sqrt(d)))
    if bias_mode == "saliency":
        s_sel = _gather_last(s_hat, S)
        # log(s_hat) added to the logits == multiplying each numerator by s_hat_j.
        logits = ad.add(logits, _expand_cols(ad.log(s_sel)))
    a = ad.row_softmax(logits)
    f = ad.matmul(a, v_sel)
    _attn_madds += ad.madds_total() - before
    return f, AttentionMap(weights=a, support=S, n_tokens=k.shape[-2])


def _gather_last(s_hat: Tensor, S: np.ndarray) -> Tensor:
    """Gather saliency entries along the last axis by treating it as rows."""
    if s_hat.data.ndim == 1:
        return ad.gather_rows(ad.reshape(s_hat, (-1, 1)), S)
    flat = ad.reshape(s_hat, s_hat.shape + (1,))
    return ad.gather_rows(flat, S)


def _expand_cols(col: Tensor) -> Tensor:
    """Reshape a gathered (.., K, 1) column into a (.., 1, K) logit bias row."""
    k = col.shape[-2]
    lead = col.shape[:-2]
    return ad.reshape(col, lead + (1, k))

"""Contrastive, sparsity, and total training objectives.

The contrastive term is symmetric InfoNCE with both-view in-batch
negatives: each anchor sees its paired view as the positive and the other
2N-2 projections as negatives. The sparsity term combines a sigmoid
surrogate for the indicator |mean 1(s_hat > theta) - rho| with a pixel-space
reconstruction penalty over the selected patches; the hard indicator value
is reported alongside as a metric since it is not differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError

_MASK_VALUE = -1e9


@dataclass
class ContrastBatch:
    """Paired unit-norm projections of two views per image."""

    z_a: Tensor
    z_b: Tensor
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.z_a.shape != self.z_b.shape or self.z_a.data.ndim != 2:
            raise DomainError("ContrastBatch: z_a and z_b must be matching (N, d) matrices")
        for name, z in (("z_a", self.z_a), ("z_b", self.z_b)):
            norms = np.sqrt((z.data * z.data).sum(axis=-1))
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise DomainError(f"ContrastBatch: {name} rows are not unit-norm")

    @property
    def n(self) -> int:
        return self.z_a.shape[0]


def info_nce(batch: ContrastBatch) -> Tensor:
    """Symmetric InfoNCE over the 2N stacked projections.

    For anchor i the denominator ranges over the positive plus every other
    projection from both views (self-similarity masked out). With N=1 there
    are no negatives and the loss is exactly zero.
    """
    n = batch.n
    z = ad.concat([batch.z_a, batch.z_b], axis=0)
    sims = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / batch.tau)
    mask = np.full((2 * n, 2 * n), 0.0, dtype=sims.dtype)
    np.fill_diagonal(mask, _MASK_VALUE)
    masked = ad.add(sims, Tensor(mask))
    probs = ad.row_softmax(masked)
    pos = np.zeros((2 * n, 2 * n), dtype=sims.dtype)
    idx = np.arange(n)
    pos[idx, idx + n] = 1.0
    pos[idx + n, idx] = 1.0
    p_pos = ad.sum_axis(ad.mul(probs, Tensor(pos)), -1)
    return ad.scale(ad.mean_all(ad.log(p_pos)), -1.0)


def hard_sparsity_gap(s_hat: np.ndarray, theta: float, rho: float) -> float:
    """| mean 1(s_hat > theta) - rho | with the exact indicator (metric only)."""
    frac = (np.asarray(s_hat) > theta).mean(axis=-1)
    return float(np.abs(frac - rho).mean())


@dataclass
class SparsityLoss:
    """Total plus the two addends; the hard indicator gap rides along as a
    metric since it has no gradient."""

    total: Tensor
    target_term: Tensor
    recon_term: Tensor
    hard_gap: float


def sparsity_loss(s_hat: Tensor, theta: float, rho: float, patches: Tensor,
                  p_recon: Tensor, S: np.ndarray, t_ind: float) -> SparsityLoss:
    """Sparsity-target surrogate plus reconstruction term over the set S.

    The target term substitutes sigmoid((s_hat - theta) / t_ind) for the
    indicator so |fraction-above-theta - rho| stays differentiable; the
    reconstruction term is the mean squared pixel error between each
    selected patch and its decoded reconstruction.
    """
    if t_ind <= 0:
        raise ConfigError(f"t_ind must be positive, got {t_ind}")
    S = np.asarray(S)
    if S.shape[-1] == 0:
        raise DomainError("sparsity_loss: empty sparse set S")
    shifted = ad.scale(ad.add(s_hat, Tensor(np.asarray(-theta, dtype=s_hat.dtype))), 1.0 / t_ind)
    frac = ad.mean_axis(ad.sigmoid(shifted), -1)
    gap = ad.absval(ad.add(frac, Tensor(np.asarray(-rho, dtype=s_hat.dtype))))
    term1 = ad.mean_all(gap)
    p_sel = ad.gather_rows(patches, S)
    term2 = ad.mean_all(ad.sum_axis(ad.sqdiff(p_sel, p_recon), -1))
    return SparsityLoss(total=ad.add(term1, term2), target_term=term1,
                        recon_term=term2,
                        hard_gap=hard_sparsity_gap(s_hat.data, theta, rho))


def total_loss(l_contrast: Tensor, l_sparse: Tensor, lam: float) -> Tensor:
    """L_total = L_contrast + lambda * L_sparse."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if lam == 0.0:
        # Drop the dead branch so nothing reachable only through L_sparse
        # ever receives (zero) gradient traffic.
        return l_contrast
    return ad.add(l_contrast, ad.scale(l_sparse, lam))


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels)
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = ad.sum_axis(ad.mul(probs, Tensor(onehot)), -1)
    return ad.scale(ad.mean_all(ad.log(picked)), -1.0)

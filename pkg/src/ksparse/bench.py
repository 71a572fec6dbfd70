"""Analytic cost model for attention and the harness validating it.

Conventions (the columns are meaningless without them):

* "multiply-adds" counts 2*n*m*p per (n,m) @ (m,p) matrix product, i.e. the
  multiply and the accumulate separately, matching the runtime counter in
  the autodiff layer.
* The flops_dense / flops_sparse columns cover the attention component only
  (score and weighted-sum products across all blocks); the saliency MLP and
  the top-K selection are reported in their own columns since they exist
  only on the sparse path.
* Softmax exponentials/divisions and selection comparisons are separate
  unit systems and are never folded into multiply-adds.
* peak_alloc_estimate models the attention map allocations (logits + weights
  + output) in bytes; the O(K*d) gathered key/value copies are excluded.
* Wall-clock numbers are medians over sequential single-threaded trials and
  should only ever be consumed as sparse/dense ratios.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as attn
from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .config import RunConfig
from .errors import ConfigError

FLOAT_BYTES = 4


@dataclass
class CostModel:
    """Closed-form per-forward cost of the attention path."""

    L: int
    K: int
    d: int
    n_blocks: int
    score_madds: int
    weighted_madds: int
    softmax_exps: int
    softmax_divs: int
    saliency_madds: int
    selection_comparisons: int

    @property
    def attention_madds(self) -> int:
        return self.score_madds + self.weighted_madds


def attention_cost(L: int, K: int, d: int, n_blocks: int = 1) -> tuple[int, int]:
    """(score, weighted-sum) multiply-adds for n_blocks attention layers."""
    per_block = 2 * L * K * d
    return n_blocks * per_block, n_blocks * per_block


def flop_count(cfg: RunConfig, mode: str) -> CostModel:
    """Cost model for one forward pass of the configured model."""
    if mode not in ("dense", "sparse"):
        raise ConfigError(f"mode must be dense|sparse, got {mode!r}")
    L, d = cfg.n_patches, cfg.d
    K = L if mode == "dense" else max(1, int(np.floor(cfg.rho * L + 1e-9)))
    score, weighted = attention_cost(L, K, d, cfg.n_blocks)
    if mode == "sparse":
        d_in = cfg.d if cfg.saliency_input == "embedded" else cfg.patch ** 2 * cfg.channels
        h1, h2 = cfg.saliency_hidden
        saliency = 2 * L * (d_in * h1 + h1 * h2 + h2 * 1)
        selection = L * math.ceil(math.log2(max(L, 2)))
    else:
        saliency = 0
        selection = 0
    return CostModel(L=L, K=K, d=d, n_blocks=cfg.n_blocks,
                     score_madds=score, weighted_madds=weighted,
                     softmax_exps=cfg.n_blocks * L * K,
                     softmax_divs=cfg.n_blocks * L * K,
                     saliency_madds=saliency,
                     selection_comparisons=selection)


def activation_bytes(L: int, K: int, d: int, n_blocks: int, mode: str) -> int:
    """Attention-map activation estimate: logits + weights + output, in bytes."""
    cols = L if mode == "dense" else K
    return n_blocks * (2 * L * cols + L * d) * FLOAT_BYTES


@dataclass
class CountReport:
    """Instrumented counters versus the analytic model."""

    mode: str
    expected_attention: int
    measured_attention: int
    expected_saliency: int
    measured_saliency: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def count_check(cfg: RunConfig, mode: str, seed: int = 0,
                expected: CostModel | None = None) -> CountReport:
    """Run one instrumented forward and compare counters with the model.

    The measured numbers come from the same arithmetic the model describes,
    so any discrepancy is reported exactly, per component. ``expected``
    overrides the model (used to verify that mismatches do get reported).
    """
    model = expected if expected is not None else flop_count(cfg, mode)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = mdl.init_params(cfg.arch(), rng, dtype=np.float32)
    image = rng.random((cfg.height, cfg.width, cfg.channels), dtype=np.float32)
    x = Tensor(mdl.partition_patches(image, cfg.patch).patches)
    e = mdl.embed_patches(x, params)
    measured_sal = 0
    if mode == "sparse":
        before = ad.madds_total()
        sal_in = e if cfg.saliency_input == "embedded" else x
        s_hat = attn.normalize_scores(mdl.saliency_forward(sal_in, params))
        measured_sal = ad.madds_total() - before
        _, S = attn.select_topk(s_hat.data, cfg.rho)
    else:
        s_hat, S = None, None
    attn_before = attn.attention_madds()
    mdl.backbone_forward(e, params, S=S, s_hat=s_hat,
                         bias_mode="none" if mode == "dense" else cfg.bias_mode)
    measured_attn = attn.attention_madds() - attn_before
    mismatches = []
    if measured_attn != model.attention_madds:
        mismatches.append(
            f"attention: model {model.attention_madds} != measured {measured_attn}")
    if measured_sal != model.saliency_madds:
        mismatches.append(
            f"saliency: model {model.saliency_madds} != measured {measured_sal}")
    return CountReport(mode=mode,
                       expected_attention=model.attention_madds,
                       measured_attention=measured_attn,
                       expected_saliency=model.saliency_madds,
                       measured_saliency=measured_sal,
                       mismatches=mismatches)


@dataclass
class TimingStats:
    dense_median_ms: float
    sparse_median_ms: float
    dense_iqr_ms: float
    sparse_iqr_ms: float

    @property
    def ratio(self) -> float:
        return self.sparse_median_ms / self.dense_median_ms


def time_attention(L: int, K: int, d: int, trials: int = 30, seed: int = 0) -> TimingStats:
    """Median per-call wall time for dense vs sparse attention, same inputs.

    Trials run sequentially with BLAS pinned to one thread; three warmup
    calls precede each measurement series.
    """
    if trials < 10:
        raise ConfigError(f"need at least 10 trials, got {trials}")
    rng = np.random.Generator(np.random.PCG64(seed))
    q = Tensor(rng.standard_normal((L, d)).astype(np.float32))
    k = Tensor(rng.standard_normal((L, d)).astype(np.float32))
    v = Tensor(rng.standard_normal((L, d)).astype(np.float32))
    S = np.sort(rng.choice(L, size=K, replace=False))

    def run_series(fn) -> np.ndarray:
        for _ in range(3):
            fn()
        out = np.empty(trials)
        for i in range(trials):
            t0 = time.perf_counter()
            fn()
            out[i] = (time.perf_counter() - t0) * 1e3
        return out

    with threadpool_limits(limits=1):
        dense_ms = run_series(lambda: attn.dense_attention(q, k, v))
        sparse_ms = run_series(lambda: attn.sparse_attention(q, k, v, S))

    def iqr(x):
        return float(np.percentile(x, 75) - np.percentile(x, 25))

    return TimingStats(dense_median_ms=float(np.median(dense_ms)),
                       sparse_median_ms=float(np.median(sparse_ms)),
                       dense_iqr_ms=iqr(dense_ms), sparse_iqr_ms=iqr(sparse_ms))


@dataclass
class BenchRow:
    L: int
    K: int
    d: int
    flops_dense: int
    flops_sparse: int
    ratio: float
    wall_ms_dense: float
    wall_ms_sparse: float
    peak_alloc_estimate: int


def bench_report(sweep: list[tuple[int, int, int]], n_blocks: int = 1,
                 trials: int = 30, seed: int = 0) -> list[BenchRow]:
    """One row per (L, K, d) configuration."""
    rows = []
    for L, K, d in sweep:
        if not 1 <= K <= L:
            raise ConfigError(f"need 1 <= K <= L, got K={K}, L={L}")
        ds, dw = attention_cost(L, L, d, n_blocks)
        ss, sw = attention_cost(L, K, d, n_blocks)
        stats = time_attention(L, K, d, trials=trials, seed=seed)
        rows.append(BenchRow(
            L=L, K=K, d=d,
            flops_dense=ds + dw, flops_sparse=ss + sw,
            ratio=(ss + sw) / (ds + dw),
            wall_ms_dense=stats.dense_median_ms,
            wall_ms_sparse=stats.sparse_median_ms,
            peak_alloc_estimate=activation_bytes(L, K, d, n_blocks, "sparse")))
    return rows


_COLUMNS = ("L", "K", "d", "flops_dense", "flops_sparse", "ratio",
            "wall_ms_dense", "wall_ms_sparse", "peak_alloc_estimate")


def report_csv(rows: list[BenchRow]) -> str:
    lines = [",".join(_COLUMNS)]
    for r in rows:
        lines.append(",".join(_format_cell(getattr(r, c)) for c in _COLUMNS))
    return "\n".join(lines) + "\n"


def report_table(rows: list[BenchRow]) -> str:
    cells = [[_format_cell(getattr(r, c)) for c in _COLUMNS] for r in rows]
    widths = [max(len(col), *(len(row[i]) for row in cells)) if cells else len(col)
              for i, col in enumerate(_COLUMNS)]
    def fmt(row):
        return "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
    lines = [fmt(_COLUMNS), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in cells)
    return "\n".join(lines)


def _format_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)

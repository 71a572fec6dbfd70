"""Augmentation, contrastive pretraining, cache snapshotting, fine-tuning.

Determinism contract: every random decision derives from the run seed
through a fixed-purpose SeedSequence, so identical config+seed reproduces
identical parameter trajectories bit-for-bit on the same platform.

    (seed, 0)                      parameter initialization
    (seed, 1, step)                batch index sampling
    (seed, 2, image_id, view, step) per-view augmentation

The pretraining alternation updates the saliency group on steps where
(step mod 2*alt_period) < alt_period and the backbone group otherwise;
alt_period=0 updates everything jointly. Parameters outside the scheduled
group are left bit-identical, and their gradient accumulation is skipped
entirely as a speed win.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import model as mdl
from .autodiff import AdamW, Tensor
from .config import RunConfig
from .errors import ConfigError, DomainError
from .losses import ContrastBatch, cross_entropy, info_nce, sparsity_loss, total_loss
from .synthdata import SynthSample


@dataclass
class AugmentSpec:
    """View-generation knobs; all randomness comes from the caller's rng."""

    flip_prob: float = 0.5
    noise_std: float = 0.02
    jitter: float = 0.1
    crop_min: float = 0.85
    crop_max: float = 1.0
    patch: int = 8

    @staticmethod
    def from_config(cfg: RunConfig) -> "AugmentSpec":
        return AugmentSpec(flip_prob=cfg.flip_prob, noise_std=cfg.noise_std,
                           jitter=cfg.jitter, crop_min=cfg.crop_min,
                           crop_max=cfg.crop_max, patch=cfg.patch)

    def view_rng(self, base_seed: int, image_id: int, view: int, epoch: int) -> np.random.Generator:
        """Deterministic per-(image, view, epoch) generator."""
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((base_seed, 2, image_id, view, epoch))))


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Flip / patch-aligned crop-resize / intensity jitter / Gaussian noise."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[0], img.shape[1]
    if rng.random() < spec.flip_prob:
        img = img[:, ::-1]
    s = rng.uniform(spec.crop_min, spec.crop_max)
    ch = min(h, max(spec.patch, int(round(h * s / spec.patch)) * spec.patch))
    cw = min(w, max(spec.patch, int(round(w * s / spec.patch)) * spec.patch))
    if ch % spec.patch or cw % spec.patch:
        raise ConfigError(f"crop produced indivisible dims {ch}x{cw}")
    if (ch, cw) != (h, w):
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = img[top:top + ch, left:left + cw]
        rows = (np.arange(h) * ch) // h
        cols = (np.arange(w) * cw) // w
        img = crop[rows][:, cols]
    if spec.jitter > 0:
        img = img * np.float32(1.0 + rng.uniform(-spec.jitter, spec.jitter))
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_views(image: np.ndarray, spec: AugmentSpec,
               rngs: tuple[np.random.Generator, np.random.Generator]) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of the same image."""
    return augment(image, spec, rngs[0]), augment(image, spec, rngs[1])


@dataclass
class AttnCache:
    """Frozen per-image sparse sets and saliency snapshots."""

    K: int
    L: int
    rho: float
    entries: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def get(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        if image_id not in self.entries:
            raise ConfigError(f"attention cache has no entry for image {image_id}")
        return self.entries[image_id]


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1, step))))
    if batch <= n:
        return rng.choice(n, size=batch, replace=False)
    return rng.integers(0, n, size=batch)


def _stack_patches(images, patch: int, dtype) -> np.ndarray:
    rows = [mdl.partition_patches(img, patch).patches for img in images]
    return np.stack(rows).astype(dtype)


def _clean_saliency(samples, ids, params: mdl.ModelParams, cfg: RunConfig):
    """Unaugmented forward to (s_hat values, K, S) for the given samples."""
    x = Tensor(_stack_patches([samples[i].image for i in ids], cfg.patch, cfg.dtype))
    e = mdl.embed_patches(x, params)
    sal_in = e if cfg.saliency_input == "embedded" else x
    s = mdl.saliency_forward(sal_in, params)
    s_hat = attn.normalize_scores(s)
    K, S = attn.select_topk(s_hat.data, cfg.rho)
    return s_hat.data, K, S


def pretrain_step(batch, batch_ids, params: mdl.ModelParams, opts: dict[str, AdamW],
                  cfg: RunConfig, step: int,
                  static_map: dict[int, np.ndarray] | None = None) -> dict:
    """One contrastive step over a batch of samples.

    Builds two augmented views per image, runs the sparse pipeline on the
    stacked views, and updates the parameter group scheduled for this step.
    On saliency steps the backward pass covers the contrastive loss plus the
    sparsity-target term only: the reconstruction error must not reach the
    saliency predictor through the attention bias, or it learns to avoid
    exactly the high-variance patches it is supposed to find. Backbone steps
    (and joint updates with alt_period=0) backpropagate the full objective.
    """
    B = len(batch)
    spec = AugmentSpec.from_config(cfg)
    views = []
    for view in (0, 1):
        for sample, img_id in zip(batch, batch_ids):
            rng = spec.view_rng(cfg.seed, img_id, view, step)
            views.append(augment(sample.image, spec, rng))
    x = Tensor(_stack_patches(views, cfg.patch, cfg.dtype))

    if cfg.alt_period == 0:
        active = set(params.tensors)
    else:
        saliency_turn = (step % (2 * cfg.alt_period)) < cfg.alt_period
        active = set(params.saliency_group() if saliency_turn else params.backbone_group())
    for name, p in params.tensors.items():
        p.requires_grad = name in active

    attn_before = attn.attention_madds()
    try:
        e = mdl.embed_patches(x, params)
        sal_in = e if cfg.saliency_input == "embedded" else x
        s = mdl.saliency_forward(sal_in, params)
        s_hat = attn.normalize_scores(s)
        if static_map is not None:
            S = np.stack([static_map[i] for i in list(batch_ids) * 2])
            K = S.shape[-1]
        else:
            K, S = attn.select_topk(s_hat.data, cfg.rho)
        h = mdl.backbone_forward(e, params, S=S, s_hat=s_hat, bias_mode=cfg.bias_mode)
        z = mdl.projection_forward(h, params)
        z_a = ad.gather_rows(z, np.arange(B))
        z_b = ad.gather_rows(z, np.arange(B, 2 * B))
        l_con = info_nce(ContrastBatch(z_a=z_a, z_b=z_b, tau=cfg.tau))
        h_sel = ad.gather_rows(h, S)
        p_rec = mdl.recon_forward(h_sel, params)
        l_sp = sparsity_loss(s_hat, cfg.theta_value(), cfg.rho, x, p_rec, S, cfg.t_ind)
        l_tot = total_loss(l_con, l_sp.total, cfg.lam)
        if not np.isfinite(l_tot.data):
            raise DomainError(
                f"non-finite loss at step {step}: contrast={float(l_con.data)} "
                f"sparse={float(l_sp.total.data)}")
        ad.zero_grads(params.tensors.values())
        if cfg.alt_period != 0 and saliency_turn:
            ad.backward(total_loss(l_con, l_sp.target_term, cfg.lam))
        else:
            ad.backward(l_tot)
        if cfg.alt_period == 0:
            opts["saliency"].step()
            opts["backbone"].step()
        else:
            opts["saliency" if saliency_turn else "backbone"].step()
    finally:
        params.all_trainable()

    return {
        "step": step,
        "l_contrast": float(l_con.data),
        "l_sparse_soft": float(l_sp.total.data),
        "l_sparse_hard": l_sp.hard_gap,
        "l_total": float(l_tot.data),
        "attn_madds": attn.attention_madds() - attn_before,
    }


@dataclass
class PretrainResult:
    params: mdl.ModelParams
    cache: AttnCache
    metrics: list[dict]


def make_optimizers(params: mdl.ModelParams, cfg: RunConfig) -> dict[str, AdamW]:
    kw = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
              weight_decay=cfg.weight_decay)
    return {"saliency": AdamW(params.saliency_group(), **kw),
            "backbone": AdamW(params.backbone_group(), **kw)}


def run_pretraining(samples: list[SynthSample], cfg: RunConfig,
                    log=None) -> PretrainResult:
    """Full pretraining loop; returns trained params, cache, and metrics."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0))))
    params = mdl.init_params(cfg.arch(), rng, dtype=cfg.dtype)
    opts = make_optimizers(params, cfg)
    static_map: dict[int, np.ndarray] | None = None
    if cfg.static_sparse:
        _, _, S_all = _clean_saliency(samples, range(len(samples)), params, cfg)
        static_map = {i: S_all[i] for i in range(len(samples))}
    metrics = []
    for step in range(cfg.steps):
        ids = _batch_indices(cfg.seed, step, len(samples), cfg.batch)
        batch = [samples[i] for i in ids]
        row = pretrain_step(batch, ids, params, opts, cfg, step, static_map=static_map)
        metrics.append(row)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"step {row['step']:>6d}  contrast {row['l_contrast']:.4f}  "
                f"sparse {row['l_sparse_soft']:.4f}  total {row['l_total']:.4f}")
    cache = snapshot_cache(samples, params, cfg)
    return PretrainResult(params=params, cache=cache, metrics=metrics)


def snapshot_cache(samples: list[SynthSample], params: mdl.ModelParams,
                   cfg: RunConfig) -> AttnCache:
    """One clean (unaugmented) forward per image; store its S and s_hat."""
    L = cfg.n_patches
    cache = AttnCache(K=max(1, int(np.floor(cfg.rho * L + 1e-9))), L=L, rho=cfg.rho)
    for start in range(0, len(samples), cfg.batch):
        ids = range(start, min(start + cfg.batch, len(samples)))
        s_hat, K, S = _clean_saliency(samples, ids, params, cfg)
        for j, i in enumerate(ids):
            cache.entries[i] = (S[j].astype(np.int64), s_hat[j].astype(np.float32))
    return cache


def finetune_step(batch, batch_ids, labels: np.ndarray, cache: AttnCache | None,
                  params: mdl.ModelParams, opt: AdamW, cfg: RunConfig) -> dict:
    """One supervised step with frozen saliency.

    With reuse_cache the sparse sets and saliency snapshots come straight
    from the cache and the saliency network is never evaluated.
    """
    x = Tensor(_stack_patches([s.image for s in batch], cfg.patch, cfg.dtype))
    e = mdl.embed_patches(x, params)
    if cfg.reuse_cache:
        if cache is None:
            raise ConfigError("reuse_cache=true requires an attention cache")
        pairs = [cache.get(i) for i in batch_ids]
        S = np.stack([p[0] for p in pairs])
        s_hat = Tensor(np.stack([p[1] for p in pairs]).astype(cfg.dtype))
    else:
        sal_in = e if cfg.saliency_input == "embedded" else x
        s = mdl.saliency_forward(sal_in, params)
        s_hat = attn.normalize_scores(s)
        _, S = attn.select_topk(s_hat.data, cfg.rho)
    h = mdl.backbone_forward(e, params, S=S, s_hat=s_hat, bias_mode=cfg.bias_mode)
    probs = mdl.classifier_forward(h, params)
    loss = cross_entropy(probs, labels)
    if not np.isfinite(loss.data):
        raise DomainError(f"non-finite fine-tune loss on batch {list(batch_ids)[:4]}...")
    ad.zero_grads(params.tensors.values())
    ad.backward(loss)
    opt.step()
    acc = float((np.argmax(probs.data, axis=-1) == labels).mean())
    return {"loss": float(loss.data), "accuracy": acc}


def run_finetune(samples: list[SynthSample], params: mdl.ModelParams, cfg: RunConfig,
                 cache: AttnCache | None, steps: int, log=None) -> list[dict]:
    """Fine-tune classifier+backbone+embedder; saliency and heads frozen."""
    trainable = set(params.finetune_group())
    for name, p in params.tensors.items():
        p.requires_grad = name in trainable
    opt = AdamW(params.finetune_group(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    labels_all = np.array([s.label for s in samples])
    metrics = []
    for step in range(steps):
        ids = _batch_indices(cfg.seed, step, len(samples), min(cfg.batch, len(samples)))
        batch = [samples[i] for i in ids]
        row = finetune_step(batch, ids, labels_all[ids], cache, params, opt, cfg)
        row["step"] = step
        metrics.append(row)
        if log is not None and (step % cfg.log_every == 0 or step == steps - 1):
            log(f"finetune step {step:>5d}  loss {row['loss']:.4f}  acc {row['accuracy']:.3f}")
    params.all_trainable()
    return metrics


def _forward_probs(samples, ids, params, cfg, cache):
    x = Tensor(_stack_patches([samples[i].image for i in ids], cfg.patch, cfg.dtype))
    e = mdl.embed_patches(x, params)
    if cache is not None and cfg.reuse_cache:
        pairs = [cache.get(i) for i in ids]
        S = np.stack([p[0] for p in pairs])
        s_hat = Tensor(np.stack([p[1] for p in pairs]).astype(cfg.dtype))
    else:
        sal_in = e if cfg.saliency_input == "embedded" else x
        s_hat = attn.normalize_scores(mdl.saliency_forward(sal_in, params))
        _, S = attn.select_topk(s_hat.data, cfg.rho)
    h = mdl.backbone_forward(e, params, S=S, s_hat=s_hat, bias_mode=cfg.bias_mode)
    return mdl.classifier_forward(h, params).data


def evaluate(samples: list[SynthSample], params: mdl.ModelParams, cfg: RunConfig,
             cache: AttnCache | None = None) -> dict:
    """Accuracy and rank-based AUC over a dataset (no augmentation)."""
    labels = np.array([s.label for s in samples])
    probs = []
    for start in range(0, len(samples), cfg.batch):
        ids = range(start, min(start + cfg.batch, len(samples)))
        probs.append(_forward_probs(samples, ids, params, cfg, cache))
    probs = np.concatenate(probs, axis=0)
    accuracy = float((np.argmax(probs, axis=-1) == labels).mean())
    classes = np.unique(labels)
    if classes.size < 2:
        raise DomainError("AUC undefined on a single-class dataset")
    if classes.size == 2:
        auc = auc_score(probs[:, 1], labels)
    else:
        auc = float(np.mean([auc_score(probs[:, c], (labels == c).astype(int))
                             for c in classes]))
    return {"accuracy": accuracy, "auc": auc}


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC undefined: need both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rho_sweep(pretrain_samples, finetune_samples, eval_samples, base_cfg: RunConfig,
              rhos, pretrain_steps: int, finetune_steps: int, log=None) -> list[dict]:
    """End-to-end sparsity-ratio ablation: pretrain, fine-tune, evaluate."""
    rows = []
    for rho in rhos:
        cfg = replace(base_cfg, rho=rho, steps=pretrain_steps)
        cfg.validate()
        attn.reset_attention_madds()
        result = run_pretraining(pretrain_samples, cfg, log=log)
        ft_cache = snapshot_cache(finetune_samples, result.params, cfg)
        run_finetune(finetune_samples, result.params, cfg, ft_cache, finetune_steps)
        ev_cache = snapshot_cache(eval_samples, result.params, cfg)
        scores = evaluate(eval_samples, result.params, cfg, cache=ev_cache)
        rows.append({
            "rho": rho,
            "K": result.cache.K,
            "accuracy": scores["accuracy"],
            "auc": scores["auc"],
            "attn_madds": attn.attention_madds(),
        })
        if log is not None:
            log(f"rho {rho:4.2f}  K {rows[-1]['K']:>3d}  acc {scores['accuracy']:.3f}  "
                f"auc {scores['auc']:.3f}  attn_madds {rows[-1]['attn_madds']}")
    return rows


def format_sweep_table(rows: list[dict]) -> str:
    header = f"{'rho':>5} {'K':>5} {'accuracy':>9} {'auc':>7} {'attn_madds':>14}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['rho']:>5.2f} {r['K']:>5d} {r['accuracy']:>9.4f} "
                     f"{r['auc']:>7.4f} {r['attn_madds']:>14d}")
    return "\n".join(lines)

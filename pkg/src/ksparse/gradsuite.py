"""Finite-difference verification suite.

Every analytic backward rule in the package is checked against central
differences in double precision: primitives at 1e-6, model forwards and
losses (including the full training objective on a two-image toy batch) at
1e-4. The sparse set S is held fixed during differencing, matching the
straight-through treatment of top-K selection: the selection operator
itself carries no gradient.

Random inputs use fixed seeds chosen away from relu/abs kinks so the
difference quotient stays on one smooth piece.
"""

from __future__ import annotations

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import losses as ls
from . import model as mdl
from .autodiff import GradCheckReport, Tensor, grad_check
from .model import Architecture

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _param(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Contract an output to a scalar against fixed random weights."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=out.shape))
    return ad.sum_all(ad.mul(out, w))


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    """Push entries out of the (-margin, margin) band around relu/abs kinks."""
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def primitive_checks() -> list[GradCheckReport]:
    reports = []

    def check(name, build, params, tol=PRIMITIVE_TOL):
        reports.append(grad_check(build, params, tol=tol, name=name))

    rng = _rng(11)
    a = _param(rng, (3, 4))
    b = _param(rng, (4, 2))
    check("matmul", lambda: _weighted(ad.matmul(a, b), _rng(100)), {"a": a, "b": b})

    a3 = _param(rng, (2, 3, 4))
    b3 = _param(rng, (2, 4, 2))
    check("matmul_batched", lambda: _weighted(ad.matmul(a3, b3), _rng(101)), {"a": a3, "b": b3})
    w2 = _param(rng, (4, 3))
    check("matmul_broadcast_weight", lambda: _weighted(ad.matmul(a3, w2), _rng(102)),
          {"a": a3, "w": w2})

    x = _param(rng, (3, 4))
    bias = _param(rng, (4,))
    check("add_broadcast", lambda: _weighted(ad.add(x, bias), _rng(103)), {"x": x, "b": bias})

    y = _param(rng, (3, 4))
    check("mul", lambda: _weighted(ad.mul(x, y), _rng(104)), {"x": x, "y": y})
    check("scale", lambda: _weighted(ad.scale(x, -2.5), _rng(105)), {"x": x})

    xr = Tensor(_away_from_zero(_rng(12).uniform(-1, 1, size=(4, 5))), requires_grad=True)
    check("relu", lambda: _weighted(ad.relu(xr), _rng(106)), {"x": xr})
    check("abs", lambda: _weighted(ad.absval(xr), _rng(107)), {"x": xr})

    check("exp", lambda: _weighted(ad.exp(x), _rng(108)), {"x": x})
    xp = _param(_rng(13), (3, 4), lo=0.2, hi=2.0)
    check("log", lambda: _weighted(ad.log(xp), _rng(109)), {"x": xp})
    check("sigmoid", lambda: _weighted(ad.sigmoid(x), _rng(110)), {"x": x})

    check("transpose", lambda: _weighted(ad.transpose(x), _rng(111)), {"x": x})
    check("reshape", lambda: _weighted(ad.reshape(x, (2, 6)), _rng(112)), {"x": x})
    check("concat", lambda: _weighted(ad.concat([x, y], axis=1), _rng(113)), {"x": x, "y": y})

    xg = _param(_rng(14), (5, 3))
    idx = np.array([4, 0, 0, 2])
    check("gather_rows", lambda: _weighted(ad.gather_rows(xg, idx), _rng(114)), {"x": xg})
    xgb = _param(_rng(15), (2, 5, 3))
    idx_b = np.array([[0, 3], [4, 4]])
    check("gather_rows_batched", lambda: _weighted(ad.gather_rows(xgb, idx_b), _rng(115)),
          {"x": xgb})

    check("sum_all", lambda: ad.sum_all(ad.mul(x, x)), {"x": x})
    check("mean_all", lambda: ad.mean_all(ad.mul(x, y)), {"x": x, "y": y})
    check("sum_axis", lambda: _weighted(ad.sum_axis(ad.mul(x, y), -1), _rng(117)), {"x": x, "y": y})
    check("mean_axis", lambda: _weighted(ad.mean_axis(ad.mul(x, y), -2), _rng(118)), {"x": x, "y": y})

    check("sqdiff", lambda: _weighted(ad.sqdiff(x, y), _rng(119)), {"x": x, "y": y})

    xl = _param(_rng(17), (5, 3))
    wl = _param(_rng(17), (3, 4))
    bl = _param(_rng(17), (4,))
    check("linear", lambda: _weighted(ad.linear(xl, wl, bl), _rng(123)),
          {"x": xl, "w": wl, "b": bl})
    # Fused relu needs pre-activations away from the kink; the fixed seed
    # below keeps |x@w+b| > 1e-2 at every checked point.
    check("linear_relu", lambda: _weighted(ad.linear(xl, wl, bl, relu_after=True), _rng(124)),
          {"x": xl, "w": wl, "b": bl})

    check("row_softmax", lambda: _weighted(ad.row_softmax(x), _rng(120)), {"x": x})
    gamma = _param(_rng(16), (4,), lo=0.5, hi=1.5)
    beta = _param(_rng(16), (4,))
    check("layer_norm", lambda: _weighted(ad.layer_norm(x, gamma, beta), _rng(121)),
          {"x": x, "gamma": gamma, "beta": beta})
    check("l2_normalize", lambda: _weighted(ad.l2_normalize_rows(x), _rng(122)), {"x": x})
    return reports


def toy_architecture() -> Architecture:
    return Architecture(height=16, width=16, channels=1, patch=8, d=8, n_blocks=1,
                        mlp_hidden=8, sal_hidden=(16, 8), d_z=4, n_classes=2)


def _toy_params(arch: Architecture, seed: int = 7) -> mdl.ModelParams:
    params = mdl.init_params(arch, _rng(seed), dtype=np.float64)
    # Random biases avoid symmetric dead zones in relu layers during differencing.
    rng = _rng(seed + 1)
    for name, t in params.tensors.items():
        if name.endswith(".bias"):
            t.data = rng.uniform(-0.05, 0.05, size=t.data.shape)
    return params


def model_checks() -> list[GradCheckReport]:
    reports = []
    arch = toy_architecture()
    params = _toy_params(arch)
    rng = _rng(21)
    L, d = arch.n_patches, arch.d
    x = Tensor(rng.uniform(0.0, 1.0, size=(L, arch.patch_dim)))

    def check(name, build, group_prefixes, tol=MODEL_TOL):
        group = params.group(*group_prefixes)
        reports.append(grad_check(build, group, tol=tol, name=name))

    check("embed_patches", lambda: _weighted(mdl.embed_patches(x, params), _rng(200)),
          ("embed.",))

    e_fixed = Tensor(_rng(22).uniform(-1, 1, size=(L, d)))
    check("saliency_forward",
          lambda: _weighted(mdl.saliency_forward(e_fixed, params), _rng(201)),
          ("saliency.",))
    check("backbone_dense",
          lambda: _weighted(mdl.backbone_forward(e_fixed, params), _rng(202)),
          ("block",))
    s_hat_fixed = attn.normalize_scores(Tensor(_rng(23).uniform(-1, 1, size=(L,))))
    _, S = attn.select_topk(s_hat_fixed.data, 0.5)
    check("backbone_sparse",
          lambda: _weighted(mdl.backbone_forward(e_fixed, params, S=S,
                                                 s_hat=s_hat_fixed,
                                                 bias_mode="saliency"), _rng(203)),
          ("block",))
    check("projection_forward",
          lambda: _weighted(mdl.projection_forward(e_fixed, params), _rng(204)),
          ("proj.",))
    check("classifier_forward",
          lambda: _weighted(mdl.classifier_forward(e_fixed, params), _rng(205)),
          ("cls.",))
    h_sel = Tensor(_rng(24).uniform(-1, 1, size=(S.size, d)))
    check("recon_forward",
          lambda: _weighted(mdl.recon_forward(h_sel, params), _rng(206)),
          ("recon.",))

    # The attention operators themselves, differentiated through q, k, v.
    rng = _rng(25)
    q = _param(rng, (L, d))
    k = _param(rng, (L, d))
    v = _param(rng, (L, d))
    reports.append(grad_check(
        lambda: _weighted(attn.dense_attention(q, k, v)[0], _rng(207)),
        {"q": q, "k": k, "v": v}, tol=MODEL_TOL, name="dense_attention"))
    reports.append(grad_check(
        lambda: _weighted(attn.sparse_attention(q, k, v, S)[0], _rng(208)),
        {"q": q, "k": k, "v": v}, tol=MODEL_TOL, name="sparse_attention"))
    s_raw = _param(_rng(26), (L,))
    reports.append(grad_check(
        lambda: _weighted(attn.sparse_attention(
            q, k, v, S, s_hat=attn.normalize_scores(s_raw),
            bias_mode="saliency")[0], _rng(209)),
        {"q": q, "k": k, "v": v, "s": s_raw}, tol=MODEL_TOL,
        name="sparse_attention_saliency_bias"))
    return reports


def _toy_batch(params: mdl.ModelParams, arch: Architecture, rho: float):
    """Two images, two deterministic views each, plus the frozen selection."""
    rng = _rng(31)
    images = rng.uniform(0.1, 0.9, size=(2, arch.height, arch.width, 1))
    views = [img for img in images] + [img[:, ::-1] for img in images]
    x = Tensor(np.stack([mdl.partition_patches(v, arch.patch).patches for v in views]))
    e = mdl.embed_patches(x, params)
    s_hat = attn.normalize_scores(mdl.saliency_forward(e, params))
    _, S = attn.select_topk(s_hat.data, rho)
    return x, S


def loss_checks() -> list[GradCheckReport]:
    reports = []
    rng = _rng(41)

    raw_a = _param(rng, (3, 4))
    raw_b = _param(rng, (3, 4))

    def nce_loss():
        batch = ls.ContrastBatch(z_a=ad.l2_normalize_rows(raw_a),
                                 z_b=ad.l2_normalize_rows(raw_b), tau=0.2)
        return ls.info_nce(batch)

    reports.append(grad_check(nce_loss, {"z_a": raw_a, "z_b": raw_b},
                              tol=MODEL_TOL, name="info_nce"))

    L, ppc = 6, 8
    s_raw = _param(_rng(42), (L,))
    patches = Tensor(_rng(43).uniform(0, 1, size=(L, ppc)))
    S = np.array([1, 4, 5])
    p_rec = _param(_rng(44), (S.size, ppc))

    def sparse_loss():
        s_hat = attn.normalize_scores(s_raw)
        return ls.sparsity_loss(s_hat, 1.0 / L, 0.33, patches, p_rec, S, 0.05).total

    reports.append(grad_check(sparse_loss, {"s": s_raw, "p_recon": p_rec},
                              tol=MODEL_TOL, name="sparsity_loss"))

    probs_raw = _param(_rng(45), (4, 3))
    labels = np.array([0, 2, 1, 2])
    reports.append(grad_check(
        lambda: ls.cross_entropy(ad.row_softmax(probs_raw), labels),
        {"logits": probs_raw}, tol=MODEL_TOL, name="cross_entropy"))

    reports.append(end_to_end_check())
    return reports


def end_to_end_check() -> GradCheckReport:
    """L_total on a 2-image toy batch, every parameter, fixed selection."""
    arch = toy_architecture()
    params = _toy_params(arch, seed=8)
    cfg_like = {"rho": 0.5, "tau": 0.2, "lam": 0.5, "t_ind": 0.05}
    x, S = _toy_batch(params, arch, cfg_like["rho"])

    def build():
        e = mdl.embed_patches(x, params)
        s = mdl.saliency_forward(e, params)
        s_hat = attn.normalize_scores(s)
        h = mdl.backbone_forward(e, params, S=S, s_hat=s_hat, bias_mode="saliency")
        z = mdl.projection_forward(h, params)
        z_a = ad.gather_rows(z, np.arange(2))
        z_b = ad.gather_rows(z, np.arange(2, 4))
        l_con = ls.info_nce(ls.ContrastBatch(z_a=z_a, z_b=z_b, tau=cfg_like["tau"]))
        h_sel = ad.gather_rows(h, S)
        p_rec = mdl.recon_forward(h_sel, params)
        l_sp = ls.sparsity_loss(s_hat, 1.0 / arch.n_patches, cfg_like["rho"],
                                x, p_rec, S, cfg_like["t_ind"])
        return ls.total_loss(l_con, l_sp.total, cfg_like["lam"])

    return grad_check(build, params.tensors, tol=MODEL_TOL, name="end_to_end_total_loss")


SUITE_GROUPS = {
    "diffcore": primitive_checks,
    "model": model_checks,
    "losses": loss_checks,
}


def run_suite(module: str = "all") -> tuple[list[GradCheckReport], bool]:
    """Run the requested group(s); returns (reports, all passed)."""
    if module == "all":
        groups = list(SUITE_GROUPS)
    elif module in SUITE_GROUPS:
        groups = [module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; "
                         f"expected all|{'|'.join(SUITE_GROUPS)}")
    reports: list[GradCheckReport] = []
    for g in groups:
        reports.extend(SUITE_GROUPS[g]())
    return reports, all(r.passed for r in reports)

"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, eval, bench, gradcheck, inspect.
Every failure path exits nonzero with a structured message on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attention as attn
from .autodiff import Tensor
from . import bench as bench_mod
from . import checkpoint as ckpt
from . import gradsuite
from . import model as mdl
from . import synthdata
from . import training
from .config import RunConfig, parse_config
from .errors import ConfigError, KsparseError

METRIC_COLUMNS = ("step", "l_contrast", "l_sparse_soft", "l_sparse_hard", "l_total")


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config("", env=dict(os.environ))
    with open(path) as f:
        return parse_config(f.read(), env=dict(os.environ))


def _load_data(path: str, cfg: RunConfig | None = None):
    samples, header = synthdata.load_dataset(path)
    if cfg is not None and (header["height"] != cfg.height or header["width"] != cfg.width
                            or header["channels"] != cfg.channels
                            or header["patch"] != cfg.patch):
        raise ConfigError(
            f"dataset geometry {header['height']}x{header['width']}x"
            f"{header['channels']} patch {header['patch']} does not match config")
    return samples


def _check_arch_match(cfg: RunConfig, loaded_cfg: RunConfig) -> None:
    if cfg.arch() != loaded_cfg.arch():
        raise ConfigError("config architecture does not match the checkpoint; "
                          "adjust the config or use the checkpoint's settings")


def _write_metrics_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(c, "")) for c in METRIC_COLUMNS) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def cmd_gen_data(args) -> int:
    with open(args.spec) as f:
        spec = synthdata.parse_synth_spec(f.read())
    samples = synthdata.generate(spec)
    synthdata.save_dataset(samples, args.out, patch=spec.patch)
    n_pos = sum(s.label for s in samples)
    print(f"wrote {len(samples)} samples ({n_pos} label-1) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    samples = _load_data(args.data, cfg)
    result = training.run_pretraining(samples, cfg, log=print)
    ckpt.save_checkpoint(args.out, result.params, cfg)
    metrics_path = args.out + ".metrics.csv"
    cache_path = args.out + ".cache"
    _write_metrics_csv(metrics_path, result.metrics)
    ckpt.save_cache(cache_path, result.cache)
    print(f"checkpoint -> {args.out}")
    print(f"metrics    -> {metrics_path}")
    print(f"cache      -> {cache_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    params, loaded_cfg, _ = ckpt.load_checkpoint(args.ckpt)
    _check_arch_match(cfg, loaded_cfg)
    samples = _load_data(args.data, cfg)
    cache = ckpt.load_cache(args.cache) if args.cache else None
    metrics = training.run_finetune(samples, params, cfg, cache, steps=cfg.steps,
                                    log=print)
    ckpt.save_checkpoint(args.out, params, cfg)
    print(f"final train accuracy {metrics[-1]['accuracy']:.3f}")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    params, loaded_cfg, _ = ckpt.load_checkpoint(args.ckpt)
    _check_arch_match(cfg, loaded_cfg)
    samples = _load_data(args.data, cfg)
    cache = ckpt.load_cache(args.cache) if args.cache else None
    scores = training.evaluate(samples, params, cfg, cache=cache)
    print(f"accuracy {scores['accuracy']:.4f}")
    print(f"auc      {scores['auc']:.4f}")
    return 0


def _parse_int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


def _parse_sweep(raw: str) -> dict[str, list[int]]:
    """Parse 'L=16,64;K=19;d=64' into named integer lists."""
    out: dict[str, list[int]] = {}
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad sweep segment {part!r}, expected name=values")
        name, values = part.split("=", 1)
        name = name.strip()
        if name not in ("L", "K", "d"):
            raise ConfigError(f"sweep names must be L, K, or d, got {name!r}")
        out[name] = _parse_int_list(values)
    return out


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    lists = _parse_sweep(args.sweep) if args.sweep else {}
    Ls = lists.get("L") or [cfg.n_patches]
    Ks = lists.get("K")
    ds = lists.get("d") or [cfg.d]
    sweep = []
    for L in Ls:
        ks = Ks if Ks else [max(1, int(np.floor(cfg.rho * L + 1e-9)))]
        for K in ks:
            for d in ds:
                sweep.append((L, K, d))
    rows = bench_mod.bench_report(sweep, n_blocks=cfg.n_blocks, trials=args.trials)
    print(bench_mod.report_table(rows))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(bench_mod.report_csv(rows))
        print(f"csv -> {args.csv}")
    return 0


def cmd_gradcheck(args) -> int:
    reports, ok = gradsuite.run_suite(args.module)
    for r in reports:
        print(r)
    print(f"{sum(r.passed for r in reports)}/{len(reports)} checks passed")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    params, cfg, _ = ckpt.load_checkpoint(args.ckpt)
    samples = _load_data(args.data, cfg)
    if not 0 <= args.image < len(samples):
        raise ConfigError(f"image index {args.image} out of range [0, {len(samples)})")
    sample = samples[args.image]
    x = Tensor(mdl.partition_patches(sample.image, cfg.patch).patches.astype(cfg.dtype))
    e = mdl.embed_patches(x, params)
    sal_in = e if cfg.saliency_input == "embedded" else x
    state = attn.build_saliency_state(mdl.saliency_forward(sal_in, params),
                                      cfg.rho, cfg.theta_value())

    gh, gw = cfg.height // cfg.patch, cfg.width // cfg.patch
    pgm_path = args.out + ".pgm"
    _write_pgm(pgm_path, state.s_hat.reshape(gh, gw))
    support_path = args.out + ".support.txt"
    with open(support_path, "w") as f:
        f.write(" ".join(str(int(i)) for i in state.S) + "\n")
    print(f"heatmap  -> {pgm_path} ({gh}x{gw})")
    print(f"support  -> {support_path} (K={state.K})")
    if args.row_sums:
        maps: list = []
        mdl.backbone_forward(e, params, S=state.S, s_hat=Tensor(state.s_hat),
                             bias_mode=cfg.bias_mode, collect_maps=maps)
        rs_path = args.out + ".rowsums.txt"
        with open(rs_path, "w") as f:
            for b, amap in enumerate(maps):
                sums = amap.dense().sum(axis=-1)
                f.write(f"block {b}: " + " ".join(f"{v:.6f}" for v in sums) + "\n")
        print(f"row sums -> {rs_path}")
    return 0


def _write_pgm(path: str, grid: np.ndarray) -> None:
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(int)
    with open(path, "w") as f:
        f.write(f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n")
        for row in pixels:
            f.write(" ".join(str(v) for v in row) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksparse",
                                description="Saliency-driven top-K sparse attention workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("pretrain", help="contrastive pretraining")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_pretrain)

    ft = sub.add_parser("finetune", help="supervised fine-tuning with frozen saliency")
    ft.add_argument("--config", required=True)
    ft.add_argument("--data", required=True)
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--cache", required=True)
    ft.add_argument("--out", required=True)
    ft.set_defaults(fn=cmd_finetune)

    ev = sub.add_parser("eval", help="accuracy and AUC on a dataset")
    ev.add_argument("--config", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--cache", default=None)
    ev.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="FLOP model and wall-clock comparison")
    b.add_argument("--config", default=None)
    b.add_argument("--sweep", default=None,
                   help="named lists, e.g. 'L=16,64,256;K=19;d=64'")
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--csv", default=None, help="also write the report as CSV")
    b.set_defaults(fn=cmd_bench)

    gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    gc.add_argument("--module", default="all", choices=["all", "diffcore", "model", "losses"])
    gc.set_defaults(fn=cmd_gradcheck)

    ins = sub.add_parser("inspect", help="dump saliency heatmap and sparse set")
    ins.add_argument("--ckpt", required=True)
    ins.add_argument("--data", required=True)
    ins.add_argument("--image", type=int, required=True)
    ins.add_argument("--out", required=True)
    ins.add_argument("--row-sums", action="store_true")
    ins.set_defaults(fn=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except KsparseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

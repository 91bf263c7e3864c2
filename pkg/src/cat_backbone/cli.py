"""Command-line entry point.

Exit codes: 0 success, 1 gradient check failed, 2 usage/config error,
3 data/file error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import analysis
from .backbone import check_input_size, forward_features
from .checkpoint import Container, load_checkpoint, read_container, save_checkpoint, write_container
from .config import CatConfig, preset
from .errors import CheckpointFormatError, ConfigError, DivisibilityError, ShapeError
from .gradcheck import THRESHOLD, run_gradchecks, summarize
from .train import train_toy, write_metrics_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

RUN_OPTIONS = {"variant", "steps", "seed", "batch_size", "peak_lr", "min_lr", "warmup_steps",
               "weight_decay", "clip_grad_norm", "eval_samples", "noise"}


class UsageError(Exception):
    pass


def load_config_file(path: str) -> tuple[CatConfig, dict]:
    """Parse a JSON run file: ``CatConfig`` fields plus run options.

    ``"variant"`` selects a preset that the remaining architecture keys
    override. Unknown keys are rejected.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    run = {k: raw.pop(k) for k in list(raw) if k in RUN_OPTIONS}
    base = preset(run["variant"]).to_dict() if "variant" in run else {}
    base.update(raw)
    return CatConfig.from_dict(base), run


def _resolve_config(args) -> tuple[CatConfig, dict]:
    if getattr(args, "config", None):
        return load_config_file(args.config)
    if getattr(args, "variant", None):
        return preset(args.variant), {}
    raise UsageError("one of --variant or --config is required")


def _parse_size(text: str | None, default: tuple[int, int]) -> tuple[int, int]:
    if text is None:
        return default
    try:
        h, w = (int(v) for v in text.lower().replace("×", "x").split("x"))
    except ValueError:
        raise UsageError(f"--input must look like 224x224, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise UsageError(f"--input sides must be positive, got {text!r}")
    return h, w


# ------------------------------------------------------------------ commands


def cmd_summary(args) -> int:
    cfg, _ = _resolve_config(args)
    H, W = _parse_size(args.input, cfg.base_input)
    Hp, Wp = check_input_size(cfg, H, W)
    breakdown = analysis.param_breakdown(cfg)
    print(f"variant {cfg.name}  input {H}x{W}  patch size n={cfg.patch_size}  "
          f"embedding {cfg.embed_variant}  cpsa heads {cfg.cpsa_heads}")
    print(f"{'stage':<6} {'down':>5} {'resolution':>16} {'ipsa heads':>10} {'CABs':>5} {'params':>14}")
    for i, (dim, depth, heads, rate) in enumerate(zip(cfg.dims, cfg.depths, cfg.heads, cfg.down_rates)):
        params = sum(v for k, v in breakdown.items() if k.startswith(f"stages.{i}."))
        res = f"{Hp // rate}x{Wp // rate}x{dim}"
        print(f"{i + 1:<6} {rate:>4}x {res:>16} {heads:>10} {depth:>5} {params:>14,}")
    stem = breakdown["patch_embed"] + breakdown.get("abs_pos", 0)
    print(f"stem (embedding + abs. position): {stem:,}   head: {breakdown['head']:,}")
    total = sum(breakdown.values())
    print(f"total parameters: {total:,} ({total / 1e6:.2f} M)")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.kernel:
        missing = [k for k in ("h", "w", "c") if getattr(args, k) is None]
        if args.kernel != "msa" and args.n is None:
            missing.append("n")
        if missing:
            raise UsageError(f"--kernel {args.kernel} needs " + ", ".join(f"--{k}" for k in missing))
        if args.kernel == "msa":
            value = analysis.flops_msa(args.h, args.w, args.c)
        elif args.kernel == "ipsa":
            value = analysis.flops_ipsa(args.h, args.w, args.c, args.n)
        else:
            value = analysis.flops_cpsa(args.h, args.w, args.c, args.n)
        print(json.dumps({"kernel": args.kernel, "macs": value}) if args.json else value)
        return EXIT_OK
    cfg, _ = _resolve_config(args)
    H, W = _parse_size(args.input, cfg.base_input)
    report = analysis.model_flops(cfg, H, W)
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.dtype != "f64":
        raise UsageError("gradient checks run in float64 only (--dtype f64)")
    dims = {"small": dict(C=8, n=2, H=4, B=2), "tiny": dict(C=4, n=2, H=2, B=1)}[args.dims]
    results = run_gradchecks(seed=args.seed, inject_bug=args.inject_bug, **dims)
    for r in results:
        print(f"{r.block:<18} {r.target:<14} {r.error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    worst = summarize(results)
    failed = [b for b, e in worst.items() if e >= THRESHOLD]
    for block, err in worst.items():
        print(f"{block:<18} max rel err {err:.3e}  {'FAIL' if block in failed else 'PASS'}")
    if failed:
        print(f"FAIL: {', '.join(failed)}")
        return EXIT_FAIL
    print("all blocks PASS")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, run = _resolve_config(args)
    steps = args.steps if args.steps is not None else run.get("steps", 200)
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    opts = {k: run[k] for k in ("batch_size", "peak_lr", "min_lr", "warmup_steps", "weight_decay",
                                "clip_grad_norm", "eval_samples", "noise") if k in run}
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    result = train_toy(cfg, steps=steps, seed=seed, **opts)
    save_checkpoint(result.model, args.out)
    metrics = args.metrics or f"{args.out}.csv"
    write_metrics_csv(metrics, result.trace)
    if result.trace:
        print(f"steps {steps}  initial loss {result.trace[0]['loss']:.4f}  "
              f"final loss {result.trace[-1]['loss']:.4f}  "
              f"held-out acc {result.eval_accuracy:.3f}")
    print(f"checkpoint -> {args.out}\nmetrics -> {metrics}")
    return EXIT_OK


def cmd_features(args) -> int:
    model = load_checkpoint(args.ckpt)
    inp = read_container(args.input)
    if not inp.tensors:
        raise CheckpointFormatError(f"{args.input} holds no tensors")
    x = inp.tensors.get("input", next(iter(inp.tensors.values())))
    if x.ndim == 3:
        x = x[None]
    pyr = forward_features(model.eval(), x.astype(model.dtype))
    out = {f"F{i + 1}": f.data for i, f in enumerate(pyr.maps)}
    write_container(args.out, Container(model.config.to_json(), out))
    for name, arr in out.items():
        print(f"{name}: {'x'.join(map(str, arr.shape))}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_model_args(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--variant", help="named preset: cat-t, cat-s, cat-b or toy")
    g.add_argument("--config", help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cat-backbone", description="Cross attention transformer tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="per-stage shapes, heads, block counts and parameters")
    _add_model_args(p)
    p.add_argument("--input", help="input size HxW (default: config base_input)")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("flops", help="kernel or whole-model MAC counts")
    _add_model_args(p)
    p.add_argument("--input", help="input size HxW")
    p.add_argument("--kernel", choices=["msa", "ipsa", "cpsa"])
    for k in ("h", "w", "c", "n"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64")
    p.add_argument("--dims", choices=["small", "tiny"], default="small")
    p.add_argument("--inject-bug", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic task, write checkpoint + metrics CSV")
    _add_model_args(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="metrics CSV path (default: OUT.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("features", help="write F1..F4 for an input tensor file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="tensor container holding a [B,H,W,3] array")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DivisibilityError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``invdiff-cgm <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 a check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, load_config
from .grid import GridFormatError, make_rng, write_grid
from .measurement import apply_A, make_mask, read_mask, write_mask
from .metrics import evaluate, write_pgm
from .sampler import Inputs, solve
from .scene import load_dataset, make_dataset

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2


class CheckFailed(Exception):
    pass


def _config(args, **flags) -> Config:
    overrides = list(args.set or [])
    overrides += [f"{k}={v}" for k, v in flags.items() if v is not None]
    return load_config(args.config, overrides)


def _echo(cfg: Config, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())


def cmd_gen(args):
    cfg = _config(args, seed=args.seed, scenes=args.scenes, h=args.h, w=args.w)
    out = Path(args.out)
    manifest = make_dataset(cfg.seed, cfg.scenes, cfg.h, cfg.w, out, cfg.n_buildings)
    _echo(cfg, out)
    print(f"wrote {cfg.scenes} scenes to {manifest}")


def cmd_mask(args):
    cfg = _config(args, seed=args.seed, rho=args.rho, h=args.h, w=args.w)
    op = make_mask(make_rng(cfg.seed, 6), cfg.h, cfg.w, cfg.rho)
    write_mask(args.out, op)
    print(f"wrote mask with {op.m} of {cfg.h * cfg.w} cells to {args.out}")


def cmd_train(args):
    from .train import train

    cfg = _config(args, seed=args.seed, epochs=args.epochs, mode=args.mode, dtype=args.dtype)
    out = Path(args.out)
    _echo(cfg, out)
    summary = train(args.manifest, cfg.solver(), cfg.train(), out, log=print)
    print(f"checkpoint {summary['checkpoint']}, final epoch loss {summary['epoch_loss'][-1]:.5f}, "
          f"peak saved bytes {summary['peak_bytes']}")


def _load_model(args, cfg: Config):
    params, solver_cfg = load_checkpoint(args.checkpoint, cfg.solver())
    dtype = np.float64 if cfg.dtype == "f64" else np.float32
    return {k: v.astype(dtype) for k, v in params.items()}, solver_cfg


def cmd_reconstruct(args):
    from .train import test_mask

    cfg = _config(args)
    params, solver_cfg = _load_model(args, cfg)
    ds = load_dataset(args.manifest)
    ids = [s.id for s in ds.scenes]
    if args.scene not in ids:
        raise ValueError(f"scene {args.scene!r} not in {args.manifest}")
    idx = ids.index(args.scene)
    rec = ds.scenes[idx]
    op = read_mask(args.mask) if args.mask else test_mask(cfg.seed, idx, ds.h, ds.w, cfg.rho)
    if (op.h, op.w) != (ds.h, ds.w):
        raise ValueError(f"mask is {op.h}x{op.w} but scenes are {ds.h}x{ds.w}")
    pred = solve(Inputs(op, apply_A(op, rec.cgm), rec.env), params, solver_cfg)
    write_grid(args.out, pred)
    if args.pgm:
        write_pgm(Path(args.out).with_suffix(".pgm"), pred)
    print(f"wrote {args.out}")


def cmd_eval(args):
    from .train import split_indices, test_mask

    cfg = _config(args)
    params, solver_cfg = _load_model(args, cfg)
    ds = load_dataset(args.manifest)
    _, test_idx = split_indices(len(ds), cfg.test_fraction)
    if args.all:
        test_idx = list(range(len(ds)))
    if not test_idx:
        raise ValueError("the test split is empty; set test_fraction > 0 or pass --all")
    records = [ds.scenes[i] for i in test_idx]
    masks = [test_mask(cfg.seed, i, ds.h, ds.w, cfg.rho) for i in test_idx]
    report = evaluate(records, masks, lambda inp: solve(inp, params, solver_cfg), args.dump)
    Path(args.out).write_text(report.to_json() + "\n")
    m, b = report.mean, report.baseline_mean
    print(f"{len(records)} scenes: PSNR {m['psnr']:.2f} dB (baseline {b['psnr']:.2f}), SSIM {m['ssim']:.4f}, "
          f"NMSE {m['nmse']:.4f}, RMSE {m['rmse']:.4f}")


def cmd_gradcheck(args):
    from .checks import MODE_TOL, SLOW_CHECKS, GRADCHECKS, CheckResult, mode_equivalence, run_gradchecks

    names = [n for n in GRADCHECKS if args.full or n not in SLOW_CHECKS]
    rows = run_gradchecks(args.seed, 1, names) if args.dtype == "f64" else []
    dtypes = [np.float64, np.float32] if args.dtype == "f64" else [np.float32]
    for dt in dtypes:
        err, name, same_loss = mode_equivalence(dt, args.seed)
        rows.append(CheckResult(f"mode equivalence {np.dtype(dt).name} (worst: {name})", err, MODE_TOL[dt]))
        rows.append(CheckResult(f"mode loss identical {np.dtype(dt).name}", 0.0 if same_loss else 1.0, 0.0))
    print(f"{'check':58s} {'error':>10s} {'tol':>8s}  result")
    for r in rows:
        print(f"{r.name:58s} {r.error:10.2e} {r.tol:8.0e}  {'pass' if r.ok else 'FAIL'}")
    bad = [r.name for r in rows if not r.ok]
    if bad:
        raise CheckFailed(f"{len(bad)} check(s) failed: {', '.join(bad)}")


def cmd_roundtrip(args):
    from .checks import coupling_roundtrip, step_roundtrip

    rng = make_rng(args.seed, 7)
    dtype = np.float64 if args.dtype == "f64" else np.float32
    tol_h = 1e-10 if dtype is np.float64 else 1e-5
    coupling = max(coupling_roundtrip(rng, k) for _ in range(args.cases) for k in ("residual", "attention", "injector"))
    steps = [step_roundtrip(rng, dtype) for _ in range(args.cases)]
    h_err = max(e for e, _ in steps)
    x_exact = all(x for _, x in steps)
    print(f"coupling round trip (f64) max rel err  {coupling:.2e}  (tol 1e-10)")
    print(f"step h component max rel err ({args.dtype})  {h_err:.2e}  (tol {tol_h:.0e})")
    print(f"step x component bit-exact             {x_exact}")
    if coupling > 1e-10 or h_err > tol_h or not x_exact:
        raise CheckFailed("round-trip error above tolerance")


def cmd_membench(args):
    from .train import format_membench, membench

    cfg = _config(args)
    Ts = tuple(int(t) for t in args.T.split(","))
    dtype = np.float64 if cfg.dtype == "f64" else np.float32
    report = membench(Ts, cfg.unet(), cfg.h, cfg.w, dtype, cfg.seed, cfg.rho, args.timing_reps)
    text = format_membench(report)
    print(text)
    if args.out:
        out = Path(args.out)
        _echo(cfg, out)
        (out / "membench.txt").write_text(text + "\n")
        (out / "membench.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    red = [r["reduction_pct"] for r in report["rows"]]
    if any(b <= a for a, b in zip(red, red[1:])):
        raise CheckFailed("reduction percentage is not strictly increasing in T")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invdiff-cgm",
                                description="Sparse channel gain map reconstruction with an invertible unrolled solver.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic scene dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scenes", type=int)
    sp.add_argument("--h", type=int)
    sp.add_argument("--w", type=int)

    sp = add("mask", cmd_mask, "write a random sampling mask")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--h", type=int)
    sp.add_argument("--w", type=int)

    sp = add("train", cmd_train, "train the unrolled solver")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--mode", choices=("invertible", "cached"))
    sp.add_argument("--dtype", choices=("f32", "f64"))

    sp = add("reconstruct", cmd_reconstruct, "reconstruct one scene from sparse samples")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scene", required=True, help="scene id, e.g. scene_0003")
    sp.add_argument("--mask", help="CGMM mask file (default: the scene's test mask)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pgm", action="store_true", help="also write an 8-bit PGM preview")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on the held-out scenes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--dump", help="directory for PGM dumps")
    sp.add_argument("--all", action="store_true", help="evaluate every scene, not just the test split")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference and mode-equivalence checks")
    sp.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--full", action="store_true", help="include the slow whole-network checks")

    sp = add("roundtrip", cmd_roundtrip, "inversion round-trip errors")
    sp.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    sp.add_argument("--cases", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("membench", cmd_membench, "peak saved-activation memory per T and mode")
    sp.add_argument("--T", default="1,2,3", help="comma-separated step counts")
    sp.add_argument("--out", help="directory for membench.txt/json")
    sp.add_argument("--timing-reps", type=int, default=0, help="also time this many backprops per mode")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, GridFormatError, CheckpointError, ValueError, FileNotFoundError, KeyError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Evaluate a trained checkpoint across sampling ratios against the back-projection baseline.

    python scripts/ratio_sweep.py --checkpoint results/desk/run/model.idcw \
        --manifest results/desk/data/manifest.json --rhos 0.02,0.05,0.1,0.2
"""

import argparse
import json

import numpy as np

from invdiff_cgm.checkpoint import load_checkpoint
from invdiff_cgm.config import load_config
from invdiff_cgm.metrics import evaluate
from invdiff_cgm.sampler import solve
from invdiff_cgm.scene import load_dataset
from invdiff_cgm.train import split_indices, test_mask


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--rhos", default="0.02,0.05,0.1,0.2")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="JSON file for the sweep table")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    params, solver_cfg = load_checkpoint(args.checkpoint, cfg.solver())
    params = {k: v.astype(np.float32) for k, v in params.items()}
    ds = load_dataset(args.manifest)
    _, test_idx = split_indices(len(ds), cfg.test_fraction)
    records = [ds.scenes[i] for i in test_idx]
    rows = []
    print(f"{'rho':>6} {'PSNR':>7} {'baseline':>9} {'SSIM':>7} {'NMSE':>7}")
    for rho in (float(r) for r in args.rhos.split(",")):
        masks = [test_mask(cfg.seed, i, ds.h, ds.w, rho) for i in test_idx]
        rep = evaluate(records, masks, lambda inp: solve(inp, params, solver_cfg))
        rows.append({"rho": rho, "model": rep.mean, "baseline": rep.baseline_mean})
        print(f"{rho:>6.3f} {rep.mean['psnr']:>7.2f} {rep.baseline_mean['psnr']:>9.2f} "
              f"{rep.mean['ssim']:>7.4f} {rep.mean['nmse']:>7.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()

"""Peak saved-activation memory and wall time of the two backprop modes versus T.

    python scripts/membench.py --T 1,2,3,4,6 --reps 3 --out results/membench
"""

import argparse
import json
from pathlib import Path

import numpy as np

from invdiff_cgm.train import format_membench, membench
from invdiff_cgm.unet import UNetConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", default="1,2,3", help="comma-separated step counts")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--base", type=int, default=16, help="U-Net base channels")
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    ap.add_argument("--reps", type=int, default=3, help="timed backprops per mode (0 to skip timing)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()

    Ts = tuple(int(t) for t in args.T.split(","))
    dtype = np.float32 if args.dtype == "f32" else np.float64
    report = membench(Ts, UNetConfig(base_channels=args.base), args.size, args.size, dtype, args.seed,
                      timing_reps=args.reps)
    text = format_membench(report)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "membench.txt").write_text(text + "\n")
        (out / "membench.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

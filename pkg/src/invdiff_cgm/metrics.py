"""Reconstruction quality metrics and dataset-level evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def psnr(pred, target, x_max: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for (near) exact matches."""
    if not x_max > 0:
        raise ValueError(f"x_max must be positive, got {x_max}")
    err = mse(pred, target)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(x_max ** 2 / err))


def rmse(pred, target) -> float:
    return math.sqrt(mse(pred, target))


def nmse(pred, target) -> float:
    pred, target = _pair(pred, target)
    denom = float(np.sum(target ** 2))
    if denom == 0:
        raise ValueError("nmse is undefined for an all-zero target")
    return float(np.sum((pred - target) ** 2)) / denom


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _single_channel(a):
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ValueError(f"ssim expects a single-channel grid, got {a.shape}")
        a = a[:, :, 0]
    return a


def _filter_valid(x, g):
    k = g.size
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    pred, target = _pair(pred, target)
    pred, target = _single_channel(pred), _single_channel(target)
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"grid {pred.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(pred, g), _filter_valid(target, g)
    sxx = _filter_valid(pred * pred, g) - mu_x ** 2
    syy = _filter_valid(target * target, g) - mu_y ** 2
    sxy = _filter_valid(pred * target, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def all_metrics(pred, target) -> dict:
    return {"psnr": psnr(pred, target), "ssim": ssim(pred, target),
            "nmse": nmse(pred, target), "rmse": rmse(pred, target)}


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_scene: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    baseline_mean: dict = field(default_factory=dict)

    @property
    def psnr_gain(self) -> float:
        return self.mean["psnr"] - self.baseline_mean["psnr"]

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "psnr_gain_db": self.psnr_gain}, indent=1, sort_keys=True)


def _means(rows, key):
    names = ("psnr", "ssim", "nmse", "rmse")
    return {k: float(np.mean([r[key][k] for r in rows])) for k in names}


def evaluate(records, masks, reconstruct, dump_dir=None) -> EvalReport:
    """Score ``reconstruct(inputs) -> grid`` on ``records`` against the back-projection baseline.

    ``masks`` holds one measurement operator per record. Optional PGM dumps of
    prediction, target and absolute error go to ``dump_dir``.
    """
    from .sampler import Inputs
    from .measurement import apply_A

    if len(records) != len(masks):
        raise ValueError(f"{len(records)} scenes but {len(masks)} masks")
    if not records:
        raise ValueError("nothing to evaluate")
    rows = []
    for rec, op in zip(records, masks):
        inputs = Inputs(op, apply_A(op, rec.cgm), rec.env)
        pred = reconstruct(inputs)
        rows.append({"id": rec.id, "model": all_metrics(pred, rec.cgm),
                     "baseline": all_metrics(inputs.backproj, rec.cgm)})
        if dump_dir is not None:
            d = Path(dump_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_pgm(d / f"{rec.id}_pred.pgm", pred)
            write_pgm(d / f"{rec.id}_target.pgm", rec.cgm)
            write_pgm(d / f"{rec.id}_error.pgm", np.abs(np.asarray(pred, np.float64) - rec.cgm))
    return EvalReport(rows, _means(rows, "model"), _means(rows, "baseline"))


def write_pgm(path, grid, lo: float = 0.0, hi: float = 1.0) -> None:
    """8-bit binary PGM (P5) of a single-channel grid, values clipped to [lo, hi]."""
    a = _single_channel(np.asarray(grid, dtype=np.float64))
    scaled = np.round(255.0 * (np.clip(a, lo, hi) - lo) / (hi - lo)).astype(np.uint8)
    h, w = scaled.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)

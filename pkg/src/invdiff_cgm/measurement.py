"""Sparse cell-sampling operator, its adjoint, and data-consistency projection."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MASK_MAGIC = b"CGMM"
_MASK_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class MeasurementOp:
    """Sampling operator A: picks the cells listed in ``indices`` (flattened, row-major).

    Indices are strictly increasing and distinct, so A A^T = I holds by
    construction rather than numerically.
    """

    h: int
    w: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("MeasurementOp needs a non-empty 1-D index list")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("MeasurementOp indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.h * self.w:
            raise ValueError(f"MeasurementOp index out of range for {self.h}x{self.w} grid")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def m(self) -> int:
        return int(self.indices.size)

    @property
    def ratio(self) -> float:
        return self.m / (self.h * self.w)

    def _check_grid(self, x):
        if x.shape[:2] != (self.h, self.w) or (x.ndim == 3 and x.shape[2] != 1):
            raise ValueError(f"grid shape {x.shape} does not match operator ({self.h}, {self.w}, 1)")


def make_mask(rng: np.random.Generator, h: int, w: int, rho: float) -> MeasurementOp:
    if not 0 < rho <= 1:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {rho}")
    n = h * w
    m = max(1, int(round(rho * n)))
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return MeasurementOp(h, w, idx)


def apply_A(op: MeasurementOp, x) -> np.ndarray:
    op._check_grid(x)
    return x.reshape(-1)[op.indices]


def apply_At(op: MeasurementOp, y) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (op.m,):
        raise ValueError(f"measurement vector of length {y.shape} does not match m = {op.m}")
    out = np.zeros(op.h * op.w, dtype=y.dtype)
    out[op.indices] = y
    return out.reshape(op.h, op.w, 1)


def dc_project(op: MeasurementOp, x0, y, eta: float = 1.0) -> np.ndarray:
    """``x0 - eta * A^T(A(x0) - y)``; with eta = 1 the sampled cells become ``y``."""
    op._check_grid(x0)
    out = x0.copy()
    flat = out.reshape(-1)
    if eta == 1.0:
        flat[op.indices] = y
    else:
        flat[op.indices] -= eta * (flat[op.indices] - y)
    return out


def dc_project_backward(op: MeasurementOp, g, eta: float = 1.0) -> np.ndarray:
    """Vector-Jacobian product of :func:`dc_project` w.r.t. ``x0``: (I - eta A^T A) g."""
    out = g.copy()
    out.reshape(-1)[op.indices] *= 1.0 - eta
    return out


def measure(op: MeasurementOp, x, noise_std: float = 0.0, rng=None) -> np.ndarray:
    """Sample ``x`` through A, optionally adding white Gaussian noise."""
    y = apply_A(op, x).copy()
    if noise_std > 0:
        if rng is None:
            raise ValueError("noisy measurements need an rng")
        y += rng.normal(0.0, noise_std, size=y.shape).astype(y.dtype)
    return y


def write_mask(path, op: MeasurementOp) -> None:
    header = _MASK_HEADER.pack(MASK_MAGIC, op.h, op.w, op.m)
    Path(path).write_bytes(header + op.indices.astype("<u4").tobytes())


def read_mask(path) -> MeasurementOp:
    raw = Path(path).read_bytes()
    if len(raw) < _MASK_HEADER.size:
        raise ValueError(f"{path}: file too short for a CGMM header")
    magic, h, w, m = _MASK_HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MASK_MAGIC.decode()!r} (h={h} w={w} m={m})")
    payload = raw[_MASK_HEADER.size:]
    if len(payload) != 4 * m:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {4 * m}")
    return MeasurementOp(h, w, np.frombuffer(payload, dtype="<u4").astype(np.int64))

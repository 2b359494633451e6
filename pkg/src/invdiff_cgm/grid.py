"""Dense (h, w, c) grids: primitive differentiable ops, RNG, and the CGMG file format.

A grid is a plain ``numpy.ndarray`` of shape ``(h, w, c)`` in row-major,
channel-minor order with dtype float32 or float64. Every differentiable
primitive comes with an explicit backward function; there is no tape or
autodiff graph.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

GRID_MAGIC = b"CGMG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sHBIII")


class GridFormatError(ValueError):
    """Raised when a grid file has a bad header or payload."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional stream key.

    Streams keyed by e.g. ``(seed, scene_index)`` are independent of one
    another and of the order in which they are created.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def as_grid(x, dtype=None) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"expected a rank-3 (h, w, c) grid, got shape {x.shape}")
    return x


def check_finite(x: np.ndarray, what: str = "grid") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise FloatingPointError(f"{what} has {bad} non-finite entries")
    return x


# ---------------------------------------------------------------- convolution


def _padding(pad, kh: int, kw: int) -> tuple[int, int]:
    if pad == "valid":
        return 0, 0
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"'same' padding needs an odd kernel, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")


def _check_conv(x: np.ndarray, kernel: np.ndarray, stride: int) -> None:
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects input (h, w, c) and kernel (kh, kw, cin, cout); "
                         f"got input {x.shape} and kernel {kernel.shape}")
    if kernel.shape[2] != x.shape[2]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")


def conv_output_size(n: int, k: int, p: int, stride: int) -> int:
    return (n + 2 * p - k) // stride + 1


def _zero_pad(x, ph, pw):
    if not (ph or pw):
        return x
    h, w, c = x.shape
    xp = np.zeros((h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[ph:ph + h, pw:pw + w] = x
    return xp


def _correlate(xp, kernel, stride, ho, wo):
    kh, kw, _, cout = kernel.shape
    out = np.zeros((ho, wo, cout), dtype=np.result_type(xp, kernel))
    for i in range(kh):
        for j in range(kw):
            win = xp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += win @ kernel[i, j]
    return out


def conv2d(x, kernel, stride: int = 1, pad="same", bias=None) -> np.ndarray:
    """Cross-correlation of ``x`` (h, w, cin) with ``kernel`` (kh, kw, cin, cout)."""
    _check_conv(x, kernel, stride)
    kh, kw, _, cout = kernel.shape
    ph, pw = _padding(pad, kh, kw)
    h, w, _ = x.shape
    ho, wo = conv_output_size(h, kh, ph, stride), conv_output_size(w, kw, pw, stride)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kernel.shape} larger than padded input {x.shape}")
    out = _correlate(_zero_pad(x, ph, pw), kernel, stride, ho, wo)
    if bias is not None:
        out += bias
    return out


def _scatter_adjoint(dy, kernel, stride, padded_shape):
    # Adjoint of the windowed sum in conv2d, onto the padded input.
    kh, kw = kernel.shape[:2]
    ho, wo = dy.shape[:2]
    dxp = np.zeros(padded_shape, dtype=np.result_type(dy, kernel))
    for i in range(kh):
        for j in range(kw):
            dxp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dy @ kernel[i, j].T
    return dxp


def _kernel_grad(xp, dy, kshape, stride):
    kh, kw, cin, cout = kshape
    ho, wo = dy.shape[:2]
    dy2 = dy.reshape(-1, cout)
    dk = np.empty(kshape, dtype=np.result_type(xp, dy))
    for i in range(kh):
        for j in range(kw):
            win = xp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            dk[i, j] = win.reshape(-1, cin).T @ dy2
    return dk


def conv2d_backward(x, kernel, dy, stride: int = 1, pad="same"):
    """Return ``(dx, dkernel, dbias)`` for ``conv2d(x, kernel, stride, pad, bias)``."""
    kh, kw = kernel.shape[:2]
    ph, pw = _padding(pad, kh, kw)
    h, w, c = x.shape
    xp = _zero_pad(x, ph, pw)
    if stride == 1:
        # full correlation with the flipped, channel-transposed kernel
        kflip = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = _correlate(_zero_pad(dy, kh - 1 - ph, kw - 1 - pw), kflip, 1, h, w)
    else:
        dx = _scatter_adjoint(dy, kernel, stride, xp.shape)[ph:ph + h, pw:pw + w]
    dk = _kernel_grad(xp, dy, kernel.shape, stride)
    return dx, dk, dy.reshape(-1, dy.shape[2]).sum(axis=0)


def conv2d_transpose(y, kernel, stride: int = 1, output_size=None) -> np.ndarray:
    """Adjoint of ``conv2d(., kernel, stride, pad='valid')``.

    ``y`` has ``kernel.shape[3]`` channels; the result has ``kernel.shape[2]``.
    The natural output size is ``((h-1)*stride + kh, (w-1)*stride + kw)``;
    ``output_size`` may enlarge it to cover rows/columns a strided conv
    never reads (those receive zeros).
    """
    if y.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d_transpose expects input (h, w, c) and kernel (kh, kw, cin, cout); "
                         f"got input {y.shape} and kernel {kernel.shape}")
    if y.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d_transpose channel mismatch: input {y.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw, cin, _ = kernel.shape
    h, w = y.shape[:2]
    nh, nw = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = output_size if output_size is not None else (nh, nw)
    if conv_output_size(oh, kh, 0, stride) != h or conv_output_size(ow, kw, 0, stride) != w:
        raise ValueError(f"output_size {output_size} incompatible with input {y.shape}, "
                         f"kernel {kernel.shape}, stride {stride}")
    return _scatter_adjoint(y, kernel, stride, (oh, ow, cin))


def conv2d_transpose_backward(y, kernel, dx, stride: int = 1):
    """Return ``(dy, dkernel)`` for ``x = conv2d_transpose(y, kernel, stride)``."""
    dy = conv2d(dx, kernel, stride=stride, pad="valid")
    dk = _kernel_grad(dx, y, kernel.shape, stride)
    return dy, dk


# ---------------------------------------------------------------- rearrangement


def pixel_shuffle(x, r: int) -> np.ndarray:
    """(h, w, c*r*r) -> (h*r, w*r, c); channel ``c*r*r + i*r + j`` lands at offset (i, j)."""
    h, w, c = x.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"pixel_shuffle: channels {c} not divisible by r^2 = {r * r}")
    if r == 1:
        return x
    return x.reshape(h, w, c // (r * r), r, r).transpose(0, 3, 1, 4, 2).reshape(h * r, w * r, c // (r * r))


def pixel_unshuffle(x, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`: (h*r, w*r, c) -> (h, w, c*r*r)."""
    h, w, c = x.shape
    if r < 1 or h % r or w % r:
        raise ValueError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by r = {r}")
    if r == 1:
        return x
    return x.reshape(h // r, r, w // r, r, c).transpose(0, 2, 4, 1, 3).reshape(h // r, w // r, c * r * r)


def concat_channels(parts) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    hw = parts[0].shape[:2]
    for p in parts[1:]:
        if p.shape[:2] != hw:
            raise ValueError(f"concat_channels spatial mismatch: {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=2)


def split_channels(x, sizes) -> list[np.ndarray]:
    offsets = np.cumsum(sizes)[:-1]
    if sum(sizes) != x.shape[2]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to channel count of {x.shape}")
    return np.split(x, offsets, axis=2)


# ---------------------------------------------------------------- file I/O


def write_grid(path, grid) -> None:
    grid = as_grid(grid)
    code = DTYPE_CODES.get(grid.dtype)
    if code is None:
        raise GridFormatError(f"unsupported dtype {grid.dtype}; expected float32 or float64")
    check_finite(grid, str(path))
    h, w, c = grid.shape
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, code, h, w, c)
    payload = np.ascontiguousarray(grid, dtype=DTYPES[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise GridFormatError(f"{path}: file too short for a CGMG header ({len(raw)} bytes)")
    magic, version, code, h, w, c = _GRID_HEADER.unpack_from(raw)
    dump = f"magic={magic!r} version={version} dtype={code} h={h} w={w} c={c}"
    if magic != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic, expected {GRID_MAGIC.decode()!r} ({dump})")
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported version, expected {GRID_VERSION} ({dump})")
    if code not in DTYPES:
        raise GridFormatError(f"{path}: unknown dtype code ({dump})")
    dt = DTYPES[code]
    expected = h * w * c * dt.itemsize
    payload = raw[_GRID_HEADER.size:]
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "oversized"
        raise GridFormatError(f"{path}: {kind} payload, {len(payload)} of {expected} bytes ({dump})")
    return np.frombuffer(payload, dtype=dt).reshape(h, w, c).astype(dt.newbyteorder("="))

"""IDCW checkpoints: named little-endian tensors (network weights, step scalars, schedule)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import DTYPE_CODES, DTYPES, make_rng
from .sampler import Schedule, SolverConfig, init_solver_params

MAGIC = b"IDCW"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, schedule: Schedule) -> Path:
    tensors = dict(params)
    tensors["schedule.alpha_bar"] = np.asarray(schedule.alpha_bar, dtype=np.float64)
    out = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        code = DTYPE_CODES.get(a.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes())
    path = Path(path)
    path.write_bytes(b"".join(out))
    return path


def read_tensors(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC.decode()!r}")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            if code not in DTYPES:
                raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
            dt = DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(raw):
                raise CheckpointError(f"{path}: truncated payload for tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=size // dt.itemsize, offset=pos) \
                .reshape(dims).astype(dt.newbyteorder("="))
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return tensors


def load_checkpoint(path, cfg: SolverConfig) -> tuple[dict, SolverConfig]:
    """Load weights, checking every tensor against the shapes ``cfg`` implies.

    The stored schedule replaces ``cfg.schedule`` in the returned config.
    """
    tensors = read_tensors(path)
    ab = tensors.pop("schedule.alpha_bar", None)
    if ab is None:
        raise CheckpointError(f"{path}: no schedule.alpha_bar tensor")
    schedule = Schedule(tuple(ab.tolist()))
    cfg = SolverConfig(cfg.unet, schedule, cfg.eta, cfg.shared_weights)
    template = init_solver_params(cfg, make_rng(0), np.float64)
    missing = sorted(set(template) - set(tensors))
    extra = sorted(set(tensors) - set(template))
    if missing or extra:
        raise CheckpointError(f"{path}: tensors do not match the configured network "
                              f"(missing {missing[:5]}, unexpected {extra[:5]})")
    for name, ref in template.items():
        if tensors[name].shape != ref.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                                  f"config expects {ref.shape}")
    return tensors, cfg

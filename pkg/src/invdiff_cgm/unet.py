"""Prior-informed invertible U-Net noise estimator.

Layout (levels 0, 1, 2 have ``base * multipliers[level]`` channels and scale
``r = 2**level``)::

    head   conv3x3(concat(x_t, env)) -> level 0
    down0  [residual, injector] couplings @ level 0, conv 2x2/2 -> level 1
    down1  [residual, injector] couplings @ level 1, conv 2x2/2 -> level 2
    up0    [residual, attention, injector] @ level 2, convT 2x2/2 -> level 1, fuse skip
    up1    [residual, residual, injector] @ level 1, convT 2x2/2 -> level 0, fuse skip
    tail   conv3x3(silu(groupnorm(.))) -> 1 channel

Couplings are invertible; everything between them (head, resolution changes,
skip fusion, tail) is a cached boundary.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import blocks
from .blocks import Coupling, accumulate
from .grid import (
    concat_channels,
    conv2d,
    conv2d_backward,
    conv2d_transpose,
    conv2d_transpose_backward,
)
from .ledger import NullLedger


class Mode(enum.Enum):
    INFER = "infer"
    CACHE_ALL = "cache_all"
    CACHE_BOUNDARY = "cache_boundary"


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 16
    multipliers: tuple = (1, 2, 4)
    groups: int = 8
    attn_max_positions: int = 256
    env_channels: int = 2

    def __post_init__(self):
        if len(self.multipliers) != 3:
            raise ValueError("the U-Net has exactly two down and two up stages (three levels)")
        for level, c in enumerate(self.channels):
            r = 2 ** level
            if c % 2 or (c // 2) % (r * r):
                raise ValueError(f"level {level}: {c} channels cannot host a coupling injector at r={r}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.multipliers]

    def check_input(self, h: int, w: int) -> None:
        if h % 4 or w % 4:
            raise ValueError(f"U-Net input {h}x{w} must have dims divisible by 4")
        n = (h // 4) * (w // 4)
        if n > self.attn_max_positions:
            raise ValueError(f"bottleneck {h // 4}x{w // 4} exceeds attention cap {self.attn_max_positions}")


DOWN_KINDS = (("residual", "injector"), ("residual", "injector"))
UP_KINDS = (("residual", "attention", "injector"), ("residual", "residual", "injector"))


def _modules(cfg: UNetConfig, prefix: str):
    down = [[Coupling(k, f"{prefix}.down{i}.m{j}", cfg.groups, cfg.attn_max_positions)
             for j, k in enumerate(kinds)] for i, kinds in enumerate(DOWN_KINDS)]
    up = [[Coupling(k, f"{prefix}.up{i}.m{j}", cfg.groups, cfg.attn_max_positions)
           for j, k in enumerate(kinds)] for i, kinds in enumerate(UP_KINDS)]
    return down, up


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_unet_params(cfg: UNetConfig, rng, dtype=np.float32, prefix="unet") -> dict:
    """Fresh parameters; every coupling starts as the identity map."""
    c = cfg.channels
    p = {}
    blocks.init_time_embed(p, rng, f"{prefix}.temb", dtype)
    p[f"{prefix}.head.w"] = _he(rng, (3, 3, 1 + cfg.env_channels, c[0]), dtype)
    p[f"{prefix}.head.b"] = np.zeros(c[0], dtype)
    for i, kinds in enumerate(DOWN_KINDS):
        for j, kind in enumerate(kinds):
            blocks.init_coupling(p, rng, f"{prefix}.down{i}.m{j}", kind, c[i], 2 ** i, dtype)
        p[f"{prefix}.down{i}.conv.w"] = _he(rng, (2, 2, c[i], c[i + 1]), dtype)
        p[f"{prefix}.down{i}.conv.b"] = np.zeros(c[i + 1], dtype)
    for i, kinds in enumerate(UP_KINDS):
        level = 2 - i
        for j, kind in enumerate(kinds):
            blocks.init_coupling(p, rng, f"{prefix}.up{i}.m{j}", kind, c[level], 2 ** level, dtype)
        # stored in forward-conv layout (kh, kw, out, in); the transpose maps in -> out
        p[f"{prefix}.up{i}.convT.w"] = _he(rng, (2, 2, c[level - 1], c[level]), dtype)
        p[f"{prefix}.up{i}.fuse.w"] = _he(rng, (1, 1, 2 * c[level - 1], c[level - 1]), dtype)
        # no transpose-conv bias (the fuse bias absorbs it) and no bias on the
        # last fuse, whose output goes straight into the tail group norm
        if i < len(UP_KINDS) - 1:
            p[f"{prefix}.up{i}.fuse.b"] = np.zeros(c[level - 1], dtype)
    p[f"{prefix}.tail.gn.scale"] = np.ones(c[0], dtype)
    p[f"{prefix}.tail.gn.shift"] = np.zeros(c[0], dtype)
    p[f"{prefix}.tail.conv.w"] = (_he(rng, (3, 3, c[0], 1), dtype) * 0.1).astype(dtype)
    p[f"{prefix}.tail.conv.b"] = np.zeros(1, dtype)
    return p


class Tape:
    """Saved state of one U-Net forward, consumed (and freed) by :func:`unet_backward`."""

    def __init__(self, mode: Mode, ledger):
        self.mode = mode
        self.ledger = ledger if ledger is not None else NullLedger()
        self._entries = {}
        self.consumed = False

    def save(self, name, tag, obj):
        self._entries[name] = (obj, self.ledger.register(tag, obj))

    def pop(self, name):
        obj, handle = self._entries.pop(name)
        self.ledger.release(handle)
        return obj

    def __len__(self):
        return len(self._entries)

    def clear(self):
        for name in list(self._entries):
            self.pop(name)


def unet_forward(x_noisy, env, backproj, t, params, cfg: UNetConfig, mode=Mode.INFER,
                 ledger=None, prefix="unet"):
    """Noise estimate for ``x_noisy`` at step ``t``. Returns ``(e_hat, tape)``.

    The returned values never depend on ``mode``; only what is retained does.
    ``tape`` is None in INFER mode.
    """
    mode = Mode(mode)
    h, w = x_noisy.shape[:2]
    cfg.check_input(h, w)
    dtype = params[f"{prefix}.head.w"].dtype
    x_noisy = x_noisy.astype(dtype, copy=False)
    env = env.astype(dtype, copy=False)
    backproj = backproj.astype(dtype, copy=False)
    keep = mode is Mode.CACHE_ALL
    tape = Tape(mode, ledger) if mode is not Mode.INFER else None

    def save(name, tag, obj):
        if tape is not None:
            tape.save(name, tag, obj)

    down, up = _modules(cfg, prefix)
    temb, feats = blocks.time_embed(t, params, f"{prefix}.temb")
    save("temb", "boundary-cache", (temb, feats))

    inp = concat_channels([x_noisy, env])
    x = conv2d(inp, params[f"{prefix}.head.w"], 1, "same", params[f"{prefix}.head.b"])
    save("head", "boundary-cache", inp)

    skips = []
    for i, stage in enumerate(down):
        aux = (temb, (backproj, env, 2 ** i))
        for j, m in enumerate(stage):
            x, cache = m.forward(x, aux, params, keep_cache=keep)
            if keep:
                save(f"down{i}.m{j}", "module-internal", cache)
        save(f"down{i}.out", "boundary-cache", x)
        skips.append(x)
        x = conv2d(x, params[f"{prefix}.down{i}.conv.w"], 2, "valid", params[f"{prefix}.down{i}.conv.b"])

    for i, stage in enumerate(up):
        level = 2 - i
        aux = (temb, (backproj, env, 2 ** level))
        for j, m in enumerate(stage):
            x, cache = m.forward(x, aux, params, keep_cache=keep)
            if keep:
                save(f"up{i}.m{j}", "module-internal", cache)
        save(f"up{i}.out", "boundary-cache", x)
        u = conv2d_transpose(x, params[f"{prefix}.up{i}.convT.w"], 2)
        skip = skips.pop()
        save(f"up{i}.fuse", "boundary-cache", (u, skip))
        x = conv2d(concat_channels([u, skip]), params[f"{prefix}.up{i}.fuse.w"], 1, "valid",
                   params.get(f"{prefix}.up{i}.fuse.b"))

    n, gn_cache = blocks.group_norm(x, params[f"{prefix}.tail.gn.scale"], params[f"{prefix}.tail.gn.shift"],
                                    cfg.groups)
    a = blocks.silu(n)
    e_hat = conv2d(a, params[f"{prefix}.tail.conv.w"], 1, "same", params[f"{prefix}.tail.conv.b"])
    save("tail", "boundary-cache", {"gn": gn_cache, "n": n, "a": a})
    return e_hat, tape


def unet_backward(de, tape: Tape, params, cfg: UNetConfig, grads: dict, backproj=None, env=None,
                  prefix="unet"):
    """Accumulate parameter gradients into ``grads``; return the gradient w.r.t. ``x_noisy``.

    In CACHE_BOUNDARY mode the coupling inputs are rebuilt with their inverses,
    so ``backproj`` and ``env`` (the injector context) must be supplied. Each
    tape entry is released as soon as it has been used.
    """
    if tape is None or tape.mode is Mode.INFER:
        raise RuntimeError("unet_backward needs a tape from a CACHE_ALL or CACHE_BOUNDARY forward")
    if tape.consumed:
        raise RuntimeError("this tape has already been consumed by a backward pass")
    tape.consumed = True
    inverting = tape.mode is Mode.CACHE_BOUNDARY
    if inverting and (backproj is None or env is None):
        raise ValueError("CACHE_BOUNDARY backward needs the injector context (backproj, env)")
    dtype = params[f"{prefix}.head.w"].dtype
    if inverting:
        backproj = backproj.astype(dtype, copy=False)
        env = env.astype(dtype, copy=False)
    down, up = _modules(cfg, prefix)
    temb, feats = tape.pop("temb")
    dtemb = np.zeros_like(temb)

    def through_stage(stage, name, y, dy, level):
        aux = (temb, (backproj, env, 2 ** level))
        for j in reversed(range(len(stage))):
            m = stage[j]
            if inverting:
                y, dy, dt = m.backward(y, dy, aux, params, grads, tape.ledger)
            else:
                dy, dt = m.backward_cached(dy, tape.pop(f"{name}.m{j}"), params, grads)
            if dt is not None:
                dtemb[...] += dt
        return dy

    tail = tape.pop("tail")
    da, dk, db = conv2d_backward(tail["a"], params[f"{prefix}.tail.conv.w"], de, 1, "same")
    accumulate(grads, f"{prefix}.tail.conv.w", dk)
    accumulate(grads, f"{prefix}.tail.conv.b", db)
    dn = blocks.silu_backward(da, tail["n"])
    dx, dscale, dshift = blocks.group_norm_backward(dn, tail["gn"], params[f"{prefix}.tail.gn.scale"], cfg.groups)
    accumulate(grads, f"{prefix}.tail.gn.scale", dscale)
    accumulate(grads, f"{prefix}.tail.gn.shift", dshift)
    del tail

    dskips = []
    for i in reversed(range(len(up))):
        level = 2 - i
        u, skip = tape.pop(f"up{i}.fuse")
        cu = u.shape[2]
        dcat, dk, db = conv2d_backward(concat_channels([u, skip]), params[f"{prefix}.up{i}.fuse.w"], dx, 1, "valid")
        accumulate(grads, f"{prefix}.up{i}.fuse.w", dk)
        if f"{prefix}.up{i}.fuse.b" in params:
            accumulate(grads, f"{prefix}.up{i}.fuse.b", db)
        du, dskip = dcat[:, :, :cu], dcat[:, :, cu:]
        dskips.append(dskip)
        del u, skip
        y = tape.pop(f"up{i}.out")
        dx, dk = conv2d_transpose_backward(y, params[f"{prefix}.up{i}.convT.w"], du, 2)
        accumulate(grads, f"{prefix}.up{i}.convT.w", dk)
        dx = through_stage(up[i], f"up{i}", y, dx, level)

    for i in reversed(range(len(down))):
        y = tape.pop(f"down{i}.out")
        dy, dk, db = conv2d_backward(y, params[f"{prefix}.down{i}.conv.w"], dx, 2, "valid")
        accumulate(grads, f"{prefix}.down{i}.conv.w", dk)
        accumulate(grads, f"{prefix}.down{i}.conv.b", db)
        dy = dy + dskips[i]
        dx = through_stage(down[i], f"down{i}", y, dy, i)

    inp = tape.pop("head")
    dinp, dk, db = conv2d_backward(inp, params[f"{prefix}.head.w"], dx, 1, "same")
    accumulate(grads, f"{prefix}.head.w", dk)
    accumulate(grads, f"{prefix}.head.b", db)
    blocks.time_embed_backward(dtemb, feats, params, grads, f"{prefix}.temb")
    if len(tape):
        raise RuntimeError(f"tape entries left after backward: {list(tape._entries)}")
    return dinp[:, :, :1]

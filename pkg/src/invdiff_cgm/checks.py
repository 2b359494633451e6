"""Self-checks shared by the CLI and the test suite.

* central finite differences against every analytic backward (f64),
* CACHED vs INVERTIBLE gradient equivalence,
* inversion round trips of couplings and sampler steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from .grid import conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, make_rng
from .measurement import apply_A, make_mask
from .sampler import (Inputs, SamplerState, Schedule, SolverConfig, fuse_output, init_solver_params, step_forward,
                      step_inverse)
from .train import Sample, backprop, l1_loss
from .unet import Mode, UNetConfig, unet_backward, unet_forward

FD_STEP = 1e-6
FD_TOL = 1e-6
MODE_TOL = {np.float64: 1e-8, np.float32: 1e-4}


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)


def rel_err(a, b) -> float:
    """Normwise relative difference; 0 when both are exactly zero."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def fd_error(loss_fn, tensors: dict, analytic: dict, rng, probes: int = 6, step: float = FD_STEP) -> float:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    Up to ``probes`` random entries of every tensor are perturbed in place
    (and restored). Returns the normwise relative error over all probes.
    """
    num, ana = [], []
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name} must be contiguous to be probed in place")
        for i in rng.choice(flat.size, min(probes, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + step
            lp = loss_fn()
            flat[i] = old - step
            lm = loss_fn()
            flat[i] = old
            num.append((lp - lm) / (2 * step))
            ana.append(np.asarray(analytic[name]).reshape(-1)[i])
    return rel_err(ana, num)


def _randomize(params: dict, rng, scale: float = 0.3) -> dict:
    for k, p in params.items():
        p[...] = scale * rng.standard_normal(p.shape)
        if k.endswith("gn.scale"):
            p += 1.0
    return params


def _grid(rng, h, w, c):
    return rng.standard_normal((h, w, c))


def _weighted(out, R):
    return float(np.sum(out * R))


# ---------------------------------------------------------------- per-block checks


def check_conv(rng, stride=1, pad="same", k=3):
    x = _grid(rng, 9, 8, 3)
    kern = rng.standard_normal((k, k, 3, 4))
    b = rng.standard_normal(4)
    R = rng.standard_normal(conv2d(x, kern, stride, pad, b).shape)
    dx, dk, db = conv2d_backward(x, kern, R, stride, pad)
    return fd_error(lambda: _weighted(conv2d(x, kern, stride, pad, b), R),
                    {"x": x, "k": kern, "b": b}, {"x": dx, "k": dk, "b": db}, rng)


def check_conv_transpose(rng):
    y = _grid(rng, 4, 5, 4)
    kern = rng.standard_normal((2, 2, 3, 4))
    R = rng.standard_normal(conv2d_transpose(y, kern, 2).shape)
    dy, dk = conv2d_transpose_backward(y, kern, R, 2)
    return fd_error(lambda: _weighted(conv2d_transpose(y, kern, 2), R), {"y": y, "k": kern}, {"y": dy, "k": dk}, rng)


def check_group_norm(rng):
    x = _grid(rng, 5, 6, 8) * 2 + 1
    scale, shift = 1 + 0.3 * rng.standard_normal(8), rng.standard_normal(8)
    out, cache = blocks.group_norm(x, scale, shift, 4)
    R = rng.standard_normal(out.shape)
    dx, ds, dsh = blocks.group_norm_backward(R, cache, scale, 4)
    return fd_error(lambda: _weighted(blocks.group_norm(x, scale, shift, 4)[0], R),
                    {"x": x, "scale": scale, "shift": shift}, {"x": dx, "scale": ds, "shift": dsh}, rng)


def check_silu(rng):
    x = _grid(rng, 4, 4, 3) * 3
    R = rng.standard_normal(x.shape)
    return fd_error(lambda: _weighted(blocks.silu(x), R), {"x": x}, {"x": blocks.silu_backward(R, x)}, rng)


def check_time_embed(rng):
    p = {}
    blocks.init_time_embed(p, rng, "temb", np.float64)
    _randomize(p, rng)
    t = float(rng.integers(1, 4))
    R = rng.standard_normal(blocks.TEMB_DIM)
    temb, feats = blocks.time_embed(t, p)
    g = {}
    blocks.time_embed_backward(R, feats, p, g)
    return fd_error(lambda: _weighted(blocks.time_embed(t, p)[0], R), p, g, rng)


def _branch_case(rng, kind):
    p = {}
    c, r = 4, 2
    if kind == "residual":
        blocks.init_residual(p, rng, "b", c, np.float64)
    elif kind == "attention":
        blocks.init_attention(p, rng, "b", c, np.float64)
    else:
        blocks.init_injector(p, rng, "b", c, r, dtype=np.float64)
    _randomize(p, rng)
    x = _grid(rng, 4, 4, c)
    temb = rng.standard_normal(blocks.TEMB_DIM)
    ctx = (_grid(rng, 4 * r, 4 * r, 1), _grid(rng, 4 * r, 4 * r, 2), r)
    return p, x, temb, ctx


def check_branch(rng, kind):
    p, x, temb, ctx = _branch_case(rng, kind)
    out, cache = blocks.branch_forward(kind, x, (temb, ctx), p, "b", groups=2)
    R = rng.standard_normal(out.shape)
    g = {}
    dx, dtemb = blocks.branch_backward(kind, R, cache, p, "b", g, groups=2)
    tensors, analytic = dict(p), dict(g)
    tensors["x"], analytic["x"] = x, dx
    if dtemb is not None:
        tensors["temb"], analytic["temb"] = temb, dtemb
    return fd_error(lambda: _weighted(blocks.branch_forward(kind, x, (temb, ctx), p, "b", groups=2)[0], R),
                    tensors, analytic, rng)


def _coupling_case(rng, kind, c=8):
    p = {}
    r = 2
    blocks.init_coupling(p, rng, "m", kind, c, r, np.float64)
    _randomize(p, rng)
    x = _grid(rng, 4, 4, c)
    aux = (rng.standard_normal(blocks.TEMB_DIM), (_grid(rng, 8, 8, 1), _grid(rng, 8, 8, 2), r))
    return blocks.Coupling(kind, "m", groups=2), p, x, aux


def check_coupling(rng, kind, inverting: bool):
    m, p, x, aux = _coupling_case(rng, kind)
    y, cache = m.forward(x, aux, p, keep_cache=True)
    R = rng.standard_normal(y.shape)
    g = {}
    if inverting:
        _, dx, dtemb = m.backward(y, R, aux, p, g)
    else:
        dx, dtemb = m.backward_cached(R, cache, p, g)
    tensors, analytic = dict(p), dict(g)
    tensors["x"], analytic["x"] = x, dx
    if dtemb is not None:
        tensors["temb"], analytic["temb"] = aux[0], dtemb
    return fd_error(lambda: _weighted(m.forward(x, aux, p)[0], R), tensors, analytic, rng)


def _tiny_solver(T=3, base=8):
    return SolverConfig(unet=UNetConfig(base_channels=base), schedule=Schedule.default(T))


def check_unet(rng, mode=Mode.CACHE_BOUNDARY):
    cfg = _tiny_solver()
    p = _randomize(init_solver_params(cfg, rng, np.float64), rng, 0.2)
    x, env, bp = _grid(rng, 16, 16, 1), rng.random((16, 16, 2)), _grid(rng, 16, 16, 1)
    e, tape = unet_forward(x, env, bp, 2, p, cfg.unet, mode)
    R = rng.standard_normal(e.shape)
    g = {}
    dx = unet_backward(R, tape, p, cfg.unet, g, bp, env)
    tensors = {k: v for k, v in p.items() if k.startswith("unet.")}
    tensors["x"] = x
    analytic = dict(g, x=dx)
    return fd_error(lambda: _weighted(unet_forward(x, env, bp, 2, p, cfg.unet)[0], R), tensors, analytic, rng,
                    probes=2)


def _solver_case(rng, T=3, h=16, rho=0.2):
    cfg = _tiny_solver(T)
    p = _randomize(init_solver_params(cfg, rng, np.float64), rng, 0.15)
    p["sampler.s_T"][...] = 1.0 + 0.2 * rng.standard_normal()
    p["sampler.s_0"][...] = 1.0 + 0.2 * rng.standard_normal()
    target = rng.random((h, h, 1))
    op = make_mask(rng, h, h, rho)
    sample = Sample(Inputs(op, apply_A(op, target), rng.random((h, h, 2))), target)
    return cfg, p, sample


def _solve_loss(sample, p, cfg):
    from .sampler import solve
    return l1_loss(solve(sample.inputs, p, cfg), sample.target)[0]


def check_solver(rng, mode="invertible"):
    """End-to-end: L1 loss of the full unrolled solver w.r.t. every parameter."""
    cfg, p, sample = _solver_case(rng)
    res = backprop([sample], p, cfg, mode)
    return fd_error(lambda: _solve_loss(sample, p, cfg), p, res.grads, rng, probes=2)


def check_fuse(rng):
    x, hh = _grid(rng, 5, 5, 1), _grid(rng, 5, 5, 1)
    s0 = np.array(rng.standard_normal())
    R = rng.standard_normal(x.shape)
    p = {"sampler.s_0": s0}
    st = SamplerState(x, hh, 0)
    analytic = {"s0": np.sum(hh * R), "x": R, "h": s0 * R}
    return fd_error(lambda: _weighted(fuse_output(st, p), R), {"s0": s0, "x": x, "h": hh}, analytic, rng)


def check_l1(rng):
    pred, target = _grid(rng, 6, 6, 1), _grid(rng, 6, 6, 1)
    _, g = l1_loss(pred, target)
    return fd_error(lambda: l1_loss(pred, target)[0], {"pred": pred}, {"pred": g}, rng)


GRADCHECKS = {
    "conv2d same": lambda rng: check_conv(rng),
    "conv2d stride 2": lambda rng: check_conv(rng, 2, "valid", 2),
    "conv2d 1x1 valid": lambda rng: check_conv(rng, 1, "valid", 1),
    "conv2d transpose": check_conv_transpose,
    "group norm": check_group_norm,
    "silu": check_silu,
    "time embedding": check_time_embed,
    "residual branch": lambda rng: check_branch(rng, "residual"),
    "attention branch": lambda rng: check_branch(rng, "attention"),
    "injector branch": lambda rng: check_branch(rng, "injector"),
    "coupling residual cached": lambda rng: check_coupling(rng, "residual", False),
    "coupling residual inverted": lambda rng: check_coupling(rng, "residual", True),
    "coupling attention cached": lambda rng: check_coupling(rng, "attention", False),
    "coupling attention inverted": lambda rng: check_coupling(rng, "attention", True),
    "coupling injector cached": lambda rng: check_coupling(rng, "injector", False),
    "coupling injector inverted": lambda rng: check_coupling(rng, "injector", True),
    "unet boundary cache": check_unet,
    "unet cache all": lambda rng: check_unet(rng, Mode.CACHE_ALL),
    "output fusion": check_fuse,
    "l1 loss": check_l1,
    "solver invertible": check_solver,
    "solver cached": lambda rng: check_solver(rng, "cached"),
}

SLOW_CHECKS = {"unet boundary cache", "unet cache all", "solver invertible", "solver cached"}


def run_gradchecks(seed: int = 0, repeats: int = 1, names=None) -> list[CheckResult]:
    out = []
    for name in names or GRADCHECKS:
        for rep in range(repeats):
            rng = make_rng(seed, 100, rep, sum(map(ord, name)))
            suffix = f" #{rep}" if repeats > 1 else ""
            out.append(CheckResult(name + suffix, GRADCHECKS[name](rng), FD_TOL))
    return out


# ---------------------------------------------------------------- mode equivalence


def mode_equivalence(dtype=np.float64, seed: int = 0, h: int = 32, base: int = 8, T: int = 3,
                     batch: int = 2) -> tuple[float, str, bool]:
    """Worst per-tensor relative gradient gap between the two backprop modes.

    Returns ``(worst error, tensor name, losses bit-identical)``.
    """
    from .train import synthetic_sample

    rng = make_rng(seed, 200)
    cfg = _tiny_solver(T, base)
    params = init_solver_params(cfg, rng, dtype)
    for p in params.values():  # move off the identity init so every path carries gradient
        p += (0.05 * rng.standard_normal(p.shape)).astype(dtype)
    samples = [synthetic_sample(seed * 1000 + i, h, h, 0.1) for i in range(batch)]
    a = backprop(samples, params, cfg, "cached")
    b = backprop(samples, params, cfg, "invertible")
    worst, name = max((rel_err(a.grads[k], b.grads[k]), k) for k in params)
    return worst, name, a.loss == b.loss


# ---------------------------------------------------------------- round trips


def coupling_roundtrip(rng, kind) -> float:
    m, p, x, aux = _coupling_case(rng, kind)
    y, _ = m.forward(x, aux, p)
    return rel_err(m.inverse(y, aux, p), x)


def step_roundtrip(rng, dtype=np.float64, t=None) -> tuple[float, bool]:
    """Returns (relative error of the rebuilt h, x-component bit-exact)."""
    cfg = _tiny_solver(3)
    p = init_solver_params(cfg, rng, dtype)
    for k, v in p.items():
        v += (0.1 * rng.standard_normal(v.shape)).astype(dtype)
    h = 16
    target = rng.random((h, h, 1)).astype(dtype)
    op = make_mask(rng, h, h, 0.1)
    inputs = Inputs(op, apply_A(op, target), rng.random((h, h, 2)).astype(dtype))
    t = int(rng.integers(1, cfg.T + 1)) if t is None else t
    state = SamplerState(rng.standard_normal((h, h, 1)).astype(dtype),
                         rng.standard_normal((h, h, 1)).astype(dtype), t)
    nxt, _, _ = step_forward(state, inputs, p, cfg)
    back, _, _ = step_inverse(nxt, inputs, p, cfg)
    return rel_err(back.h_aux, state.h_aux), bool(np.array_equal(back.x_hat, state.x_hat))

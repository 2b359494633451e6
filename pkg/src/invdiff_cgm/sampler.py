"""Unrolled deterministic DDIM solver with an invertible two-state update.

Each step maps ``(x_t, h_t)`` to ``(x_{t-1}, h_{t-1})`` with

    x_{t-1} = (1 - v_t) * F_t(x_t) + v_t * h_t
    h_{t-1} = x_t

where ``F_t`` is noise prediction, DDIM clean-map estimate, data-consistency
projection and DDIM update. Since ``h_{t-1}`` is a copy of ``x_t``, the step
is inverted by recomputing ``F_t(h_{t-1})``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .blocks import accumulate
from .measurement import MeasurementOp, apply_At, dc_project, dc_project_backward
from .unet import Mode, UNetConfig, init_unet_params, unet_backward, unet_forward

V_MIN, V_MAX = 0.05, 0.95
V_SPAN = 0.9


@dataclass(frozen=True)
class Schedule:
    alpha_bar: tuple = (1.0, 0.75, 0.35, 0.05)

    def __post_init__(self):
        ab = tuple(float(a) for a in self.alpha_bar)
        object.__setattr__(self, "alpha_bar", ab)
        if len(ab) < 2:
            raise ValueError("schedule needs at least one step (alpha_bar of length T+1)")
        if ab[0] != 1.0:
            raise ValueError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if not all(0.0 < a <= 1.0 for a in ab):
            raise ValueError(f"alpha_bar entries must lie in (0, 1]: {ab}")
        if any(b >= a for a, b in zip(ab, ab[1:])):
            raise ValueError(f"alpha_bar must be strictly decreasing in t: {ab}")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def default(cls, T: int = 3) -> "Schedule":
        """The default schedule truncated to ``T`` steps (geometric beyond T = 3)."""
        base = cls().alpha_bar
        if T <= 3:
            return cls(base[:T + 1])
        return cls((1.0, *np.geomspace(0.75, 0.05, T).tolist()))


@dataclass(frozen=True)
class SolverConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    schedule: Schedule = field(default_factory=Schedule)
    eta: float = 1.0
    shared_weights: bool = True

    @property
    def T(self) -> int:
        return self.schedule.T

    def prefix(self, t: int) -> str:
        return "unet" if self.shared_weights else f"unet.t{t}"


@dataclass(frozen=True)
class Inputs:
    """One reconstruction problem: sampling operator, measurements and environment raster."""

    op: MeasurementOp
    y: np.ndarray
    env: np.ndarray

    @cached_property
    def backproj(self) -> np.ndarray:
        return apply_At(self.op, self.y)

    def astype(self, dtype) -> "Inputs":
        return Inputs(self.op, self.y.astype(dtype, copy=False), self.env.astype(dtype, copy=False))


@dataclass
class SamplerState:
    x_hat: np.ndarray
    h_aux: np.ndarray
    t: int


def init_solver_params(cfg: SolverConfig, rng, dtype=np.float32) -> dict:
    params = {}
    prefixes = ["unet"] if cfg.shared_weights else [cfg.prefix(t) for t in range(1, cfg.T + 1)]
    for pre in prefixes:
        params.update(init_unet_params(cfg.unet, rng, dtype, pre))
    params["sampler.w"] = np.zeros(cfg.T, dtype)
    params["sampler.s_T"] = np.ones((), dtype)
    params["sampler.s_0"] = np.ones((), dtype)
    return params


def step_weight(params, t: int) -> tuple[float, float]:
    """``v_t`` and its derivative with respect to the raw parameter ``w_t``."""
    w = float(params["sampler.w"][t - 1])
    s = 1.0 / (1.0 + math.exp(-w)) if w >= 0 else math.exp(w) / (1.0 + math.exp(w))
    # the clamp only absorbs rounding at full saturation
    return min(V_MIN + V_SPAN * s, V_MAX), V_SPAN * s * (1.0 - s)


def init_state(inputs: Inputs, params, T: int) -> SamplerState:
    bp = inputs.backproj
    return SamplerState(bp, params["sampler.s_T"] * bp, T)


def estimate_x0(x_hat, e_hat, ab: float):
    if not ab > 0:
        raise ValueError(f"alpha_bar must be positive, got {ab}")
    return (x_hat - math.sqrt(1.0 - ab) * e_hat) / math.sqrt(ab)


def ddim_update(x0_bar, e_hat, ab_prev: float):
    if not 0 < ab_prev <= 1:
        raise ValueError(f"alpha_bar must lie in (0, 1], got {ab_prev}")
    return math.sqrt(ab_prev) * x0_bar + math.sqrt(1.0 - ab_prev) * e_hat


def step_operator(x_hat, t: int, inputs: Inputs, params, cfg: SolverConfig, mode=Mode.INFER, ledger=None):
    """One DDIM transition ``F_t``; returns ``(x_diff_{t-1}, unet tape or None)``."""
    if not 1 <= t <= cfg.T:
        raise ValueError(f"step index {t} outside [1, {cfg.T}]")
    ab, ab_prev = cfg.schedule.alpha_bar[t], cfg.schedule.alpha_bar[t - 1]
    e_hat, tape = unet_forward(x_hat, inputs.env, inputs.backproj, t, params, cfg.unet, mode, ledger,
                               cfg.prefix(t))
    x0 = estimate_x0(x_hat, e_hat, ab)
    x0_bar = dc_project(inputs.op, x0, inputs.y, cfg.eta)
    return ddim_update(x0_bar, e_hat, ab_prev), tape


def step_operator_backward(g, tape, t: int, inputs: Inputs, params, cfg: SolverConfig, grads):
    """VJP of :func:`step_operator` w.r.t. its input map; accumulates U-Net gradients."""
    ab, ab_prev = cfg.schedule.alpha_bar[t], cfg.schedule.alpha_bar[t - 1]
    g_x0 = dc_project_backward(inputs.op, math.sqrt(ab_prev) * g, cfg.eta)
    g_e = math.sqrt(1.0 - ab_prev) * g - (math.sqrt(1.0 - ab) / math.sqrt(ab)) * g_x0
    g_x = g_x0 / math.sqrt(ab)
    g_x = g_x + unet_backward(g_e, tape, params, cfg.unet, grads, inputs.backproj, inputs.env, cfg.prefix(t))
    return g_x


def step_forward(state: SamplerState, inputs: Inputs, params, cfg: SolverConfig, mode=Mode.INFER, ledger=None):
    """Returns ``(state_{t-1}, F_t(x_t), tape)``."""
    t = state.t
    if t < 1:
        raise ValueError("no step below t = 0")
    v, _ = step_weight(params, t)
    d, tape = step_operator(state.x_hat, t, inputs, params, cfg, mode, ledger)
    x_prev = (1.0 - v) * d + v * state.h_aux
    return SamplerState(x_prev, state.x_hat, t - 1), d, tape


def step_inverse(state: SamplerState, inputs: Inputs, params, cfg: SolverConfig, mode=Mode.INFER, ledger=None):
    """Rebuild the state at ``t = state.t + 1``. Returns ``(state_t, F_t(x_t), tape)``."""
    t = state.t + 1
    v, _ = step_weight(params, t)
    x_t = state.h_aux
    d, tape = step_operator(x_t, t, inputs, params, cfg, mode, ledger)
    h_t = (state.x_hat - (1.0 - v) * d) / v
    return SamplerState(x_t, h_t, t), d, tape


def step_backward(t: int, x_t, h_t, d, tape, gx, gh, inputs: Inputs, params, cfg: SolverConfig, grads):
    """VJP of the step ``t -> t-1`` given gradients ``gx``/``gh`` of ``x_{t-1}``/``h_{t-1}``.

    Returns the gradients w.r.t. ``x_t`` and ``h_t``; accumulates ``sampler.w``.
    """
    v, dv_dw = step_weight(params, t)
    gw = np.zeros_like(params["sampler.w"])
    gw[t - 1] = np.sum(gx * (h_t - d), dtype=np.float64) * dv_dw
    accumulate(grads, "sampler.w", gw)
    g_x = gh + step_operator_backward((1.0 - v) * gx, tape, t, inputs, params, cfg, grads)
    return g_x, v * gx


def fuse_output(state: SamplerState, params):
    if state.t != 0:
        raise ValueError(f"fuse_output needs the terminal state (t = 0), got t = {state.t}")
    return state.x_hat + params["sampler.s_0"] * state.h_aux


def solve(inputs: Inputs, params, cfg: SolverConfig) -> np.ndarray:
    """Full reconstruction: back-projection init, T invertible steps, output fusion."""
    inputs = inputs.astype(params["sampler.s_0"].dtype)
    state = init_state(inputs, params, cfg.T)
    while state.t > 0:
        state, _, _ = step_forward(state, inputs, params, cfg)
    return fuse_output(state, params)

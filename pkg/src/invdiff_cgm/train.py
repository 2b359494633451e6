"""Loss, the two backprop modes, Adam, the training loop and the memory benchmark.

CACHED keeps every sampler state and a full U-Net tape per step. INVERTIBLE
keeps only the terminal state and rebuilds earlier states on the way back
with :func:`step_inverse`, rerunning each step's U-Net with boundary caching.
Both produce the same loss and, up to rounding in the rebuilt ``h`` states,
the same gradients.
"""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .grid import make_rng
from .ledger import MemoryLedger
from .measurement import apply_A, make_mask, measure
from .sampler import (Inputs, SamplerState, Schedule, SolverConfig, fuse_output, init_solver_params, init_state,
                      step_backward, step_forward, step_inverse)
from .scene import Dataset, env_raster, generate_scene, load_dataset, synthesize_cgm
from .unet import Mode, UNetConfig

DRIFT_TOLERANCE = 1e-3


class BackpropMode(str, enum.Enum):
    CACHED = "cached"
    INVERTIBLE = "invertible"


class TrainingAborted(RuntimeError):
    pass


def l1_loss(pred, target):
    """Mean absolute error and its gradient ``sign(pred - target) / size``."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff), dtype=np.float64)), np.sign(diff) / diff.size


@dataclass
class Sample:
    inputs: Inputs
    target: np.ndarray


@dataclass
class BackpropResult:
    loss: float
    grads: dict
    peak_bytes: int
    live_bytes: int
    peak_by_tag: dict
    drift: float = 0.0  # worst relative error of the rebuilt H_T (INVERTIBLE only)

    @property
    def drift_flagged(self) -> bool:
        return self.drift > DRIFT_TOLERANCE


def _finish_sample(state: SamplerState, sample: Sample, params):
    x0 = fuse_output(state, params)
    loss, g = l1_loss(x0, sample.target.astype(x0.dtype, copy=False))
    g = g.astype(x0.dtype, copy=False)
    grad_s0 = np.asarray(np.sum(state.h_aux * g, dtype=np.float64), dtype=x0.dtype)
    return loss, g, params["sampler.s_0"] * g, grad_s0


def _accumulate_scalar(grads, name, value, dtype):
    grads[name] = grads.get(name, np.zeros((), dtype)) + np.asarray(value, dtype)


def _sample_cached(sample: Sample, params, cfg: SolverConfig, ledger, grads):
    inputs = sample.inputs
    state = init_state(inputs, params, cfg.T)
    saved = {}
    while state.t > 0:
        t = state.t
        nxt, d, tape = step_forward(state, inputs, params, cfg, Mode.CACHE_ALL, ledger)
        saved[t] = (state, d, tape, ledger.register("step-state", (state.x_hat, state.h_aux, d)))
        state = nxt
    terminal = ledger.register("step-state", (state.x_hat, state.h_aux))
    loss, gx, gh, gs0 = _finish_sample(state, sample, params)
    ledger.release(terminal)
    dtype = gx.dtype
    _accumulate_scalar(grads, "sampler.s_0", gs0, dtype)
    for t in range(1, cfg.T + 1):
        st, d, tape, handle = saved.pop(t)
        gx, gh = step_backward(t, st.x_hat, st.h_aux, d, tape, gx, gh, inputs, params, cfg, grads)
        ledger.release(handle)
    # x_T = A^T(Y) is constant; h_T = s_T * A^T(Y)
    _accumulate_scalar(grads, "sampler.s_T", np.sum(gh * inputs.backproj, dtype=np.float64), dtype)
    return loss, 0.0


def _sample_invertible(sample: Sample, params, cfg: SolverConfig, ledger, grads):
    inputs = sample.inputs
    state = init_state(inputs, params, cfg.T)
    while state.t > 0:
        state, _, _ = step_forward(state, inputs, params, cfg, Mode.INFER)
    handle = ledger.register("step-state", (state.x_hat, state.h_aux))
    loss, gx, gh, gs0 = _finish_sample(state, sample, params)
    dtype = gx.dtype
    _accumulate_scalar(grads, "sampler.s_0", gs0, dtype)
    for t in range(1, cfg.T + 1):
        st, d, tape = step_inverse(state, inputs, params, cfg, Mode.CACHE_BOUNDARY, ledger)
        nxt = ledger.register("step-state", (st.x_hat, st.h_aux, d))
        ledger.release(handle)
        gx, gh = step_backward(t, st.x_hat, st.h_aux, d, tape, gx, gh, inputs, params, cfg, grads)
        state, handle = st, nxt
    ledger.release(handle)
    expected = params["sampler.s_T"] * inputs.backproj
    scale = max(float(np.linalg.norm(expected)), np.finfo(dtype).tiny)
    drift = float(np.linalg.norm(state.h_aux - expected)) / scale
    _accumulate_scalar(grads, "sampler.s_T", np.sum(gh * inputs.backproj, dtype=np.float64), dtype)
    return loss, drift


def backprop(batch, params, cfg: SolverConfig, mode, ledger=None) -> BackpropResult:
    """Mean loss over ``batch`` and batch-averaged gradients for every parameter."""
    mode = BackpropMode(mode)
    ledger = ledger if ledger is not None else MemoryLedger()
    ledger.reset_peak()
    dtype = params["sampler.s_0"].dtype
    run = _sample_cached if mode is BackpropMode.CACHED else _sample_invertible
    grads, losses, drift = {}, [], 0.0
    for sample in batch:
        s = Sample(sample.inputs.astype(dtype), sample.target)
        loss, dr = run(s, params, cfg, ledger, grads)
        losses.append(loss)
        drift = max(drift, dr)
    n = len(batch)
    for k in grads:
        grads[k] = (grads[k] / n).astype(params[k].dtype, copy=False)
    for k, p in params.items():
        grads.setdefault(k, np.zeros_like(p))
    report = ledger.report()
    return BackpropResult(float(np.mean(losses)), grads, report["peak_bytes"], report["live_bytes"],
                          dict(report["peak_by_tag"]), drift)


def backprop_cached(batch, params, cfg: SolverConfig, ledger=None) -> BackpropResult:
    return backprop(batch, params, cfg, BackpropMode.CACHED, ledger)


def backprop_invertible(batch, params, cfg: SolverConfig, ledger=None) -> BackpropResult:
    return backprop(batch, params, cfg, BackpropMode.INVERTIBLE, ledger)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-4
    milestones: tuple = (0.62, 0.95)
    gamma: float = 0.1
    batch_size: int = 2
    epochs: int = 40
    mode: str = "invertible"
    dtype: str = "f32"
    rho: float = 0.05
    seed: int = 0
    noise_std: float = 0.0
    test_fraction: float = 0.2
    self_check_every: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        ms = tuple(float(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 0 < m <= 1 for m in ms):
            raise ValueError(f"milestones must be increasing fractions in (0, 1]: {ms}")
        self.milestones = ms
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0 <= self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        BackpropMode(self.mode)
        np_dtype(self.dtype)

    def lr_at(self, epoch: int) -> float:
        steps = sum(epoch >= round(f * self.epochs) for f in self.milestones)
        return self.lr * self.gamma ** steps


def np_dtype(name: str):
    try:
        return {"f32": np.float32, "f64": np.float64}[name]
    except KeyError:
        raise ValueError(f"dtype must be 'f32' or 'f64', got {name!r}") from None


def split_indices(n: int, test_fraction: float) -> tuple[list, list]:
    """Contiguous split: the last ``round(n * test_fraction)`` scenes are held out."""
    n_test = round(n * test_fraction)
    return list(range(n - n_test)), list(range(n - n_test, n))


def train_mask(seed: int, epoch: int, idx: int, h: int, w: int, rho: float):
    return make_mask(make_rng(seed, 1, epoch, idx), h, w, rho)


def test_mask(seed: int, idx: int, h: int, w: int, rho: float):
    return make_mask(make_rng(seed, 2, idx), h, w, rho)


def make_sample(record, op, noise_std: float = 0.0, rng=None) -> Sample:
    y = measure(op, record.cgm, noise_std, rng)
    return Sample(Inputs(op, y, record.env), record.cgm)


def _write_jsonl(fh, obj):
    fh.write(json.dumps(obj, sort_keys=True) + "\n")
    fh.flush()


def train(manifest, solver_cfg: SolverConfig, cfg: TrainConfig, out_dir, params=None, log=None) -> dict:
    """Train on the non-held-out scenes of ``manifest``; returns a summary dict.

    Writes ``metrics.jsonl``, ``model.idcw`` and ``config.json`` into ``out_dir``.
    """
    ds = manifest if isinstance(manifest, Dataset) else load_dataset(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np_dtype(cfg.dtype)
    solver_cfg.unet.check_input(ds.h, ds.w)
    if params is None:
        params = init_solver_params(solver_cfg, make_rng(cfg.seed, 0), dtype)
    train_idx, _ = split_indices(len(ds), cfg.test_fraction)
    if not train_idx:
        raise ValueError("no training scenes after the test split")
    (out / "config.json").write_text(json.dumps(
        {"solver": asdict(solver_cfg), "train": asdict(cfg), "n_train": len(train_idx)},
        indent=1, sort_keys=True) + "\n")
    adam = AdamState()
    ledger = MemoryLedger()
    history = {"epoch_loss": [], "batch_loss": [], "epoch_ms": [], "peak_bytes": 0, "max_drift": 0.0}
    with open(out / "metrics.jsonl", "w") as fh:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = make_rng(cfg.seed, 3, epoch).permutation(train_idx)
            t_epoch = time.perf_counter()
            losses = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                t0 = time.perf_counter()
                batch = []
                for idx in order[start:start + cfg.batch_size]:
                    rec = ds.scenes[int(idx)]
                    op = train_mask(cfg.seed, epoch, int(idx), ds.h, ds.w, cfg.rho)
                    batch.append(make_sample(rec, op, cfg.noise_std, make_rng(cfg.seed, 4, epoch, int(idx))))
                res = backprop(batch, params, solver_cfg, cfg.mode, ledger)
                if not math.isfinite(res.loss):
                    save_checkpoint(out / "abort.idcw", params, solver_cfg.schedule)
                    _write_jsonl(fh, {"epoch": epoch, "batch": b, "abort": "non-finite loss",
                                      "loss": None, "mode": cfg.mode})
                    raise TrainingAborted(f"non-finite loss at epoch {epoch} batch {b}; "
                                          f"snapshot in {out / 'abort.idcw'}")
                adam_step(params, res.grads, adam, lr)
                losses.append(res.loss)
                history["batch_loss"].append(res.loss)
                history["peak_bytes"] = max(history["peak_bytes"], res.peak_bytes)
                history["max_drift"] = max(history["max_drift"], res.drift)
                row = {"epoch": epoch, "batch": b, "loss": res.loss, "peak_bytes": res.peak_bytes,
                       "live_bytes": res.live_bytes, "wall_ms": (time.perf_counter() - t0) * 1e3,
                       "mode": cfg.mode}
                if res.drift_flagged or (cfg.self_check_every and b % cfg.self_check_every == 0
                                          and cfg.mode == BackpropMode.INVERTIBLE):
                    row["drift"] = res.drift
                    row["drift_flagged"] = res.drift_flagged
                _write_jsonl(fh, row)
            wall = (time.perf_counter() - t_epoch) * 1e3
            mean = float(np.mean(losses))
            history["epoch_loss"].append(mean)
            history["epoch_ms"].append(wall)
            _write_jsonl(fh, {"epoch": epoch, "batch": None, "loss": mean, "peak_bytes": history["peak_bytes"],
                              "live_bytes": ledger.live_bytes, "wall_ms": wall, "mode": cfg.mode, "lr": lr})
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {mean:.5f} lr {lr:.2e} {wall / 1e3:.1f}s")
    ckpt = save_checkpoint(out / "model.idcw", params, solver_cfg.schedule)
    return {"checkpoint": str(ckpt), "params": params, **history}


# ---------------------------------------------------------------- memory benchmark


def synthetic_sample(seed: int, h: int, w: int, rho: float, n_buildings: int = 8) -> Sample:
    rng = make_rng(seed, 5)
    scene = generate_scene(rng, h, w, n_buildings)
    cgm = synthesize_cgm(scene, rng)
    op = make_mask(rng, h, w, rho)
    return Sample(Inputs(op, apply_A(op, cgm), env_raster(scene)), cgm)


def membench(Ts=(1, 2, 3), unet: UNetConfig | None = None, h: int = 64, w: int = 64, dtype=np.float32,
             seed: int = 0, rho: float = 0.05, timing_reps: int = 0) -> dict:
    """Peak saved-activation bytes per (T, mode) for one sample, plus reduction percentages.

    With ``timing_reps > 0`` also times that many backprops per mode at the
    largest T and reports the INVERTIBLE/CACHED wall-time ratio.
    """
    unet = unet or UNetConfig()
    sample = synthetic_sample(seed, h, w, rho)
    rows = []
    for T in Ts:
        cfg = SolverConfig(unet=unet, schedule=Schedule.default(T))
        params = init_solver_params(cfg, make_rng(seed, 0), dtype)
        peaks = {m: backprop([sample], params, cfg, m).peak_bytes for m in BackpropMode}
        inv, cac = peaks[BackpropMode.INVERTIBLE], peaks[BackpropMode.CACHED]
        rows.append({"T": T, "invertible_bytes": inv, "cached_bytes": cac,
                     "reduction_pct": 100.0 * (1.0 - inv / cac)})
    report = {"h": h, "w": w, "base_channels": unet.base_channels, "dtype": np.dtype(dtype).name, "rows": rows}
    if timing_reps:
        cfg = SolverConfig(unet=unet, schedule=Schedule.default(max(Ts)))
        params = init_solver_params(cfg, make_rng(seed, 0), dtype)
        times = {}
        for m in BackpropMode:
            backprop([sample], params, cfg, m)  # warm-up
            runs = []
            for _ in range(timing_reps):
                t0 = time.perf_counter()
                backprop([sample], params, cfg, m)
                runs.append(time.perf_counter() - t0)
            times[m.value] = float(np.median(runs))
        report["seconds_per_sample"] = times
        report["time_ratio"] = times["invertible"] / times["cached"]
    return report


def format_membench(report: dict) -> str:
    lines = [f"peak saved-activation memory, {report['h']}x{report['w']}, base {report['base_channels']}, "
             f"{report['dtype']}",
             f"{'T':>3} {'INVERTIBLE (MiB)':>17} {'CACHED (MiB)':>13} {'reduction':>10}"]
    for r in report["rows"]:
        lines.append(f"{r['T']:>3} {r['invertible_bytes'] / 2**20:>17.3f} {r['cached_bytes'] / 2**20:>13.3f} "
                     f"{r['reduction_pct']:>9.2f}%")
    if "time_ratio" in report:
        s = report["seconds_per_sample"]
        lines.append(f"time per sample: invertible {s['invertible']:.3f}s, cached {s['cached']:.3f}s, "
                     f"ratio {report['time_ratio']:.2f}")
    return "\n".join(lines)

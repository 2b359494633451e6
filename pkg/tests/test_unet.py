import numpy as np
import pytest

from invdiff_cgm.checkpoint import CheckpointError, load_checkpoint, read_tensors, save_checkpoint
from invdiff_cgm.checks import FD_TOL, rel_err, run_gradchecks
from invdiff_cgm.grid import make_rng
from invdiff_cgm.ledger import MemoryLedger
from invdiff_cgm.sampler import Schedule, SolverConfig, init_solver_params
from invdiff_cgm.unet import Mode, UNetConfig, init_unet_params, unet_backward, unet_forward


def _setup(dtype=np.float64, h=16, base=8, perturb=0.05, seed=0):
    cfg = UNetConfig(base_channels=base)
    rng = make_rng(seed)
    p = init_unet_params(cfg, rng, dtype)
    for v in p.values():
        v += (perturb * rng.standard_normal(v.shape)).astype(dtype)
    x = rng.standard_normal((h, h, 1)).astype(dtype)
    env = rng.random((h, h, 2)).astype(dtype)
    bp = rng.standard_normal((h, h, 1)).astype(dtype)
    return cfg, p, x, env, bp


@pytest.mark.parametrize("perturb", [0.0, 0.05])
def test_values_do_not_depend_on_mode(perturb):
    cfg, p, x, env, bp = _setup(perturb=perturb)
    outs = [unet_forward(x, env, bp, 2, p, cfg, m)[0] for m in Mode]
    assert outs[0].shape == (16, 16, 1)
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-8), (np.float32, 1e-4)])
def test_boundary_gradients_equal_cached(dtype, tol):
    cfg, p, x, env, bp = _setup(dtype)
    de = make_rng(9).standard_normal((16, 16, 1)).astype(dtype)
    grads, dxs, ledgers = [], [], []
    for mode in (Mode.CACHE_ALL, Mode.CACHE_BOUNDARY):
        led = MemoryLedger()
        _, tape = unet_forward(x, env, bp, 3, p, cfg, mode, led)
        g = {}
        dxs.append(unet_backward(de, tape, p, cfg, g, bp, env))
        grads.append(g)
        ledgers.append(led)
        assert len(tape) == 0 and led.live_bytes == 0
    assert set(grads[0]) == set(p)
    assert rel_err(dxs[0], dxs[1]) <= tol
    for k in p:
        assert rel_err(grads[0][k], grads[1][k]) <= tol, k
    assert ledgers[1].peak_bytes < ledgers[0].peak_bytes


def test_backward_contract():
    cfg, p, x, env, bp = _setup()
    e, tape = unet_forward(x, env, bp, 1, p, cfg, Mode.INFER)
    assert tape is None
    with pytest.raises(RuntimeError):
        unet_backward(e, tape, p, cfg, {}, bp, env)
    e, tape = unet_forward(x, env, bp, 1, p, cfg, Mode.CACHE_BOUNDARY)
    with pytest.raises(ValueError):
        unet_backward(e, tape, p, cfg, {})
    e, tape = unet_forward(x, env, bp, 1, p, cfg, Mode.CACHE_ALL)
    unet_backward(e, tape, p, cfg, {})
    with pytest.raises(RuntimeError):
        unet_backward(e, tape, p, cfg, {})


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 4"):
        UNetConfig().check_input(30, 32)
    with pytest.raises(ValueError, match="attention cap"):
        UNetConfig().check_input(128, 128)
    with pytest.raises(ValueError):
        UNetConfig(multipliers=(1, 2))
    with pytest.raises(ValueError):
        UNetConfig(base_channels=6)


def test_boundary_peak_below_half_of_cache_all():
    cfg, p, x, env, bp = _setup(np.float32, h=64, base=16)
    peaks = {}
    for mode in (Mode.CACHE_ALL, Mode.CACHE_BOUNDARY):
        led = MemoryLedger()
        e, tape = unet_forward(x, env, bp, 2, p, cfg, mode, led)
        unet_backward(np.ones_like(e), tape, p, cfg, {}, bp, env)
        peaks[mode] = led.peak_bytes
    assert peaks[Mode.CACHE_BOUNDARY] < 0.5 * peaks[Mode.CACHE_ALL]


@pytest.mark.parametrize("name", ["unet boundary cache", "unet cache all"])
def test_unet_finite_differences(name):
    (r,) = run_gradchecks(seed=4, names=[name])
    assert r.error <= FD_TOL


def test_checkpoint_roundtrip(tmp_path):
    cfg = SolverConfig(UNetConfig(base_channels=8), Schedule.default(2))
    p = init_solver_params(cfg, make_rng(1), np.float32)
    path = save_checkpoint(tmp_path / "m.idcw", p, cfg.schedule)
    assert path.read_bytes()[:4] == b"IDCW"
    back, cfg2 = load_checkpoint(path, SolverConfig(UNetConfig(base_channels=8)))
    assert cfg2.schedule == cfg.schedule
    assert set(back) == set(p) and all(back[k].tobytes() == p[k].tobytes() for k in p)
    with pytest.raises(CheckpointError, match="missing|unexpected|shape"):
        load_checkpoint(path, SolverConfig(UNetConfig(base_channels=16)))
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="IDCW"):
        read_tensors(tmp_path / "magic")

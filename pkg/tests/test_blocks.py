import numpy as np
import pytest
from hypothesis import given, strategies as st

from invdiff_cgm import blocks
from invdiff_cgm.checks import GRADCHECKS, FD_TOL, coupling_roundtrip, run_gradchecks
from invdiff_cgm.grid import make_rng
from invdiff_cgm.ledger import MemoryLedger


def _params(kind, c=8, r=2, seed=0, random=False):
    p = {}
    rng = make_rng(seed)
    blocks.init_coupling(p, rng, "m", kind, c, r, np.float64)
    if random:
        for k, v in p.items():
            v[...] = 0.3 * rng.standard_normal(v.shape) + (1.0 if k.endswith("gn.scale") else 0.0)
    return p


def _aux(rng, h=4, r=2):
    return rng.standard_normal(blocks.TEMB_DIM), (rng.standard_normal((h * r, h * r, 1)),
                                                   rng.random((h * r, h * r, 2)), r)


def test_time_embedding(rng):
    p = {}
    blocks.init_time_embed(p, make_rng(0), dtype=np.float64)
    e = [blocks.time_embed(t, p)[0] for t in (1, 2, 3)]
    assert np.array_equal(e[0], blocks.time_embed(1, p)[0])
    assert all(not np.allclose(e[i], e[j]) for i in range(3) for j in range(i + 1, 3))
    f = blocks.sinusoid(0.0)
    assert f.shape == (32,) and np.all(f[:16] == 0) and np.all(f[16:] == 1)


def test_group_norm_matches_direct_formula(rng):
    x = rng.standard_normal((5, 4, 8)) * 3 + 2
    scale, shift = rng.standard_normal(8), rng.standard_normal(8)
    out, _ = blocks.group_norm(x, scale, shift, 4)
    ref = np.empty_like(x)
    for g in range(4):
        chunk = x[:, :, 2 * g:2 * g + 2]
        ref[:, :, 2 * g:2 * g + 2] = (chunk - chunk.mean()) / np.sqrt(chunk.var() + blocks.GN_EPS)
    np.testing.assert_allclose(out, ref * scale + shift, atol=1e-12)
    assert blocks.n_groups(6, 8) == 6 and blocks.n_groups(16, 8) == 8 and blocks.n_groups(12, 8) == 6


def test_zero_residual_init(rng):
    p = {}
    blocks.init_residual(p, make_rng(0), "r", 4, np.float64)
    x = rng.standard_normal((4, 4, 4))
    temb = rng.standard_normal(32)
    p["r.beta.b"][:] = [1.0, 2.0, 3.0, 4.0]
    out = blocks.residual_block(x, temb, p, "r", groups=2)
    np.testing.assert_array_equal(out, x + p["r.beta.b"])


def test_attention_single_position_and_rows(rng):
    p = {}
    blocks.init_attention(p, make_rng(0), "a", 4, np.float64)
    p["a.o.w"][...] = rng.standard_normal((4, 4))
    x = rng.standard_normal((1, 1, 4))
    out = blocks.attention_block(x, p, "a")
    v = x.reshape(1, 4) @ p["a.v.w"] + p["a.v.b"]
    np.testing.assert_allclose(out.reshape(4), (x.reshape(1, 4) + v @ p["a.o.w"] + p["a.o.b"]).ravel(), atol=1e-14)
    _, cache = blocks.attention_branch(rng.standard_normal((4, 4, 4)), p, "a")
    np.testing.assert_allclose(cache["p"].sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError, match="cap"):
        blocks.attention_branch(np.zeros((17, 16, 4)), p, "a")


@pytest.mark.parametrize("r", [1, 2, 4])
def test_injector_shape_and_identity_init(rng, r):
    p = {}
    blocks.init_injector(p, make_rng(0), "i", 16, r, dtype=np.float64)
    x = rng.standard_normal((4, 4, 16))
    ctx = (rng.standard_normal((4 * r, 4 * r, 1)), rng.random((4 * r, 4 * r, 2)), r)
    np.testing.assert_array_equal(blocks.injector(x, ctx, p, "i"), x)
    p["i.conv2.w"][...] = rng.standard_normal(p["i.conv2.w"].shape)
    y = blocks.injector(x, ctx, p, "i")
    assert y.shape == x.shape and not np.array_equal(y, x)
    with pytest.raises(ValueError):
        blocks.init_injector({}, make_rng(0), "j", 6, 2)


@pytest.mark.parametrize("kind", blocks.KINDS)
def test_coupling_zero_init_is_identity(rng, kind):
    p = _params(kind)
    m = blocks.Coupling(kind, "m", groups=2)
    x = rng.standard_normal((4, 4, 8))
    aux = _aux(rng)
    assert np.array_equal(blocks.coupling_forward(x, m, aux, p), x)
    assert np.array_equal(blocks.coupling_inverse(x, m, aux, p), x)
    dy = rng.standard_normal(x.shape)
    dx, _ = blocks.coupling_backward(x, dy, m, aux, p, {})
    assert np.array_equal(dx, dy)
    with pytest.raises(ValueError):
        blocks.init_coupling({}, make_rng(0), "odd", kind, 7)


@pytest.mark.parametrize("kind", blocks.KINDS)
def test_coupling_roundtrip_and_zero_input(kind):
    rng = make_rng(3)
    assert max(coupling_roundtrip(rng, kind) for _ in range(10)) <= 1e-10
    p = _params(kind, random=True)
    m = blocks.Coupling(kind, "m", groups=2)
    aux = _aux(rng)
    zero = np.zeros((4, 4, 8))
    back = blocks.coupling_inverse(blocks.coupling_forward(zero, m, aux, p), m, aux, p)
    assert np.max(np.abs(back)) <= 1e-12


@given(st.integers(0, 2**32), st.sampled_from(blocks.KINDS))
def test_coupling_roundtrip_f32(seed, kind):
    rng = np.random.default_rng(seed)
    p = {k: v.astype(np.float32) for k, v in _params(kind, seed=seed % 1000, random=True).items()}
    m = blocks.Coupling(kind, "m", groups=2)
    t, (bp, env, r) = _aux(rng)
    aux = (t.astype(np.float32), (bp.astype(np.float32), env.astype(np.float32), r))
    x = rng.standard_normal((4, 4, 8)).astype(np.float32)
    back = m.inverse(m.forward(x, aux, p)[0], aux, p)
    assert np.max(np.abs(back - x)) / np.max(np.abs(x)) <= 1e-5


@pytest.mark.parametrize("kind", blocks.KINDS)
def test_inverting_backward_equals_cached(rng, kind):
    p = _params(kind, random=True)
    m = blocks.Coupling(kind, "m", groups=2)
    aux = _aux(rng)
    x = rng.standard_normal((4, 4, 8))
    y, cache = m.forward(x, aux, p, keep_cache=True)
    dy = rng.standard_normal(y.shape)
    g_cached, g_inv = {}, {}
    dx_c, dt_c = m.backward_cached(dy, cache, p, g_cached)
    led = MemoryLedger()
    x_rec, dx_i, dt_i = m.backward(y, dy, aux, p, g_inv, led)
    np.testing.assert_allclose(x_rec, x, rtol=0, atol=1e-12)
    assert np.linalg.norm(dx_c - dx_i) <= 1e-8 * np.linalg.norm(dx_c)
    for k in g_cached:
        assert np.linalg.norm(g_cached[k] - g_inv[k]) <= 1e-8 * max(np.linalg.norm(g_cached[k]), 1e-300)
    if dt_c is not None:
        assert np.linalg.norm(dt_c - dt_i) <= 1e-8 * np.linalg.norm(dt_c)
    assert led.live_bytes == 0 and led.peak_bytes > 0


FAST = [n for n in GRADCHECKS if not n.startswith(("unet", "solver"))]


@pytest.mark.parametrize("name", FAST)
def test_block_gradients(name):
    for r in run_gradchecks(seed=1, repeats=2, names=[name]):
        assert r.error <= FD_TOL, r

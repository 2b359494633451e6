import numpy as np
import pytest
from hypothesis import given, strategies as st

from invdiff_cgm.grid import make_rng
from invdiff_cgm.measurement import (MeasurementOp, apply_A, apply_At, dc_project, dc_project_backward, make_mask,
                                     measure, read_mask, write_mask)
from oracles import pinv_closed_form


def test_mask_sizes():
    full = make_mask(make_rng(0), 8, 8, 1.0)
    assert np.array_equal(full.indices, np.arange(64))
    assert make_mask(make_rng(0), 64, 64, 0.01).m == 41
    assert make_mask(make_rng(0), 4, 4, 1e-6).m == 1
    assert np.array_equal(make_mask(make_rng(3), 32, 32, 0.1).indices, make_mask(make_rng(3), 32, 32, 0.1).indices)
    with pytest.raises(ValueError):
        make_mask(make_rng(0), 4, 4, 0.0)


def test_operator_validation():
    with pytest.raises(ValueError):
        MeasurementOp(2, 2, np.array([1, 1]))
    with pytest.raises(ValueError):
        MeasurementOp(2, 2, np.array([0, 4]))
    with pytest.raises(ValueError):
        MeasurementOp(2, 2, np.array([], dtype=int))


def test_gather_scatter_examples():
    op = MeasurementOp(2, 2, np.array([0]))
    x = np.array([[3.0, 1.0], [2.0, 5.0]])[:, :, None]
    assert apply_A(op, x).tolist() == [3.0]
    assert apply_At(op, np.array([9.0]))[:, :, 0].tolist() == [[9.0, 0.0], [0.0, 0.0]]
    full = make_mask(make_rng(0), 2, 2, 1.0)
    assert np.array_equal(apply_A(full, x), x.ravel())
    assert np.array_equal(apply_At(full, x.ravel()), x)
    with pytest.raises(ValueError):
        apply_A(op, np.zeros((3, 2, 1)))
    with pytest.raises(ValueError):
        apply_At(op, np.zeros(2))


@st.composite
def problems(draw):
    h, w = draw(st.integers(1, 12)), draw(st.integers(1, 12))
    rho = draw(st.floats(0.01, 1.0))
    seed = draw(st.integers(0, 2**32))
    rng = np.random.default_rng(seed)
    op = make_mask(rng, h, w, rho)
    return op, rng.standard_normal((h, w, 1)), rng.standard_normal(op.m)


@given(problems())
def test_orthogonality_and_adjoint(prob):
    op, x, y = prob
    assert np.array_equal(apply_A(op, apply_At(op, y)), y)
    assert np.isclose(np.dot(apply_A(op, x), y), np.sum(x * apply_At(op, y)), rtol=0, atol=1e-12)


@given(problems())
def test_projection_properties(prob):
    op, x0, y = prob
    p = dc_project(op, x0, y)
    assert np.array_equal(apply_A(op, p), y)
    assert np.array_equal(dc_project(op, p, y), p)
    np.testing.assert_allclose(p, pinv_closed_form(op, x0, y), rtol=0, atol=1e-10)
    assert np.array_equal(dc_project(op, x0, y, eta=0.0), x0)
    untouched = np.ones(op.h * op.w, bool)
    untouched[op.indices] = False
    assert np.array_equal(p.ravel()[untouched], x0.ravel()[untouched])


@given(problems(), st.floats(0.0, 1.0))
def test_projection_general_eta_and_backward(prob, eta):
    op, x0, y = prob
    expected = x0 - eta * apply_At(op, apply_A(op, x0) - y)
    np.testing.assert_allclose(dc_project(op, x0, y, eta), expected, atol=1e-12)
    g = np.random.default_rng(1).standard_normal(x0.shape)
    np.testing.assert_allclose(dc_project_backward(op, g, eta), g - eta * apply_At(op, apply_A(op, g)), atol=1e-15)


def test_projection_f32_consistency():
    rng = make_rng(4)
    op = make_mask(rng, 64, 64, 0.05)
    x0 = rng.standard_normal((64, 64, 1)).astype(np.float32)
    y = rng.standard_normal(op.m).astype(np.float32)
    assert np.max(np.abs(apply_A(op, dc_project(op, x0, y)) - y)) <= 1e-6


def test_measure_noise():
    rng = make_rng(1)
    op = make_mask(rng, 8, 8, 0.5)
    x = rng.standard_normal((8, 8, 1))
    assert np.array_equal(measure(op, x), apply_A(op, x))
    noisy = measure(op, x, 0.1, make_rng(2))
    assert not np.array_equal(noisy, apply_A(op, x))
    with pytest.raises(ValueError):
        measure(op, x, 0.1)


def test_mask_file_roundtrip(tmp_path):
    op = make_mask(make_rng(9), 20, 30, 0.2)
    write_mask(tmp_path / "m.cgmm", op)
    raw = (tmp_path / "m.cgmm").read_bytes()
    assert raw[:4] == b"CGMM" and len(raw) == 16 + 4 * op.m
    back = read_mask(tmp_path / "m.cgmm")
    assert (back.h, back.w) == (20, 30) and np.array_equal(back.indices, op.indices)
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="CGMM"):
        read_mask(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_mask(tmp_path / "short")

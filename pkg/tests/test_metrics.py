import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from invdiff_cgm.measurement import make_mask
from invdiff_cgm.metrics import (
    PSNR_CAP, evaluate, gaussian_window, mse, nmse, psnr, read_pgm, rmse, ssim, write_pgm,
)
from invdiff_cgm.scene import SceneRecord

from oracles import loop_mse, loop_nmse, loop_psnr, loop_ssim


def _pair(seed):
    rng = np.random.default_rng(seed)
    t = rng.random((16, 16, 1))
    p = np.clip(t + 0.1 * rng.standard_normal(t.shape), 0, 1)
    return p, t


@given(st.integers(0, 2**32 - 1))
def test_scalar_metrics_match_loops(seed):
    p, t = _pair(seed)
    assert abs(mse(p, t) - loop_mse(p, t)) <= 1e-8
    assert abs(psnr(p, t) - loop_psnr(p, t)) <= 1e-8
    assert abs(nmse(p, t) - loop_nmse(p, t)) <= 1e-8
    assert abs(rmse(p, t) - math.sqrt(loop_mse(p, t))) <= 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_loop(seed):
    p, t = _pair(seed)
    assert abs(ssim(p, t) - loop_ssim(p, t)) <= 1e-8


def test_identity_cases():
    _, t = _pair(0)
    assert ssim(t, t) == 1.0
    assert nmse(t, t) == 0.0
    assert psnr(t, t) == PSNR_CAP
    assert rmse(t, t) == 0.0


def test_known_values():
    t = np.zeros((16, 16, 1))
    assert psnr(t + 0.1, t) == pytest.approx(20.0, abs=1e-12)
    # doubling the error costs 20 log10 2 dB
    assert psnr(t + 0.2, t) - psnr(t + 0.1, t) == pytest.approx(-6.0206, abs=1e-4)
    u = np.full((16, 16, 1), 0.5)
    assert nmse(2 * u, u) == pytest.approx(1.0)
    # constant shift c gives mse c^2
    assert mse(u + 0.3, u) == pytest.approx(0.09)


def test_gaussian_window_normalised():
    g = gaussian_window()
    assert g.size == 11 and g.sum() == pytest.approx(1.0) and np.allclose(g, g[::-1])


def test_input_errors():
    t = np.ones((16, 16, 1))
    with pytest.raises(ValueError):
        psnr(t, t[:8])
    with pytest.raises(ValueError):
        psnr(t, t, x_max=0)
    with pytest.raises(ValueError):
        nmse(t, np.zeros_like(t))
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8, 1)), np.ones((8, 8, 1)))


def _records(n, h=16):
    rng = np.random.default_rng(9)
    recs = []
    for i in range(n):
        cgm = rng.random((h, h, 1)).astype(np.float32)
        recs.append(SceneRecord(f"scene_{i:04d}", cgm, np.zeros((h, h, 2), np.float32), np.zeros((h, h, 1)),
                                (19.5, 0, 0), i))
    return recs


def test_evaluate_oracle_and_means(tmp_path):
    recs = _records(3)
    masks = [make_mask(np.random.default_rng(i), 16, 16, 0.2) for i in range(3)]
    lookup = iter(recs)
    rep = evaluate(recs, masks, lambda inp: next(lookup).cgm, dump_dir=tmp_path)
    assert rep.mean["psnr"] == PSNR_CAP and rep.mean["ssim"] == 1.0 and rep.mean["nmse"] == 0.0
    base = [row["baseline"]["psnr"] for row in rep.per_scene]
    assert rep.baseline_mean["psnr"] == pytest.approx(sum(base) / 3)
    assert rep.psnr_gain > 0
    assert json.loads(rep.to_json())["psnr_gain_db"] == pytest.approx(rep.psnr_gain)
    img = read_pgm(tmp_path / "scene_0001_target.pgm")
    assert img.shape == (16, 16)
    np.testing.assert_array_equal(img, np.round(255 * recs[1].cgm[:, :, 0]).astype(np.uint8))
    assert (tmp_path / "scene_0002_error.pgm").exists()


def test_evaluate_deterministic():
    recs = _records(2)
    masks = [make_mask(np.random.default_rng(i), 16, 16, 0.1) for i in range(2)]
    a = evaluate(recs, masks, lambda inp: inp.backproj)
    b = evaluate(recs, masks, lambda inp: inp.backproj)
    assert a.to_json() == b.to_json()
    assert a.psnr_gain == 0.0


def test_evaluate_rejects_mismatch():
    with pytest.raises(ValueError):
        evaluate(_records(2), [], lambda inp: inp.backproj)


def test_pgm_clips(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[-1.0, 0.5, 2.0]]))
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), [[0, 128, 255]])

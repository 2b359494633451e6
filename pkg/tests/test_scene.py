import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from invdiff_cgm.grid import make_rng
from invdiff_cgm.scene import (
    MAX_HEIGHT, MIN_HEIGHT, Scene, count_crossings, distance_3d, env_raster,
    generate_scene, load_dataset, make_dataset, path_loss_db, synthesize_cgm,
)
from oracles import oracle_crossings


def _scene(heights, bs):
    return Scene(np.asarray(heights, dtype=np.float32)[:, :, None], bs)


def test_generate_deterministic():
    a = generate_scene(make_rng(7), 64, 64, 8)
    b = generate_scene(make_rng(7), 64, 64, 8)
    np.testing.assert_array_equal(a.buildings, b.buildings)
    assert a.bs == b.bs


@pytest.mark.parametrize("seed", range(10))
def test_generate_invariants(seed):
    s = generate_scene(make_rng(seed), 64, 64, 8)
    b = s.buildings[:, :, 0]
    nz = b[b > 0]
    assert nz.size and nz.min() >= MIN_HEIGHT and nz.max() <= MAX_HEIGHT
    row, col = s.bs_cell
    assert s.bs[0] > b[row, col]
    if b[row, col] > 0:
        assert b[row, col] == b.max() and b.max() > 16.5
        assert s.bs[0] == pytest.approx(b[row, col] + 3.0)
    else:
        assert s.bs[0] == 19.5


def test_no_buildings_is_free_space():
    s = generate_scene(make_rng(1), 32, 32, 0)
    assert not s.buildings.any()
    assert s.bs[0] == 19.5 and not s.incomplete


def test_crowded_scene_flags_incomplete():
    s = generate_scene(make_rng(0), 16, 16, 40)
    assert s.incomplete


def test_rejects_small_grid():
    with pytest.raises(ValueError):
        generate_scene(make_rng(0), 15, 32, 2)


def test_crossings_trivial_cases():
    s = _scene(np.zeros((8, 8)), (5.0, 1, 1))
    assert count_crossings(s, (1, 1)) == 0
    assert all(count_crossings(s, (r, c)) == 0 for r in range(8) for c in range(8))
    with pytest.raises(ValueError):
        count_crossings(s, (8, 0))


def test_crossings_blocking_building():
    heights = np.zeros((8, 8))
    heights[2:6, 3:5] = 10.0
    s = _scene(heights, (5.0, 0, 4))  # BS at row 4, col 0
    n = count_crossings(s, (4, 7))
    assert n == oracle_crossings(s, (4, 7)) == 2
    assert count_crossings(s, (0, 0)) == 0


@given(st.integers(0, 2**32 - 1))
def test_crossings_match_oracle(seed):
    rng = np.random.default_rng(seed)
    heights = np.where(rng.random((8, 8)) < 0.35, rng.uniform(1.0, 20.0, (8, 8)), 0.0)
    br, bc = rng.integers(0, 8, 2)
    s = _scene(heights, (float(rng.uniform(2.0, 22.0)), int(bc), int(br)))
    for _ in range(6):
        t = tuple(int(v) for v in rng.integers(0, 8, 2))
        assert count_crossings(s, t) == oracle_crossings(s, t)


def test_free_space_monotone_in_distance():
    s = _scene(np.zeros((32, 32)), (19.5, 10, 12))
    cgm = synthesize_cgm(s, make_rng(0), sigma_shadow=0.0)[:, :, 0]
    d = distance_3d(s)
    order = np.argsort(d, axis=None, kind="stable")
    dv, gv = d.reshape(-1)[order], cgm.reshape(-1)[order]
    step = np.diff(dv) > 1e-9
    assert np.all(np.diff(gv)[step] < 0)


def test_pure_distance_symmetry():
    heights = np.zeros((33, 33))
    heights[3:6, 3:8] = 12.0
    s = _scene(heights, (19.5, 16, 16))
    cgm = synthesize_cgm(s, make_rng(3), sigma_shadow=0.0, l_cross=0.0)[:, :, 0]
    # the four mirror images of a free cell are at the same distance
    for r, c in [(20, 25), (10, 30), (16, 0)]:
        vals = [cgm[r, c], cgm[32 - r, c], cgm[r, 32 - c], cgm[32 - r, 32 - c]]
        assert max(vals) - min(vals) <= 1e-6


def test_shadowed_cell_weaker():
    heights = np.zeros((24, 24))
    heights[4:8, 10:12] = 15.0
    s = _scene(heights, (5.0, 11, 12))  # BS at row 12, col 11
    cgm = synthesize_cgm(s, make_rng(0), sigma_shadow=0.0)[:, :, 0]
    shadowed, clear = (1, 11), (23, 11)
    assert count_crossings(s, shadowed) > 0 and count_crossings(s, clear) == 0
    assert cgm[shadowed] < cgm[clear]


@pytest.mark.parametrize("seed", range(5))
def test_normalisation(seed):
    s = generate_scene(make_rng(seed), 32, 32, 6)
    cgm = synthesize_cgm(s, make_rng(seed + 100))
    assert cgm.dtype == np.float32 and cgm.shape == (32, 32, 1)
    assert cgm.min() == 0.0 and cgm.max() == 1.0
    assert cgm[s.bs_cell + (0,)] == 1.0
    env = env_raster(s)
    assert env.shape == (32, 32, 2) and env.min() >= 0 and env.max() <= 1


@given(st.integers(0, 2**32 - 1))
def test_adding_building_never_lowers_loss(seed):
    rng = np.random.default_rng(seed)
    heights = np.where(rng.random((16, 16)) < 0.2, rng.uniform(6.6, 19.8, (16, 16)), 0.0)
    br, bc = (int(v) for v in rng.integers(0, 16, 2))
    heights[br, bc] = 0.0
    bs = (19.5, bc, br)
    base = path_loss_db(_scene(heights, bs), make_rng(1), sigma_shadow=0.0)
    tr, tc = (int(v) for v in rng.integers(0, 16, 2))
    # drop one building cell somewhere on the straight line between BS and target
    f = rng.uniform(0.2, 0.8)
    r, c = int(br + 0.5 + f * (tr - br)), int(bc + 0.5 + f * (tc - bc))
    more = heights.copy()
    if (r, c) != (br, bc):
        more[r, c] = max(more[r, c], float(rng.uniform(6.6, 19.8)))
    after = path_loss_db(_scene(more, bs), make_rng(1), sigma_shadow=0.0)
    assert np.all(after >= base)


def test_make_dataset_roundtrip(tmp_path):
    a = make_dataset(5, 4, 32, 32, tmp_path / "a", n_buildings=4)
    b = make_dataset(5, 4, 32, 32, tmp_path / "b", n_buildings=4)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = json.loads(a.read_text())
    assert len(meta["scenes"]) == 4
    for e in meta["scenes"]:
        for k in ("cgm", "env", "buildings"):
            assert (tmp_path / "a" / e[k]).exists()
    ds = load_dataset(b)
    assert len(ds) == 4 and (ds.h, ds.w) == (32, 32)
    rec = ds.scenes[2]
    assert rec.id == "scene_0002" and rec.cgm.shape == (32, 32, 1) and rec.env.shape == (32, 32, 2)
    assert rec.cgm.max() == 1.0 and rec.cgm.min() == 0.0


def test_load_dataset_missing_file_names_scene(tmp_path):
    m = make_dataset(0, 2, 16, 16, tmp_path, n_buildings=2)
    (tmp_path / "scene_0001_env.cgmg").unlink()
    with pytest.raises(FileNotFoundError, match="scene_0001"):
        load_dataset(m)

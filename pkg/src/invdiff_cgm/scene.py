"""Synthetic urban scenes and ground-truth channel gain maps.

Scenes are flat-terrain grids of axis-aligned rectangular buildings with one
base station (BS). Path loss is log-distance in 3-D plus a fixed attenuation
per occluding building cell plus spatially correlated log-normal shadowing.
Cell ``(row, col)`` covers ``[col, col+1] x [row, row+1]`` in grid units; the
BS and receivers sit at cell centres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import make_rng, read_grid, write_grid

MIN_HEIGHT, MAX_HEIGHT = 6.6, 19.8
ROOFTOP_THRESHOLD = 16.5
ROOFTOP_CLEARANCE = 3.0
FREE_BS_HEIGHT = 19.5
RX_HEIGHT = 1.5
L_CROSS_DB = 15.0
SIGMA_SHADOW_DB = 4.0
SHADOW_FILTER_CELLS = 4.0
_EPS = 1e-12


@dataclass
class Scene:
    buildings: np.ndarray  # (h, w, 1) heights in metres, 0 = free space
    bs: tuple  # (height_m, x = column, y = row)
    cell_size_m: float = 1.0
    incomplete: bool = False  # fewer buildings than requested could be placed

    @property
    def shape(self):
        return self.buildings.shape[:2]

    @property
    def bs_cell(self) -> tuple[int, int]:
        return int(self.bs[2]), int(self.bs[1])


def generate_scene(rng: np.random.Generator, h: int, w: int, n_buildings: int,
                   cell_size_m: float = 1.0, max_tries: int = 50) -> Scene:
    if h < 16 or w < 16:
        raise ValueError(f"scene must be at least 16x16, got {h}x{w}")
    heights = np.zeros((h, w), dtype=np.float32)
    occupied = np.zeros((h, w), dtype=bool)
    rects = []
    side_max = max(4, min(h, w) // 5)
    for _ in range(n_buildings):
        for _ in range(max_tries):
            bh, bw = rng.integers(3, side_max + 1, size=2)
            r0, c0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
            # keep a one-cell street between buildings
            if occupied[max(r0 - 1, 0):r0 + bh + 1, max(c0 - 1, 0):c0 + bw + 1].any():
                continue
            height = rng.uniform(MIN_HEIGHT, MAX_HEIGHT)
            occupied[r0:r0 + bh, c0:c0 + bw] = True
            heights[r0:r0 + bh, c0:c0 + bw] = height
            rects.append((height, r0, c0, bh, bw))
            break
    incomplete = len(rects) < n_buildings

    tallest = max(rects, default=None)
    if tallest is not None and tallest[0] > ROOFTOP_THRESHOLD:
        height, r0, c0, bh, bw = tallest
        row, col = r0 + bh // 2, c0 + bw // 2
        bs_height = float(heights[row, col]) + ROOFTOP_CLEARANCE
    else:
        free = np.flatnonzero(~occupied.reshape(-1))
        cell = int(free[rng.integers(0, free.size)])
        row, col = divmod(cell, w)
        bs_height = FREE_BS_HEIGHT
    return Scene(heights[:, :, None], (bs_height, col, row), cell_size_m, incomplete)


def _ray_height(scene: Scene, s):
    return scene.bs[0] + s * (RX_HEIGHT - scene.bs[0])


def count_crossings(scene: Scene, target) -> int:
    """Building cells on the BS-to-target segment that rise above the line of sight.

    The segment joins the two cell centres; a cell counts when the segment
    passes through its interior (positive length) and its building is taller
    than the ray, which descends linearly from the BS antenna to a 1.5 m
    receiver, at the midpoint of the segment's passage through the cell. The
    BS's own cell never counts.
    """
    h, w = scene.shape
    row, col = target
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"target {target} outside {h}x{w} grid")
    br, bc = scene.bs_cell
    if (row, col) == (br, bc):
        return 0
    x0, y0, x1, y1 = bc + 0.5, br + 0.5, col + 0.5, row + 0.5
    dx, dy = x1 - x0, y1 - y0
    ss = [0.0, 1.0]
    if dx:
        lo, hi = sorted((x0, x1))
        ss += [(k - x0) / dx for k in range(math.ceil(lo), math.floor(hi) + 1)]
    if dy:
        lo, hi = sorted((y0, y1))
        ss += [(k - y0) / dy for k in range(math.ceil(lo), math.floor(hi) + 1)]
    ss = np.unique(np.clip(ss, 0.0, 1.0))
    mid = 0.5 * (ss[:-1] + ss[1:])[np.diff(ss) > _EPS]
    cols = np.floor(x0 + mid * dx).astype(int)
    rows = np.floor(y0 + mid * dy).astype(int)
    b = scene.buildings[rows, cols, 0]
    hit = (b > 0) & (b > _ray_height(scene, mid)) & ~((rows == br) & (cols == bc))
    return int(np.count_nonzero(hit))


def crossing_map(scene: Scene) -> np.ndarray:
    h, w = scene.shape
    out = np.zeros((h, w), dtype=np.int32)
    if not scene.buildings.any():
        return out
    for r in range(h):
        for c in range(w):
            out[r, c] = count_crossings(scene, (r, c))
    return out


def distance_3d(scene: Scene) -> np.ndarray:
    h, w = scene.shape
    br, bc = scene.bs_cell
    rr, cc = np.mgrid[0:h, 0:w]
    horiz2 = ((rr - br) ** 2 + (cc - bc) ** 2) * scene.cell_size_m ** 2
    return np.sqrt(horiz2 + (scene.bs[0] - RX_HEIGHT) ** 2)


def path_loss_db(scene: Scene, rng: np.random.Generator, sigma_shadow: float = SIGMA_SHADOW_DB,
                 l_cross: float = L_CROSS_DB, filter_sigma: float = SHADOW_FILTER_CELLS) -> np.ndarray:
    """Raw (h, w) loss in dB before interior masking and normalisation."""
    h, w = scene.shape
    # always draw the field so the stream position does not depend on sigma
    noise = gaussian_filter(rng.standard_normal((h, w)), filter_sigma, mode="reflect")
    std = noise.std()
    shadow = sigma_shadow * noise / std if std > 0 and sigma_shadow else np.zeros_like(noise)
    loss = 20.0 * np.log10(np.maximum(distance_3d(scene), 1.0)) + shadow
    if l_cross:
        loss += l_cross * crossing_map(scene)
    return loss


def synthesize_cgm(scene: Scene, rng: np.random.Generator, sigma_shadow: float = SIGMA_SHADOW_DB,
                   l_cross: float = L_CROSS_DB, filter_sigma: float = SHADOW_FILTER_CELLS) -> np.ndarray:
    """Normalised gain map in [0, 1] (1 = strongest), shape (h, w, 1), float32."""
    br, bc = scene.bs_cell
    loss = path_loss_db(scene, rng, sigma_shadow, l_cross, filter_sigma)
    interior = scene.buildings[:, :, 0] > 0
    interior[br, bc] = False
    if interior.any():
        loss[interior] = loss.max()
    loss[br, bc] = loss.min()
    gain = -loss
    lo, hi = gain.min(), gain.max()
    norm = (gain - lo) / (hi - lo) if hi > lo else np.ones_like(gain)
    return norm.astype(np.float32)[:, :, None]


def env_raster(scene: Scene) -> np.ndarray:
    """(h, w, 2): building height / 19.8 and BS distance normalised by its grid maximum."""
    h, w = scene.shape
    br, bc = scene.bs_cell
    rr, cc = np.mgrid[0:h, 0:w]
    dist = np.hypot(rr - br, cc - bc)
    dist = dist / dist.max() if dist.max() > 0 else dist
    heights = scene.buildings[:, :, 0] / MAX_HEIGHT
    return np.stack([heights, dist], axis=2).astype(np.float32)


# ---------------------------------------------------------------- datasets


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


@dataclass
class SceneRecord:
    id: str
    cgm: np.ndarray
    env: np.ndarray
    buildings: np.ndarray
    bs: tuple
    seed: int


@dataclass
class Dataset:
    h: int
    w: int
    cell_size_m: float
    scenes: list = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)


def make_dataset(seed: int, n_scenes: int, h: int, w: int, out_dir, n_buildings: int = 8) -> Path:
    """Write scenes as CGMG grids plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        s = scene_seed(seed, i)
        rng = make_rng(s)
        scene = generate_scene(rng, h, w, n_buildings)
        cgm = synthesize_cgm(scene, rng)
        sid = f"scene_{i:04d}"
        files = {k: f"{sid}_{k}.cgmg" for k in ("cgm", "env", "buildings")}
        try:
            write_grid(out / files["cgm"], cgm)
            write_grid(out / files["env"], env_raster(scene))
            write_grid(out / files["buildings"], scene.buildings)
        except OSError as exc:
            raise OSError(f"writing scene {sid} into {out}: {exc}") from exc
        entries.append({"id": sid, **files, "bs": [float(scene.bs[0]), int(scene.bs[1]), int(scene.bs[2])],
                        "seed": s, "incomplete": scene.incomplete})
    manifest = {"scenes": entries, "h": h, "w": w, "cell_size_m": 1.0,
                "dataset_seed": seed, "n_buildings": n_buildings}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    ds = Dataset(int(meta["h"]), int(meta["w"]), float(meta["cell_size_m"]))
    for e in meta["scenes"]:
        grids = {}
        for k in ("cgm", "env", "buildings"):
            p = root / e[k]
            if not p.exists():
                raise FileNotFoundError(f"scene {e['id']}: missing {k} file {p}")
            grids[k] = read_grid(p)
        ds.scenes.append(SceneRecord(e["id"], grids["cgm"], grids["env"], grids["buildings"],
                                     tuple(e["bs"]), int(e["seed"])))
    return ds

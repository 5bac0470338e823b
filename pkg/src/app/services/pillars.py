from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from src.app.schemas import PillarConfig

POINT_DIMS = 4
DECORATED_DIMS = 10


def as_point_cloud(points) -> np.ndarray:
    """Validate and return an (N, 4) float64 array of x, y, z, intensity."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.size == 0:
        return np.zeros((0, POINT_DIMS))
    if cloud.ndim != 2 or cloud.shape[1] != POINT_DIMS:
        raise ValueError(f"Point cloud must have shape (N, {POINT_DIMS}), got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("Point cloud contains non-finite values")
    return cloud


def crop_points(points: np.ndarray, area: Sequence[float]) -> np.ndarray:
    """Keep points inside the half-open box [min, max) on every axis, order preserved."""
    cloud = as_point_cloud(points)
    x_min, y_min, z_min, x_max, y_max, z_max = area
    inside = ((cloud[:, 0] >= x_min) & (cloud[:, 0] < x_max)
              & (cloud[:, 1] >= y_min) & (cloud[:, 1] < y_max)
              & (cloud[:, 2] >= z_min) & (cloud[:, 2] < z_max))
    return cloud[inside]


@dataclass
class PillarTensor:
    features: np.ndarray  # (P, M, 10)
    coords: np.ndarray  # (P, 2) as (ix, iy)
    mask: np.ndarray  # (P, M)
    grid_size: Tuple[int, int]

    @property
    def num_pillars(self) -> int:
        return len(self.coords)


def pillar_indices(points: np.ndarray, cfg: PillarConfig) -> np.ndarray:
    """(N, 2) integer cell indices (ix, iy) of points already cropped to the area."""
    x_min, y_min = cfg.area[0], cfg.area[1]
    dx, dy = cfg.pillar_size[0], cfg.pillar_size[1]
    nx, ny = cfg.grid_size
    ix = np.floor((points[:, 0] - x_min) / dx).astype(np.int64)
    iy = np.floor((points[:, 1] - y_min) / dy).astype(np.int64)
    # guards the x_max - eps rounding edge
    return np.stack([np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1)], axis=1)


def pillarize(points: np.ndarray, cfg: PillarConfig, seed: int = 0) -> PillarTensor:
    cloud = as_point_cloud(points)
    rng = np.random.default_rng(seed)
    m = cfg.max_points_per_pillar
    nx, ny = cfg.grid_size

    if len(cloud) == 0:
        return PillarTensor(np.zeros((0, m, DECORATED_DIMS)), np.zeros((0, 2), dtype=np.int64),
                            np.zeros((0, m), dtype=bool), (nx, ny))

    cells = pillar_indices(cloud, cfg)
    keys = cells[:, 0] * ny + cells[:, 1]
    unique_keys, inverse = np.unique(keys, return_inverse=True)

    kept = np.arange(len(unique_keys))
    if len(kept) > cfg.max_pillars:
        kept = np.sort(rng.choice(len(unique_keys), cfg.max_pillars, replace=False))

    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(len(unique_keys)))
    ends = np.append(starts[1:], len(order))

    dx, dy = cfg.pillar_size[0], cfg.pillar_size[1]
    x_min, y_min, z_min, _, _, z_max = cfg.area
    z_center = (z_min + z_max) / 2.0

    features = np.zeros((len(kept), m, DECORATED_DIMS))
    mask = np.zeros((len(kept), m), dtype=bool)
    coords = np.zeros((len(kept), 2), dtype=np.int64)
    for row, pillar in enumerate(kept):
        members = order[starts[pillar]:ends[pillar]]
        if len(members) > m:
            members = np.sort(rng.choice(members, m, replace=False))
        pts = cloud[members]
        ix, iy = divmod(int(unique_keys[pillar]), ny)
        center = np.array([x_min + (ix + 0.5) * dx, y_min + (iy + 0.5) * dy, z_center])
        n = len(pts)
        features[row, :n, :4] = pts
        features[row, :n, 4:7] = pts[:, :3] - pts[:, :3].mean(axis=0)
        features[row, :n, 7:10] = pts[:, :3] - center
        mask[row, :n] = True
        coords[row] = (ix, iy)
    return PillarTensor(features, coords, mask, (nx, ny))

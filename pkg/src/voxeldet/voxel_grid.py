"""Point-cloud voxelization over the fixed LiDAR-frame grid.

Points are binned into equally spaced voxels; each non-empty voxel keeps at
most ``max_points_per_voxel`` points chosen by a per-voxel counter RNG and
carries the mean (x, y, z, intensity) of the survivors as its feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kitti_io import PointCloud

FEATURE_CHANNELS = 4


@dataclass(frozen=True)
class VoxelizerConfig:
    range_min: tuple[float, float, float] = (0.0, -40.0, -3.0)
    range_max: tuple[float, float, float] = (70.4, 40.0, 1.0)
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)
    max_points_per_voxel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        for lo, hi, v in zip(self.range_min, self.range_max, self.voxel_size):
            if v <= 0 or hi <= lo:
                raise ValueError(f"bad axis range [{lo}, {hi}) with voxel size {v}")
            n = (hi - lo) / v
            if abs(n - round(n)) > 1e-6:
                raise ValueError(
                    f"range extent {hi - lo} is not an integer multiple of voxel size {v}"
                )

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / v))
            for lo, hi, v in zip(self.range_min, self.range_max, self.voxel_size)
        )


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Active voxel sites sorted lexicographically by (iz, iy, ix)."""

    shape: tuple[int, int, int]
    indices: np.ndarray            # (n, 3) int64 columns ix, iy, iz
    features: np.ndarray           # (n, channels) float64

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(idx), -1)
        if feats.shape[0] != len(idx):
            raise ValueError("feature row count must match site count")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "features", feats)
        if len(idx):
            if idx.min() < 0 or (idx >= np.array(self.shape)).any():
                raise ValueError("voxel indices outside grid shape")
            flat = self.flat_indices()
            if (np.diff(flat) <= 0).any():
                raise ValueError("sites must be unique and sorted by (iz, iy, ix)")

    @property
    def num_sites(self) -> int:
        return len(self.indices)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def flat_indices(self) -> np.ndarray:
        nx, ny, _ = self.shape
        return (self.indices[:, 2] * ny + self.indices[:, 1]) * nx + self.indices[:, 0]


def _site_order(indices: np.ndarray) -> np.ndarray:
    return np.lexsort((indices[:, 0], indices[:, 1], indices[:, 2]))


def make_grid(shape, indices, features) -> SparseVoxelGrid:
    """Build a grid from unordered sites, sorting them canonically."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        features = features.reshape(len(indices), -1)
    order = _site_order(indices)
    return SparseVoxelGrid(tuple(shape), indices[order], features[order])


def _sample_voxel(seed: int, flat_voxel: int, count: int, keep: int) -> np.ndarray:
    """Deterministic without-replacement pick keyed by (seed, voxel index)."""
    gen = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(flat_voxel)))
    return gen.choice(count, size=keep, replace=False)


def voxelize(cloud: PointCloud, cfg: VoxelizerConfig) -> SparseVoxelGrid:
    """Bin a point cloud into the sparse voxel grid with mean features.

    Points outside the range are discarded. The per-voxel subsample is keyed
    by (seed, voxel index) over a canonical within-voxel point order, so the
    result is independent of point arrival order.
    """
    shape = cfg.grid_shape
    nx, ny, nz = shape
    pts = cloud.points
    if len(pts) == 0:
        return SparseVoxelGrid(shape, np.empty((0, 3), np.int64),
                               np.empty((0, FEATURE_CHANNELS)))

    lo = np.array(cfg.range_min)
    v = np.array(cfg.voxel_size)
    idx = np.floor((pts[:, :3] - lo) / v).astype(np.int64)
    in_range = ((pts[:, :3] >= lo) & (idx >= 0) & (idx < np.array(shape))).all(axis=1)
    pts = pts[in_range]
    idx = idx[in_range]
    if len(pts) == 0:
        return SparseVoxelGrid(shape, np.empty((0, 3), np.int64),
                               np.empty((0, FEATURE_CHANNELS)))

    flat = (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]
    # canonical order: voxel, then point coordinates
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
    pts = pts[order]
    flat = flat[order]

    starts = np.flatnonzero(np.r_[True, np.diff(flat) != 0])
    counts = np.diff(np.r_[starts, len(flat)])
    voxel_flat = flat[starts]

    keep_mask = np.ones(len(flat), dtype=bool)
    cap = cfg.max_points_per_voxel
    for s, c, fv in zip(starts[counts > cap], counts[counts > cap], voxel_flat[counts > cap]):
        keep_mask[s : s + c] = False
        keep_mask[s + _sample_voxel(cfg.seed, fv, c, cap)] = True

    kept = pts[keep_mask]
    kept_flat = flat[keep_mask]
    kstarts = np.flatnonzero(np.r_[True, np.diff(kept_flat) != 0])
    kcounts = np.diff(np.r_[kstarts, len(kept_flat)])
    sums = np.add.reduceat(kept, kstarts, axis=0)
    features = sums / kcounts[:, None]

    fz, rem = np.divmod(voxel_flat, nx * ny)
    fy, fx = np.divmod(rem, nx)
    indices = np.stack([fx, fy, fz], axis=1)
    return SparseVoxelGrid(shape, indices, features)


def sparsity(grid: SparseVoxelGrid) -> float:
    """Fraction of grid cells that are empty."""
    nx, ny, nz = grid.shape
    return 1.0 - grid.num_sites / float(nx * ny * nz)


def format_grid_dump(grid: SparseVoxelGrid) -> str:
    """Text dump: header "nx ny nz channels", one "ix iy iz f0 f1 ..." per site."""
    lines = [f"{grid.shape[0]} {grid.shape[1]} {grid.shape[2]} {grid.channels}"]
    for (ix, iy, iz), feat in zip(grid.indices, grid.features):
        lines.append(f"{ix} {iy} {iz} " + " ".join(f"{f:.17g}" for f in feat))
    return "\n".join(lines) + "\n"


def parse_grid_dump(text: str) -> SparseVoxelGrid:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    nx, ny, nz, channels = (int(v) for v in lines[0].split())
    indices, features = [], []
    for ln in lines[1:]:
        fields = ln.split()
        indices.append([int(v) for v in fields[:3]])
        features.append([float(v) for v in fields[3 : 3 + channels]])
    if not indices:
        return SparseVoxelGrid((nx, ny, nz), np.empty((0, 3), np.int64),
                               np.empty((0, channels)))
    return SparseVoxelGrid((nx, ny, nz), np.array(indices), np.array(features))

"""3-D image container with world geometry and missing-data mask."""

from dataclasses import dataclass, field
import math

import numpy as np

__all__ = [
    "AffineMap",
    "GridSpec",
    "Volume",
    "world_bounds",
    "grid_bounds",
    "hr_grid_from_observations",
    "mean_over_observed",
]


def _check_affine(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {matrix.shape}")
    if not np.allclose(matrix[3], [0, 0, 0, 1]):
        raise ValueError("affine last row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(matrix[:3, :3])) < 1e-12:
        raise ValueError("affine is not invertible")
    return matrix


@dataclass(frozen=True)
class AffineMap:
    """Voxel index (0-based) to world mm."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _check_affine(self.matrix))

    @property
    def inverse(self):
        return np.linalg.inv(self.matrix)

    def apply(self, points):
        """Map ``(..., 3)`` voxel coordinates to world coordinates."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix[:3, :3].T + self.matrix[:3, 3]


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "affine", _check_affine(self.affine))

    @property
    def voxel_size(self):
        return np.sqrt(np.sum(self.affine[:3, :3] ** 2, axis=0))

    @property
    def size(self):
        return int(np.prod(self.dims))

    def same_as(self, other, atol=1e-5):
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol)


@dataclass
class Volume:
    """A 3-D float32 image.

    ``mask`` is authoritative for missing data: True means the voxel is
    absent. Non-finite values passed in are masked and stored as zero so
    kernels never see NaN.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    mask: np.ndarray = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3-D, got shape {data.shape}")
        bad = ~np.isfinite(data)
        mask = bad if self.mask is None else (np.asarray(self.mask, dtype=bool) | bad)
        if mask.shape != data.shape:
            raise ValueError("mask shape does not match data")
        data[mask] = 0.0
        self.data = data
        self.mask = mask
        self.affine = _check_affine(self.affine)

    @classmethod
    def on_grid(cls, data, grid, mask=None):
        return cls(data, grid.affine, mask)

    @property
    def dims(self):
        return self.data.shape

    @property
    def grid(self):
        return GridSpec(self.data.shape, self.affine)

    @property
    def voxel_size(self):
        return self.grid.voxel_size

    @property
    def observed(self):
        return ~self.mask

    def with_nan(self):
        """Data with masked voxels as NaN (the on-disk representation)."""
        out = self.data.copy()
        out[self.mask] = np.nan
        return out


def grid_bounds(grid):
    """World box ``(lo, hi)`` of a grid; voxel centres sit on integer indices."""
    hi = [d - 0.5 for d in grid.dims]
    corners = np.array(
        [[i, j, k] for i in (-0.5, hi[0]) for j in (-0.5, hi[1]) for k in (-0.5, hi[2])]
    )
    world = AffineMap(grid.affine).apply(corners)
    return world.min(axis=0), world.max(axis=0)


def world_bounds(v):
    return grid_bounds(v.grid)


def hr_grid_from_observations(obs, voxel_size=1.0):
    """Axis-aligned isotropic grid covering the union of all observation FOVs."""
    if not obs:
        raise ValueError("need at least one observation to define the HR grid")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    boxes = [grid_bounds(o.grid if isinstance(o, Volume) else o) for o in obs]
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    extent = hi - lo
    # tolerate float noise so an exact 8 mm extent gives 8 voxels, not 9
    dims = tuple(max(1, math.ceil(e / voxel_size - 1e-6)) for e in extent)
    affine = np.diag([voxel_size, voxel_size, voxel_size, 1.0])
    # centre the (possibly slightly larger) grid on the union box
    centre = (lo + hi) / 2
    affine[:3, 3] = centre - voxel_size * (np.array(dims) - 1) / 2
    return GridSpec(dims, affine)


def mean_over_observed(v):
    obs = v.observed
    if not obs.any():
        raise ValueError("all voxels are masked")
    return float(np.mean(v.data[obs], dtype=np.float64))

"""Projection operator A = R S T from the HR grid to one LR observation.

* T -- trilinear resampling of the HR image onto an intermediate grid that
  is aligned with the LR voxel axes, has (close to) HR voxel spacing and is
  padded along the slice direction by the slice-profile kernel radius.
* S -- slice-profile convolution along the slice direction ('valid' mode,
  so the padding is consumed and the result covers exactly the LR FOV).
* R -- average of the intermediate samples inside each LR voxel.

All three stages have non-negative weights, which is what makes
``diag(A^T A 1)`` a majoriser of ``A^T A``.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from .volume import GridSpec, Volume

__all__ = [
    "SliceProfile",
    "ProjectionOperator",
    "build_projection",
    "identity_operator",
    "apply",
    "apply_adjoint",
    "diag_AtA_ones",
    "slice_axis",
    "FWHM_TO_SIGMA",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
TRUNCATE_SIGMAS = 4.0


@dataclass
class SliceProfile:
    """Through-plane slice profile.

    ``gap_mm=None`` means one third of the slice thickness. ``fwhm_mm=None``
    means thickness minus gap. ``kind='kernel'`` uses ``kernel`` directly
    (weights on intermediate samples, odd length, renormalised to unit sum).
    """

    kind: str = "gaussian"
    fwhm_mm: float = None
    gap_mm: float = None
    gap_ratio: float = 1.0 / 3.0
    kernel: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "box", "kernel"):
            raise ValueError(f"unknown slice profile kind {self.kind!r}")
        if self.kind == "kernel":
            if self.kernel is None or len(self.kernel) % 2 != 1:
                raise ValueError("a user kernel must have odd length")
            if np.any(np.asarray(self.kernel) < 0):
                raise ValueError("user kernel weights must be non-negative")
        if self.fwhm_mm is not None and self.fwhm_mm < 0:
            raise ValueError("fwhm_mm must be >= 0")
        if self.gap_mm is not None and self.gap_mm < 0:
            raise ValueError("gap_mm must be >= 0")

    def resolve(self, thickness):
        """Return ``(gap_mm, fwhm_mm)`` for a slice of the given thickness."""
        gap = self.gap_ratio * thickness if self.gap_mm is None else self.gap_mm
        if gap >= thickness:
            raise ValueError(f"slice gap {gap} mm must be smaller than thickness {thickness} mm")
        fwhm = thickness - gap if self.fwhm_mm is None else self.fwhm_mm
        return gap, fwhm

    def weights(self, thickness, spacing):
        """Unit-sum 1-D kernel over intermediate samples of the given spacing."""
        if self.kind == "kernel":
            w = np.asarray(self.kernel, dtype=np.float64)
            return w / w.sum()
        _, fwhm = self.resolve(thickness)
        if self.kind == "gaussian":
            sigma = fwhm * FWHM_TO_SIGMA / spacing
            if sigma < 1e-3:
                return np.ones(1)
            radius = int(math.ceil(TRUNCATE_SIGMAS * sigma))
            j = np.arange(-radius, radius + 1)
            w = np.exp(-0.5 * (j / sigma) ** 2)
            return w / w.sum()
        width = fwhm / spacing
        if width <= 1.0:
            return np.ones(1)
        radius = int(math.ceil(width / 2 - 0.5))
        j = np.arange(-radius, radius + 1)
        # overlap of each unit sample cell with the box [-width/2, width/2]
        w = np.clip(np.minimum(j + 0.5, width / 2) - np.maximum(j - 0.5, -width / 2), 0, None)
        return w / w.sum()


def slice_axis(voxel_size, rtol=1e-6):
    """Axis with the largest voxel size; ties prefer z, then y."""
    vmax = max(voxel_size)
    for axis in (2, 1, 0):
        if voxel_size[axis] >= vmax * (1 - rtol):
            return axis
    raise AssertionError("unreachable")


@dataclass
class ProjectionOperator:
    hr_grid: GridSpec
    lr_grid: GridSpec
    profile: SliceProfile = field(default_factory=SliceProfile)
    mode: str = "project"
    axis: int = 2
    rates: tuple = (1, 1, 1)
    kernel: np.ndarray = field(default_factory=lambda: np.ones(1))
    pad: int = 0
    intermediate_shape: tuple = None
    # intermediate voxel index -> HR voxel coordinates (3x4)
    index_map: np.ndarray = None

    @property
    def intermediate_grid(self):
        """GridSpec of the padded intermediate grid (world geometry)."""
        if self.mode == "identity":
            return self.hr_grid
        scale = np.eye(4)
        scale[:3, :3] = np.diag(1.0 / np.asarray(self.rates, dtype=float))
        scale[:3, 3] = self._offset()
        return GridSpec(self.intermediate_shape, self.lr_grid.affine @ scale)

    def _offset(self):
        k = np.asarray(self.rates, dtype=float)
        off = np.zeros(3)
        off[self.axis] = self.pad
        return -0.5 + (0.5 - off) / k

    # --- array-level application -------------------------------------

    def forward(self, y):
        """``A y`` on raw arrays (HR -> LR)."""
        if y.shape != self.hr_grid.dims:
            raise ValueError(f"input dims {y.shape} do not match HR grid {self.hr_grid.dims}")
        if self.mode == "identity":
            return np.array(y, dtype=np.float32, copy=True)
        t = kernels.pull(y, self.index_map, self.intermediate_shape)
        s = _valid_correlate(t, self.kernel, self.axis)
        return _block_mean(s, self.rates)

    def adjoint(self, x):
        """``A^T x`` on raw arrays (LR -> HR); caller zeroes missing voxels."""
        if x.shape != self.lr_grid.dims:
            raise ValueError(f"input dims {x.shape} do not match LR grid {self.lr_grid.dims}")
        if self.mode == "identity":
            return np.array(x, dtype=np.float32, copy=True)
        s = _block_mean_adjoint(x, self.rates)
        t = _valid_correlate_adjoint(s, self.kernel, self.axis)
        return kernels.push(t, self.index_map, self.hr_grid.dims)


def _valid_correlate(a, w, axis):
    if len(w) == 1:
        return a
    n = a.shape[axis] - len(w) + 1
    out = np.zeros(a.shape[:axis] + (n,) + a.shape[axis + 1:], dtype=np.float64)
    for j, wj in enumerate(w):
        out += wj * np.take(a, np.arange(j, j + n), axis=axis)
    return out.astype(np.float32)


def _valid_correlate_adjoint(x, w, axis):
    if len(w) == 1:
        return x
    n = x.shape[axis]
    shape = list(x.shape)
    shape[axis] = n + len(w) - 1
    out = np.zeros(shape, dtype=np.float64)
    for j, wj in enumerate(w):
        sl = [slice(None)] * 3
        sl[axis] = slice(j, j + n)
        out[tuple(sl)] += wj * x
    return out.astype(np.float32)


def _block_mean(a, rates):
    if tuple(rates) == (1, 1, 1):
        return np.asarray(a, dtype=np.float32)
    k0, k1, k2 = rates
    n0, n1, n2 = a.shape[0] // k0, a.shape[1] // k1, a.shape[2] // k2
    return a.reshape(n0, k0, n1, k1, n2, k2).mean(axis=(1, 3, 5), dtype=np.float64).astype(np.float32)


def _block_mean_adjoint(x, rates):
    if tuple(rates) == (1, 1, 1):
        return np.asarray(x, dtype=np.float32)
    k0, k1, k2 = rates
    n0, n1, n2 = x.shape
    out = np.broadcast_to(
        (x / float(k0 * k1 * k2))[:, None, :, None, :, None], (n0, k0, n1, k1, n2, k2)
    )
    return np.ascontiguousarray(out.reshape(n0 * k0, n1 * k1, n2 * k2), dtype=np.float32)


def identity_operator(grid):
    """A = I on a single grid (denoising mode)."""
    return ProjectionOperator(grid, grid, SliceProfile(fwhm_mm=0.0, gap_mm=0.0), mode="identity")


def build_projection(hr, lr, profile=None, mode="project"):
    """Build the HR->LR projection for one observation grid."""
    profile = profile or SliceProfile()
    if mode == "identity":
        if not hr.same_as(lr):
            raise ValueError("identity mode requires the HR and LR grids to coincide")
        return identity_operator(hr)
    if mode != "project":
        raise ValueError(f"unknown projection mode {mode!r}")

    vh = float(np.mean(hr.voxel_size))
    vl = lr.voxel_size
    axis = slice_axis(vl)
    rates = tuple(max(1, int(round(v / vh))) for v in vl)
    spacing = vl[axis] / rates[axis]
    profile.resolve(vl[axis])  # validates the gap
    kernel = profile.weights(vl[axis], spacing)
    pad = (len(kernel) - 1) // 2

    shape = [n * k for n, k in zip(lr.dims, rates)]
    shape[axis] += 2 * pad
    op = ProjectionOperator(
        hr_grid=hr,
        lr_grid=lr,
        profile=profile,
        axis=axis,
        rates=rates,
        kernel=kernel,
        pad=pad,
        intermediate_shape=tuple(shape),
    )
    inter_to_world = op.intermediate_grid.affine
    op.index_map = (np.linalg.inv(hr.affine) @ inter_to_world)[:3]
    return op


def _as_array(v, dims, what):
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if data.shape != tuple(dims):
        raise ValueError(f"{what} dims {data.shape} do not match {tuple(dims)}")
    return data


def apply(op, y):
    """Noiseless LR volume ``A y`` (no mask)."""
    data = _as_array(y, op.hr_grid.dims, "HR input")
    return Volume(op.forward(data), op.lr_grid.affine)


def apply_adjoint(op, x):
    """``A^T x`` with masked LR voxels treated as zero."""
    data = _as_array(x, op.lr_grid.dims, "LR input")
    if isinstance(x, Volume):
        data = np.where(x.mask, 0.0, data).astype(np.float32)
    return Volume(op.adjoint(data), op.hr_grid.affine)


def diag_AtA_ones(op, mask=None):
    """``A^T M A 1`` where ``M`` drops missing LR voxels (``mask`` True)."""
    ones = np.ones(op.hr_grid.dims, dtype=np.float32)
    a1 = op.forward(ones)
    if mask is not None:
        a1 = np.where(mask, 0.0, a1).astype(np.float32)
    return np.maximum(op.adjoint(a1), 0.0)

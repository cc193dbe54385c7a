"""Reference reconstructions that do not run ADMM: B-spline reslicing and
same-channel averaging. FOT and TV go through :mod:`mtvsr.solver`.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import GridSpec, Volume

__all__ = ["InterpolationSpec", "bspline_upsample", "average_same_channel", "SUPPORTED_ORDERS"]

SUPPORTED_ORDERS = (0, 1, 3, 4)


@dataclass
class InterpolationSpec:
    target: GridSpec
    order: int = 4

    def __post_init__(self):
        if self.order not in SUPPORTED_ORDERS:
            raise ValueError(f"unsupported B-spline order {self.order}; choose from {SUPPORTED_ORDERS}")


def bspline_upsample(x, spec):
    """Resample ``x`` onto ``spec.target`` with a B-spline of ``spec.order``.

    Target voxels that map outside the source FOV, or whose nearest source
    voxel is missing, come back masked.
    """
    if not isinstance(spec, InterpolationSpec):
        raise TypeError("spec must be an InterpolationSpec")
    target = spec.target
    to_src = np.linalg.inv(x.affine) @ target.affine
    idx = np.indices(target.dims, dtype=np.float64).reshape(3, -1)
    coords = to_src[:3, :3] @ idx + to_src[:3, 3:4]

    dims = np.array(x.dims)[:, None]
    outside = np.any((coords < -0.5 - 1e-6) | (coords > dims - 0.5 + 1e-6), axis=0)
    src = np.where(x.mask, 0.0, x.data).astype(np.float64)
    vals = ndimage.map_coordinates(src, coords, order=spec.order, mode="mirror", prefilter=spec.order > 1)

    nearest = np.clip(np.rint(coords).astype(np.int64), 0, dims - 1)
    missing = x.mask[nearest[0], nearest[1], nearest[2]]
    mask = (outside | missing).reshape(target.dims)
    return Volume(vals.reshape(target.dims).astype(np.float32), target.affine, mask)


def average_same_channel(xs):
    """Voxelwise mean of volumes on one grid, ignoring masked entries."""
    if not xs:
        raise ValueError("need at least one volume to average")
    ref = xs[0]
    total = np.zeros(ref.dims, np.float64)
    count = np.zeros(ref.dims, np.int64)
    for v in xs:
        if v.dims != ref.dims or not np.allclose(v.affine, ref.affine, atol=1e-5):
            raise ValueError("volumes to average must share a grid")
        total += np.where(v.mask, 0.0, v.data)
        count += ~v.mask
    mask = count == 0
    mean = np.where(mask, 0.0, total / np.maximum(count, 1))
    return Volume(mean.astype(np.float32), ref.affine, mask)

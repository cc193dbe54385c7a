"""Finite-difference operator D, its adjoint, and prior/objective energies.

``grad`` returns a ``(6, nx, ny, nz)`` array per channel holding, for each
axis, the forward and then the backward difference divided by the voxel
size. Differences across the grid boundary are zero (replicate boundary).
"""

from enum import Enum

import numpy as np

from . import kernels

__all__ = [
    "PriorKind",
    "grad",
    "grad_adjoint",
    "dtd",
    "dtd_diagonal",
    "mtv_energy",
    "tv_energy",
    "fot_energy",
    "prior_energy",
    "data_energy",
    "objective",
]

G = 6


class PriorKind(str, Enum):
    FOT = "fot"
    TV = "tv"
    MTV = "mtv"


def _voxel_size(voxel_size):
    return np.ones(3) if voxel_size is None else np.asarray(voxel_size, dtype=np.float64)


def grad(y, voxel_size=None):
    y = np.asarray(y, dtype=np.float32)
    h = _voxel_size(voxel_size)
    out = np.zeros((G,) + y.shape, dtype=np.float32)
    for axis in range(3):
        if y.shape[axis] < 2:
            continue
        d = np.diff(y, axis=axis) / np.float32(h[axis])
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        out[(2 * axis,) + tuple(lo)] = d
        out[(2 * axis + 1,) + tuple(hi)] = d
    return out


def grad_adjoint(g, voxel_size=None):
    g = np.asarray(g, dtype=np.float32)
    h = _voxel_size(voxel_size)
    shape = g.shape[1:]
    out = np.zeros(shape, dtype=np.float64)
    for axis in range(3):
        if shape[axis] < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        # both rows of D along this axis act on the pair (n, n+1)
        pair = (g[(2 * axis,) + tuple(lo)].astype(np.float64) + g[(2 * axis + 1,) + tuple(hi)]) / h[axis]
        out[tuple(lo)] -= pair
        out[tuple(hi)] += pair
    return out.astype(np.float32)


def _stencil_weights(voxel_size):
    # forward and backward rows both connect each neighbour pair
    return 2.0 / _voxel_size(voxel_size) ** 2


def dtd(y, voxel_size=None):
    """``D^T D y`` via the 6-neighbour kernel."""
    return kernels.dtd(y, _stencil_weights(voxel_size))


def dtd_diagonal(shape, voxel_size=None):
    w = _stencil_weights(voxel_size)
    out = np.zeros(shape, dtype=np.float64)
    for axis in range(3):
        n = shape[axis]
        if n < 2:
            continue
        count = np.full(n, 2.0)
        count[0] = count[-1] = 1.0
        sh = [1, 1, 1]
        sh[axis] = n
        out = out + w[axis] * count.reshape(sh)
    return np.broadcast_to(out, shape).astype(np.float32)


def _check_same_grid(ys):
    shapes = {np.shape(y) for y in ys}
    if len(shapes) != 1:
        raise ValueError(f"all channels must share the HR grid, got shapes {sorted(shapes)}")


def mtv_energy(ys, lam, voxel_size=None):
    """Sum over voxels of the norm of the lambda-scaled, channel-stacked gradient."""
    _check_same_grid(ys)
    sq = np.zeros(np.shape(ys[0]), dtype=np.float64)
    for y, l in zip(ys, lam):
        sq += np.sum((l * grad(y, voxel_size).astype(np.float64)) ** 2, axis=0)
    return float(np.sum(np.sqrt(sq)))


def tv_energy(y, lam, voxel_size=None):
    g = grad(y, voxel_size).astype(np.float64)
    return float(lam * np.sum(np.sqrt(np.sum(g ** 2, axis=0))))


def fot_energy(y, lam, voxel_size=None):
    g = grad(y, voxel_size).astype(np.float64)
    return float(0.5 * lam * np.sum(g ** 2))


def prior_energy(kind, ys, lam, voxel_size=None):
    kind = PriorKind(kind)
    if kind is PriorKind.MTV:
        return mtv_energy(ys, lam, voxel_size)
    if kind is PriorKind.TV:
        return sum(tv_energy(y, l, voxel_size) for y, l in zip(ys, lam))
    return sum(fot_energy(y, l, voxel_size) for y, l in zip(ys, lam))


def data_energy(observations, y):
    """``sum_i tau_i/2 ||x_i - A_i y||^2`` over observed LR voxels."""
    total = 0.0
    for ob in observations:
        r = ob.operator.forward(y).astype(np.float64) - ob.volume.data
        r[ob.volume.mask] = 0.0
        total += 0.5 * ob.tau * float(np.sum(r * r))
    return total


def objective(model, ys):
    """Negative log-posterior (up to constants) of the HR images ``ys``."""
    data = sum(data_energy(ch.observations, y) for ch, y in zip(model.channels, ys))
    return data + prior_energy(model.prior, ys, model.lam, model.hr_grid.voxel_size)

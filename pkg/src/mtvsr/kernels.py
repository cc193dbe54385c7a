"""Hot inner loops: trilinear pull/push resampling, the 6-neighbour
difference stencil and the per-voxel group shrinkage.

Every kernel has a numba implementation and a pure-numpy one. The public
names dispatch on :data:`mtvsr._jit.JIT_ENABLED`; both variants stay
importable (``*_numba`` / ``*_numpy``) so tests and the benchmark can
compare them directly.

Conventions: volumes are C-ordered ``(nx, ny, nz)`` arrays; ``mat`` is a
3x4 affine taking an output voxel index to input voxel coordinates.
Samples whose trilinear corners fall outside the input grid read zero.
"""

import numpy as np

from ._jit import JIT_ENABLED, njit

__all__ = ["pull", "push", "dtd", "group_shrink", "JIT_ENABLED"]


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _pull_numba(y, mat, out):
    nx, ny, nz = y.shape
    ox, oy, oz = out.shape
    for i in range(ox):
        for j in range(oy):
            for k in range(oz):
                cx = mat[0, 0] * i + mat[0, 1] * j + mat[0, 2] * k + mat[0, 3]
                cy = mat[1, 0] * i + mat[1, 1] * j + mat[1, 2] * k + mat[1, 3]
                cz = mat[2, 0] * i + mat[2, 1] * j + mat[2, 2] * k + mat[2, 3]
                x0 = int(np.floor(cx))
                y0 = int(np.floor(cy))
                z0 = int(np.floor(cz))
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                acc = 0.0
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= nx:
                        continue
                    wx = fx if dx else 1.0 - fx
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= ny:
                            continue
                        wy = fy if dy else 1.0 - fy
                        for dz in range(2):
                            zz = z0 + dz
                            if zz < 0 or zz >= nz:
                                continue
                            wz = fz if dz else 1.0 - fz
                            acc += wx * wy * wz * y[xx, yy, zz]
                out[i, j, k] = acc
    return out


@njit(cache=True, nogil=True)
def _push_numba(x, mat, out):
    nx, ny, nz = out.shape
    ox, oy, oz = x.shape
    for i in range(ox):
        for j in range(oy):
            for k in range(oz):
                v = x[i, j, k]
                if v == 0.0:
                    continue
                cx = mat[0, 0] * i + mat[0, 1] * j + mat[0, 2] * k + mat[0, 3]
                cy = mat[1, 0] * i + mat[1, 1] * j + mat[1, 2] * k + mat[1, 3]
                cz = mat[2, 0] * i + mat[2, 1] * j + mat[2, 2] * k + mat[2, 3]
                x0 = int(np.floor(cx))
                y0 = int(np.floor(cy))
                z0 = int(np.floor(cz))
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= nx:
                        continue
                    wx = fx if dx else 1.0 - fx
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= ny:
                            continue
                        wy = fy if dy else 1.0 - fy
                        for dz in range(2):
                            zz = z0 + dz
                            if zz < 0 or zz >= nz:
                                continue
                            wz = fz if dz else 1.0 - fz
                            out[xx, yy, zz] += wx * wy * wz * v
    return out


@njit(cache=True, nogil=True)
def _dtd_numba(y, w, out):
    nx, ny, nz = y.shape
    wx, wy, wz = w[0], w[1], w[2]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                c = y[i, j, k]
                acc = 0.0
                if i > 0:
                    acc += wx * (c - y[i - 1, j, k])
                if i < nx - 1:
                    acc += wx * (c - y[i + 1, j, k])
                if j > 0:
                    acc += wy * (c - y[i, j - 1, k])
                if j < ny - 1:
                    acc += wy * (c - y[i, j + 1, k])
                if k > 0:
                    acc += wz * (c - y[i, j, k - 1])
                if k < nz - 1:
                    acc += wz * (c - y[i, j, k + 1])
                out[i, j, k] = acc
    return out


@njit(cache=True, nogil=True)
def _group_shrink_numba(u, thresh):
    ng = u.shape[0]
    n = u.shape[1]
    for v in range(n):
        s = 0.0
        for g in range(ng):
            s += float(u[g, v]) * float(u[g, v])
        nrm = np.sqrt(s)
        if nrm <= thresh:
            for g in range(ng):
                u[g, v] = 0.0
        else:
            scale = (nrm - thresh) / nrm
            for g in range(ng):
                u[g, v] = u[g, v] * scale
    return u


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------

def _corners(mat, shape, in_shape):
    """Flat corner indices and trilinear weights for every output voxel."""
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1)
    coords = mat[:, :3] @ idx + mat[:, 3:4]
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.int64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                off = np.array([dx, dy, dz])[:, None]
                c = base + off
                ok = np.all((c >= 0) & (c < np.array(in_shape)[:, None]), axis=0)
                w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=0)
                flat = np.ravel_multi_index(np.where(ok, c, 0), in_shape)
                yield flat, np.where(ok, w, 0.0)


def _pull_numpy(y, mat, out):
    acc = np.zeros(out.size)
    src = y.ravel()
    for flat, w in _corners(mat, out.shape, y.shape):
        acc += w * src[flat]
    out[...] = acc.reshape(out.shape)
    return out


def _push_numpy(x, mat, out):
    vals = x.ravel().astype(np.float64)
    acc = np.zeros(out.size)
    for flat, w in _corners(mat, x.shape, out.shape):
        acc += np.bincount(flat, weights=w * vals, minlength=out.size)
    out += acc.reshape(out.shape)
    return out


def _dtd_numpy(y, w, out):
    acc = np.zeros(y.shape)
    y64 = y.astype(np.float64)
    for axis in range(3):
        if y.shape[axis] < 2:
            continue
        d = np.diff(y64, axis=axis)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        acc[tuple(lo)] -= w[axis] * d
        acc[tuple(hi)] += w[axis] * d
    out[...] = acc
    return out


def _group_shrink_numpy(u, thresh):
    nrm = np.sqrt(np.sum(u.astype(np.float64) ** 2, axis=0))
    scale = np.where(nrm > thresh, (nrm - thresh) / np.where(nrm > 0, nrm, 1.0), 0.0)
    u *= scale.astype(u.dtype)
    return u


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def pull(y, mat, out_shape, use_jit=None):
    """Trilinear resampling of ``y`` at ``mat @ index`` for each output voxel."""
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    y = np.ascontiguousarray(y, dtype=np.float32)
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    out = np.empty(tuple(out_shape), dtype=np.float64)
    (_pull_numba if use_jit else _pull_numpy)(y, mat, out)
    return out.astype(np.float32)


def push(x, mat, in_shape, use_jit=None):
    """Exact adjoint of :func:`pull` (scatter-add with the same weights)."""
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    x = np.ascontiguousarray(x, dtype=np.float32)
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    out = np.zeros(tuple(in_shape), dtype=np.float64)
    (_push_numba if use_jit else _push_numpy)(x, mat, out)
    return out.astype(np.float32)


def dtd(y, weights, use_jit=None):
    """Neumann 6-neighbour stencil: ``sum_nb weights[axis] * (y[n] - y[nb])``."""
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    y = np.ascontiguousarray(y, dtype=np.float32)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    out = np.empty(y.shape, dtype=np.float64)
    (_dtd_numba if use_jit else _dtd_numpy)(y, w, out)
    return out.astype(np.float32)


def group_shrink(u, thresh, use_jit=None):
    """Vector soft-threshold of each column ``u[:, v]`` by ``thresh`` (in place)."""
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    if not u.flags.c_contiguous:
        raise ValueError("group_shrink works in place and needs a C-contiguous array")
    (_group_shrink_numba if use_jit else _group_shrink_numpy)(u, float(thresh))
    return u

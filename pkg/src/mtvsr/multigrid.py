"""Inner linear solvers for ``(diag(d) + beta * D^T D) x = b``.

Geometric multigrid on cell-centred grids: pair-averaging (full-weighting)
restriction, trilinear prolongation, damped Jacobi smoothing and a dense
Cholesky solve on the coarsest level. Plain and preconditioned conjugate
gradients cover general SPD operators.
"""

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg

from .regularizer import dtd, dtd_diagonal

logger = logging.getLogger(__name__)

__all__ = ["InnerSolverError", "MajoriserSystem", "Multigrid", "conjugate_gradient", "SolveInfo"]

COARSEST_SIZE = 512


class InnerSolverError(RuntimeError):
    """Inner solve diverged (residual grew more than tenfold)."""

    def __init__(self, message, residuals):
        super().__init__(f"{message}; residual trace: {[f'{r:.3e}' for r in residuals]}")
        self.residuals = residuals


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    converged: bool


@dataclass
class MajoriserSystem:
    """``H x = d * x + beta * D^T D x`` on a grid with voxel size ``h``."""

    d: np.ndarray
    beta: float
    h: np.ndarray

    def apply(self, x):
        out = self.d * x
        if self.beta:
            out = out + np.float32(self.beta) * dtd(x, self.h)
        return out.astype(np.float32)

    def diagonal(self):
        return (self.d + self.beta * dtd_diagonal(self.d.shape, self.h)).astype(np.float32)


def _restrict_axis(a, axis):
    n = a.shape[axis]
    if n % 2:
        last = np.take(a, [n - 1], axis=axis)
        a = np.concatenate([a, last], axis=axis)
    shape = a.shape[:axis] + (a.shape[axis] // 2, 2) + a.shape[axis + 1:]
    return a.reshape(shape).mean(axis=axis + 1)


def _prolong_weights(n_fine, n_coarse):
    pos = np.clip((np.arange(n_fine) - 0.5) / 2.0, 0.0, n_coarse - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_coarse - 1)
    return lo, hi, pos - lo


def _prolong_axis(a, axis, n_fine):
    lo, hi, w = _prolong_weights(n_fine, a.shape[axis])
    sh = [1] * a.ndim
    sh[axis] = n_fine
    w = w.reshape(sh)
    return np.take(a, lo, axis=axis) * (1 - w) + np.take(a, hi, axis=axis) * w


def _dense_laplacian(shape, weights):
    n_total = int(np.prod(shape))
    out = np.zeros((n_total, n_total))
    for axis, n in enumerate(shape):
        if n < 2:
            continue
        lap = np.diag(np.r_[1.0, np.full(n - 2, 2.0), 1.0]) - np.eye(n, k=1) - np.eye(n, k=-1)
        mats = [np.eye(m) for m in shape]
        mats[axis] = lap
        out += weights[axis] * np.kron(np.kron(mats[0], mats[1]), mats[2])
    return out


class Multigrid:
    """V-cycle solver for one :class:`MajoriserSystem`."""

    def __init__(self, system, pre=2, post=2, omega=0.8):
        self.pre, self.post, self.omega = pre, post, omega
        self.levels = [system]
        while True:
            sys_ = self.levels[-1]
            shape = sys_.d.shape
            if int(np.prod(shape)) <= COARSEST_SIZE or max(shape) < 3:
                break
            d, h = sys_.d, np.array(sys_.h, dtype=np.float64)
            for axis, n in enumerate(shape):
                if n >= 3:
                    d = _restrict_axis(d, axis)
                    h[axis] *= 2.0
            self.levels.append(MajoriserSystem(d.astype(np.float32), sys_.beta, h))
        self.diags = [lvl.diagonal() for lvl in self.levels]
        last = self.levels[-1]
        dense = np.diag(last.d.ravel().astype(np.float64))
        dense += last.beta * _dense_laplacian(last.d.shape, 2.0 / np.asarray(last.h) ** 2)
        # tiny ridge keeps a data-free coarse level (pure Neumann) factorisable
        dense += np.eye(dense.shape[0]) * 1e-10 * max(np.abs(np.diag(dense)).max(), 1e-30)
        self._coarse = linalg.cho_factor(dense)

    def _restrict(self, r, level):
        for axis, n in enumerate(self.levels[level].d.shape):
            if n >= 3:
                r = _restrict_axis(r, axis)
        return r

    def _prolong(self, e, level):
        for axis, n in enumerate(self.levels[level].d.shape):
            if n >= 3:
                e = _prolong_axis(e, axis, n)
        return e

    def _smooth(self, level, x, b, sweeps):
        sys_, diag = self.levels[level], self.diags[level]
        for _ in range(sweeps):
            x = x + self.omega * (b - sys_.apply(x)) / diag
        return x.astype(np.float32)

    def vcycle(self, b, x=None, level=0):
        sys_ = self.levels[level]
        if level == len(self.levels) - 1:
            sol = linalg.cho_solve(self._coarse, b.ravel().astype(np.float64))
            return sol.reshape(b.shape).astype(np.float32)
        x = np.zeros_like(b) if x is None else x
        x = self._smooth(level, x, b, self.pre)
        r = b - sys_.apply(x)
        e = self.vcycle(self._restrict(r, level).astype(np.float32), None, level + 1)
        x = x + self._prolong(e, level).astype(np.float32)
        return self._smooth(level, x, b, self.post)

    def solve(self, b, x0=None, tol=1e-4, max_cycles=40):
        sys_ = self.levels[0]
        b = np.asarray(b, dtype=np.float32)
        bnorm = float(np.linalg.norm(b.astype(np.float64)))
        if bnorm == 0.0:
            return np.zeros_like(b), SolveInfo(0, 0.0, True)
        x = np.zeros_like(b) if x0 is None else x0.astype(np.float32)
        res = [float(np.linalg.norm((b - sys_.apply(x)).astype(np.float64))) / bnorm]
        for it in range(1, max_cycles + 1):
            x = self.vcycle(b, x)
            res.append(float(np.linalg.norm((b - sys_.apply(x)).astype(np.float64))) / bnorm)
            if not np.isfinite(res[-1]) or res[-1] > 10.0 * res[0]:
                raise InnerSolverError("multigrid diverged", res)
            if res[-1] < tol:
                return x, SolveInfo(it, res[-1], True)
        return x, SolveInfo(max_cycles, res[-1], False)

    def precondition(self, r):
        return self.vcycle(np.asarray(r, dtype=np.float32))


def conjugate_gradient(apply, b, x0=None, tol=1e-4, max_iter=40, precond=None):
    """(Preconditioned) CG on an SPD operator, accumulating dot products in float64."""
    b = np.asarray(b, dtype=np.float32)
    bnorm = float(np.linalg.norm(b.astype(np.float64)))
    if bnorm == 0.0:
        return np.zeros_like(b), SolveInfo(0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float32)
    r = (b - apply(x)).astype(np.float32)
    z = precond(r) if precond else r
    p = z.copy()
    rz = float(np.vdot(r.astype(np.float64), z))
    res = [float(np.linalg.norm(r.astype(np.float64))) / bnorm]
    if res[0] < tol:
        return x, SolveInfo(0, res[0], True)
    for it in range(1, max_iter + 1):
        ap = apply(p)
        pap = float(np.vdot(p.astype(np.float64), ap))
        if pap <= 0:
            raise InnerSolverError("operator is not positive definite", res)
        alpha = rz / pap
        x = (x + alpha * p).astype(np.float32)
        r = (r - alpha * ap).astype(np.float32)
        res.append(float(np.linalg.norm(r.astype(np.float64))) / bnorm)
        if not np.isfinite(res[-1]) or res[-1] > 10.0 * res[0]:
            raise InnerSolverError("conjugate gradient diverged", res)
        if res[-1] < tol:
            return x, SolveInfo(it, res[-1], True)
        z = precond(r) if precond else r
        rz_new = float(np.vdot(r.astype(np.float64), z))
        p = (z + (rz_new / rz) * p).astype(np.float32)
        rz = rz_new
    return x, SolveInfo(max_iter, res[-1], False)

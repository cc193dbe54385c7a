"""ADMM for multi-channel TV super-resolution.

The split is ``z_c = lam_c * D y_c``. Each outer iteration:

1. y-update per channel: one (or more) Newton steps on the augmented
   Lagrangian using the majoriser ``H = diag(sum_i tau_i A_i^T M_i A_i 1)
   + rho lam^2 D^T D`` inverted by multigrid; or, with
   ``inner_solver='cg'``, CG on the exact Hessian system.
2. z-update: vector soft-threshold of ``w/rho + lam D y`` by ``1/rho``,
   grouped over all channels and all six differences of a voxel (MTV) or
   per channel (TV).
3. w-update: ``w += rho (lam D y - z)``.

With ``adapt_rho`` (the default) rho is doubled or halved when the primal
residual ``|lam D y - z|`` and the dual residual ``rho |lam D^T dz|`` are
more than ``RHO_ADAPT_RATIO`` apart, at most ``RHO_ADAPT_MAX`` times per
run so the tail runs with a fixed rho.

Z and W are stored as ``(C, 6, nx, ny, nz)`` float32 arrays.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import time

import numpy as np

from . import kernels
from .forward_model import diag_AtA_ones
from .image_io import RunReport
from .multigrid import MajoriserSystem, Multigrid, conjugate_gradient
from .regularizer import PriorKind, dtd, grad, grad_adjoint, objective

logger = logging.getLogger(__name__)

__all__ = [
    "Observation",
    "Channel",
    "ModelSpec",
    "SolverState",
    "SolverAbort",
    "rho_heuristic",
    "rho_scaled",
    "RHO_SCALE",
    "balance_rho",
    "residuals",
    "prox_z",
    "update_y",
    "update_z",
    "update_w",
    "solve",
    "solve_fot",
    "relative_change",
]


class SolverAbort(RuntimeError):
    """Non-finite objective or other unrecoverable solver state."""


@dataclass
class Observation:
    volume: object
    operator: object
    tau: float
    mu: float = None
    name: str = None


@dataclass
class Channel:
    name: str
    observations: list


@dataclass
class ModelSpec:
    channels: list
    lam: list
    hr_grid: object
    prior: PriorKind = PriorKind.MTV
    max_iter: int = 200
    tol: float = 1e-4
    rho: float = None
    inner_solver: str = "multigrid"
    inner_tol: float = 1e-4
    inner_max_iter: int = 40
    newton_steps: int = 10
    threads: int = 1
    rho_rule: str = "scaled"
    adapt_rho: bool = True

    def __post_init__(self):
        self.prior = PriorKind(self.prior)
        self.lam = [float(l) for l in self.lam]
        if len(self.lam) != len(self.channels):
            raise ValueError("need one lambda per channel")
        if any(not l > 0 for l in self.lam):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.rho is not None and not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.rho_rule not in RHO_RULES:
            raise ValueError(f"unknown rho rule {self.rho_rule!r}; choose from {tuple(RHO_RULES)}")
        if self.newton_steps < 1:
            raise ValueError("newton_steps must be at least 1")
        if self.inner_solver not in ("multigrid", "cg"):
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")
        for ch in self.channels:
            if not ch.observations:
                raise ValueError(f"channel {ch.name!r} has no observations")
            for ob in ch.observations:
                if not ob.tau > 0:
                    raise ValueError(f"tau must be positive, got {ob.tau}")
                if not ob.operator.hr_grid.same_as(self.hr_grid):
                    raise ValueError(f"operator for channel {ch.name!r} does not target the HR grid")

    @property
    def n_channels(self):
        return len(self.channels)

    @property
    def voxel_size(self):
        return self.hr_grid.voxel_size

    def taus(self):
        return [ob.tau for ch in self.channels for ob in ch.observations]

    def resolve_rho(self):
        if self.rho is not None:
            return float(self.rho)
        return RHO_RULES[self.rho_rule](self.lam, self.taus())


@dataclass
class SolverState:
    Y: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    rho: float
    iter: int = 0
    objective_trace: list = field(default_factory=list)

    @classmethod
    def zeros(cls, model, rho):
        shape = (model.n_channels,) + model.hr_grid.dims
        gshape = (model.n_channels, 6) + model.hr_grid.dims
        return cls(
            np.zeros(shape, np.float32), np.zeros(gshape, np.float32), np.zeros(gshape, np.float32), rho
        )


def rho_heuristic(lam, tau):
    """``sqrt(mean lam) / mean tau``; depends on the intensity scale."""
    if len(lam) == 0 or len(tau) == 0:
        raise ValueError("need at least one lambda and one tau")
    return math.sqrt(float(np.mean(lam))) / float(np.mean(tau))


# picked from convergence runs on the simulated phantom (x2 to x6 slices)
RHO_SCALE = 0.03


def rho_scaled(lam, tau, scale=RHO_SCALE):
    """``scale * sqrt(mean tau) / mean lam``.

    ``z = lam D y`` and the objective are dimensionless, so rho must be too;
    this ratio is, and stays fixed when all intensities are rescaled.
    """
    if len(lam) == 0 or len(tau) == 0:
        raise ValueError("need at least one lambda and one tau")
    return scale * math.sqrt(float(np.mean(tau))) / float(np.mean(lam))


RHO_RULES = {"scaled": rho_scaled, "heuristic": rho_heuristic}

RHO_ADAPT_RATIO = 10.0
RHO_ADAPT_FACTOR = 2.0
RHO_ADAPT_MAX = 20


def balance_rho(rho, primal, dual):
    """Residual balancing: the rho for the next iteration."""
    if primal > RHO_ADAPT_RATIO * dual:
        return rho * RHO_ADAPT_FACTOR
    if dual > RHO_ADAPT_RATIO * primal:
        return rho / RHO_ADAPT_FACTOR
    return rho


def relative_change(prev, cur):
    return abs(2.0 * (prev - cur) / (prev + cur))


def prox_z(u, rho, groups=1):
    """Closed-form minimiser of ``rho/2 ||z - u||^2 + ||z||`` per voxel.

    ``u`` has shape ``(C, 6, ...)``. With ``groups=1`` the norm runs over all
    ``6C`` entries of a voxel (MTV); with ``groups=C`` over each channel's
    six entries (TV).
    """
    u = np.array(u, dtype=np.float32, copy=True)
    c = u.shape[0]
    nvox = int(np.prod(u.shape[2:])) if u.ndim > 2 else 1
    if groups == 1:
        flat = u.reshape(c * u.shape[1], nvox)
        kernels.group_shrink(flat, 1.0 / rho)
        return flat.reshape(u.shape)
    for k in range(c):
        flat = np.ascontiguousarray(u[k].reshape(u.shape[1], nvox))
        kernels.group_shrink(flat, 1.0 / rho)
        u[k] = flat.reshape(u.shape[1:])
    return u


class _ChannelCache:
    """Per-channel constants: ``sum tau A^T M x`` and the majoriser."""

    def __init__(self, model, c, rho):
        ch = model.channels[c]
        dims = model.hr_grid.dims
        self.rhs = np.zeros(dims, np.float32)
        self.diag = np.zeros(dims, np.float32)
        for ob in ch.observations:
            x = np.where(ob.volume.mask, 0.0, ob.volume.data).astype(np.float32)
            self.rhs += np.float32(ob.tau) * ob.operator.adjoint(x)
            self.diag += np.float32(ob.tau) * diag_AtA_ones(ob.operator, ob.volume.mask)
        self.observations = ch.observations
        self.lam = model.lam[c]
        self.h = np.asarray(model.voxel_size, dtype=np.float64)
        self.set_rho(rho)

    def set_rho(self, rho):
        self.beta = rho * self.lam ** 2
        self._mg = None

    @property
    def multigrid(self):
        if self._mg is None:
            self._mg = Multigrid(MajoriserSystem(self.diag, self.beta, self.h))
        return self._mg

    def data_hessian(self, y):
        """``sum_i tau_i A_i^T M_i A_i y``."""
        out = np.zeros(y.shape, np.float64)
        for ob in self.observations:
            ay = ob.operator.forward(y)
            ay[ob.volume.mask] = 0.0
            out += ob.tau * ob.operator.adjoint(ay)
        return out.astype(np.float32)

    def hessian(self, y):
        return (self.data_hessian(y) + np.float32(self.beta) * dtd(y, self.h)).astype(np.float32)


def _y_gradient(cache, y, z, w, rho):
    g = cache.data_hessian(y) - cache.rhs
    g = g + np.float32(cache.lam) * grad_adjoint(w - np.float32(rho) * z, cache.h)
    g = g + np.float32(cache.beta) * dtd(y, cache.h)
    return g.astype(np.float32)


def update_y(c, state, model, cache=None):
    """Newton step(s) on the y_c subproblem; returns the new y_c."""
    cache = cache or _ChannelCache(model, c, state.rho)
    y = state.Y[c].copy()
    for _ in range(model.newton_steps):
        g = _y_gradient(cache, y, state.Z[c], state.W[c], state.rho)
        if model.inner_solver == "multigrid":
            step, info = cache.multigrid.solve(g, tol=model.inner_tol, max_cycles=model.inner_max_iter)
        else:
            step, info = conjugate_gradient(
                cache.hessian, g, tol=model.inner_tol, max_iter=model.inner_max_iter
            )
        logger.debug("channel %d inner solve: %s", c, info)
        y = (y - step).astype(np.float32)
    return y


def lam_grad(state, model):
    h = model.voxel_size
    return np.stack([np.float32(l) * grad(y, h) for y, l in zip(state.Y, model.lam)])


def update_z(state, model, lam_dy=None):
    lam_dy = lam_grad(state, model) if lam_dy is None else lam_dy
    groups = 1 if model.prior is PriorKind.MTV else model.n_channels
    return prox_z(state.W / np.float32(state.rho) + lam_dy, state.rho, groups)


def update_w(state, model, lam_dy=None):
    lam_dy = lam_grad(state, model) if lam_dy is None else lam_dy
    return (state.W + np.float32(state.rho) * (lam_dy - state.Z)).astype(np.float32)


def residuals(state, model, lam_dy, z_prev):
    """Primal ``|lam D y - z|`` and dual ``rho |lam D^T (z - z_prev)|`` norms."""
    primal = float(np.linalg.norm((lam_dy - state.Z).astype(np.float64)))
    dz = state.Z - z_prev
    dual_sq = 0.0
    for c, l in enumerate(model.lam):
        dual_sq += float(np.sum((np.float32(l) * grad_adjoint(dz[c], model.voxel_size)).astype(np.float64) ** 2))
    return primal, state.rho * math.sqrt(dual_sq)


def _check_finite(value, state):
    if not np.isfinite(value):
        raise SolverAbort(
            f"objective became non-finite at iteration {state.iter}; "
            f"last values {state.objective_trace[-5:]}; "
            f"|Y|max={float(np.nanmax(np.abs(state.Y))):.3e}, rho={state.rho}"
        )


def solve(model, initial=None, callback=None, method=None):
    """Run ADMM until the relative objective change drops below ``model.tol``.

    Returns ``(Y, report)`` with ``Y`` of shape ``(C, nx, ny, nz)``.
    """
    if model.prior is PriorKind.FOT:
        raise ValueError("FOT is quadratic; use solve_fot")
    t0 = time.perf_counter()
    rho = model.resolve_rho()
    state = SolverState.zeros(model, rho)
    if initial is not None:
        state.Y[...] = np.asarray(initial, dtype=np.float32)
    caches = [_ChannelCache(model, c, rho) for c in range(model.n_channels)]
    state.objective_trace.append(objective(model, state.Y))
    _check_finite(state.objective_trace[-1], state)

    pool = ThreadPoolExecutor(model.threads) if model.threads > 1 else None
    converged = False
    rho_changes = 0
    try:
        while state.iter < model.max_iter:
            if pool is not None:
                futures = [pool.submit(update_y, c, state, model, caches[c]) for c in range(model.n_channels)]
                new_y = [f.result() for f in futures]
            else:
                new_y = [update_y(c, state, model, caches[c]) for c in range(model.n_channels)]
            state.Y = np.stack(new_y)
            lam_dy = lam_grad(state, model)
            z_prev = state.Z
            state.Z = update_z(state, model, lam_dy)
            state.W = update_w(state, model, lam_dy)
            state.iter += 1
            value = objective(model, state.Y)
            state.objective_trace.append(value)
            _check_finite(value, state)
            if callback is not None:
                callback(state)
            change = relative_change(state.objective_trace[-2], value)
            logger.debug("iter %d objective %.6e change %.3e", state.iter, value, change)
            if change < model.tol:
                converged = True
                break
            if model.adapt_rho and rho_changes < RHO_ADAPT_MAX:
                new_rho = balance_rho(state.rho, *residuals(state, model, lam_dy, z_prev))
                if new_rho != state.rho:
                    rho_changes += 1
                    logger.debug("iter %d rho %.4g -> %.4g", state.iter, state.rho, new_rho)
                    state.rho = new_rho
                    for cache in caches:
                        cache.set_rho(new_rho)
    finally:
        if pool is not None:
            pool.shutdown()

    report = RunReport(
        method=method or model.prior.value,
        channels=[ch.name for ch in model.channels],
        tau=[[ob.tau for ob in ch.observations] for ch in model.channels],
        lam=list(model.lam),
        mu=[[ob.mu for ob in ch.observations] for ch in model.channels],
        rho=state.rho,
        objective_trace=list(state.objective_trace),
        iterations=state.iter,
        converged=converged,
        wall_seconds=time.perf_counter() - t0,
        inner_solver=model.inner_solver,
    )
    if rho_changes:
        report.notes.append(f"rho adapted {rho_changes} times, starting from {rho:.6g}")
    return state.Y, report


def solve_fot(model, tol=1e-6, max_iter=500):
    """Minimise the first-order Tikhonov objective directly.

    Each channel solves ``(sum tau A^T M A + lam D^T D) y = sum tau A^T M x``
    with CG preconditioned by a multigrid V-cycle on the majoriser.
    """
    t0 = time.perf_counter()
    ys = []
    converged = True
    for c in range(model.n_channels):
        # beta = lam so the cache's Hessian is the FOT normal matrix
        cache = _ChannelCache(model, c, rho=1.0)
        cache.beta = model.lam[c]
        y, info = conjugate_gradient(
            cache.hessian, cache.rhs, tol=tol, max_iter=max_iter, precond=cache.multigrid.precondition
        )
        converged &= info.converged
        logger.debug("FOT channel %d: %s", c, info)
        ys.append(y)
    Y = np.stack(ys)
    value = objective(model, Y)
    report = RunReport(
        method="fot",
        channels=[ch.name for ch in model.channels],
        tau=[[ob.tau for ob in ch.observations] for ch in model.channels],
        lam=list(model.lam),
        mu=[[ob.mu for ob in ch.observations] for ch in model.channels],
        objective_trace=[objective(model, np.zeros_like(Y)), value],
        iterations=1,
        converged=converged,
        wall_seconds=time.perf_counter() - t0,
        inner_solver="pcg-multigrid",
    )
    return Y, report

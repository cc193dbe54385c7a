"""Glue between estimation, the forward model and the solvers.

``reconstruct`` takes LR volumes grouped by channel and returns one HR
volume per channel plus the run report, for any of the four methods.
"""

import logging
import time

import numpy as np

from .baselines import InterpolationSpec, average_same_channel, bspline_upsample
from .estimation import fit_rician_mixture, lambda_heuristic
from .forward_model import SliceProfile, build_projection, identity_operator
from .image_io import RunReport
from .regularizer import PriorKind
from .solver import Channel, ModelSpec, Observation, solve, solve_fot
from .volume import Volume, hr_grid_from_observations

logger = logging.getLogger(__name__)

__all__ = ["METHODS", "estimate_parameters", "build_model", "reconstruct"]

METHODS = ("bs", "fot", "tv", "mtv")


def estimate_parameters(channels, tau_override=None, lam_override=None):
    """Per-observation (tau, mu) from Rician fits and per-channel lambda.

    ``channels`` maps a channel name to its list of LR Volumes. Overrides
    are dicts keyed by channel name; a tau override applies to every
    observation of that channel.
    """
    tau_override = tau_override or {}
    lam_override = lam_override or {}
    taus, mus, lams = {}, {}, {}
    for name, vols in channels.items():
        taus[name], mus[name] = [], []
        for v in vols:
            if name in tau_override and name in lam_override:
                taus[name].append(float(tau_override[name]))
                mus[name].append(None)
                continue
            fit = fit_rician_mixture(v)
            taus[name].append(float(tau_override.get(name, fit.tau)))
            mus[name].append(fit.mu_tissue)
        if name in lam_override:
            lams[name] = float(lam_override[name])
        else:
            lams[name] = lambda_heuristic(float(np.mean(mus[name])))
    return taus, mus, lams


def build_model(
    channels,
    prior="mtv",
    hr_grid=None,
    voxel_size=1.0,
    profile=None,
    denoise=False,
    tau_override=None,
    lam_override=None,
    **solver_options,
):
    """Estimate parameters and assemble a :class:`ModelSpec`."""
    vols = [v for vs in channels.values() for v in vs]
    if denoise:
        grid = vols[0].grid
        for v in vols[1:]:
            if not v.grid.same_as(grid):
                raise ValueError("denoising requires all inputs on identical grids")
        hr_grid = grid
    elif hr_grid is None:
        hr_grid = hr_grid_from_observations(vols, voxel_size)
    taus, mus, lams = estimate_parameters(channels, tau_override, lam_override)
    chans = []
    for name, vs in channels.items():
        obs = []
        for v, tau, mu in zip(vs, taus[name], mus[name]):
            if denoise:
                op = identity_operator(hr_grid)
            else:
                op = build_projection(hr_grid, v.grid, SliceProfile(**(profile or {})))
            obs.append(Observation(v, op, tau, mu))
        chans.append(Channel(name, obs))
    model = ModelSpec(chans, [lams[n] for n in channels], hr_grid, PriorKind(prior), **solver_options)
    return model


def _bspline(channels, hr_grid, order=4):
    t0 = time.perf_counter()
    out = []
    for name, vs in channels.items():
        spec = InterpolationSpec(hr_grid, order)
        out.append(average_same_channel([bspline_upsample(v, spec) for v in vs]))
    report = RunReport(method="bs", channels=list(channels), wall_seconds=time.perf_counter() - t0)
    return out, report


def reconstruct(channels, method="mtv", hr_grid=None, voxel_size=1.0, denoise=False, **kwargs):
    """Reconstruct HR volumes; returns ``(list of Volume, RunReport)``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "bs":
        if hr_grid is None:
            vols = [v for vs in channels.values() for v in vs]
            hr_grid = vols[0].grid if denoise else hr_grid_from_observations(vols, voxel_size)
        return _bspline(channels, hr_grid)
    overrides = {k: kwargs.get(k) for k in ("tau_override", "lam_override") if kwargs.get(k)}
    model = build_model(channels, method, hr_grid, voxel_size, denoise=denoise, **kwargs)
    if method == "fot":
        Y, report = solve_fot(model)
    else:
        Y, report = solve(model, method=method)
    report.overrides = overrides
    if denoise:
        report.notes.append("denoising mode: identity projection")
    out = [Volume(y, model.hr_grid.affine) for y in Y]
    return out, report

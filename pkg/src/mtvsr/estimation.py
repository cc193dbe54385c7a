"""Noise precision and regularisation estimates from a two-class Rician fit.

The mixture is fitted by EM on the intensity histogram. Treating the
unobserved phase of the complex signal as a latent variable gives closed
form M-steps::

    nu    <- E_r[x * I1(x nu / s2) / I0(x nu / s2)]
    s2    <- (E_r[x^2] - nu^2) / 2

where ``E_r`` is the responsibility- and count-weighted mean over bins.
Bessel functions are evaluated exponentially scaled (``i0e``/``i1e``) so
large arguments neither overflow nor lose the ratio.
"""

from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy import special

from .volume import Volume

logger = logging.getLogger(__name__)

__all__ = [
    "RicianComponent",
    "RicianMixtureFit",
    "FitError",
    "rician_logpdf",
    "fit_rician_mixture",
    "noise_precision",
    "noise_percentage",
    "lambda_heuristic",
    "K_LAMBDA",
]

K_LAMBDA = 4.67


class FitError(RuntimeError):
    """The mixture fit failed or degenerated."""


@dataclass
class RicianComponent:
    nu: float
    sigma: float
    weight: float


@dataclass
class RicianMixtureFit:
    components: list
    air_index: int
    log_likelihood: float
    iterations: int = 0
    trace: list = None

    @property
    def air(self):
        return self.components[self.air_index]

    @property
    def tissue(self):
        return self.components[1 - self.air_index]

    @property
    def tau(self):
        return 1.0 / self.air.sigma ** 2

    @property
    def mu_tissue(self):
        return self.tissue.nu


def rician_logpdf(x, nu, sigma):
    """Log of ``x/s2 exp(-(x^2+nu^2)/(2 s2)) I0(x nu/s2)``."""
    x = np.asarray(x, dtype=np.float64)
    s2 = sigma * sigma
    z = x * nu / s2
    with np.errstate(divide="ignore"):
        return np.log(x) - math.log(s2) - (x - nu) ** 2 / (2 * s2) + np.log(special.i0e(z))


def _bessel_ratio(z):
    return special.i1e(z) / special.i0e(z)


def fit_rician_mixture(v, bins=1024, max_iter=10000, tol=1e-6, init=None):
    """Fit two Rician classes to the histogram of the observed voxels.

    Args:
        v: Volume (or array) of magnitude intensities.
        bins: Histogram bins, at least 64.
        max_iter: EM iteration cap.
        tol: Relative log-likelihood change that ends the fit.
        init: Optional ``[(nu, sigma, weight), (nu, sigma, weight)]``.

    Returns:
        RicianMixtureFit with ``air_index`` pointing at the smaller-nu class.
        When a single Rician explains the histogram better (by BIC), the
        second component is a zero-weight copy of the first, so
        ``mu_tissue`` equals the air ``nu``.

    Raises:
        FitError: Too few voxels, negative intensities, or a collapsed class.
    """
    if bins < 64:
        raise ValueError("need at least 64 histogram bins")
    values = v.data[v.observed] if isinstance(v, Volume) else np.asarray(v).ravel()
    values = values[np.isfinite(values)].astype(np.float64)
    if values.size < 1000:
        raise FitError(f"need at least 1000 observed voxels, got {values.size}")
    vmax = float(values.max())
    if values.min() < -1e-3 * abs(vmax):
        raise FitError("intensities contain negative values; not a magnitude image")
    values = np.clip(values, 0.0, None)
    std = float(values.std())
    if vmax <= 0 or std <= 1e-6 * max(vmax, 1e-30):
        raise FitError("degenerate input: intensities have (near) zero spread")

    counts, edges = np.histogram(values, bins=bins, range=(0.0, vmax))
    x = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    x, h = x[keep], counts[keep].astype(np.float64)

    mean = float(values.mean())
    if init is None:
        init = [(0.0, 0.2 * mean, 0.5), (mean, 0.5 * std, 0.5)]
    nu, sig, pi, ll_trace = _em(x, h, init, max_iter, tol, vmax)

    # An image of pure background is one Rician, and two classes then split
    # it arbitrarily. Keep the mixture only if BIC prefers it.
    # nu = 0 is an EM fixed point, so try it explicitly alongside a moment start
    rms = math.sqrt(float(np.sum(h * x * x) / h.sum()) / 2.0)
    single = [_em(x, h, [start], max_iter, tol, vmax) for start in ((0.0, rms, 1.0), (mean, std, 1.0))]
    nu1, sig1, _, ll1 = max(single, key=lambda fit: fit[3][-1])
    extra = 3 * math.log(h.sum())
    if 2 * (ll_trace[-1] - ll1[-1]) < extra:
        logger.debug("rician fit: single class preferred by BIC")
        comp = RicianComponent(float(nu1[0]), float(sig1[0]), 1.0)
        empty = RicianComponent(float(nu1[0]), float(sig1[0]), 0.0)
        return RicianMixtureFit([comp, empty], 0, ll1[-1], len(ll1), ll1)

    comps = [RicianComponent(float(nu[k]), float(sig[k]), float(pi[k])) for k in range(2)]
    air = int(np.argmin(nu))
    logger.debug("rician fit: %s (air=%d) after %d iterations", comps, air, len(ll_trace))
    return RicianMixtureFit(comps, air, ll_trace[-1], len(ll_trace), ll_trace)


def _em(x, h, init, max_iter, tol, vmax):
    """EM over histogram bins ``x`` with counts ``h``; any number of classes."""
    total = h.sum()
    nu = np.array([c[0] for c in init], dtype=np.float64)
    sig = np.array([c[1] for c in init], dtype=np.float64)
    pi = np.array([c[2] for c in init], dtype=np.float64)
    n = len(init)
    ll_trace = []
    ll_prev = -np.inf
    for _ in range(max_iter):
        logp = np.stack([math.log(pi[k]) + rician_logpdf(x, nu[k], sig[k]) for k in range(n)])
        lse = np.logaddexp.reduce(logp, axis=0)
        ll = float(np.sum(h * lse))
        ll_trace.append(ll)
        resp = np.exp(logp - lse) * h
        for k in range(n):
            rk = resp[k]
            mass = rk.sum()
            if mass <= 1e-12 * total:
                raise FitError(f"mixture class {k} lost all its mass")
            z = x * nu[k] / sig[k] ** 2
            nu[k] = float(np.sum(rk * x * _bessel_ratio(z)) / mass)
            s2 = (np.sum(rk * x * x) / mass - nu[k] ** 2) / 2.0
            if not s2 > (1e-6 * vmax) ** 2:
                raise FitError(f"mixture class {k} collapsed (sigma -> 0)")
            sig[k] = math.sqrt(s2)
            pi[k] = mass / total
        if abs(ll - ll_prev) <= tol * abs(ll):
            break
        ll_prev = ll
    return nu, sig, pi, ll_trace


def noise_precision(fit):
    return 1.0 / fit.air.sigma ** 2


def noise_percentage(fit):
    """Air-class noise as a percentage of the tissue-class intensity."""
    return 100.0 * fit.air.sigma / fit.mu_tissue


def lambda_heuristic(mu_tissue, k_lambda=K_LAMBDA):
    if not mu_tissue > 0:
        raise ValueError(f"mean tissue intensity must be positive, got {mu_tissue}")
    return math.sqrt(2.0) / (k_lambda * mu_tissue)

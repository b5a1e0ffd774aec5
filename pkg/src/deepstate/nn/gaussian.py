"""Diagonal Gaussians: log densities, KL divergences and reparameterized draws.

Functions accept plain arrays or :class:`~deepstate.nn.autodiff.Tensor`
operands.  With array inputs they return plain floats/arrays; with any
tensor input they return a tensor so the result can be differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
MIN_VARIANCE = 1e-6


@dataclass
class GaussianDiag:
    mean: object
    variance: object

    def __post_init__(self):
        if np.shape(_val(self.mean)) != np.shape(_val(self.variance)):
            raise ShapeError("mean and variance must have the same shape")

    @property
    def dim(self):
        return np.shape(_val(self.mean))[-1]

    def std(self):
        return np.sqrt(_val(self.variance))


def positive(a, floor=MIN_VARIANCE):
    """Map an unconstrained head output to a variance bounded below by ``floor``."""
    return ad.add(ad.softplus(a), floor)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _check_var(v, what="variance"):
    if np.any(~(_val(v) > 0.0)):
        raise DomainError(f"{what} must be strictly positive")


def log_density_terms(x, mean, var):
    """Elementwise Gaussian log density (no reduction)."""
    d = ad.sub(x, mean)
    quad = ad.div(ad.square(d), var)
    return ad.mul(ad.add(ad.add(quad, ad.log(var)), LOG_2PI), -0.5)


def gaussian_log_density(x, g, mask=None):
    """Sum over the last axis of log N(x_d | mean_d, variance_d).

    ``mask`` (same shape as ``x``, entries in {0, 1}) drops components from
    the sum.
    """
    if np.shape(_val(x)) != np.shape(_val(g.mean)):
        raise ShapeError("x and mean lengths differ")
    _check_var(g.variance)
    terms = log_density_terms(x, g.mean, g.variance)
    if mask is not None:
        terms = ad.mul(terms, mask)
    out = ad.tsum(terms, axis=-1)
    return out if _any_tensor(x, g.mean, g.variance) else _plain(out.value)


def kl_terms(mq, vq, mp, vp):
    """Elementwise KL(N(mq, vq) || N(mp, vp))."""
    ratio = ad.div(vq, vp)
    quad = ad.div(ad.square(ad.sub(mq, mp)), vp)
    return ad.mul(ad.sub(ad.add(ratio, quad), ad.add(ad.log(ratio), 1.0)), 0.5)


def kl_diag_gaussians(q, p):
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if np.shape(_val(q.mean)) != np.shape(_val(p.mean)):
        raise ShapeError("q and p dimensions differ")
    _check_var(q.variance, "q variance")
    _check_var(p.variance, "p variance")
    out = ad.tsum(kl_terms(q.mean, q.variance, p.mean, p.variance), axis=-1)
    if _any_tensor(q.mean, q.variance, p.mean, p.variance):
        return out
    return _plain(np.maximum(out.value, 0.0))


def reparameterize(g, noise):
    """Return ``mean + sqrt(variance) * noise``."""
    if np.shape(noise) != np.shape(_val(g.mean)):
        raise ShapeError("noise shape must equal the Gaussian dimension")
    out = ad.add(g.mean, ad.mul(ad.sqrt(g.variance), noise))
    return out if _any_tensor(g.mean, g.variance) else out.value


def standard_normal(dim):
    return GaussianDiag(np.zeros(dim), np.ones(dim))


def _plain(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v

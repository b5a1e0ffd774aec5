"""Linear-Gaussian state-space models and exact Kalman inference.

Missing observations are handled by dropping the masked rows of the
emission matrix (and the matching rows/columns of the observation noise)
at each step, so a fully masked step is a pure prediction step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """Raised when an innovation covariance is not positive definite."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass
class LgssmSpec:
    """z_1 ~ N(m0, P0); z_t = A z_{t-1} + b + w; x_t = C z_t + d + v.

    ``Q`` and ``R`` are the diagonals of the process and observation noise
    covariances.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    init_mean: np.ndarray | None = None
    init_cov: np.ndarray | None = None
    transition_offset: np.ndarray | None = None
    emission_offset: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        k, D = self.A.shape[0], self.C.shape[0]
        self.Q = np.asarray(self.Q, dtype=float).reshape(k)
        self.R = np.asarray(self.R, dtype=float).reshape(D)
        if self.A.shape != (k, k) or self.C.shape[1] != k:
            raise ValueError("inconsistent A / C dimensions")
        if np.any(self.Q <= 0) or np.any(self.R <= 0):
            raise ValueError("noise variances must be positive")
        self.init_mean = np.zeros(k) if self.init_mean is None else np.asarray(self.init_mean, float).reshape(k)
        self.init_cov = np.eye(k) if self.init_cov is None else np.atleast_2d(np.asarray(self.init_cov, float))
        self.transition_offset = (
            np.zeros(k) if self.transition_offset is None else np.asarray(self.transition_offset, float).reshape(k)
        )
        self.emission_offset = (
            np.zeros(D) if self.emission_offset is None else np.asarray(self.emission_offset, float).reshape(D)
        )

    @property
    def latent_dim(self):
        return self.A.shape[0]

    @property
    def obs_dim(self):
        return self.C.shape[0]

    @classmethod
    def random(cls, rng, latent_dim, obs_dim, stable=0.95):
        A = rng.normal(size=(latent_dim, latent_dim))
        A *= stable / max(1e-12, np.max(np.abs(np.linalg.eigvals(A))))
        return cls(
            A=A,
            C=rng.normal(size=(obs_dim, latent_dim)),
            Q=rng.uniform(0.1, 1.0, size=latent_dim),
            R=rng.uniform(0.1, 1.0, size=obs_dim),
        )

    def sample(self, T, rng):
        """Draw (latents, observations) of length T."""
        k, D = self.latent_dim, self.obs_dim
        z = np.empty((T, k))
        x = np.empty((T, D))
        z[0] = rng.multivariate_normal(self.init_mean, self.init_cov)
        for t in range(T):
            if t:
                z[t] = self.A @ z[t - 1] + self.transition_offset + np.sqrt(self.Q) * rng.normal(size=k)
            x[t] = self.C @ z[t] + self.emission_offset + np.sqrt(self.R) * rng.normal(size=D)
        return z, x


@dataclass
class FilterResult:
    pred_means: np.ndarray
    pred_covs: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    loglik: float


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray
    lag_one_covs: np.ndarray = field(repr=False)
    filter: FilterResult = field(repr=False)

    @property
    def variances(self):
        return np.diagonal(self.covs, axis1=1, axis2=2).copy()


def _observed(mask, t, D):
    if mask is None:
        return np.ones(D, dtype=bool)
    return np.asarray(mask[t], dtype=bool)


def kalman_filter(spec, x, mask=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    T, D = x.shape
    if D != spec.obs_dim:
        raise ValueError(f"observation width {D} != model width {spec.obs_dim}")
    k = spec.latent_dim
    pm, pP = np.empty((T, k)), np.empty((T, k, k))
    fm, fP = np.empty((T, k)), np.empty((T, k, k))
    Qm = np.diag(spec.Q)
    ll = 0.0
    m, P = spec.init_mean.copy(), spec.init_cov.copy()
    for t in range(T):
        if t:
            m = spec.A @ fm[t - 1] + spec.transition_offset
            P = spec.A @ fP[t - 1] @ spec.A.T + Qm
        pm[t], pP[t] = m, P
        obs = _observed(mask, t, D)
        if obs.any():
            C = spec.C[obs]
            resid = x[t, obs] - (C @ m + spec.emission_offset[obs])
            S = C @ P @ C.T + np.diag(spec.R[obs])
            S = 0.5 * (S + S.T)
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise NumericalError("innovation covariance not positive definite", t) from None
            alpha = np.linalg.solve(L, resid)
            ll += -0.5 * (alpha @ alpha) - np.log(np.diag(L)).sum() - 0.5 * obs.sum() * LOG_2PI
            K = np.linalg.solve(L.T, np.linalg.solve(L, C @ P)).T
            m = m + K @ resid
            IKC = np.eye(k) - K @ C
            # Joseph form keeps P symmetric positive semidefinite
            P = IKC @ P @ IKC.T + K @ np.diag(spec.R[obs]) @ K.T
        fm[t], fP[t] = m, P
    return FilterResult(pm, pP, fm, fP, float(ll))


def kalman_loglik(spec, x, mask=None):
    """Exact log p(x_1..T) under ``spec``, skipping masked components."""
    return kalman_filter(spec, x, mask).loglik


def kalman_smoother(spec, x, mask=None):
    """Rauch-Tung-Striebel smoother.

    Returns per-step marginal means and covariances plus the lag-one
    cross covariances Cov(z_t, z_{t-1} | x) (index 0 is unused).
    """
    f = kalman_filter(spec, x, mask)
    T, k = f.means.shape
    sm, sP = f.means.copy(), f.covs.copy()
    cross = np.zeros((T, k, k))
    for t in range(T - 2, -1, -1):
        J = np.linalg.solve(f.pred_covs[t + 1].T, (f.covs[t] @ spec.A.T).T).T
        sm[t] = f.means[t] + J @ (sm[t + 1] - f.pred_means[t + 1])
        sP[t] = f.covs[t] + J @ (sP[t + 1] - f.pred_covs[t + 1]) @ J.T
        sP[t] = 0.5 * (sP[t] + sP[t].T)
        cross[t + 1] = sP[t + 1] @ J.T
    return SmootherResult(sm, sP, cross, f)

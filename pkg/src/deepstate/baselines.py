"""Comparison latent-state estimators: PCA, a per-step VAE and the linear SSM.

PCA and the VAE treat every time step as an independent row and consume
the imputed values directly (they have no masking mechanism).  The linear
state-space model is :class:`~deepstate.dssm.StateSpaceModel` with
``kind="linear"`` and is trained by the same ELBO and trainer as the deep
model.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import Cohort, DataContractError
from .dssm import (
    Batch,
    DssmConfig,
    ElboBreakdown,
    LatentTrajectory,
    NumericalFailure,
    StateSpaceModel,
    _value,
    train,
)
from .nn import autodiff as ad
from .nn.gaussian import kl_terms, log_density_terms, positive
from .nn.layers import DenseLayer
from .nn.optim import Adam
from .synth.lgssm import LgssmSpec

log = logging.getLogger(__name__)

VAE_LEARNING_RATES = (0.001, 0.005, 0.01)
LOG_2PI = float(np.log(2.0 * np.pi))


def pooled_rows(cohort: Cohort):
    """All time steps of all patients stacked into one (N_rows, D) array."""
    if not len(cohort):
        raise DataContractError("empty cohort")
    return np.concatenate([p.values for p in cohort.patients], axis=0)


def _per_step_trajectories(cohort, project, variances=None):
    out = []
    for p in cohort.patients:
        z = project(p.values)
        v = np.zeros_like(z) if variances is None else variances(p.values)
        out.append(LatentTrajectory(p.patient_id, z, v))
    return out


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (D, k), orthonormal columns
    explained_variance: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[1]

    def project(self, x):
        return (np.asarray(x, float) - self.mean) @ self.components

    def reconstruct(self, x):
        return self.mean + self.project(x) @ self.components.T

    def trajectories(self, cohort):
        """Per-step projections; PCA carries no uncertainty so variances are 0."""
        return _per_step_trajectories(cohort, self.project)


def fit_pca(rows, k=8):
    """Top-k eigenvectors of the row covariance.

    Each component's sign is fixed so its largest-magnitude loading is
    positive, which makes the result independent of row order.
    """
    rows = np.asarray(rows, dtype=float)
    n, D = rows.shape
    if k > D:
        raise ValueError(f"k={k} exceeds the number of items D={D}")
    if n < k:
        raise DataContractError(f"need at least k={k} rows, got {n}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / max(n - 1, 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:k]
    w, V = np.clip(w[order], 0.0, None), V[:, order]
    pivots = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[pivots, np.arange(k)])
    return PcaModel(mean, V, w)


# ---------------------------------------------------------------------------
# VAE


@dataclass
class VaeConfig:
    latent_dim: int = 8
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    encoder_hidden: tuple = (128, 64)
    decoder_hidden: int = 64
    min_variance: float = 1e-2
    grad_clip: float = 10.0

    def to_dict(self):
        return asdict(self)


class VaeModel:
    """Encoder: 3 dense layers to a diagonal Gaussian; decoder: 2 dense layers.

    The reconstruction variance is a learned constant per item.
    """

    def __init__(self, input_dim, config: VaeConfig):
        self.config = config
        self.input_dim = input_dim
        rng = np.random.default_rng(config.seed)
        h1, h2 = config.encoder_hidden
        k = config.latent_dim
        self.encoder = [
            DenseLayer.init(rng, input_dim, h1, "tanh", "vae_enc1"),
            DenseLayer.init(rng, h1, h2, "tanh", "vae_enc2"),
            DenseLayer.init(rng, h2, 2 * k, "identity", "vae_enc3"),
        ]
        self.decoder = [
            DenseLayer.init(rng, k, config.decoder_hidden, "tanh", "vae_dec1"),
            DenseLayer.init(rng, config.decoder_hidden, input_dim, "identity", "vae_dec2"),
        ]
        self.out_var = ad.parameter(np.zeros(input_dim), "vae_out_var")

    @property
    def params(self):
        out = {}
        for layer in self.encoder + self.decoder:
            out.update(layer.parameters())
        out[self.out_var.name] = self.out_var
        return out

    def state_dict(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=float)
            if v.shape != p.value.shape:
                raise DataContractError(f"parameter {k}: shape {v.shape} != {p.value.shape}")
            p.value = v.copy()

    def encode(self, x):
        h = x
        for layer in self.encoder:
            h = layer(h)
        k = self.config.latent_dim
        return h[..., :k], positive(h[..., k:])

    def decode(self, z):
        h = z
        for layer in self.decoder:
            h = layer(h)
        return h, positive(self.out_var, self.config.min_variance)

    def elbo_terms(self, rows, noise):
        mean, var = self.encode(rows)
        z = ad.add(mean, ad.mul(ad.sqrt(var), noise))
        x_mean, x_var = self.decode(z)
        n = rows.shape[0]
        recon = ad.mul(ad.tsum(log_density_terms(rows, x_mean, x_var)), 1.0 / n)
        kl = ad.mul(ad.tsum(kl_terms(mean, var, 0.0, 1.0)), 1.0 / n)
        return recon, kl

    def latent(self, rows):
        return self.encode(np.asarray(rows, float))[0].value

    def trajectories(self, cohort):
        return _per_step_trajectories(
            cohort, self.latent, lambda x: self.encode(np.asarray(x, float))[1].value
        )


def fit_vae(rows, config: VaeConfig | None = None):
    """Train by the one-step ELBO; returns (model, per-epoch ElboBreakdown list)."""
    config = config or VaeConfig()
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or not len(rows):
        raise DataContractError("fit_vae needs a non-empty (rows, items) array")
    model = VaeModel(rows.shape[1], config)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.params, lr=config.learning_rate, clip_norm=config.grad_clip)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(rows))
        sums = np.zeros(2)
        for bi, start in enumerate(range(0, len(rows), config.batch_size)):
            idx = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(idx), config.latent_dim))
            with ad.Tape() as tape:
                recon, kl = model.elbo_terms(rows[idx], noise)
                loss = ad.sub(kl, recon)
            if not np.isfinite(loss.value):
                raise NumericalFailure(
                    f"non-finite VAE loss at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch": bi, "terms": ["reconstruction" if not np.isfinite(recon.value) else "kl"]},
                )
            opt.step(ad.backward(tape, loss, model.params))
            sums += len(idx) * np.array([float(recon.value), float(kl.value)])
        r, k = sums / len(rows)
        trace.append(ElboBreakdown(float(r), float(k), 0.0))
        log.info("vae epoch %d  elbo %.4f", epoch + 1, r - k)
    return model, trace


def select_vae_learning_rate(rows, config: VaeConfig | None = None, grid=VAE_LEARNING_RATES):
    """Train one VAE per learning rate and report each final-epoch ELBO.

    Returns ``(best_model, {rate: final_elbo})``; ties go to the first rate.
    """
    config = config or VaeConfig()
    report = {}
    best = None
    for lr in grid:
        model, trace = fit_vae(rows, replace(config, learning_rate=lr))
        final = trace[-1].total if trace else float("-inf")
        report[lr] = final
        if best is None or final > best[1]:
            best = (model, final)
    return best[0], report


# ---------------------------------------------------------------------------
# linear state-space model


def linear_ssm_config(input_dim, **overrides):
    """DSSM config for the linearized model (grid checks still apply)."""
    overrides.setdefault("kind", "linear")
    return DssmConfig(input_dim=input_dim, **overrides)


def fit_linear_ssm(cohort, config: DssmConfig):
    """Train the linear SSM with the DSSM trainer; returns (model, trace)."""
    if config.kind != "linear":
        config = replace(config, kind="linear")
    model = StateSpaceModel(config)
    result = train(model, cohort, config)
    return model, result.trace


def as_lgssm(model: StateSpaceModel) -> LgssmSpec:
    """Generative side of a linear SSM as an :class:`LgssmSpec`."""
    if model.config.kind != "linear":
        raise ValueError("only linear models have an LGSSM form")
    L, E = model.layers, model.extra
    floor = model.config.min_emission_variance
    return LgssmSpec(
        A=L["trans"].weight.value,
        C=L["emit"].weight.value,
        Q=positive(E["trans_var"].value).value,
        R=positive(E["emit_var"].value, floor).value,
        init_mean=np.zeros(model.config.latent_dim) + _value(model.initial_prior_mean()),
        init_cov=np.eye(model.config.latent_dim),
        transition_offset=L["trans"].bias.value,
        emission_offset=L["emit"].bias.value,
    )


@dataclass
class LinearPosterior:
    """Markov Gaussian q: z_1 ~ N(g_1, S_1); z_t | z_{t-1} ~ N(F_t z_{t-1} + g_t, S_t)."""

    F: np.ndarray  # (T, k, k); F[0] is ignored
    g: np.ndarray  # (T, k)
    S: np.ndarray  # (T, k, k)


def linear_posterior(model: StateSpaceModel, series) -> LinearPosterior:
    """The linear model's inference network written out as a LinearPosterior."""
    if model.config.kind != "linear":
        raise ValueError("only linear models have an analytic posterior")
    batch = Batch.from_series([series], model.config.max_steps)
    summaries = model.encode(batch)
    L, E = model.layers, model.extra
    F = L["q_z"].weight.value
    T, k = len(summaries), model.config.latent_dim
    S = np.diag(positive(E["q_var"].value).value)
    g = np.stack([L["q_s"](s).value[0] + L["q_z"].bias.value for s in summaries])
    g[0] = g[0] + F @ E["z0"].value
    return LinearPosterior(np.broadcast_to(F, (T, k, k)).copy(), g, np.broadcast_to(S, (T, k, k)).copy())


def smoother_posterior(spec: LgssmSpec, x, mask=None) -> LinearPosterior:
    """Exact posterior of an LGSSM in Markov-conditional form.

    Built from the smoother marginals and lag-one covariances:
    F_t = C_t P_{t-1}^{-1}, g_t = m_t - F_t m_{t-1}, S_t = P_t - F_t C_t^T.
    """
    from .synth.lgssm import kalman_smoother

    sm = kalman_smoother(spec, x, mask)
    T, k = sm.means.shape
    F = np.zeros((T, k, k))
    g = sm.means.copy()
    S = sm.covs.copy()
    for t in range(1, T):
        cross = sm.lag_one_covs[t]
        F[t] = np.linalg.solve(sm.covs[t - 1].T, cross.T).T
        g[t] = sm.means[t] - F[t] @ sm.means[t - 1]
        S[t] = sm.covs[t] - F[t] @ cross.T
        S[t] = 0.5 * (S[t] + S[t].T)
    return LinearPosterior(F, g, S)


def _kl_full(mq, Sq, mp, Sp_inv, logdet_p):
    k = len(mq)
    d = mp - mq
    _, logdet_q = np.linalg.slogdet(Sq)
    return 0.5 * (np.trace(Sp_inv @ Sq) + d @ Sp_inv @ d - k + logdet_p - logdet_q)


def analytic_elbo(spec: LgssmSpec, x, mask, q: LinearPosterior) -> ElboBreakdown:
    """Exact ELBO of a linear-Gaussian Markov q under an LGSSM.

    Every expectation is closed form: q's marginals follow
    mu_t = F_t mu_{t-1} + g_t and Sigma_t = F_t Sigma_{t-1} F_t^T + S_t.
    """
    x = np.atleast_2d(np.asarray(x, float))
    T, D = x.shape
    mask = np.ones_like(x) if mask is None else np.asarray(mask, float)
    A, C, b, d = spec.A, spec.C, spec.transition_offset, spec.emission_offset
    Q_inv = np.diag(1.0 / spec.Q)
    logdet_Q = float(np.sum(np.log(spec.Q)))
    P0_inv = np.linalg.inv(spec.init_cov)
    _, logdet_P0 = np.linalg.slogdet(spec.init_cov)

    recon = 0.0
    init_kl = 0.0
    trans_kl = 0.0
    mu, Sig = None, None
    for t in range(T):
        if t == 0:
            mu_t, Sig_t = q.g[0].copy(), q.S[0].copy()
            init_kl = _kl_full(mu_t, Sig_t, spec.init_mean, P0_inv, logdet_P0)
        else:
            F = q.F[t]
            # E_{z_{t-1}} KL(N(F z + g, S) || N(A z + b, Q))
            B = F - A
            m_diff = B @ mu + q.g[t] - b
            k = len(mu)
            _, logdet_S = np.linalg.slogdet(q.S[t])
            trans_kl += 0.5 * (
                np.trace(Q_inv @ q.S[t])
                + m_diff @ Q_inv @ m_diff
                + np.trace(Q_inv @ B @ Sig @ B.T)
                - k
                + logdet_Q
                - logdet_S
            )
            mu_t = F @ mu + q.g[t]
            Sig_t = F @ Sig @ F.T + q.S[t]
        obs = mask[t] > 0
        if obs.any():
            pred = C @ mu_t + d
            var = np.einsum("ij,jk,ik->i", C, Sig_t, C)
            R = spec.R
            terms = -0.5 * (LOG_2PI + np.log(R) + ((x[t] - pred) ** 2 + var) / R)
            recon += float(np.sum(terms[obs]))
        mu, Sig = mu_t, Sig_t
    return ElboBreakdown(float(recon), float(init_kl), float(trans_kl))



def linear_ssm_analytic_elbo(model: StateSpaceModel, series) -> ElboBreakdown:
    """Exact ELBO of a trained linear SSM on one series."""
    spec = as_lgssm(model)
    L = min(series.length, model.config.max_steps)
    return analytic_elbo(spec, series.values[-L:], series.mask[-L:], linear_posterior(model, series))

"""Deep state-space model trained by maximizing the evidence lower bound.

Generative side::

    z_1 ~ N(0, I)
    z_t | z_{t-1} ~ N(transition_mean(z_{t-1}), transition_var(z_{t-1}))
    x_t | z_t     ~ N(emission_mean(z_t), emission_var(z_t))

Inference side: ``q(z_t | z_{t-1}, x)`` combines an LSTM summary of the
observations with the previous latent sample.  The LSTM reads
``[x * mask, mask]`` so imputed values never reach the model, and missing
components are left out of the reconstruction term.

The same class also provides the linearized variant (``kind="linear"``):
every network becomes an affine map, the LSTM becomes a decaying linear
running sum, and variances become free per-dimension parameters.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Cohort, DataContractError, ObservationSeries
from .nn import autodiff as ad
from .nn.gaussian import kl_terms, log_density_terms, positive
from .nn.layers import DenseLayer, DropoutSpec, LstmCell, dropout
from .nn.optim import Adam

log = logging.getLogger(__name__)

LATENT_DIM_GRID = (2, 4, 8, 16)
LEARNING_RATE_GRID = (0.005, 0.01)


class NumericalFailure(ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class DssmConfig:
    input_dim: int
    latent_dim: int = 8
    learning_rate: float = 0.005
    max_steps: int = 238
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    hidden: int = 64
    lstm_hidden: int = 64
    dropout: float = 0.1
    encoder_direction: str = "backward"
    samples_per_step: int = 1
    eval_samples: int = 64
    grad_clip: float = 10.0
    kl_warmup: int = 10
    min_emission_variance: float = 1e-2
    residual: bool = True
    # learn the mean of p(z_1) instead of fixing it at 0 (variance stays 1)
    learn_prior_mean: bool = True
    kind: str = "deep"
    enforce_grid: bool = True

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.min_emission_variance > 0:
            raise ValueError("min_emission_variance must be positive")
        if self.kl_warmup < 0:
            raise ValueError("kl_warmup must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.encoder_direction not in ("backward", "forward"):
            raise ValueError("encoder_direction must be 'backward' or 'forward'")
        if self.kind not in ("deep", "linear"):
            raise ValueError("kind must be 'deep' or 'linear'")
        if self.enforce_grid:
            if self.latent_dim not in LATENT_DIM_GRID:
                raise ValueError(f"latent_dim {self.latent_dim} not in {LATENT_DIM_GRID}")
            if self.learning_rate not in LEARNING_RATE_GRID:
                raise ValueError(f"learning_rate {self.learning_rate} not in {LEARNING_RATE_GRID}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ElboBreakdown:
    reconstruction: float
    initial_kl: float
    transition_kl: float

    @property
    def total(self):
        return self.reconstruction - self.initial_kl - self.transition_kl

    def as_row(self):
        return {
            "reconstruction": self.reconstruction,
            "initial_kl": self.initial_kl,
            "transition_kl": self.transition_kl,
            "total": self.total,
        }


@dataclass
class LatentTrajectory:
    patient_id: str
    means: np.ndarray
    variances: np.ndarray
    steps: np.ndarray = None

    def __post_init__(self):
        if self.steps is None:
            self.steps = np.arange(len(self.means))

    @property
    def length(self):
        return len(self.means)


@dataclass
class Batch:
    """Padded batch; ``steps[b, t]`` is 1 for real steps."""

    values: np.ndarray
    mask: np.ndarray
    steps: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_series(cls, series, max_steps=None):
        if not series:
            raise DataContractError("empty batch")
        D = series[0].values.shape[1]
        lengths = np.array([s.length if max_steps is None else min(s.length, max_steps) for s in series])
        T = int(lengths.max())
        B = len(series)
        values = np.zeros((B, T, D))
        mask = np.zeros((B, T, D))
        steps = np.zeros((B, T))
        for b, s in enumerate(series):
            if s.values.shape[1] != D or s.mask.shape != s.values.shape:
                raise DataContractError(f"series {s.patient_id}: mask/value shape mismatch")
            L = lengths[b]
            values[b, :L] = s.values[-L:]
            mask[b, :L] = s.mask[-L:]
            steps[b, :L] = 1.0
        return cls(values, mask, steps, lengths)

    def tile(self, n):
        if n == 1:
            return self
        rep = lambda a: np.concatenate([a] * n, axis=0)  # noqa: E731
        return Batch(rep(self.values), rep(self.mask), rep(self.steps), rep(self.lengths))


class StateSpaceModel:
    """Deep (or linearized) state-space model with its inference network."""

    def __init__(self, config: DssmConfig, state=None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        D, k = config.input_dim, config.latent_dim
        H, He, Hh = config.lstm_hidden, config.lstm_hidden, config.hidden
        self.layers = {}
        if config.kind == "deep":
            self.layers["enc_in"] = DenseLayer.init(rng, 2 * D, He, "tanh", "enc_in")
            self.layers["enc_rnn"] = LstmCell.init(rng, He, H, name="enc_rnn")
            self.layers["comb_z"] = DenseLayer.init(rng, k, H, "tanh", "comb_z")
            self.layers["q_head"] = DenseLayer.init(rng, H, 2 * k, "identity", "q_head")
            self.layers["trans_hidden"] = DenseLayer.init(rng, k, Hh, "tanh", "trans_hidden")
            self.layers["trans_out"] = DenseLayer.init(rng, Hh, 2 * k, "identity", "trans_out")
            self.layers["emit_hidden"] = DenseLayer.init(rng, k, Hh, "tanh", "emit_hidden")
            self.layers["emit_mean"] = DenseLayer.init(rng, Hh, D, "identity", "emit_mean")
            self.layers["emit_var"] = DenseLayer.init(rng, k, D, "identity", "emit_var")
            self.extra = {}
        else:
            self.layers["enc_in"] = DenseLayer.init(rng, 2 * D, H, "identity", "enc_in")
            self.layers["q_z"] = DenseLayer.init(rng, k, k, "identity", "q_z")
            self.layers["q_s"] = DenseLayer.init(rng, H, k, "identity", "q_s")
            self.layers["trans"] = DenseLayer.init(rng, k, k, "identity", "trans")
            self.layers["emit"] = DenseLayer.init(rng, k, D, "identity", "emit")
            self.extra = {
                "decay": ad.parameter(np.zeros(H), "decay"),
                "q_var": ad.parameter(np.zeros(k), "q_var"),
                "trans_var": ad.parameter(np.zeros(k), "trans_var"),
                "emit_var": ad.parameter(np.zeros(D), "emit_var"),
            }
        self.extra["z0"] = ad.parameter(np.zeros(k), "z0")
        if config.learn_prior_mean:
            self.extra["prior_mean"] = ad.parameter(np.zeros(k), "prior_mean")
        if state is not None:
            self.load_state(state)

    # -- parameters -----------------------------------------------------------

    @property
    def params(self):
        out = {}
        for layer in self.layers.values():
            out.update(layer.parameters())
        for name, p in self.extra.items():
            out[name] = p
        return out

    def state_dict(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state):
        params = self.params
        if set(state) != set(params):
            raise DataContractError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise DataContractError(f"parameter {k}: shape {v.shape} != {p.value.shape}")
            p.value = v.copy()

    def n_parameters(self):
        return sum(p.value.size for p in self.params.values())

    # -- network pieces ---------------------------------------------------------

    def _split(self, out):
        k = self.config.latent_dim
        return out[..., :k], positive(out[..., k:])

    def transition(self, z):
        """Mean and variance of p(z_t | z_{t-1}=z)."""
        L = self.layers
        if self.config.kind == "deep":
            mean, var = self._split(L["trans_out"](L["trans_hidden"](z)))
            return (ad.add(z, mean) if self.config.residual else mean), var
        var = positive(self.extra["trans_var"])
        return L["trans"](z), ad.mul(var, np.ones(z.shape[:-1] + (1,)))

    def emission(self, z, rng=None, training=False):
        """Mean and variance of p(x_t | z_t=z)."""
        L = self.layers
        if self.config.kind == "deep":
            mean = L["emit_mean"](L["emit_hidden"](z))
            zd = dropout(z, DropoutSpec(self.config.dropout, training), rng)
            return mean, positive(L["emit_var"](zd), self.config.min_emission_variance)
        var = positive(self.extra["emit_var"], self.config.min_emission_variance)
        return L["emit"](z), ad.mul(var, np.ones(z.shape[:-1] + (1,)))

    def encode(self, batch):
        """Per-step summaries of the observations, one (B, H) tensor per step."""
        cfg = self.config
        u = np.concatenate([batch.values * batch.mask, batch.mask], axis=-1)
        e = self.layers["enc_in"](u)
        B, T = batch.steps.shape
        H = cfg.lstm_hidden
        order = range(T - 1, -1, -1) if cfg.encoder_direction == "backward" else range(T)
        out = [None] * T
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        decay = ad.sigmoid(self.extra["decay"]) if cfg.kind == "linear" else None
        reset = cfg.encoder_direction == "backward" and not np.all(batch.steps)
        for t in order:
            et = e[:, t]
            if cfg.kind == "deep":
                h, c = self.layers["enc_rnn"](et, h, c)
            else:
                h = ad.add(ad.mul(decay, h), et)
            if reset:
                # padding precedes real steps in reverse order; keep the state at zero there
                valid = batch.steps[:, t:t + 1]
                h = ad.mul(h, valid)
                if cfg.kind == "deep":
                    c = ad.mul(c, valid)
            out[t] = h
        return out

    def initial_prior_mean(self):
        """Mean of p(z_1); unit variance always."""
        return self.extra.get("prior_mean", 0.0)

    def posterior_step(self, z_prev, summary, first=False):
        """Mean and variance of q(z_t | z_{t-1}=z_prev, x).

        The residual form is skipped on the ``first`` step, where ``z_prev``
        is the shared learned start rather than a patient state.
        """
        L = self.layers
        if self.config.kind == "deep":
            hc = ad.mul(ad.add(L["comb_z"](z_prev), summary), 0.5)
            mean, var = self._split(L["q_head"](hc))
            return (ad.add(z_prev, mean) if self.config.residual and not first else mean), var
        mean = ad.add(L["q_z"](z_prev), L["q_s"](summary))
        var = positive(self.extra["q_var"])
        return mean, ad.mul(var, np.ones(mean.shape[:-1] + (1,)))

    def run_posterior(self, batch, noise=None):
        """Sequential pass through q.  ``noise`` (T, B, k) or None for mean propagation."""
        summaries = self.encode(batch)
        B = batch.steps.shape[0]
        z = ad.mul(self.extra["z0"], np.ones((B, 1)))
        means, variances, samples = [], [], []
        for t, s in enumerate(summaries):
            m, v = self.posterior_step(z, s, first=t == 0)
            z = m if noise is None else ad.add(m, ad.mul(ad.sqrt(v), noise[t]))
            means.append(m)
            variances.append(v)
            samples.append(z)
        return ad.stack(means, 1), ad.stack(variances, 1), ad.stack(samples, 1)


def _to_list(batch_or_series):
    if isinstance(batch_or_series, ObservationSeries):
        return [batch_or_series]
    if isinstance(batch_or_series, Cohort):
        return list(batch_or_series.patients)
    return list(batch_or_series)


def elbo_terms(model: StateSpaceModel, batch: Batch, rng, samples=1, training=False):
    """Monte-Carlo ELBO terms as tensors, averaged over sequences."""
    batch = batch.tile(samples)
    B, T = batch.steps.shape
    k = model.config.latent_dim
    noise = rng.standard_normal((T, B, k))
    q_mean, q_var, z = model.run_posterior(batch, noise)

    x_mean, x_var = model.emission(z, rng, training)
    obs = batch.mask * batch.steps[..., None]
    recon = ad.tsum(ad.mul(log_density_terms(batch.values, x_mean, x_var), obs))

    init = kl_terms(q_mean[:, 0], q_var[:, 0], model.initial_prior_mean(), 1.0)
    init_kl = ad.tsum(init)

    if T > 1:
        p_mean, p_var = model.transition(z[:, :-1])
        kl = kl_terms(q_mean[:, 1:], q_var[:, 1:], p_mean, p_var)
        trans_kl = ad.tsum(ad.mul(kl, batch.steps[:, 1:, None]))
    else:
        trans_kl = ad.Tensor(0.0)
    scale = 1.0 / B
    return ad.mul(recon, scale), ad.mul(init_kl, scale), ad.mul(trans_kl, scale)


def elbo(model: StateSpaceModel, batch, samples_per_step=1, rng_seed=0, training=False) -> ElboBreakdown:
    """Monte-Carlo estimate of the per-sequence ELBO (mean over the batch)."""
    series = _to_list(batch)
    if not series:
        raise DataContractError("empty batch")
    for s in series:
        if s.values.shape[1] != model.config.input_dim:
            raise DataContractError(f"series {s.patient_id} has {s.values.shape[1]} items, model expects {model.config.input_dim}")
    rng = np.random.default_rng(rng_seed)
    b = Batch.from_series(series, model.config.max_steps)
    r, i, t = elbo_terms(model, b, rng, samples_per_step, training)
    return ElboBreakdown(float(r.value), float(i.value), float(t.value))


def elbo_gradient(model, batch, rng_seed=0, samples=1, training=False):
    """ELBO value and its gradient with respect to every parameter."""
    series = _to_list(batch)
    b = Batch.from_series(series, model.config.max_steps)
    rng = np.random.default_rng(rng_seed)
    with ad.Tape() as tape:
        r, i, t = elbo_terms(model, b, rng, samples, training)
        total = ad.sub(ad.sub(r, i), t)
    grads = ad.backward(tape, total, model.params)
    return float(total.value), grads


@dataclass
class TrainResult:
    model: StateSpaceModel
    trace: list = field(default_factory=list)


def _length_batches(lengths, batch_size, rng):
    """Group similar lengths to limit padding; batch order is shuffled."""
    order = np.argsort(lengths, kind="stable")
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[j] for j in rng.permutation(len(chunks))]


def train(model: StateSpaceModel, cohort, config: DssmConfig | None = None, callback=None) -> TrainResult:
    """Stochastic gradient ascent on the ELBO.

    Returns the (mutated) model and one :class:`ElboBreakdown` per epoch,
    each the mean over patients of that epoch's minibatch estimates.

    During the first ``kl_warmup`` epochs the KL terms of the optimized
    objective are down-weighted linearly (epoch e uses weight (e+1)/warmup)
    to avoid posterior collapse; the reported trace is always the
    unweighted ELBO.
    """
    cfg = config or model.config
    series = _to_list(cohort)
    if not series:
        raise DataContractError("empty cohort")
    for s in series:
        if s.values.shape[1] != cfg.input_dim:
            raise DataContractError(f"series {s.patient_id} has {s.values.shape[1]} items, model expects {cfg.input_dim}")
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, lr=cfg.learning_rate, clip_norm=cfg.grad_clip)
    lengths = np.array([min(s.length, cfg.max_steps) for s in series])
    trace = []
    for epoch in range(cfg.epochs):
        beta = min(1.0, (epoch + 1) / cfg.kl_warmup) if cfg.kl_warmup else 1.0
        sums = np.zeros(3)
        for bi, idx in enumerate(_length_batches(lengths, cfg.batch_size, rng)):
            batch = Batch.from_series([series[i] for i in idx], cfg.max_steps)
            with ad.Tape() as tape:
                r, i, t = elbo_terms(model, batch, rng, cfg.samples_per_step, training=True)
                loss = ad.sub(ad.mul(ad.add(i, t), beta), r)
            terms = {"reconstruction": r.value, "initial_kl": i.value, "transition_kl": t.value}
            bad = [name for name, v in terms.items() if not np.isfinite(v)]
            if bad:
                raise NumericalFailure(
                    f"non-finite ELBO term at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch": bi, "terms": bad, "patients": [series[j].patient_id for j in idx]},
                )
            grads = ad.backward(tape, loss, model.params)
            bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise NumericalFailure(
                    f"non-finite gradient at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch": bi, "parameters": bad},
                )
            opt.step(grads)
            sums += len(idx) * np.array([float(r.value), float(i.value), float(t.value)])
        row = ElboBreakdown(*(float(v) for v in sums / len(series)))
        trace.append(row)
        log.info("epoch %d  elbo %.4f", epoch + 1, row.total)
        if callback is not None:
            callback(epoch, row)
    return TrainResult(model, trace)


def infer_states(model: StateSpaceModel, series, mode="mean", seed=0, batch_size=64):
    """Run q left to right and return one :class:`LatentTrajectory` per series.

    ``mode="mean"`` propagates posterior means; ``mode="sample"`` propagates
    reparameterized draws.  Series longer than ``max_steps`` are truncated
    to their most recent steps.
    """
    if mode not in ("mean", "sample"):
        raise ValueError("mode must be 'mean' or 'sample'")
    items = _to_list(series)
    for s in items:
        if s.values.shape[1] != model.config.input_dim:
            raise DataContractError(f"series {s.patient_id} has {s.values.shape[1]} items, model expects {model.config.input_dim}")
    rng = np.random.default_rng(seed)
    lengths = np.array([min(s.length, model.config.max_steps) for s in items])
    order = np.argsort(lengths, kind="stable")
    out = [None] * len(items)
    for start in range(0, len(items), batch_size):
        idx = order[start:start + batch_size]
        batch = Batch.from_series([items[i] for i in idx], model.config.max_steps)
        noise = None
        if mode == "sample":
            noise = rng.standard_normal((batch.steps.shape[1], len(idx), model.config.latent_dim))
        means, variances, _ = model.run_posterior(batch, noise)
        for row, i in enumerate(idx):
            L = lengths[i]
            out[i] = LatentTrajectory(items[i].patient_id, means.value[row, :L].copy(), variances.value[row, :L].copy())
    return out


def _value(x):
    return x.value if isinstance(x, ad.Tensor) else x


def generate(model: StateSpaceModel, T: int, seed=0, patient_id="generated") -> ObservationSeries:
    """Ancestral sample of T steps from the generative networks."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    k = model.config.latent_dim
    z = _value(model.initial_prior_mean()) + rng.standard_normal((1, k))
    xs = []
    for t in range(T):
        if t:
            m, v = model.transition(z)
            z = m.value + np.sqrt(v.value) * rng.standard_normal((1, k))
        xm, xv = model.emission(z)
        xs.append(xm.value[0] + np.sqrt(xv.value[0]) * rng.standard_normal(model.config.input_dim))
    values = np.array(xs)
    return ObservationSeries(patient_id, values, np.ones_like(values))

"""Shared oracles for the test modules."""
import numpy as np

from deepstate.data import cohort_from_arrays
from deepstate.dssm import DssmConfig, StateSpaceModel, elbo, elbo_gradient

FD_STEP = 1e-5
FD_FLOOR = 1e-6  # denominators below this are treated as zero gradients


def small_cohort(rng, lengths=(5, 3, 5), D=6, keep=0.7):
    vals = [rng.normal(size=(T, D)) for T in lengths]
    masks = [(rng.random(v.shape) < keep).astype(float) for v in vals]
    return cohort_from_arrays(vals, masks)


def small_model(kind="deep", seed=3, D=6, k=4, hidden=16, jitter=0.1, **kw):
    """A tiny model with parameters nudged away from their initial values."""
    m = StateSpaceModel(DssmConfig(input_dim=D, latent_dim=k, hidden=hidden, lstm_hidden=hidden, kind=kind, seed=seed, **kw))
    rng = np.random.default_rng(seed + 100)
    for p in m.params.values():
        p.value = p.value + jitter * rng.normal(size=p.value.shape)
    return m


def worst_fd_error(model, series, rng_seed=1, every=1):
    """Largest relative error between autodiff and central differences.

    Every ``every``-th scalar of each parameter is perturbed.
    """
    _, grads = elbo_gradient(model, series, rng_seed=rng_seed)
    worst, checked = 0.0, 0
    for name, p in model.params.items():
        flat = p.value.reshape(-1)
        for i in range(0, flat.size, every):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = elbo(model, series, rng_seed=rng_seed).total
            flat[i] = orig - FD_STEP
            down = elbo(model, series, rng_seed=rng_seed).total
            flat[i] = orig
            fd = (up - down) / (2 * FD_STEP)
            g = grads[name].reshape(-1)[i]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), FD_FLOOR))
            checked += 1
    return worst, checked


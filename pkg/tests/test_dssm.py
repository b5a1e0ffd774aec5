import numpy as np
import pytest
from helpers import small_cohort, small_model, worst_fd_error

from deepstate.data import DataContractError, cohort_from_arrays
from deepstate.dssm import (
    Batch,
    DssmConfig,
    NumericalFailure,
    StateSpaceModel,
    elbo,
    generate,
    infer_states,
    train,
)
from deepstate.synth import LgssmSpec, simulate_lgssm_cohort


@pytest.fixture(scope="module")
def lgssm_data():
    rng = np.random.default_rng(0)
    spec = LgssmSpec(A=[[0.95, 0.1], [-0.1, 0.95]], C=rng.normal(size=(5, 2)), Q=[0.1, 0.1], R=[0.5] * 5)
    cohort, latents = simulate_lgssm_cohort(spec, 24, 30, seed=1, missing_rate=0.3)
    return spec, cohort, latents


def tiny_config(D=5, **kw):
    kw.setdefault("latent_dim", 2)
    kw.setdefault("hidden", 8)
    kw.setdefault("lstm_hidden", 8)
    kw.setdefault("epochs", 3)
    kw.setdefault("batch_size", 8)
    return DssmConfig(input_dim=D, **kw)


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize(
    "kw",
    [
        {"latent_dim": 3},
        {"learning_rate": 0.1},
        {"max_steps": 0},
        {"encoder_direction": "sideways"},
        {"kind": "quadratic"},
        {"kl_warmup": -1},
        {"min_emission_variance": 0.0},
        {"input_dim": 0},
    ],
)
def test_config_rejects_bad_values(kw):
    base = {"input_dim": 4}
    base.update(kw)
    with pytest.raises(ValueError):
        DssmConfig(**base)


def test_grid_can_be_overridden():
    assert DssmConfig(input_dim=4, latent_dim=3, enforce_grid=False).latent_dim == 3


def test_default_config_matches_reference_choice():
    cfg = DssmConfig(input_dim=57)
    assert (cfg.latent_dim, cfg.learning_rate, cfg.max_steps) == (8, 0.005, 238)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("kind", ["deep", "linear"])
@pytest.mark.parametrize("direction", ["backward", "forward"])
def test_gradients_match_finite_differences(kind, direction):
    rng = np.random.default_rng(11)
    cohort = small_cohort(rng)
    model = small_model(kind, encoder_direction=direction)
    worst, checked = worst_fd_error(model, cohort.patients, every=5)
    assert checked > 50
    assert worst < 1e-4


def test_gradients_with_fixed_prior_and_plain_transition():
    rng = np.random.default_rng(12)
    model = small_model("deep", learn_prior_mean=False, residual=False)
    worst, _ = worst_fd_error(model, small_cohort(rng).patients, every=7)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# ELBO structure


def test_single_step_has_no_transition_term():
    rng = np.random.default_rng(1)
    model = small_model()
    out = elbo(model, small_cohort(rng, lengths=(1, 1)).patients, samples_per_step=4)
    assert out.transition_kl == 0.0
    assert out.initial_kl > 0


def test_fully_masked_series_has_no_reconstruction():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 6))
    cohort = cohort_from_arrays([x], [np.zeros_like(x)])
    out = elbo(small_model(), cohort.patients)
    assert out.reconstruction == 0.0
    assert out.total == -(out.initial_kl + out.transition_kl)


def test_total_is_reconstruction_minus_kls():
    out = elbo(small_model(), small_cohort(np.random.default_rng(3)).patients)
    assert out.total == out.reconstruction - out.initial_kl - out.transition_kl
    assert set(out.as_row()) == {"reconstruction", "initial_kl", "transition_kl", "total"}


@pytest.mark.parametrize("kind", ["deep", "linear"])
def test_masked_values_are_invisible(kind):
    rng = np.random.default_rng(4)
    cohort = small_cohort(rng, lengths=(7, 4))
    model = small_model(kind)
    before = elbo(model, cohort.patients, samples_per_step=3, rng_seed=5)
    states = infer_states(model, cohort)
    for p in cohort.patients:
        p.values = np.where(p.mask > 0, p.values, rng.normal(size=p.values.shape) * 100)
    after = elbo(model, cohort.patients, samples_per_step=3, rng_seed=5)
    assert after == before
    for a, b in zip(infer_states(model, cohort), states):
        np.testing.assert_array_equal(a.means, b.means)


def test_elbo_is_deterministic_given_seed():
    cohort = small_cohort(np.random.default_rng(5))
    model = small_model()
    assert elbo(model, cohort.patients, 2, rng_seed=9) == elbo(model, cohort.patients, 2, rng_seed=9)
    assert elbo(model, cohort.patients, 2, rng_seed=9) != elbo(model, cohort.patients, 2, rng_seed=10)


def test_padding_does_not_change_a_sequence():
    """A short sequence inferred alone or beside a longer one gets the same states."""
    rng = np.random.default_rng(6)
    cohort = small_cohort(rng, lengths=(3, 8))
    model = small_model()
    means_alone = infer_states(model, cohort.patients[:1])[0].means
    means_batch = infer_states(model, cohort.patients)[0].means
    np.testing.assert_allclose(means_batch, means_alone, atol=1e-12)


def test_elbo_errors():
    model = small_model()
    with pytest.raises(DataContractError):
        elbo(model, [])
    wrong = cohort_from_arrays([np.zeros((3, 4))])
    with pytest.raises(DataContractError):
        elbo(model, wrong.patients)


def test_batch_rejects_mixed_widths():
    a = cohort_from_arrays([np.zeros((3, 4))]).patients[0]
    b = cohort_from_arrays([np.zeros((3, 5))]).patients[0]
    with pytest.raises(DataContractError):
        Batch.from_series([a, b])


# ---------------------------------------------------------------------------
# inference


def test_mean_inference_is_pure():
    cohort = small_cohort(np.random.default_rng(7))
    model = small_model()
    a = infer_states(model, cohort)
    b = infer_states(model, cohort)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.means, y.means)
        np.testing.assert_array_equal(x.variances, y.variances)


def test_sample_mode_is_seeded():
    cohort = small_cohort(np.random.default_rng(8))
    model = small_model()
    a = infer_states(model, cohort, mode="sample", seed=3)
    b = infer_states(model, cohort, mode="sample", seed=3)
    c = infer_states(model, cohort, mode="sample", seed=4)
    mean = infer_states(model, cohort)
    assert all(np.array_equal(x.means, y.means) for x, y in zip(a, b))
    assert not all(np.array_equal(x.means, y.means) for x, y in zip(a, c))
    assert not np.array_equal(a[0].means, mean[0].means)
    # the first step conditions only on the shared start, so it is noise-free
    np.testing.assert_array_equal(a[0].means[0], mean[0].means[0])


def test_single_step_inference():
    cohort = small_cohort(np.random.default_rng(9), lengths=(1,))
    traj = infer_states(small_model(), cohort)[0]
    assert traj.length == 1 and traj.means.shape == (1, 4)
    assert np.all(traj.variances > 0)


def test_inference_truncates_to_max_steps():
    cohort = small_cohort(np.random.default_rng(10), lengths=(12, 4))
    model = small_model(max_steps=6)
    out = infer_states(model, cohort)
    assert [t.length for t in out] == [6, 4]
    assert [t.patient_id for t in out] == ["0", "1"]


def test_inference_errors():
    model = small_model()
    with pytest.raises(ValueError):
        infer_states(model, small_cohort(np.random.default_rng(0)), mode="median")
    with pytest.raises(DataContractError):
        infer_states(model, cohort_from_arrays([np.zeros((3, 2))]))


# ---------------------------------------------------------------------------
# training


def test_zero_epochs_leaves_parameters_alone(lgssm_data):
    _, cohort, _ = lgssm_data
    model = StateSpaceModel(tiny_config(epochs=0))
    before = model.state_dict()
    result = train(model, cohort)
    assert result.trace == []
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_reproducible(lgssm_data):
    _, cohort, _ = lgssm_data
    runs = []
    for _ in range(2):
        model = StateSpaceModel(tiny_config(epochs=2))
        train(model, cohort)
        runs.append(model.state_dict())
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


@pytest.mark.parametrize("kind", ["deep", "linear"])
def test_training_improves_the_elbo(lgssm_data, kind):
    _, cohort, _ = lgssm_data
    model = StateSpaceModel(tiny_config(epochs=15, kind=kind, learning_rate=0.01))
    trace = train(model, cohort).trace
    assert len(trace) == 15
    assert trace[-1].total > trace[0].total


def test_state_round_trip(lgssm_data):
    _, cohort, _ = lgssm_data
    model = StateSpaceModel(tiny_config(epochs=1))
    train(model, cohort)
    clone = StateSpaceModel(model.config, state=model.state_dict())
    for a, b in zip(infer_states(model, cohort), infer_states(clone, cohort)):
        np.testing.assert_array_equal(a.means, b.means)
    with pytest.raises(DataContractError):
        clone.load_state({"nope": np.zeros(1)})


def test_non_finite_input_aborts_with_diagnostics():
    x = np.ones((4, 5))
    x[2, 1] = np.inf
    cohort = cohort_from_arrays([x])
    with pytest.raises(NumericalFailure) as err:
        train(StateSpaceModel(tiny_config(epochs=1)), cohort)
    diag = err.value.diagnostics
    assert diag["epoch"] == 0 and diag["batch"] == 0
    assert "terms" in diag or "parameters" in diag


def test_training_rejects_wrong_width(lgssm_data):
    _, cohort, _ = lgssm_data
    with pytest.raises(DataContractError):
        train(StateSpaceModel(tiny_config(D=3)), cohort)


# ---------------------------------------------------------------------------
# generation


def test_generate_contract():
    model = small_model()
    with pytest.raises(ValueError):
        generate(model, 0)
    a = generate(model, 20, seed=4)
    b = generate(model, 20, seed=4)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.shape == (20, 6)
    assert np.all(a.mask == 1)
    assert not np.array_equal(a.values, generate(model, 20, seed=5).values)


def test_generate_starts_at_prior_mean():
    model = small_model(jitter=0.0)
    model.extra["prior_mean"].value = np.full(4, 50.0)
    # same noise, so only the starting mean differs between the two draws
    x_far = generate(model, 1, seed=0).values
    model.extra["prior_mean"].value = np.zeros(4)
    x_near = generate(model, 1, seed=0).values
    assert not np.allclose(x_far, x_near)

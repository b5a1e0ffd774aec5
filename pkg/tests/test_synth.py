import numpy as np
import pytest
from scipy.stats import multivariate_normal

from deepstate.preprocess import PreprocessRules, preprocess
from deepstate.synth import (
    ANEMIA_ITEMS,
    CohortSpec,
    GroundTruth,
    LgssmSpec,
    NumericalError,
    kalman_filter,
    kalman_loglik,
    kalman_smoother,
    realized_missing_rate,
    signal_codes_by_regime,
    simulate_cohort,
    simulate_lgssm_cohort,
)


def joint_gaussian(spec, T):
    """Mean and covariance of the stacked vector (z_1..z_T, x_1..x_T)."""
    k = spec.latent_dim
    mz = np.zeros((T, k))
    Pz = np.zeros((T * k, T * k))
    mz[0] = spec.init_mean
    # Cov(z_t, z_s) for t >= s is A^{t-s} Var(z_s)
    var = [spec.init_cov]
    for t in range(1, T):
        mz[t] = spec.A @ mz[t - 1] + spec.transition_offset
        var.append(spec.A @ var[-1] @ spec.A.T + np.diag(spec.Q))
    for t in range(T):
        for s in range(t + 1):
            block = np.linalg.matrix_power(spec.A, t - s) @ var[s]
            Pz[t * k:(t + 1) * k, s * k:(s + 1) * k] = block
            Pz[s * k:(s + 1) * k, t * k:(t + 1) * k] = block.T
    Cb = np.kron(np.eye(T), spec.C)
    mx = (Cb @ mz.reshape(-1)) + np.tile(spec.emission_offset, T)
    Px = Cb @ Pz @ Cb.T + np.kron(np.eye(T), np.diag(spec.R))
    Pzx = Pz @ Cb.T
    mean = np.concatenate([mz.reshape(-1), mx])
    cov = np.block([[Pz, Pzx], [Pzx.T, Px]])
    return mean, cov


def random_spec(rng, k, D):
    spec = LgssmSpec.random(rng, k, D)
    spec.init_mean = rng.normal(size=k)
    spec.transition_offset = rng.normal(size=k) * 0.3
    spec.emission_offset = rng.normal(size=D) * 0.3
    return spec


# ---------------------------------------------------------------------------
# Kalman oracles


def test_loglik_single_observation_closed_form():
    spec = LgssmSpec(A=[[1.0]], C=[[1.0]], Q=[1.0], R=[1.0])
    assert kalman_loglik(spec, [[0.0]]) == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-14)


def test_loglik_fully_masked_is_zero():
    rng = np.random.default_rng(0)
    spec = LgssmSpec.random(rng, 2, 3)
    x = rng.normal(size=(5, 3))
    assert kalman_loglik(spec, x, np.zeros_like(x)) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_loglik_matches_bivariate_marginal_T2(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 1, 1)
    _, x = spec.sample(2, rng)
    mean, cov = joint_gaussian(spec, 2)
    # marginal of (x_1, x_2): last two coordinates
    expected = multivariate_normal(mean[2:], cov[2:, 2:]).logpdf(x.reshape(-1))
    assert abs(kalman_loglik(spec, x) - expected) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_loglik_matches_joint_density_with_missing_components(seed):
    rng = np.random.default_rng(100 + seed)
    spec = random_spec(rng, 2, 3)
    T = 4
    _, x = spec.sample(T, rng)
    mask = rng.random(x.shape) < 0.6
    mean, cov = joint_gaussian(spec, T)
    n_z = T * 2
    keep = n_z + np.flatnonzero(mask.reshape(-1))
    expected = 0.0
    if len(keep):
        expected = multivariate_normal(mean[keep], cov[np.ix_(keep, keep)]).logpdf(x.reshape(-1)[mask.reshape(-1)])
    assert abs(kalman_loglik(spec, x, mask) - expected) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_smoother_matches_joint_conditioning_T3(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 1, 1)
    T = 3
    _, x = spec.sample(T, rng)
    mean, cov = joint_gaussian(spec, T)
    zi, xi = np.arange(T), T + np.arange(T)
    gain = cov[np.ix_(zi, xi)] @ np.linalg.inv(cov[np.ix_(xi, xi)])
    cond_mean = mean[zi] + gain @ (x.reshape(-1) - mean[xi])
    cond_cov = cov[np.ix_(zi, zi)] - gain @ cov[np.ix_(xi, zi)]
    sm = kalman_smoother(spec, x)
    np.testing.assert_allclose(sm.means[:, 0], cond_mean, atol=1e-9)
    np.testing.assert_allclose(sm.covs[:, 0, 0], np.diag(cond_cov), atol=1e-9)
    # lag-one covariances from the same joint
    for t in range(1, T):
        assert abs(sm.lag_one_covs[t][0, 0] - cond_cov[t, t - 1]) < 1e-9


def test_smoother_noiseless_identity_emission_recovers_observations():
    rng = np.random.default_rng(3)
    spec = LgssmSpec(A=0.9 * np.eye(2), C=np.eye(2), Q=[0.5, 0.5], R=[1e-12, 1e-12])
    z, x = spec.sample(20, rng)
    sm = kalman_smoother(spec, x)
    np.testing.assert_allclose(sm.means, x, atol=1e-5)


def test_smoother_fully_masked_returns_prior_marginals():
    rng = np.random.default_rng(4)
    spec = random_spec(rng, 2, 2)
    x = rng.normal(size=(6, 2))
    sm = kalman_smoother(spec, x, np.zeros_like(x))
    m, P = spec.init_mean, spec.init_cov
    for t in range(6):
        if t:
            m = spec.A @ m + spec.transition_offset
            P = spec.A @ P @ spec.A.T + np.diag(spec.Q)
        np.testing.assert_allclose(sm.means[t], m, atol=1e-12)
        np.testing.assert_allclose(sm.covs[t], P, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_smoother_variance_not_above_filter_variance(seed):
    rng = np.random.default_rng(seed)
    spec = LgssmSpec.random(rng, 2, 3)
    _, x = spec.sample(30, rng)
    mask = rng.random(x.shape) < 0.5
    sm = kalman_smoother(spec, x, mask)
    f = kalman_filter(spec, x, mask)
    for t in range(30):
        assert np.all(np.linalg.eigvalsh(f.covs[t] - sm.covs[t]) > -1e-10)


def test_non_psd_innovation_reports_step():
    spec = LgssmSpec(A=[[1.0]], C=[[1.0]], Q=[1.0], R=[1.0], init_cov=[[-5.0]])
    with pytest.raises(NumericalError) as info:
        kalman_loglik(spec, [[0.0], [1.0]])
    assert info.value.step == 0


def test_spec_dimension_mismatch():
    spec = LgssmSpec.random(np.random.default_rng(0), 2, 3)
    with pytest.raises(ValueError):
        kalman_loglik(spec, np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# cohort simulator


def small_spec(**kw):
    kw.setdefault("n_patients", 40)
    kw.setdefault("max_steps", 80)
    return CohortSpec(**kw)


def test_spec_rejects_infeasible_missing_rate():
    with pytest.raises(ValueError):
        CohortSpec(missing_rate=1.0)


def test_single_complete_patient():
    raw, truth = simulate_cohort(CohortSpec(n_patients=1, min_steps=50, max_steps=50, missing_rate=0.0,
                                            duplicate_rate=0.0), seed=0)
    cohort = preprocess(raw, PreprocessRules(min_steps=1))
    p = cohort.patients[0]
    assert p.length == len(truth.latents[p.patient_id])
    g = cohort.item_names.index("GENDER")
    assert np.all(np.delete(p.mask, g, axis=1) == 1.0)
    # gender is recorded once, then carried forward
    assert p.mask[0, g] == 1.0 and not p.mask[1:, g].any()


def test_missing_rate_on_100_by_10_grid():
    from deepstate.synth.cohort import _missing_grid

    obs = _missing_grid(np.random.default_rng(0), 100, 10, 0.5)
    assert abs(1.0 - obs.mean() - 0.5) <= 0.02


def test_realized_missing_rate_of_default_target():
    raw, _ = simulate_cohort(small_spec(), seed=1)
    assert abs(realized_missing_rate(raw) - 0.5923) <= 0.02


def test_simulation_is_deterministic():
    a, ta = simulate_cohort(small_spec(n_patients=10), seed=5)
    b, tb = simulate_cohort(small_spec(n_patients=10), seed=5)
    assert a.observations.equals(b.observations)
    assert a.patients.equals(b.patients)
    assert ta.to_frame().equals(tb.to_frame())


def test_ground_truth_invariants():
    spec = small_spec(n_patients=80)
    raw, truth = simulate_cohort(spec, seed=2)
    for pid, reg in truth.regimes.items():
        assert np.all(np.abs(np.diff(reg)) <= 1), "regimes never skip a stage"
        if truth.death[pid]:
            assert reg[-1] == 2
            assert truth.death_step[pid] == len(reg) - 1
            assert len(reg) >= spec.min_steps
        else:
            assert reg[-1] != 2, "survivors never end inside the terminal regime"
            assert truth.death_step[pid] == -1


def test_ground_truth_frame_round_trip():
    _, truth = simulate_cohort(small_spec(n_patients=5), seed=3)
    back = GroundTruth.from_frame(truth.to_frame())
    for pid in truth.latents:
        np.testing.assert_array_equal(back.latents[pid], truth.latents[pid])
        np.testing.assert_array_equal(back.regimes[pid], truth.regimes[pid])
        assert back.death[pid] == truth.death[pid]


def test_designed_anemia_signature():
    raw, truth = simulate_cohort(CohortSpec(n_patients=150), seed=4)
    table = signal_codes_by_regime(raw, truth, ANEMIA_ITEMS)
    for item in ANEMIA_ITEMS:
        assert table.loc[item, 2] <= -0.5


def test_generated_cohort_passes_preprocessing_without_exclusions():
    raw, _ = simulate_cohort(small_spec(n_patients=30, max_steps=238), seed=6)
    cohort = preprocess(raw)
    assert len(cohort) == 30
    assert sum(cohort.exclusions.values()) == 0


def test_drug_tags_present_and_known():
    from deepstate.synth import DRUGS

    raw, _ = simulate_cohort(small_spec(n_patients=30), seed=7)
    for tags in raw.patients["drug_tags"]:
        parts = tags.split(";")
        assert parts and set(parts) <= set(DRUGS)


def test_lgssm_cohort_shapes():
    spec = LgssmSpec.random(np.random.default_rng(0), 2, 4)
    cohort, latents = simulate_lgssm_cohort(spec, 3, 7, seed=1, missing_rate=0.3)
    assert len(cohort) == 3 and latents[0].shape == (7, 2)
    assert cohort.patients[0].values.shape == (7, 4)

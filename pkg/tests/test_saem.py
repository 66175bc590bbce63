import math

import numpy as np
import pytest
from scipy import stats

from conftest import RICH_DOSES, balanced_design, random_intercept_spec, table1_theta
from oracles import conjugate_posterior, random_intercept_ml, random_intercept_ml_numeric
from nlmemboot.errors import EstimationError, InvalidInputError, SamplerError
from nlmemboot.model import (
    Dataset,
    ErrorModel,
    ModelSpec,
    PopulationParams,
    StructuralModel,
    Transform,
    design_from_groups,
    sig_emax_spec,
    simulate_dataset,
)
from nlmemboot.saem import (
    ConditionalDraws,
    MHSettings,
    SaemSettings,
    _Chains,
    _Problem,
    compute_ebe,
    fit_saem,
    integrated_autocorr_time,
    sample_conditional,
)
from nlmemboot.rng import stream

RI_TRUTH = PopulationParams([10.0], [[1.0]], [0.5])


def ri_data(seed, n_subjects=100, n_obs=4, theta=RI_TRUTH):
    return simulate_dataset(random_intercept_spec(), theta, balanced_design(n_subjects, n_obs), seed)


# -- oracle sanity ----------------------------------------------------------

def test_closed_form_ml_agrees_with_numeric_ml():
    y = np.array(ri_data(3).y)
    np.testing.assert_allclose(random_intercept_ml(y), random_intercept_ml_numeric(y), rtol=1e-5)


# -- SAEM -------------------------------------------------------------------

def test_saem_matches_closed_form_on_random_intercept_model():
    ds = ri_data(0)
    est = fit_saem(random_intercept_spec(), ds, PopulationParams([8.0], [[2.0]], [1.0]), SaemSettings(seed=0),
                   compute_se=False)
    np.testing.assert_allclose(est.vector, random_intercept_ml(np.array(ds.y)), rtol=0.02)


def test_noise_free_emax_data_recovered_from_generating_values(emax_spec, rich_design):
    truth = PopulationParams([5, 30, 500, 1], np.zeros((3, 3)), [0.0])
    ds = simulate_dataset(emax_spec, truth, rich_design, seed=3)
    settings = SaemSettings(seed=1)
    est = fit_saem(emax_spec, ds, truth, settings, compute_se=False)
    np.testing.assert_allclose(est.theta_hat.mu, truth.mu, rtol=1e-3)
    assert est.theta_hat.sigma[0] < 10 * settings.sigma_floor
    assert np.all(np.diag(est.theta_hat.omega) <= 10 * settings.omega_floor)


def test_fit_is_deterministic_given_seed(emax_spec):
    design = design_from_groups([RICH_DOSES], [40])
    ds = simulate_dataset(emax_spec, table1_theta(), design, seed=2)
    fast = SaemSettings(n_explore=60, n_smooth=30, seed=4)
    a = fit_saem(emax_spec, ds, table1_theta(), fast)
    b = fit_saem(emax_spec, ds, table1_theta(), fast)
    np.testing.assert_array_equal(a.vector, b.vector)
    np.testing.assert_array_equal(a.trace, b.trace)
    np.testing.assert_array_equal(a.se, b.se)


def test_fit_is_invariant_to_subject_order(emax_spec):
    design = design_from_groups([RICH_DOSES], [40])
    ds = simulate_dataset(emax_spec, table1_theta(), design, seed=2)
    perm = np.random.default_rng(0).permutation(ds.n_subjects)
    shuffled = ds.subset(perm)
    fast = SaemSettings(n_explore=60, n_smooth=30, seed=4)
    a = fit_saem(emax_spec, ds, table1_theta(), fast, compute_se=False)
    b = fit_saem(emax_spec, shuffled, table1_theta(), fast, compute_se=False)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_smoothing_phase_damps_trace_fluctuations():
    ds = ri_data(5)
    s = SaemSettings(seed=5)
    tr = fit_saem(random_intercept_spec(), ds, RI_TRUTH, s, compute_se=False).trace
    k1 = s.n_explore
    explore = np.abs(np.diff(tr[k1 - 50:k1], axis=0)).mean(axis=0)
    early = np.abs(np.diff(tr[k1:k1 + 50], axis=0)).mean(axis=0)
    late = np.abs(np.diff(tr[k1 + 50:], axis=0)).mean(axis=0)
    assert np.all(late < early)
    assert np.all(early < explore)
    assert np.all(tr[k1 + 50:].var(axis=0) < tr[k1 - 50:k1].var(axis=0))


def test_trace_shape_and_chain_count():
    ds = ri_data(1, n_subjects=20)
    s = SaemSettings(n_explore=20, n_smooth=10, seed=1)
    est = fit_saem(random_intercept_spec(), ds, RI_TRUTH, s)
    assert est.trace.shape == (30, 3)
    assert est.n_chains == 3  # ceil(50 / 20)
    assert SaemSettings().chains_for(100) == 1


def test_identical_observations_with_proportional_error_fail_with_trace():
    spec = sig_emax_spec()
    design = design_from_groups([RICH_DOSES], [10])
    ds = Dataset(design, tuple([np.full(4, 7.0)] * 10))
    with pytest.raises(EstimationError) as info:
        fit_saem(spec, ds, table1_theta())
    assert info.value.trace is not None


def test_fit_rejects_invalid_init(emax_spec, rich_design):
    ds = simulate_dataset(emax_spec, table1_theta(), rich_design, seed=0)
    with pytest.raises(InvalidInputError):
        fit_saem(emax_spec, ds, PopulationParams([5, 30, 500, 1], np.eye(2), [0.1]))


def test_replicate_fits_centre_on_truth():
    """Mean of 20 replicate fits within 3 empirical SE/sqrt(20) of the generating fixed effects."""
    spec = sig_emax_spec()
    truth = table1_theta()
    design = design_from_groups([RICH_DOSES], [100])
    est = np.array([
        fit_saem(spec, simulate_dataset(spec, truth, design, seed=1000 + k), truth, SaemSettings(seed=k),
                 compute_se=False).theta_hat.mu
        for k in range(20)
    ])
    tol = 3 * est.std(axis=0, ddof=1) / math.sqrt(20)
    assert np.all(np.abs(est.mean(axis=0) - truth.mu) <= tol)


def test_combined_error_model_fits():
    spec = ModelSpec(sig_emax_spec().structural, ErrorModel.COMBINED, sig_emax_spec().transforms,
                     sig_emax_spec().omega_pattern)
    truth = PopulationParams([5, 30, 500, 1], table1_theta().omega, [0.5, 0.05])
    ds = simulate_dataset(spec, truth, design_from_groups([RICH_DOSES], [100]), seed=8)
    est = fit_saem(spec, ds, truth, SaemSettings(n_explore=150, n_smooth=50, seed=8))
    assert est.theta_hat.sigma.shape == (2,)
    assert np.all(np.isfinite(est.vector))
    assert est.theta_hat.sigma[1] == pytest.approx(0.05, rel=0.5)


# -- compiled sweep vs numpy sweep ------------------------------------------

@pytest.mark.parametrize("gamma", [1.0, 3.0])
def test_compiled_and_numpy_sweeps_agree(gamma):
    spec = sig_emax_spec()
    theta = table1_theta(gamma=gamma)
    ds = simulate_dataset(spec, theta, design_from_groups([(0, 100), (0, 100, 300, 1000)], [5, 7]), seed=1)
    prob = _Problem(spec, ds, n_chains=2)
    start = np.tile(np.log([5.0, 30.0, 500.0]), (prob.n_units, 1))
    a = _Chains(prob, start, MHSettings())
    b = _Chains(prob, start, MHSettings())
    for c in (a, b):
        c.set_population(theta.mu, theta.omega, theta.sigma)
    ra, rb = stream(0, "x"), stream(0, "x")
    for it in range(30):
        a.sweep(ra, adapt=True, compiled=True)
        b.sweep(rb, adapt=True, compiled=False)
    np.testing.assert_allclose(a.phi, b.phi, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.ll, b.ll, rtol=1e-10)
    np.testing.assert_array_equal(a.n_accept, b.n_accept)
    np.testing.assert_allclose(a.log_s_comp, b.log_s_comp, atol=1e-12)


def test_compiled_and_numpy_loglik_agree():
    spec = sig_emax_spec()
    ds = simulate_dataset(spec, table1_theta(3.0), design_from_groups([RICH_DOSES], [6]), seed=4)
    prob = _Problem(spec, ds, 1)
    ref = _Problem(spec, ds, 1, use_jit=False)
    phi = np.log([5.0, 30.0, 500.0]) + np.random.default_rng(0).normal(0, 0.3, (6, 3))
    mu = np.array([5.0, 30.0, 500.0, 2.5])
    np.testing.assert_allclose(prob.loglik(phi, mu, [0.1]), ref.loglik(phi, mu, [0.1]), rtol=1e-12)


# -- conditional sampling ---------------------------------------------------

def ri_conditional(seed=0, M=2000, n_subjects=20):
    ds = ri_data(seed, n_subjects=n_subjects)
    cd = sample_conditional(random_intercept_spec(), ds, RI_TRUTH, M, seed=seed)
    m, s = conjugate_posterior(np.array(ds.y), 10.0, 1.0, 0.5)
    return ds, cd, m, s


def test_conditional_draws_match_conjugate_posterior():
    ds, cd, m, s = ri_conditional(M=4000)
    z = (cd.eta[:, :, 0] - m[:, None]) / s[:, None]
    assert abs(z.mean()) < 0.02
    assert z.var() == pytest.approx(1.0, rel=0.05)
    # per subject, looser: each chain set is a few thousand correlated draws
    assert np.all(np.abs(cd.mean[:, 0] - m) < 0.15 * s)


def test_conditional_draws_pass_ks_against_conjugate_posterior():
    ds, cd, m, s = ri_conditional(seed=1, M=10_000, n_subjects=5)
    # keep roughly independent draws: one per estimated autocorrelation time
    z = (cd.eta[:, :, 0] - m[:, None]) / s[:, None]
    tau = int(math.ceil(integrated_autocorr_time(z.T).max()))
    sub = z[:, ::max(tau, 1)].ravel()
    assert stats.kstest(sub, "norm").pvalue > 0.01


def test_single_draw_shape():
    ds = ri_data(0, n_subjects=7)
    cd = sample_conditional(random_intercept_spec(), ds, RI_TRUTH, 1, seed=0)
    assert cd.eta.shape == (7, 1, 1)
    assert all(r.shape == (1, 4) for r in cd.residuals)
    assert cd.n_draws == 1


def test_conditional_draws_follow_input_order():
    ds = ri_data(0, n_subjects=10)
    perm = [3, 1, 4, 0, 9, 2, 6, 5, 8, 7]
    a = sample_conditional(random_intercept_spec(), ds, RI_TRUTH, 50, seed=3)
    b = sample_conditional(random_intercept_spec(), ds.subset(perm), RI_TRUTH, 50, seed=3)
    assert b.ids == tuple(ds.ids[i] for i in perm)
    np.testing.assert_array_equal(b.eta, a.eta[perm])


def test_residuals_are_standardised_under_each_draw(emax_spec):
    ds = simulate_dataset(emax_spec, table1_theta(), design_from_groups([RICH_DOSES], [8]), seed=0)
    cd = sample_conditional(emax_spec, ds, table1_theta(), 5, seed=0)
    from nlmemboot.model import transform_psi

    i = 3
    psi = transform_psi(emax_spec, table1_theta().mu, cd.eta[i])
    f = emax_spec.structural(psi, np.tile(ds.design.doses[i], (5, 1)))
    np.testing.assert_allclose(cd.residuals[i], (ds.y[i] - f) / (0.1 * np.abs(f)), rtol=1e-10)


def test_small_residual_error_concentrates_conditional(emax_spec):
    truth = PopulationParams([5, 30, 500, 1], table1_theta().omega, [1e-4])
    ds = simulate_dataset(emax_spec, truth, design_from_groups([RICH_DOSES], [5]), seed=11)
    cd = sample_conditional(emax_spec, ds, truth, 200, seed=2)
    omega_sd = np.sqrt(np.diag(truth.omega))
    assert np.all(cd.sd < 0.01 * omega_sd)
    # and the draws sit on the generating random effects
    from nlmemboot.model import draw_random_effects

    eta_true = draw_random_effects(truth.omega, 5, stream(11, "simulate"))
    np.testing.assert_allclose(cd.mean, eta_true, atol=0.01)


def test_sampler_failure_when_nothing_is_accepted():
    broken = StructuralModel("Broken", ("a",), (False,), lambda psi, x: np.full(np.shape(x), np.nan))
    spec = ModelSpec(broken, ErrorModel.CONSTANT, (Transform.NORMAL,), [[True]])
    ds = Dataset(balanced_design(3, 2), tuple([np.zeros(2)] * 3))
    with pytest.raises(SamplerError):
        sample_conditional(spec, ds, PopulationParams([0.0], [[1.0]], [1.0]), 10, burn_in=20, pilot=20)


def test_conditional_sampling_is_deterministic():
    ds = ri_data(2, n_subjects=6)
    a = sample_conditional(random_intercept_spec(), ds, RI_TRUTH, 30, seed=9)
    b = sample_conditional(random_intercept_spec(), ds, RI_TRUTH, 30, seed=9)
    np.testing.assert_array_equal(a.eta, b.eta)


# -- EBEs -------------------------------------------------------------------

def _draws(eta, dens):
    eta = np.asarray(eta, dtype=float)
    return ConditionalDraws(tuple(str(i) for i in range(eta.shape[0])), eta, np.asarray(dens, dtype=float),
                            np.ones(eta.shape[0]), tuple(np.zeros((eta.shape[1], 1)) for _ in range(eta.shape[0])))


def test_ebe_of_identical_draws():
    cd = _draws(np.tile([[0.3, -0.2]], (2, 4, 1)), np.zeros((2, 4)))
    for mode in ("Mean", "Mode"):
        np.testing.assert_array_equal(compute_ebe(cd, mode), [[0.3, -0.2], [0.3, -0.2]])


def test_ebe_mean_of_symmetric_draws():
    cd = _draws([[[-1.0], [0.0], [1.0]]], [[0.0, 0.0, 0.0]])
    assert compute_ebe(cd, "Mean")[0, 0] == 0.0


def test_ebe_mode_picks_highest_density_draw():
    cd = _draws([[[-1.0], [0.5], [1.0]]], [[-3.0, -0.1, -2.0]])
    assert compute_ebe(cd, "Mode")[0, 0] == 0.5


def test_ebe_mean_matches_conjugate_posterior_mean():
    ds, cd, m, s = ri_conditional(seed=4, M=2000)
    z = (compute_ebe(cd, "Mean")[:, 0] - m) / s
    assert np.all(np.abs(z) < 0.15)


def test_ebe_rejects_unknown_mode():
    cd = _draws([[[0.0]]], [[0.0]])
    with pytest.raises(InvalidInputError):
        compute_ebe(cd, "median")


# -- autocorrelation time ---------------------------------------------------

def test_iact_of_ar1_process():
    rho = 0.8
    rng = np.random.default_rng(0)
    n = 200_000
    x = np.empty(n)
    x[0] = 0
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    assert integrated_autocorr_time(x) == pytest.approx((1 + rho) / (1 - rho), rel=0.1)


def test_iact_of_white_noise_is_one():
    x = np.random.default_rng(1).standard_normal((50_000, 3))
    np.testing.assert_allclose(integrated_autocorr_time(x), 1.0, atol=0.1)

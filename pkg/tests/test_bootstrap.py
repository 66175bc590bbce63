import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import RICH_DOSES, TABLE1_OMEGA, balanced_design, random_intercept_spec, table1_theta
from oracles import conjugate_posterior, type7_quantile
import nlmemboot.bootstrap as bootstrap
from nlmemboot.bootstrap import (
    BootstrapConfig,
    BootstrapRun,
    EtaDraw,
    ResidualPool,
    Scheme,
    correct_random_effects_evd,
    correct_residuals,
    ebe_residuals,
    percentile_ci,
    resample_case,
    resample_conditional_np,
    resample_nonparametric,
    resample_parametric,
    run_bootstrap,
    summarize_run,
)
from nlmemboot.errors import EstimationError, InvalidConfigError, InvalidInputError, MissingPrerequisiteError
from nlmemboot.model import (
    Dataset,
    Design,
    PopulationParams,
    design_from_groups,
    sig_emax_spec,
    simulate_dataset,
    transform_psi,
)
from nlmemboot.rng import stream
from nlmemboot.saem import ConditionalDraws, SaemSettings, fit_saem, sample_conditional

QUICK = SaemSettings(n_explore=60, n_smooth=30, seed=3)
RI_THETA = PopulationParams([10.0], [[1.0]], [0.5])


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def random_spd(rng, q=3):
    a = rng.standard_normal((q, q))
    return a @ a.T + 0.1 * np.eye(q)


def exact_conditional(ids, y, mu, w2, s, M, rng):
    """ConditionalDraws for the random-intercept model drawn from the exact posterior."""
    mean, sd = conjugate_posterior(y, mu, w2, s)
    eta = (mean[:, None] + sd[:, None] * rng.standard_normal((len(mean), M)))[..., None]
    resid = tuple((y[i][None, :] - mu - eta[i]) / s for i in range(len(mean)))
    return ConditionalDraws(ids, eta, np.zeros(eta.shape[:2]), np.ones(len(mean)), resid)


# -- EVD correction ----------------------------------------------------------

def test_evd_correction_matches_target_for_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        omega = random_spd(rng)
        ebe = rng.standard_normal((40, 3)) @ np.linalg.cholesky(random_spd(rng)).T + 2.0
        out = correct_random_effects_evd(ebe, omega)
        assert rel_frob(np.cov(out, rowvar=False), omega) < 1e-10
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)


def test_evd_one_dimensional_is_ratio_of_sds():
    rng = np.random.default_rng(1)
    eta = rng.normal(3.0, 2.0, size=25)
    s = eta.std(ddof=1)
    out = correct_random_effects_evd(eta, [[0.49]])
    np.testing.assert_allclose(out[:, 0], (eta - eta.mean()) * 0.7 / s, rtol=1e-12)
    assert out[:, 0].var(ddof=1) == pytest.approx(0.49, rel=1e-12)


def test_evd_two_dimensional_shrinks_4i_to_identity():
    # centred points whose sample covariance is exactly 4 I
    base = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    ebe = base * math.sqrt(4 * 3 / 4)
    assert np.allclose(np.cov(ebe, rowvar=False), 4 * np.eye(2))
    out = correct_random_effects_evd(ebe, np.eye(2))
    assert rel_frob(np.cov(out, rowvar=False), np.eye(2)) < 1e-10


def test_evd_is_identity_when_covariance_already_matches():
    rng = np.random.default_rng(2)
    ebe = rng.standard_normal((30, 3))
    centred = ebe - ebe.mean(axis=0)
    out = correct_random_effects_evd(ebe, np.cov(centred, rowvar=False))
    np.testing.assert_allclose(out, centred, atol=1e-12)


def test_literal_variant_whitens_instead_of_matching():
    rng = np.random.default_rng(3)
    omega = random_spd(rng)
    ebe = rng.standard_normal((50, 3))
    out = correct_random_effects_evd(ebe, omega, variant="literal")
    # A' S A = D_Omega^-1 for the printed formula
    np.testing.assert_allclose(np.cov(out, rowvar=False), np.diag(1 / np.linalg.eigvalsh(omega)), atol=1e-10)


def test_evd_singular_covariance_falls_back_to_diagonal_scaling():
    rng = np.random.default_rng(4)
    a = rng.standard_normal(20)
    ebe = np.column_stack([a, 2 * a])
    with pytest.warns(RuntimeWarning, match="singular"):
        out = correct_random_effects_evd(ebe, np.diag([1.0, 9.0]))
    np.testing.assert_allclose(out.var(axis=0, ddof=1), [1.0, 9.0], rtol=1e-12)


def test_evd_needs_two_subjects():
    with pytest.raises(InvalidInputError):
        correct_random_effects_evd(np.ones((1, 2)), np.eye(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(10, 60))
def test_evd_exactness_property(seed, q, n):
    rng = np.random.default_rng(seed)
    omega = random_spd(rng, q)
    ebe = rng.standard_normal((n, q)) * rng.uniform(0.1, 3, size=q)
    out = correct_random_effects_evd(ebe, omega)
    assert rel_frob(np.cov(out, rowvar=False), omega) < 1e-10


# -- residual correction -------------------------------------------------------

def test_residual_correction_hand_example():
    np.testing.assert_allclose(correct_residuals([1.0, 3.0]), [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-15)


def test_residual_correction_fixed_point():
    rng = np.random.default_rng(5)
    r = rng.standard_normal(200)
    r = (r - r.mean()) / r.std(ddof=1)
    np.testing.assert_allclose(correct_residuals(r), r, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 500), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_residual_correction_property(seed, n, scale, shift):
    r = np.random.default_rng(seed).standard_normal(n) * scale + shift
    out = correct_residuals(r)
    assert abs(out.mean()) < 1e-12
    assert abs(out.std(ddof=1) - 1) < 1e-12


def test_residual_correction_errors():
    with pytest.raises(InvalidInputError):
        correct_residuals([2.0, 2.0, 2.0])
    with pytest.raises(InvalidInputError):
        correct_residuals([1.0])


# -- Case ------------------------------------------------------------------

def test_case_resample_size_ids_and_verbatim_donors():
    ds = simulate_dataset(random_intercept_spec(), RI_THETA, balanced_design(100, 3), seed=0)
    out = resample_case(ds, None, stream(1, "x"))
    assert out.n_subjects == 100
    assert len(set(out.ids)) == 100 and not set(out.ids) & set(ds.ids)
    donors = {tuple(y) for y in ds.y}
    assert all(tuple(y) in donors for y in out.y)


def test_case_stratified_preserves_group_sizes():
    design = design_from_groups([(0, 1000), (100, 1000), (0, 300), (100, 300)], [50] * 4)
    ds = simulate_dataset(sig_emax_spec(), table1_theta(), design, seed=2)
    for seed in range(5):
        out = resample_case(ds, "group", stream(seed, "case"))
        assert [out.design.groups.count(g) for g in "1234"] == [50] * 4
        for g, d in zip(out.design.groups, out.design.doses):
            assert np.array_equal(d, design.doses[design.groups.index(g)])


def test_case_resample_is_deterministic():
    ds = simulate_dataset(random_intercept_spec(), RI_THETA, balanced_design(30, 2), seed=0)
    a = resample_case(ds, None, stream(7, "bootstrap", 0))
    b = resample_case(ds, None, stream(7, "bootstrap", 0))
    assert a.design.same_as(b.design) and all(np.array_equal(u, v) for u, v in zip(a.y, b.y))


def test_case_stratify_errors():
    ds = simulate_dataset(random_intercept_spec(), RI_THETA, balanced_design(5, 2), seed=0)
    with pytest.raises(InvalidInputError):
        resample_case(ds, "group", stream(0))
    empty = Dataset(Design((), ()), ())
    with pytest.raises(InvalidInputError):
        resample_case(empty, None, stream(0))


# -- Par -------------------------------------------------------------------

def test_parametric_noise_free_is_the_population_curve(emax_spec):
    theta = PopulationParams([5, 30, 500, 1], np.zeros((3, 3)), [0.0])
    design = design_from_groups([RICH_DOSES], [4])
    out = resample_parametric(emax_spec, theta, design, stream(0))
    f = 5 + 30 * np.array(RICH_DOSES) / (np.array(RICH_DOSES) + 500)
    for y in out.y:
        np.testing.assert_allclose(y, f, rtol=1e-14)
    assert out.design is design


def test_parametric_random_effects_covariance(emax_spec):
    # y at dose 0 is E0 exactly when sigma = 0; recover eta through the log
    n = 100_000
    design = design_from_groups([(0,)], [n])
    theta = PopulationParams([5, 30, 500, 1], TABLE1_OMEGA, [0.0])
    out = resample_parametric(emax_spec, theta, design, stream(1))
    eta_e0 = np.log(np.concatenate(out.y) / 5)
    assert eta_e0.var() == pytest.approx(0.09, rel=0.02)


def test_parametric_eta_covariance_mc():
    q_spec = random_intercept_spec()
    n = 100_000
    design = balanced_design(n, 1)
    out = resample_parametric(q_spec, PopulationParams([0.0], [[0.49]], [0.0]), design, stream(2))
    assert np.var(np.concatenate(out.y)) == pytest.approx(0.49, rel=0.02)


def test_parametric_non_psd_omega_is_projected(emax_spec):
    bad = np.array([[0.09, 0, 0], [0, 0.49, 0.6], [0, 0.6, 0.49]])
    theta = PopulationParams([5, 30, 500, 1], bad, [0.1])
    with pytest.warns(RuntimeWarning, match="semi-definite"):
        out = resample_parametric(emax_spec, theta, design_from_groups([RICH_DOSES], [10]), stream(0))
    assert all(np.all(np.isfinite(y)) for y in out.y)


# -- NP --------------------------------------------------------------------

def test_nonparametric_eta_pool_covariance_mc(emax_spec):
    # shrunk EBEs; with sigma = 0 and dose 0 we can read eta_E0 back from y
    rng = np.random.default_rng(0)
    ebe = 0.5 * rng.multivariate_normal(np.zeros(3), TABLE1_OMEGA, size=100)
    n = 100_000
    design = design_from_groups([(0,)], [n])
    theta = PopulationParams([5, 30, 500, 1], TABLE1_OMEGA, [0.0])
    out = resample_nonparametric(emax_spec, theta, ebe, [np.zeros(1)] * 100, design, stream(3))
    eta_e0 = np.log(np.concatenate(out.y) / 5)
    assert eta_e0.var() == pytest.approx(0.09, rel=0.02)


def test_nonparametric_noise_free_is_deterministic_given_eta(emax_spec):
    truth = PopulationParams([5, 30, 500, 1], TABLE1_OMEGA, [0.0])
    design = design_from_groups([RICH_DOSES], [20])
    ds = simulate_dataset(emax_spec, truth, design, seed=1)
    ebe = np.random.default_rng(1).standard_normal((20, 3)) * 0.3
    res = ebe_residuals(emax_spec, truth, ds, ebe)
    assert all(np.all(r == 0) for r in res)
    a = resample_nonparametric(emax_spec, truth, ebe, res, design, stream(5))
    eta = correct_random_effects_evd(ebe, TABLE1_OMEGA)[stream(5).integers(0, 20, size=20)]
    x, _ = design.padded
    f = emax_spec.structural(transform_psi(emax_spec, truth.mu, eta), x)
    np.testing.assert_allclose(np.array(a.y), f, rtol=1e-14)


def test_nonparametric_preserves_design(emax_spec):
    design = design_from_groups([RICH_DOSES, (0, 1000)], [10, 10])
    ds = simulate_dataset(emax_spec, table1_theta(), design, seed=2)
    ebe = np.random.default_rng(2).standard_normal((20, 3)) * 0.3
    out = resample_nonparametric(emax_spec, table1_theta(), ebe,
                                 ebe_residuals(emax_spec, table1_theta(), ds, ebe), design, stream(6))
    assert out.design is design and out.design.same_as(ds.design)


# -- cNP -------------------------------------------------------------------

def ri_exact(N=200, n=4, M=500, seed=0):
    theta = PopulationParams([10.0], [[1.0]], [1.0])
    ds = simulate_dataset(random_intercept_spec(), theta, balanced_design(N, n), seed)
    cond = exact_conditional(ds.ids, np.array(ds.y), 10.0, 1.0, 1.0, M, np.random.default_rng(seed))
    return theta, ds, cond


def test_cnp_residual_pools_are_centred():
    _, _, cond = ri_exact(N=20, M=50)
    for pool in (ResidualPool.PER_SUBJECT, ResidualPool.GLOBAL):
        for p in bootstrap.centred_residual_pools(cond, pool):
            assert abs(p.mean()) < 1e-12


def test_cnp_preserves_design_in_both_modes():
    theta, ds, cond = ri_exact(N=30, M=20)
    for pool in ResidualPool:
        for draw in EtaDraw:
            cfg = BootstrapConfig(Scheme.CNP, 1, cnp_residual_pool=pool, cnp_eta_draw=draw, M=20)
            out = resample_conditional_np(random_intercept_spec(), theta, cond, ds.design, cfg, stream(0))
            assert out.design is ds.design


def test_cnp_eta_variance_matches_total_variance_of_the_posterior():
    theta, ds, cond = ri_exact()
    mean, sd = conjugate_posterior(np.array(ds.y), 10.0, 1.0, 1.0)
    target = mean.var() + np.mean(sd ** 2)
    cfg = BootstrapConfig(Scheme.CNP, 1, M=500)
    eta_c = bootstrap.centred_conditional_eta(cond)
    # eta* values are the cNP random effects; sample 10^5 of them as the resampler does
    draws = []
    for b in range(500):
        rng = stream(9, b)
        donor = rng.integers(0, 200, size=200)
        draws.append(eta_c[donor, rng.integers(0, 500, size=200), 0])
    assert np.var(np.concatenate(draws)) == pytest.approx(target, rel=0.03)
    # and the resampler's own output carries that variance (sigma -> noise only adds)
    sp = PopulationParams([10.0], [[1.0]], [0.0])
    ys = np.concatenate([np.array(resample_conditional_np(random_intercept_spec(), sp, cond, ds.design, cfg,
                                                          stream(11, b)).y)[:, 0] for b in range(500)])
    assert np.var(ys) == pytest.approx(target, rel=0.03)


def test_cnp_uses_unshrunk_draws_not_ebes():
    # one observation per subject: posterior means shrink by omega2 / (omega2 + sigma2) = 0.5
    theta, ds, cond = ri_exact(n=1)
    mean, _ = conjugate_posterior(np.array(ds.y), 10.0, 1.0, 1.0)
    assert mean.var() < 0.7
    assert bootstrap.centred_conditional_eta(cond).var() == pytest.approx(1.0, rel=0.1)


def test_cnp_pooled_flat_mode_runs():
    theta, ds, cond = ri_exact(N=10, M=5)
    cfg = BootstrapConfig(Scheme.CNP, 1, cnp_eta_draw=EtaDraw.POOLED_FLAT, M=5)
    out = resample_conditional_np(random_intercept_spec(), theta, cond, ds.design, cfg, stream(0))
    eta_c = bootstrap.centred_conditional_eta(cond).reshape(-1)
    # with sigma = 0 the outputs are mu + some pooled draw
    sp = PopulationParams([10.0], [[1.0]], [0.0])
    out = resample_conditional_np(random_intercept_spec(), sp, cond, ds.design, cfg, stream(0))
    for y in out.y:
        assert np.min(np.abs(eta_c - (y[0] - 10.0))) < 1e-12


def test_cnp_single_residual_pool_is_invalid_config():
    theta, ds, cond = ri_exact(N=5, n=1, M=1)
    cfg = BootstrapConfig(Scheme.CNP, 1, M=1)
    with pytest.raises(InvalidConfigError):
        resample_conditional_np(random_intercept_spec(), theta, cond, ds.design, cfg, stream(0))
    glob = BootstrapConfig(Scheme.CNP, 1, M=1, cnp_residual_pool=ResidualPool.GLOBAL)
    resample_conditional_np(random_intercept_spec(), theta, cond, ds.design, glob, stream(0))


def test_cnp_with_sampler_draws_runs_end_to_end():
    theta = PopulationParams([10.0], [[1.0]], [0.5])
    ds = simulate_dataset(random_intercept_spec(), theta, balanced_design(20, 3), seed=4)
    cond = sample_conditional(random_intercept_spec(), ds, theta, 20, seed=1)
    out = resample_conditional_np(random_intercept_spec(), theta, cond, ds.design,
                                  BootstrapConfig(Scheme.CNP, 1, M=20), stream(0))
    assert out.design is ds.design


# -- config ----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidConfigError):
        BootstrapConfig(Scheme.CASE, 0)
    with pytest.raises(InvalidConfigError):
        BootstrapConfig(Scheme.CNP, 5, M=0)
    with pytest.raises(InvalidConfigError):
        BootstrapConfig("bogus", 5)
    assert BootstrapConfig("cnp", 5).scheme is Scheme.CNP


# -- run_bootstrap ------------------------------------------------------------

@pytest.fixture(scope="module")
def ri_fit():
    spec = random_intercept_spec()
    ds = simulate_dataset(spec, RI_THETA, balanced_design(30, 4), seed=8)
    est = fit_saem(spec, ds, RI_THETA, QUICK)
    cond = sample_conditional(spec, ds, est.theta_hat, 20, seed=2)
    return spec, ds, est, cond


@pytest.mark.parametrize("scheme", list(Scheme))
def test_one_replicate_per_scheme(ri_fit, scheme):
    spec, ds, est, cond = ri_fit
    run = run_bootstrap(spec, ds, est, cond, BootstrapConfig(scheme, 1, M=20, seed=1))
    assert run.estimates.shape == (1, 3) and run.status == ("ok",)
    assert run.n_success + run.n_failed == 1


def test_run_is_deterministic_and_schedule_independent(ri_fit):
    spec, ds, est, cond = ri_fit
    cfg = BootstrapConfig(Scheme.CNP, 3, M=20, seed=5)
    a = run_bootstrap(spec, ds, est, cond, cfg)
    b = run_bootstrap(spec, ds, est, cond, cfg, parallelism=2)
    assert a.estimates.tobytes() == b.estimates.tobytes()


def test_missing_conditional_draws_is_a_prerequisite_error(ri_fit):
    spec, ds, est, _ = ri_fit
    for scheme in (Scheme.NP, Scheme.CNP):
        with pytest.raises(MissingPrerequisiteError):
            run_bootstrap(spec, ds, est, None, BootstrapConfig(scheme, 2))


def test_case_on_identical_subjects_without_noise_has_zero_se():
    spec = random_intercept_spec()
    ds = Dataset(balanced_design(20, 3), tuple([np.full(3, 4.0)] * 20))
    est = fit_saem(spec, ds, PopulationParams([3.0], [[0.5]], [0.5]), QUICK)
    run = run_bootstrap(spec, ds, est, config=BootstrapConfig(Scheme.CASE, 5, seed=1))
    assert run.n_success == 5
    assert np.all(run.estimates == run.estimates[0])
    np.testing.assert_allclose(run.estimates[0], est.vector, atol=1e-5)
    assert summarize_run(run)["mu"]["se"] == 0.0


def test_failed_refits_are_counted_and_excluded(ri_fit, monkeypatch):
    spec, ds, est, cond = ri_fit
    real = bootstrap.fit_saem
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise EstimationError("boom")
        return real(*a, **k)

    monkeypatch.setattr(bootstrap, "fit_saem", flaky)
    run = run_bootstrap(spec, ds, est, config=BootstrapConfig(Scheme.PAR, 4, seed=1))
    assert run.n_failed == 2 and run.n_success == 2 and not run.unreliable
    assert run.failure_reasons == {"failed: EstimationError": 2}
    assert np.all(np.isnan(run.estimates[1])) and np.all(np.isnan(run.estimates[3]))
    summ = summarize_run(run)
    assert summ["mu"]["n_success"] == 2 and summ["mu"]["n_failed"] == 2
    assert np.isfinite(summ["mu"]["se"])

    monkeypatch.setattr(bootstrap, "fit_saem", lambda *a, **k: (_ for _ in ()).throw(EstimationError("x")))
    with pytest.warns(RuntimeWarning, match="unreliable"):
        bad = run_bootstrap(spec, ds, est, config=BootstrapConfig(Scheme.PAR, 3, seed=1))
    assert bad.unreliable


def test_parametric_bootstrap_se_agrees_with_fim_on_rich_emax(emax_spec):
    design = design_from_groups([RICH_DOSES], [100])
    ds = simulate_dataset(emax_spec, table1_theta(), design, seed=11)
    est = fit_saem(emax_spec, ds, table1_theta(), SaemSettings(seed=2))
    run = run_bootstrap(emax_spec, ds, est, config=BootstrapConfig(Scheme.PAR, 50, seed=3))
    se_boot = summarize_run(run)["E0"]["se"]
    assert 0.5 <= se_boot / est.se[0] <= 2.0


# -- percentile intervals -------------------------------------------------------

def test_percentile_examples():
    assert percentile_ci(np.arange(1, 101), 0.1) == pytest.approx((5.95, 95.05), abs=1e-12)
    assert percentile_ci(np.arange(1, 201), 0.05) == pytest.approx((5.975, 195.025), abs=1e-12)
    assert percentile_ci([2.5] * 7, 0.1) == (2.5, 2.5)


def test_percentile_matches_oracle_bit_for_bit():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.standard_normal(rng.integers(2, 400)) * rng.uniform(0.01, 100)
        for a in (0.05, 0.1):
            assert percentile_ci(v, a) == (type7_quantile(v, a / 2), type7_quantile(v, 1 - a / 2))


def test_percentile_unavailable_and_bad_alpha():
    assert all(math.isnan(x) for x in percentile_ci([1.0, np.nan], 0.1))
    with pytest.raises(InvalidInputError):
        percentile_ci([1.0, 2.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_percentile_is_nested_in_alpha(values, a1, a2):
    lo_a, hi_a = sorted((a1, a2))
    wide, narrow = percentile_ci(values, lo_a), percentile_ci(values, hi_a)
    assert wide[0] <= narrow[0] and narrow[1] <= wide[1]


# -- summaries --------------------------------------------------------------------

def test_summary_two_replicates():
    spec = random_intercept_spec()
    est = np.array([[1.0, 0.5, 0.1], [3.0, 0.5, 0.1]])
    s = summarize_run(BootstrapRun(spec, BootstrapConfig(Scheme.CASE, 2), est, ("ok", "ok")))
    assert s["mu"]["mean"] == 2.0 and s["mu"]["se"] == pytest.approx(math.sqrt(2), rel=1e-15)
    assert s["omega2_mu"]["se"] == 0.0

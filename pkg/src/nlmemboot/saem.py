"""SAEM estimation and Metropolis-Hastings sampling of conditional distributions.

Random effects are handled on the transformed (Gaussian) scale
``phi_i = h^{-1}(psi_i)`` restricted to the random-effect dimensions, so the
complete-data model is exponential-family with sufficient statistics
``sum phi_i``, ``sum phi_i phi_i^T`` and the weighted residual sum of squares.
Parameters without a random effect (e.g. the Hill coefficient) are updated by a
Newton step on the complete-data log-likelihood and then averaged with the
same stochastic-approximation weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import EstimationError, InvalidInputError, NumericError, SamplerError
from .model import (
    Dataset,
    ErrorModel,
    ModelSpec,
    PopulationParams,
    Transform,
    _error_sd,
    nearest_psd,
)
from . import _kernels
from .rng import stream

log = logging.getLogger(__name__)

_TINY = 1e-300


@dataclass(frozen=True)
class MHSettings:
    """Proposal configuration for the three Metropolis-Hastings kernels.

    Each sweep runs ``n_prior`` independent proposals from the population
    distribution, ``n_joint`` joint random-walk proposals and ``n_component``
    componentwise random-walk passes.  Random-walk scales adapt toward
    ``target_acceptance`` while adaptation is enabled.
    """

    n_prior: int = 2
    n_joint: int = 2
    n_component: int = 2
    target_acceptance: float = 0.4
    adapt_rate: float = 0.15

    def __post_init__(self):
        if min(self.n_prior, self.n_joint, self.n_component) < 0:
            raise InvalidInputError("kernel repetition counts must be non-negative")
        if self.n_prior + self.n_joint + self.n_component < 1:
            raise InvalidInputError("at least one kernel must run")
        if not 0 < self.target_acceptance < 1:
            raise InvalidInputError("target acceptance must lie in (0, 1)")


@dataclass(frozen=True)
class SaemSettings:
    """SAEM iteration counts and sampler options.

    ``n_chains=None`` picks one chain when there are at least 50 subjects and
    otherwise enough chains that subjects x chains reaches 50.
    """

    n_burn: int = 5
    n_explore: int = 300
    n_smooth: int = 100
    n_chains: Optional[int] = None
    mh: MHSettings = field(default_factory=MHSettings)
    seed: int = 0
    anneal_fraction: float = 0.5
    anneal_factor: float = 0.97
    sigma_floor: float = 1e-6
    omega_floor: float = 1e-8
    fixed_variance: float = 0.1
    fixed_decay: float = 0.95

    def __post_init__(self):
        if self.n_burn < 0 or self.n_explore < 1 or self.n_smooth < 1:
            raise InvalidInputError("SAEM iteration counts must be >= 1")
        if self.n_chains is not None and self.n_chains < 1:
            raise InvalidInputError("n_chains must be >= 1")

    def chains_for(self, n_subjects: int) -> int:
        if self.n_chains is not None:
            return self.n_chains
        return 1 if n_subjects >= 50 else math.ceil(50 / n_subjects)

    def to_dict(self) -> dict:
        return {
            "n_burn": self.n_burn, "n_explore": self.n_explore, "n_smooth": self.n_smooth,
            "n_chains": self.n_chains, "seed": self.seed,
            "anneal_fraction": self.anneal_fraction, "anneal_factor": self.anneal_factor,
            "fixed_variance": self.fixed_variance, "fixed_decay": self.fixed_decay,
            "mh": {k: getattr(self.mh, k) for k in ("n_prior", "n_joint", "n_component", "target_acceptance", "adapt_rate")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SaemSettings":
        """Inverse of :meth:`to_dict`."""
        kw = {k: v for k, v in d.items() if k != "mh"}
        return cls(mh=MHSettings(**d.get("mh", {})), **kw)


@dataclass(frozen=True, eq=False)
class PopulationEstimate:
    """Fitted population parameters with asymptotic standard errors.

    ``se`` and ``fim`` follow ``spec.theta_names`` order; ``se`` is NaN where
    the information matrix could not be inverted, and both are ``None`` when
    the fit was run with ``compute_se=False``.  ``trace`` has one row per
    SAEM update iteration.
    """

    spec: ModelSpec
    theta_hat: PopulationParams
    se: Optional[np.ndarray]
    fim: Optional[np.ndarray]
    trace: np.ndarray
    seed: int
    settings: SaemSettings
    n_chains: int = 1

    @property
    def names(self) -> tuple:
        return self.spec.theta_names

    @property
    def vector(self) -> np.ndarray:
        return self.theta_hat.to_vector(self.spec)


@dataclass(frozen=True, eq=False)
class ConditionalDraws:
    """Samples from ``p(eta_i | y_i; theta_hat)`` for every subject.

    ``eta`` has shape ``(N, M, q)``, ``log_density`` ``(N, M)`` holds the
    unnormalised log conditional density of each draw, and ``residuals[i]``
    the ``(M, n_i)`` standardised residuals ``(y - f) / g`` under each draw.
    """

    ids: tuple
    eta: np.ndarray
    log_density: np.ndarray
    acceptance: np.ndarray
    residuals: tuple
    thin: int = 1
    burn_in: int = 0

    @property
    def n_draws(self) -> int:
        return self.eta.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.eta.mean(axis=1)

    @property
    def sd(self) -> np.ndarray:
        m = self.eta.shape[1]
        return self.eta.std(axis=1, ddof=1) if m > 1 else np.zeros_like(self.eta[:, 0])


# ---------------------------------------------------------------------------
# Internal likelihood machinery
# ---------------------------------------------------------------------------

class _Problem:
    """Padded data replicated over chains plus likelihood evaluation.

    Built-in structural models run through the compiled kernels; any other
    :class:`StructuralModel` uses the numpy code path.
    """

    def __init__(self, spec: ModelSpec, data: Dataset, n_chains: int, use_jit: bool = True,
                 extra=(), extra_log=()):
        self.spec = spec
        x, mask = data.design.padded
        self.n_subjects = data.n_subjects
        self.n_chains = n_chains
        self.x = np.tile(x, (n_chains, 1))
        self.mask = np.tile(mask, (n_chains, 1))
        self.y = np.tile(data.y_padded, (n_chains, 1))
        with np.errstate(divide="ignore"):
            self.logx = np.log(self.x)
        self.nobs = self.mask.sum(axis=1).astype(np.int64)
        self.n_units = self.x.shape[0]
        self.n_obs_total = int(mask.sum())
        # sampled dimensions: the random effects, optionally followed by
        # fixed-only parameters given a temporary variability
        self.re = np.concatenate([spec.re_index, np.asarray(extra, dtype=np.int64)]).astype(np.int64)
        self.lognormal = np.concatenate([spec.lognormal_re, np.asarray(extra_log, dtype=bool)])
        self.error_model = spec.error_model
        self.code = _kernels.MODEL_CODES.get(spec.structural.name) if use_jit else None
        self.ecode = _kernels.ERROR_CODES[spec.error_model.value]
        self.gfix = self.code == 0 and 3 not in self.re
        self._xg_key = None
        self.xg = self.x

    def powers(self, mu):
        """``x ** gamma`` for the sigmoid Emax model when gamma has no random effect."""
        if self.gfix and self._xg_key != mu[3]:
            self.xg = np.power(self.x, mu[3])
            self._xg_key = mu[3]
        return self.xg

    @property
    def compiled(self) -> bool:
        return self.code is not None

    def psi(self, phi, mu):
        psi = np.empty((phi.shape[0], self.spec.n_params))
        psi[:] = mu
        if self.re.size:
            psi[:, self.re] = np.where(self.lognormal, np.exp(phi), phi)
        return psi

    def phi_mean(self, mu) -> np.ndarray:
        m = np.asarray(mu, dtype=float)[self.re]
        return np.where(self.lognormal, np.log(np.where(self.lognormal, m, 1.0)), m)

    def predict(self, phi, mu):
        return self.spec.structural(self.psi(phi, mu), self.x)

    def loglik(self, phi, mu, sigma):
        """Per-unit ``log p(y_i | phi_i)`` up to the ``2 pi`` constant."""
        if self.compiled:
            mu = np.asarray(mu, dtype=float)
            return _kernels.loglik(self.code, self.ecode, phi, mu, self.re,
                                   self.lognormal, np.asarray(sigma, dtype=float),
                                   self.x, self.logx, self.powers(mu), self.gfix, self.y, self.nobs)
        f = self.predict(phi, mu)
        g = np.maximum(_error_sd(self.error_model, sigma, f), _TINY)
        r = (self.y - f) / g
        return -np.sum(np.where(self.mask, np.log(g) + 0.5 * r * r, 0.0), axis=1)


def _phi_mean(spec: ModelSpec, mu) -> np.ndarray:
    m = np.asarray(mu, dtype=float)[spec.re_index]
    return np.where(spec.lognormal_re, np.log(np.where(spec.lognormal_re, m, 1.0)), m)


def _phi_to_eta(spec, phi, mu):
    return phi - _phi_mean(spec, mu)


class _Chains:
    """Vectorised Metropolis-Hastings state for all (chain, subject) units."""

    def __init__(self, problem: _Problem, phi0, mh: MHSettings):
        self.p = problem
        self.mh = mh
        self.phi = np.array(phi0, dtype=float)
        q = self.phi.shape[1]
        self.log_s_joint = np.zeros(problem.n_units)
        self.log_s_comp = np.zeros((problem.n_units, q))
        self.n_accept = np.zeros(problem.n_units)
        self.n_prop = 0
        self.ll = None

    def set_population(self, mu, omega, sigma):
        self.mu = np.asarray(mu, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)
        self.m = self.p.phi_mean(mu)
        self.chol = np.linalg.cholesky(omega)
        self.prec = np.linalg.inv(omega)
        self.omega_sd = np.sqrt(np.diag(omega))
        self.ll = self.p.loglik(self.phi, self.mu, self.sigma)

    def _logprior(self, phi):
        d = phi - self.m
        return -0.5 * np.einsum("ij,jk,ik->i", d, self.prec, d)

    def reset_counts(self):
        self.n_accept[:] = 0
        self.n_prop = 0

    def draw_randoms(self, rng):
        U, q = self.phi.shape
        mh = self.mh
        z = rng.standard_normal((mh.n_prior + mh.n_joint) * U * q + mh.n_component * q * U)
        lu = np.log(rng.random((mh.n_prior + mh.n_joint) * U + mh.n_component * q * U))
        a, b = mh.n_prior * U * q, (mh.n_prior + mh.n_joint) * U * q
        c, d = mh.n_prior * U, (mh.n_prior + mh.n_joint) * U
        return (
            z[:a].reshape(mh.n_prior, U, q), lu[:c].reshape(mh.n_prior, U),
            z[a:b].reshape(mh.n_joint, U, q), lu[c:d].reshape(mh.n_joint, U),
            z[b:].reshape(mh.n_component, q, U), lu[d:].reshape(mh.n_component, q, U),
        )

    def sweep(self, rng, adapt: bool, compiled: Optional[bool] = None):
        U, q = self.phi.shape
        if q == 0:
            return
        randoms = self.draw_randoms(rng)
        use_jit = self.p.compiled if compiled is None else (compiled and self.p.compiled)
        if use_jit:
            p, mh = self.p, self.mh
            self.n_prop += _kernels.sweep(
                p.code, p.ecode, self.phi, self.ll, self.log_s_joint, self.log_s_comp, self.n_accept,
                self.mu, p.re, p.lognormal, self.m, self.chol, self.prec, self.omega_sd, self.sigma,
                p.x, p.logx, p.powers(self.mu), p.gfix, p.y, p.nobs, *randoms, adapt,
                mh.target_acceptance, mh.adapt_rate)
        else:
            self._sweep_numpy(randoms, adapt)

    def _sweep_numpy(self, randoms, adapt):
        p, mh = self.p, self.mh
        zp, lup, zj, luj, zc, luc = randoms
        q = self.phi.shape[1]
        target, rate = mh.target_acceptance, mh.adapt_rate
        for r in range(mh.n_prior):
            prop = self.m + zp[r] @ self.chol.T
            ll_new = p.loglik(prop, self.mu, self.sigma)
            self._accept(lup[r] < ll_new - self.ll, prop, ll_new)
        lp = self._logprior(self.phi)
        for r in range(mh.n_joint):
            prop = self.phi + np.exp(self.log_s_joint)[:, None] * (zj[r] @ self.chol.T)
            ll_new = p.loglik(prop, self.mu, self.sigma)
            lp_new = self._logprior(prop)
            acc = luj[r] < ll_new + lp_new - self.ll - lp
            self._accept(acc, prop, ll_new)
            lp = np.where(acc, lp_new, lp)
            if adapt:
                self.log_s_joint += rate * (acc - target)
        for r in range(mh.n_component):
            for d in range(q):
                prop = self.phi.copy()
                prop[:, d] += np.exp(self.log_s_comp[:, d]) * self.omega_sd[d] * zc[r, d]
                ll_new = p.loglik(prop, self.mu, self.sigma)
                lp_new = self._logprior(prop)
                acc = luc[r, d] < ll_new + lp_new - self.ll - lp
                self._accept(acc, prop, ll_new)
                lp = np.where(acc, lp_new, lp)
                if adapt:
                    self.log_s_comp[:, d] += rate * (acc - target)
        if adapt:
            np.clip(self.log_s_joint, -25.0, 3.0, out=self.log_s_joint)
            np.clip(self.log_s_comp, -25.0, 3.0, out=self.log_s_comp)
        self.n_prop += mh.n_prior + mh.n_joint + mh.n_component * q

    def _accept(self, acc, prop, ll_new):
        self.phi[acc] = prop[acc]
        self.ll[acc] = ll_new[acc]
        self.n_accept += acc

    def log_density(self):
        return self.ll + self._logprior(self.phi)


# ---------------------------------------------------------------------------
# SAEM
# ---------------------------------------------------------------------------

def _working_scale(spec):
    """Per fixed-only parameter: True when optimised on the log scale."""
    return np.array([spec.structural.positive[k] or spec.transforms[k] is Transform.LOGNORMAL
                     for k in spec.fixed_index], dtype=bool)


def _newton_fixed(problem, chains, mu, sigma, logscale):
    """One coordinate-wise Newton step per fixed-only parameter.

    Maximises the complete-data log-likelihood of ``y`` given the current
    random effects, with finite-difference derivatives in the working scale.
    """
    mu = mu.copy()
    phi = chains.phi
    for j, k in enumerate(problem.spec.fixed_index):
        w = math.log(mu[k]) if logscale[j] else mu[k]
        h = 1e-4 * max(abs(w), 1.0)
        if problem.compiled:
            lo, mid, hi = _kernels.fixed_newton_sums(
                problem.code, problem.ecode, phi, mu, int(k), h, bool(logscale[j]), problem.re,
                problem.lognormal, sigma, problem.x, problem.logx, problem.y, problem.nobs)
        else:
            vals = []
            for wv in (w - h, w, w + h):
                trial = mu.copy()
                trial[k] = math.exp(wv) if logscale[j] else wv
                vals.append(np.sum(problem.loglik(phi, trial, sigma)))
            lo, mid, hi = vals
        grad = (hi - lo) / (2 * h)
        curv = (hi - 2 * mid + lo) / (h * h)
        if not (np.isfinite(grad) and np.isfinite(curv)):
            continue
        if curv < 0:
            step = -grad / curv
        else:
            step = math.copysign(0.1, grad) if grad != 0 else 0.0
        if logscale[j]:
            step = max(-0.5, min(0.5, step))
        mu[k] = math.exp(w + step) if logscale[j] else w + step
    return mu


def _residual_stat(problem, phi, mu, sigma_model):
    """Sum of squared residuals on the scale used by the sigma update."""
    if problem.compiled and sigma_model is not ErrorModel.COMBINED:
        return _kernels.residual_ss(problem.code, problem.ecode, phi, mu, problem.re, problem.lognormal,
                                    problem.x, problem.logx, problem.y, problem.nobs)
    f = problem.predict(phi, mu)
    r = np.where(problem.mask, problem.y - f, 0.0)
    if sigma_model is ErrorModel.CONSTANT:
        return np.sum(r * r)
    if sigma_model is ErrorModel.PROPORTIONAL:
        fm = np.where(problem.mask, f, 1.0)
        return np.sum((r / np.maximum(np.abs(fm), _TINY)) ** 2)
    return np.nan


def _combined_sigma(problem, f, start):
    """ML update of (sigma_a, sigma_b) for the combined error model given f."""
    from scipy.optimize import minimize

    y, mask = problem.y[problem.mask], f[problem.mask]
    absf = np.abs(mask)
    resid2 = (y - mask) ** 2

    def nll(logs):
        a, b = np.exp(logs)
        g = a + b * absf
        return np.sum(np.log(g) + 0.5 * resid2 / (g * g))

    res = minimize(nll, np.log(np.maximum(start, 1e-8)), method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 400})
    return np.exp(res.x)


def _check_degenerate(spec: ModelSpec, data: Dataset):
    ys = np.concatenate(data.y)
    if spec.error_model is not ErrorModel.CONSTANT and np.ptp(ys) == 0:
        raise EstimationError("all observations are identical; the residual error is not identifiable",
                              trace=np.empty((0, spec.n_theta)))


def _initial_omega(spec, omega, floor):
    om = np.array(omega, dtype=float)
    om = np.where(spec.re_pattern, om, 0.0)
    d = np.diag(om).copy()
    np.fill_diagonal(om, np.maximum(d, floor))
    return nearest_psd(om) + floor * 1e-3 * np.eye(om.shape[0]) if om.size else om


def fit_saem(spec: ModelSpec, dataset: Dataset, init: PopulationParams,
             settings: SaemSettings = SaemSettings(), compute_se: bool = True) -> PopulationEstimate:
    """Maximum-likelihood estimate of the population parameters by SAEM.

    Subjects are processed in sorted-id order, so the result does not depend on
    the order of subjects in ``dataset``.  Iterations ``1..n_burn`` only run
    the sampler; the next ``n_explore`` use step size 1 and the final
    ``n_smooth`` use ``1/(k - n_explore)``.

    Parameters without a random effect are sampled during the exploration
    phase with an artificial variance that shrinks by ``fixed_decay`` per
    iteration, their mean following the stochastic approximation like any
    other.  In the smoothing phase they are fixed and updated by a Newton step
    on the complete-data likelihood.  Without the exploration trick the fixed
    parameters and the individual parameters they trade off against move by
    coordinate ascent, which converges very slowly along ridges such as
    ED50/gamma.
    """
    init.validate(spec)
    if dataset.n_subjects < 1:
        raise InvalidInputError("dataset is empty")
    _check_degenerate(spec, dataset)
    data = dataset.sorted_by_id()
    n_chains = settings.chains_for(data.n_subjects)
    logscale = _working_scale(spec)
    fixed = spec.fixed_index
    explore_fixed = settings.fixed_variance > 0 and fixed.size > 0
    prob_smooth = _Problem(spec, data, n_chains)
    prob = _Problem(spec, data, n_chains, extra=fixed, extra_log=logscale) if explore_fixed else prob_smooth
    rng = stream(settings.seed, "saem")

    N = data.n_subjects
    q = spec.n_re
    qs = prob.re.size
    ntot = prob.n_obs_total
    mu = np.array(init.mu, dtype=float)
    omega = _initial_omega(spec, init.omega, settings.omega_floor)
    sigma = np.maximum(np.array(init.sigma, dtype=float), settings.sigma_floor)
    v_fixed = settings.fixed_variance

    def sampler_omega():
        if not explore_fixed:
            return omega
        full = np.zeros((qs, qs))
        full[:q, :q] = omega
        full[np.arange(q, qs), np.arange(q, qs)] = v_fixed
        return full

    chains = _Chains(prob, np.tile(prob.phi_mean(mu), (prob.n_units, 1)), settings.mh)
    chains.set_population(mu, sampler_omega(), sigma)

    s1 = np.zeros(qs)
    s2 = np.zeros((q, q))
    s3 = 0.0
    n_iter = settings.n_explore + settings.n_smooth
    n_anneal = int(settings.anneal_fraction * settings.n_explore)
    trace = np.empty((n_iter, spec.n_theta))
    p = spec.n_params
    n_om = len(spec.omega_entries)
    om_rows = np.array([r for r, _ in spec.omega_entries], dtype=int)
    om_cols = np.array([c for _, c in spec.omega_entries], dtype=int)

    for _ in range(settings.n_burn):
        chains.sweep(rng, adapt=True)

    for it in range(n_iter):
        if explore_fixed and it == settings.n_explore:
            # freeze the fixed-only parameters for the smoothing phase
            prob = prob_smooth
            state = chains
            chains = _Chains(prob, state.phi[:, :q], settings.mh)
            chains.log_s_joint[:] = state.log_s_joint
            chains.log_s_comp[:] = state.log_s_comp[:, :q]
            chains.set_population(mu, omega, sigma)
            s1 = s1[:q]
        chains.sweep(rng, adapt=True)
        exploring = it < settings.n_explore
        step = 1.0 if exploring else 1.0 / (it - settings.n_explore + 1)
        phi = chains.phi

        s1 = s1 + step * (phi.sum(axis=0) / n_chains - s1)
        s2 = s2 + step * (phi[:, :q].T @ phi[:, :q] / n_chains - s2)

        if fixed.size:
            if explore_fixed and exploring:
                w = s1[q:] / N
            else:
                mu_new = _newton_fixed(prob, chains, mu, sigma, logscale)
                w_old = np.where(logscale, np.log(mu[fixed]), mu[fixed])
                w_new = np.where(logscale, np.log(mu_new[fixed]), mu_new[fixed])
                w = w_old + step * (w_new - w_old)
            mu[fixed] = np.where(logscale, np.exp(w), w)

        if q:
            m_new = s1[:q] / N
            om_new = s2 / N - np.outer(m_new, m_new)
            om_new = np.where(spec.re_pattern, 0.5 * (om_new + om_new.T), 0.0)
            if it < n_anneal:
                d = np.maximum(np.diag(om_new), settings.anneal_factor * np.diag(omega))
                np.fill_diagonal(om_new, d)
            np.fill_diagonal(om_new, np.maximum(np.diag(om_new), settings.omega_floor))
            try:
                np.linalg.cholesky(om_new)
            except np.linalg.LinAlgError:
                om_new = nearest_psd(om_new) + settings.omega_floor * np.eye(q)
            omega = om_new
            mu[spec.re_index] = np.where(spec.lognormal_re, np.exp(m_new), m_new)

        if spec.error_model is ErrorModel.COMBINED:
            sig_new = _combined_sigma(prob, prob.predict(phi, mu), sigma)
            sigma = sigma + step * (sig_new - sigma)
        else:
            s3 = s3 + step * (_residual_stat(prob, phi, mu, spec.error_model) / n_chains - s3)
            sig_new = math.sqrt(max(s3, 0.0) / ntot)
            if it < n_anneal:
                sig_new = max(sig_new, settings.anneal_factor * sigma[0])
            sigma = np.array([sig_new])
        sigma = np.maximum(sigma, settings.sigma_floor)
        v_fixed *= settings.fixed_decay

        vec = trace[it]
        vec[:p] = mu
        vec[p:p + n_om] = omega[om_rows, om_cols]
        vec[p + n_om:] = sigma
        if not np.all(np.isfinite(vec)):
            raise NumericError(f"non-finite parameter values at iteration {it + 1}", trace=trace[: it + 1].copy())
        chains.set_population(mu, sampler_omega() if exploring else omega, sigma)

    theta_hat = PopulationParams(mu.copy(), omega.copy(), sigma.copy())
    se = fim = None
    if compute_se:
        from .fim import compute_fim

        fim, se = compute_fim(spec, data, theta_hat)
    trace.setflags(write=False)
    return PopulationEstimate(spec, theta_hat, se, fim, trace, settings.seed, settings, n_chains)


# ---------------------------------------------------------------------------
# Conditional distributions
# ---------------------------------------------------------------------------

def integrated_autocorr_time(x) -> np.ndarray:
    """Integrated autocorrelation time along axis 0 with Sokal's adaptive window.

    ``x`` has shape ``(T, ...)``; constant series get ``T``.
    """
    x = np.asarray(x, dtype=float)
    T = x.shape[0]
    xc = x - x.mean(axis=0)
    n = 1 << (2 * T - 1).bit_length()
    spec_ = np.fft.rfft(xc, n=n, axis=0)
    acov = np.fft.irfft(spec_ * np.conj(spec_), n=n, axis=0)[:T]
    var0 = acov[0]
    flat = var0 <= 0
    rho = acov / np.where(flat, 1.0, var0)
    taus = 2.0 * np.cumsum(rho, axis=0) - 1.0
    lags = np.arange(T).reshape((T,) + (1,) * (x.ndim - 1))
    ok = lags >= 5.0 * taus
    first = np.where(ok.any(axis=0), ok.argmax(axis=0), T - 1)
    tau = np.take_along_axis(taus, first[None, ...], axis=0)[0]
    tau = np.maximum(tau, 1.0)
    return np.where(flat, float(T), tau)


def sample_conditional(spec: ModelSpec, dataset: Dataset, theta_hat: PopulationParams, M: int,
                       mh_settings: MHSettings = MHSettings(), seed: int = 0, n_chains: int = 4,
                       burn_in: int = 500, pilot: int = 200, thin: Optional[int] = None,
                       max_thin: int = 50) -> ConditionalDraws:
    """Draw ``M`` samples per subject from ``p(eta_i | y_i; theta_hat)``.

    Each subject runs ``min(M, n_chains)`` independent chains.  After
    ``burn_in`` adaptive sweeps the kernel is frozen; a ``pilot`` run estimates
    the integrated autocorrelation time (IACT) and, unless ``thin`` is given,
    the thinning interval is the smallest one for which the retained draws of a
    chain span at least ``10 * IACT`` sweeps.
    """
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    theta_hat.validate(spec)
    data = dataset.sorted_by_id()
    order = [data.ids.index(i) for i in dataset.ids]
    N, q = data.n_subjects, spec.n_re
    C = max(1, min(M, n_chains))
    L = math.ceil(M / C)
    prob = _Problem(spec, data, C)
    rng = stream(seed, "conditional")
    omega = _initial_omega(spec, theta_hat.omega, 1e-12)
    m_phi = _phi_mean(spec, theta_hat.mu)
    start = m_phi + rng.standard_normal((prob.n_units, q)) @ np.linalg.cholesky(omega).T * 0.1
    chains = _Chains(prob, start, mh_settings)
    chains.set_population(theta_hat.mu, omega, np.maximum(theta_hat.sigma, _TINY))

    for _ in range(burn_in):
        chains.sweep(rng, adapt=True)

    if thin is None:
        trace = np.empty((pilot, prob.n_units, q))
        for t in range(pilot):
            chains.sweep(rng, adapt=False)
            trace[t] = chains.phi
        if q:
            tau = integrated_autocorr_time(trace).max(axis=-1)
            tau_use = float(np.quantile(tau, 0.9))
        else:
            tau_use = 1.0
        thin = int(min(max_thin, max(1, math.ceil(10.0 * tau_use / L))))

    chains.reset_counts()
    phis = np.empty((L, prob.n_units, q))
    dens = np.empty((L, prob.n_units))
    for t in range(L):
        for _ in range(thin):
            chains.sweep(rng, adapt=False)
        phis[t] = chains.phi
        dens[t] = chains.log_density()

    acc_rate = chains.n_accept / max(chains.n_prop, 1)
    per_subject_acc = acc_rate.reshape(C, N).mean(axis=0)
    if q and np.any(chains.n_accept.reshape(C, N).sum(axis=0) == 0):
        bad = [data.ids[i] for i in np.flatnonzero(chains.n_accept.reshape(C, N).sum(axis=0) == 0)]
        raise SamplerError(f"no proposal accepted for subjects {bad[:5]} after adaptation")

    # (L, C*N, q) -> (N, C*L, q), chains concatenated per subject
    eta = _phi_to_eta(spec, phis, theta_hat.mu).reshape(L, C, N, q).transpose(2, 1, 0, 3).reshape(N, C * L, q)[:, :M]
    dens = dens.reshape(L, C, N).transpose(2, 1, 0).reshape(N, C * L)[:, :M]

    resid = []
    x, mask = data.design.padded
    for i in range(N):
        phi_i = eta[i] + m_phi
        psi = np.empty((M, spec.n_params))
        psi[:] = theta_hat.mu
        if q:
            psi[:, spec.re_index] = np.where(spec.lognormal_re, np.exp(phi_i), phi_i)
        xi = x[i, mask[i]]
        f = spec.structural(psi, np.broadcast_to(xi, (M, xi.size)))
        g = np.maximum(_error_sd(spec.error_model, theta_hat.sigma, f), _TINY)
        resid.append((data.y[i][None, :] - f) / g)

    eta, dens, per_subject_acc = eta[order], dens[order], per_subject_acc[order]
    resid = tuple(resid[i] for i in order)
    for a in (eta, dens, per_subject_acc):
        a.setflags(write=False)
    return ConditionalDraws(dataset.ids, eta, dens, per_subject_acc, resid, thin=thin, burn_in=burn_in)


def compute_ebe(conditional: ConditionalDraws, mode: str = "Mean") -> np.ndarray:
    """Per-subject point estimate of the random effects from conditional draws.

    ``"Mean"`` averages the draws; ``"Mode"`` returns the draw with the highest
    conditional density.
    """
    if conditional.eta.shape[1] < 1:
        raise InvalidInputError("no conditional draws")
    mode = mode.capitalize()
    if mode == "Mean":
        return conditional.eta.mean(axis=1)
    if mode == "Mode":
        best = np.argmax(conditional.log_density, axis=1)
        return conditional.eta[np.arange(conditional.eta.shape[0]), best]
    raise InvalidInputError(f"unknown EBE mode {mode!r}")


def with_seed(settings: SaemSettings, seed: int) -> SaemSettings:
    return replace(settings, seed=int(seed))

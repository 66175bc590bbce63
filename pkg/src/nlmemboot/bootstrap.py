"""Bootstrap resampling schemes and percentile intervals.

Four ways of building a bootstrap dataset from a fitted model:

``Case``
    resample whole subjects with replacement (optionally within strata);
``Par``
    simulate new random effects and residuals from the fitted distributions;
``NP``
    resample shrinkage-corrected empirical Bayes estimates and residuals;
``CNP``
    resample from draws of the conditional distributions of the random
    effects and the residuals they imply, which are not shrunk and need no
    correction.

:func:`run_bootstrap` refits every resample and collects the replicate
estimates in a :class:`BootstrapRun`.
"""
from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import (
    EstimationError,
    InvalidConfigError,
    InvalidInputError,
    MissingPrerequisiteError,
    SamplerError,
)
from .model import (
    Dataset,
    Design,
    ModelSpec,
    PopulationParams,
    _error_sd,
    draw_random_effects,
    is_psd,
    nearest_psd,
    simulate_observations,
    transform_psi,
)
from .rng import stream
from .saem import ConditionalDraws, PopulationEstimate, SaemSettings, compute_ebe, fit_saem


class Scheme(str, enum.Enum):
    CASE = "Case"
    PAR = "Par"
    NP = "NP"
    CNP = "CNP"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        for s in cls:
            if str(value).lower() == s.value.lower():
                return s
        raise InvalidConfigError(f"unknown bootstrap scheme {value!r}")


class ResidualPool(str, enum.Enum):
    PER_SUBJECT = "PerSubject"
    GLOBAL = "Global"


class EtaDraw(str, enum.Enum):
    SUBJECT_THEN_SAMPLE = "SubjectThenSample"
    POOLED_FLAT = "PooledFlat"


@dataclass(frozen=True)
class BootstrapConfig:
    """Settings of one bootstrap run.

    Parameters
    ----------
    scheme : Scheme
        Resampling scheme.
    B : int
        Number of bootstrap replicates.
    stratify_by : str, optional
        ``"group"`` resamples subjects within their design group (Case only).
    cnp_residual_pool, cnp_eta_draw
        How the cNP scheme draws residuals and random effects.
    M : int
        Conditional draws per subject used by cNP.
    seed : int
        Master seed; replicate ``b`` draws from ``stream(seed, "bootstrap", b)``.
    ebe_mode : str
        ``"Mode"`` or ``"Mean"`` of the conditional draws, used as EBEs by NP.
    evd_variant : str
        ``"symmetric"`` (exact covariance match) or ``"literal"``, see
        :func:`correct_random_effects_evd`.
    """

    scheme: Scheme
    B: int
    stratify_by: Optional[str] = None
    cnp_residual_pool: ResidualPool = ResidualPool.PER_SUBJECT
    cnp_eta_draw: EtaDraw = EtaDraw.SUBJECT_THEN_SAMPLE
    M: int = 100
    seed: int = 0
    ebe_mode: str = "Mode"
    evd_variant: str = "symmetric"

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        object.__setattr__(self, "cnp_residual_pool", ResidualPool(self.cnp_residual_pool))
        object.__setattr__(self, "cnp_eta_draw", EtaDraw(self.cnp_eta_draw))
        if int(self.B) < 1:
            raise InvalidConfigError("B must be >= 1")
        if self.scheme is Scheme.CNP and int(self.M) < 1:
            raise InvalidConfigError("M must be >= 1 for the cNP bootstrap")
        if self.stratify_by is not None and self.stratify_by != "group":
            raise InvalidConfigError("stratify_by must be None or 'group'")
        if self.evd_variant not in ("symmetric", "literal"):
            raise InvalidConfigError(f"unknown evd_variant {self.evd_variant!r}")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value, "B": int(self.B), "stratify_by": self.stratify_by,
            "cnp_residual_pool": self.cnp_residual_pool.value, "cnp_eta_draw": self.cnp_eta_draw.value,
            "M": int(self.M), "seed": int(self.seed), "ebe_mode": self.ebe_mode,
            "evd_variant": self.evd_variant,
        }


@dataclass(frozen=True, eq=False)
class BootstrapRun:
    """Replicate estimates of one bootstrap run.

    ``estimates`` has one row per replicate in ``spec.theta_names`` order;
    rows of failed refits are NaN and their reason is in ``status``.
    """

    spec: ModelSpec
    config: BootstrapConfig
    estimates: np.ndarray
    status: tuple

    @property
    def names(self) -> tuple:
        return self.spec.theta_names

    @property
    def ok(self) -> np.ndarray:
        return np.array([s == "ok" for s in self.status], dtype=bool)

    @property
    def n_success(self) -> int:
        return int(self.ok.sum())

    @property
    def n_failed(self) -> int:
        return len(self.status) - self.n_success

    @property
    def failure_reasons(self) -> dict:
        out: dict = {}
        for s in self.status:
            if s != "ok":
                out[s] = out.get(s, 0) + 1
        return out

    @property
    def unreliable(self) -> bool:
        """More than half of the refits failed."""
        return self.n_failed > 0.5 * len(self.status)

    def replicate_params(self, b: int) -> Optional[PopulationParams]:
        if self.status[b] != "ok":
            return None
        return PopulationParams.from_vector(self.spec, self.estimates[b])


# ---------------------------------------------------------------------------
# Case and parametric resampling
# ---------------------------------------------------------------------------

def _fresh_ids(n: int) -> tuple:
    # zero-padded so that sorting by id keeps the slot order
    width = len(str(n))
    return tuple(f"b{k:0{width}d}" for k in range(1, n + 1))


def resample_case(dataset: Dataset, stratify_by: Optional[str], rng: np.random.Generator) -> Dataset:
    """Draw ``N`` whole subjects with replacement.

    With ``stratify_by="group"`` each design group is resampled separately so
    that every group keeps its size.  Resampled subjects get fresh ids
    ``b1..bN``; doses and observations are copied from the donors.
    """
    N = dataset.n_subjects
    if N < 1:
        raise InvalidInputError("cannot resample an empty dataset")
    if stratify_by is None:
        donors = rng.integers(0, N, size=N)
    else:
        if stratify_by != "group":
            raise InvalidInputError(f"unknown stratification {stratify_by!r}")
        groups = dataset.design.groups
        if groups is None:
            raise InvalidInputError("the design has no group labels to stratify by")
        donors = np.empty(N, dtype=np.int64)
        for label in dict.fromkeys(groups):
            members = np.array([i for i, g in enumerate(groups) if g == label], dtype=np.int64)
            if members.size == 0:
                raise InvalidInputError(f"stratum {label!r} is empty")
            donors[members] = members[rng.integers(0, members.size, size=members.size)]
    return dataset.subset(donors.tolist(), ids=_fresh_ids(N))


def _psd_omega(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if not is_psd(omega):
        warnings.warn("estimated Omega is not positive semi-definite; projecting onto the PSD cone",
                      RuntimeWarning, stacklevel=3)
        omega = nearest_psd(omega)
    return omega


def resample_parametric(spec: ModelSpec, theta_hat: PopulationParams, design: Design,
                        rng: np.random.Generator) -> Dataset:
    """Simulate a dataset from the fitted model on the original design."""
    omega = _psd_omega(theta_hat.omega)
    eta = draw_random_effects(omega, design.n_subjects, rng)
    x, _ = design.padded
    eps = rng.standard_normal(x.shape)
    return Dataset(design, simulate_observations(spec, theta_hat.mu, theta_hat.sigma, eta, design, eps))


# ---------------------------------------------------------------------------
# Shrinkage corrections and the non-parametric schemes
# ---------------------------------------------------------------------------

def correct_random_effects_evd(ebe, omega_hat, variant: str = "symmetric") -> np.ndarray:
    """Centre the EBEs and rescale them so their covariance equals ``omega_hat``.

    With ``S`` the sample covariance (divisor ``N - 1``) of the centred EBEs
    and eigendecompositions ``S = V_S D_S V_S'`` and ``Omega = V_O D_O V_O'``,
    the rows are multiplied on the right by

    * ``"symmetric"``: ``A = (V_S D_S^-1/2 V_S') (V_O D_O^1/2 V_O')``, so
      ``A' S A = Omega`` exactly;
    * ``"literal"``: ``A = V_S D_S^-1/2 V_O D_O^-1/2``, the printed form,
      which whitens rather than matches and is kept only for comparison.

    A singular ``S`` falls back to scaling each coordinate by
    ``sqrt(Omega_dd / S_dd)`` with a warning.

    Parameters
    ----------
    ebe : array_like, shape (N, q)
    omega_hat : array_like, shape (q, q)

    Returns
    -------
    ndarray, shape (N, q)
    """
    eta = np.asarray(ebe, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    N, q = eta.shape
    if N < 2:
        raise InvalidInputError("at least two subjects are needed to correct EBEs")
    omega = np.asarray(omega_hat, dtype=float).reshape(q, q)
    centred = eta - eta.mean(axis=0)
    S = np.atleast_2d(np.cov(centred, rowvar=False, ddof=1))
    ws, vs = np.linalg.eigh(S)
    if ws.min() <= 1e-12 * max(ws.max(), 0.0) or ws.max() <= 0:
        warnings.warn("EBE covariance is singular; falling back to diagonal scaling", RuntimeWarning, stacklevel=2)
        sd = np.sqrt(np.diag(S))
        scale = np.divide(np.sqrt(np.clip(np.diag(omega), 0.0, None)), sd, out=np.zeros(q), where=sd > 0)
        return centred * scale
    wo, vo = np.linalg.eigh(omega)
    if variant == "symmetric":
        A = (vs / np.sqrt(ws)) @ vs.T @ (vo * np.sqrt(np.clip(wo, 0.0, None))) @ vo.T
    elif variant == "literal":
        if wo.min() <= 0:
            raise InvalidInputError("the literal correction needs a positive definite Omega")
        A = (vs / np.sqrt(ws)) @ (vo / np.sqrt(wo))
    else:
        raise InvalidInputError(f"unknown EVD variant {variant!r}")
    return centred @ A


def correct_residuals(residuals) -> np.ndarray:
    """Centre a residual pool and scale it to unit sample SD (divisor ``n - 1``)."""
    r = np.asarray(residuals, dtype=float).reshape(-1)
    if r.size < 2:
        raise InvalidInputError("at least two residuals are needed")
    c = r - r.mean()
    c -= c.mean()  # second pass removes the rounding left by a large offset
    sd = c.std(ddof=1)
    if not sd > 0:
        raise InvalidInputError("residuals have zero empirical SD")
    return c / sd


def ebe_residuals(spec: ModelSpec, theta_hat: PopulationParams, dataset: Dataset, ebe) -> tuple:
    """Standardised residuals ``(y - f) / g`` at the individual estimates.

    Where the error SD is zero (a noise-free fit) the residual is zero.
    """
    x, mask = dataset.design.padded
    psi = transform_psi(spec, theta_hat.mu, np.asarray(ebe, dtype=float).reshape(dataset.n_subjects, -1))
    f = spec.structural(psi, x)
    g = _error_sd(spec.error_model, np.asarray(theta_hat.sigma, dtype=float), f)
    r = np.divide(dataset.y_padded - f, g, out=np.zeros_like(f), where=g > 0)
    return tuple(r[i, mask[i]] for i in range(dataset.n_subjects))


def _assemble(spec, theta_hat, design, eta, eps_rows) -> Dataset:
    x, mask = design.padded
    eps = np.zeros(x.shape)
    eps[mask] = np.concatenate(eps_rows) if len(eps_rows) else []
    return Dataset(design, simulate_observations(spec, theta_hat.mu, theta_hat.sigma, eta, design, eps))


def resample_nonparametric(spec: ModelSpec, theta_hat: PopulationParams, ebe, residuals, design: Design,
                           rng: np.random.Generator, evd_variant: str = "symmetric") -> Dataset:
    """Resample corrected EBEs per subject slot and corrected residuals globally.

    ``residuals`` is a sequence of per-subject standardised residuals.  When
    every residual coefficient of ``theta_hat`` is zero the error term
    vanishes and the residual pool is not used.
    """
    N = design.n_subjects
    eta_pool = correct_random_effects_evd(ebe, theta_hat.omega, evd_variant)
    eta = eta_pool[rng.integers(0, eta_pool.shape[0], size=N)]
    n_total = int(design.n_obs.sum())
    if np.all(np.asarray(theta_hat.sigma) == 0):
        eps_flat = np.zeros(n_total)
    else:
        pool = correct_residuals(np.concatenate([np.asarray(r, dtype=float).reshape(-1) for r in residuals]))
        eps_flat = pool[rng.integers(0, pool.size, size=n_total)]
    rows = np.split(eps_flat, np.cumsum(design.n_obs)[:-1])
    return _assemble(spec, theta_hat, design, eta, rows)


def _check_alignment(conditional: ConditionalDraws, design: Design):
    if tuple(conditional.ids) != tuple(design.ids):
        raise InvalidInputError("conditional draws and design list different subjects")
    for r, n in zip(conditional.residuals, design.n_obs):
        if np.asarray(r).shape[1] != n:
            raise InvalidInputError("conditional residuals do not match the design")


def centred_residual_pools(conditional: ConditionalDraws, pool: ResidualPool) -> list:
    """Centred residual pools: one per subject or a single global one."""
    flat = [np.asarray(r, dtype=float).reshape(-1) for r in conditional.residuals]
    if pool is ResidualPool.PER_SUBJECT:
        for i, r in enumerate(flat):
            if r.size < 2:
                raise InvalidConfigError(
                    f"subject {conditional.ids[i]} has {r.size} conditional residual(s); "
                    "per-subject pools need M * n_i >= 2")
        return [r - r.mean() for r in flat]
    allr = np.concatenate(flat)
    if allr.size < 2:
        raise InvalidConfigError("the global residual pool needs at least two residuals")
    return [allr - allr.mean()]


def centred_conditional_eta(conditional: ConditionalDraws) -> np.ndarray:
    """Conditional draws minus their grand mean over all subjects and draws."""
    eta = np.asarray(conditional.eta, dtype=float)
    return eta - eta.reshape(-1, eta.shape[-1]).mean(axis=0)


def resample_conditional_np(spec: ModelSpec, theta_hat: PopulationParams, conditional: ConditionalDraws,
                            design: Design, config: BootstrapConfig, rng: np.random.Generator) -> Dataset:
    """Build a cNP bootstrap dataset from conditional draws.

    Random effects are drawn from the centred conditional draws, either a
    donor subject then one of its draws (``SubjectThenSample``) or uniformly
    from all ``N * M`` draws (``PooledFlat``).  Residuals for slot ``i`` come
    from subject ``i``'s own centred pool (``PerSubject``) or from the
    centred pool of all residuals (``Global``).  No variance correction is
    applied.
    """
    _check_alignment(conditional, design)
    N = design.n_subjects
    eta_c = centred_conditional_eta(conditional)
    M = eta_c.shape[1]
    pools = centred_residual_pools(conditional, config.cnp_residual_pool)
    if config.cnp_eta_draw is EtaDraw.SUBJECT_THEN_SAMPLE:
        donor = rng.integers(0, N, size=N)
        draw = rng.integers(0, M, size=N)
        eta = eta_c[donor, draw]
    else:
        flat = rng.integers(0, N * M, size=N)
        eta = eta_c.reshape(N * M, -1)[flat]
    rows = []
    for i, n in enumerate(design.n_obs):
        pool = pools[i] if len(pools) > 1 else pools[0]
        rows.append(pool[rng.integers(0, pool.size, size=n)])
    return _assemble(spec, theta_hat, design, eta, rows)


# ---------------------------------------------------------------------------
# Running a bootstrap
# ---------------------------------------------------------------------------

_FIT_FAILURES = (EstimationError, SamplerError, InvalidInputError, np.linalg.LinAlgError,
                 FloatingPointError, ZeroDivisionError)


@dataclass(frozen=True, eq=False)
class _Job:
    spec: ModelSpec
    dataset: Dataset
    theta_hat: PopulationParams
    init: PopulationParams
    config: BootstrapConfig
    fit_settings: SaemSettings
    ebe: Optional[np.ndarray] = None
    residuals: Optional[tuple] = None
    conditional: Optional[ConditionalDraws] = None

    def resample(self, b: int) -> Dataset:
        rng = stream(self.config.seed, "bootstrap", b)
        scheme = self.config.scheme
        if scheme is Scheme.CASE:
            return resample_case(self.dataset, self.config.stratify_by, rng)
        if scheme is Scheme.PAR:
            return resample_parametric(self.spec, self.theta_hat, self.dataset.design, rng)
        if scheme is Scheme.NP:
            return resample_nonparametric(self.spec, self.theta_hat, self.ebe, self.residuals,
                                          self.dataset.design, rng, self.config.evd_variant)
        return resample_conditional_np(self.spec, self.theta_hat, self.conditional,
                                       self.dataset.design, self.config, rng)

    def run(self, b: int):
        try:
            data = self.resample(b)
            est = fit_saem(self.spec, data, self.init, self.fit_settings, compute_se=False)
        except _FIT_FAILURES as exc:
            return b, None, f"failed: {type(exc).__name__}"
        vec = est.vector
        if not np.all(np.isfinite(vec)):
            return b, None, "failed: non-finite estimate"
        return b, vec, "ok"


_WORKER_JOB: Optional[_Job] = None


def _init_worker(job: _Job):
    global _WORKER_JOB
    _WORKER_JOB = job


def _run_in_worker(b: int):
    return _WORKER_JOB.run(b)


def _refit_init(spec: ModelSpec, theta: PopulationParams, floor: float) -> PopulationParams:
    omega = np.array(theta.omega, dtype=float)
    if omega.size:
        omega = nearest_psd(omega)
        d = np.diag(omega).copy()
        np.fill_diagonal(omega, np.maximum(d, floor))
    sigma = np.maximum(np.asarray(theta.sigma, dtype=float), 0.0)
    return PopulationParams(theta.mu, omega, sigma).validate(spec)


def run_bootstrap(spec: ModelSpec, dataset: Dataset, estimate: PopulationEstimate,
                  conditional: Optional[ConditionalDraws] = None,
                  config: BootstrapConfig = BootstrapConfig(Scheme.CASE, 200),
                  fit_settings: Optional[SaemSettings] = None, parallelism: int = 1) -> BootstrapRun:
    """Resample and refit ``config.B`` times.

    Each refit starts at the original estimate and uses the original SAEM
    settings, seed included, so that identical resamples give identical
    refits.  Replicate ``b`` only depends on ``(config.seed, b)``, which makes
    the result independent of ``parallelism``.  Failed refits are recorded
    and do not stop the run.

    NP and cNP need ``conditional`` draws computed on ``dataset``.
    """
    settings = fit_settings if fit_settings is not None else estimate.settings
    theta_hat = estimate.theta_hat
    job_kw = {}
    if config.scheme in (Scheme.NP, Scheme.CNP):
        if conditional is None:
            raise MissingPrerequisiteError(
                f"the {config.scheme.value} bootstrap needs conditional draws; "
                "run the fit with conditional sampling first")
        _check_alignment(conditional, dataset.design)
        if config.scheme is Scheme.NP:
            ebe = compute_ebe(conditional, config.ebe_mode)
            job_kw = {"ebe": ebe, "residuals": ebe_residuals(spec, theta_hat, dataset, ebe)}
        else:
            if conditional.n_draws < config.M:
                raise InvalidConfigError(f"cNP asked for M={config.M} but only {conditional.n_draws} draws exist")
            if conditional.n_draws > config.M:
                conditional = replace(conditional, eta=conditional.eta[:, : config.M],
                                      log_density=conditional.log_density[:, : config.M],
                                      residuals=tuple(r[: config.M] for r in conditional.residuals))
            job_kw = {"conditional": conditional}
    job = _Job(spec, dataset, theta_hat, _refit_init(spec, theta_hat, settings.omega_floor),
               config, settings, **job_kw)
    B = int(config.B)
    if parallelism > 1 and B > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, B), initializer=_init_worker,
                                 initargs=(job,)) as pool:
            results = list(pool.map(_run_in_worker, range(B)))
    else:
        results = [job.run(b) for b in range(B)]
    results.sort(key=lambda r: r[0])
    est = np.full((B, spec.n_theta), np.nan)
    status = []
    for b, vec, st in results:
        if vec is not None:
            est[b] = vec
        status.append(st)
    est.setflags(write=False)
    run = BootstrapRun(spec, config, est, tuple(status))
    if run.unreliable:
        warnings.warn(f"{run.n_failed} of {B} bootstrap refits failed; the run is unreliable",
                      RuntimeWarning, stacklevel=2)
    return run


# ---------------------------------------------------------------------------
# Intervals and summaries
# ---------------------------------------------------------------------------

def empirical_quantile(values, p: float) -> float:
    """Linear-interpolation quantile of the sorted values (type 7).

    With ``v`` sorted and ``h = (n - 1) p``, returns
    ``v[floor(h)] + (h - floor(h)) * (v[floor(h) + 1] - v[floor(h)])``.
    """
    v = np.sort(np.asarray(values, dtype=float).reshape(-1))
    h = (v.size - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def percentile_ci(values, alpha: float) -> tuple:
    """Percentile interval ``[Q(alpha/2), Q(1 - alpha/2)]``.

    Non-finite values are dropped; fewer than two remaining values give
    ``(nan, nan)``.
    """
    if not 0 < alpha < 1:
        raise InvalidInputError("alpha must lie in (0, 1)")
    v = np.asarray(values, dtype=float).reshape(-1)
    v = v[np.isfinite(v)]
    if v.size < 2:
        return (math.nan, math.nan)
    return (empirical_quantile(v, alpha / 2), empirical_quantile(v, 1 - alpha / 2))


def summarize_run(run: BootstrapRun) -> dict:
    """Per-parameter mean, bootstrap SE (SD, divisor n - 1) and 90%/95% percentile CIs."""
    ok = run.ok
    out = {}
    for j, name in enumerate(run.names):
        v = run.estimates[ok, j]
        enough = v.size >= 2
        out[name] = {
            "mean": float(v.mean()) if v.size else math.nan,
            "se": float(v.std(ddof=1)) if enough else math.nan,
            "ci90": list(percentile_ci(v, 0.10)),
            "ci95": list(percentile_ci(v, 0.05)),
            "n_success": int(v.size),
            "n_failed": run.n_failed,
        }
    return out

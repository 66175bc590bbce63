"""Non-linear mixed-effects model definitions, designs, datasets and simulation.

A model is the combination of

* a structural function ``f(x, psi)`` giving the mean response of one subject,
* an error model ``g(f, sigma)`` giving the residual standard deviation,
* per-parameter transforms mapping fixed effects ``mu`` and random effects
  ``eta ~ N(0, Omega)`` to individual parameters ``psi``.

Observations follow ``y_ij = f(x_ij, psi_i) + g(f, sigma) * eps_ij`` with
``eps_ij ~ N(0, 1)``.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .rng import stream

__all__ = [
    "Transform",
    "ErrorModel",
    "StructuralModel",
    "SIG_EMAX",
    "INTERCEPT",
    "LINEAR",
    "STRUCTURAL_MODELS",
    "ModelSpec",
    "PopulationParams",
    "Design",
    "Dataset",
    "sig_emax_spec",
    "evaluate_structural",
    "evaluate_error_sd",
    "transform_psi",
    "simulate_dataset",
    "nearest_psd",
    "is_psd",
    "read_dataset_csv",
    "write_dataset_csv",
    "dataset_to_csv",
    "dataset_from_csv",
    "design_from_groups",
]


class Transform(str, enum.Enum):
    NORMAL = "Normal"
    LOGNORMAL = "LogNormal"
    FIXED = "Fixed"


class ErrorModel(str, enum.Enum):
    CONSTANT = "Constant"
    PROPORTIONAL = "Proportional"
    COMBINED = "Combined"

    @property
    def coefficient_names(self) -> tuple:
        if self is ErrorModel.COMBINED:
            return ("sigma_a", "sigma_b")
        return ("sigma",)


# ---------------------------------------------------------------------------
# Structural models
# ---------------------------------------------------------------------------

def _sig_emax(psi, x):
    e0, emax, ed50, gamma = (psi[..., k, None] for k in range(4))
    # 0**gamma is 0 for gamma > 0, so placebo rows give exactly E0
    xg = np.power(x, gamma)
    return e0 + emax * xg / (xg + np.power(ed50, gamma))


def _intercept(psi, x):
    return psi[..., 0, None] + np.zeros_like(x)


def _linear(psi, x):
    return psi[..., 0, None] + psi[..., 1, None] * x


@dataclass(frozen=True)
class StructuralModel:
    """Vectorised mean function.

    ``func(psi, x)`` takes ``psi`` of shape ``(..., n_params)`` and ``x`` of
    shape ``(..., n_obs)`` and returns the mean response with the shape of
    ``x``.  ``positive`` flags parameters that must stay strictly positive;
    those are optimised on the log scale when they carry no random effect.
    """

    name: str
    param_names: tuple
    positive: tuple
    func: Callable = field(repr=False, compare=False)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def __call__(self, psi, x):
        return self.func(psi, x)


SIG_EMAX = StructuralModel("SigEmax", ("E0", "Emax", "ED50", "gamma"), (True, True, True, True), _sig_emax)
INTERCEPT = StructuralModel("Intercept", ("mu",), (False,), _intercept)
LINEAR = StructuralModel("Linear", ("intercept", "slope"), (False, False), _linear)
STRUCTURAL_MODELS = {m.name: m for m in (SIG_EMAX, INTERCEPT, LINEAR)}


def evaluate_structural(psi, x, model: StructuralModel = SIG_EMAX):
    """Evaluate the structural model for individual parameters ``psi`` at doses ``x``.

    Scalars and arrays are both accepted; a 1-D ``psi`` is one subject.

    >>> float(evaluate_structural([5, 30, 500, 1], 1000))
    25.0
    """
    psi = np.asarray(psi, dtype=float)
    x = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(x))):
        raise InvalidInputError("structural model inputs must be finite")
    if model is SIG_EMAX:
        if np.any(x < 0):
            raise InvalidInputError("doses must be non-negative")
        if np.any(psi[..., 2] <= 0) or np.any(psi[..., 3] <= 0):
            raise InvalidInputError("ED50 and gamma must be positive")
    scalar_x = x.ndim == 0
    out = model(psi, np.atleast_1d(x))
    return out[..., 0] if scalar_x else out


def evaluate_error_sd(error_model: ErrorModel, sigma, f_value):
    """Residual standard deviation ``g`` for mean response ``f_value``."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if np.any(sigma < 0):
        raise InvalidInputError("error coefficients must be non-negative")
    return _error_sd(ErrorModel(error_model), sigma, np.asarray(f_value, dtype=float))


def _error_sd(error_model, sigma, f):
    if error_model is ErrorModel.CONSTANT:
        return np.full(np.shape(f), sigma[0]) if np.ndim(f) else sigma[0] + 0.0 * f
    if error_model is ErrorModel.PROPORTIONAL:
        return sigma[0] * np.abs(f)
    return sigma[0] + sigma[1] * np.abs(f)


# ---------------------------------------------------------------------------
# Model specification and population parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Structural model, error model, transforms and variability structure.

    ``omega_pattern`` is a symmetric boolean matrix over *all* structural
    parameters.  A true diagonal entry gives that parameter a random effect; an
    off-diagonal entry requests an estimated covariance.  ``Fixed`` parameters
    never carry a random effect.
    """

    structural: StructuralModel
    error_model: ErrorModel
    transforms: tuple
    omega_pattern: np.ndarray = field(compare=False)

    def __post_init__(self):
        transforms = tuple(Transform(t) for t in self.transforms)
        object.__setattr__(self, "transforms", transforms)
        object.__setattr__(self, "error_model", ErrorModel(self.error_model))
        pat = np.array(self.omega_pattern, dtype=bool)
        p = self.structural.n_params
        if len(transforms) != p or pat.shape != (p, p):
            raise InvalidInputError("transforms and omega_pattern must match the structural parameters")
        if not np.array_equal(pat, pat.T):
            raise InvalidInputError("omega_pattern must be symmetric")
        diag = np.diag(pat)
        for k, t in enumerate(transforms):
            if t is Transform.FIXED and diag[k]:
                raise InvalidInputError(f"parameter {self.structural.param_names[k]} is Fixed and cannot have a random effect")
        off = pat & ~np.eye(p, dtype=bool)
        if np.any(off & ~np.outer(diag, diag)):
            raise InvalidInputError("an estimated covariance needs both variances estimated")
        pat.setflags(write=False)
        object.__setattr__(self, "omega_pattern", pat)

    @property
    def n_params(self) -> int:
        return self.structural.n_params

    @property
    def param_names(self) -> tuple:
        return self.structural.param_names

    @cached_property
    def re_index(self) -> np.ndarray:
        """Indices of structural parameters carrying a random effect."""
        return np.flatnonzero(np.diag(self.omega_pattern))

    @cached_property
    def fixed_index(self) -> np.ndarray:
        """Indices of structural parameters estimated without a random effect."""
        return np.flatnonzero(~np.diag(self.omega_pattern))

    @property
    def n_re(self) -> int:
        return len(self.re_index)

    @cached_property
    def re_pattern(self) -> np.ndarray:
        idx = self.re_index
        return self.omega_pattern[np.ix_(idx, idx)]

    @cached_property
    def omega_entries(self) -> tuple:
        """Estimated entries of Omega as (row, col) pairs over random-effect dims.

        Variances first, then covariances in row-major upper-triangle order.
        """
        q = self.n_re
        entries = [(d, d) for d in range(q)]
        entries += [(a, b) for a in range(q) for b in range(a + 1, q) if self.re_pattern[a, b]]
        return tuple(entries)

    @cached_property
    def omega_names(self) -> tuple:
        names = [self.param_names[k] for k in self.re_index]
        out = []
        for a, b in self.omega_entries:
            out.append(f"omega2_{names[a]}" if a == b else f"cov_{names[a]}_{names[b]}")
        return tuple(out)

    @property
    def sigma_names(self) -> tuple:
        return self.error_model.coefficient_names

    @cached_property
    def theta_names(self) -> tuple:
        """Names of every estimated population parameter, in vector order."""
        return tuple(self.param_names) + self.omega_names + self.sigma_names

    @property
    def n_theta(self) -> int:
        return len(self.theta_names)

    @cached_property
    def lognormal_re(self) -> np.ndarray:
        """Boolean mask over random-effect dims that use the log-normal transform."""
        return np.array([self.transforms[k] is Transform.LOGNORMAL for k in self.re_index], dtype=bool)


def sig_emax_spec(error_model=ErrorModel.PROPORTIONAL, covariance=True) -> ModelSpec:
    """Sigmoid Emax model with log-normal E0, Emax, ED50 and a population gamma."""
    pat = np.zeros((4, 4), dtype=bool)
    pat[0, 0] = pat[1, 1] = pat[2, 2] = True
    if covariance:
        pat[1, 2] = pat[2, 1] = True
    return ModelSpec(SIG_EMAX, ErrorModel(error_model),
                     (Transform.LOGNORMAL, Transform.LOGNORMAL, Transform.LOGNORMAL, Transform.FIXED), pat)


def is_psd(m, rtol: float = 1e-10) -> bool:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return True
    if not np.allclose(m, m.T, rtol=1e-12, atol=1e-14):
        return False
    w = np.linalg.eigvalsh(m)
    return bool(w.min() >= -rtol * max(w.max(), 0.0) - 1e-300)


def nearest_psd(m) -> np.ndarray:
    """Project a symmetric matrix onto the PSD cone by clipping eigenvalues at zero."""
    m = 0.5 * (np.asarray(m, dtype=float) + np.asarray(m, dtype=float).T)
    if m.size == 0:
        return m
    w, v = np.linalg.eigh(m)
    return (v * np.clip(w, 0.0, None)) @ v.T


def _sqrt_psd(m) -> np.ndarray:
    """Symmetric square root of a PSD matrix (works for singular matrices)."""
    if m.size == 0:
        return m
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True)
class PopulationParams:
    """Population parameters ``theta = (mu, Omega, sigma)``.

    ``mu`` holds the fixed effects on the natural scale (one per structural
    parameter), ``omega`` the random-effect covariance over the random-effect
    dimensions of the spec, ``sigma`` the residual error coefficient(s).
    """

    mu: np.ndarray
    omega: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("mu", "omega", "sigma"):
            arr = np.array(getattr(self, name), dtype=float)
            if name == "omega":
                arr = np.atleast_2d(arr) if arr.size else arr.reshape(0, 0)
            else:
                arr = np.atleast_1d(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def validate(self, spec: ModelSpec) -> "PopulationParams":
        if self.mu.shape != (spec.n_params,):
            raise InvalidInputError(f"mu must have {spec.n_params} entries")
        if self.omega.shape != (spec.n_re, spec.n_re):
            raise InvalidInputError(f"omega must be {spec.n_re}x{spec.n_re}")
        if self.sigma.shape != (len(spec.sigma_names),):
            raise InvalidInputError(f"sigma must have {len(spec.sigma_names)} entries")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.sigma))):
            raise InvalidInputError("population parameters must be finite")
        if np.any(self.sigma < 0):
            raise InvalidInputError("sigma must be non-negative")
        for k, t in enumerate(spec.transforms):
            if t is Transform.LOGNORMAL and self.mu[k] <= 0:
                raise InvalidInputError(f"{spec.param_names[k]} is log-normal and needs mu > 0")
            if spec.structural.positive[k] and self.mu[k] <= 0:
                raise InvalidInputError(f"{spec.param_names[k]} must be positive")
        if not is_psd(self.omega):
            raise InvalidInputError("omega must be symmetric positive semidefinite")
        return self

    def to_vector(self, spec: ModelSpec) -> np.ndarray:
        om = [self.omega[a, b] for a, b in spec.omega_entries]
        return np.concatenate([self.mu, np.asarray(om, dtype=float), self.sigma])

    @classmethod
    def from_vector(cls, spec: ModelSpec, vec) -> "PopulationParams":
        vec = np.asarray(vec, dtype=float)
        p, ne = spec.n_params, len(spec.omega_entries)
        omega = np.zeros((spec.n_re, spec.n_re))
        for (a, b), v in zip(spec.omega_entries, vec[p:p + ne]):
            omega[a, b] = omega[b, a] = v
        return cls(vec[:p], omega, vec[p + ne:])

    def as_dict(self, spec: ModelSpec) -> dict:
        return dict(zip(spec.theta_names, self.to_vector(spec).tolist()))


def transform_psi(spec: ModelSpec, mu, eta) -> np.ndarray:
    """Individual parameters from fixed effects and random effects.

    ``eta`` has the random-effect dimension of the spec as its last axis;
    leading axes index subjects (and chains).
    """
    mu = np.asarray(mu, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if eta.shape[-1:] != (spec.n_re,):
        raise InvalidInputError(f"eta must have {spec.n_re} components")
    psi = np.broadcast_to(mu, eta.shape[:-1] + (spec.n_params,)).copy()
    for d, k in enumerate(spec.re_index):
        t = spec.transforms[k]
        if t is Transform.LOGNORMAL:
            psi[..., k] = mu[k] * np.exp(eta[..., d])
        elif t is Transform.NORMAL:
            psi[..., k] = mu[k] + eta[..., d]
    return psi


# ---------------------------------------------------------------------------
# Designs and datasets
# ---------------------------------------------------------------------------

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Design:
    """Per-subject dose vectors with optional stratification labels."""

    ids: tuple
    doses: tuple
    groups: Optional[tuple] = None

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        doses = tuple(_frozen(d) for d in self.doses)
        if len(ids) != len(doses):
            raise InvalidInputError("one dose vector per subject is required")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("subject ids must be unique")
        for i, d in zip(ids, doses):
            if d.size < 1:
                raise InvalidInputError(f"subject {i} has no design points")
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise InvalidInputError(f"subject {i} has invalid doses")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "doses", doses)
        if self.groups is not None:
            groups = tuple(str(g) for g in self.groups)
            if len(groups) != len(ids):
                raise InvalidInputError("one group label per subject is required")
            object.__setattr__(self, "groups", groups)

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @cached_property
    def n_obs(self) -> np.ndarray:
        return np.array([d.size for d in self.doses], dtype=int)

    @cached_property
    def padded(self):
        """``(x, mask)`` arrays of shape ``(N, max n_i)``; padding has x=1, mask=False."""
        nmax = int(self.n_obs.max())
        x = np.ones((self.n_subjects, nmax))
        mask = np.zeros((self.n_subjects, nmax), dtype=bool)
        for i, d in enumerate(self.doses):
            x[i, : d.size] = d
            mask[i, : d.size] = True
        x.setflags(write=False)
        mask.setflags(write=False)
        return x, mask

    def same_as(self, other: "Design") -> bool:
        """Bit-identical subjects, doses and groups."""
        return (
            self.ids == other.ids
            and self.groups == other.groups
            and len(self.doses) == len(other.doses)
            and all(np.array_equal(a, b) for a, b in zip(self.doses, other.doses))
        )

    def subset(self, index, ids=None) -> "Design":
        index = list(index)
        groups = None if self.groups is None else tuple(self.groups[i] for i in index)
        return Design(ids if ids is not None else tuple(self.ids[i] for i in index),
                      tuple(self.doses[i] for i in index), groups)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations aligned with a design, plus simulation provenance."""

    design: Design
    y: tuple
    seed: Optional[int] = None
    theta: Optional[PopulationParams] = None

    def __post_init__(self):
        y = tuple(_frozen(v) for v in self.y)
        if len(y) != self.design.n_subjects:
            raise InvalidInputError("one observation vector per subject is required")
        for i, (yi, n) in enumerate(zip(y, self.design.n_obs)):
            if yi.size != n:
                raise InvalidInputError(f"subject {self.design.ids[i]}: {yi.size} observations for {n} design points")
            if not np.all(np.isfinite(yi)):
                raise InvalidInputError(f"subject {self.design.ids[i]} has missing or non-finite observations")
        object.__setattr__(self, "y", y)

    @property
    def n_subjects(self) -> int:
        return self.design.n_subjects

    @property
    def ids(self) -> tuple:
        return self.design.ids

    @cached_property
    def y_padded(self) -> np.ndarray:
        x, mask = self.design.padded
        out = np.zeros(x.shape)
        out[mask] = np.concatenate(self.y)
        out.setflags(write=False)
        return out

    def sorted_by_id(self) -> "Dataset":
        order = sorted(range(self.n_subjects), key=lambda i: self.ids[i])
        if order == list(range(self.n_subjects)):
            return self
        return Dataset(self.design.subset(order), tuple(self.y[i] for i in order), self.seed, self.theta)

    def subset(self, index, ids=None) -> "Dataset":
        index = list(index)
        return Dataset(self.design.subset(index, ids), tuple(self.y[i] for i in index))


def simulate_observations(spec: ModelSpec, mu, sigma, eta, design: Design, eps) -> tuple:
    """Assemble ``y = f(x, psi(mu, eta)) + g * eps`` per subject (padded eps)."""
    x, mask = design.padded
    psi = transform_psi(spec, mu, eta)
    f = spec.structural(psi, x)
    g = _error_sd(spec.error_model, np.asarray(sigma, dtype=float), f)
    y = f + g * eps
    return tuple(y[i, mask[i]] for i in range(design.n_subjects))


def draw_random_effects(omega, n, rng) -> np.ndarray:
    """``n`` draws from ``N(0, omega)`` through the symmetric square root."""
    omega = np.asarray(omega, dtype=float)
    z = rng.standard_normal((n, omega.shape[0]))
    return z @ _sqrt_psd(omega)


def simulate_dataset(spec: ModelSpec, theta: PopulationParams, design: Design, seed: int) -> Dataset:
    """Simulate one dataset from ``theta``; identical seeds give identical datasets."""
    theta.validate(spec)
    rng = stream(seed, "simulate")
    eta = draw_random_effects(theta.omega, design.n_subjects, rng)
    x, _ = design.padded
    eps = rng.standard_normal(x.shape)
    y = simulate_observations(spec, theta.mu, theta.sigma, eta, design, eps)
    return Dataset(design, y, seed=seed, theta=theta)


# ---------------------------------------------------------------------------
# CSV format: header id,x,y[,group]; one row per observation
# ---------------------------------------------------------------------------

def _fmt(v: float, digits: int) -> str:
    return f"{v:.{digits}g}"


def dataset_to_csv(dataset: Dataset, digits: int = 6) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    groups = dataset.design.groups
    w.writerow(["id", "x", "y"] + (["group"] if groups is not None else []))
    for i, sid in enumerate(dataset.ids):
        for xv, yv in zip(dataset.design.doses[i], dataset.y[i]):
            row = [sid, _fmt(xv, digits), _fmt(yv, digits)]
            if groups is not None:
                row.append(groups[i])
            w.writerow(row)
    return buf.getvalue()


def write_dataset_csv(dataset: Dataset, path, digits: int = 6) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(dataset, digits))


def dataset_from_csv(text: str) -> Dataset:
    """Parse the dataset CSV format; rows of a subject need not be contiguous."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InvalidInputError("empty dataset file") from None
    if header[:3] != ["id", "x", "y"] or len(header) not in (3, 4) or (len(header) == 4 and header[3] != "group"):
        raise InvalidInputError(f"row 1: expected header id,x,y[,group], got {','.join(header)}")
    has_group = len(header) == 4
    order, xs, ys, groups = [], {}, {}, {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InvalidInputError(f"row {lineno}: expected {len(header)} columns, got {len(row)}")
        sid = row[0].strip()
        vals = []
        for col, cell in zip(("x", "y"), row[1:3]):
            try:
                v = float(cell)
            except ValueError:
                raise InvalidInputError(f"row {lineno}, column {col}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise InvalidInputError(f"row {lineno}, column {col}: value must be finite")
            vals.append(v)
        if vals[0] < 0:
            raise InvalidInputError(f"row {lineno}, column x: dose must be non-negative")
        if sid not in xs:
            order.append(sid)
            xs[sid], ys[sid] = [], []
            if has_group:
                groups[sid] = row[3].strip()
        elif has_group and groups[sid] != row[3].strip():
            raise InvalidInputError(f"row {lineno}, column group: subject {sid} changes group")
        xs[sid].append(vals[0])
        ys[sid].append(vals[1])
    if not order:
        raise InvalidInputError("dataset has no observations")
    design = Design(tuple(order), tuple(xs[s] for s in order),
                    tuple(groups[s] for s in order) if has_group else None)
    return Dataset(design, tuple(ys[s] for s in order))


def read_dataset_csv(path) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        return dataset_from_csv(fh.read())


def design_from_groups(group_doses: Sequence, group_sizes: Sequence, labels: Optional[Sequence] = None) -> Design:
    """Build a design from per-group dose vectors and group sizes; ids are 1..N."""
    doses, groups = [], []
    for g, (d, n) in enumerate(zip(group_doses, group_sizes)):
        doses += [tuple(d)] * int(n)
        groups += [str(labels[g]) if labels is not None else str(g + 1)] * int(n)
    return Design(tuple(str(i + 1) for i in range(len(doses))), tuple(doses), tuple(groups))

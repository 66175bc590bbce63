"""Monte Carlo coverage and bias study.

A :class:`ScenarioSpec` names a model, a true parameter vector, a design and
the uncertainty methods to compare.  :func:`run_study` simulates ``K``
datasets, fits each one, builds asymptotic and bootstrap intervals and folds
the replicate records into a :class:`CoverageReport`.

Replicate ``k`` only depends on ``(master_seed, k)``; records are written to
disk as they complete so an interrupted study resumes where it stopped.
"""
from __future__ import annotations

import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .bootstrap import BootstrapConfig, Scheme, percentile_ci, run_bootstrap, summarize_run
from .errors import EstimationError, InvalidConfigError, InvalidInputError, SamplerError
from .fim import asymptotic_ci
from .model import Design, ModelSpec, PopulationParams, design_from_groups, sig_emax_spec, simulate_dataset
from .rng import child_seed
from .saem import SaemSettings, fit_saem, sample_conditional

METHODS = ("Asymptotic", "Case", "Par", "NP", "CNP")
TABLE1_OMEGA = ((0.09, 0.0, 0.0), (0.0, 0.49, 0.245), (0.0, 0.245, 0.49))
DOSE_SET = (0, 100, 300, 500, 750, 1000)
RICH_GROUPS = (((0, 100, 300, 1000), 100),)
SPARSE_GROUPS = (((0, 1000), 50), ((100, 1000), 50), ((0, 300), 50), ((100, 300), 50))
# Five groups of 20 with 2..6 doses; the last group always gets the full set.
UNBALANCED_GROUPS = {
    "unb_low": (((0, 100), 20), ((0, 100, 300), 20), ((0, 100, 300, 500), 20),
                ((0, 100, 300, 500, 750), 20), (DOSE_SET, 20)),
    "unb_high": (((750, 1000), 20), ((500, 750, 1000), 20), ((300, 500, 750, 1000), 20),
                 ((100, 300, 500, 750, 1000), 20), (DOSE_SET, 20)),
    "unb_mix": (((0, 1000), 20), ((0, 300, 1000), 20), ((0, 100, 500, 1000), 20),
                ((0, 100, 300, 750, 1000), 20), (DOSE_SET, 20)),
    "unb_sparserich": (((0, 1000), 20), ((100, 1000), 20), ((0, 300), 20), ((100, 300), 20), (DOSE_SET, 20)),
}
DESK_PROFILE = {"K": 20, "B": 50}
LONG_RUN_PROFILE = {"K": 200, "B": 200}


def _to_json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _from_json_float(v):
    return math.nan if v is None else float(v)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """One simulation scenario.

    ``design_groups`` is a sequence of ``(doses, size)`` pairs; the design has
    one group label per pair.  ``stratify_case`` resamples subjects within
    those groups in the Case bootstrap.
    """

    name: str
    gamma: float
    design_groups: tuple
    sigma: float = 0.1
    K: int = DESK_PROFILE["K"]
    B: int = DESK_PROFILE["B"]
    methods: tuple = METHODS
    alphas: tuple = (0.1, 0.05)
    M: int = 100
    stratify_case: bool = False
    mu: tuple = (5.0, 30.0, 500.0)
    omega: tuple = TABLE1_OMEGA

    def __post_init__(self):
        groups = tuple((tuple(float(d) for d in doses), int(n)) for doses, n in self.design_groups)
        object.__setattr__(self, "design_groups", groups)
        object.__setattr__(self, "methods", tuple(_method_name(m) for m in self.methods))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        object.__setattr__(self, "omega", tuple(tuple(float(v) for v in row) for row in self.omega))
        if int(self.K) < 1 or int(self.B) < 1:
            raise InvalidConfigError("K and B must be >= 1")
        if not self.gamma > 0:
            raise InvalidConfigError("gamma must be positive")
        if self.sigma < 0:
            raise InvalidConfigError("sigma must be non-negative")
        if not groups or any(n < 1 for _, n in groups):
            raise InvalidConfigError("every design group needs at least one subject")
        if not self.methods:
            raise InvalidConfigError("at least one method is required")
        if any(not 0 < a < 1 for a in self.alphas):
            raise InvalidConfigError("alpha levels must lie in (0, 1)")
        self.theta_true.validate(self.spec)

    @property
    def spec(self) -> ModelSpec:
        return sig_emax_spec()

    @property
    def theta_true(self) -> PopulationParams:
        return PopulationParams(list(self.mu) + [self.gamma], np.array(self.omega), [self.sigma])

    @property
    def design(self) -> Design:
        return design_from_groups([d for d, _ in self.design_groups], [n for _, n in self.design_groups])

    @property
    def n_subjects(self) -> int:
        return sum(n for _, n in self.design_groups)

    @property
    def model(self) -> str:
        return "emax" if self.gamma == 1 else ("hill" if self.gamma == 3 else f"gamma={self.gamma:g}")

    def bootstrap_methods(self) -> tuple:
        return tuple(m for m in self.methods if m != "Asymptotic")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "gamma": self.gamma, "sigma": self.sigma, "K": int(self.K), "B": int(self.B),
            "M": int(self.M), "methods": list(self.methods), "alpha": list(self.alphas),
            "stratify_case": bool(self.stratify_case), "mu": list(self.mu),
            "omega": [list(r) for r in self.omega],
            "design": [{"doses": list(d), "size": n} for d, n in self.design_groups],
        }


def _method_name(m) -> str:
    for name in METHODS:
        if str(m).lower() == name.lower():
            return name
    raise InvalidConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")


def _preset_table() -> dict:
    table = {}
    for model, gamma in (("emax", 1.0), ("hill", 3.0)):
        for sig_tag, sigma in (("", 0.1), ("_sigma03", 0.3), ("_sigma05", 0.5)):
            table[f"rich_{model}{sig_tag}"] = dict(gamma=gamma, sigma=sigma, design_groups=RICH_GROUPS)
            table[f"sparse_{model}{sig_tag}"] = dict(gamma=gamma, sigma=sigma, design_groups=SPARSE_GROUPS,
                                                     stratify_case=True)
        for unb, groups in UNBALANCED_GROUPS.items():
            table[f"{unb}_{model}"] = dict(gamma=gamma, design_groups=groups)
    return table


PRESETS = _preset_table()


def scenario_names() -> tuple:
    return tuple(sorted(PRESETS))


def scenario_preset(name: str, **overrides) -> ScenarioSpec:
    """Build a catalogued scenario, optionally overriding any field."""
    if name not in PRESETS:
        raise InvalidInputError(f"unknown scenario {name!r}; available: {', '.join(scenario_names())}")
    kw = dict(PRESETS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioSpec(name=kw.pop("name", name), **kw)


def scenario_from_toml(text: str) -> ScenarioSpec:
    """Parse a scenario file.

    Either ``preset = "<name>"`` plus overrides, or a full description::

        name = "my_design"
        gamma = 3
        sigma = 0.1
        K = 20
        B = 50
        methods = ["Asymptotic", "Case", "CNP"]
        alpha = [0.1, 0.05]

        [[group]]
        doses = [0, 100, 300, 1000]
        size = 100
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidInputError(f"scenario file is not valid TOML: {exc}") from None
    kw = {}
    for key, target in (("name", "name"), ("gamma", "gamma"), ("sigma", "sigma"), ("K", "K"), ("B", "B"),
                        ("M", "M"), ("methods", "methods"), ("alpha", "alphas"),
                        ("stratify_case", "stratify_case"), ("mu", "mu"), ("omega", "omega")):
        if key in raw:
            kw[target] = raw[key]
    if "model" in raw:
        kw.setdefault("gamma", {"emax": 1.0, "hill": 3.0}.get(str(raw["model"]).lower()))
        if kw["gamma"] is None:
            raise InvalidInputError("model must be 'emax' or 'hill'")
    if "group" in raw:
        kw["design_groups"] = tuple((g["doses"], g["size"]) for g in raw["group"])
    unknown = set(raw) - {"preset", "name", "model", "gamma", "sigma", "K", "B", "M", "methods", "alpha",
                          "stratify_case", "mu", "omega", "group"}
    if unknown:
        raise InvalidInputError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        if "preset" in raw:
            return scenario_preset(raw["preset"], **kw)
        missing = {"name", "gamma", "design_groups"} - set(kw)
        if missing:
            raise InvalidInputError(f"scenario file lacks {sorted(missing)} (or a preset)")
        return ScenarioSpec(**kw)
    except (TypeError, KeyError) as exc:
        raise InvalidInputError(f"malformed scenario: {exc}") from None


def load_scenario(name_or_path) -> ScenarioSpec:
    """A preset name or the path of a TOML scenario file."""
    p = Path(str(name_or_path))
    if p.suffix == ".toml" or p.exists():
        try:
            return scenario_from_toml(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise InvalidInputError(f"cannot read scenario file {p}: {exc}") from None
    return scenario_preset(str(name_or_path))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def coverage_rate(intervals, theta_0) -> float:
    """Share of available intervals ``[lo, hi]`` that contain ``theta_0``.

    Intervals with a NaN bound are not counted.  Returns NaN when none is
    available.
    """
    ci = np.asarray(intervals, dtype=float).reshape(-1, 2)
    ok = np.all(np.isfinite(ci), axis=1)
    if not ok.any():
        return math.nan
    ci = ci[ok]
    return float(np.mean((ci[:, 0] <= theta_0) & (theta_0 <= ci[:, 1])))


def mc_se(expected_coverage: float, K: int) -> float:
    """Monte Carlo SE of a coverage proportion, ``sqrt(p (1 - p) / K)``."""
    p = float(expected_coverage)
    if not 0 <= p <= 1 or K < 1:
        raise InvalidInputError("need 0 <= p <= 1 and K >= 1")
    return math.sqrt(p * (1 - p) / K)


def relative_bias_params(estimates, theta_0) -> float:
    """Mean of ``(estimate - theta_0) / theta_0`` in percent; NaN if ``theta_0 = 0``."""
    v = np.asarray(estimates, dtype=float)
    v = v[np.isfinite(v)]
    if theta_0 == 0 or v.size == 0:
        return math.nan
    return float(np.mean((v - theta_0) / theta_0) * 100)


def empirical_se(estimates, theta_0) -> float:
    """``sqrt(sum (estimate - theta_0)^2 / (K - 1))``: spread about the truth, not the mean."""
    v = np.asarray(estimates, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 2:
        return math.nan
    return float(math.sqrt(np.sum((v - theta_0) ** 2) / (v.size - 1)))


def relative_bias_se(ses, se_emp) -> float:
    """Mean of ``(SE - SE_emp) / SE_emp`` in percent; NaN if ``SE_emp`` is zero."""
    v = np.asarray(ses, dtype=float)
    v = v[np.isfinite(v)]
    if not se_emp > 0 or v.size == 0:
        return math.nan
    return float(np.mean((v - se_emp) / se_emp) * 100)


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------

def replicate_seeds(master_seed: int, k: int) -> dict:
    """Seeds of every random step of replicate ``k``."""
    return {step: child_seed(master_seed, "replicate", k, step)
            for step in ("data", "saem", "conditional", "Case", "Par", "NP", "CNP")}


def _method_record(estimate, se, alphas, ci_fn, n_success=None, n_failed=0) -> dict:
    rec = {
        "estimate": [_to_json_float(v) for v in estimate],
        "se": [_to_json_float(v) for v in se],
        "ci": {repr(a): [[_to_json_float(lo), _to_json_float(hi)] for lo, hi in ci_fn(a)] for a in alphas},
    }
    if n_success is not None:
        rec["n_success"] = int(n_success)
        rec["n_failed"] = int(n_failed)
    return rec


def run_replicate(scenario: ScenarioSpec, k: int, seed: int, fit_settings: Optional[SaemSettings] = None) -> dict:
    """Simulate, fit and compute every configured interval for replicate ``k``.

    Returns a JSON-ready record.  A failed fit gives ``status`` starting with
    ``"failed"`` and no method results; a failed bootstrap or sampler only
    removes the affected methods.
    """
    seeds = replicate_seeds(seed, k)
    spec, truth = scenario.spec, scenario.theta_true
    base = fit_settings if fit_settings is not None else SaemSettings()
    settings = replace(base, seed=seeds["saem"])
    ds = simulate_dataset(spec, truth, scenario.design, seed=seeds["data"])
    rec = {"k": int(k), "seed": int(seed), "status": "ok", "methods": {}, "notes": []}
    try:
        est = fit_saem(spec, ds, truth, settings, compute_se="Asymptotic" in scenario.methods)
    except (EstimationError, SamplerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        rec["status"] = f"failed: {type(exc).__name__}"
        return rec
    rec["theta_hat"] = [_to_json_float(v) for v in est.vector]
    if "Asymptotic" in scenario.methods:
        se = est.se
        rec["methods"]["Asymptotic"] = _method_record(est.vector, se, scenario.alphas,
                                                      lambda a: asymptotic_ci((est.vector, se), a))
    conditional = None
    if any(m in scenario.methods for m in ("NP", "CNP")):
        try:
            conditional = sample_conditional(spec, ds, est.theta_hat, scenario.M, settings.mh,
                                             seed=seeds["conditional"])
        except (SamplerError, FloatingPointError) as exc:
            rec["notes"].append(f"conditional sampling failed: {type(exc).__name__}")
    for method in scenario.bootstrap_methods():
        if method in ("NP", "CNP") and conditional is None:
            continue
        cfg = BootstrapConfig(Scheme.parse(method), scenario.B, M=scenario.M, seed=seeds[method],
                              stratify_by="group" if (method == "Case" and scenario.stratify_case) else None)
        run = run_bootstrap(spec, ds, est, conditional, cfg, settings)
        summ = summarize_run(run)
        names = spec.theta_names
        values = run.estimates[run.ok]
        rec["methods"][method] = _method_record(
            [summ[n]["mean"] for n in names], [summ[n]["se"] for n in names], scenario.alphas,
            lambda a: [percentile_ci(values[:, j], a) for j in range(len(names))],
            run.n_success, run.n_failed)
        if run.unreliable:
            rec["notes"].append(f"{method}: more than half of the refits failed")
    return rec


# ---------------------------------------------------------------------------
# Study driver and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoverageReport:
    """Aggregated coverage and bias of one scenario.

    ``coverage`` rows are ``(scenario, method, parameter, alpha, coverage,
    mc_se, K_available)``; ``bias`` rows are ``(scenario, method, parameter,
    rb_param_pct, rb_se_pct, se_empirical)``.
    """

    scenario: ScenarioSpec
    seed: int
    records: tuple
    coverage: tuple
    bias: tuple
    n_failed: int
    flagged: bool
    notes: tuple = field(default_factory=tuple)

    @property
    def K(self) -> int:
        return len(self.records)

    def coverage_of(self, method: str, parameter: str, alpha: float) -> float:
        for row in self.coverage:
            if row[1] == method and row[2] == parameter and row[3] == alpha:
                return row[4]
        raise KeyError((method, parameter, alpha))

    def bias_of(self, method: str, parameter: str) -> tuple:
        for row in self.bias:
            if row[1] == method and row[2] == parameter:
                return row[3:]
        raise KeyError((method, parameter))


def aggregate(scenario: ScenarioSpec, records: Sequence[dict], seed: int) -> CoverageReport:
    """Fold replicate records into coverage and bias tables."""
    records = sorted(records, key=lambda r: r["k"])
    names = scenario.spec.theta_names
    truth = scenario.theta_true.to_vector(scenario.spec)
    ok = [r for r in records if r["status"] == "ok"]
    theta_hats = np.array([[_from_json_float(v) for v in r["theta_hat"]] for r in ok]).reshape(len(ok), len(names))
    cov_rows, bias_rows = [], []
    for method in scenario.methods:
        avail = [r["methods"][method] for r in ok if method in r["methods"]]
        for j, name in enumerate(names):
            for a in scenario.alphas:
                cis = np.array([[_from_json_float(v) for v in m["ci"][repr(a)][j]] for m in avail]).reshape(-1, 2)
                k_av = int(np.all(np.isfinite(cis), axis=1).sum())
                cov = coverage_rate(cis, truth[j]) if k_av else math.nan
                cov_rows.append((scenario.name, method, name, a, cov,
                                 mc_se(cov, k_av) if k_av else math.nan, k_av))
            se_emp = empirical_se(theta_hats[:, j], truth[j]) if len(ok) else math.nan
            est = [_from_json_float(m["estimate"][j]) for m in avail]
            ses = [_from_json_float(m["se"][j]) for m in avail]
            bias_rows.append((scenario.name, method, name, relative_bias_params(est, truth[j]),
                              relative_bias_se(ses, se_emp), se_emp))
    n_failed = len(records) - len(ok)
    notes = tuple(f"k={r['k']}: {n}" for r in records for n in r.get("notes", []))
    return CoverageReport(scenario, int(seed), tuple(records), tuple(cov_rows), tuple(bias_rows), n_failed,
                          n_failed > 0.2 * max(len(records), 1), notes)


def _fingerprint(scenario: ScenarioSpec, seed: int, fit_settings: Optional[SaemSettings]) -> dict:
    return {"scenario": scenario.to_dict(), "seed": int(seed),
            "fit_settings": (fit_settings or SaemSettings()).to_dict()}


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _replicate_path(store: Path, k: int) -> Path:
    return store / f"replicate_{k:04d}.json"


@dataclass(frozen=True, eq=False)
class _ReplicateJob:
    scenario: ScenarioSpec
    seed: int
    fit_settings: Optional[SaemSettings]
    store: Optional[Path]

    def __call__(self, k: int) -> dict:
        rec = run_replicate(self.scenario, k, self.seed, self.fit_settings)
        if self.store is not None:
            atomic_write_text(_replicate_path(self.store, k), json.dumps(rec, sort_keys=True))
        return rec


def run_study(scenario: ScenarioSpec, master_seed: int = 0, parallelism: int = 1,
              out_dir=None, fit_settings: Optional[SaemSettings] = None, progress=None) -> CoverageReport:
    """Run ``scenario.K`` replicates and aggregate them.

    With ``out_dir`` every replicate record is stored under
    ``out_dir/<scenario>/`` as soon as it completes and existing records of
    the same configuration are reused, so an interrupted study resumes.
    Results do not depend on ``parallelism``.
    """
    store = None
    done: dict = {}
    if out_dir is not None:
        store = Path(out_dir) / scenario.name
        store.mkdir(parents=True, exist_ok=True)
        fp = _fingerprint(scenario, master_seed, fit_settings)
        meta = store / "study.json"
        if meta.exists() and json.loads(meta.read_text(encoding="utf-8")) != fp:
            # another configuration lived here; its records cannot be reused
            for old in store.glob("replicate_*.json"):
                old.unlink()
        atomic_write_text(meta, json.dumps(fp, sort_keys=True, indent=1))
        for k in range(scenario.K):
            p = _replicate_path(store, k)
            if p.exists():
                try:
                    done[k] = json.loads(p.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    p.unlink()
    todo = [k for k in range(scenario.K) if k not in done]
    job = _ReplicateJob(scenario, int(master_seed), fit_settings, store)
    if parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(todo))) as pool:
            for rec in pool.map(job, todo):
                done[rec["k"]] = rec
                if progress:
                    progress(rec)
    else:
        for k in todo:
            done[k] = job(k)
            if progress:
                progress(done[k])
    return aggregate(scenario, [done[k] for k in range(scenario.K)], master_seed)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.6g}"


COVERAGE_HEADER = ("scenario", "method", "parameter", "alpha", "coverage", "mc_se", "K_available")
BIAS_HEADER = ("scenario", "method", "parameter", "rb_param_pct", "rb_se_pct", "se_empirical")


def coverage_csv(reports: Sequence[CoverageReport]) -> str:
    lines = [",".join(COVERAGE_HEADER)]
    for rep in reports:
        lines += [",".join(_fmt(v) for v in row) for row in rep.coverage]
    return "\n".join(lines) + "\n"


def bias_csv(reports: Sequence[CoverageReport]) -> str:
    lines = [",".join(BIAS_HEADER)]
    for rep in reports:
        lines += [",".join(_fmt(v) for v in row) for row in rep.bias]
    return "\n".join(lines) + "\n"


def read_table_csv(text: str) -> list:
    """Parse a coverage or bias CSV back into dicts with numeric fields as floats."""
    lines = [l for l in text.splitlines() if l.strip()]
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        row = {}
        for key, val in zip(header, line.split(",")):
            if key in ("scenario", "method", "parameter"):
                row[key] = val
            elif key == "K_available":
                row[key] = int(val)
            else:
                row[key] = float(val)
        out.append(row)
    return out

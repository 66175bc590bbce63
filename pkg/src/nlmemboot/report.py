"""Result files and static figures.

Everything the command line writes goes through here: fit results as JSON,
conditional draws as ``.npz``, bootstrap distributions as CSV, and coverage
or bias plots as hand-written SVG.  CSV floats carry 6 significant digits;
JSON keeps full precision.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .bootstrap import BootstrapRun, summarize_run
from .errors import InvalidInputError, MissingPrerequisiteError
from .model import ModelSpec, PopulationParams
from .saem import ConditionalDraws, PopulationEstimate
from .study import atomic_write_text

METHOD_COLORS = {
    "Asymptotic": "#444444",
    "Case": "#1b9e77",
    "Par": "#d95f02",
    "NP": "#7570b3",
    "CNP": "#e7298a",
}
_FALLBACK_COLORS = ("#66a61e", "#e6ab02", "#a6761d", "#1f78b4")


def _f6(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.6g}"


def _json_num(v):
    v = float(v)
    return v if math.isfinite(v) else None


# ---------------------------------------------------------------------------
# Fit results and conditional draws
# ---------------------------------------------------------------------------

def fit_to_json(estimate: PopulationEstimate, extra: Optional[dict] = None) -> str:
    """Serialise a fit: parameter names, estimates, SEs, settings and trace."""
    doc = {
        "model": estimate.spec.structural.name,
        "error_model": estimate.spec.error_model.value,
        "names": list(estimate.names),
        "theta": [_json_num(v) for v in estimate.vector],
        "se": None if estimate.se is None else [_json_num(v) for v in estimate.se],
        "seed": int(estimate.seed),
        "n_chains": int(estimate.n_chains),
        "settings": estimate.settings.to_dict(),
        "trace": [[_json_num(v) for v in row] for row in np.asarray(estimate.trace)],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def theta_from_fit_json(spec: ModelSpec, doc: dict) -> PopulationParams:
    if list(doc.get("names", [])) != list(spec.theta_names):
        raise InvalidInputError("fit file parameters do not match the model")
    return PopulationParams.from_vector(spec, [math.nan if v is None else v for v in doc["theta"]])


def save_conditional(path, draws: ConditionalDraws) -> None:
    """Store conditional draws; residual rows are NaN-padded to a common width."""
    n = np.array([r.shape[1] for r in draws.residuals], dtype=np.int64)
    res = np.full((len(n), draws.n_draws, int(n.max())), np.nan)
    for i, r in enumerate(draws.residuals):
        res[i, :, : n[i]] = r
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.npz")
    np.savez_compressed(tmp, ids=np.array(draws.ids, dtype=str), eta=draws.eta, log_density=draws.log_density,
                        acceptance=draws.acceptance, residuals=res, n_obs=n,
                        thin=np.array(draws.thin), burn_in=np.array(draws.burn_in))
    tmp.replace(path)


def load_conditional(path) -> ConditionalDraws:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(
            f"no conditional draws at {path}; rerun `nlmemboot fit` without --no-conditional")
    with np.load(path) as z:
        n = z["n_obs"]
        res = tuple(z["residuals"][i, :, : n[i]].copy() for i in range(len(n)))
        return ConditionalDraws(tuple(str(s) for s in z["ids"]), z["eta"], z["log_density"], z["acceptance"],
                                res, int(z["thin"]), int(z["burn_in"]))


# ---------------------------------------------------------------------------
# Bootstrap distributions
# ---------------------------------------------------------------------------

def bootstrap_csv(run: BootstrapRun) -> str:
    """One row per replicate: ``replicate,status,<param>...``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "status", *run.names])
    for b, (row, st) in enumerate(zip(run.estimates, run.status)):
        w.writerow([b + 1, st, *(_f6(v) for v in row)])
    return buf.getvalue()


def read_bootstrap_csv(text: str) -> tuple:
    """Inverse of :func:`bootstrap_csv`: ``(names, status, values)``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["replicate", "status"]:
        raise InvalidInputError("not a bootstrap distribution file")
    names = tuple(rows[0][2:])
    status = tuple(r[1] for r in rows[1:])
    values = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(len(status), len(names))
    return names, status, values


def bootstrap_summary_json(run: BootstrapRun) -> str:
    summ = summarize_run(run)
    doc = {
        "scheme": run.config.scheme.value,
        "config": run.config.to_dict(),
        "B": len(run.status),
        "n_success": run.n_success,
        "n_failed": run.n_failed,
        "failure_reasons": run.failure_reasons,
        "unreliable": run.unreliable,
        "parameters": {
            name: {"mean": _json_num(s["mean"]), "se": _json_num(s["se"]),
                   "ci90": [_json_num(v) for v in s["ci90"]], "ci95": [_json_num(v) for v in s["ci95"]],
                   "n_success": s["n_success"], "n_failed": s["n_failed"]}
            for name, s in summ.items()
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# SVG figures
# ---------------------------------------------------------------------------

def _color(method: str, i: int) -> str:
    return METHOD_COLORS.get(method, _FALLBACK_COLORS[i % len(_FALLBACK_COLORS)])


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    span = hi - lo
    raw = span / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks, t = [], start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _points_svg(title: str, params: Sequence[str], series: dict, y_range: tuple, bands: Sequence[float],
                y_label: str, width: int = 760, height: int = 420) -> str:
    """Generic per-parameter scatter with error bars.

    ``series`` maps method -> list of ``(value, half_width)`` per parameter.
    """
    left, right, top, bottom = 70, 150, 40, 70
    pw, ph = width - left - right, height - top - bottom
    y0, y1 = y_range

    def ys(v):
        return top + ph * (1 - (v - y0) / (y1 - y0))

    slot = pw / max(len(params), 1)
    methods = list(series)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" x2="{left}" y1="{ys(t):.2f}" y2="{ys(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{ys(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text transform="translate(18,{top + ph / 2:.1f}) rotate(-90)" text-anchor="middle">'
               f'{escape(y_label)}</text>')
    for b in bands:
        if y0 <= b <= y1:
            out.append(f'<line class="band" data-y="{b:g}" x1="{left}" x2="{left + pw}" y1="{ys(b):.2f}" '
                       f'y2="{ys(b):.2f}" stroke="#888888" stroke-dasharray="6,4"/>')
    for j, p in enumerate(params):
        cx = left + slot * (j + 0.5)
        out.append(f'<text x="{cx:.1f}" y="{top + ph + 18}" text-anchor="middle">{escape(p)}</text>')
    # jitter: methods spread symmetrically inside each parameter slot
    spread = min(slot * 0.6, 12.0 * max(len(methods) - 1, 1))
    for i, m in enumerate(methods):
        col = _color(m, i)
        dx = 0.0 if len(methods) == 1 else -spread / 2 + spread * i / (len(methods) - 1)
        out.append(f'<g class="series" data-method="{escape(m)}" fill="{col}" stroke="{col}">')
        for j, (v, hw) in enumerate(series[m]):
            if v is None or not math.isfinite(v):
                continue
            cx = left + slot * (j + 0.5) + dx
            vc = min(max(v, y0), y1)
            if hw is not None and math.isfinite(hw) and hw > 0:
                lo, hi = max(v - hw, y0), min(v + hw, y1)
                out.append(f'<line x1="{cx:.2f}" x2="{cx:.2f}" y1="{ys(lo):.2f}" y2="{ys(hi):.2f}"/>')
            out.append(f'<circle cx="{cx:.2f}" cy="{ys(vc):.2f}" r="3.5"/>')
        out.append("</g>")
        ly = top + 14 + 18 * i
        out.append(f'<circle cx="{left + pw + 20}" cy="{ly - 4}" r="4" fill="{col}"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly}">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def coverage_bands(alpha: float) -> tuple:
    """Dashed reference lines: nominal coverage minus and plus 5 points."""
    nominal = 1 - alpha
    return (round(nominal - 0.05, 10), round(min(nominal + 0.05, 1.0), 10))


def coverage_svg(rows: Sequence[dict], scenario: str, alpha: float) -> str:
    """Coverage per parameter with MC.SE error bars, one series per method.

    ``rows`` are coverage-table dicts (see :func:`nlmemboot.study.read_table_csv`).
    """
    sel = [r for r in rows if r["scenario"] == scenario and abs(r["alpha"] - alpha) < 1e-12]
    if not sel:
        raise InvalidInputError(f"no coverage rows for scenario {scenario!r} at alpha={alpha:g}")
    params = list(dict.fromkeys(r["parameter"] for r in sel))
    methods = list(dict.fromkeys(r["method"] for r in sel))
    series = {m: [] for m in methods}
    for m in methods:
        for p in params:
            r = next((r for r in sel if r["method"] == m and r["parameter"] == p), None)
            series[m].append((r["coverage"], r["mc_se"]) if r else (math.nan, math.nan))
    vals = [v - (e if math.isfinite(e) else 0) for s in series.values() for v, e in s if math.isfinite(v)]
    y0 = min([0.5] + vals)
    y0 = math.floor(y0 * 10) / 10
    title = f"{scenario}: coverage of {100 * (1 - alpha):g}% CI"
    return _points_svg(title, params, series, (y0, 1.0), coverage_bands(alpha), "coverage")


def bias_svg(rows: Sequence[dict], scenario: str, column: str = "rb_param_pct") -> str:
    """Relative bias (percent) per parameter, dashed lines at -10% and +10%."""
    sel = [r for r in rows if r["scenario"] == scenario]
    if not sel:
        raise InvalidInputError(f"no bias rows for scenario {scenario!r}")
    params = list(dict.fromkeys(r["parameter"] for r in sel))
    methods = list(dict.fromkeys(r["method"] for r in sel))
    series = {m: [] for m in methods}
    for m in methods:
        for p in params:
            r = next((r for r in sel if r["method"] == m and r["parameter"] == p), None)
            series[m].append((r[column], None) if r else (math.nan, None))
    vals = [abs(v) for s in series.values() for v, _ in s if math.isfinite(v)]
    lim = max([20.0] + vals) * 1.1
    what = "parameters" if column == "rb_param_pct" else "standard errors"
    return _points_svg(f"{scenario}: relative bias of {what}", params, series, (-lim, lim), (-10.0, 10.0),
                       "relative bias (%)")


def write_study_figures(out_dir, coverage_rows: Sequence[dict], bias_rows: Sequence[dict]) -> list:
    """Write coverage plots per scenario and alpha, and bias plots per scenario."""
    out_dir = Path(out_dir)
    written = []
    for sc in dict.fromkeys(r["scenario"] for r in coverage_rows):
        for a in dict.fromkeys(r["alpha"] for r in coverage_rows if r["scenario"] == sc):
            p = out_dir / f"coverage_{sc}_alpha{a:g}.svg"
            atomic_write_text(p, coverage_svg(coverage_rows, sc, a))
            written.append(p)
    for sc in dict.fromkeys(r["scenario"] for r in bias_rows):
        for col, tag in (("rb_param_pct", "params"), ("rb_se_pct", "se")):
            p = out_dir / f"bias_{sc}_{tag}.svg"
            atomic_write_text(p, bias_svg(bias_rows, sc, col))
            written.append(p)
    return written

"""Empirical weak-order fits and convergence reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .montecarlo import WeakErrorEstimate
from .models import SdeProblem
from .schemes import SchemeKind, SchemeSpec, modify

__all__ = [
    "DegenerateFit",
    "fit_order",
    "theoretical_order",
    "default_tolerance",
    "modifier_discrepancy",
    "consistency_slope",
    "ReportPoint",
    "ConvergenceReport",
    "build_report",
    "reports_to_json",
    "summary_csv",
    "plot_data",
]


class DegenerateFit(ValueError):
    pass


def fit_order(points: Iterable[tuple[float, float]]) -> tuple[float, float, float]:
    """OLS of ``log2(error)`` on ``log2(h)``.

    Returns ``(slope, intercept, r_squared)``; the slope is the empirical order.
    """
    pts = sorted((float(h), float(e)) for h, e in points)
    if len(pts) < 3:
        raise DegenerateFit(f"need at least 3 points, got {len(pts)}")
    h = np.array([p[0] for p in pts])
    err = np.array([p[1] for p in pts])
    if not (np.all(np.isfinite(err)) and np.all(err > 0)):
        raise DegenerateFit("all errors must be positive and finite")
    if not np.all(h > 0) or np.unique(h).size != h.size:
        raise DegenerateFit("step sizes must be positive and distinct")
    x = np.log2(h)
    y = np.log2(err)
    xc = x - x.mean()
    yc = y - y.mean()
    slope = float(np.dot(xc, yc) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.dot(yc, yc))
    resid = yc - slope * xc
    r_squared = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - float(np.dot(resid, resid)) / ss_tot)
    return slope, intercept, r_squared


def theoretical_order(spec: SchemeSpec) -> Optional[float]:
    """Predicted weak order, or ``None`` for Euler-Maruyama (no guarantee)."""
    kind = spec.kind
    if kind is SchemeKind.EM:
        return None
    if kind is SchemeKind.FTE1:
        return min(spec.alpha1, spec.alpha2)
    if kind is SchemeKind.FTE2:
        return spec.vartheta
    if kind is SchemeKind.BTS:
        return 0.5
    return 1.0


def modifier_discrepancy(problem: SdeProblem, spec: SchemeSpec, x, h: float) -> float:
    """``max(|f_bar - f|, ||g_bar - g||_F)`` at a single state."""
    x = np.asarray(x, dtype=np.float64)
    mod = modify(problem, x, h, spec)
    df = float(np.linalg.norm(mod.f_bar - problem.drift(x)))
    dg = float(np.linalg.norm(mod.g_bar - problem.diffusion(x)))
    return max(df, dg)


def consistency_slope(problem: SdeProblem, spec: SchemeSpec, x, step_sizes: Sequence[float]) -> float:
    """Fitted exponent of the modifier discrepancy in ``h`` at a fixed state.

    Raises :class:`DegenerateFit` when the discrepancy vanishes (e.g. taming
    that is inactive at ``x``).
    """
    points = [(h, modifier_discrepancy(problem, spec, x, h)) for h in step_sizes]
    return fit_order(points)[0]


def default_tolerance(order: Optional[float]) -> Optional[float]:
    if order is None:
        return None
    return 0.25 if order >= 0.75 else 0.2


@dataclass
class ReportPoint:
    h: float
    weak_error: float
    ci95_halfwidth: float
    used: bool
    factor10_ok: bool
    note: str = ""


@dataclass
class ConvergenceReport:
    scheme_id: str
    phi_label: str
    points: list[ReportPoint]
    fitted_order: float
    intercept: float
    r_squared: float
    theoretical_order: Optional[float]
    tolerance: Optional[float]
    passed: Optional[bool]
    message: str = ""

    @property
    def n_used(self) -> int:
        return sum(p.used for p in self.points)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_used"] = self.n_used
        return out


def build_report(
    spec: SchemeSpec,
    phi_label: str,
    estimates: Sequence[WeakErrorEstimate],
    tolerance: Optional[float] = None,
) -> ConvergenceReport:
    """Fit the order over the usable points and compare with theory.

    A point is excluded from the fit when its trajectories exploded or its 95%
    half-width exceeds half the weak error. Points missing the stricter
    factor-10 rule are only flagged.
    """
    order = theoretical_order(spec)
    if tolerance is None:
        tolerance = default_tolerance(order)
    points = []
    for est in sorted(estimates, key=lambda e: -e.step_size):
        note = ""
        used = True
        if not est.reliable:
            used, note = False, f"{est.n_exploded} exploded"
        elif est.ci95_halfwidth > est.weak_error / 2:
            used, note = False, "noise-dominated"
        elif not est.meets_factor10:
            note = "ci95 > weak_error/10"
        points.append(ReportPoint(est.step_size, est.weak_error, est.ci95_halfwidth, used,
                                  est.meets_factor10, note))
    usable = [(p.h, p.weak_error) for p in points if p.used]
    try:
        slope, intercept, r2 = fit_order(usable)
        message = ""
    except DegenerateFit as exc:
        slope = intercept = r2 = math.nan
        message = str(exc)
    if order is None:
        passed = None
    else:
        passed = bool(math.isfinite(slope) and abs(slope - order) <= tolerance)
    return ConvergenceReport(spec.id, phi_label, points, slope, intercept, r2, order, tolerance, passed, message)


def _clean(obj):
    # JSON has no NaN/Infinity; emit null instead.
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def reports_to_json(reports: Sequence[ConvergenceReport], header: Optional[dict] = None) -> str:
    payload = {"header": header or {}, "reports": [r.to_dict() for r in reports]}
    return json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"


def summary_csv(reports: Sequence[ConvergenceReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scheme", "phi", "fitted_order", "theoretical_order", "tolerance", "r_squared", "n_used", "passed"])
    for r in reports:
        writer.writerow([r.scheme_id, r.phi_label, repr(r.fitted_order), repr(r.theoretical_order),
                         repr(r.tolerance), repr(r.r_squared), r.n_used, r.passed])
    return buf.getvalue()


def plot_data(report: ConvergenceReport) -> str:
    """Two-column ``log2(h) log2(err)`` table for gnuplot."""
    lines = [f"# {report.scheme_id} {report.phi_label} fitted_order={report.fitted_order!r}",
             "# log2h log2err"]
    for p in report.points:
        if p.weak_error > 0 and math.isfinite(p.weak_error):
            lines.append(f"{math.log2(p.h)!r} {math.log2(p.weak_error)!r}")
    return "\n".join(lines) + "\n"

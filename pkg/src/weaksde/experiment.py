"""End-to-end weak-error experiments and the explosion probe."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import ConfigError, ExperimentConfig, resolve_phi
from .convergence import ConvergenceReport, build_report, plot_data, reports_to_json, summary_csv
from .montecarlo import (
    REFERENCE_INDEX_OFFSET,
    ReferenceValue,
    WeakErrorEstimate,
    estimate_from_sample,
    reference_from_sample,
    sample_terminal,
)
from .schemes import SchemeKind, SchemeSpec

logger = logging.getLogger(__name__)

__all__ = ["ExperimentResult", "plan", "run_experiment", "run_explosion_probe", "weak_errors_csv"]

CSV_COLUMNS = ["scheme", "phi", "h", "M", "mean_phi", "std_error", "ci95", "weak_error", "n_exploded"]


@dataclass
class ExperimentResult:
    exit_code: int
    references: dict[str, ReferenceValue]
    estimates: list[WeakErrorEstimate]
    reports: list[ConvergenceReport]
    failures: list[str] = field(default_factory=list)
    output_dir: Optional[Path] = None


def plan(config: ExperimentConfig) -> str:
    problem = config.problem()
    lines = [
        f"experiment {config.name}: model={config.model} x0={[float(v) for v in problem.initial_state]} seed={config.seed}",
        f"reference: bem h_ref={config.h_ref!r} M_ref={config.M_ref}",
        f"ladder: {[repr(h) for h in config.h_ladder]} M={config.M}",
        f"test functions: {', '.join(config.phis)}",
    ]
    for spec in config.schemes:
        lines.append(f"  scheme {spec.id}: {len(config.h_ladder)} runs")
    return "\n".join(lines)


def weak_errors_csv(estimates: list[WeakErrorEstimate]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for e in estimates:
        writer.writerow([e.scheme_id, e.phi_label, repr(e.step_size), e.n_trajectories, repr(e.mean_phi),
                         repr(e.std_error), repr(e.ci95_halfwidth), repr(e.weak_error), e.n_exploded])
    return buf.getvalue()


def _header(config: ExperimentConfig, problem, references: dict[str, ReferenceValue]) -> dict:
    header = {
        "experiment": config.name,
        "model": config.model,
        "initial_state": [float(v) for v in problem.initial_state],
        "seed": config.seed,
        "M": config.M,
        "h_ladder": config.h_ladder,
        "reference": {
            label: {"value": ref.value, "std_error": ref.std_error, "h_ref": ref.h_ref, "M_ref": ref.n_trajectories}
            for label, ref in references.items()
        },
    }
    if problem.dim_state > 1:
        header["phi_coordinate"] = "built-in test functions act on the first state coordinate"
    return header


def run_experiment(
    config: ExperimentConfig,
    threads: int = 1,
    output_dir: Optional[Path] = None,
    write: bool = True,
) -> ExperimentResult:
    """Reference run, scheme ladder, fits, and artifact files.

    Each (scheme, h) pair is simulated once and every test function is
    evaluated on the same terminal states.
    """
    config.validate()
    problem = config.problem()
    phis = [resolve_phi(label) for label in config.phis]
    common = dict(batch_size=config.batch_size, threads=threads)

    logger.info("reference run: h_ref=%g M_ref=%d", config.h_ref, config.M_ref)
    ref_sample = sample_terminal(problem, SchemeSpec(SchemeKind.BEM), config.h_ref, config.M_ref, config.seed,
                                 start=REFERENCE_INDEX_OFFSET, **common)
    references = {phi.label: reference_from_sample(ref_sample, phi) for phi in phis}
    del ref_sample

    by_pair: dict[tuple[str, str], list[WeakErrorEstimate]] = {}
    for spec in config.schemes:
        for h in config.h_ladder:
            logger.info("scheme %s h=%g", spec.id, h)
            sample = sample_terminal(problem, spec, h, config.M, config.seed, **common)
            for phi in phis:
                est = estimate_from_sample(sample, phi, references[phi.label], spec.id)
                by_pair.setdefault((spec.id, phi.label), []).append(est)

    estimates: list[WeakErrorEstimate] = []
    reports: list[ConvergenceReport] = []
    failures: list[str] = []
    for spec in config.schemes:
        for phi in phis:
            series = sorted(by_pair[(spec.id, phi.label)], key=lambda e: -e.step_size)
            estimates.extend(series)
            report = build_report(spec, phi.label, series, config.tolerance.get(spec.id))
            reports.append(report)
            if report.passed is False:
                failures.append(
                    f"{spec.id}/{phi.label}: fitted order {report.fitted_order:.3f} vs "
                    f"theory {report.theoretical_order} (tolerance {report.tolerance})"
                )

    result = ExperimentResult(1 if failures else 0, references, estimates, reports, failures)
    if write:
        out = Path(output_dir or config.output_dir)
        _write_outputs(out, config, problem, result)
        result.output_dir = out
    return result


def _write_outputs(out: Path, config: ExperimentConfig, problem, result: ExperimentResult) -> None:
    try:
        (out / "plotdata").mkdir(parents=True, exist_ok=True)
        (out / "weak_errors.csv").write_text(weak_errors_csv(result.estimates))
        header = _header(config, problem, result.references)
        (out / "convergence.json").write_text(reports_to_json(result.reports, header))
        (out / "summary.csv").write_text(summary_csv(result.reports))
        for report in result.reports:
            (out / "plotdata" / f"{report.scheme_id}_{report.phi_label}.dat").write_text(plot_data(report))
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc


def run_explosion_probe(
    config: ExperimentConfig,
    threads: int = 1,
    output_dir: Optional[Path] = None,
    write: bool = True,
) -> dict:
    """Fraction of exploded trajectories per scheme at ``config.probe_h``."""
    config.validate(require_reference=False)
    problem = config.problem()
    schemes = {}
    for spec in config.schemes:
        sample = sample_terminal(problem, spec, config.probe_h, config.M, config.seed,
                                 batch_size=config.batch_size, threads=threads)
        schemes[spec.id] = {
            "n_trajectories": sample.n_trajectories,
            "n_exploded": sample.n_exploded,
            "explosion_fraction": sample.n_exploded / sample.n_trajectories,
            "max_newton_iterations": int(sample.max_newton_iter.max()),
        }
    report = {
        "experiment": config.name,
        "model": config.model,
        "initial_state": [float(v) for v in problem.initial_state],
        "h": config.probe_h,
        "seed": config.seed,
        "schemes": schemes,
    }
    if write:
        out = Path(output_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "explosion.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report

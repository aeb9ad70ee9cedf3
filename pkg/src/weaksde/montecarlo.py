"""Monte Carlo estimation of weak errors.

Trajectories are simulated in fixed batches of consecutive indices. The batch
layout depends only on ``batch_size``, never on the number of worker threads,
and per-trajectory results are concatenated in index order before any
reduction, so every statistic is bitwise reproducible.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .models import SdeProblem, TestFunction
from .rng import StreamBatch
from .schemes import SchemeKind, SchemeSpec, simulate_batch

logger = logging.getLogger(__name__)

__all__ = [
    "REFERENCE_INDEX_OFFSET",
    "DEFAULT_BATCH_SIZE",
    "ReferenceUnreliable",
    "TerminalSample",
    "ReferenceValue",
    "WeakErrorEstimate",
    "steps_for",
    "sample_terminal",
    "reference_from_sample",
    "estimate_from_sample",
    "compute_reference",
    "estimate_weak_error",
]

REFERENCE_INDEX_OFFSET = 2**63
DEFAULT_BATCH_SIZE = 1024
Z95 = 1.96


class ReferenceUnreliable(RuntimeError):
    """A reference run lost trajectories to explosion."""


def steps_for(horizon: float, h: float) -> int:
    """Number of uniform steps of size ``h`` on ``[0, horizon]``; ``h`` must divide it."""
    if h <= 0:
        raise ValueError("step size must be positive")
    n = round(horizon / h)
    if n < 1 or not math.isclose(n * h, horizon, rel_tol=1e-12, abs_tol=0.0):
        raise ValueError(f"step size {h} does not divide the horizon {horizon}")
    return n


@dataclass
class TerminalSample:
    """Terminal states of trajectories ``start .. start+M-1`` in index order."""

    states: np.ndarray
    exploded: np.ndarray
    max_newton_iter: np.ndarray
    h: float

    @property
    def n_trajectories(self) -> int:
        return self.exploded.size

    @property
    def n_exploded(self) -> int:
        return int(self.exploded.sum())


def sample_terminal(
    problem: SdeProblem,
    spec: SchemeSpec,
    h: float,
    M: int,
    master_seed: int,
    start: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    threads: int = 1,
) -> TerminalSample:
    if M < 1:
        raise ValueError("M must be a positive integer")
    n_steps = steps_for(problem.horizon, h)
    offsets = range(0, M, batch_size)

    def run(offset: int):
        streams = StreamBatch.from_range(master_seed, start + offset, min(batch_size, M - offset))
        return simulate_batch(problem, spec, n_steps, streams)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, offsets))
    else:
        results = [run(offset) for offset in offsets]
    return TerminalSample(
        states=np.concatenate([r.states for r in results]),
        exploded=np.concatenate([r.exploded for r in results]),
        max_newton_iter=np.concatenate([r.max_newton_iter for r in results]),
        h=problem.horizon / n_steps,
    )


def _mean_and_se(values: np.ndarray) -> tuple[float, float]:
    n = values.size
    if n == 0:
        return math.nan, math.nan
    mean = float(np.mean(values))
    if n == 1:
        return mean, math.inf
    return mean, float(np.std(values, ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class ReferenceValue:
    value: float
    h_ref: float
    n_trajectories: int
    std_error: float
    phi_label: str = ""


@dataclass(frozen=True)
class WeakErrorEstimate:
    scheme_id: str
    step_size: float
    n_trajectories: int
    mean_phi: float
    std_error: float
    ci95_halfwidth: float
    weak_error: float
    n_exploded: int
    phi_label: str = ""

    @property
    def reliable(self) -> bool:
        return self.n_exploded == 0 and math.isfinite(self.weak_error)

    @property
    def meets_factor10(self) -> bool:
        """Statistical error at least ten times below the weak error."""
        return self.reliable and self.ci95_halfwidth <= self.weak_error / 10.0


def reference_from_sample(sample: TerminalSample, phi: TestFunction) -> ReferenceValue:
    if sample.n_exploded:
        raise ReferenceUnreliable(
            f"{sample.n_exploded} of {sample.n_trajectories} reference trajectories exploded"
        )
    mean, se = _mean_and_se(phi(sample.states))
    return ReferenceValue(mean, sample.h, sample.n_trajectories, se, phi.label)


def estimate_from_sample(
    sample: TerminalSample, phi: TestFunction, reference: ReferenceValue, scheme_id: str
) -> WeakErrorEstimate:
    kept = sample.states[~sample.exploded]
    mean, se = _mean_and_se(phi(kept))
    if sample.n_exploded:
        weak_error = math.nan
    else:
        weak_error = abs(reference.value - mean)
    est = WeakErrorEstimate(
        scheme_id=scheme_id,
        step_size=sample.h,
        n_trajectories=sample.n_trajectories,
        mean_phi=mean,
        std_error=se,
        ci95_halfwidth=Z95 * se,
        weak_error=weak_error,
        n_exploded=sample.n_exploded,
        phi_label=phi.label,
    )
    if not est.reliable:
        logger.warning("%s h=%g %s: %d exploded trajectories, weak error unreliable",
                       scheme_id, sample.h, phi.label, sample.n_exploded)
    elif not est.meets_factor10:
        logger.warning("%s h=%g %s: 95%% half-width %.3g exceeds a tenth of the weak error %.3g",
                       scheme_id, sample.h, phi.label, est.ci95_halfwidth, weak_error)
    return est


def _check_ref_step(problem: SdeProblem, h_ref: float) -> None:
    steps_for(problem.horizon, h_ref)


def compute_reference(
    problem: SdeProblem,
    phi: TestFunction,
    h_ref: float,
    M: int,
    master_seed: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
    threads: int = 1,
) -> ReferenceValue:
    """Backward Euler Monte Carlo reference on indices offset by ``2**63``."""
    _check_ref_step(problem, h_ref)
    sample = sample_terminal(
        problem, SchemeSpec(SchemeKind.BEM), h_ref, M, master_seed,
        start=REFERENCE_INDEX_OFFSET, batch_size=batch_size, threads=threads,
    )
    return reference_from_sample(sample, phi)


def estimate_weak_error(
    problem: SdeProblem,
    spec: SchemeSpec,
    phi: TestFunction,
    h: float,
    M: int,
    master_seed: int,
    reference: ReferenceValue,
    batch_size: int = DEFAULT_BATCH_SIZE,
    threads: int = 1,
) -> WeakErrorEstimate:
    if h < 4 * reference.h_ref * (1 - 1e-12):
        raise ValueError(f"h={h} must be at least 4x the reference step {reference.h_ref}")
    sample = sample_terminal(problem, spec, h, M, master_seed, batch_size=batch_size, threads=threads)
    return estimate_from_sample(sample, phi, reference, spec.id)

"""Tamed, balanced and backward Euler schemes for SDEs with super-linear
coefficients, plus a reproducible Monte Carlo weak-error harness."""

from .models import SdeProblem, TestFunction, make_fhn_model, make_model, make_ou_model, make_quintic_model
from .rng import RngStream, StreamBatch, brownian_path, derive_stream, next_standard_normal
from .schemes import SchemeKind, SchemeSpec, simulate_trajectory, step
from .montecarlo import ReferenceValue, WeakErrorEstimate, compute_reference, estimate_weak_error
from .convergence import ConvergenceReport, fit_order, theoretical_order

__version__ = "0.1.0"

"""One-step integrators and trajectory simulation.

All steppers are pure functions of ``(problem, x, h, dW, spec)`` and accept a
single state ``x`` of shape ``(d,)`` with ``dW`` of shape ``(m,)``, or a batch
``(B, d)`` with ``(B, m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import compiled as compiled_kernels
from .models import SdeProblem
from .rng import RngStream, StreamBatch

Array = np.ndarray

__all__ = [
    "SchemeKind",
    "SchemeSpec",
    "ModifiedCoefficients",
    "NewtonDivergence",
    "PathState",
    "BatchResult",
    "EXPLOSION_THRESHOLD",
    "step_euler_maruyama",
    "modify_fte1",
    "modify_fte2",
    "modify_mes",
    "modify_dte",
    "modify_bs",
    "modify_bts",
    "modify",
    "step_modified_euler",
    "solve_backward_euler",
    "step_backward_euler",
    "step",
    "simulate_batch",
    "simulate_trajectory",
]

EXPLOSION_THRESHOLD = 1e10


class SchemeKind(str, Enum):
    EM = "em"
    FTE1 = "fte1"
    FTE2 = "fte2"
    MES = "mes"
    DTE = "dte"
    BS = "bs"
    BTS = "bts"
    BEM = "bem"


MODIFIED_KINDS = frozenset(
    {SchemeKind.FTE1, SchemeKind.FTE2, SchemeKind.MES, SchemeKind.DTE, SchemeKind.BS, SchemeKind.BTS}
)


@dataclass(frozen=True)
class SchemeSpec:
    kind: SchemeKind
    alpha1: float = 0.5
    alpha2: float = 0.5
    vartheta: float = 0.5
    newton_tol: float = 1e-6
    newton_max_iter: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        for name in ("alpha1", "alpha2", "vartheta"):
            value = getattr(self, name)
            if not 0.0 < value <= 0.5:
                raise ValueError(f"{name} must lie in (0, 1/2], got {value}")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be a positive integer")

    @classmethod
    def from_id(cls, scheme_id: str, **params) -> "SchemeSpec":
        try:
            kind = SchemeKind(scheme_id.lower())
        except ValueError:
            known = ", ".join(k.value for k in SchemeKind)
            raise ValueError(f"unknown scheme {scheme_id!r}; known: {known}") from None
        return cls(kind, **params)

    @property
    def id(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class ModifiedCoefficients:
    f_bar: Array
    g_bar: Array


class NewtonDivergence(RuntimeError):
    """Newton iteration for the implicit step failed to converge."""


def _norm(v: Array) -> Array:
    return np.sqrt(np.sum(v * v, axis=-1))


def _apply(g: Array, dW: Array) -> Array:
    return np.einsum("...ij,...j->...i", g, dW)


def _shrink(f: Array, g: Array, denom: Array) -> ModifiedCoefficients:
    return ModifiedCoefficients(f / denom[..., None], g / denom[..., None, None])


def step_euler_maruyama(problem: SdeProblem, x: Array, h: float, dW: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    return x + problem.drift(x) * h + _apply(problem.diffusion(x), np.asarray(dW, dtype=np.float64))


# -- coefficient modifiers ---------------------------------------------------

def _fte1(f, g, h, spec):
    frob2 = np.sum(g * g, axis=(-2, -1))
    return _shrink(f, g, 1.0 + h**spec.alpha1 * _norm(f) + h**spec.alpha2 * frob2)


def _fte2(f, g, x, h, spec, r):
    return _shrink(f, g, 1.0 + h**spec.vartheta * np.sum(x * x, axis=-1) ** r)


def _mes(f, g, h):
    return _shrink(f, g, 1.0 + h * np.sum(f * f, axis=-1))


def _dte(f, g, h):
    return ModifiedCoefficients(f / (1.0 + h * _norm(f))[..., None], g)


def _bs(f, g, h):
    sqrt_h = math.sqrt(h)
    return ModifiedCoefficients(np.tanh(h * f) / h, np.tanh(sqrt_h * g) / sqrt_h)


def _bts(f, g, h, dW):
    return _shrink(f, g, 1.0 + h * _norm(f) + _norm(_apply(g, dW)))


def _modified(problem, spec, x, h, dW, f, g) -> ModifiedCoefficients:
    kind = spec.kind
    if kind is SchemeKind.FTE1:
        return _fte1(f, g, h, spec)
    if kind is SchemeKind.FTE2:
        return _fte2(f, g, x, h, spec, problem.growth_r)
    if kind is SchemeKind.MES:
        return _mes(f, g, h)
    if kind is SchemeKind.DTE:
        return _dte(f, g, h)
    if kind is SchemeKind.BS:
        return _bs(f, g, h)
    if kind is SchemeKind.BTS:
        if dW is None:
            raise ValueError("the balanced-type modifier needs the step's Brownian increment")
        return _bts(f, g, h, dW)
    raise ValueError(f"{kind.value} is not a modified Euler scheme")


def _coefficients(problem, x):
    x = np.asarray(x, dtype=np.float64)
    return x, problem.drift(x), problem.diffusion(x)


def _check_h(h: float) -> None:
    if not h > 0:
        raise ValueError("step size must be positive")


def modify_fte1(problem: SdeProblem, x, h: float, spec: SchemeSpec) -> ModifiedCoefficients:
    """Fully tamed drift and diffusion, ``D = 1 + h^a1 |f| + h^a2 ||g||_F^2``."""
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    return _fte1(f, g, h, spec)


def modify_fte2(problem: SdeProblem, x, h: float, spec: SchemeSpec) -> ModifiedCoefficients:
    """State-based taming, ``D = 1 + h^vartheta |x|^(2r)``."""
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    return _fte2(f, g, x, h, spec, problem.growth_r)


def modify_mes(problem: SdeProblem, x, h: float, spec: Optional[SchemeSpec] = None) -> ModifiedCoefficients:
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    return _mes(f, g, h)


def modify_dte(problem: SdeProblem, x, h: float, spec: Optional[SchemeSpec] = None) -> ModifiedCoefficients:
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    return _dte(f, g, h)


def modify_bs(problem: SdeProblem, x, h: float, spec: Optional[SchemeSpec] = None) -> ModifiedCoefficients:
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    return _bs(f, g, h)


def modify_bts(problem: SdeProblem, x, h: float, dW, spec: Optional[SchemeSpec] = None) -> ModifiedCoefficients:
    """Random modifier; ``dW`` must be the increment the step itself uses."""
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    return _bts(f, g, h, np.asarray(dW, dtype=np.float64))


def modify(problem: SdeProblem, x, h: float, spec: SchemeSpec, dW=None) -> ModifiedCoefficients:
    _check_h(h)
    x, f, g = _coefficients(problem, x)
    if dW is not None:
        dW = np.asarray(dW, dtype=np.float64)
    return _modified(problem, spec, x, h, dW, f, g)


def step_modified_euler(problem: SdeProblem, x, h: float, dW, spec: SchemeSpec) -> Array:
    if spec.kind not in MODIFIED_KINDS:
        raise ValueError(f"{spec.kind.value} is not a modified Euler scheme")
    dW = np.asarray(dW, dtype=np.float64)
    x, f, g = _coefficients(problem, x)
    mod = _modified(problem, spec, x, h, dW, f, g)
    return x + mod.f_bar * h + _apply(mod.g_bar, dW)


# -- backward Euler ----------------------------------------------------------

def _fd_jacobian(drift, y: Array) -> Array:
    fy = drift(y)
    d = y.shape[-1]
    jac = np.empty(y.shape + (d,))
    for i in range(d):
        delta = 1e-7 * np.maximum(1.0, np.abs(y[..., i]))
        shifted = y.copy()
        shifted[..., i] += delta
        jac[..., :, i] = (drift(shifted) - fy) / delta[..., None]
    return jac


def _linear_solve(a: Array, b: Array) -> tuple[Array, Array]:
    """Batched ``a x = b`` by LU; rows with a singular matrix come back NaN."""
    if a.shape[-1] == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            x = b / a[..., 0]
        return x, np.isfinite(x).all(axis=-1)
    try:
        x = np.linalg.solve(a, b[..., None])[..., 0]
        return x, np.ones(x.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        x = np.full_like(b, np.nan)
        ok = np.zeros(b.shape[0], dtype=bool)
        for k in range(b.shape[0]):
            try:
                x[k] = np.linalg.solve(a[k], b[k])
                ok[k] = True
            except np.linalg.LinAlgError:
                pass
        return x, ok


def solve_backward_euler(
    problem: SdeProblem, x: Array, h: float, dW: Array, spec: SchemeSpec
) -> tuple[Array, Array, Array]:
    """Newton solve of ``Y = x + h f(Y) + g(x) dW`` for a batch of states.

    Returns ``(Y, converged, iterations)``. Iteration for a row stops as soon
    as its Newton update is below ``spec.newton_tol`` in the l2 norm, so each
    row's result does not depend on the rest of the batch. The initial guess
    is the drift-free predictor ``x + g(x) dW``.
    """
    x = np.asarray(x, dtype=np.float64)
    b = x + _apply(problem.diffusion(x), dW)
    n, d = b.shape
    y = b.copy()
    iterations = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    eye = np.eye(d)
    jacobian = problem.drift_jacobian
    active = np.arange(n)
    for it in range(1, spec.newton_max_iter + 1):
        ya = y[active]
        residual = ya - h * problem.drift(ya) - b[active]
        dfdy = jacobian(ya) if jacobian is not None else _fd_jacobian(problem.drift, ya)
        delta, solvable = _linear_solve(eye - h * dfdy, residual)
        ya = ya - delta
        y[active] = ya
        iterations[active] = it
        size = _norm(delta)
        healthy = solvable & np.isfinite(size) & np.isfinite(ya).all(axis=-1)
        done = healthy & (size < spec.newton_tol)
        converged[active[done]] = True
        active = active[healthy & ~done]
        if active.size == 0:
            break
    return y, converged, iterations


def step_backward_euler(problem: SdeProblem, x, h: float, dW, spec: SchemeSpec) -> Array:
    """Drift-implicit Euler step; raises :class:`NewtonDivergence` on failure."""
    _check_h(h)
    x = np.asarray(x, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    single = x.ndim == 1
    y, ok, iterations = solve_backward_euler(problem, np.atleast_2d(x), h, np.atleast_2d(dW), spec)
    if not ok.all():
        raise NewtonDivergence(f"Newton failed after {int(iterations.max())} iterations")
    return y[0] if single else y


def step(problem: SdeProblem, spec: SchemeSpec, x, h: float, dW) -> Array:
    """Dispatch one step of any scheme."""
    if spec.kind is SchemeKind.EM:
        return step_euler_maruyama(problem, x, h, dW)
    if spec.kind is SchemeKind.BEM:
        return step_backward_euler(problem, x, h, dW, spec)
    return step_modified_euler(problem, x, h, dW, spec)


# -- trajectories ------------------------------------------------------------

@dataclass
class PathState:
    state: Array
    exploded: bool
    steps_taken: int
    max_newton_iter: int = 0


@dataclass
class BatchResult:
    states: Array  # (B, d) terminal (or last) states
    exploded: Array  # (B,) bool
    steps_taken: Array  # (B,) int
    max_newton_iter: Array  # (B,) int, zero for explicit schemes


def _advance(problem, spec, x, h, dW):
    """One step for a batch; returns ``(y, ok, newton_iterations)``."""
    if spec.kind is SchemeKind.BEM:
        return solve_backward_euler(problem, x, h, dW, spec)
    if spec.kind is SchemeKind.EM:
        y = x + problem.drift(x) * h + _apply(problem.diffusion(x), dW)
    else:
        f = problem.drift(x)
        g = problem.diffusion(x)
        mod = _modified(problem, spec, x, h, dW, f, g)
        y = x + mod.f_bar * h + _apply(mod.g_bar, dW)
    return y, np.ones(x.shape[0], dtype=bool), None


_KIND_CODES = {
    SchemeKind.EM: compiled_kernels.EM,
    SchemeKind.FTE1: compiled_kernels.FTE1,
    SchemeKind.FTE2: compiled_kernels.FTE2,
    SchemeKind.MES: compiled_kernels.MES,
    SchemeKind.DTE: compiled_kernels.DTE,
    SchemeKind.BS: compiled_kernels.BS,
    SchemeKind.BTS: compiled_kernels.BTS,
    SchemeKind.BEM: compiled_kernels.BEM,
}


def simulate_batch(
    problem: SdeProblem, spec: SchemeSpec, n_steps: int, streams: StreamBatch, block_steps: int = 256
) -> BatchResult:
    """Integrate one trajectory per stream over the uniform mesh ``h = T/n_steps``.

    A trajectory is frozen at its first non-finite or ``|Y| > 1e10`` state (or
    failed Newton solve) and flagged as exploded. Increments are drawn in blocks
    of ``block_steps`` steps for every stream, exploded or not, so the draws of
    a trajectory never depend on what happens to the others.

    Problems that carry compiled coefficient kernels (``problem.kernel``) are
    advanced by :func:`weaksde.compiled.advance_block`; all others use the
    vectorised numpy steppers above.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    h = problem.horizon / n_steps
    sqrt_h = math.sqrt(h)
    n = len(streams)
    m = problem.dim_noise
    x = np.tile(problem.initial_state, (n, 1))
    exploded = np.zeros(n, dtype=bool)
    steps_taken = np.zeros(n, dtype=np.int64)
    newton = np.zeros(n, dtype=np.int64)
    compiled = problem.kernel is not None
    if compiled:
        kernel = problem.kernel
        kind_code = _KIND_CODES[spec.kind]
        pw1 = h**spec.vartheta if spec.kind is SchemeKind.FTE2 else h**spec.alpha1
        pw2 = h**spec.alpha2
    alive = np.arange(n)
    done = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while done < n_steps:
            k = min(block_steps, n_steps - done)
            dW_block = streams.standard_normals(k * m).reshape(n, k, m) * sqrt_h
            done += k
            if compiled:
                compiled_kernels.advance_block(
                    kernel.coefficients, kernel.jacobian, kernel.params, kind_code, h, pw1, pw2,
                    float(problem.growth_r), spec.newton_tol, spec.newton_max_iter, EXPLOSION_THRESHOLD,
                    x, dW_block, exploded, steps_taken, newton,
                )
                continue
            for j in range(k):
                if alive.size == 0:
                    break
                full = alive.size == n
                xa = x if full else x[alive]
                y, ok, iters = _advance(problem, spec, xa, h, dW_block[:, j] if full else dW_block[alive, j])
                ok = ok & (_norm(y) <= EXPLOSION_THRESHOLD)
                x[alive] = y
                steps_taken[alive] += 1
                if iters is not None:
                    newton[alive] = np.maximum(newton[alive], iters)
                if not ok.all():
                    exploded[alive[~ok]] = True
                    alive = alive[ok]
    return BatchResult(x, exploded, steps_taken, newton)


def simulate_trajectory(problem: SdeProblem, spec: SchemeSpec, n_steps: int, stream: RngStream) -> PathState:
    res = simulate_batch(problem, spec, n_steps, stream)
    return PathState(res.states[0], bool(res.exploded[0]), int(res.steps_taken[0]), int(res.max_newton_iter[0]))

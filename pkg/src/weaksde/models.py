"""SDE problem definitions and the built-in model catalog.

Coefficient functions are written against a trailing-axis convention so the
same callable serves a single state of shape ``(d,)`` and a batch of states of
shape ``(B, d)``:

    drift(x)          -> (..., d)
    diffusion(x)      -> (..., d, m)
    drift_jacobian(x) -> (..., d, d)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

Array = np.ndarray
VectorField = Callable[[Array], Array]

__all__ = [
    "SdeProblem",
    "CompiledCoefficients",
    "TestFunction",
    "make_quintic_model",
    "make_fhn_model",
    "make_ou_model",
    "make_model",
    "MODELS",
    "TEST_FUNCTIONS",
    "get_test_function",
]


@dataclass(frozen=True)
class CompiledCoefficients:
    """Scalar-loop numba kernels mirroring a problem's numpy coefficients.

    ``coefficients(x, params, f, g)`` fills drift ``f`` (d,) and diffusion
    ``g`` (d, m) for one state; ``jacobian(x, params, jac)`` fills (d, d).
    Problems carrying these are simulated by the compiled stepper.
    """

    coefficients: Callable
    jacobian: Callable
    params: Array


@dataclass(frozen=True)
class SdeProblem:
    """Autonomous Ito SDE ``dX = f(X) dt + g(X) dW`` on ``[0, horizon]``.

    ``growth_r`` and ``growth_rho`` are the user-asserted polynomial growth
    exponents of drift and diffusion; FTE2 taming reads ``growth_r``.
    """

    name: str
    dim_state: int
    dim_noise: int
    drift: VectorField
    diffusion: VectorField
    initial_state: Array
    horizon: float = 1.0
    growth_r: float = 0.0
    growth_rho: float = 0.0
    drift_jacobian: Optional[VectorField] = None
    moments: Optional[Callable[[float, float], tuple[float, float]]] = field(default=None, compare=False)
    kernel: Optional[CompiledCoefficients] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dim_state and dim_noise must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.growth_r < 0 or self.growth_rho < 0:
            raise ValueError("growth exponents must be nonnegative")
        x0 = np.array(self.initial_state, dtype=np.float64).reshape(self.dim_state)
        x0.setflags(write=False)
        object.__setattr__(self, "initial_state", x0)

    def with_initial_state(self, x0) -> "SdeProblem":
        from dataclasses import replace

        return replace(self, initial_state=np.asarray(x0, dtype=np.float64))

    def exact_moments(self) -> tuple[float, float]:
        """Closed-form ``(E[X_T], E[X_T^2])`` for models that carry them."""
        if self.moments is None:
            raise ValueError(f"model {self.name!r} has no closed-form moments")
        return self.moments(float(self.initial_state[0]), self.horizon)


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # keep pytest from collecting it

    label: str
    eval: Callable[[Array], Array]

    def __call__(self, x: Array) -> Array:
        return self.eval(x)


def _first_coordinate(fn: Callable[[Array], Array]) -> Callable[[Array], Array]:
    def apply(x: Array) -> Array:
        return fn(np.asarray(x)[..., 0])

    return apply


TEST_FUNCTIONS: dict[str, TestFunction] = {
    "identity": TestFunction("identity", _first_coordinate(lambda s: s)),
    "square": TestFunction("square", _first_coordinate(lambda s: s * s)),
    "cos": TestFunction("cos", _first_coordinate(np.cos)),
    "exp_neg_sq": TestFunction("exp_neg_sq", _first_coordinate(lambda s: np.exp(-s * s))),
}


def get_test_function(label: str) -> TestFunction:
    try:
        return TEST_FUNCTIONS[label]
    except KeyError:
        raise KeyError(f"unknown test function {label!r}; known: {sorted(TEST_FUNCTIONS)}") from None


# -- quintic model -----------------------------------------------------------

def _quintic_drift(x: Array) -> Array:
    x3 = x * x * x
    return 1.0 - x3 * x * x + x3


def _quintic_diffusion(x: Array) -> Array:
    return (0.1 * x * x + 2.0)[..., None]


def _quintic_jacobian(x: Array) -> Array:
    x2 = x * x
    return (-5.0 * x2 * x2 + 3.0 * x2)[..., None]


@numba.njit(cache=True, nogil=True)
def _quintic_kernel(x, p, f, g):
    v = x[0]
    v3 = v * v * v
    f[0] = 1.0 - v3 * v * v + v3
    g[0, 0] = 0.1 * v * v + 2.0


@numba.njit(cache=True, nogil=True)
def _quintic_jacobian_kernel(x, p, jac):
    v2 = x[0] * x[0]
    jac[0, 0] = -5.0 * v2 * v2 + 3.0 * v2


def make_quintic_model(initial_state: float = 2.0, horizon: float = 1.0) -> SdeProblem:
    """Scalar model ``dX = (1 - X^5 + X^3) dt + (X^2/10 + 2) dW``."""
    return SdeProblem(
        name="quintic",
        dim_state=1,
        dim_noise=1,
        drift=_quintic_drift,
        diffusion=_quintic_diffusion,
        drift_jacobian=_quintic_jacobian,
        initial_state=np.array([initial_state], dtype=np.float64),
        horizon=horizon,
        growth_r=2.0,
        growth_rho=2.0,
        kernel=CompiledCoefficients(_quintic_kernel, _quintic_jacobian_kernel, np.zeros(0)),
    )


# -- stochastic FitzHugh-Nagumo ----------------------------------------------

def _fhn_drift(x: Array) -> Array:
    x1 = x[..., 0]
    x2 = x[..., 1]
    return np.stack([x1 - x1 * x1 * x1 - x2, x1 - x2 + 1.0], axis=-1)


def _fhn_diffusion(x: Array) -> Array:
    out = np.zeros(x.shape + (2,))
    out[..., 0, 0] = x[..., 0] + 1.0
    out[..., 1, 1] = x[..., 1] + 1.0
    return out


def _fhn_jacobian(x: Array) -> Array:
    out = np.empty(x.shape + (2,))
    out[..., 0, 0] = 1.0 - 3.0 * x[..., 0] * x[..., 0]
    out[..., 0, 1] = -1.0
    out[..., 1, 0] = 1.0
    out[..., 1, 1] = -1.0
    return out


@numba.njit(cache=True, nogil=True)
def _fhn_kernel(x, p, f, g):
    x1 = x[0]
    x2 = x[1]
    f[0] = x1 - x1 * x1 * x1 - x2
    f[1] = x1 - x2 + 1.0
    g[0, 0] = x1 + 1.0
    g[0, 1] = 0.0
    g[1, 0] = 0.0
    g[1, 1] = x2 + 1.0


@numba.njit(cache=True, nogil=True)
def _fhn_jacobian_kernel(x, p, jac):
    jac[0, 0] = 1.0 - 3.0 * x[0] * x[0]
    jac[0, 1] = -1.0
    jac[1, 0] = 1.0
    jac[1, 1] = -1.0


def make_fhn_model(initial_state=(0.0, 0.0), horizon: float = 1.0) -> SdeProblem:
    """Two-dimensional stochastic FitzHugh-Nagumo system with diagonal noise."""
    return SdeProblem(
        name="fhn",
        dim_state=2,
        dim_noise=2,
        drift=_fhn_drift,
        diffusion=_fhn_diffusion,
        drift_jacobian=_fhn_jacobian,
        initial_state=np.asarray(initial_state, dtype=np.float64),
        horizon=horizon,
        growth_r=1.0,
        growth_rho=1.0,
        kernel=CompiledCoefficients(_fhn_kernel, _fhn_jacobian_kernel, np.zeros(0)),
    )


# -- Ornstein-Uhlenbeck calibration model -------------------------------------

@numba.njit(cache=True, nogil=True)
def _ou_kernel(x, p, f, g):
    f[0] = -p[0] * x[0]
    g[0, 0] = p[1]


@numba.njit(cache=True, nogil=True)
def _ou_jacobian_kernel(x, p, jac):
    jac[0, 0] = -p[0]


def make_ou_model(rate: float = 2.0, vol: float = 1.0, x0: float = 1.0, horizon: float = 1.0) -> SdeProblem:
    """Linear model ``dX = -rate X dt + vol dW`` with closed-form moments.

    ``problem.exact_moments()`` returns ``(E[X_T], E[X_T^2])``.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if vol < 0:
        raise ValueError("vol must be nonnegative")

    def drift(x: Array) -> Array:
        return -rate * x

    def diffusion(x: Array) -> Array:
        return np.full(np.shape(x) + (1,), float(vol))

    def jacobian(x: Array) -> Array:
        return np.full(np.shape(x) + (1,), -float(rate))

    def moments(start: float, t: float) -> tuple[float, float]:
        mean = start * np.exp(-rate * t)
        var = vol**2 * (1.0 - np.exp(-2.0 * rate * t)) / (2.0 * rate)
        return float(mean), float(var + mean**2)

    return SdeProblem(
        name="ou",
        dim_state=1,
        dim_noise=1,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=jacobian,
        initial_state=np.array([x0], dtype=np.float64),
        horizon=horizon,
        growth_r=0.0,
        growth_rho=0.0,
        moments=moments,
        kernel=CompiledCoefficients(_ou_kernel, _ou_jacobian_kernel, np.array([float(rate), float(vol)])),
    )


MODELS: dict[str, Callable[..., SdeProblem]] = {
    "quintic": make_quintic_model,
    "fhn": make_fhn_model,
    "ou": make_ou_model,
}


def make_model(model_id: str, initial_state=None, **params) -> SdeProblem:
    """Build a catalog model by string id, optionally overriding ``X_0``."""
    try:
        factory = MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; known: {sorted(MODELS)}") from None
    problem = factory(**params)
    if initial_state is not None:
        problem = problem.with_initial_state(initial_state)
    return problem

"""Compiled per-trajectory stepping for models that ship numba coefficients.

The numpy path in :mod:`weaksde.schemes` works for any user problem but pays
interpreter and small-array overhead on every step. Catalog models also carry
scalar-loop coefficient kernels (see :class:`weaksde.models.CompiledCoefficients`);
for those, :func:`advance_block` runs whole blocks of steps per trajectory in
machine code with the same formulas, explosion rule and Newton stopping rule.
"""

from __future__ import annotations

import math

import numba
import numpy as np

# integer codes for the scheme kinds; kept in sync with schemes.SchemeKind
EM, FTE1, FTE2, MES, DTE, BS, BTS, BEM = range(8)


@numba.njit(cache=True, nogil=True)
def _solve_small(m, v, out):
    """Solve ``m out = v`` by Gaussian elimination with partial pivoting.

    ``m`` and ``v`` are scratch and get overwritten; returns False if singular.
    """
    d = v.shape[0]
    if d == 1:
        if m[0, 0] == 0.0 or not math.isfinite(m[0, 0]):
            return False
        out[0] = v[0] / m[0, 0]
        return True
    for c in range(d):
        piv = c
        for r in range(c + 1, d):
            if abs(m[r, c]) > abs(m[piv, c]):
                piv = r
        if m[piv, c] == 0.0 or not math.isfinite(m[piv, c]):
            return False
        if piv != c:
            for k in range(d):
                m[c, k], m[piv, k] = m[piv, k], m[c, k]
            v[c], v[piv] = v[piv], v[c]
        for r in range(c + 1, d):
            factor = m[r, c] / m[c, c]
            for k in range(c, d):
                m[r, k] -= factor * m[c, k]
            v[r] -= factor * v[c]
    for c in range(d - 1, -1, -1):
        acc = v[c]
        for k in range(c + 1, d):
            acc -= m[c, k] * out[k]
        out[c] = acc / m[c, c]
    return True


@numba.njit(cache=True, nogil=True)
def _newton(coefficients, jacobian, p, x, dw, h, tol, max_iter, f, g, jac, a, b, y, resid, delta):
    """Backward Euler solve for one state; returns (converged, iterations)."""
    d = x.shape[0]
    m = dw.shape[0]
    coefficients(x, p, f, g)
    for i in range(d):
        acc = x[i]
        for j in range(m):
            acc += g[i, j] * dw[j]
        b[i] = acc
        y[i] = acc
    for it in range(1, max_iter + 1):
        coefficients(y, p, f, g)
        jacobian(y, p, jac)
        for i in range(d):
            resid[i] = y[i] - h * f[i] - b[i]
            for k in range(d):
                a[i, k] = (1.0 if i == k else 0.0) - h * jac[i, k]
        if not _solve_small(a, resid, delta):
            return False, it
        size = 0.0
        finite = True
        for i in range(d):
            y[i] -= delta[i]
            size += delta[i] * delta[i]
            finite = finite and math.isfinite(y[i])
        size = math.sqrt(size)
        if not (finite and math.isfinite(size)):
            return False, it
        if size < tol:
            return True, it
    return False, max_iter


@numba.njit(cache=True, nogil=True)
def advance_block(coefficients, jacobian, p, kind, h, pw1, pw2, growth_r, tol, max_iter,
                  threshold, x, dw, exploded, steps_taken, newton):
    """Advance every live trajectory through ``dw.shape[1]`` steps in place.

    ``pw1``/``pw2`` are the precomputed taming powers (``h^alpha1``/``h^alpha2``
    for FTE1, ``h^vartheta`` in ``pw1`` for FTE2).
    """
    n, d = x.shape
    m = dw.shape[2]
    sqrt_h = math.sqrt(h)
    f = np.empty(d)
    g = np.empty((d, m))
    jac = np.empty((d, d))
    a = np.empty((d, d))
    b = np.empty(d)
    y = np.empty(d)
    resid = np.empty(d)
    delta = np.empty(d)
    for row in range(n):
        if exploded[row]:
            continue
        xr = x[row]
        for step in range(dw.shape[1]):
            inc = dw[row, step]
            ok = True
            if kind == BEM:
                ok, iters = _newton(coefficients, jacobian, p, xr, inc, h, tol, max_iter,
                                    f, g, jac, a, b, y, resid, delta)
                if iters > newton[row]:
                    newton[row] = iters
            else:
                coefficients(xr, p, f, g)
                fd = 1.0  # drift divisor
                gd = 1.0  # diffusion divisor
                if kind == FTE1 or kind == MES or kind == DTE or kind == BTS:
                    fn2 = 0.0
                    for i in range(d):
                        fn2 += f[i] * f[i]
                    if kind == FTE1:
                        gf2 = 0.0
                        for i in range(d):
                            for j in range(m):
                                gf2 += g[i, j] * g[i, j]
                        fd = 1.0 + pw1 * math.sqrt(fn2) + pw2 * gf2
                        gd = fd
                    elif kind == MES:
                        fd = 1.0 + h * fn2
                        gd = fd
                    elif kind == DTE:
                        fd = 1.0 + h * math.sqrt(fn2)
                    else:
                        gw2 = 0.0
                        for i in range(d):
                            acc = 0.0
                            for j in range(m):
                                acc += g[i, j] * inc[j]
                            gw2 += acc * acc
                        fd = 1.0 + h * math.sqrt(fn2) + math.sqrt(gw2)
                        gd = fd
                elif kind == FTE2:
                    xn2 = 0.0
                    for i in range(d):
                        xn2 += xr[i] * xr[i]
                    fd = 1.0 + pw1 * xn2**growth_r
                    gd = fd
                for i in range(d):
                    if kind == BS:
                        acc = xr[i] + math.tanh(h * f[i]) / h * h
                        for j in range(m):
                            acc += math.tanh(sqrt_h * g[i, j]) / sqrt_h * inc[j]
                    else:
                        acc = xr[i] + f[i] / fd * h
                        for j in range(m):
                            acc += g[i, j] / gd * inc[j]
                    y[i] = acc
            norm2 = 0.0
            for i in range(d):
                xr[i] = y[i]
                norm2 += y[i] * y[i]
            steps_taken[row] += 1
            if not (ok and math.sqrt(norm2) <= threshold):
                exploded[row] = True
                break

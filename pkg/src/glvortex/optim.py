"""Nonlinear conjugate gradient on complex sample vectors.

Complex arrays are treated as real vectors ``(Re, Im)``; gradients are packed
as ``dE/dRe + i dE/dIm`` so that ``Re vdot(g, d)`` is the directional
derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np


def rdot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.real(np.vdot(a, b)))


@dataclass
class OptResult:
    x: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    converged: bool
    evaluations: int


def quartic_minimizer(coeffs) -> float:
    """Global minimizer over ``t >= 0`` of ``sum_k a_k t^k`` (degree <= 4)."""
    a = np.asarray(coeffs, dtype=float)
    deriv = np.array([k * a[k] for k in range(len(a) - 1, 0, -1)])
    while deriv.size and deriv[0] == 0:
        deriv = deriv[1:]
    cands = [0.0]
    if deriv.size > 1:
        for r in np.roots(deriv):
            if abs(r.imag) <= 1e-10 * max(1.0, abs(r.real)) and r.real > 0:
                cands.append(float(r.real))
    vals = [np.polyval(a[::-1], t) for t in cands]
    return cands[int(np.argmin(vals))]


def nlcg(fun: Callable[[np.ndarray], Tuple[float, np.ndarray]], x0: np.ndarray, *,
         tol: float, max_iter: int = 5000,
         precond: Optional[Callable[[np.ndarray], np.ndarray]] = None,
         line_poly: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
         relative_tol: bool = True, restart_every: int = 50, c1: float = 1e-4,
         line_search: str = "armijo", callback=None) -> OptResult:
    """Polak-Ribiere (PR+) conjugate gradient with backtracking line search.

    ``tol`` bounds ``||grad||_2``; with ``relative_tol`` it is scaled by
    ``max(1, |E|)``.  ``line_poly(x, d)`` may return the exact polynomial
    coefficients of ``t -> E(x + t d)``; its minimizer is then the first
    trial step, otherwise the previous step length is reused.  Armijo
    backtracking (halving) guards every step.

    ``line_search="secant"`` instead drives the directional derivative to
    zero by secant steps.  It needs no energy differences and keeps working
    when the decrease per step is below the round-off of ``E``; it assumes
    the energy is close to quadratic along each search line.
    """
    if line_search not in ("armijo", "secant"):
        raise ValueError(f"unknown line search {line_search!r}")
    P = precond if precond is not None else (lambda g: g)
    x = np.array(x0, dtype=complex, copy=True)
    E, g = fun(x)
    nev = 1
    z = P(g)
    d = -z
    gz = rdot(g, z)
    t_prev = 1.0
    gnorm = float(np.linalg.norm(g))
    it = 0
    for it in range(1, max_iter + 1):
        thresh = tol * (max(1.0, abs(E)) if relative_tol else 1.0)
        if gnorm <= thresh:
            return OptResult(x, E, gnorm, it - 1, True, nev)
        slope = rdot(g, d)
        if slope >= 0:
            d = -z
            slope = -gz
        if line_search == "secant" and line_poly is None:
            step = _secant_step(fun, x, E, d, slope, t_prev)
            nev += step[3]
            if step[0] is None:
                return OptResult(x, E, gnorm, it, False, nev)
            t, En, gn = step[0], step[1], step[2]
            xn = x + t * d
            t_prev = t
            zn = P(gn)
            gzn = rdot(gn, zn)
            beta = max(0.0, (gzn - rdot(gn, z)) / gz) if gz > 0 else 0.0
            if it % restart_every == 0:
                beta = 0.0
            d = -zn + beta * d
            x, E, g, z, gz = xn, En, gn, zn, gzn
            gnorm = float(np.linalg.norm(g))
            if callback is not None:
                callback(it, x, E, gnorm)
            continue
        coeffs = None
        if line_poly is not None:
            coeffs = np.asarray(line_poly(x, d), dtype=float)
            t = quartic_minimizer(coeffs)
            if t <= 0:
                t = t_prev
        else:
            t = t_prev
        accepted = False
        for _ in range(60):
            xn = x + t * d
            if coeffs is not None:
                # exact change, free of the cancellation in E(x + t d) - E(x)
                change = float(sum(coeffs[k] * t**k for k in range(1, len(coeffs))))
                if change <= c1 * t * slope:
                    En, gn = fun(xn)
                    nev += 1
                    accepted = True
                    break
            else:
                En, gn = fun(xn)
                nev += 1
                if En <= E + c1 * t * slope:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            # the line search cannot make progress at this precision
            return OptResult(x, E, gnorm, it, False, nev)
        t_prev = t if line_poly is None else 1.0
        if line_poly is None:
            t_prev = min(2.0 * t, 1e6)
        zn = P(gn)
        gzn = rdot(gn, zn)
        beta = max(0.0, (gzn - rdot(gn, z)) / gz) if gz > 0 else 0.0
        if it % restart_every == 0:
            beta = 0.0
        d = -zn + beta * d
        x, E, g, z, gz = xn, En, gn, zn, gzn
        gnorm = float(np.linalg.norm(g))
        if callback is not None:
            callback(it, x, E, gnorm)
    thresh = tol * (max(1.0, abs(E)) if relative_tol else 1.0)
    return OptResult(x, E, gnorm, it, gnorm <= thresh, nev)


def _secant_step(fun, x, E, d, slope, t0, max_evals: int = 8):
    """Approximate minimizer of ``E(x + t d)`` from derivative samples.

    Returns ``(t, E(t), grad(t), evaluations)``; ``t`` is None on failure.
    The step is accepted once the slope has dropped to half its initial
    size and the energy has not grown beyond round-off.
    """
    noise = 64 * np.finfo(float).eps * max(1.0, abs(E))
    ta, sa = 0.0, slope
    t = t0 if t0 > 0 else 1.0
    best = None
    for k in range(1, max_evals + 1):
        En, gn = fun(x + t * d)
        sn = rdot(gn, d)
        if En <= E + noise and (best is None or En <= best[1]):
            best = (t, En, gn)
        if abs(sn) <= 0.5 * abs(slope) and En <= E + noise:
            return t, En, gn, k
        if sn > sa:
            t_new = ta - sa * (t - ta) / (sn - sa)
        else:
            t_new = 2.0 * t         # not convex along the line yet
        if sn < 0:
            ta, sa = t, sn
        if not np.isfinite(t_new) or t_new <= 0:
            t_new = 0.5 * t
        t = t_new
    if best is not None and best[0] > 0:
        return best + (max_evals,)
    return None, None, None, max_evals

"""Analytic lowest-Landau-level basis on the quantized cell.

Each basis function is a lattice sum of magnetically translated Gaussians
(a theta series in disguise).  With ``A0 = (-y, x)/2`` the Gaussian
``exp(-|x|^2/4)`` is annihilated by ``(d_x - iA_x) + i(d_y - iA_y)`` and so
lies in the LLL; the magnetic translations

    (t_a u)(x) = exp(-i (a ^ x) / 2) u(x + a),   a ^ x = a1 x2 - a2 x1,

commute with the covariant gradient.  On the lattice ``R Z^2`` they satisfy
``t_v t_w = exp(i v^w / 2) t_{v+w}``, i.e. a sign ``(-1)^{N(mn'-nm')}``;
the cocycle ``eta(m, n) = (-1)^{N m n}`` turns them into a genuine group
action whose invariants are exactly the quasi-periodic fields of the cell.
This construction is independent of the finite-difference eigensolver.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .fields import ComplexField, GridSpec, magnetic_periodic
from .landau import CellSpec


class SeriesConvergenceError(RuntimeError):
    pass


MAX_CELLS = 36
_TAIL = 1e-17


def default_centres(cell: CellSpec) -> np.ndarray:
    """Coherent-state centres: a diagonal row, offset off the symmetry lines."""
    R, N = cell.R, cell.N
    k = np.arange(N)
    return np.stack([(k + 0.37) * R / N - R / 2, (0.61 * k + 0.23) % N * R / N - R / 2], axis=1)


def _truncation(R: float) -> int:
    # |x + v - w| >= (K - sqrt 2) R for |m| or |n| = K and x, w in the cell
    return int(np.ceil(np.sqrt(2.0) + np.sqrt(-4.0 * np.log(_TAIL)) / R)) + 1


def periodized_coherent_state(x, y, cell: CellSpec, centre: Sequence[float]) -> np.ndarray:
    """Evaluate one LLL basis function at points inside the cell (or near it)."""
    R, N = cell.R, cell.N
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w1, w2 = float(centre[0]), float(centre[1])
    K = _truncation(R)
    out = np.zeros(np.broadcast(x, y).shape, dtype=complex)
    shell = 0.0
    for m in range(-K, K + 1):
        for n in range(-K, K + 1):
            v1, v2 = m * R, n * R
            eta = -1.0 if (N * m * n) % 2 else 1.0
            X, Y = x + v1, y + v2
            # g_w(z) = exp(i w^z/2) exp(-|z - w|^2/4), evaluated at z = x + v
            term = (eta * np.exp(-0.5j * (v1 * y - v2 * x))
                    * np.exp(0.5j * (w1 * Y - w2 * X))
                    * np.exp(-0.25 * ((X - w1) ** 2 + (Y - w2) ** 2)))
            out += term
            if max(abs(m), abs(n)) == K:
                shell = max(shell, float(np.max(np.abs(term), initial=0.0)))
    if shell > _TAIL * max(1.0, float(np.max(np.abs(out), initial=0.0))):
        raise SeriesConvergenceError(f"theta series tail {shell:.2e} not below {_TAIL}")
    return out


def evaluate_lll(x, y, cell: CellSpec, coeffs, centres: Optional[np.ndarray] = None) -> np.ndarray:
    """``sum_k c_k theta_k`` at arbitrary points of the plane.

    Points are folded into the cell first using the quasi-periodicity
    ``u(x + v) = eta(v) exp(i v^x / 2) u(x)``.
    """
    R, N = cell.R, cell.N
    centres = default_centres(cell) if centres is None else np.asarray(centres)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.floor((x + R / 2) / R)
    n = np.floor((y + R / 2) / R)
    xr, yr = x - m * R, y - n * R
    vals = np.zeros(np.broadcast(x, y).shape, dtype=complex)
    for c, w in zip(coeffs, centres):
        if c != 0:
            vals += c * periodized_coherent_state(xr, yr, cell, w)
    eta = np.where((N * m * n) % 2 == 1, -1.0, 1.0)
    v1, v2 = m * R, n * R
    return eta * np.exp(0.5j * (v1 * yr - v2 * xr)) * vals


def theta_lll_oracle(cell: CellSpec, grid: GridSpec, centres: Optional[np.ndarray] = None) -> List[ComplexField]:
    """``N`` linearly independent analytic LLL fields sampled on ``grid``."""
    if cell.N > MAX_CELLS:
        raise ValueError(f"oracle limited to N <= {MAX_CELLS}, got {cell.N}")
    if abs(grid.side_length - cell.R) > 1e-12 * cell.R:
        raise ValueError("grid side must equal the cell side R")
    centres = default_centres(cell) if centres is None else np.asarray(centres)
    X, Y = grid.mesh()
    fields = []
    for w in centres:
        vals = periodized_coherent_state(X, Y, cell, w)
        vals /= np.sqrt(grid.spacing**2 * np.sum(np.abs(vals) ** 2))
        fields.append(ComplexField(grid, vals, magnetic_periodic(cell.N)))
    B = np.stack([f.values.ravel() for f in fields], axis=1)
    sv = np.linalg.svd(B, compute_uv=False)
    if sv[-1] < 1e-8 * sv[0]:
        raise SeriesConvergenceError("oracle fields are numerically dependent; move the centres")
    return fields


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles between the column spans of ``A`` and ``B``."""
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.conj().T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))

"""Reduced Ginzburg-Landau functional on a square cell and the Abrikosov problem.

    G_b(u) = int b |(grad - i A0) u|^2 - |u|^2 + |u|^4 / 2

minimized with Dirichlet data (``m0``) or magnetic-periodic data (``m_p``),
and ``F_R(v) = int |v|^4 / 2 - |v|^2`` minimized over the lowest Landau level
(``c(R)``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import (DIRICHLET, ComplexField, GaugeLinks, GridMismatchError, GridSpec,
                     canonical_potential, covariant_laplacian, make_links, magnetic_periodic)
from .landau import CellSpec, SpectralResult, landau_spectrum
from .optim import nlcg, quartic_minimizer

CELL_TOL = 1e-8
RESTART_BUDGET = 8


class ConvergenceError(RuntimeError):
    pass


@dataclass
class ReducedEnergyBreakdown:
    kinetic: float
    quadratic: float
    quartic: float

    @property
    def total(self) -> float:
        return self.kinetic + self.quadratic + self.quartic


class QuarticFunctional:
    """``h^2 [ k <u, K u> - c2 sum |u|^2 + c4/2 sum |u|^4 ]`` for a fixed matrix ``K``.

    Gradients are packed complex (see :mod:`glvortex.optim`); the energy along
    a search line is an exact quartic whose coefficients ``line_poly`` returns.
    """

    def __init__(self, K, h2: float, kinetic: float = 1.0, c2: float = 1.0, c4: float = 1.0):
        self.K = K
        self.h2 = float(h2)
        self.k = float(kinetic)
        self.c2 = float(c2)
        self.c4 = float(c4)

    def _flat(self, u):
        return np.asarray(u, dtype=complex).ravel()

    def breakdown(self, u) -> ReducedEnergyBreakdown:
        u = self._flat(u)
        a2 = np.abs(u) ** 2
        kin = self.k * self.h2 * float(np.real(np.vdot(u, self.K @ u)))
        return ReducedEnergyBreakdown(kin, -self.c2 * self.h2 * float(a2.sum()),
                                      0.5 * self.c4 * self.h2 * float((a2 * a2).sum()))

    def energy_grad(self, u):
        u = self._flat(u)
        Ku = self.K @ u
        a2 = np.abs(u) ** 2
        E = self.h2 * (self.k * float(np.real(np.vdot(u, Ku))) - self.c2 * float(a2.sum())
                       + 0.5 * self.c4 * float((a2 * a2).sum()))
        g = 2.0 * self.h2 * (self.k * Ku - self.c2 * u + self.c4 * a2 * u)
        return E, g

    def line_poly(self, u, d):
        u, d = self._flat(u), self._flat(d)
        Ku, Kd = self.K @ u, self.K @ d
        p0 = np.abs(u) ** 2
        p1 = 2.0 * np.real(np.conj(u) * d)
        p2 = np.abs(d) ** 2
        h2, k, c2, c4 = self.h2, self.k, self.c2, self.c4
        a0 = h2 * (k * np.real(np.vdot(u, Ku)) - c2 * p0.sum() + 0.5 * c4 * (p0 * p0).sum())
        a1 = h2 * (2 * k * np.real(np.vdot(u, Kd)) - c2 * p1.sum() + c4 * (p0 * p1).sum())
        a2 = h2 * (k * np.real(np.vdot(d, Kd)) - c2 * p2.sum() + 0.5 * c4 * (p1 * p1 + 2 * p0 * p2).sum())
        a3 = h2 * c4 * (p1 * p2).sum()
        a4 = 0.5 * h2 * c4 * (p2 * p2).sum()
        return np.array([a0, a1, a2, a3, a4], dtype=float)


class ReducedFunctional(QuarticFunctional):
    """``G_b`` on a fixed link set: ``h^2 [ b <u, K u> - <u, u> + sum |u|^4 / 2 ]``."""

    def __init__(self, links: GaugeLinks, b: float):
        self.links = links
        self.grid = links.grid
        self.b = float(b)
        super().__init__(covariant_laplacian(links).tocsr(), self.grid.spacing**2, self.b, 1.0, 1.0)

    def preconditioner(self):
        # b K - (1 - 2s) I: positive, and close to the Hessian both on the
        # lowest Landau level (~ 1 - b) and on the higher ones (~ 2)
        s = max(1.0 - self.b, 0.02)
        n = self.K.shape[0]
        M = (self.b * self.K - (1.0 - 2.0 * s) * sp.identity(n, format="csr")) * (2.0 * self.h2)
        lu = spla.splu(M.tocsc())
        return lu.solve


def _links_for(u: ComplexField, links: Optional[GaugeLinks]) -> GaugeLinks:
    if links is None:
        return make_links(canonical_potential, u.grid, u.bc)
    if links.grid != u.grid or links.bc != u.bc:
        raise GridMismatchError("field and links are on different grids or boundary conditions")
    return links


def reduced_energy(u: ComplexField, b: float, links: Optional[GaugeLinks] = None) -> ReducedEnergyBreakdown:
    lk = _links_for(u, links)
    return ReducedFunctional(lk, b).breakdown(u.values)


def reduced_gradient(u: ComplexField, b: float, links: Optional[GaugeLinks] = None) -> ComplexField:
    """Gradient w.r.t. the real samples, packed as ``dG/dRe u + i dG/dIm u``."""
    lk = _links_for(u, links)
    _, g = ReducedFunctional(lk, b).energy_grad(u.values)
    return u.with_values(g.reshape(u.grid.shape))


@dataclass
class MinResult:
    minimizer: ComplexField
    energy: ReducedEnergyBreakdown
    grad_norm: float
    iterations: int
    converged: bool
    restarts_used: int
    b: float
    seed: int = 0
    init: str = ""

    @property
    def max_modulus(self) -> float:
        return float(np.max(np.abs(self.minimizer.values)))


@dataclass
class AbrikosovResult:
    cell: CellSpec
    coefficients: np.ndarray
    c_value: float
    beta_ratio: float
    per_restart_energies: List[float]
    grad_norm: float
    spectral: Optional[SpectralResult] = field(default=None, repr=False)

    @property
    def c_over_R2(self) -> float:
        return self.c_value / self.cell.R**2

    @property
    def field(self) -> np.ndarray:
        return (self.spectral.lll_basis @ self.coefficients).reshape(self.spectral.grid.shape)

    @property
    def restart_spread(self) -> float:
        e = np.asarray(self.per_restart_energies)
        return float(abs(np.median(e) - e.min()) / abs(e.min())) if e.min() != 0 else 0.0


def abrikosov_energy_grad(basis: np.ndarray, h2: float, c: np.ndarray):
    v = basis @ c
    a2 = np.abs(v) ** 2
    F = h2 * (0.5 * float((a2 * a2).sum())) - float(np.real(np.vdot(c, c)))
    g = 2.0 * (h2 * (basis.conj().T @ (a2 * v)) - c)
    return F, g


def _abrikosov_line_poly(basis, h2, c, d):
    v, w = basis @ c, basis @ d
    p0 = np.abs(v) ** 2
    p1 = 2 * np.real(np.conj(v) * w)
    p2 = np.abs(w) ** 2
    cc, cd, dd = np.real(np.vdot(c, c)), np.real(np.vdot(c, d)), np.real(np.vdot(d, d))
    return np.array([
        0.5 * h2 * (p0 * p0).sum() - cc,
        h2 * (p0 * p1).sum() - 2 * cd,
        0.5 * h2 * (p1 * p1 + 2 * p0 * p2).sum() - dd,
        h2 * (p1 * p2).sum(),
        0.5 * h2 * (p2 * p2).sum(),
    ])


def scalar_abrikosov_minimum(v: np.ndarray, h2: float) -> float:
    """``min_lambda F(lambda v) = -(int |v|^2)^2 / (2 int |v|^4)``."""
    a2 = np.abs(v) ** 2
    return -float((h2 * a2.sum()) ** 2 / (2.0 * h2 * (a2 * a2).sum()))


def minimize_abrikosov(spec: SpectralResult, restarts: int = RESTART_BUDGET, seed: int = 0,
                       tol: float = 1e-10, max_iter: int = 20000) -> AbrikosovResult:
    """Minimize ``F_R`` over ``v = sum_k c_k e_k`` in the LLL cluster.

    Best of ``restarts`` seeded random starts; every start is first rescaled
    to the optimal amplitude along its ray.
    """
    N = spec.lll_count
    if N < 1 or N != spec.cell.N:
        raise ValueError(f"LLL cluster has {N} states, expected N={spec.cell.N}")
    basis = spec.lll_basis
    h2 = spec.grid.spacing**2
    rng = np.random.default_rng(seed)
    fun = lambda c: abrikosov_energy_grad(basis, h2, c)
    poly = lambda c, d: _abrikosov_line_poly(basis, h2, c, d)
    best = None
    energies = []
    for _ in range(max(1, restarts)):
        c0 = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        v0 = basis @ c0
        a2 = np.abs(v0) ** 2
        c0 *= np.sqrt((h2 * a2.sum()) / (h2 * (a2 * a2).sum()))
        res = nlcg(fun, c0, tol=tol, max_iter=max_iter, line_poly=poly)
        energies.append(float(res.energy))
        if best is None or res.energy < best.energy:
            best = res
    c = best.x
    v = basis @ c
    a2 = np.abs(v) ** 2
    beta = spec.cell.R**2 * (h2 * (a2 * a2).sum()) / (h2 * a2.sum()) ** 2
    return AbrikosovResult(spec.cell, c, min(0.0, float(best.energy)), float(beta), energies,
                           best.grad_norm, spec)


def abrikosov_constant(N: int, points_per_side: Optional[int] = None, restarts: int = RESTART_BUDGET,
                       seed: int = 0) -> AbrikosovResult:
    M = points_per_side or int(round(64 * np.sqrt(N)))
    spec = landau_spectrum(N, M, count=N + 2, seed=seed)
    return minimize_abrikosov(spec, restarts=restarts, seed=seed)


def brute_force_abrikosov(cell: CellSpec, points_per_side: int,
                          magnitudes: Sequence[float] = (0.0, 0.5, 1.0, 2.0), phases: int = 8) -> float:
    """Coarse exhaustive search of ``c(R)/R^2`` in the analytic theta basis.

    The first coefficient is fixed to 1 (phase and scale are free); the rest
    range over ``magnitudes x exp(2 pi i k / phases)``.  Each candidate is
    scored by its closed-form ray minimum.  Independent of both the
    eigensolver and the conjugate-gradient minimizer.
    """
    from .theta import theta_lll_oracle
    grid = cell.grid(points_per_side)
    h2 = grid.spacing**2
    B = np.stack([f.values.ravel() for f in theta_lll_oracle(cell, grid)], axis=1)
    opts = [0j] + [m * np.exp(2j * np.pi * k / phases) for m in magnitudes if m > 0 for k in range(phases)]
    combos = np.array([(1.0,) + c for c in itertools.product(opts, repeat=cell.N - 1)], dtype=complex)
    best = 0.0
    for chunk in np.array_split(combos, max(1, len(combos) // 500)):
        a2 = np.abs(B @ chunk.T) ** 2
        vals = -(h2 * a2.sum(axis=0)) ** 2 / (2.0 * h2 * (a2 * a2).sum(axis=0))
        best = min(best, float(vals.min()))
    return best / cell.R**2


@dataclass
class EabEstimate:
    Ns: List[int]
    sequence: List[float]
    extrapolated: float
    spread: float


def estimate_eab(results: Sequence[AbrikosovResult]) -> EabEstimate:
    """Richardson-style extrapolation of ``c(R)/R^2`` in ``1/N``.

    The last two points (largest cells) are combined assuming a ``1/N``
    correction; the uncertainty is their difference.
    """
    by_n: Dict[int, float] = {}
    for r in results:
        by_n[r.cell.N] = r.c_over_R2
    if len(by_n) < 3:
        raise ValueError(f"need at least 3 distinct N values, got {sorted(by_n)}")
    Ns = sorted(by_n)
    seq = [by_n[n] for n in Ns]
    n1, n2 = Ns[-2], Ns[-1]
    f1, f2 = seq[-2], seq[-1]
    extrap = (n2 * f2 - n1 * f1) / (n2 - n1)
    return EabEstimate(Ns, seq, float(extrap), float(abs(f2 - f1)))


# ---------------------------------------------------------------------------
# reduced GL minimization


def _init_field(kind: str, grid: GridSpec, b: float, seed: int, abrikosov: Optional[AbrikosovResult],
                mu1: float) -> np.ndarray:
    if kind == "noise":
        rng = np.random.default_rng(seed)
        amp = np.sqrt(max(0.0, 1.0 - b))
        return amp * (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)) / np.sqrt(2)
    if kind == "lll":
        if abrikosov is None:
            raise ValueError("LLL-seeded initialization needs an Abrikosov result")
        if abrikosov.spectral.grid != grid:
            raise GridMismatchError("Abrikosov result lives on a different grid")
        return np.sqrt(max(0.0, 1.0 - b * mu1)) * abrikosov.field
    raise ValueError(f"unknown init policy {kind!r}")


def _minimize(cell: CellSpec, grid: GridSpec, bc, b: float, init: str, seed: int,
              abrikosov: Optional[AbrikosovResult], tol: float, max_iter: int) -> MinResult:
    if b <= 0:
        raise ValueError("b must be positive")
    if abs(grid.side_length - cell.R) > 1e-12 * cell.R:
        raise GridMismatchError("grid side must equal the cell side R")
    links = make_links(canonical_potential, grid, bc)
    fun = ReducedFunctional(links, b)
    zero = ComplexField(grid, np.zeros(grid.shape), bc)
    if b >= 1.0:
        # the magnetic ground state energy is >= 1, so G_b >= int |u|^4 / 2 >= 0
        return MinResult(zero, fun.breakdown(zero.values), 0.0, 0, True, 0, b, seed, "zero")
    if init == "auto":
        init = "lll" if (b >= 0.8 and abrikosov is not None) else "noise"
    mu1 = float(np.mean(abrikosov.spectral.eigenvalues[: abrikosov.spectral.lll_count])) if abrikosov else 1.0
    P = fun.preconditioner()
    best = None
    for attempt in range(RESTART_BUDGET):
        kind = init if attempt == 0 else "noise"
        x0 = _init_field(kind, grid, b, seed + attempt, abrikosov, mu1).ravel()
        res = nlcg(fun.energy_grad, x0, tol=tol, max_iter=max_iter, precond=P, line_poly=fun.line_poly)
        if best is None or res.energy < best[0].energy:
            best = (res, attempt, kind)
        if res.converged:
            break
    res, attempt, kind = best
    if not res.converged:
        raise ConvergenceError(
            f"reduced GL minimization (b={b}, N={cell.N}) did not converge after "
            f"{RESTART_BUDGET} attempts; best grad norm {res.grad_norm:.3e}")
    u = ComplexField(grid, res.x.reshape(grid.shape), bc)
    E, g = fun.energy_grad(u.values)      # re-verified evaluation
    return MinResult(u, fun.breakdown(u.values), float(np.linalg.norm(g)), res.iterations, True,
                     attempt, b, seed, kind)


def minimize_dirichlet(cell: CellSpec, points_per_side: int, b: Optional[float] = None, init: str = "auto",
                       seed: int = 0, abrikosov: Optional[AbrikosovResult] = None, tol: float = CELL_TOL,
                       max_iter: int = 20000) -> MinResult:
    """``m0(b, R)``: minimize ``G_b`` with zero exterior values."""
    b = cell.b if b is None else b
    return _minimize(cell, cell.grid(points_per_side), DIRICHLET, b, init, seed, abrikosov, tol, max_iter)


def minimize_periodic(cell: CellSpec, points_per_side: int, b: Optional[float] = None, init: str = "auto",
                      seed: int = 0, abrikosov: Optional[AbrikosovResult] = None, tol: float = CELL_TOL,
                      max_iter: int = 20000) -> MinResult:
    """``m_p(b, R)``: minimize ``G_b`` over magnetic-periodic fields."""
    b = cell.b if b is None else b
    return _minimize(cell, cell.grid(points_per_side), magnetic_periodic(cell.N), b, init, seed,
                     abrikosov, tol, max_iter)


@dataclass
class CellInequalityRecord:
    N: int
    R: float
    b: float
    m0: float
    m_p: float
    c: float
    c_over_R2: float
    beta: float
    sigma: float
    ordering_ok: bool          # m0 >= m_p - 2 tol
    sandwich_ok: bool          # m_p <= (1-b)^2 c + tol
    C_m0_mp: float             # (m0 - m_p) / ((1-b) R)
    C_lower: float             # constant needed in the lower sandwich bound
    C_max: float               # max |u_p| / sqrt(1-b)
    max_modulus: float
    grad_norm: float
    iterations: int
    seed: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def cell_inequalities(N: int, b: float, points_per_side: Optional[int] = None, sigma: float = 0.2,
                      seed: int = 0, tol: float = CELL_TOL,
                      abrikosov: Optional[AbrikosovResult] = None) -> CellInequalityRecord:
    """Compute ``m0``, ``m_p`` and ``c(R)`` on one grid and measure the constants."""
    M = points_per_side or int(round(64 * np.sqrt(N)))
    cell = CellSpec(N, b)
    if abrikosov is None or abrikosov.spectral.grid != cell.grid(M):
        abrikosov = abrikosov_constant(N, M, seed=seed)
    c = abrikosov.c_value
    rp = minimize_periodic(cell, M, b, "lll", seed, abrikosov, tol)
    r0 = minimize_dirichlet(cell, M, b, "lll", seed, abrikosov, tol)
    omb = max(0.0, 1.0 - b)
    R = cell.R
    m0 = r0.energy.total
    mp = rp.energy.total
    tol_abs = tol * max(1.0, abs(mp))
    C02 = (m0 - mp) / (omb * R) if omb > 0 else 0.0
    if omb > 0:
        need = ((1 + 2 * sigma) * c - mp / omb**2) * sigma**3 / (omb**2 * R**4)
        C36 = max(0.0, float(need))
        Cmax = rp.max_modulus / np.sqrt(omb)
    else:
        C36 = Cmax = 0.0
    return CellInequalityRecord(
        N=N, R=R, b=b, m0=m0, m_p=mp, c=c, c_over_R2=c / R**2, beta=abrikosov.beta_ratio, sigma=sigma,
        ordering_ok=bool(m0 >= mp - 2 * tol_abs), sandwich_ok=bool(mp <= omb**2 * c + tol_abs),
        C_m0_mp=float(C02), C_lower=C36, C_max=float(Cmax),
        max_modulus=max(r0.max_modulus, rp.max_modulus), grad_norm=max(r0.grad_norm, rp.grad_norm),
        iterations=r0.iterations + rp.iterations, seed=seed)

"""Full Ginzburg-Landau minimization on a square sample.

Physical units: the sample is ``[-L/2, L/2]^2``, the applied potential is
``F = A0`` (unit curl, centred on the sample) and the induced part is
``a = grad_perp xi = (-d_y xi, d_x xi)`` with ``xi = 0`` on the boundary.
The discrete energy is

    E = sum_edges |U_e psi_+ - psi_-|^2 + h^2 sum (-k^2 |psi|^2 + k^2/2 |psi|^4)
        + (k H)^2 h^2 sum_nodes (lap_h xi)^2,

with ``U_e = exp(-i k H int_e A.dl)``.  ``psi`` lives on cell centres, ``xi``
on the ``(M+1)^2`` cell corners; the interior corners are the plaquette
centres, where ``curl A - 1 = lap_h xi`` holds exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell import (AbrikosovResult, ConvergenceError, MinResult, QuarticFunctional,
                   abrikosov_constant)
from .fields import (DIRICHLET, NATURAL, ComplexField, GaugeLinks, GridMismatchError, GridSpec,
                     canonical_potential, covariant_laplacian, forward_differences, load_field,
                     make_links, save_field)
from .landau import CellSpec, SpectralResult, lll_coefficients
from .optim import nlcg
from .theta import evaluate_lll, periodized_coherent_state, default_centres

GL_TOL = 1e-7
STATE_SCHEMA = 1


class GeometryError(ValueError):
    pass


class SaddleError(RuntimeError):
    pass


@dataclass(frozen=True)
class GLParams:
    kappa: float
    H: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.H > 0 and math.isfinite(self.kappa) and math.isfinite(self.H)):
            raise ValueError(f"kappa and H must be positive, got kappa={self.kappa}, H={self.H}")

    @classmethod
    def from_b(cls, kappa: float, b: float) -> "GLParams":
        return cls(kappa, b * kappa)

    @property
    def b(self) -> float:
        return self.H / self.kappa

    @property
    def mu(self) -> float:
        return (self.kappa - self.H) / math.sqrt(self.kappa)

    @property
    def kH(self) -> float:
        return self.kappa * self.H

    @property
    def magnetic_length(self) -> float:
        return 1.0 / math.sqrt(self.kH)

    @property
    def bulk_distance(self) -> float:
        return self.kappa ** -0.25

    @property
    def regime_literal(self) -> bool:
        """``3 k^{-1/2} <= 1 - b <= 0.3``."""
        omb = 1.0 - self.b
        return 3.0 / math.sqrt(self.kappa) <= omb <= 0.3

    @property
    def regime(self) -> bool:
        """Relaxed operational regime ``k^{-1/2} < 1 - b <= 0.5``."""
        omb = 1.0 - self.b
        return 1.0 / math.sqrt(self.kappa) < omb <= 0.5


@dataclass(frozen=True)
class SquareSpec:
    """A grid-aligned square of ``n`` x ``n`` sites starting at site ``(i0, j0)``."""
    i0: int
    j0: int
    n: int
    center: Tuple[float, float]
    side: float

    def slices(self):
        return slice(self.i0, self.i0 + self.n), slice(self.j0, self.j0 + self.n)

    def mask(self, grid: GridSpec) -> np.ndarray:
        m = np.zeros(grid.shape, dtype=bool)
        m[self.slices()] = True
        return m


def design_grid(params: GLParams, side: float, square_flux: int, points_per_length: float = 8.0) -> GridSpec:
    """Grid whose spacing divides the quantized square side exactly.

    The square side is ``ell = R / sqrt(kH)`` with ``R^2 = 2 pi N``; it holds
    ``n = ceil(points_per_length * R)`` sites, and the sample side is rounded
    to a whole number of sites.
    """
    R = math.sqrt(2 * math.pi * square_flux)
    n = int(math.ceil(points_per_length * R))
    h = R / n / math.sqrt(params.kH)
    M = int(round(side / h))
    return GridSpec(M * h, M)


def square_sites(params: GLParams, grid: GridSpec, square_flux: int) -> int:
    ell = math.sqrt(2 * math.pi * square_flux / params.kH)
    n = ell / grid.spacing
    if abs(n - round(n)) > 1e-6:
        raise GeometryError(f"square side {ell:.6g} is not a whole number of grid cells ({n:.6f})")
    return int(round(n))


def admissible_squares(params: GLParams, grid: GridSpec, square_flux: int) -> List[SquareSpec]:
    """Non-overlapping quantized squares tiling the bulk ``dist >= k^{-1/4}``, centred."""
    n = square_sites(params, grid, square_flux)
    h, L, M = grid.spacing, grid.side_length, grid.points_per_side
    d = params.bulk_distance
    first = int(math.ceil(d / h - 1e-9))
    last = int(math.floor((L - d) / h + 1e-9))          # exclusive site index bound
    count = max(0, (last - first) // n)
    if count == 0:
        return []
    slack = (last - first) - count * n
    start = first + slack // 2
    out = []
    for a in range(count):
        for c in range(count):
            i0, j0 = start + a * n, start + c * n
            cx = -L / 2 + (i0 + n / 2) * h
            cy = -L / 2 + (j0 + n / 2) * h
            out.append(SquareSpec(i0, j0, n, (cx, cy), n * h))
    return out


def check_square(params: GLParams, grid: GridSpec, sq: SquareSpec, square_flux: Optional[int] = None) -> None:
    h, L = grid.spacing, grid.side_length
    d = params.bulk_distance
    lo = -L / 2 + sq.i0 * h, -L / 2 + sq.j0 * h
    hi = lo[0] + sq.n * h, lo[1] + sq.n * h
    tol = 1e-9 * L
    if min(lo) < -L / 2 + d - tol or max(hi) > L / 2 - d + tol:
        raise GeometryError(f"square at {sq.center} leaves the bulk region dist >= {d:.4f}")
    N = sq.side**2 * params.kH / (2 * math.pi)
    if abs(N - round(N)) > 1e-6 or round(N) < 1:
        raise GeometryError(f"square flux ell^2 kH / 2pi = {N:.6f} is not a positive integer")
    if square_flux is not None and int(round(N)) != square_flux:
        raise GeometryError(f"square carries {N:.3f} flux quanta, expected {square_flux}")


# ---------------------------------------------------------------------------
# state and energy


@dataclass(eq=False)
class DomainState:
    grid: GridSpec
    psi: ComplexField
    stream: np.ndarray                  # xi at the (M-1)^2 interior corners
    energy: float = float("nan")
    grad_norm: float = float("nan")
    gauge_phase: Optional[np.ndarray] = None
    iterations: int = 0
    converged: bool = False

    def __post_init__(self):
        M = self.grid.points_per_side
        if self.psi.grid != self.grid:
            raise GridMismatchError("psi grid differs from the state grid")
        xi = np.asarray(self.stream, dtype=float)
        if xi.shape != (M - 1, M - 1):
            raise GridMismatchError(f"stream has shape {xi.shape}, expected {(M - 1, M - 1)}")
        self.stream = xi
        if self.gauge_phase is not None and np.shape(self.gauge_phase) != self.grid.shape:
            raise GridMismatchError("gauge phase shape does not match the grid")

    @classmethod
    def normal(cls, grid: GridSpec) -> "DomainState":
        M = grid.points_per_side
        return cls(grid, ComplexField(grid, np.zeros(grid.shape), NATURAL), np.zeros((M - 1, M - 1)))

    def corner_stream(self) -> np.ndarray:
        return np.pad(self.stream, 1)

    def save(self, directory, params: Optional[GLParams] = None) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_field(d / "psi.fld", self.psi)
        save_field(d / "stream.fld", ComplexField(_stream_grid(self.grid), self.stream, DIRICHLET))
        names = {"psi": "psi.fld", "stream": "stream.fld"}
        if self.gauge_phase is not None:
            save_field(d / "gauge.fld", ComplexField(self.grid, self.gauge_phase, NATURAL))
            names["gauge_phase"] = "gauge.fld"
        man = {"schema_version": STATE_SCHEMA, "side_length": self.grid.side_length,
               "points_per_side": self.grid.points_per_side, "energy": self.energy,
               "grad_norm": self.grad_norm, "iterations": self.iterations, "converged": self.converged,
               "fields": names}
        if params is not None:
            man["params"] = {"kappa": params.kappa, "H": params.H, "b": params.b}
        path = d / "manifest.json"
        path.write_text(json.dumps(man, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory) -> "DomainState":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        psi = load_field(d / man["fields"]["psi"])
        xi = load_field(d / man["fields"]["stream"]).values.real.copy()
        gp = None
        if "gauge_phase" in man["fields"]:
            gp = load_field(d / man["fields"]["gauge_phase"]).values.real.copy()
        return cls(psi.grid, psi, xi, man["energy"], man["grad_norm"], gp, man["iterations"], man["converged"])


def _stream_grid(grid: GridSpec) -> GridSpec:
    # interior corners form a cell-centred grid of side L - h with M - 1 points
    return GridSpec(grid.side_length - grid.spacing, grid.points_per_side - 1)


def _lap_corners(X: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian at interior corners of the zero-padded corner array ``X``."""
    return (X[2:, 1:-1] + X[:-2, 1:-1] + X[1:-1, 2:] + X[1:-1, :-2] - 4 * X[1:-1, 1:-1]) / h**2


@dataclass
class GLEnergyBreakdown:
    kinetic: float
    condensation: float
    quartic: float
    field: float

    @property
    def total(self) -> float:
        return self.kinetic + self.condensation + self.quartic + self.field

    def as_dict(self) -> dict:
        return {"kinetic": self.kinetic, "condensation": self.condensation, "quartic": self.quartic,
                "field": self.field, "total": self.total}


class DomainFunctional:
    """Energy, gradients and preconditioners for one ``(params, grid)`` pair."""

    def __init__(self, params: GLParams, grid: GridSpec, gauge_phase: Optional[np.ndarray] = None):
        self.params = params
        self.grid = grid
        self.h = grid.spacing
        self.h2 = self.h**2
        self.M = grid.points_per_side
        self.kH = params.kH
        self.k2 = params.kappa**2
        base = make_links(canonical_potential, grid, NATURAL, field_strength=self.kH)
        hor, ver = base.horizontal.copy(), base.vertical.copy()
        if gauge_phase is not None:
            phi = np.asarray(gauge_phase, dtype=float)
            hor *= np.exp(-1j * self.kH * (np.roll(phi, -1, axis=0) - phi))
            ver *= np.exp(-1j * self.kH * (np.roll(phi, -1, axis=1) - phi))
        self.base_h, self.base_v = hor, ver
        self.gauge_phase = gauge_phase
        j = np.arange(1, self.M)
        lam1 = 4.0 / self.h2 * np.sin(np.pi * j / (2 * self.M)) ** 2
        self.lam = lam1[:, None] + lam1[None, :]          # eigenvalues of -lap_h (DST-I)
        self._psi_lu = None

    # -- geometry of the induced potential

    def circulations(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Line integrals of ``grad_perp xi`` along the forward edges (corner array ``X``)."""
        th = np.zeros(self.grid.shape)
        tv = np.zeros(self.grid.shape)
        th[:-1, :] = -(X[1:-1, 1:] - X[1:-1, :-1])
        tv[:, :-1] = X[1:, 1:-1] - X[:-1, 1:-1]
        return th, tv

    def _stream_circulations(self, stream, lo=None):
        th, tv = self.circulations(np.pad(stream, 1))
        if lo is not None:
            a, b = self.circulations(np.pad(lo, 1))
            th, tv = th + a, tv + b
        return th, tv

    def links(self, stream: np.ndarray, lo: Optional[np.ndarray] = None) -> GaugeLinks:
        """Peierls links for ``xi = stream + lo``; ``lo`` is an optional low-order part."""
        th, tv = self._stream_circulations(stream, lo)
        hor = self.base_h * np.exp(-1j * self.kH * th)
        ver = self.base_v * np.exp(-1j * self.kH * tv)
        return GaugeLinks(self.grid, hor, ver, NATURAL)

    def induced_potential(self, stream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """``grad_perp xi`` averaged onto the sites."""
        X = np.pad(stream, 1)
        ax = -0.5 * ((X[1:, 1:] - X[1:, :-1]) + (X[:-1, 1:] - X[:-1, :-1])) / self.h
        ay = 0.5 * ((X[1:, 1:] - X[:-1, 1:]) + (X[1:, :-1] - X[:-1, :-1])) / self.h
        return ax, ay

    def curl_deviation(self, stream: np.ndarray, lo: Optional[np.ndarray] = None) -> np.ndarray:
        """``curl A - 1`` at the interior corners."""
        lap = _lap_corners(np.pad(stream, 1), self.h)
        if lo is not None:
            lap = lap + _lap_corners(np.pad(lo, 1), self.h)
        return lap

    # -- energy

    def breakdown(self, psi: np.ndarray, stream: np.ndarray) -> GLEnergyBreakdown:
        lk = self.links(stream)
        dx, dy = forward_differences(psi, lk)
        kin = float(np.sum(np.abs(dx) ** 2) + np.sum(np.abs(dy) ** 2))
        a2 = np.abs(psi) ** 2
        lap = self.curl_deviation(stream)
        return GLEnergyBreakdown(kin, -self.k2 * self.h2 * float(a2.sum()),
                                 0.5 * self.k2 * self.h2 * float((a2 * a2).sum()),
                                 self.kH**2 * self.h2 * float(np.sum(lap**2)))

    def psi_functional(self, stream: np.ndarray) -> QuarticFunctional:
        K = covariant_laplacian(self.links(stream)).tocsr()
        return QuarticFunctional(K, self.h2, 1.0, self.k2, self.k2)

    def psi_preconditioner(self):
        """LU of ``2 h^2 (K_F + k^2 s)`` for the applied-field links only.

        The induced potential is O(1/k), so one factorization serves the
        whole run.
        """
        if self._psi_lu is None:
            s = max(1.0 - self.params.b, 0.05)
            K = covariant_laplacian(GaugeLinks(self.grid, self.base_h, self.base_v, NATURAL))
            n = K.shape[0]
            A = (K + self.k2 * s * sp.identity(n, format="csr")) * (2.0 * self.h2)
            self._psi_lu = spla.splu(A.tocsc())
        return self._psi_lu.solve

    def stream_energy_grad(self, psi: np.ndarray, stream: np.ndarray, lo: Optional[np.ndarray] = None):
        lk = self.links(stream, lo)
        dx, dy = forward_differences(psi, lk)
        E = float(np.sum(np.abs(dx) ** 2) + np.sum(np.abs(dy) ** 2))
        lap = self.curl_deviation(stream, lo)
        E += self.kH**2 * self.h2 * float(np.sum(lap**2))
        # d/dtheta |U psi_+ - psi|^2 = -2 kH Im(conj(psi) U psi_+)
        jh = np.zeros(self.grid.shape)
        jv = np.zeros(self.grid.shape)
        jh[:-1, :] = -2 * self.kH * np.imag(np.conj(psi[:-1, :]) * lk.horizontal[:-1, :] * psi[1:, :])
        jv[:, :-1] = -2 * self.kH * np.imag(np.conj(psi[:, :-1]) * lk.vertical[:, :-1] * psi[:, 1:])
        G = np.zeros((stream.shape[0] + 2, stream.shape[1] + 2))
        G[1:-1, 1:] -= jh[:-1, :]
        G[1:-1, :-1] += jh[:-1, :]
        G[1:, 1:-1] += jv[:, :-1]
        G[:-1, 1:-1] -= jv[:, :-1]
        g = G[1:-1, 1:-1] + 2 * self.kH**2 * self.h2 * _lap_corners(np.pad(lap, 1), self.h)
        return E, g

    def stream_preconditioner(self, psi: np.ndarray):
        alpha = float(np.mean(np.abs(psi) ** 2))
        den = 2 * self.kH**2 * self.h2 * (self.lam**2 + alpha * self.lam)

        def solve(g):
            g = np.real(g)
            return sfft.idstn(sfft.dstn(g, type=1, norm="ortho") / den, type=1, norm="ortho")
        return solve

    def psi_energy_grad(self, psi: np.ndarray, stream: np.ndarray, lo: Optional[np.ndarray] = None):
        """Total energy and ``g_psi`` without assembling the covariant Laplacian."""
        lk = self.links(stream, lo)
        dx, dy = forward_differences(psi, lk)
        a2 = np.abs(psi) ** 2
        lap = self.curl_deviation(stream, lo)
        E = (float(np.sum(np.abs(dx) ** 2) + np.sum(np.abs(dy) ** 2))
             + self.k2 * self.h2 * float(np.sum(0.5 * a2 * a2 - a2))
             + self.kH**2 * self.h2 * float(np.sum(lap**2)))
        g = 2 * self.k2 * self.h2 * (a2 - 1) * psi - 2 * (dx + dy)
        g[1:, :] += 2 * np.conj(lk.horizontal[:-1, :]) * dx[:-1, :]
        g[:, 1:] += 2 * np.conj(lk.vertical[:, :-1]) * dy[:, :-1]
        return E, g

    def energy_grad(self, psi: np.ndarray, stream: np.ndarray, lo: Optional[np.ndarray] = None):
        """Joint energy and gradients ``(E, g_psi, g_xi)``."""
        E, gpsi = self.psi_energy_grad(psi, stream, lo)
        _, gxi = self.stream_energy_grad(psi, stream, lo)
        return E, gpsi, gxi


def gl_energy(state: DomainState, params: GLParams) -> GLEnergyBreakdown:
    if state.psi.grid != state.grid:
        raise GridMismatchError("state fields live on different grids")
    fun = DomainFunctional(params, state.grid, state.gauge_phase)
    return fun.breakdown(state.psi.values, state.stream)


# ---------------------------------------------------------------------------
# initial guesses and minimization


def theta_coefficients(ab: AbrikosovResult) -> np.ndarray:
    """Coefficients of the Abrikosov minimizer in the analytic theta basis."""
    spec = ab.spectral
    X, Y = spec.grid.mesh()
    B = np.stack([periodized_coherent_state(X, Y, ab.cell, w).ravel() for w in default_centres(ab.cell)], axis=1)
    c, *_ = np.linalg.lstsq(B, ab.field.ravel(), rcond=None)
    return c


def abrikosov_seed(params: GLParams, grid: GridSpec, ab: AbrikosovResult) -> np.ndarray:
    """``sqrt(1 - b mu_1) v*(sqrt(kH) x)``: the lattice continued over the sample."""
    spec = ab.spectral
    mu1 = float(np.mean(spec.eigenvalues[: spec.lll_count]))
    amp = math.sqrt(max(0.0, 1.0 - params.b * mu1))
    if amp == 0.0:
        return np.zeros(grid.shape, dtype=complex)
    s = math.sqrt(params.kH)
    X, Y = grid.mesh()
    return amp * evaluate_lll(s * X, s * Y, ab.cell, theta_coefficients(ab))


@dataclass
class GLResiduals:
    ginzburg_landau: float      # max_bulk |K psi - k^2 (1 - |psi|^2) psi| / (k^2 max_bulk |psi|)
    ampere: float               # max_bulk |g_xi| / max_bulk |2 (kH)^2 h^2 lap^2 xi|
    curl_sup: float             # k * max |curl A - 1|


def bulk_mask(params: GLParams, grid: GridSpec) -> np.ndarray:
    X, Y = grid.mesh()
    d = params.bulk_distance
    lim = grid.side_length / 2 - d
    return (np.abs(X) <= lim) & (np.abs(Y) <= lim)


def gl_residuals(state: DomainState, params: GLParams) -> GLResiduals:
    fun = DomainFunctional(params, state.grid, state.gauge_phase)
    psi = state.psi.values
    fpsi = fun.psi_functional(state.stream)
    r1 = (fpsi.K @ psi.ravel()).reshape(psi.shape) - fun.k2 * (1 - np.abs(psi) ** 2) * psi
    mask = bulk_mask(params, state.grid)
    den1 = fun.k2 * float(np.max(np.abs(psi[mask]), initial=0.0))
    res1 = float(np.max(np.abs(r1[mask]), initial=0.0)) / den1 if den1 > 0 else 0.0
    _, gxi = fun.stream_energy_grad(psi, state.stream)
    lap = fun.curl_deviation(state.stream)
    bih = 2 * fun.kH**2 * fun.h2 * _lap_corners(np.pad(lap, 1), fun.h)
    cm = mask[:-1, :-1] & mask[1:, 1:]        # corners surrounded by bulk sites
    den2 = float(np.max(np.abs(bih[cm]), initial=0.0))
    res2 = float(np.max(np.abs(gxi[cm]), initial=0.0)) / den2 if den2 > 0 else 0.0
    return GLResiduals(res1, res2, params.kappa * float(np.max(np.abs(lap), initial=0.0)))


def minimize_gl(params: GLParams, grid: GridSpec, init: str = "abrikosov", *,
                state: Optional[DomainState] = None, abrikosov: Optional[AbrikosovResult] = None,
                seed: int = 0, tol: float = GL_TOL, inner_iterations: int = 5,
                order: Sequence[str] = ("psi", "xi"), max_cycles: int = 20000, scheme: str = "eliminate",
                gauge_phase: Optional[np.ndarray] = None, callback=None) -> DomainState:
    """Joint minimizer of the GL energy by alternating block conjugate gradients.

    ``init``: ``"abrikosov"`` (lattice seed from ``abrikosov``, default N=1
    cell), ``"noise"`` (seeded complex noise of size ``sqrt(1-b)``),
    ``"normal"`` (``psi = 0``) or ``"state"`` (continue from ``state``).
    Stops when ``||(g_psi, g_xi)|| <= tol * max(1, |E|)``.

    ``scheme="eliminate"`` (default) solves the xi block to convergence after
    every psi evaluation (Newton steps with the DST preconditioner, which is
    nearly its exact Hessian) and runs one uninterrupted CG on psi; a cycle
    is one psi iteration.  ``scheme="alternating"`` takes ``inner_iterations``
    CG steps per block in ``order`` and restarts every block; it crawls once
    the vortex lattice starts to rearrange.
    """
    if set(order) != {"psi", "xi"} or len(order) != 2:
        raise ValueError("order must be a permutation of ('psi', 'xi')")
    if inner_iterations < 1:
        raise ValueError("inner_iterations must be positive")
    if scheme not in ("eliminate", "alternating"):
        raise ValueError(f"unknown scheme {scheme!r}")
    M = grid.points_per_side
    xi = np.zeros((M - 1, M - 1))
    if init == "state":
        if state is None:
            raise ValueError("init='state' needs a state")
        if state.grid != grid:
            raise GridMismatchError("state grid differs from the requested grid")
        psi = state.psi.values.astype(complex)
        xi = state.stream.copy()
        if gauge_phase is None:
            gauge_phase = state.gauge_phase
    elif init == "abrikosov":
        if abrikosov is None:
            abrikosov = abrikosov_constant(1, 64, seed=seed)
        psi = abrikosov_seed(params, grid, abrikosov)
    elif init == "noise":
        rng = np.random.default_rng(seed)
        amp = math.sqrt(max(0.0, 1.0 - params.b))
        psi = amp * (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)) / math.sqrt(2)
    elif init == "normal":
        psi = np.zeros(grid.shape, dtype=complex)
    else:
        raise ValueError(f"unknown init policy {init!r}")
    if gauge_phase is not None and init != "state":
        psi = psi * np.exp(1j * params.kH * np.asarray(gauge_phase))

    fun = DomainFunctional(params, grid, gauge_phase)
    Ppsi = fun.psi_preconditioner()
    E, gp, gx = fun.energy_grad(psi, xi)
    gnorm = math.hypot(np.linalg.norm(gp), np.linalg.norm(gx))
    cycles = 0
    while gnorm > tol * max(1.0, abs(E)) and cycles < max_cycles:
        if scheme == "eliminate":
            psi, xi, E, gnorm, used = _eliminated_cg(fun, Ppsi, psi, xi, E, tol, max_cycles - cycles, cycles,
                                                     callback)
            cycles += used
            if used == 0:
                break
            continue
        cycles += 1
        for block in order:
            if block == "psi":
                f = fun.psi_functional(xi)
                field_e = fun.kH**2 * fun.h2 * float(np.sum(fun.curl_deviation(xi) ** 2))
                r = nlcg(f.energy_grad, psi.ravel(), tol=0.0, max_iter=inner_iterations, precond=Ppsi,
                         line_poly=f.line_poly, relative_tol=False, restart_every=10**9)
                psi = r.x.reshape(grid.shape)
            else:
                P = fun.stream_preconditioner(psi)
                p = psi
                r = nlcg(lambda z: _real_pair(fun.stream_energy_grad(p, np.real(z))), xi.astype(complex),
                         tol=0.0, max_iter=inner_iterations, precond=lambda g: P(g).astype(complex),
                         relative_tol=False, line_search="secant", restart_every=10**9)
                xi = np.real(r.x)
        E, gp, gx = fun.energy_grad(psi, xi)
        gnorm = math.hypot(np.linalg.norm(gp), np.linalg.norm(gx))
        if callback is not None:
            callback(cycles, E, gnorm)
    converged = gnorm <= tol * max(1.0, abs(E))
    out = DomainState(grid, ComplexField(grid, psi, NATURAL), xi, float(E), float(gnorm),
                      gauge_phase, cycles, converged)
    if not converged:
        raise ConvergenceError(
            f"GL minimization (kappa={params.kappa}, b={params.b:.4f}) stalled after {cycles} cycles: "
            f"grad norm {gnorm:.3e} > {tol * max(1.0, abs(E)):.3e}")
    if E > 1e-8 * (1 + abs(E)):
        raise SaddleError(f"converged to a critical point above the normal state (E = {E:.6g})")
    return out


XI_NEWTON_STEPS = 6


def _eliminated_cg(fun: DomainFunctional, Ppsi, psi, xi, E, tol, budget, offset, callback):
    """CG on ``psi -> min_xi E(psi, xi)``; returns ``(psi, xi, E, gnorm, iterations)``.

    By the envelope theorem the reduced gradient is ``g_psi`` at the slaved
    ``xi``.  Stops at convergence, at the budget, or when the line search
    stalls; ``iterations == 0`` means no progress was possible.

    ``xi`` is carried as ``hi + lo`` with ``hi`` frozen.  One ulp of ``xi``
    moves ``g_xi`` by about ``40 (kappa H)^2 ulp / h^2`` through the field
    term, which on fine grids at large kappa is comparable to the stopping
    tolerance; the split keeps the iterate resolvable well below it.
    """
    shape = psi.shape
    Pxi = fun.stream_preconditioner(psi)
    eta = 0.05 * tol * max(1.0, abs(E))
    hi = xi
    store = {"lo": np.zeros_like(xi)}

    def slave(p):
        z = store["lo"]
        last = math.inf
        for _ in range(XI_NEWTON_STEPS):
            _, gx = fun.stream_energy_grad(p, hi, z)
            gn = np.linalg.norm(gx)
            # quadratic convergence ends at the round-off floor of g_xi
            if gn <= eta or gn > 0.5 * last:
                break
            last = gn
            z = z - Pxi(gx)
        store["lo"] = z
        return z

    def reduced(x):
        p = x.reshape(shape)
        E, gp = fun.psi_energy_grad(p, hi, slave(p))
        return E, gp.ravel()

    cb = None
    if callback is not None:
        def cb(it, x, En, gn):
            callback(offset + it, En, gn)
    r = nlcg(reduced, psi.ravel(), tol=0.99 * tol, max_iter=max(budget, 1), precond=Ppsi, line_search="secant",
             restart_every=10**9, callback=cb)
    psi = r.x.reshape(shape)
    lo = slave(psi)
    E, gp, gx = fun.energy_grad(psi, hi, lo)
    return psi, hi + lo, E, math.hypot(np.linalg.norm(gp), np.linalg.norm(gx)), r.iterations


def _real_pair(eg):
    E, g = eg
    return E, g.astype(complex)


# ---------------------------------------------------------------------------
# a-priori monitors


@dataclass
class LinftyReport:
    max_modulus: float
    ratio: float                # max_bulk |psi| / sqrt(1 - b)
    cap: float = 5.0

    @property
    def ok(self) -> bool:
        return self.ratio <= self.cap


def linfty_bulk_check(state: DomainState, params: GLParams, cap: float = 5.0) -> LinftyReport:
    if not params.regime:
        raise ValueError(f"b={params.b:.4f} is outside the bulk regime k^(-1/2) < 1 - b <= 0.5")
    mask = bulk_mask(params, state.grid)
    m = float(np.max(np.abs(state.psi.values[mask]), initial=0.0))
    return LinftyReport(m, m / math.sqrt(1.0 - params.b), cap)


# ---------------------------------------------------------------------------
# cut-offs, local energies and the test configuration


def smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


SMOOTHERSTEP_SLOPE = 15.0 / 8.0
CUTOFF_BAND = 0.5          # transition width in magnetic lengths


def _chebyshev_distance(grid: GridSpec, center) -> np.ndarray:
    X, Y = grid.mesh()
    return np.maximum(np.abs(X - center[0]), np.abs(Y - center[1]))


def build_cutoffs(ell: float, params: GLParams, grid: GridSpec, center=(0.0, 0.0),
                  band: float = CUTOFF_BAND):
    """``chi_ell`` (1 on ``Q_{ell - 1/sqrt(kH)}``, 0 outside ``Q_ell``) and ``eta_R``.

    Both are smootherstep ramps of the sup-distance to ``center`` across
    ``band`` magnetic lengths; ``eta_R`` vanishes on ``Q_ell`` and equals 1
    outside ``Q_{ell + 1/sqrt(kH)}``.  Returns ``(chi, eta, slope)`` with
    ``slope = max|grad chi| / sqrt(kH)`` of the profile.
    """
    lm = params.magnetic_length
    w = band * lm
    if w / grid.spacing < 4.0 - 1e-9:
        raise GeometryError(f"cut-off band spans {w / grid.spacing:.2f} cells; at least 4 are needed")
    if ell <= 2 * w:
        raise GeometryError("square too small for its cut-off band")
    r = _chebyshev_distance(grid, center)
    chi = smootherstep((ell / 2 - r) / w)
    eta = smootherstep((r - ell / 2) / w)
    return chi, eta, SMOOTHERSTEP_SLOPE / band


def local_energy(psi: np.ndarray, links: GaugeLinks, mask: np.ndarray, kappa: float) -> float:
    """``E_0`` on a set of sites; edges leaving the set count one half."""
    h2 = links.grid.spacing**2
    dx, dy = forward_differences(psi, links)
    ex = np.abs(dx) ** 2
    ey = np.abs(dy) ** 2
    inx = mask & np.roll(mask, -1, axis=0)
    iny = mask & np.roll(mask, -1, axis=1)
    crossx = mask ^ np.roll(mask, -1, axis=0)
    crossy = mask ^ np.roll(mask, -1, axis=1)
    crossx[-1, :] = False
    crossy[:, -1] = False
    inx[-1, :] = False
    iny[:, -1] = False
    kin = ex[inx].sum() + ey[iny].sum() + 0.5 * (ex[crossx].sum() + ey[crossy].sum())
    a2 = np.abs(psi[mask]) ** 2
    return float(kin - kappa**2 * h2 * a2.sum() + 0.5 * kappa**2 * h2 * (a2 * a2).sum())


def boundary_flux(psi: np.ndarray, mask: np.ndarray) -> float:
    """``1/2 sum (|psi_in|^2 - |psi_out|^2)`` over edges crossing the set boundary."""
    a2 = np.abs(psi) ** 2
    tot = 0.0
    for axis in (0, 1):
        nb = np.roll(mask, -1, axis=axis)
        a2n = np.roll(a2, -1, axis=axis)
        valid = np.ones_like(mask)
        if axis == 0:
            valid[-1, :] = False
        else:
            valid[:, -1] = False
        out_edge = valid & mask & ~nb          # inside -> outside
        in_edge = valid & ~mask & nb           # outside -> inside
        tot += 0.5 * float(np.sum(a2[out_edge] - a2n[out_edge]))
        tot += 0.5 * float(np.sum(a2n[in_edge] - a2[in_edge]))
    return tot


@dataclass
class TestConfiguration:
    phi: ComplexField
    energy: float               # E(phi, A)
    minimizer_energy: float
    bulk_part: float            # E(phi, A) - E(psi, A; outside Q)
    bound: float                # (1 + delta)/b m0 + r0 with unit constants
    r0: Dict[str, float]
    m0: float
    delta: float

    @property
    def certificate_ok(self) -> bool:
        return self.energy >= self.minimizer_energy - 1e-8 * (1 + abs(self.minimizer_energy))


def _square_gauge(params: GLParams, grid: GridSpec, sq: SquareSpec, mean_a=(0.0, 0.0)) -> np.ndarray:
    """Phase ``exp(i kH (A0(a) + mean a) . (x - a))`` on the square's sites."""
    c = grid.centers()
    sx, sy = sq.slices()
    X, Y = np.meshgrid(c[sx] - sq.center[0], c[sy] - sq.center[1], indexing="ij")
    ax = -0.5 * sq.center[1] + mean_a[0]
    ay = 0.5 * sq.center[0] + mean_a[1]
    return np.exp(1j * params.kH * (ax * X + ay * Y))


def build_test_configuration(state: DomainState, params: GLParams, u_R: MinResult, sq: SquareSpec,
                             delta: Optional[float] = None) -> TestConfiguration:
    """Splice the Dirichlet cell minimizer into ``sq`` and keep ``eta_R psi`` outside."""
    grid = state.grid
    check_square(params, grid, sq)
    if u_R.minimizer.grid.points_per_side != sq.n:
        raise GeometryError("cell minimizer grid does not match the square's sites")
    if abs(u_R.b - params.b) > 1e-12:
        raise GeometryError("cell minimizer was computed for a different b")
    delta = params.kappa ** -0.5 * math.log(params.kappa) if delta is None else delta
    fun = DomainFunctional(params, grid, state.gauge_phase)
    lk = fun.links(state.stream)
    psi = state.psi.values
    mask = sq.mask(grid)
    ax, ay = fun.induced_potential(state.stream)
    mean_a = (float(ax[mask].mean()), float(ay[mask].mean()))
    _, eta, _ = build_cutoffs(sq.side, params, grid, sq.center)
    phi = eta * psi
    ph = _square_gauge(params, grid, sq, mean_a)
    if state.gauge_phase is not None:
        ph = ph * np.exp(1j * params.kH * state.gauge_phase[sq.slices()])
    phi[sq.slices()] = ph * u_R.minimizer.values
    E_phi = fun.breakdown(phi, state.stream).total
    E_psi = fun.breakdown(psi, state.stream).total
    E0_Q = local_energy(psi, lk, mask, params.kappa)
    # r0 pieces, unit constants
    da2 = (ax - mean_a[0]) ** 2 + (ay - mean_a[1]) ** 2
    r_a = params.kH**2 / delta * grid.spacing**2 * float(np.sum((da2 * np.abs(psi) ** 2)[mask]))
    r_u = delta * sq.side**2 * params.kappa**2 * u_R.max_modulus**2
    r = _chebyshev_distance(grid, sq.center)
    band = (~mask) & (r <= sq.side / 2 + 0.5 * params.magnetic_length + 1e-12)
    r_band = (local_energy(eta * psi, lk, band, params.kappa) - local_energy(psi, lk, band, params.kappa))
    m0 = u_R.energy.total
    r0 = {"A_minus_A0": r_a, "cell_sup": r_u, "band": r_band}
    bound = (1 + delta) / params.b * m0 + sum(r0.values())
    return TestConfiguration(ComplexField(grid, phi, NATURAL), float(E_phi), float(E_psi),
                             float(E_phi - (E_psi - E0_Q)), float(bound), r0, float(m0), float(delta))


# ---------------------------------------------------------------------------
# square observables


@dataclass
class SquareObservables:
    center: Tuple[float, float]
    side: float
    mean_psi2: float
    mean_psi4: float
    mean_chi_psi4: float
    mean_energy_density: float
    lll_residual: float
    lll_constant: float          # lll_residual / sqrt(1 - b)
    v_norm: float
    ibp_lhs: float               # -k^2/2 int_Q |psi|^4
    ibp_rhs: float               # E_0(Q) + boundary flux
    flux: float
    lower_chain_lhs: float       # E_0(chi psi, A0; Q) in cell units
    lower_chain_mid: float       # int (mu_1 - 1/b)|Pi_1 v|^2 + 1/(2b)|v|^4
    v: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ibp_error(self) -> float:
        return abs(self.ibp_lhs - self.ibp_rhs) / abs(self.ibp_lhs) if self.ibp_lhs != 0 else 0.0

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "v"}
        d["center"] = list(self.center)
        d["ibp_error"] = self.ibp_error
        return d


def square_observables(state: DomainState, params: GLParams, squares: Sequence[SquareSpec],
                       spectral: SpectralResult, keep_v: bool = False) -> List[SquareObservables]:
    """Local means, energy density, identity check and LLL residual per square.

    ``spectral`` is the magnetic-periodic spectrum of the rescaled square
    (``N = ell^2 kH / 2pi`` on a grid of ``sq.n`` points).
    """
    grid = state.grid
    fun = DomainFunctional(params, grid, state.gauge_phase)
    lk = fun.links(state.stream)
    psi = state.psi.values
    ax, ay = fun.induced_potential(state.stream)
    b = params.b
    out = []
    for sq in squares:
        check_square(params, grid, sq, spectral.cell.N)
        if spectral.grid.points_per_side != sq.n:
            raise GeometryError("spectral grid does not match the square's sites")
        mask = sq.mask(grid)
        p = psi[sq.slices()]
        a2 = np.abs(p) ** 2
        area = sq.side**2
        chi, _, _ = build_cutoffs(sq.side, params, grid, sq.center)
        cp = (chi * psi)[sq.slices()]
        E0 = local_energy(psi, lk, mask, params.kappa)
        flux = boundary_flux(psi, mask)
        lhs = -0.5 * params.kappa**2 * grid.spacing**2 * float((a2 * a2).sum())
        # v(y) = exp(-i kH (A0(a) + mean a).z) (chi psi)(a + z), z = y / sqrt(kH)
        mean_a = (float(ax[mask].mean()), float(ay[mask].mean()))
        g = np.conj(_square_gauge(params, grid, sq, mean_a))
        if state.gauge_phase is not None:
            g = g * np.exp(-1j * params.kH * state.gauge_phase[sq.slices()])
        v = g * cp
        hc2 = spectral.grid.spacing**2
        vn2 = hc2 * float(np.sum(np.abs(v) ** 2))
        if vn2 > 1e-24:
            c = lll_coefficients(spectral, v)
            pv = (spectral.lll_basis @ c).reshape(v.shape)
            res = math.sqrt(hc2 * float(np.sum(np.abs(v - pv) ** 2)) / vn2)
            op = spectral.operator
            kin = float(np.real(np.vdot(v.ravel(), op.matrix @ v.ravel()))) * hc2
            v2 = np.abs(v) ** 2
            chain_lhs = kin - vn2 / b + 0.5 / b * hc2 * float((v2 * v2).sum())
            mu1 = float(np.mean(spectral.eigenvalues[: spectral.lll_count]))
            chain_mid = (mu1 - 1 / b) * hc2 * float(np.sum(np.abs(pv) ** 2)) + 0.5 / b * hc2 * float((v2 * v2).sum())
        else:
            res = chain_lhs = chain_mid = 0.0
        out.append(SquareObservables(
            center=sq.center, side=sq.side, mean_psi2=float(a2.mean()), mean_psi4=float((a2 * a2).mean()),
            mean_chi_psi4=float((np.abs(cp) ** 4).mean()), mean_energy_density=E0 / area,
            lll_residual=res, lll_constant=res / math.sqrt(1 - b) if b < 1 else float("inf"),
            v_norm=math.sqrt(vn2), ibp_lhs=lhs, ibp_rhs=E0 + flux, flux=flux,
            lower_chain_lhs=chain_lhs, lower_chain_mid=chain_mid, v=v if keep_v else None))
    return out

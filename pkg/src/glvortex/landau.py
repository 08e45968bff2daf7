"""Magnetic-periodic Landau operator on the quantized cell and its low spectrum."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import (ComplexField, GaugeLinks, GridMismatchError, GridSpec, canonical_potential,
                     check_quantization, covariant_laplacian, inner, make_links,
                     magnetic_periodic, save_field, load_field)

#: eigenvalues below this belong to the lowest-Landau-level cluster (gap is 1 -> 3)
CLUSTER_THRESHOLD = 2.0
MATVECS_PER_PAIR = 10_000


class EigensolverError(RuntimeError):
    pass


class GapHypothesisError(ValueError):
    pass


@dataclass(frozen=True)
class CellSpec:
    N: int
    b: float = 1.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"flux N must be a positive integer, got {self.N}")
        if not 0 < self.b <= 1.5:
            raise ValueError(f"b must lie in (0, 1.5], got {self.b}")
        check_quantization(self.R, self.N)

    @property
    def R(self) -> float:
        return float(np.sqrt(2.0 * np.pi * self.N))

    def grid(self, points_per_side: int) -> GridSpec:
        return GridSpec(self.R, points_per_side)


@dataclass(eq=False)
class LandauOperator:
    """Discrete ``-(grad - i A0)^2`` with magnetic-periodic wraps."""
    cell: CellSpec
    grid: GridSpec
    links: GaugeLinks
    matrix: sp.csr_matrix

    def apply(self, u: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(u).ravel()).reshape(self.grid.shape)

    def quadratic_form(self, u: np.ndarray) -> float:
        return float(np.real(inner(u, self.apply(u), self.grid)))

    def rayleigh(self, u: np.ndarray) -> float:
        return self.quadratic_form(u) / float(np.real(inner(u, u, self.grid)))


def assemble_landau(cell: CellSpec, grid: GridSpec) -> LandauOperator:
    if abs(grid.side_length - cell.R) > 1e-12 * cell.R:
        raise GridMismatchError(f"grid side {grid.side_length} != cell side R={cell.R}")
    check_quantization(grid.side_length, cell.N)
    links = make_links(canonical_potential, grid, magnetic_periodic(cell.N))
    return LandauOperator(cell, grid, links, covariant_laplacian(links).tocsr())


@dataclass(eq=False)
class SpectralResult:
    cell: CellSpec
    grid: GridSpec
    eigenvalues: np.ndarray
    eigenfields: List[ComplexField]
    lll_count: int
    residuals: np.ndarray = field(default=None)
    operator: Optional[LandauOperator] = field(default=None, repr=False)

    @property
    def basis(self) -> np.ndarray:
        """Eigenfields stacked as columns of an ``(M^2, count)`` array."""
        return np.stack([e.values.ravel() for e in self.eigenfields], axis=1)

    @property
    def lll_basis(self) -> np.ndarray:
        return self.basis[:, : self.lll_count]

    def save(self, directory) -> Path:
        """Eigenfields as field files plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for k, e in enumerate(self.eigenfields):
            name = f"eigenfield_{k:03d}.fld"
            save_field(d / name, e)
            names.append(name)
        manifest = {
            "schema_version": 1,
            "N": self.cell.N,
            "R": self.cell.R,
            "M": self.grid.points_per_side,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "lll_count": self.lll_count,
            "cluster_threshold": CLUSTER_THRESHOLD,
            "residuals": [float(x) for x in self.residuals] if self.residuals is not None else None,
            "fields": names,
        }
        path = d / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, directory) -> "SpectralResult":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        fields = [load_field(d / name) for name in man["fields"]]
        cell = CellSpec(man["N"])
        return cls(cell, fields[0].grid, np.array(man["eigenvalues"]), fields, man["lll_count"],
                   np.array(man["residuals"]) if man.get("residuals") else None)


def lowest_eigenpairs(op: LandauOperator, count: int, tol: float = 1e-8, seed: int = 0) -> SpectralResult:
    """The ``count`` smallest eigenpairs of the discrete Landau operator.

    Block inverse subspace iteration (sparse LU of the operator) with a
    Rayleigh-Ritz step per sweep.  A block method is used on purpose: the
    lowest level is exactly degenerate on the lattice, which single-vector
    Lanczos can under-count.  The block carries guard vectors so that the
    wanted pairs converge at a rate bounded away from one.  Residuals are
    measured in the h^2-weighted norm on normalized fields.
    """
    grid = op.grid
    n = grid.points_per_side**2
    if count < 1 or count > n:
        raise ValueError(f"count={count} must lie in [1, {n}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = min(n, count + max(op.cell.N, 4) + 4)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) + 1j * rng.standard_normal((n, p))
    X, _ = np.linalg.qr(X)
    A = op.matrix.tocsc()
    lu = spla.splu(A)
    max_sweeps = max(50, MATVECS_PER_PAIR * count // p)
    res = np.full(count, np.inf)
    for sweep in range(max_sweeps):
        Q, _ = np.linalg.qr(lu.solve(X))
        Hs = Q.conj().T @ (A @ Q)
        w, Y = np.linalg.eigh(0.5 * (Hs + Hs.conj().T))
        X = Q @ Y
        res = _residuals(A, w[:count], X[:, :count])
        if np.all(res <= 0.1 * tol):
            break
    else:
        raise EigensolverError(
            f"eigensolver did not converge in {max_sweeps} sweeps; "
            f"residuals {np.array2string(res, precision=2)}")
    w, X = w[:count], X[:, :count]
    X = X / grid.spacing        # h^2 sum |e|^2 = 1
    fields = [ComplexField(grid, X[:, k].reshape(grid.shape), op.links.bc) for k in range(count)]
    lll = int(np.sum(w < CLUSTER_THRESHOLD))
    return SpectralResult(op.cell, grid, w, fields, lll, res, op)


def _residuals(A, w, X) -> np.ndarray:
    # unit vectors in the plain norm are unit fields in the weighted norm up to h,
    # and the weighted residual of a normalized field equals the plain one.
    X = X / np.linalg.norm(X, axis=0)
    return np.linalg.norm(A @ X - X * np.asarray(w)[None, :], axis=0)


def landau_spectrum(N: int, points_per_side: int, count: Optional[int] = None, tol: float = 1e-8,
                    seed: int = 0) -> SpectralResult:
    cell = CellSpec(N)
    op = assemble_landau(cell, cell.grid(points_per_side))
    return lowest_eigenpairs(op, count if count is not None else N + 4, tol=tol, seed=seed)


def _coerce(spec: SpectralResult, f) -> np.ndarray:
    if isinstance(f, ComplexField):
        if f.grid != spec.grid or f.bc != magnetic_periodic(spec.cell.N):
            raise GridMismatchError("field does not live on the spectral cell grid")
        return f.values
    arr = np.asarray(f, dtype=complex)
    if arr.shape != spec.grid.shape:
        raise GridMismatchError("array does not match the spectral cell grid")
    return arr


def lll_coefficients(spec: SpectralResult, f) -> np.ndarray:
    vals = _coerce(spec, f)
    return spec.grid.spacing**2 * (spec.lll_basis.conj().T @ vals.ravel())


def project_lll(spec: SpectralResult, f) -> ComplexField:
    """Orthogonal projection onto the span of the LLL cluster."""
    c = lll_coefficients(spec, f)
    vals = (spec.lll_basis @ c).reshape(spec.grid.shape)
    return ComplexField(spec.grid, vals, magnetic_periodic(spec.cell.N))


@dataclass
class GapReport:
    gamma: float
    rayleigh: float
    r2: float
    r4: float
    bound2: float
    c4: float
    holds2: bool


def check_gap_lemma(spec: SpectralResult, f, gamma: float) -> GapReport:
    """Distance of a low-energy field from the LLL, in L2 and L4.

    Admissible fields satisfy ``Q(f) <= (1 + gamma) ||f||^2``.  The L2 bound
    ``sqrt(gamma / (2 - gamma))`` follows from ``mu_1 = 1`` and ``mu_2 >= 3``;
    the L4 constant ``C_4 = r4 / sqrt(gamma)`` is only measured.
    """
    if not 0 < gamma < 0.5:
        raise ValueError(f"gamma must lie in (0, 1/2), got {gamma}")
    vals = _coerce(spec, f)
    op = spec.operator
    if op is None:
        op = assemble_landau(spec.cell, spec.grid)
    nrm2 = float(np.real(inner(vals, vals, spec.grid)))
    if nrm2 <= 0:
        raise GapHypothesisError("zero field")
    rq = op.quadratic_form(vals) / nrm2
    if rq > (1.0 + gamma) * (1.0 + 1e-12):
        raise GapHypothesisError(f"Rayleigh quotient {rq:.6f} exceeds 1 + gamma = {1 + gamma}")
    rest = vals - project_lll(spec, vals).values
    h2 = spec.grid.spacing**2
    r2 = float(np.sqrt(h2 * np.sum(np.abs(rest) ** 2) / nrm2))
    r4 = float((h2 * np.sum(np.abs(rest) ** 4)) ** 0.25 / np.sqrt(nrm2))
    bound = float(np.sqrt(gamma / (2.0 - gamma)))
    return GapReport(gamma, rq, r2, r4, bound, r4 / np.sqrt(gamma), r2 <= bound * (1 + 1e-6))

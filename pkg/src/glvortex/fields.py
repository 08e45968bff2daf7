"""Grids, complex fields, Peierls gauge links and covariant differences.

Conventions used throughout the package:

* samples live at cell centres ``x_i = -L/2 + (i + 1/2) h`` and arrays are
  indexed ``values[ix, iy]``;
* ``links.horizontal[ix, iy]`` is the phase carried by the edge from site
  ``(ix, iy)`` to ``(ix + 1, iy)``, ``links.vertical[ix, iy]`` the edge to
  ``(ix, iy + 1)``;  a link is ``exp(-i c * int A.dl)`` so that
  ``U u(x + h e) - u(x)`` approximates ``h (d - i c A) u``;
* for magnetic-periodic fields the wrap phases of the quasi-periodicity
  conditions are folded into the last column/row of links.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp

QUANTIZATION_TOL = 1e-12
FIELD_MAGIC = "GLVORTEX-FIELD-1"


class GridMismatchError(ValueError):
    pass


class QuantizationError(ValueError):
    pass


class FieldFormatError(ValueError):
    pass


class TruncatedFieldError(FieldFormatError):
    pass


class ChecksumError(FieldFormatError):
    pass


@dataclass(frozen=True)
class GridSpec:
    side_length: float
    points_per_side: int

    def __post_init__(self):
        if not self.side_length > 0:
            raise ValueError(f"side_length must be positive, got {self.side_length}")
        if int(self.points_per_side) != self.points_per_side or self.points_per_side < 8:
            raise ValueError(f"points_per_side must be an integer >= 8, got {self.points_per_side}")

    @property
    def spacing(self) -> float:
        return self.side_length / self.points_per_side

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.points_per_side, self.points_per_side)

    def centers(self) -> np.ndarray:
        h = self.spacing
        return -0.5 * self.side_length + h * (np.arange(self.points_per_side) + 0.5)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        c = self.centers()
        return np.meshgrid(c, c, indexing="ij")

    def nodes(self) -> np.ndarray:
        """Cell-corner coordinates (``M + 1`` of them)."""
        return -0.5 * self.side_length + self.spacing * np.arange(self.points_per_side + 1)


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str
    flux: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("dirichlet", "natural", "magnetic_periodic"):
            raise ValueError(f"unknown boundary condition {self.kind!r}")
        if self.kind == "magnetic_periodic":
            if self.flux is None or int(self.flux) != self.flux or self.flux < 1:
                raise ValueError("magnetic_periodic needs a positive integer flux N")
        elif self.flux is not None:
            raise ValueError(f"{self.kind} boundary condition takes no flux")

    @property
    def periodic(self) -> bool:
        return self.kind == "magnetic_periodic"

    def tag(self) -> str:
        return f"magnetic_periodic({self.flux})" if self.periodic else self.kind


DIRICHLET = BoundaryCondition("dirichlet")
NATURAL = BoundaryCondition("natural")


def magnetic_periodic(n: int) -> BoundaryCondition:
    return BoundaryCondition("magnetic_periodic", int(n))


def check_quantization(side_length: float, n: int, field_strength: float = 1.0) -> None:
    """Reject a cell whose flux ``field_strength * R^2`` is not ``2 pi N``."""
    defect = field_strength * side_length**2 - 2.0 * np.pi * n
    if abs(defect) > QUANTIZATION_TOL * max(1.0, 2.0 * np.pi * n):
        raise QuantizationError(
            f"flux quantization violated: N={n}, R^2={side_length**2!r}, "
            f"2*pi*N={2 * np.pi * n!r} (defect {defect:.3e})"
        )


@dataclass(frozen=True, eq=False)
class ComplexField:
    grid: GridSpec
    values: np.ndarray
    bc: BoundaryCondition = NATURAL

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128)
        if vals.shape != self.grid.shape:
            raise GridMismatchError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> "ComplexField":
        return ComplexField(self.grid, values, self.bc)

    def norm(self) -> float:
        return float(np.sqrt(integrate(np.abs(self.values) ** 2, self.grid)))


@dataclass(frozen=True, eq=False)
class GaugeLinks:
    grid: GridSpec
    horizontal: np.ndarray
    vertical: np.ndarray
    bc: BoundaryCondition = NATURAL
    # wrap factors already multiplied into the last column/row of links;
    # kept for inspection and for the file manifest.
    wrap_x: Optional[np.ndarray] = None
    wrap_y: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("horizontal", "vertical"):
            arr = np.asarray(getattr(self, name), dtype=np.complex128)
            if arr.shape != self.grid.shape:
                raise GridMismatchError(f"{name} links have shape {arr.shape}, grid is {self.grid.shape}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class GaugeTransform:
    grid: GridSpec
    phase: np.ndarray

    def __post_init__(self):
        ph = np.asarray(self.phase, dtype=float)
        if ph.shape != self.grid.shape:
            raise GridMismatchError("gauge phase shape does not match grid")
        if not np.all(np.isfinite(ph)):
            raise ValueError("gauge phase must be finite")
        object.__setattr__(self, "phase", ph.copy())


def canonical_potential(x, y):
    """The symmetric gauge ``A0 = (-y, x) / 2`` with unit curl."""
    return -0.5 * np.asarray(y), 0.5 * np.asarray(x)


Potential = Union[Callable, Tuple[np.ndarray, np.ndarray], None]


def edge_integrals(potential: Potential, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Midpoint-rule line integrals of ``A`` along every forward edge.

    ``potential`` is either a callable ``(x, y) -> (Ax, Ay)`` or a pair of
    arrays holding ``Ax`` sampled at horizontal-edge midpoints and ``Ay`` at
    vertical-edge midpoints.
    """
    h = grid.spacing
    if potential is None:
        z = np.zeros(grid.shape)
        return z, z.copy()
    if callable(potential):
        c = grid.centers()
        xm, ym = np.meshgrid(c + 0.5 * h, c, indexing="ij")
        ax, _ = potential(xm, ym)
        xm, ym = np.meshgrid(c, c + 0.5 * h, indexing="ij")
        _, ay = potential(xm, ym)
        ax = np.broadcast_to(np.asarray(ax, dtype=float), grid.shape)
        ay = np.broadcast_to(np.asarray(ay, dtype=float), grid.shape)
    else:
        ax, ay = (np.asarray(a, dtype=float) for a in potential)
        if ax.shape != grid.shape or ay.shape != grid.shape:
            raise GridMismatchError("sampled potential does not match grid")
    return ax * h, ay * h


def make_links(potential: Potential, grid: GridSpec, bc: BoundaryCondition = NATURAL,
               field_strength: float = 1.0) -> GaugeLinks:
    """Peierls phases ``exp(-i field_strength int A.dl)`` on the grid edges.

    For ``bc = magnetic_periodic(N)`` the cell must carry exactly ``N`` flux
    quanta and the wrap edges pick up the factors ``exp(i f R y / 2)``
    (x-wrap) and ``exp(-i f R x / 2)`` (y-wrap) belonging to the symmetric
    gauge; ``potential`` is then expected to be ``A0`` plus a periodic part.
    """
    ix, iy = edge_integrals(potential, grid)
    hor = np.exp(-1j * field_strength * ix)
    ver = np.exp(-1j * field_strength * iy)
    wrap_x = wrap_y = None
    if bc.periodic:
        R = grid.side_length
        check_quantization(R, bc.flux, field_strength)
        c = grid.centers()
        wrap_x = np.exp(0.5j * field_strength * R * c)     # indexed by y
        wrap_y = np.exp(-0.5j * field_strength * R * c)    # indexed by x
        hor[-1, :] *= wrap_x
        ver[:, -1] *= wrap_y
    return GaugeLinks(grid, hor, ver, bc, wrap_x, wrap_y)


def _check_pair(u: ComplexField, links: GaugeLinks) -> None:
    if u.grid != links.grid:
        raise GridMismatchError(f"field grid {u.grid} != link grid {links.grid}")
    if u.bc != links.bc:
        raise GridMismatchError(f"field bc {u.bc.tag()} != link bc {links.bc.tag()}")


def forward_differences(values: np.ndarray, links: GaugeLinks) -> Tuple[np.ndarray, np.ndarray]:
    """``U_j(x) u(x + h e_j) - u(x)`` on every forward edge (not divided by h).

    Edges leaving the grid are zeroed for natural fields; for Dirichlet
    fields the outside neighbour is zero.
    """
    dx = links.horizontal * np.roll(values, -1, axis=0) - values
    dy = links.vertical * np.roll(values, -1, axis=1) - values
    kind = links.bc.kind
    if kind == "natural":
        dx[-1, :] = 0.0
        dy[:, -1] = 0.0
    elif kind == "dirichlet":
        dx[-1, :] = -values[-1, :]
        dy[:, -1] = -values[:, -1]
    return dx, dy


def covariant_energy_density(u: ComplexField, links: GaugeLinks) -> np.ndarray:
    """Kinetic density ``sum_j |U_j u(x + h e_j) - u(x)|^2 / h^2``.

    For Dirichlet fields the edges entering the grid from the zero exterior
    (left and bottom rings) are booked on the first site, so the integral is
    the full quadratic form.
    """
    _check_pair(u, links)
    dx, dy = forward_differences(u.values, links)
    dens = np.abs(dx) ** 2 + np.abs(dy) ** 2
    if links.bc.kind == "dirichlet":
        dens[0, :] += np.abs(u.values[0, :]) ** 2
        dens[:, 0] += np.abs(u.values[:, 0]) ** 2
    return dens / links.grid.spacing**2


def apply_gauge(u: ComplexField, links: GaugeLinks, g: GaugeTransform,
                coupling: float = 1.0) -> Tuple[ComplexField, GaugeLinks]:
    """``u -> exp(i c phi) u`` together with ``A -> A + grad phi`` on the links."""
    _check_pair(u, links)
    if g.grid != u.grid:
        raise GridMismatchError("gauge transform grid mismatch")
    phi = g.phase
    u2 = u.with_values(np.exp(1j * coupling * phi) * u.values)
    hor = links.horizontal * np.exp(-1j * coupling * (np.roll(phi, -1, axis=0) - phi))
    ver = links.vertical * np.exp(-1j * coupling * (np.roll(phi, -1, axis=1) - phi))
    return u2, GaugeLinks(links.grid, hor, ver, links.bc, links.wrap_x, links.wrap_y)


def integrate(f: np.ndarray, grid: GridSpec, mask: Optional[np.ndarray] = None) -> float:
    """Midpoint quadrature ``h^2 sum f`` (optionally restricted to ``mask``)."""
    f = np.asarray(f)
    if f.shape != grid.shape:
        raise GridMismatchError(f"integrand shape {f.shape} != grid {grid.shape}")
    if mask is not None:
        f = np.where(mask, f, 0.0)
    return float(grid.spacing**2 * np.sum(f))


def inner(u: np.ndarray, v: np.ndarray, grid: GridSpec) -> complex:
    """Discrete L2 product ``h^2 sum conj(u) v``."""
    return complex(grid.spacing**2 * np.vdot(u, v))


def covariant_laplacian(links: GaugeLinks) -> sp.csr_matrix:
    """Sparse matrix ``K`` with ``h^2 <u, K u> = integrate(covariant_energy_density)``.

    Vectorisation is C-order of ``values[ix, iy]``.
    """
    grid = links.grid
    M = grid.points_per_side
    n = M * M
    idx = np.arange(n).reshape(M, M)
    kind = links.bc.kind
    diag = np.zeros((M, M))
    rows, cols, vals = [], [], []
    for axis, lk in ((0, links.horizontal), (1, links.vertical)):
        nb = np.roll(idx, -1, axis=axis)
        keep = np.ones((M, M), dtype=bool)
        if kind != "magnetic_periodic":
            if axis == 0:
                keep[-1, :] = False
            else:
                keep[:, -1] = False
        # each kept edge (x -> x+e) contributes |U u_+ - u_x|^2
        diag += keep
        diag += np.roll(keep, 1, axis=axis)
        rows.append(idx[keep]); cols.append(nb[keep]); vals.append(-lk[keep])
        rows.append(nb[keep]); cols.append(idx[keep]); vals.append(-np.conj(lk[keep]))
        if kind == "dirichlet":
            # edges to the zero exterior on both sides
            diag += ~keep
            diag += ~np.roll(keep, 1, axis=axis)
    rows.append(idx.ravel()); cols.append(idx.ravel()); vals.append(diag.ravel().astype(complex))
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return K / grid.spacing**2


def plaquettes(links: GaugeLinks) -> np.ndarray:
    """Oriented product of the four links around every plaquette.

    Entry ``[ix, iy]`` is the plaquette with lower-left site ``(ix, iy)``;
    for non-periodic links only the ``(M-1) x (M-1)`` interior plaquettes
    are returned.
    """
    H, V = links.horizontal, links.vertical
    p = H * np.roll(V, -1, axis=0) * np.conj(np.roll(H, -1, axis=1)) * np.conj(V)
    if not links.bc.periodic:
        p = p[:-1, :-1]
    return p


# ----------------------------------------------------------------------------
# field files

def _bc_from_tag(tag: str, n) -> BoundaryCondition:
    if tag.startswith("magnetic_periodic"):
        return magnetic_periodic(n)
    return BoundaryCondition(tag)


def save_field(path, u: ComplexField) -> None:
    """One JSON header line, then little-endian (re, im) float64 pairs, C order."""
    payload = np.ascontiguousarray(u.values, dtype="<c16").tobytes()
    header = {
        "magic": FIELD_MAGIC,
        "M": u.grid.points_per_side,
        "side_length": u.grid.side_length,
        "bc": u.bc.kind,
        "N": u.bc.flux,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        fh.write(payload)


def load_field(path) -> ComplexField:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FieldFormatError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: bad magic string")
    try:
        M = int(header["M"])
        side = float(header["side_length"])
        bc = _bc_from_tag(header["bc"], header.get("N"))
        checksum = header["checksum"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FieldFormatError(f"{path}: malformed header ({exc})") from None
    payload = raw[nl + 1:]
    expected = M * M * 16
    if len(payload) != expected:
        raise TruncatedFieldError(f"{path}: payload has {len(payload)} bytes, M={M} needs {expected}")
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise ChecksumError(f"{path}: checksum mismatch")
    values = np.frombuffer(payload, dtype="<c16").reshape(M, M)
    return ComplexField(GridSpec(side, M), values.astype(np.complex128), bc)

import math

import numpy as np
import pytest

from glvortex.fields import (DIRICHLET, NATURAL, ChecksumError, ComplexField, FieldFormatError, GaugeTransform,
                             GridMismatchError, GridSpec, QuantizationError, TruncatedFieldError,
                             apply_gauge, canonical_potential, covariant_energy_density,
                             covariant_laplacian, integrate, load_field, magnetic_periodic, make_links,
                             plaquettes, save_field)


def cell_grid(N, M):
    return GridSpec(math.sqrt(2 * math.pi * N), M)


def rand_field(grid, bc=NATURAL, seed=0):
    rng = np.random.default_rng(seed)
    return ComplexField(grid, rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape), bc)


def test_grid_invariants():
    g = GridSpec(2.0, 16)
    assert g.spacing * g.points_per_side == 2.0
    with pytest.raises(ValueError):
        GridSpec(1.0, 7)
    with pytest.raises(ValueError):
        GridSpec(-1.0, 16)


def test_field_rejects_nan_and_shape():
    g = GridSpec(1.0, 8)
    v = np.zeros(g.shape, dtype=complex)
    v[2, 3] = np.nan
    with pytest.raises(ValueError):
        ComplexField(g, v)
    with pytest.raises(GridMismatchError):
        ComplexField(g, np.zeros((9, 8)))


def test_zero_potential_links_are_one():
    g = GridSpec(3.0, 12)
    lk = make_links(None, g)
    assert np.all(lk.horizontal == 1) and np.all(lk.vertical == 1)


@pytest.mark.parametrize("bc,N", [(NATURAL, None), (DIRICHLET, None), ("mp", 1), ("mp", 4)])
def test_plaquette_flux_uniform(bc, N):
    g = cell_grid(N or 2, 24)
    b = magnetic_periodic(N) if bc == "mp" else bc
    lk = make_links(canonical_potential, g, b)
    assert np.max(np.abs(np.abs(lk.horizontal) - 1)) <= 1e-12
    assert np.max(np.abs(np.abs(lk.vertical) - 1)) <= 1e-12
    p = plaquettes(lk)
    dev = np.angle(p * np.exp(1j * g.spacing**2))
    assert np.max(np.abs(dev)) <= 1e-12
    if bc == "mp":
        assert p.shape == g.shape
        # total flux through the cell is 2 pi N
        assert abs(-np.sum(np.angle(p)) - 2 * math.pi * N) <= 1e-9


def test_quantization_rejected():
    with pytest.raises(QuantizationError, match="N=1"):
        make_links(canonical_potential, GridSpec(2.5, 16), magnetic_periodic(1))


def test_constant_field_zero_density():
    g = GridSpec(2.0, 16)
    u = ComplexField(g, np.full(g.shape, 0.3 + 0.4j))
    assert np.all(covariant_energy_density(u, make_links(None, g)) == 0)


def test_plane_wave_density_second_order():
    th = np.array([1.3, -0.7])
    errs = []
    for M in (32, 64, 128):
        g = GridSpec(2.0, M)
        X, Y = g.mesh()
        u = ComplexField(g, np.exp(1j * (th[0] * X + th[1] * Y)))
        d = covariant_energy_density(u, make_links(None, g))
        errs.append(np.max(np.abs(d[:-1, :-1] - th @ th)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)


@pytest.mark.parametrize("bc", [NATURAL, DIRICHLET, magnetic_periodic(2)])
def test_gauge_covariance(bc):
    g = cell_grid(2, 20)
    lk = make_links(canonical_potential, g, bc)
    u = rand_field(g, bc)
    X, Y = g.mesh()
    phi = GaugeTransform(g, np.sin(X) * np.cos(0.5 * Y) + 0.3 * X * Y)
    if bc.periodic:
        # keep the transform periodic so the wrap stays consistent
        phi = GaugeTransform(g, np.sin(2 * np.pi * X / g.side_length) * np.cos(2 * np.pi * Y / g.side_length))
    u2, lk2 = apply_gauge(u, lk, phi)
    d1 = covariant_energy_density(u, lk)
    d2 = covariant_energy_density(u2, lk2)
    assert np.max(np.abs(d1 - d2)) <= 1e-12 * np.max(d1)
    E1, E2 = integrate(d1, g), integrate(d2, g)
    assert abs(E1 - E2) / (1 + abs(E1)) <= 1e-12


def test_gauge_identity_and_constant():
    g = GridSpec(2.0, 10)
    lk = make_links(canonical_potential, g)
    u = rand_field(g)
    u0, lk0 = apply_gauge(u, lk, GaugeTransform(g, np.zeros(g.shape)))
    assert np.array_equal(u0.values, u.values) and np.array_equal(lk0.horizontal, lk.horizontal)
    uc, lkc = apply_gauge(u, lk, GaugeTransform(g, np.full(g.shape, 0.7)))
    assert np.allclose(lkc.horizontal, lk.horizontal, atol=1e-15)
    assert np.allclose(uc.values, np.exp(0.7j) * u.values)


@pytest.mark.parametrize("bc", [NATURAL, DIRICHLET, magnetic_periodic(1)])
def test_laplacian_matches_density(bc):
    g = cell_grid(1, 16)
    lk = make_links(canonical_potential, g, bc)
    K = covariant_laplacian(lk)
    u = rand_field(g, bc, seed=3)
    q = g.spacing**2 * np.real(np.vdot(u.values.ravel(), K @ u.values.ravel()))
    assert abs(q - integrate(covariant_energy_density(u, lk), g)) <= 1e-12 * abs(q)
    assert abs(K - K.conj().T).max() <= 1e-12


def test_integrate():
    g = cell_grid(3, 30)
    assert abs(integrate(np.ones(g.shape), g) - g.side_length**2) <= 1e-12
    X, Y = g.mesh()
    ell = 1.5
    m = (np.abs(X) < ell / 2) & (np.abs(Y) < ell / 2)
    assert abs(integrate(np.ones(g.shape), g, m) - ell**2) <= 4 * ell * g.spacing


@pytest.mark.parametrize("bc", [NATURAL, DIRICHLET, magnetic_periodic(3)])
def test_field_roundtrip_bit_exact(tmp_path, bc):
    g = cell_grid(3, 17)
    u = rand_field(g, bc, seed=5)
    p = tmp_path / "u.fld"
    save_field(p, u)
    w = load_field(p)
    assert w.grid == u.grid and w.bc == u.bc
    assert w.values.tobytes() == u.values.tobytes()


def test_field_file_errors(tmp_path):
    g = GridSpec(1.0, 8)
    p = tmp_path / "u.fld"
    save_field(p, rand_field(g))
    raw = p.read_bytes()
    nl = raw.index(b"\n")
    (tmp_path / "magic.fld").write_bytes(raw.replace(b"GLVORTEX-FIELD-1", b"NOTAFIELD-FILE-1"))
    with pytest.raises(FieldFormatError, match="magic"):
        load_field(tmp_path / "magic.fld")
    (tmp_path / "short.fld").write_bytes(raw[:-16])
    with pytest.raises(TruncatedFieldError):
        load_field(tmp_path / "short.fld")
    bad = bytearray(raw)
    bad[nl + 5] ^= 0xFF
    (tmp_path / "sum.fld").write_bytes(bytes(bad))
    with pytest.raises(ChecksumError):
        load_field(tmp_path / "sum.fld")
    (tmp_path / "hdr.fld").write_bytes(b"{not json\n" + raw[nl + 1:])
    with pytest.raises(FieldFormatError):
        load_field(tmp_path / "hdr.fld")

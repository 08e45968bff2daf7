import math

import numpy as np
import pytest

from glvortex.fields import ComplexField, GridMismatchError, GridSpec, magnetic_periodic
from glvortex.landau import (CellSpec, GapHypothesisError, SpectralResult, assemble_landau, check_gap_lemma,
                             landau_spectrum, lll_coefficients, project_lll)
from glvortex.theta import evaluate_lll, principal_angles, theta_lll_oracle


@pytest.fixture(scope="module")
def spec4():
    return landau_spectrum(4, 48, count=8)


def rand(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_cellspec_validation():
    assert abs(CellSpec(3).R ** 2 - 6 * math.pi) < 1e-12
    with pytest.raises(ValueError):
        CellSpec(0)
    with pytest.raises(ValueError):
        CellSpec(1, b=1.6)
    with pytest.raises(GridMismatchError):
        assemble_landau(CellSpec(1), GridSpec(2.0, 16))


def test_operator_hermitian_and_nonnegative():
    op = assemble_landau(CellSpec(2), CellSpec(2).grid(24))
    for s in range(10):
        u, v = rand(op.grid.shape, s), rand(op.grid.shape, 100 + s)
        a = np.vdot(op.apply(u).ravel(), v.ravel())
        b = np.vdot(u.ravel(), op.apply(v).ravel())
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))
        assert op.quadratic_form(u) >= 0
    # constant input is not annihilated because A0 != 0
    assert np.linalg.norm(op.apply(np.ones(op.grid.shape))) > 0


def test_n1_spectrum():
    s = landau_spectrum(1, 64, count=3)
    assert abs(s.eigenvalues[0] - 1) <= 5e-3
    assert s.eigenvalues[1] >= 2.8
    assert s.lll_count == 1


def test_spectral_result_contract(spec4):
    s = spec4
    assert s.lll_count == 4
    assert np.all(np.diff(s.eigenvalues) >= -1e-12)
    assert np.all(s.eigenvalues[:4] < 2.0) and s.eigenvalues[4] >= 2.8
    B = s.basis
    G = s.grid.spacing**2 * (B.conj().T @ B)
    assert np.max(np.abs(G - np.eye(len(s.eigenvalues)))) <= 1e-10
    assert np.all(s.residuals <= 1e-8)
    for k, e in enumerate(s.eigenfields):
        assert e.bc == magnetic_periodic(4)
        r = s.operator.apply(e.values) - s.eigenvalues[k] * e.values
        assert math.sqrt(s.grid.spacing**2 * np.sum(np.abs(r) ** 2)) <= 1e-8


def test_refinement_order():
    mus = [landau_spectrum(1, M, count=2).eigenvalues[0] for M in (16, 32, 64)]
    e = np.abs(np.array(mus) - 1)
    assert math.log2(e[0] / e[1]) >= 1.8 and math.log2(e[1] / e[2]) >= 1.8


def test_projector(spec4):
    s = spec4
    e1, e5 = s.eigenfields[0], s.eigenfields[4]
    assert np.max(np.abs(project_lll(s, e1).values - e1.values)) <= 1e-10
    assert np.max(np.abs(project_lll(s, e5).values)) <= 1e-10
    f = ComplexField(s.grid, rand(s.grid.shape, 7), magnetic_periodic(4))
    p = project_lll(s, f)
    h2 = s.grid.spacing**2
    n = lambda a: h2 * np.sum(np.abs(a) ** 2)
    assert abs(n(p.values) + n(f.values - p.values) - n(f.values)) <= 1e-10 * n(f.values)
    pp = project_lll(s, p)
    assert np.max(np.abs(pp.values - p.values)) <= 1e-10 * np.max(np.abs(p.values))
    g = rand(s.grid.shape, 8)
    assert abs(h2 * np.vdot(g, p.values) - h2 * np.vdot(project_lll(s, g).values, f.values)) <= 1e-10 * n(f.values)
    with pytest.raises(GridMismatchError):
        project_lll(s, np.zeros((10, 10)))


def two_mode(s, gamma):
    mu1, mun = s.eigenvalues[0], s.eigenvalues[s.lll_count]
    t = (1 + gamma - mu1) / (mun - mu1)          # sin^2 of the mixing angle
    f = math.sqrt(1 - t) * s.eigenfields[0].values + math.sqrt(t) * s.eigenfields[s.lll_count].values
    return f, math.sqrt(t)


def test_gap_lemma_lll_and_two_mode(spec4):
    s = spec4
    assert check_gap_lemma(s, s.eigenfields[2], 0.1).r2 <= 1e-10
    for gamma in (0.05, 0.1, 0.3):
        f, r = two_mode(s, gamma)
        rep = check_gap_lemma(s, f, gamma)
        assert abs(rep.rayleigh - (1 + gamma)) <= 1e-9
        assert abs(rep.r2 - r) <= 1e-9


def test_gap_bound_extreme_field_resolved_grid():
    # the extreme admissible field saturates the bound up to the O(h^2)
    # shifts of mu_1 and mu_{N+1}; at 64 points per sqrt(N) these favour it
    s = landau_spectrum(4, 128, count=6)
    for gamma in (0.05, 0.1, 0.3):
        f, r = two_mode(s, gamma)
        rep = check_gap_lemma(s, f, gamma)
        assert rep.holds2 and rep.r2 <= math.sqrt(gamma / (2 - gamma))
        assert abs(rep.r2 / math.sqrt(gamma / 2) - 1) <= 5e-3     # continuum sin^2 = gamma / 2


def test_gap_lemma_rejects(spec4):
    s = spec4
    with pytest.raises(GapHypothesisError):
        check_gap_lemma(s, s.eigenfields[4], 0.1)
    with pytest.raises(ValueError):
        check_gap_lemma(s, s.eigenfields[0], 0.6)


def test_spectral_save_load(tmp_path, spec4):
    spec4.save(tmp_path / "spec")
    t = SpectralResult.load(tmp_path / "spec")
    assert np.array_equal(t.eigenvalues, spec4.eigenvalues) and t.lll_count == 4
    assert t.eigenfields[3].values.tobytes() == spec4.eigenfields[3].values.tobytes()


def test_theta_oracle_n1_rayleigh():
    cell = CellSpec(1)
    grid = cell.grid(64)
    f = theta_lll_oracle(cell, grid)
    assert len(f) == 1
    op = assemble_landau(cell, grid)
    assert abs(op.rayleigh(f[0].values) - 1) <= 5e-3


@pytest.mark.parametrize("N", [1, 4])
def test_theta_span_matches_eigensolver(N):
    s = landau_spectrum(N, 64 * int(math.sqrt(N)), count=N + 2)
    B = np.stack([f.values.ravel() for f in theta_lll_oracle(s.cell, s.grid)], axis=1)
    assert np.max(principal_angles(s.lll_basis, B)) <= 1e-4


def test_theta_quasi_periodicity():
    cell = CellSpec(3)
    R = cell.R
    rng = np.random.default_rng(0)
    x, y = rng.uniform(-R / 2, R / 2, (2, 50))
    c = rand(3, 1)
    u = evaluate_lll(x, y, cell, c)
    for m, n in ((1, 0), (0, 1), (1, 1), (-2, 1)):
        v1, v2 = m * R, n * R
        eta = -1.0 if (cell.N * m * n) % 2 else 1.0
        w = evaluate_lll(x + v1, y + v2, cell, c)
        assert np.max(np.abs(w - eta * np.exp(0.5j * (v1 * y - v2 * x)) * u)) <= 1e-10 * np.max(np.abs(u))


def test_theta_oracle_limits():
    cell = CellSpec(37)
    with pytest.raises(ValueError):
        theta_lll_oracle(cell, cell.grid(16))
    with pytest.raises(ValueError):
        theta_lll_oracle(CellSpec(1), GridSpec(2.0, 16))

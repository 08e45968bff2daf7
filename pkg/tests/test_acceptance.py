"""Acceptance criteria 1-10; each test prints one PASS/FAIL line.

Tolerances and sweeps are the fixed acceptance values; nothing here is tuned
to the results.  The kappa campaign (criteria 7-10) runs once per session.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from glvortex.cell import (ReducedFunctional, abrikosov_constant, abrikosov_energy_grad, brute_force_abrikosov,
                           cell_inequalities, estimate_eab, scalar_abrikosov_minimum)
from glvortex.domain import DomainFunctional, DomainState, GLParams, design_grid, gl_energy
from glvortex.fields import (DIRICHLET, ComplexField, GaugeTransform, GridSpec, apply_gauge, canonical_potential,
                             covariant_energy_density, integrate, load_field, magnetic_periodic, make_links,
                             save_field)
from glvortex.harness import BANDS, CampaignConfig, build_schedule, run_campaign
from glvortex.landau import CellSpec, check_gap_lemma, landau_spectrum
from glvortex.theta import principal_angles, theta_lll_oracle

pytestmark = pytest.mark.slow

SPECTRAL_N = (1, 2, 4, 9, 16)
CAMPAIGN_KAPPA = (20, 30, 40, 60)
OUT = Path(__file__).resolve().parent.parent / "acceptance_out"


def cell_points(N, base=64):
    return int(round(base * math.sqrt(N)))


@pytest.fixture(scope="session")
def spectra():
    """Spectra on the three refinement grids 16, 32, 64 points per sqrt(N); timed."""
    t0 = time.time()
    out = {}
    for N in SPECTRAL_N:
        for base in (16, 32, 64):
            out[N, base] = landau_spectrum(N, cell_points(N, base), count=N + 8)
    return out, time.time() - t0


@pytest.fixture(scope="session")
def abrikosov():
    t0 = time.time()
    res = {N: abrikosov_constant(N, cell_points(N)) for N in (1, 4, 9, 16)}
    return res, time.time() - t0


# ---------------------------------------------------------------------------


def test_criterion_01_spectral_structure(spectra):
    sp, secs = spectra
    ok = secs <= 300
    worst_mu1 = 0.0
    min_order = math.inf
    lines = []
    for N in SPECTRAL_N:
        s = sp[N, 64]
        below = int(np.sum(s.eigenvalues < 2.0))
        mus = [float(np.mean(sp[N, b].eigenvalues[:N])) for b in (16, 32, 64)]
        order = math.log2((mus[1] - mus[0]) / (mus[2] - mus[1]))
        dev = float(np.max(np.abs(s.eigenvalues[:N] - 1)))
        worst_mu1 = max(worst_mu1, dev)
        min_order = min(min_order, order)
        nxt = float(s.eigenvalues[N])
        ok &= below == N and dev <= 5e-3 and order >= 1.8 and nxt >= 2.8
        lines.append(f"N={N}: {below} below 2, mu_{N + 1}={nxt:.4f}")
    record(1, "spectral structure", ok,
           f"{'; '.join(lines)}; max|mu-1|={worst_mu1:.2e}, min order={min_order:.3f}, {secs:.0f}s")
    assert ok


def _admissible_fields(s, gamma, count, rng):
    """LLL part plus a perturbation orthogonal to the LLL, scaled so that the
    Rayleigh quotient is uniform in [1 + gamma/20, 1 + gamma].  Even draws
    perturb with white noise, odd draws with the next Landau levels only."""
    N = s.lll_count
    op = s.operator
    h2 = s.grid.spacing**2
    L = s.lll_basis
    higher = s.basis[:, N:]
    out = []
    for k in range(count):
        v = L @ (rng.standard_normal(N) + 1j * rng.standard_normal(N))
        if k % 2 == 0:
            g = rng.standard_normal(v.shape) + 1j * rng.standard_normal(v.shape)
        else:
            c = rng.standard_normal(higher.shape[1]) + 1j * rng.standard_normal(higher.shape[1])
            g = higher @ c
        g = g - L @ (h2 * (L.conj().T @ g))
        v, g = v.reshape(s.grid.shape), g.reshape(s.grid.shape)
        nv, ng = h2 * np.sum(np.abs(v) ** 2), h2 * np.sum(np.abs(g) ** 2)
        qv, qg = op.quadratic_form(v), op.quadratic_form(g)
        target = 1 + gamma * rng.uniform(0.05, 1.0)
        t2 = max(0.0, (target * nv - qv) / (qg - target * ng))
        out.append(v + math.sqrt(t2) * g)
    return out


def test_criterion_02_gap_lemma(spectra):
    sp, _ = spectra
    rng = np.random.default_rng(0)
    violations = 0
    total = 0
    worst = 0.0
    for N in SPECTRAL_N:
        s = sp[N, 64]
        for gamma in (0.05, 0.1, 0.3):
            for f in _admissible_fields(s, gamma, 100, rng):
                rep = check_gap_lemma(s, f, gamma)
                total += 1
                bound = math.sqrt(gamma / (2 - gamma)) + 1e-6
                worst = max(worst, rep.r2 / bound)
                violations += rep.r2 > bound
    ok = violations == 0 and total == 100 * 3 * len(SPECTRAL_N)
    record(2, "gap lemma", ok, f"{total} admissible fields, {violations} violations, max r2/bound={worst:.4f}")
    assert ok


def test_criterion_03_theta_oracle(spectra):
    sp, _ = spectra
    angles = {}
    for N in (1, 4):
        s = sp[N, 64]
        B = np.stack([f.values.ravel() for f in theta_lll_oracle(s.cell, s.grid)], axis=1)
        angles[N] = float(np.max(principal_angles(s.lll_basis, B)))
    ok = all(a <= 1e-4 for a in angles.values())
    record(3, "theta-oracle agreement", ok, ", ".join(f"N={n}: {a:.2e}" for n, a in angles.items()))
    assert ok


def test_criterion_04_abrikosov_constant(abrikosov):
    res, secs = abrikosov
    t0 = time.time()
    vals = {N: res[N].c_over_R2 for N in (4, 9, 16)}
    in_band = all(-0.5 <= v <= -0.42 for v in vals.values())
    r1 = res[1]
    closed = scalar_abrikosov_minimum(r1.spectral.eigenfields[0].values, r1.spectral.grid.spacing**2) / r1.cell.R**2
    rel1 = abs(r1.c_over_R2 - closed) / abs(closed)
    beta_form = abs(r1.c_over_R2 + 1 / (2 * r1.beta_ratio)) / abs(closed)
    est = estimate_eab([res[N] for N in (4, 9, 16)])
    bf = brute_force_abrikosov(CellSpec(4), cell_points(4))
    bf_rel = abs(bf / vals[4] - 1)
    secs += time.time() - t0
    ok = (in_band and rel1 <= 1e-8 and beta_form <= 1e-8 and abs(est.extrapolated + 0.43) <= 0.02
          and bf_rel <= 0.01 and secs <= 600)
    record(4, "Abrikosov constant", ok,
           ", ".join(f"c/R^2(N={n})={v:.5f}" for n, v in vals.items())
           + f"; N=1 closed-form rel err {rel1:.1e} (beta={r1.beta_ratio:.5f}); E_Ab extrapolated "
           f"{est.extrapolated:.5f} +- {est.spread:.5f}; brute force N=4 {bf:.5f} ({100 * bf_rel:.2f}% from CG); "
           f"{secs:.0f}s")
    assert ok


def test_criterion_05_cell_inequalities(abrikosov):
    res, _ = abrikosov
    ok = True
    worst_c = 0.0
    max_mod = 0.0
    bad = []
    for N in (1, 4, 9):
        for b in (0.90, 0.95, 0.99):
            r = cell_inequalities(N, b, cell_points(N), abrikosov=res[N])
            c_max = max(r.C_m0_mp, r.C_lower)
            worst_c = max(worst_c, c_max)
            max_mod = max(max_mod, r.max_modulus)
            case_ok = r.ordering_ok and r.sandwich_ok and c_max <= 10 and r.max_modulus <= 1 + 1e-8
            if not case_ok:
                bad.append(f"N={N},b={b}")
            ok &= case_ok
    record(5, "cell inequalities", ok,
           f"9 cases, failing: {bad or 'none'}; max measured C={worst_c:.3f}; max|u|={max_mod:.4f}")
    assert ok


def _rand(shape, rng, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _fd_worst(fun, x, perturb, n=20, eps=1e-5):
    """Worst relative gap between the analytic and central-difference slopes."""
    _, g = fun(x)
    worst = 0.0
    for _ in range(n):
        w = perturb()
        exact = float(np.real(np.vdot(g, w)))
        fd = (fun(x + eps * w)[0] - fun(x - eps * w)[0]) / (2 * eps)
        worst = max(worst, abs(fd - exact) / abs(exact))
    return worst


def test_criterion_06_numerical_hygiene(tmp_path, abrikosov):
    rng = np.random.default_rng(1)
    grads = {}
    cg = CellSpec(1).grid(24)
    for tag, bc in (("dirichlet", DIRICHLET), ("periodic", magnetic_periodic(1))):
        fun = ReducedFunctional(make_links(canonical_potential, cg, bc), 0.93)
        grads["reduced_" + tag] = _fd_worst(fun.energy_grad, _rand(cg.shape, rng, 0.4).ravel(),
                                            lambda: _rand(cg.shape, rng).ravel())
    spec = abrikosov[0][4].spectral
    grads["abrikosov"] = _fd_worst(lambda c: abrikosov_energy_grad(spec.lll_basis, spec.grid.spacing**2, c),
                                   _rand(4, rng), lambda: _rand(4, rng))
    params = GLParams.from_b(10.0, 0.65)
    g = GridSpec(1.0, 12)
    dfun = DomainFunctional(params, g)
    n = g.points_per_side**2
    x0 = np.concatenate([_rand(n, rng, 0.5), 1e-3 * rng.standard_normal(11 * 11)])

    def gl_pair(x):
        E, gp, gx = dfun.energy_grad(x[:n].reshape(g.shape), np.real(x[n:]).reshape(11, 11))
        return E, np.concatenate([gp.ravel(), gx.ravel()])
    grads["gl"] = _fd_worst(gl_pair, x0, lambda: np.concatenate([_rand(n, rng),
                                                                 1e-3 * rng.standard_normal(11 * 11)]))
    grad_ok = all(v <= 1e-6 for v in grads.values())

    gauge = {}
    X, Y = cg.mesh()
    lk = make_links(canonical_potential, cg, DIRICHLET)
    u = ComplexField(cg, _rand(cg.shape, rng), DIRICHLET)
    u2, lk2 = apply_gauge(u, lk, GaugeTransform(cg, np.cos(X + 2 * Y) + 0.3 * X * Y))
    for tag, f in (("kinetic", lambda a, l: integrate(covariant_energy_density(a, l), cg)),
                   ("reduced", lambda a, l: ReducedFunctional(l, 0.9).breakdown(a.values).total)):
        e1, e2 = f(u, lk), f(u2, lk2)
        gauge[tag] = abs(e1 - e2) / (1 + abs(e1))
    gd = design_grid(params, 1.8, 4)
    Xd, Yd = gd.mesh()
    ph = 0.2 * np.sin(3 * Xd) * np.cos(2 * Yd) + 0.1 * Xd * Yd
    psi = _rand(gd.shape, rng, 0.3)
    xi = 1e-3 * rng.standard_normal((gd.points_per_side - 1,) * 2)
    s1 = DomainState(gd, ComplexField(gd, psi), xi)
    s2 = DomainState(gd, ComplexField(gd, np.exp(1j * params.kH * ph) * psi), xi, gauge_phase=ph)
    e1, e2 = gl_energy(s1, params).total, gl_energy(s2, params).total
    gauge["gl"] = abs(e1 - e2) / (1 + abs(e1))
    gauge_ok = all(v <= 1e-12 for v in gauge.values())

    rt_ok = True
    for f in (u, ComplexField(cg, u.values, magnetic_periodic(1)), s1.psi):
        p = tmp_path / "f.fld"
        save_field(p, f)
        back = load_field(p)
        rt_ok &= back.values.tobytes() == f.values.tobytes() and back.bc == f.bc and back.grid == f.grid
    ok = grad_ok and gauge_ok and rt_ok
    record(6, "numerical hygiene", ok,
           "FD rel err " + ", ".join(f"{k}={v:.1e}" for k, v in grads.items())
           + "; gauge " + ", ".join(f"{k}={v:.1e}" for k, v in gauge.items())
           + f"; round trip {'bit-exact' if rt_ok else 'MISMATCH'}")
    assert ok


# ---------------------------------------------------------------------------
# campaign


@pytest.fixture(scope="session")
def campaign(abrikosov):
    res, _ = abrikosov
    est = estimate_eab([res[N] for N in (4, 9, 16)])
    sched = build_schedule(0.3, list(CAMPAIGN_KAPPA), 4)
    cfg = CampaignConfig(out_dir=str(OUT), render=True)
    t0 = time.time()
    verdicts, records, report = run_campaign(sched, cfg, eab=est.extrapolated)
    return verdicts, records, report, est.extrapolated, time.time() - t0


def _by(verdicts, cid):
    return [v for v in verdicts if v.check_id == cid]


def test_criterion_07_bulk_laws(campaign):
    verdicts, records, report, eab, secs = campaign
    ok = not report["partial"] and len(records) == len(CAMPAIGN_KAPPA) and secs <= 7200
    top = max(records, key=lambda r: r["kappa"])
    lo, hi = BANDS["law"]
    parts = []
    for key, field in (("psi2", "mean_psi2"), ("psi4", "mean_psi4"), ("energy", "mean_energy_density")):
        sq = top.get("squares", [])
        ratios = np.array([s[field] / s["targets"][key] for s in sq]) if sq else np.array([])
        frac = float(np.mean((ratios >= lo) & (ratios <= hi))) if ratios.size else 0.0
        tv = _by(verdicts, f"{key}_trend")
        slope = tv[0].trend_slope if tv else float("nan")
        meds = []
        for r in sorted(records, key=lambda r: r["kappa"]):
            if r.get("squares"):
                rr = np.array([s[field] / s["targets"][key] for s in r["squares"]])
                meds.append(f"{np.median(np.abs(np.log(rr))):.4f}")
        law_ok = frac >= 0.8 and bool(tv) and tv[0].passed
        ok &= law_ok
        parts.append(f"{key}: {100 * frac:.0f}% of {ratios.size} squares in band at kappa={top['kappa']:g}, "
                     f"median|log ratio| by kappa [{', '.join(meds)}], slope {slope:+.4f}")
    record(7, "bulk laws", ok, "; ".join(parts) + f"; E_Ab={eab:.5f}; campaign {secs / 60:.1f} min")
    assert ok


def test_criterion_08_lll_approximation(campaign):
    verdicts, records, *_ = campaign
    v = _by(verdicts, "lll_approximation")
    per = []
    for r in sorted(records, key=lambda r: r["kappa"]):
        Cs = [s["lll_residual"] / math.sqrt(1 - r["b"]) for s in r.get("squares", [])]
        if Cs:
            per.append(f"kappa={r['kappa']:g}: max {max(Cs):.3f}, median {np.median(Cs):.3f}")
    ok = bool(v) and v[0].passed and len(per) == len(CAMPAIGN_KAPPA)
    record(8, "LLL approximation", ok,
           "; ".join(per) + (f"; slope {v[0].trend_slope:+.4f}" if v else "; no verdict"))
    assert ok


def test_criterion_09_apriori_monitors(campaign):
    verdicts, records, *_ = campaign
    curl = _by(verdicts, "curl_bound")
    sup = _by(verdicts, "sup_bound")
    ok = (len(curl) == len(CAMPAIGN_KAPPA) and len(sup) == len(CAMPAIGN_KAPPA)
          and all(v.passed for v in curl + sup))
    record(9, "a-priori monitors", ok,
           "kappa|curl A-1|_inf: " + ", ".join(f"{v.measured:.3f}" for v in curl)
           + "; max|psi|/sqrt(1-b): " + ", ".join(f"{v.measured:.3f}" for v in sup))
    assert ok


def test_criterion_10_certificates(campaign):
    verdicts, records, *_ = campaign
    cert = _by(verdicts, "certificate")
    ibp = _by(verdicts, "ibp_identity")
    margins = []
    for r in records:
        for s in r.get("squares", []):
            c = s.get("certificate")
            if c:
                margins.append(c["energy_phi"] - r["energy"])
    ok = (len(cert) == len(CAMPAIGN_KAPPA) and len(ibp) == len(CAMPAIGN_KAPPA)
          and all(v.passed for v in cert + ibp))
    record(10, "certificate consistency", ok,
           f"{len(margins)} test configurations, min E(phi)-E(min)={min(margins) if margins else float('nan'):.4g}; "
           "max IBP rel err: " + ", ".join(f"{v.measured:.2e}" for v in ibp))
    assert ok

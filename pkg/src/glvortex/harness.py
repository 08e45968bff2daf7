"""Parameter schedules, the kappa-sweep campaign and machine-readable verdicts."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cell import abrikosov_constant, estimate_eab, minimize_dirichlet
from .domain import (DomainState, GLParams, admissible_squares, build_test_configuration, design_grid,
                     gl_residuals, linfty_bulk_check, minimize_gl, square_observables)
from .landau import CellSpec, SpectralResult, landau_spectrum, lll_coefficients

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
VERDICT_SCHEMA = 1
VERDICT_COLUMNS = ["check_id", "kappa", "measured", "target", "band_lo", "band_hi", "pass", "trend_slope"]

#: check id -> statement being tested
CHECK_MAP = {
    "psi2_law": "bulk density law: square mean of |psi|^2 ~ -2 E_Ab (1 - b)",
    "psi2_trend": "bulk density law: deviation shrinks as kappa grows",
    "psi4_law": "quartic law: square mean of |psi|^4 ~ -2 E_Ab (1 - b)^2",
    "psi4_trend": "quartic law: deviation shrinks as kappa grows",
    "chi_psi4_law": "cut-off quartic law: square mean of |chi psi|^4 ~ -2 E_Ab (1 - b)^2",
    "energy_law": "local energy law: E_0(Q)/|Q| ~ E_Ab (kappa - H)^2",
    "energy_trend": "local energy law: deviation shrinks as kappa grows",
    "lll_approximation": "rescaled square field is close to the lowest Landau level: "
                         "||v - Pi_1 v|| <= C sqrt(1 - b) ||v||",
    "lll_lower_chain": "lower bound E_0(chi psi, A0; Q) >= int (mu_1 - 1/b)|Pi_1 v|^2 + |v|^4/(2b) "
                       "(constant unquantified, measured only)",
    "sup_bound": "bulk sup bound max |psi| <= C sqrt(1 - b)",
    "curl_bound": "induced field bound kappa ||curl A - 1||_inf <= C",
    "certificate": "test configuration energy is not below the minimizer energy",
    "ibp_identity": "-k^2/2 int_Q |psi|^4 = E_0(Q) + boundary flux",
    "upper_bound_chain": "E(phi) - E(psi; outside Q) <= (1 + delta)/b m0 + r0 with unit constants (monitor)",
    "gl_residual": "strong-form residuals of both GL equations in the bulk",
}
BANDS = {"law": (0.6, 1.4), "lll": 5.0, "sup": 5.0, "curl": 10.0, "ibp": 0.02, "residual": 1e-4}


class InfeasibleScheduleError(ValueError):
    pass


@dataclass
class ScheduleRow:
    kappa: float
    b: float
    one_minus_b: float
    ell: float
    R: float
    sigma: float
    sigma_raw: float
    delta: float
    literal: Dict[str, bool]


@dataclass
class Schedule:
    kappa_list: List[float]
    exponent: float
    square_flux: int
    s: float
    B: Optional[float]
    rows: List[ScheduleRow]

    def params(self, kappa: float) -> GLParams:
        return GLParams.from_b(kappa, 1.0 - kappa ** -self.exponent)


def build_schedule(theta: float, kappa_list: Sequence[float], square_flux: int = 4, s: float = 2.0,
                   B: Optional[float] = None) -> Schedule:
    """Desk-scale schedule ``1 - b = kappa^-theta`` with quantized squares.

    Hard requirements (first violation raises): ``theta in (0, 1/2)``,
    ``kappa^{-1/2} < 1 - b <= 1/2``, ``ell <= 1/2``.  The sharper textbook
    margins (``3 kappa^{-1/2} <= 1 - b <= 0.3``, ``1 - b <= ell/3``,
    ``(1-b) R^2 <= 1/2``, ``sigma < 1/2``) are evaluated and recorded per
    row but do not reject.  ``sigma`` is clipped into ``(0, 0.49]``.
    ``B`` defaults to ``log kappa`` (``delta = B kappa^{-1/2}``).
    """
    if not 0.0 < theta < 0.5:
        raise InfeasibleScheduleError(f"exponent theta={theta} must lie in (0, 1/2)")
    ks = [float(k) for k in kappa_list]
    if any(k <= 1 for k in ks):
        raise InfeasibleScheduleError("every kappa must exceed 1")
    if ks != sorted(ks) or len(set(ks)) != len(ks):
        raise InfeasibleScheduleError("kappa_list must be strictly ascending")
    if int(square_flux) != square_flux or square_flux < 1:
        raise InfeasibleScheduleError("square_flux must be a positive integer")
    if s <= 0:
        raise InfeasibleScheduleError("sigma factor s must be positive")
    rows = []
    R = math.sqrt(2 * math.pi * square_flux)
    for k in ks:
        omb = k ** -theta
        b = 1.0 - omb
        if not 1.0 / math.sqrt(k) < omb:
            raise InfeasibleScheduleError(f"kappa={k}: 1 - b = {omb:.4f} does not exceed kappa^(-1/2)")
        if not omb <= 0.5:
            raise InfeasibleScheduleError(f"kappa={k}: 1 - b = {omb:.4f} violates 1 - b <= 0.5")
        ell = R / math.sqrt(k * k * b)
        if not ell <= 0.5:
            raise InfeasibleScheduleError(f"kappa={k}: square side ell = {ell:.4f} violates ell <= 1/2")
        sig_raw = s * (omb * R * R) ** (-1.0 / 3.0)
        sig = min(sig_raw, 0.49)
        Bk = math.log(k) if B is None else B
        rows.append(ScheduleRow(
            kappa=k, b=b, one_minus_b=omb, ell=ell, R=R, sigma=sig, sigma_raw=sig_raw,
            delta=Bk / math.sqrt(k),
            literal={
                "3/sqrt(kappa) <= 1-b": 3.0 / math.sqrt(k) <= omb,
                "1-b <= 0.3": omb <= 0.3,
                "1-b <= ell/3": omb <= ell / 3,
                "ell <= 0.3": ell <= 0.3,
                "(1-b) R^2 <= 0.5": omb * R * R <= 0.5,
                "sigma in (0, 1/2)": 0 < sig_raw < 0.5,
            }))
    return Schedule(ks, float(theta), int(square_flux), float(s), B, rows)


@dataclass
class Verdict:
    check_id: str
    kappa: float
    measured: float
    target: float
    band: tuple
    passed: bool
    trend_slope: Optional[float] = None

    @classmethod
    def judge(cls, check_id, kappa, measured, target, band, trend_slope=None) -> "Verdict":
        lo, hi = band
        if target != 0:
            ok = lo <= measured / target <= hi
        else:
            ok = abs(measured) <= hi
        return cls(check_id, float(kappa), float(measured), float(target), (float(lo), float(hi)), bool(ok),
                   trend_slope)

    def row(self) -> list:
        return [self.check_id, _fmt(self.kappa), _fmt(self.measured), _fmt(self.target), _fmt(self.band[0]),
                _fmt(self.band[1]), int(self.passed), "" if self.trend_slope is None else _fmt(self.trend_slope)]


def _fmt(x) -> str:
    return repr(float(x))


def trend_slope(kappas: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``values`` against ``log kappa`` (0 for one point)."""
    if len(kappas) < 2:
        return 0.0
    return float(np.polyfit(np.log(np.asarray(kappas, float)), np.asarray(values, float), 1)[0])


def trend_verdict(check_id: str, kappas, values) -> Verdict:
    slope = trend_slope(kappas, values)
    return Verdict(check_id, float(max(kappas)) if len(kappas) else float("nan"),
                   float(values[-1]) if len(values) else float("nan"), 0.0, (-math.inf, 0.0),
                   bool(slope <= 0.0), slope)


# ---------------------------------------------------------------------------
# campaign


@dataclass
class CampaignConfig:
    side: float = 1.3
    points_per_length: float = 8.0
    seed: int = 0
    tol: float = 1e-7
    max_cycles: int = 20000
    scheme: str = "eliminate"
    inner_iterations: int = 5
    eab: Optional[float] = None
    eab_points_factor: int = 64
    workers: int = 1
    render: bool = False
    out_dir: Optional[str] = None


def reference_eab(points_factor: int = 64, seed: int = 0) -> dict:
    res = [abrikosov_constant(N, int(round(points_factor * math.sqrt(N))), seed=seed) for N in (4, 9, 16)]
    est = estimate_eab(res)
    return {"value": est.extrapolated, "spread": est.spread, "Ns": est.Ns, "sequence": est.sequence}


def analyse_state(state: DomainState, params: GLParams, square_flux: int, eab: float, seed: int = 0,
                  delta: Optional[float] = None, certificate: bool = True) -> dict:
    """Square observables, monitors and certificates for one computed state."""
    grid = state.grid
    squares = admissible_squares(params, grid, square_flux)
    n = squares[0].n if squares else None
    out = {"kappa": params.kappa, "H": params.H, "b": params.b, "M": grid.points_per_side,
           "side": grid.side_length, "energy": state.energy, "grad_norm": state.grad_norm,
           "cycles": state.iterations, "squares": []}
    res = gl_residuals(state, params)
    out["residual_gl"] = res.ginzburg_landau
    out["residual_ampere"] = res.ampere
    out["curl_sup"] = res.curl_sup
    out["sup_ratio"] = linfty_bulk_check(state, params).ratio if params.regime else None
    if not squares:
        return out
    spec = landau_spectrum(square_flux, n, count=square_flux + 2, seed=seed)
    obs = square_observables(state, params, squares, spec)
    uR = None
    if certificate:
        ab = abrikosov_constant(square_flux, n, seed=seed)
        uR = minimize_dirichlet(CellSpec(square_flux, params.b), n, init="lll", seed=seed, abrikosov=ab)
        out["m0"] = uR.energy.total
    omb = 1.0 - params.b
    for sq, o in zip(squares, obs):
        rec = o.as_dict()
        rec["targets"] = {"psi2": -2 * eab * omb, "psi4": -2 * eab * omb**2,
                          "energy": eab * (params.kappa - params.H) ** 2}
        if uR is not None:
            tc = build_test_configuration(state, params, uR, sq, delta)
            rec["certificate"] = {"energy_phi": tc.energy, "energy_min": tc.minimizer_energy,
                                  "bulk_part": tc.bulk_part, "bound": tc.bound, "r0": tc.r0,
                                  "delta": tc.delta, "ok": tc.certificate_ok}
        out["squares"].append(rec)
    return out


def _job(args):
    kappa, theta, square_flux, delta, eab, cfg = args
    params = GLParams.from_b(kappa, 1.0 - kappa ** -theta)
    t0 = time.time()
    try:
        grid = design_grid(params, cfg.side, square_flux, cfg.points_per_length)
        n = int(math.ceil(cfg.points_per_length * math.sqrt(2 * math.pi * square_flux)))
        ab = abrikosov_constant(square_flux, n, seed=cfg.seed)
        state = minimize_gl(params, grid, "abrikosov", abrikosov=ab, seed=cfg.seed, tol=cfg.tol,
                            inner_iterations=cfg.inner_iterations, max_cycles=cfg.max_cycles,
                            scheme=cfg.scheme)
        rec = analyse_state(state, params, square_flux, eab, cfg.seed, delta)
        rec["status"] = "ok"
        if cfg.out_dir and cfg.render:
            _render_state(state, params, Path(cfg.out_dir) / "figures", ab)
    except Exception as exc:            # recorded, never dropped
        rec = {"kappa": kappa, "b": params.b, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    # wall time goes to the log only; records stay byte-reproducible
    log.info("kappa=%g %s in %.1f s", kappa, rec["status"], time.time() - t0)
    return rec


def _render_state(state: DomainState, params: GLParams, fig_dir: Path, ab) -> None:
    from .fields import ComplexField, NATURAL
    from .plotting import render_array
    from .domain import DomainFunctional
    fig_dir.mkdir(parents=True, exist_ok=True)
    tag = f"kappa{params.kappa:g}"
    render_array(np.abs(state.psi.values) ** 2, fig_dir / f"{tag}_density.png", "minmax",
                 title=f"|psi|^2, kappa={params.kappa:g}, b={params.b:.3f}")
    curl = DomainFunctional(params, state.grid).curl_deviation(state.stream)
    render_array(params.kappa * curl, fig_dir / f"{tag}_curl.png", "symmetric",
                 title=f"kappa (curl A - 1), kappa={params.kappa:g}")


def verdicts_from_records(records: List[dict]) -> List[Verdict]:
    ok = sorted((r for r in records if r.get("status") == "ok"), key=lambda r: r["kappa"])
    out: List[Verdict] = []
    lo, hi = BANDS["law"]
    trends = {"psi2": [], "psi4": [], "energy": []}
    ks = []
    for r in ok:
        k = r["kappa"]
        sq = r["squares"]
        out.append(Verdict.judge("gl_residual", k, max(r["residual_gl"], r["residual_ampere"]), 0.0,
                                 (0.0, BANDS["residual"])))
        out.append(Verdict.judge("curl_bound", k, r["curl_sup"], 0.0, (0.0, BANDS["curl"])))
        if r.get("sup_ratio") is not None:
            out.append(Verdict.judge("sup_bound", k, r["sup_ratio"], 0.0, (0.0, BANDS["sup"])))
        if not sq:
            continue
        ks.append(k)
        for key, field_, cid in (("psi2", "mean_psi2", "psi2_law"), ("psi4", "mean_psi4", "psi4_law"),
                                 ("psi4", "mean_chi_psi4", "chi_psi4_law"),
                                 ("energy", "mean_energy_density", "energy_law")):
            target = sq[0]["targets"][key]
            vals = np.array([s[field_] for s in sq])
            out.append(Verdict.judge(cid, k, float(np.median(vals)), target, (lo, hi)))
            if cid != "chi_psi4_law":
                trends[key].append(float(np.median(np.abs(np.log(np.abs(vals / target))))))
        out.append(Verdict.judge("ibp_identity", k, max(s["ibp_error"] for s in sq), 0.0, (0.0, BANDS["ibp"])))
        gap = max(max(0.0, s["lower_chain_mid"] - s["lower_chain_lhs"]) for s in sq)
        out.append(Verdict.judge("lll_lower_chain", k, gap, 0.0, (0.0, 1e-8 * (1 + abs(r["energy"])))))
        if all("certificate" in s for s in sq):
            E = r["energy"]
            viol = max(max(0.0, E - s["certificate"]["energy_phi"]) for s in sq)
            out.append(Verdict.judge("certificate", k, viol, 0.0, (0.0, 1e-8 * (1 + abs(E)))))
            over = max(s["certificate"]["bulk_part"] - s["certificate"]["bound"] for s in sq)
            out.append(Verdict.judge("upper_bound_chain", k, max(0.0, over), 0.0, (0.0, 0.0)))
    for key, cid in (("psi2", "psi2_trend"), ("psi4", "psi4_trend"), ("energy", "energy_trend")):
        if ks:
            out.append(trend_verdict(cid, ks, trends[key]))
    if ks:
        out.append(lll_residual_check(ok))
    return out


def lll_residual_check(records: List[dict], cap: float = BANDS["lll"]) -> Verdict:
    """``C = ||v - Pi_1 v|| / (sqrt(1 - b) ||v||)`` over all squares of all records.

    Squares with ``||v|| < 1e-12`` are skipped (counted in ``lll_skipped``
    of the returned verdict's measured set).  Passes iff ``max C <= cap`` and
    the per-kappa median has non-positive least-squares slope in ``log kappa``.
    """
    ks, meds, allC = [], [], []
    skipped = 0
    for r in sorted(records, key=lambda r: r["kappa"]):
        Cs = []
        for s in r.get("squares", []):
            if s["v_norm"] < 1e-12:
                skipped += 1
                continue
            Cs.append(s["lll_residual"] / math.sqrt(1.0 - r["b"]))
        if Cs:
            ks.append(r["kappa"])
            meds.append(float(np.median(Cs)))
            allC.extend(Cs)
    slope = trend_slope(ks, meds)
    mx = max(allC) if allC else 0.0
    v = Verdict("lll_approximation", float(max(ks)) if ks else float("nan"), mx, 0.0, (0.0, cap),
                bool(mx <= cap and slope <= 0.0), slope)
    v.skipped = skipped
    return v


def lll_record(spec: SpectralResult, v: np.ndarray, kappa: float, b: float) -> dict:
    """A minimal record carrying one square field ``v`` on the cell grid."""
    h2 = spec.grid.spacing**2
    nv = math.sqrt(h2 * float(np.sum(np.abs(v) ** 2)))
    res = 0.0
    if nv >= 1e-12:
        pv = (spec.lll_basis @ lll_coefficients(spec, v)).reshape(v.shape)
        res = math.sqrt(h2 * float(np.sum(np.abs(v - pv) ** 2))) / nv
    return {"kappa": kappa, "b": b, "squares": [{"v_norm": nv, "lll_residual": res}]}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def write_outputs(out_dir, schedule: Optional[Schedule], records: List[dict], verdicts: List[Verdict],
                  extra: Optional[dict] = None) -> dict:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    recs = sorted(records, key=lambda r: r["kappa"])
    with open(d / "records.jsonl", "w") as f:
        for r in recs:
            f.write(_dumps(r) + "\n")
    buf = io.StringIO()
    buf.write(f"# glvortex verdicts schema_version={VERDICT_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(VERDICT_COLUMNS)
    for v in sorted(verdicts, key=lambda v: (v.check_id, v.kappa)):
        w.writerow(v.row())
    (d / "verdicts.csv").write_text(buf.getvalue())
    partial = any(r.get("status") != "ok" for r in records)
    report = {
        "schema_version": REPORT_SCHEMA,
        "partial": partial,
        "schedule": asdict(schedule) if schedule is not None else None,
        "check_map": CHECK_MAP,
        "summary": {cid: all(v.passed for v in verdicts if v.check_id == cid)
                    for cid in sorted({v.check_id for v in verdicts})},
        "failed_jobs": [{"kappa": r["kappa"], "error": r.get("error")} for r in recs if r.get("status") != "ok"],
    }
    if extra:
        report.update(extra)
    (d / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default))
    return report


def run_campaign(schedule: Schedule, config: CampaignConfig, eab: Optional[float] = None):
    """Minimize, measure and judge at every kappa of the schedule.

    Returns ``(verdicts, records, report)``; writes ``records.jsonl``,
    ``verdicts.csv`` and ``report.json`` when ``config.out_dir`` is set.
    """
    eab_info = None
    if eab is None:
        eab = config.eab
    if eab is None and schedule.kappa_list:
        eab_info = reference_eab(config.eab_points_factor, config.seed)
        eab = eab_info["value"]
    rows = {r.kappa: r for r in schedule.rows}
    jobs = [(k, schedule.exponent, schedule.square_flux, rows[k].delta, eab, config) for k in schedule.kappa_list]
    workers = max(1, int(config.workers))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_job, jobs))
    else:
        records = []
        try:
            for j in jobs:
                records.append(_job(j))
        except KeyboardInterrupt:
            # flush what finished, mark the rest as cancelled, then propagate
            done = {r["kappa"] for r in records}
            records += [{"kappa": j[0], "status": "cancelled", "error": "interrupted"}
                        for j in jobs if j[0] not in done]
            if config.out_dir:
                write_outputs(config.out_dir, schedule, records, verdicts_from_records(records),
                              {"eab": eab, "eab_reference": eab_info, "seed": config.seed, "interrupted": True})
            raise
    for r in records:
        row = rows[r["kappa"]]
        r["schedule"] = {"sigma": row.sigma, "sigma_raw": row.sigma_raw, "delta": row.delta, "s": schedule.s,
                         "B": schedule.B, "ell": row.ell, "literal": row.literal}
        r["seed"] = config.seed
        r["eab"] = eab
    verdicts = verdicts_from_records(records)
    report = None
    if config.out_dir:
        report = write_outputs(config.out_dir, schedule, records, verdicts,
                               {"eab": eab, "eab_reference": eab_info, "seed": config.seed})
    return verdicts, records, report


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GLVORTEX_THREADS", "1")))
    except ValueError:
        return 1

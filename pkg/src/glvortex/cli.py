"""Command-line front end: ``glvortex <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 130 interrupted.
Every subcommand accepts ``--config FILE``: an INI file whose section named
after the subcommand supplies defaults for the flags (flag names with dashes
or underscores).  Flags given on the command line win.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERRUPT = 0, 1, 2, 130
JSON_SCHEMA = 1


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# (name, type, default, help, required)
SPECS: Dict[str, List[tuple]] = {
    "spectrum": [
        ("N", int, None, "flux quanta per cell (cell side R = sqrt(2 pi N) magnetic lengths)", True),
        ("grid", int, None, "grid points per cell side (default 64 * sqrt(N), rounded)", False),
        ("count", int, None, "number of eigenpairs (default N + 4)", False),
        ("tol", float, 1e-8, "residual tolerance, h^2-weighted L2 norm (default 1e-8)", False),
        ("seed", int, 0, "start-block seed (default 0)", False),
        ("out", str, None, "directory for eigenfield files and manifest.json (optional)", False),
    ],
    "cell": [
        ("N", int, None, "flux quanta per cell", True),
        ("b", float, None, "field ratio b = H/kappa, dimensionless, in (0, 1.5]", True),
        ("grid", int, None, "grid points per cell side (default 64 * sqrt(N))", False),
        ("sigma", float, 0.2, "sigma for the measured lower-bound constant (default 0.2)", False),
        ("tol", float, 1e-8, "relative gradient tolerance (default 1e-8)", False),
        ("seed", int, 0, "random seed (default 0)", False),
        ("out", str, None, "directory for minimizer field files and record.json (optional)", False),
    ],
    "abrikosov": [
        ("N", int, None, "flux quanta per cell", True),
        ("grid", int, None, "grid points per cell side (default 64 * sqrt(N))", False),
        ("restarts", int, 8, "random restarts (default 8)", False),
        ("seed", int, 0, "random seed (default 0)", False),
        ("out", str, None, "directory for the minimizer field file and result.json (optional)", False),
    ],
    "gl": [
        ("kappa", float, None, "GL parameter kappa (dimensionless)", True),
        ("b", float, None, "field ratio b = H/kappa (give this or --H)", False),
        ("H", float, None, "applied field H in units of the field normalisation (give this or --b)", False),
        ("side", float, 1.3, "sample side length in units of the penetration depth (default 1.3)", False),
        ("square_flux", int, 4, "flux quanta per observation square, sets the grid spacing (default 4)", False),
        ("points_per_length", float, 8.0, "grid points per magnetic length 1/sqrt(kappa H) (default 8)", False),
        ("init", str, "abrikosov", "initial guess: abrikosov, noise, normal (default abrikosov)", False),
        ("tol", float, 1e-7, "joint relative gradient tolerance (default 1e-7)", False),
        ("scheme", str, "eliminate", "minimizer: eliminate (xi solved after every psi step) or alternating "
                                     "(default eliminate)", False),
        ("max_cycles", int, 20000, "maximum minimizer cycles (default 20000)", False),
        ("seed", int, 0, "random seed (default 0)", False),
        ("out", str, None, "checkpoint directory (psi, stream, manifest, PNG renders)", False),
    ],
    "campaign": [
        ("kappa", str, "20,30,40,60", "comma-separated ascending kappa values (default 20,30,40,60)", False),
        ("theta", float, 0.3, "exponent in 1 - b = kappa^-theta, in (0, 1/2) (default 0.3)", False),
        ("square_flux", int, 4, "flux quanta per observation square (default 4)", False),
        ("s", float, 2.0, "sigma factor s (default 2)", False),
        ("B", float, None, "delta factor B in delta = B kappa^-1/2 (default log kappa)", False),
        ("side", float, 1.3, "sample side length (default 1.3)", False),
        ("points_per_length", float, 8.0, "grid points per magnetic length (default 8)", False),
        ("eab", float, None, "reference Abrikosov constant (default: computed from N = 4, 9, 16)", False),
        ("tol", float, 1e-7, "joint relative gradient tolerance (default 1e-7)", False),
        ("scheme", str, "eliminate", "minimizer: eliminate or alternating (default eliminate)", False),
        ("max_cycles", int, 20000, "maximum minimizer cycles per kappa (default 20000)", False),
        ("seed", int, 0, "random seed (default 0)", False),
        ("render", bool, False, "also write PNG heatmaps per kappa (default off)", False),
        ("out", str, None, "output directory for records.jsonl, verdicts.csv, report.json", True),
    ],
    "render": [
        ("field", str, None, "input field file", True),
        ("style", str, "density", "density (|u|^2, min-max), modulus, real or imag (symmetric) (default density)",
         False),
        ("out", str, None, "output PNG path", True),
    ],
}

DESCRIPTIONS = {
    "spectrum": "Lowest eigenpairs of the magnetic-periodic Landau operator on the quantized cell.",
    "cell": "Dirichlet and magnetic-periodic minimizers of the reduced GL functional, with the "
            "Abrikosov value and the measured cell constants.",
    "abrikosov": "Minimize the Abrikosov functional over the lowest Landau level; prints c(R)/R^2 and beta.",
    "gl": "Minimize the full GL energy on a square sample (lengths in units of the penetration depth).",
    "campaign": "kappa sweep: minimize, measure square observables, write records, verdicts and report.",
    "render": "Render a field file to a deterministic PNG heatmap.",
}


def build_parser() -> _Parser:
    p = _Parser(prog="glvortex", description=__doc__.splitlines()[0],
                epilog="Thread count for campaigns: GLVORTEX_THREADS (default 1).")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    p.subparsers = {}
    for name, specs in SPECS.items():
        sp = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        p.subparsers[name] = sp
        sp.add_argument("--config", help="INI file; section [%s] gives defaults for the flags below" % name)
        for key, typ, default, text, required in specs:
            flag = "--" + key.replace("_", "-")
            req = " [required]" if required else ""
            if typ is bool:
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=text + req)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None, help=text + req)
    return p


def _merge(command: str, ns: argparse.Namespace) -> dict:
    specs = {s[0]: s for s in SPECS[command]}
    values = {k: s[2] for k, s in specs.items()}
    if ns.config:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(ns.config):
            raise UsageError(f"cannot read config file {ns.config}")
        for section in cp.sections():
            if section not in SPECS:
                raise UsageError(f"unknown config section [{section}]")
        if cp.has_section(command):
            for key, raw in cp.items(command):
                k = key.replace("-", "_")
                if k not in specs:
                    raise UsageError(f"unknown key {key!r} in section [{command}]")
                typ = specs[k][1]
                try:
                    values[k] = raw.strip().lower() in ("1", "true", "yes", "on") if typ is bool else typ(raw)
                except ValueError:
                    raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
    for k in specs:
        v = getattr(ns, k, None)
        if v is not None:
            values[k] = v
    missing = [k for k, s in specs.items() if s[4] and values[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required flag(s): " + ", ".join("--" + m.replace("_", "-")
                                                                             for m in missing))
    return values


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _grid_default(N: int, grid: Optional[int]) -> int:
    return grid if grid is not None else int(round(64 * math.sqrt(N)))


# -- subcommand adapters -------------------------------------------------------

def cmd_spectrum(v: dict) -> int:
    from .landau import landau_spectrum
    M = _grid_default(v["N"], v["grid"])
    res = landau_spectrum(v["N"], M, count=v["count"], tol=v["tol"], seed=v["seed"])
    man = {"schema_version": JSON_SCHEMA, "N": v["N"], "R": res.cell.R, "M": M, "seed": v["seed"],
           "eigenvalues": [float(x) for x in res.eigenvalues], "lll_count": res.lll_count,
           "residuals": [float(x) for x in res.residuals]}
    if v["out"]:
        res.save(v["out"])
        man["manifest"] = str(Path(v["out"]) / "manifest.json")
    _emit(man)
    return EXIT_OK


def cmd_cell(v: dict) -> int:
    from .cell import abrikosov_constant, minimize_dirichlet, minimize_periodic, cell_inequalities
    from .fields import save_field
    from .landau import CellSpec
    N, b = v["N"], v["b"]
    CellSpec(N, b)
    M = _grid_default(N, v["grid"])
    ab = abrikosov_constant(N, M, seed=v["seed"])
    rec = cell_inequalities(N, b, M, sigma=v["sigma"], seed=v["seed"], tol=v["tol"], abrikosov=ab).as_dict()
    rec.update({"schema_version": JSON_SCHEMA, "M": M})
    if v["out"]:
        d = Path(v["out"])
        d.mkdir(parents=True, exist_ok=True)
        cell = CellSpec(N, b)
        save_field(d / "periodic.fld", minimize_periodic(cell, M, b, "lll", v["seed"], ab, v["tol"]).minimizer)
        save_field(d / "dirichlet.fld", minimize_dirichlet(cell, M, b, "lll", v["seed"], ab, v["tol"]).minimizer)
        (d / "record.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=_default))
    _emit(rec)
    return EXIT_OK


def cmd_abrikosov(v: dict) -> int:
    from .cell import abrikosov_constant
    from .fields import ComplexField, magnetic_periodic, save_field
    M = _grid_default(v["N"], v["grid"])
    r = abrikosov_constant(v["N"], M, restarts=v["restarts"], seed=v["seed"])
    out = {"schema_version": JSON_SCHEMA, "N": v["N"], "R": r.cell.R, "M": M, "seed": v["seed"],
           "c": r.c_value, "c_over_R2": r.c_over_R2, "beta": r.beta_ratio,
           "restart_energies": r.per_restart_energies, "grad_norm": r.grad_norm}
    if v["out"]:
        d = Path(v["out"])
        d.mkdir(parents=True, exist_ok=True)
        f = ComplexField(r.spectral.grid, r.field, magnetic_periodic(v["N"]))
        save_field(d / "abrikosov.fld", f)
        (d / "result.json").write_text(json.dumps(out, indent=2, sort_keys=True, default=_default))
    _emit(out)
    return EXIT_OK


def cmd_gl(v: dict) -> int:
    from .cell import abrikosov_constant
    from .domain import GLParams, design_grid, gl_energy, gl_residuals, minimize_gl
    if (v["b"] is None) == (v["H"] is None):
        raise UsageError("gl: give exactly one of --b and --H")
    params = GLParams.from_b(v["kappa"], v["b"]) if v["b"] is not None else GLParams(v["kappa"], v["H"])
    grid = design_grid(params, v["side"], v["square_flux"], v["points_per_length"])
    ab = None
    if v["init"] == "abrikosov":
        n = int(math.ceil(v["points_per_length"] * math.sqrt(2 * math.pi * v["square_flux"])))
        ab = abrikosov_constant(v["square_flux"], n, seed=v["seed"])
    state = minimize_gl(params, grid, v["init"], abrikosov=ab, seed=v["seed"], tol=v["tol"],
                        max_cycles=v["max_cycles"], scheme=v["scheme"])
    res = gl_residuals(state, params)
    out = {"schema_version": JSON_SCHEMA, "kappa": params.kappa, "H": params.H, "b": params.b,
           "M": grid.points_per_side, "side": grid.side_length, "seed": v["seed"],
           "energy": gl_energy(state, params).as_dict(), "grad_norm": state.grad_norm,
           "cycles": state.iterations, "residual_gl": res.ginzburg_landau, "residual_ampere": res.ampere,
           "kappa_curl_sup": res.curl_sup, "max_modulus": float(np.max(np.abs(state.psi.values)))}
    if v["out"]:
        from .plotting import render_array
        from .domain import DomainFunctional
        d = Path(v["out"])
        state.save(d, params)
        render_array(np.abs(state.psi.values) ** 2, d / "density.png", "minmax", title="|psi|^2")
        curl = DomainFunctional(params, grid).curl_deviation(state.stream)
        render_array(params.kappa * curl, d / "curl.png", "symmetric", title="kappa (curl A - 1)")
    _emit(out)
    return EXIT_OK


def cmd_campaign(v: dict) -> int:
    from .harness import CampaignConfig, build_schedule, run_campaign, worker_count
    try:
        kappas = [float(x) for x in v["kappa"].split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"campaign: cannot parse --kappa {v['kappa']!r}") from None
    sched = build_schedule(v["theta"], kappas, v["square_flux"], v["s"], v["B"])
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    cfg = CampaignConfig(side=v["side"], points_per_length=v["points_per_length"], seed=v["seed"],
                         tol=v["tol"], max_cycles=v["max_cycles"], scheme=v["scheme"], eab=v["eab"],
                         workers=worker_count(),
                         render=bool(v["render"]), out_dir=v["out"])
    verdicts, records, report = run_campaign(sched, cfg)
    for vd in sorted(verdicts, key=lambda x: (x.check_id, x.kappa)):
        print(f"{vd.check_id:20s} kappa={vd.kappa:<6g} measured={vd.measured:.6g} "
              f"{'PASS' if vd.passed else 'FAIL'}")
    if report and report.get("partial"):
        print("campaign partial: " + json.dumps(report["failed_jobs"]), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_render(v: dict) -> int:
    from .plotting import render_heatmap
    path = render_heatmap(v["field"], v["out"], v["style"])
    print(str(path))
    return EXIT_OK


COMMANDS = {"spectrum": cmd_spectrum, "cell": cmd_cell, "abrikosov": cmd_abrikosov, "gl": cmd_gl,
            "campaign": cmd_campaign, "render": cmd_render}


def main(argv: Optional[List[str]] = None) -> int:
    from .cell import ConvergenceError
    from .domain import SaddleError
    from .landau import EigensolverError
    from .theta import SeriesConvergenceError
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        try:
            values = _merge(ns.command, ns)
        except UsageError:
            parser.subparsers[ns.command].print_usage(sys.stderr)
            raise
        return COMMANDS[ns.command](values)
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPT
    except (EigensolverError, ConvergenceError, SaddleError, SeriesConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

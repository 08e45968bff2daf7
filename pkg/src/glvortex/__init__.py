"""Ginzburg-Landau vortex lattices near the second critical field.

Gauge-covariant lattice discretization, the magnetic-periodic Landau
operator and its lowest Landau level, reduced cell problems and the
Abrikosov constant, full GL minimization on a square sample, and a
kappa-sweep campaign with machine-readable verdicts.
"""

from .fields import (BoundaryCondition, ComplexField, GaugeLinks, GaugeTransform, GridSpec, DIRICHLET,
                     NATURAL, magnetic_periodic, make_links, load_field, save_field)
from .landau import CellSpec, SpectralResult, landau_spectrum, project_lll, check_gap_lemma
from .cell import (abrikosov_constant, estimate_eab, minimize_abrikosov, minimize_dirichlet,
                   minimize_periodic, reduced_energy, reduced_gradient)
from .domain import DomainState, GLParams, gl_energy, minimize_gl, square_observables
from .harness import Schedule, Verdict, build_schedule, run_campaign

__version__ = "0.1.0"

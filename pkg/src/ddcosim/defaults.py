"""The one table of solver defaults; every entry is overridable by CLI flag.

========================  ==========  ======================================
name                      default     meaning
==========================  ========  ======================================
poisson_abs_tol           1e-26 C     device Poisson absolute tolerance
continuity_abs_tol        5e-18 A     carrier continuity absolute tolerance
newton_rel_tol            1e-5        device Newton relative tolerance
newton_max_iterations     50          device Newton iteration cap
circuit_abs_tol           1e-5 V/A    circuit residual absolute tolerance
circuit_rel_tol           1e-5        circuit relative tolerance
gs_abs_tol                1e-5 V/A    boundary-change convergence, absolute
gs_rel_tol                1e-5        boundary-change convergence, relative
gs_max_iterations         20          Gauss-Seidel sweeps per step
dt_min                    1e-12 s     minimum accepted step (1e-6 us)
dt_max                    1e-5 s      maximum accepted step (10 us)
lte_rel                   1e-3        step-control relative weight
lte_abs_v                 1e-6 V      step-control absolute weight (voltages)
lte_abs_density_frac      1e-6        step-control density weight, as a
                                      fraction of each device's peak doping
==========================  ========  ======================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .device import NewtonTolerances
from .circuit import CircuitTolerances
from .runtime import LteParams

DT_MIN = 1e-12   # s
DT_MAX = 1e-5    # s
GS_MAX_ITERATIONS = 20
GS_ABS_TOL = 1e-5
GS_REL_TOL = 1e-5


@dataclass(frozen=True)
class SolverDefaults:
    newton: NewtonTolerances = field(default_factory=NewtonTolerances)
    circuit: CircuitTolerances = field(default_factory=CircuitTolerances)
    lte: LteParams = field(default_factory=LteParams)
    dt_min: float = DT_MIN
    dt_max: float = DT_MAX
    gs_abs_tol: float = GS_ABS_TOL
    gs_rel_tol: float = GS_REL_TOL
    gs_max_iterations: int = GS_MAX_ITERATIONS

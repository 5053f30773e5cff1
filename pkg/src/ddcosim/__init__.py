"""ddcosim: drift-diffusion device / circuit co-simulation.

Devices are 1D finite-volume Scharfetter-Gummel drift-diffusion systems;
the surrounding circuit is a modified-nodal-analysis DAE.  The two couple
through Gauss-Seidel dynamic iteration with Norton-equivalent boundary
exchange, time-stepped by adaptive BDF-2, with Stage-2 device solves
parallelized over a coordinator/worker runtime.
"""

from .circuit import (Capacitor, Circuit, CircuitState, CircuitTolerances,
                      CurrentSource, Dc, DevicePort, Inductor, Pulse,
                      Resistor, Sine, VoltageSource, bdf_context,
                      mna_assemble, newton_solve_circuit)
from .cosim import (CoupledSystem, Orchestrator, SimulationError, StepResult,
                    TransientOptions, adapt_step, dc_operating_point,
                    transient_run)
from .device import (Device, NewtonError, NewtonTolerances, NortonEquivalent,
                     assemble, electrode_current, equilibrium_solve,
                     newton_solve, norton_reduce)
from .deviceconfig import build_device, parse_device_config
from .doping import DopingProfile, DopingRegion, net_doping
from .mesh import DeviceMesh, Refinement, build_mesh
from .netlist import parse_netlist
from .physics import (DeviceState, PhysicalModels, bernoulli, mobility,
                      recombination)
from .record import TransientRecord
from .runtime import (LteParams, PartitionPlan, PoolConfig, WorkerPool,
                      plan_partition)
from .timestep import STEADY, BdfContext

__version__ = "0.1.0"

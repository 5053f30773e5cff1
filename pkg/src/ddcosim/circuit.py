"""Modified nodal analysis for the non-device part of the equipment.

Unknowns are the non-ground node voltages plus branch currents of voltage
sources and inductors.  Reactive components are discretized by the shared
BDF contexts (a steady context opens capacitors and shorts inductors, which
is exactly the DC operating point convention).  PDE-modeled devices enter
as Norton stamps: a conductance block plus companion current injections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sparse
from .device import NortonEquivalent
from .timestep import STEADY, BdfContext, bdf_context  # noqa: F401  (re-export)

GROUND = "0"


# ---------------------------------------------------------------------------
# waveforms

class Waveform:
    def value(self, t: float) -> float:
        raise NotImplementedError

    def breakpoints(self, t_end: float):
        """Times in (0, t_end) where the slope is discontinuous."""
        return []


@dataclass(frozen=True)
class Dc(Waveform):
    level: float

    def value(self, t):
        return self.level

    def spec(self):
        return f"DC {self.level:.17g}"


@dataclass(frozen=True)
class Pulse(Waveform):
    """SPICE-style pulse: v1 -> v2 after delay, linear rise/fall edges."""

    v1: float
    v2: float
    delay: float
    rise: float
    width: float | None = None
    fall: float | None = None
    period: float | None = None

    def _one_shot(self, t):
        if t < self.delay:
            return self.v1
        t = t - self.delay
        rise = max(self.rise, 0.0)
        if t < rise:
            return self.v1 + (self.v2 - self.v1) * t / rise
        if self.width is None:
            return self.v2
        t = t - rise
        if t < self.width:
            return self.v2
        t = t - self.width
        fall = self.fall if self.fall is not None else rise
        if fall > 0.0 and t < fall:
            return self.v2 + (self.v1 - self.v2) * t / fall
        return self.v1

    def value(self, t):
        if self.period is not None and t > self.delay:
            t = self.delay + (t - self.delay) % self.period
        return self._one_shot(t)

    def _corners(self):
        c = [self.delay, self.delay + self.rise]
        if self.width is not None:
            fall = self.fall if self.fall is not None else self.rise
            c.append(self.delay + self.rise + self.width)
            c.append(self.delay + self.rise + self.width + fall)
        return c

    def breakpoints(self, t_end):
        base = self._corners()
        if self.period is None:
            return [t for t in base if 0.0 < t < t_end]
        out = []
        k = 0
        while self.delay + k * self.period < t_end:
            for t in base:
                tk = t + k * self.period
                if 0.0 < tk < t_end:
                    out.append(tk)
            k += 1
        return sorted(set(out))

    def spec(self):
        vals = [self.v1, self.v2, self.delay, self.rise]
        if self.width is not None:
            vals.append(self.width)
            vals.append(self.fall if self.fall is not None else self.rise)
            if self.period is not None:
                vals.append(self.period)
        return "PULSE(" + " ".join(f"{v:.17g}" for v in vals) + ")"


@dataclass(frozen=True)
class Sine(Waveform):
    offset: float
    amplitude: float
    freq: float
    delay: float = 0.0
    phase_deg: float = 0.0

    def value(self, t):
        if t < self.delay:
            t = self.delay
        return self.offset + self.amplitude * math.sin(
            2.0 * math.pi * self.freq * (t - self.delay)
            + math.radians(self.phase_deg))

    def spec(self):
        return (f"SIN({self.offset:.17g} {self.amplitude:.17g} {self.freq:.17g} "
                f"{self.delay:.17g} {self.phase_deg:.17g})")


# ---------------------------------------------------------------------------
# components

@dataclass(frozen=True)
class Resistor:
    name: str
    n1: str
    n2: str
    value: float

    def nodes(self):
        return (self.n1, self.n2)


@dataclass(frozen=True)
class Capacitor:
    name: str
    n1: str
    n2: str
    value: float

    def nodes(self):
        return (self.n1, self.n2)


@dataclass(frozen=True)
class Inductor:
    name: str
    n1: str
    n2: str
    value: float

    def nodes(self):
        return (self.n1, self.n2)


@dataclass(frozen=True)
class VoltageSource:
    name: str
    n1: str
    n2: str
    waveform: Waveform

    def nodes(self):
        return (self.n1, self.n2)


@dataclass(frozen=True)
class CurrentSource:
    name: str
    n1: str
    n2: str
    waveform: Waveform

    def nodes(self):
        return (self.n1, self.n2)


@dataclass(frozen=True)
class DevicePort:
    """A PDE-modeled device instance: electrode -> circuit node map."""

    name: str
    device_ref: str
    electrode_nodes: tuple  # ((electrode, node), ...) in declaration order

    def nodes(self):
        return tuple(n for _, n in self.electrode_nodes)

    def electrode_map(self) -> dict:
        return dict(self.electrode_nodes)


class CircuitError(Exception):
    pass


# Conductance to ground stamped at every node: bounds the Thevenin impedance
# seen by leakage-level device stamps so floating series midpoints stay
# numerically determinate.  Negligible against any signal-level conductance.
GMIN = 1e-12


class Circuit:
    """Validated component graph with a fixed unknown layout."""

    def __init__(self, components, gmin: float = GMIN):
        self.gmin = float(gmin)
        self.components = tuple(components)
        names = [c.name for c in self.components]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise CircuitError(f"duplicate component name(s): {sorted(dup)}")

        nodes = set()
        for c in self.components:
            nodes.update(c.nodes())
        if GROUND not in nodes:
            raise CircuitError("circuit needs a ground node named '0'")
        self.node_names = tuple(sorted(nodes - {GROUND}))
        self.node_index = {n: i for i, n in enumerate(self.node_names)}

        self.branches = tuple(c for c in self.components
                              if isinstance(c, (VoltageSource, Inductor)))
        nn = len(self.node_names)
        self.branch_index = {c.name: nn + i for i, c in enumerate(self.branches)}
        self.n_unknowns = nn + len(self.branches)

        self.device_ports = tuple(c for c in self.components
                                  if isinstance(c, DevicePort))
        for p in self.device_ports:
            nodes_used = [n for _, n in p.electrode_nodes]
            if len(set(nodes_used)) != len(nodes_used):
                raise CircuitError(
                    f"device {p.name!r}: electrode map must be injective")

        # every node must reach ground through the component graph
        adj = {}
        for c in self.components:
            ns = c.nodes()
            for a in ns:
                for b in ns:
                    if a != b:
                        adj.setdefault(a, set()).add(b)
        seen = {GROUND}
        stack = [GROUND]
        while stack:
            for b in adj.get(stack.pop(), ()):
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        unreachable = nodes - seen
        if unreachable:
            raise CircuitError(
                f"node(s) not reachable from ground: {sorted(unreachable)}")

    def volt_index(self, node: str):
        return None if node == GROUND else self.node_index[node]

    def signal_names(self):
        names = [f"V({n})" for n in self.node_names]
        names += [f"I({b.name})" for b in self.branches]
        return names

    def sources(self):
        return [c for c in self.components
                if isinstance(c, (VoltageSource, CurrentSource))]

    def breakpoints(self, t_end: float):
        pts = set()
        for s in self.sources():
            pts.update(s.waveform.breakpoints(t_end))
        return sorted(pts)


class CircuitState:
    """Unknown vector plus the history snapshots the BDF stamps need."""

    __slots__ = ("x", "history")

    def __init__(self, x, history=None):
        self.x = np.asarray(x, dtype=np.float64)
        self.history = list(history) if history else []

    def copy(self):
        return CircuitState(self.x.copy(), list(self.history))

    def push_history(self, t, keep=3):
        self.history.insert(0, (t, self.x.copy()))
        del self.history[keep:]


@dataclass
class MnaSystem:
    residual: np.ndarray
    jacobian: sparse.SparseMatrix
    gross: np.ndarray

    def merit(self, abs_tol, rel_tol):
        floor = np.maximum(abs_tol, rel_tol * self.gross)
        return float(np.max(np.abs(self.residual) / floor))

    def kcl_max(self, n_nodes):
        if n_nodes == 0:
            return 0.0
        return float(np.max(np.abs(self.residual[:n_nodes])))


def _vab(circuit, x, n1, n2):
    a = circuit.volt_index(n1)
    b = circuit.volt_index(n2)
    va = x[a] if a is not None else 0.0
    vb = x[b] if b is not None else 0.0
    return va - vb


def mna_assemble(circuit: Circuit, state: CircuitState, stamps: dict,
                 context: BdfContext = STEADY, t_new: float = 0.0,
                 source_scale: float = 1.0) -> MnaSystem:
    """KCL residuals (A) per non-ground node and branch equations (V).

    stamps maps device-port component names to NortonEquivalent objects; a
    stamp is required for every port.  Histories for the reactive components
    come from the state's snapshots.
    """
    x = state.x
    n = circuit.n_unknowns
    f = np.zeros(n)
    gross = np.zeros(n)
    trips = []

    def add_f(idx, val):
        if idx is not None:
            f[idx] += val
            gross[idx] += abs(val)

    def add_j(r, c, val):
        if r is not None and c is not None:
            trips.append((r, c, val))

    if not context.steady:
        hists = state.history

    for comp in circuit.components:
        if isinstance(comp, Resistor):
            g = 1.0 / comp.value
            a, b = circuit.volt_index(comp.n1), circuit.volt_index(comp.n2)
            i = g * _vab(circuit, x, comp.n1, comp.n2)
            add_f(a, i)
            add_f(b, -i)
            add_j(a, a, g); add_j(a, b, -g)
            add_j(b, b, g); add_j(b, a, -g)
        elif isinstance(comp, Capacitor):
            if context.steady:
                continue  # open at DC
            a, b = circuit.volt_index(comp.n1), circuit.volt_index(comp.n2)
            v_now = _vab(circuit, x, comp.n1, comp.n2)
            hist = context.alpha1 * _vab(circuit, hists[0][1], comp.n1, comp.n2)
            if context.order == 2:
                hist += context.alpha2 * _vab(circuit, hists[1][1], comp.n1, comp.n2)
            i = comp.value * (context.alpha0 * v_now + hist)
            g = comp.value * context.alpha0
            add_f(a, i)
            add_f(b, -i)
            add_j(a, a, g); add_j(a, b, -g)
            add_j(b, b, g); add_j(b, a, -g)
        elif isinstance(comp, Inductor):
            a, b = circuit.volt_index(comp.n1), circuit.volt_index(comp.n2)
            k = circuit.branch_index[comp.name]
            i_l = x[k]
            add_f(a, i_l)
            add_f(b, -i_l)
            add_j(a, k, 1.0); add_j(b, k, -1.0)
            # L di/dt = v  ->  L(a0 i + hist) - v = 0; steady shorts it
            v_now = _vab(circuit, x, comp.n1, comp.n2)
            if context.steady:
                f[k] += -v_now
            else:
                hist = context.alpha1 * hists[0][1][k]
                if context.order == 2:
                    hist += context.alpha2 * hists[1][1][k]
                f[k] += comp.value * (context.alpha0 * i_l + hist) - v_now
                add_j(k, k, comp.value * context.alpha0)
            gross[k] += abs(v_now) + (0.0 if context.steady
                                      else abs(comp.value * context.alpha0 * i_l))
            add_j(k, a, -1.0); add_j(k, b, 1.0)
        elif isinstance(comp, VoltageSource):
            a, b = circuit.volt_index(comp.n1), circuit.volt_index(comp.n2)
            k = circuit.branch_index[comp.name]
            i_src = x[k]
            add_f(a, i_src)
            add_f(b, -i_src)
            add_j(a, k, 1.0); add_j(b, k, -1.0)
            e = comp.waveform.value(t_new) * source_scale
            v_now = _vab(circuit, x, comp.n1, comp.n2)
            f[k] += v_now - e
            gross[k] += abs(v_now) + abs(e)
            add_j(k, a, 1.0); add_j(k, b, -1.0)
        elif isinstance(comp, CurrentSource):
            a, b = circuit.volt_index(comp.n1), circuit.volt_index(comp.n2)
            j = comp.waveform.value(t_new) * source_scale
            add_f(a, j)
            add_f(b, -j)
        elif isinstance(comp, DevicePort):
            if comp.name not in stamps:
                raise CircuitError(f"missing Norton stamp for device {comp.name!r}")
            nz: NortonEquivalent = stamps[comp.name]
            emap = comp.electrode_map()
            idx = [circuit.volt_index(emap[e]) for e in nz.electrodes]
            volts = np.array([x[i] if i is not None else 0.0 for i in idx])
            currents = nz.g @ volts + nz.i_companion
            for i_e in range(len(nz.electrodes)):
                add_f(idx[i_e], currents[i_e])
                for j_e in range(len(nz.electrodes)):
                    add_j(idx[i_e], idx[j_e], nz.g[i_e, j_e])
        else:
            raise CircuitError(f"unknown component type {type(comp).__name__}")

    jac = sparse.assemble(n, n, trips)
    return MnaSystem(residual=f, jacobian=jac, gross=gross)


@dataclass
class CircuitSolveInfo:
    iterations: int = 0
    converged: bool = False
    kcl_max: float = np.inf
    residual_max: float = np.inf


@dataclass(frozen=True)
class CircuitTolerances:
    absolute: float = 1e-5   # V or A
    relative: float = 1e-5
    max_iterations: int = 10


def newton_solve_circuit(circuit: Circuit, state: CircuitState, stamps: dict,
                         context: BdfContext = STEADY, t_new: float = 0.0,
                         tol: CircuitTolerances = CircuitTolerances(),
                         source_scale: float = 1.0):
    """Solve the (linear, for frozen stamps) MNA system by Newton iteration.

    Converged when the post-update residual meets the absolute tolerance or
    both the relative residual and relative update criteria hold; a circuit
    with frozen device stamps takes exactly one iteration.
    """
    work = state.copy()
    info = CircuitSolveInfo()
    if circuit.n_unknowns == 0:
        info.converged = True
        info.kcl_max = 0.0
        info.residual_max = 0.0
        return work, info

    while info.iterations < tol.max_iterations:
        sys_now = mna_assemble(circuit, work, stamps, context, t_new, source_scale)
        fact = sparse.factorize(sys_now.jacobian)
        dx = fact.solve(-sys_now.residual)
        work.x = work.x + dx
        info.iterations += 1

        sys_new = mna_assemble(circuit, work, stamps, context, t_new, source_scale)
        res = float(np.max(np.abs(sys_new.residual)))
        update_ok = np.all(np.abs(dx) <= tol.absolute + tol.relative * np.abs(work.x))
        rel_ok = sys_new.merit(tol.absolute, tol.relative) <= 1.0
        info.residual_max = res
        info.kcl_max = sys_new.kcl_max(len(circuit.node_names))
        if res <= tol.absolute or (rel_ok and update_ok):
            info.converged = True
            break

    if not info.converged:
        raise CircuitError(
            f"circuit Newton did not converge in {info.iterations} iterations "
            f"(residual {info.residual_max:.3e})")
    return work, info


def electrode_voltages(circuit: Circuit, state: CircuitState) -> dict:
    """Per device-port name: electrode -> node voltage map."""
    out = {}
    for p in circuit.device_ports:
        volts = {}
        for e, node in p.electrode_nodes:
            i = circuit.volt_index(node)
            volts[e] = float(state.x[i]) if i is not None else 0.0
        out[p.name] = volts
    return out

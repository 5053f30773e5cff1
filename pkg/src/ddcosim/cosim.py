"""Gauss-Seidel dynamic iteration over the coupled device/circuit system.

Each time step sweeps: Stage 1 solves the circuit against the latest Norton
stamps, Stage 2 re-solves every device at the new electrode voltages (in
parallel through the worker pool) and refreshes the stamps.  Sweeps repeat
until the boundary voltages and currents stop moving; the converged coupled
solution satisfies both subsystems simultaneously, so the decoupling adds no
error beyond the convergence tolerances.  Transients run variable-step BDF-2
with an LTE-based controller; waveform corner points force a step boundary
and a BDF-1 restart.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .circuit import (Circuit, CircuitError, CircuitState, CircuitTolerances,
                      electrode_voltages, mna_assemble, newton_solve_circuit)
from .defaults import SolverDefaults
from .device import Device, NewtonTolerances
from .record import TransientRecord
from .runtime import LteParams, PoolConfig, WorkerPool
from .timestep import STEADY, bdf_context, quadratic_predictor

log = logging.getLogger("ddcosim")


class SimulationError(Exception):
    pass


class CoupledSystem:
    """Circuit plus the PDE-modeled device instance behind each port."""

    def __init__(self, circuit: Circuit, devices: dict):
        self.circuit = circuit
        self.devices = dict(devices)
        port_names = [p.name for p in circuit.device_ports]
        missing = [n for n in port_names if n not in self.devices]
        if missing:
            raise SimulationError(f"no device bound for port(s) {missing}")
        extra = [n for n in self.devices if n not in port_names]
        if extra:
            raise SimulationError(f"device(s) {extra} have no circuit port")
        for p in circuit.device_ports:
            dev = self.devices[p.name]
            got = tuple(e for e, _ in p.electrode_nodes)
            if set(got) != set(dev.electrodes):
                raise SimulationError(
                    f"port {p.name!r} electrodes {got} do not match device "
                    f"electrodes {dev.electrodes}")

    def device_names(self):
        return [p.name for p in self.circuit.device_ports]

    def signal_names(self):
        names = list(self.circuit.signal_names())
        for p in self.circuit.device_ports:
            for e in self.devices[p.name].electrodes:
                names.append(f"I({p.name}.{e})")
        return names + ["dt", "gs_iterations"]


@dataclass
class StepResult:
    accepted: bool
    t: float
    dt_used: float
    gs_iterations: int
    lte_estimate: float
    converged: bool
    sample: list | None = None
    kcl_max: float = 0.0
    current_balance: dict = field(default_factory=dict)
    newton_iterations: int = 0
    reject_reason: str = ""


@dataclass
class TransientOptions:
    dt_min: float = 1e-12
    dt_max: float = 1e-5
    dt_init: float | None = None     # default: t_end / 1e4, clamped
    adapt: bool = True
    gs_abs_tol: float = 1e-5
    gs_rel_tol: float = 1e-5
    gs_max_iterations: int = 20
    event_dt_factor: float = 0.1
    growth_min: float = 0.2
    growth_max: float = 2.0


def adapt_step(lte_estimate: float, dt: float, dt_min: float, dt_max: float,
               growth_min: float = 0.2, growth_max: float = 2.0):
    """Step controller: (accepted, next_dt).

    err > 1 rejects and halves; otherwise dt scales by (1/err)^(1/3) clamped
    to [growth_min, growth_max] and to the configured bounds.
    """
    if lte_estimate > 1.0:
        return False, dt / 2.0
    if lte_estimate <= 0.0:
        factor = growth_max
    else:
        factor = min(growth_max, max(growth_min, (1.0 / lte_estimate) ** (1.0 / 3.0)))
    return True, min(max(dt * factor, dt_min), dt_max)


class Orchestrator:
    """Driver owning the circuit state, stamp cache, and time history."""

    def __init__(self, system: CoupledSystem, pool: WorkerPool,
                 defaults: SolverDefaults = SolverDefaults(),
                 options: TransientOptions = TransientOptions()):
        self.system = system
        self.pool = pool
        self.defaults = defaults
        self.options = options
        self.circuit_state = CircuitState(np.zeros(system.circuit.n_unknowns))
        self.stamps = pool.initial_stamps()
        self.replies = None
        self.times = []
        self._pending_time = None
        self.stage1_seconds = 0.0
        # boundary reference for the first sweep's convergence check
        volts0 = {n: {e: 0.0 for e in system.devices[n].electrodes}
                  for n in system.device_names()}
        self.boundary = self._boundary(volts0, self.stamps_currents())

    def stamps_currents(self):
        return {n: dict(zip(nz.electrodes, nz.i_actual))
                for n, nz in self.stamps.items()}

    @staticmethod
    def _boundary(volts, currents):
        out = {}
        for n in volts:
            out[n] = {e: (volts[n][e], currents[n][e]) for e in volts[n]}
        return out

    def _boundary_delta(self, volts, currents):
        """Largest boundary change normalized by (abs_tol + rel_tol |x|)."""
        o = self.options
        worst = 0.0
        for n, emap in volts.items():
            for e, v in emap.items():
                v0, i0 = self.boundary[n][e]
                i = currents[n][e]
                worst = max(worst,
                            abs(v - v0) / (o.gs_abs_tol + o.gs_rel_tol * abs(v)),
                            abs(i - i0) / (o.gs_abs_tol + o.gs_rel_tol * abs(i)))
        return worst

    # ------------------------------------------------------------------
    def _sweeps(self, ctx, t_new, source_scale=1.0, max_sweeps=None):
        """Run Gauss-Seidel sweeps at one time point (or the DC point).

        Returns (gs_iterations, converged, newton_total, kcl_max, reason).
        Convergence: boundary change <= 1% of tolerance immediately, or two
        consecutive sweeps within tolerance; divergence: three consecutive
        growths or the sweep cap.
        """
        o = self.options
        cap = max_sweeps or o.gs_max_iterations
        prev_delta = None
        growths = 0
        newton_total = 0
        circ = self.system.circuit
        kcl = 0.0
        for sweep in range(1, cap + 1):
            t0 = time.perf_counter()
            try:
                c_state, c_info = newton_solve_circuit(
                    circ, self.circuit_state, self.stamps, ctx, t_new,
                    tol=self.defaults.circuit, source_scale=source_scale)
            except CircuitError as exc:
                return sweep, False, newton_total, kcl, f"circuit: {exc}"
            finally:
                self.stage1_seconds += time.perf_counter() - t0
            volts = electrode_voltages(circ, c_state)
            replies = self.pool.solve_all(volts, ctx, t_new)
            bad = [n for n, r in replies.items() if not r.converged]
            if bad:
                return sweep, False, newton_total, kcl, \
                    f"device Newton failed: {bad}"
            newton_total += sum(r.iterations for r in replies.values())
            self.stamps = {n: r.norton for n, r in replies.items()}
            self.replies = replies
            self.circuit_state = CircuitState(c_state.x, self.circuit_state.history)
            currents = {n: dict(zip(r.norton.electrodes, r.norton.i_actual))
                        for n, r in replies.items()}
            delta = self._boundary_delta(volts, currents)
            self.boundary = self._boundary(volts, currents)
            kcl = c_info.kcl_max
            if delta <= 0.01:
                return sweep, True, newton_total, kcl, ""
            if delta <= 1.0 and prev_delta is not None and prev_delta <= 1.0:
                return sweep, True, newton_total, kcl, ""
            if prev_delta is not None and delta > prev_delta:
                growths += 1
                if growths >= 3:
                    return sweep, False, newton_total, kcl, "divergence"
            else:
                growths = 0
            prev_delta = delta
        return cap, False, newton_total, kcl, "sweep cap"

    # ------------------------------------------------------------------
    def dc_operating_point(self, max_outer: int = 100, ramp_stages: int = 10):
        """Converge the steady coupled system; commits histories at t = 0.

        Tries the full sources first; on failure ramps them from zero in
        ramp_stages stages, warm-starting each stage from the previous one.
        """
        sweeps, ok, newton, kcl, reason = self._sweeps(
            STEADY, 0.0, 1.0, max_sweeps=max_outer)
        if not ok:
            log.info("dcop: direct solve failed (%s); ramping sources", reason)
            self._reset_dc_guess()
            total = 0
            for k in range(1, ramp_stages + 1):
                s = k / ramp_stages
                sw, ok, nw, kcl, reason = self._sweeps(
                    STEADY, 0.0, s, max_sweeps=max_outer)
                total += sw
                newton += nw
                if not ok:
                    raise SimulationError(
                        f"DC operating point failed at source scale {s:g}: {reason}")
            sweeps = total
        self.pool.commit(0.0, restart=False)
        self.circuit_state.history = []
        self.circuit_state.push_history(0.0)
        self.times = [0.0]
        log.info("dcop converged: %d outer sweeps, %d device Newton iterations",
                 sweeps, newton)
        return sweeps, kcl

    def _reset_dc_guess(self):
        self.circuit_state = CircuitState(np.zeros(self.system.circuit.n_unknowns))
        self.pool.revert()

    # ------------------------------------------------------------------
    def _lte_estimate(self):
        """Combined RMS of device and circuit normalized predictor errors."""
        sq = 0.0
        count = 0.0
        for r in self.replies.values():
            sq += r.lte_sq
            count += r.lte_count
        hist = self.circuit_state.history
        if len(hist) >= 2 and self._pending_time is not None:
            pred = quadratic_predictor(self._pending_time, hist[:3])
            o = self.defaults.lte
            w = o.abs_v + o.rel * np.abs(self.circuit_state.x)
            sq += float(np.sum(((self.circuit_state.x - pred) / w) ** 2))
            count += self.circuit_state.x.size
        return math.sqrt(sq / count) if count > 0 else 0.0

    def gs_step(self, t: float, dt: float) -> StepResult:
        """One candidate step to t + dt (not committed)."""
        t_new = t + dt
        self._pending_time = t_new
        ctx = bdf_context(self.times[:2], dt)
        # relinearize under the new context so Stage 1 sees consistent
        # displacement terms from the first sweep onward
        self.stamps = self.pool.refresh_stamps(ctx)
        sweeps, ok, newton, kcl, reason = self._sweeps(ctx, t_new)
        if not ok:
            return StepResult(accepted=False, t=t_new, dt_used=dt,
                              gs_iterations=sweeps, lte_estimate=np.inf,
                              converged=False, reject_reason=reason,
                              newton_iterations=newton)
        balance = {}
        for n, nz in self.stamps.items():
            balance[n] = (float(np.sum(nz.i_actual)),
                          float(np.max(np.abs(nz.i_actual))))
        return StepResult(accepted=False, t=t_new, dt_used=dt,
                          gs_iterations=sweeps, lte_estimate=self._lte_estimate(),
                          converged=True, kcl_max=kcl,
                          current_balance=balance, newton_iterations=newton)

    def sample_row(self, dt: float, gs_iterations: int) -> list:
        row = list(self.circuit_state.x)
        for p in self.system.circuit.device_ports:
            nz = self.stamps[p.name]
            row.extend(float(v) for v in nz.i_actual)
        row.append(dt)
        row.append(float(gs_iterations))
        return row

    # ------------------------------------------------------------------
    def transient(self, t_end: float) -> TransientRecord:
        o = self.options
        if t_end <= 0.0:
            raise SimulationError("t_end must be positive")
        dc_sweeps, _ = self.dc_operating_point()
        record = TransientRecord(self.system.signal_names())
        record.steps = []
        record.append(0.0, self.sample_row(0.0, dc_sweeps))

        breakpoints = [b for b in self.system.circuit.breakpoints(t_end)]
        dt = o.dt_init if o.dt_init is not None else t_end / 1e4
        dt = min(max(dt, o.dt_min), o.dt_max)
        t = 0.0
        eps_t = 1e-12 * t_end

        while t < t_end - eps_t:
            dt = min(max(dt, o.dt_min), o.dt_max)
            # land exactly on the next event or the horizon; avoid slivers
            target = t_end
            for b in breakpoints:
                if b > t + eps_t:
                    target = min(target, b)
                    break
            remaining = target - t
            if remaining <= 2.0 * o.dt_min or dt >= remaining * (1.0 - 1e-12):
                dt = remaining
            elif remaining - dt < o.dt_min:
                dt = remaining / 2.0
            result = self.gs_step(t, dt)
            if result.converged and (not o.adapt or result.lte_estimate <= 1.0):
                t_new = t + dt
                hit_event = any(abs(t_new - b) <= eps_t for b in breakpoints)
                self.pool.commit(t_new, restart=hit_event)
                if hit_event:
                    self.circuit_state.history = []
                    self.times = []
                self.circuit_state.push_history(t_new)
                self.times.insert(0, t_new)
                del self.times[3:]
                result.accepted = True
                result.sample = self.sample_row(dt, result.gs_iterations)
                record.append(t_new, result.sample)
                record.steps.append(result)
                log.info("t=%.6e dt=%.3e gs=%d newton=%d lte=%.3f",
                         t_new, dt, result.gs_iterations,
                         result.newton_iterations, result.lte_estimate)
                t = t_new
                if hit_event:
                    dt = max(dt * o.event_dt_factor, o.dt_min)
                elif o.adapt:
                    _, dt = adapt_step(result.lte_estimate, dt, o.dt_min,
                                       o.dt_max, o.growth_min, o.growth_max)
            else:
                # restart from the last accepted state, not the failed iterate
                self.pool.revert()
                if self.circuit_state.history:
                    self.circuit_state = CircuitState(
                        self.circuit_state.history[0][1].copy(),
                        self.circuit_state.history)
                reason = result.reject_reason or \
                    f"LTE {result.lte_estimate:.2f} > 1"
                log.info("t=%.6e dt=%.3e rejected (%s)", t, dt, reason)
                if dt <= o.dt_min * 1.0000001:
                    raise SimulationError(
                        f"step size underflow at t={t:.6e}: dt={dt:.3e} "
                        f"already at dt_min and the step failed ({reason})")
                dt = max(dt / 2.0, o.dt_min)
        return record


# ---------------------------------------------------------------------------
# spec-surface wrappers

def dc_operating_point(system: CoupledSystem, pool: WorkerPool = None,
                       defaults: SolverDefaults = SolverDefaults(),
                       options: TransientOptions = TransientOptions()):
    """Converged steady states: (circuit state, per-device Norton stamps)."""
    own = pool is None
    if own:
        pool = WorkerPool(system, PoolConfig(), tol=defaults.newton,
                          lte=defaults.lte)
    try:
        orch = Orchestrator(system, pool, defaults, options)
        orch.dc_operating_point()
        return orch.circuit_state, dict(orch.stamps)
    finally:
        if own:
            pool.shutdown()


def transient_run(system: CoupledSystem, t_end: float,
                  options: TransientOptions = TransientOptions(),
                  pool: WorkerPool = None,
                  defaults: SolverDefaults = SolverDefaults()) -> TransientRecord:
    """DC operating point, then adaptive BDF-2 transient to t_end."""
    own = pool is None
    if own:
        pool = WorkerPool(system, PoolConfig(), tol=defaults.newton,
                          lte=defaults.lte)
    try:
        orch = Orchestrator(system, pool, defaults, options)
        return orch.transient(t_end)
    finally:
        if own:
            pool.shutdown()

import numpy as np
import pytest

from ddcosim.circuit import (Capacitor, Circuit, CircuitError, CircuitState,
                             CurrentSource, Dc, DevicePort, Inductor, Pulse,
                             Resistor, Sine, VoltageSource, electrode_voltages,
                             mna_assemble, newton_solve_circuit)
from ddcosim.device import NortonEquivalent
from ddcosim.timestep import STEADY, bdf_context


def solve_dc(circuit, stamps=None, t=0.0):
    st = CircuitState(np.zeros(circuit.n_unknowns))
    return newton_solve_circuit(circuit, st, stamps or {}, STEADY, t)


def fixed_step_run(circuit, dt, t_end, store, stamps=None, seed_history=None):
    """Plain fixed-step driver around the circuit engine (test harness)."""
    sol, _ = solve_dc(circuit, stamps, t=0.0)
    st = sol
    if seed_history is not None:
        st = seed_history
    else:
        st.push_history(0.0)
    times = [h[0] for h in st.history]
    out = []
    t = times[0]
    while t < t_end - 1e-15:
        ctx = bdf_context(times[:2], dt)
        sol, _ = newton_solve_circuit(circuit, st, stamps or {}, ctx, t + dt)
        st = sol
        t += dt
        st.push_history(t)
        times.insert(0, t)
        out.append((t, store(circuit, st)))
    return out, st


class TestTopologyValidation:
    def test_needs_ground(self):
        with pytest.raises(CircuitError):
            Circuit([Resistor("R1", "1", "2", 1.0)])

    def test_unreachable_node(self):
        with pytest.raises(CircuitError):
            Circuit([Resistor("R1", "1", "0", 1.0),
                     Resistor("R2", "2", "3", 1.0)])

    def test_duplicate_names(self):
        with pytest.raises(CircuitError):
            Circuit([Resistor("R1", "1", "0", 1.0),
                     Resistor("R1", "1", "0", 2.0)])

    def test_electrode_map_injective(self):
        with pytest.raises(CircuitError):
            Circuit([VoltageSource("V1", "1", "0", Dc(1.0)),
                     DevicePort("X1", "d", (("a", "1"), ("b", "1")))])

    def test_missing_stamp(self):
        c = Circuit([VoltageSource("V1", "1", "0", Dc(1.0)),
                     DevicePort("X1", "d", (("a", "1"), ("b", "0")))])
        with pytest.raises(CircuitError):
            solve_dc(c, stamps={})


class TestDcSolves:
    def test_resistor_divider(self):
        c = Circuit([VoltageSource("V1", "1", "0", Dc(1.0)),
                     Resistor("R1", "1", "2", 1000.0),
                     Resistor("R2", "2", "0", 1000.0)])
        sol, info = solve_dc(c)
        assert sol.x[c.node_index["2"]] == pytest.approx(0.5)
        assert info.iterations == 1

    def test_device_stamp_divider(self):
        # 0.01 S two-terminal stamp in series with 100 ohm and 1 V
        g = np.array([[0.01, -0.01], [-0.01, 0.01]])
        nz = NortonEquivalent(("a", "b"), g, np.zeros(2), np.zeros(2))
        c = Circuit([VoltageSource("V1", "1", "0", Dc(1.0)),
                     Resistor("R1", "1", "2", 100.0),
                     DevicePort("X1", "d", (("a", "2"), ("b", "0")))])
        sol, info = solve_dc(c, {"X1": nz})
        assert sol.x[c.node_index["2"]] == pytest.approx(0.5)
        assert info.iterations == 1

    def test_companion_injection(self):
        # pure current-source stamp into 50 ohm: V = R I12
        g = np.zeros((2, 2))
        nz = NortonEquivalent(("a", "b"), g, np.array([-2e-3, 2e-3]),
                              np.array([-2e-3, 2e-3]))
        c = Circuit([Resistor("R1", "1", "0", 50.0),
                     DevicePort("X1", "d", (("a", "1"), ("b", "0")))])
        sol, _ = solve_dc(c, {"X1": nz})
        assert sol.x[c.node_index["1"]] == pytest.approx(0.1)

    def test_dc_shorts_inductor_opens_capacitor(self):
        c = Circuit([VoltageSource("V1", "1", "0", Dc(2.0)),
                     Inductor("L1", "1", "2", 1e-3),
                     Resistor("R1", "2", "0", 100.0),
                     Capacitor("C1", "2", "0", 1e-6)])
        sol, _ = solve_dc(c)
        assert sol.x[c.node_index["2"]] == pytest.approx(2.0)  # L shorted
        k = c.branch_index["L1"]
        assert sol.x[k] == pytest.approx(0.02)

    def test_frozen_stamps_one_iteration_always(self):
        rng = np.random.default_rng(3)
        g0 = rng.uniform(0.001, 0.1)
        g = np.array([[g0, -g0], [-g0, g0]])
        nz = NortonEquivalent(("a", "b"), g, np.array([1e-3, -1e-3]),
                              np.zeros(2))
        c = Circuit([VoltageSource("V1", "1", "0", Dc(3.0)),
                     Resistor("R1", "1", "2", 470.0),
                     DevicePort("X1", "d", (("a", "2"), ("b", "0")))])
        for _ in range(5):
            sol, info = solve_dc(c, {"X1": nz})
            assert info.iterations == 1

    def test_kcl_after_convergence(self):
        c = Circuit([VoltageSource("V1", "1", "0", Dc(5.0)),
                     Resistor("R1", "1", "2", 10.0),
                     Resistor("R2", "2", "0", 20.0),
                     Resistor("R3", "2", "0", 30.0)])
        sol, info = solve_dc(c)
        assert info.kcl_max <= 1e-5


class TestStampStructure:
    def test_two_terminal_stamp_block_pattern(self):
        g0 = 0.02
        g = np.array([[g0, -g0], [-g0, g0]])
        nz = NortonEquivalent(("a", "b"), g, np.zeros(2), np.zeros(2))
        c = Circuit([Resistor("R1", "1", "0", 1.0),
                     Resistor("R2", "2", "0", 1.0),
                     DevicePort("X1", "d", (("a", "1"), ("b", "2")))])
        st = CircuitState(np.zeros(c.n_unknowns))
        sys_now = mna_assemble(c, st, {"X1": nz}, STEADY, 0.0)
        jac = sys_now.jacobian.todense()
        i, j = c.node_index["1"], c.node_index["2"]
        block = np.array([[jac[i, i] - 1.0, jac[i, j]],
                          [jac[j, i], jac[j, j] - 1.0]])  # minus the 1-ohm loads
        assert np.allclose(block, [[g0, -g0], [-g0, g0]])


class TestTransient:
    def test_rc_step_response_matches_exponential(self):
        R, C = 1000.0, 1e-6
        tau = R * C
        c = Circuit([VoltageSource("V1", "1", "0", Pulse(0.0, 1.0, 0.0, 1e-9)),
                     Resistor("R1", "1", "2", R),
                     Capacitor("C1", "2", "0", C)])
        i2 = c.node_index["2"]
        dt = 2e-6
        out, _ = fixed_step_run(c, dt, 5 * tau,
                                lambda cc, st: st.x[i2])
        errs = [abs(v - (1 - np.exp(-(t - 1e-9) / tau)))
                for t, v in out if t > 1e-8]
        assert max(errs) < 5e-4  # second-order accuracy at this dt

    def test_bdf2_order_on_rc_decay(self):
        R, C = 1000.0, 1e-6
        tau = R * C
        c = Circuit([Resistor("R1", "2", "0", R),
                     Capacitor("C1", "2", "0", C)])
        i2 = c.node_index["2"]

        def run(dt):
            st = CircuitState(np.array([1.0]))
            st.history = [(0.0, np.array([1.0])),
                          (-dt, np.array([np.exp(dt / tau)]))]
            times = [0.0, -dt]
            maxerr = 0.0
            t = 0.0
            while t < 2e-3 - 1e-15:
                ctx = bdf_context(times[:2], dt)
                st, _ = newton_solve_circuit(c, st, {}, ctx, t + dt)
                t += dt
                st.push_history(t)
                times.insert(0, t)
                maxerr = max(maxerr, abs(st.x[i2] - np.exp(-t / tau)))
            return maxerr

        dts = np.array([8e-5, 4e-5, 2e-5, 1e-5])
        errs = np.array([run(dt) for dt in dts])
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert abs(slope - 2.0) <= 0.1
        ratios = errs[:-1] / errs[1:]
        assert np.all(np.abs(ratios - 4.0) <= 0.4 + 0.05 * 4)

    def test_rl_sine_steady_state_phasor(self):
        R, L, f = 1.0, 1e-3, 60.0
        w = 2 * np.pi * f
        c = Circuit([VoltageSource("V1", "1", "0", Sine(0.0, 1.0, f)),
                     Resistor("R1", "1", "2", R),
                     Inductor("L1", "2", "0", L)])
        kL = c.branch_index["L1"]
        period = 1.0 / f
        dt = period / 2000.0
        out, _ = fixed_step_run(c, dt, 6 * period,
                                lambda cc, st: st.x[kL])
        z = complex(R, w * L)
        i_amp_ref = 1.0 / abs(z)
        phase_ref = -np.angle(z)
        t = np.array([p[0] for p in out])
        i = np.array([p[1] for p in out])
        mask = t > 5 * period  # steady state after ~5 L/R constants per period
        a = np.vstack([np.sin(w * t[mask]), np.cos(w * t[mask])]).T
        coef, *_ = np.linalg.lstsq(a, i[mask], rcond=None)
        amp = np.hypot(*coef)
        phase = np.arctan2(coef[1], coef[0])
        assert amp == pytest.approx(i_amp_ref, rel=1e-3)
        assert abs(phase - phase_ref) <= 1e-3 * np.pi


class TestWaveforms:
    def test_pulse_shape(self):
        p = Pulse(0.0, 5.0, 1e-6, 1e-8)
        assert p.value(0.0) == 0.0
        assert p.value(1e-6) == 0.0
        assert p.value(1e-6 + 5e-9) == pytest.approx(2.5)
        assert p.value(2e-6) == 5.0
        assert p.breakpoints(1e-5) == pytest.approx([1e-6, 1.01e-6])

    def test_pulse_with_width_and_period(self):
        p = Pulse(0.0, 1.0, 0.0, 1e-9, width=1e-6, fall=1e-9, period=1e-5)
        assert p.value(0.5e-6) == 1.0
        assert p.value(2e-6) == 0.0
        assert p.value(1e-5 + 0.5e-6) == 1.0  # periodic repeat

    def test_sine_value(self):
        s = Sine(1.0, 2.0, 50.0)
        assert s.value(0.0) == pytest.approx(1.0)
        assert s.value(0.005) == pytest.approx(3.0)  # quarter period

    def test_electrode_voltage_extraction(self):
        c = Circuit([VoltageSource("V1", "1", "0", Dc(2.0)),
                     Resistor("R1", "1", "2", 1.0),
                     DevicePort("X1", "d", (("a", "2"), ("b", "0")))])
        g = np.array([[1.0, -1.0], [-1.0, 1.0]])
        nz = NortonEquivalent(("a", "b"), g, np.zeros(2), np.zeros(2))
        sol, _ = solve_dc(c, {"X1": nz})
        volts = electrode_voltages(c, sol)
        assert volts["X1"]["b"] == 0.0
        assert volts["X1"]["a"] == pytest.approx(1.0)

"""Nonlinear device system: assembly, Newton solve, electrode currents,
and reduction of a converged device to its Norton equivalent.

The discretized unknowns are interleaved per vertex as (psi, n, p), so the
system dimension is 3x the vertex count.  Residuals are kept in physical
units (Poisson rows in coulombs as control-volume-integrated charge,
continuity rows in amperes); conditioning is handled by diagonal row/column
scaling around the linear solves (columns by V_T and the peak doping,
rows by equilibrated maxima), which leaves the assembled physics untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sparse
from .constants import Q
from .doping import DopingProfile, net_doping, total_doping
from .mesh import DeviceMesh
from .physics import (DeviceState, PhysicalModels, bernoulli, bernoulli_prime,
                      equilibrium_density, equilibrium_potential,
                      mobility, mobility_field_derivative, recombination)
from .timestep import STEADY, BdfContext

# Density floor used when limiting Newton updates.
DENSITY_FLOOR = 1e-30
# Potential update clamp per Newton step, in units of V_T.
PSI_CLAMP_VT = 2.0
# Largest electrode-voltage move handled by one Newton sequence; larger
# moves are split into a warm-started bias continuation (deep depletion is
# outside the Newton convergence basin for multi-tenth-volt reverse jumps).
BIAS_STEP_MAX = 0.1
# Switch from the cancellation-safe factored SG flux to the plain two-term
# form once exp(delta) would lose meaning.
_FLUX_FACTORED_LIMIT = 500.0


@dataclass(frozen=True)
class NewtonTolerances:
    """Per-equation-class Newton error control."""

    poisson_abs: float = 1e-26      # C
    continuity_abs: float = 5e-18   # A
    relative: float = 1e-5
    max_iterations: int = 50
    max_halvings: int = 10
    # after the tolerances are met, keep polishing (at most this many extra
    # full steps) while the residual still drops; quadratic convergence takes
    # it to the rounding floor, which the electrode-current balance relies on
    max_polish: int = 3


class NewtonError(Exception):
    """Non-convergence; carries the last residual norms per equation class."""

    def __init__(self, message, residuals=None, iterations=0):
        super().__init__(message)
        self.residuals = residuals or {}
        self.iterations = iterations


class Device:
    """Immutable device description with precomputed per-vertex/edge tables."""

    def __init__(self, name: str, mesh: DeviceMesh, profile: DopingProfile,
                 models: PhysicalModels):
        x = mesh.vertices
        c_vertex = net_doping(profile, x)
        tau_n, tau_p = profile.lifetimes_at(x, models.tau_n, models.tau_p)
        total = total_doping(profile, x)
        self._init_tables(name, mesh, profile, models, c_vertex, total,
                          tau_n, tau_p)

    @classmethod
    def from_tables(cls, name: str, mesh: DeviceMesh, models: PhysicalModels,
                    c_vertex, total, tau_n, tau_p) -> "Device":
        """Rebuild a device from precomputed vertex tables (worker protocol)."""
        obj = cls.__new__(cls)
        obj._init_tables(name, mesh, None, models,
                         np.asarray(c_vertex, dtype=np.float64),
                         np.asarray(total, dtype=np.float64),
                         np.asarray(tau_n, dtype=np.float64),
                         np.asarray(tau_p, dtype=np.float64))
        return obj

    def _init_tables(self, name, mesh, profile, models, c_vertex, total,
                     tau_n, tau_p):
        self.name = name
        self.mesh = mesh
        self.profile = profile
        self.models = models
        self.c_vertex = c_vertex
        self.tau_n, self.tau_p = tau_n, tau_p

        # total (unsigned) dopant concentration governs impurity scattering
        self.total_doping = total
        self.edge_doping = 0.5 * (self.total_doping[:-1] + self.total_doping[1:])

        ni = models.n_intrinsic
        self.n_i = ni
        self.v_t = models.v_t
        self.eps = models.permittivity
        peak = profile.peak_scale if profile is not None else float(np.max(total))
        self.density_scale = max(peak, ni)

        self.electrodes = tuple(mesh.contacts.keys())
        self.contact_vertices = {e: mesh.contacts[e] for e in self.electrodes}
        c_all = self.c_vertex
        self.psi_eq_contact = {}
        self.n_eq_contact = {}
        self.p_eq_contact = {}
        for e, verts in self.contact_vertices.items():
            for v in verts:
                n_eq, p_eq = equilibrium_density(c_all[v], ni)
                self.psi_eq_contact[v] = float(equilibrium_potential(c_all[v], ni, self.v_t))
                self.n_eq_contact[v] = float(n_eq)
                self.p_eq_contact[v] = float(p_eq)

        dirichlet = sorted(v for verts in self.contact_vertices.values() for v in verts)
        self.dirichlet_vertices = np.asarray(dirichlet, dtype=np.int64)
        rows = np.concatenate([3 * self.dirichlet_vertices + k for k in range(3)])
        self.dirichlet_rows = np.sort(rows)

        self._build_pattern()

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_unknowns(self) -> int:
        return 3 * self.mesh.n_vertices

    def _build_pattern(self):
        """Fixed triplet (row, col) stencil; values are filled per assembly."""
        nv = self.mesh.n_vertices
        iL = np.arange(nv - 1, dtype=np.int64)
        iR = iL + 1
        self._iL, self._iR = iL, iR

        rpsL, rpsR = 3 * iL, 3 * iR
        rnL, rnR = rpsL + 1, rpsR + 1
        rpL, rpR = rpsL + 2, rpsR + 2
        v = np.arange(nv, dtype=np.int64)
        rps, rn, rp = 3 * v, 3 * v + 1, 3 * v + 2

        rows = np.concatenate([
            # Poisson Laplacian (4 blocks per edge)
            rpsL, rpsL, rpsR, rpsR,
            # electron continuity flux terms (8)
            rnL, rnL, rnL, rnL, rnR, rnR, rnR, rnR,
            # hole continuity flux terms (8)
            rpL, rpL, rpL, rpL, rpR, rpR, rpR, rpR,
            # per-vertex charge & continuity diagonal blocks (6)
            rps, rps, rn, rn, rp, rp,
        ])
        cols = np.concatenate([
            rpsR, rpsL, rpsL, rpsR,
            rnR, rnL, rpsR, rpsL, rnR, rnL, rpsR, rpsL,
            rpL, rpR, rpsR, rpsL, rpL, rpR, rpsR, rpsL,
            rn, rp, rn, rp, rp, rn,
        ])
        keep = ~np.isin(rows, self.dirichlet_rows)
        self._pattern_rows = np.concatenate([rows[keep], self.dirichlet_rows])
        self._pattern_cols = np.concatenate([cols[keep], self.dirichlet_rows])
        self._pattern_keep = keep

    def column_scale(self) -> np.ndarray:
        c = np.empty(self.n_unknowns)
        c[0::3] = self.v_t
        c[1::3] = self.density_scale
        c[2::3] = self.density_scale
        return c


@dataclass
class EdgeFluxes:
    """Per-edge carrier currents (A, +x direction) and their derivatives."""

    i_n: np.ndarray
    i_p: np.ndarray
    di_n_dnL: np.ndarray
    di_n_dnR: np.ndarray
    di_n_dpsiR: np.ndarray  # d/d psi_L is the negative
    di_p_dpL: np.ndarray
    di_p_dpR: np.ndarray
    di_p_dpsiR: np.ndarray
    gross_n: np.ndarray     # |term| sums for relative residual scales
    gross_p: np.ndarray


def _edge_fluxes(device: Device, psi, n, p) -> EdgeFluxes:
    mesh = device.mesh
    iL, iR = device._iL, device._iR
    e = mesh.edge_lengths
    a = mesh.area
    v_t = device.v_t

    dpsi = psi[iR] - psi[iL]
    delta = dpsi / v_t
    efield = np.abs(dpsi) / e
    mu_n, mu_p = mobility(device.models, device.edge_doping, efield)
    dmun_de, dmup_de = mobility_field_derivative(device.models, device.edge_doping, efield)

    coef_n = Q * a * mu_n * v_t / e
    coef_p = Q * a * mu_p * v_t / e

    bp = bernoulli(delta)
    bm = bernoulli(-delta)
    bp_p = bernoulli_prime(delta)
    bm_p = bernoulli_prime(-delta)

    nL, nR = n[iL], n[iR]
    pL, pR = p[iL], p[iR]

    # shape factors; the factored form keeps near-equilibrium cancellation
    # at the rounding level of the *difference*, not of the gross fluxes
    with np.errstate(over="ignore"):
        exp_d = np.exp(np.minimum(delta, _FLUX_FACTORED_LIMIT))
    use_f = delta <= _FLUX_FACTORED_LIMIT
    s_n = np.where(use_f, bp * (nR - nL * exp_d), nR * bp - nL * bm)
    s_p = np.where(use_f, bp * (pL - pR * exp_d), pL * bp - pR * bm)

    i_n = coef_n * s_n
    i_p = coef_p * s_p
    gross_n = coef_n * (np.abs(nR * bp) + np.abs(nL * bm))
    gross_p = coef_p * (np.abs(pL * bp) + np.abs(pR * bm))

    # d(coef)/d(psi_R) through the field-dependent mobility
    sgn = np.sign(dpsi)
    dcoef_n = Q * a * v_t / e * dmun_de * sgn / e
    dcoef_p = Q * a * v_t / e * dmup_de * sgn / e

    di_n_dpsiR = coef_n * (nR * bp_p + nL * bm_p) / v_t + dcoef_n * s_n
    di_p_dpsiR = coef_p * (pL * bp_p + pR * bm_p) / v_t + dcoef_p * s_p

    return EdgeFluxes(
        i_n=i_n, i_p=i_p,
        di_n_dnL=-coef_n * bm, di_n_dnR=coef_n * bp,
        di_n_dpsiR=di_n_dpsiR,
        di_p_dpL=coef_p * bp, di_p_dpR=-coef_p * bm,
        di_p_dpsiR=di_p_dpsiR,
        gross_n=gross_n, gross_p=gross_p,
    )


@dataclass
class DeviceSystem:
    """Assembled residual + Jacobian of one device at one candidate state."""

    device: Device
    residual: np.ndarray
    jacobian: sparse.SparseMatrix
    tol_floor: np.ndarray      # per-row max(abs_tol, rel*gross)
    bias: dict
    context: BdfContext
    fluxes: EdgeFluxes

    def merit(self) -> float:
        """Max residual over its tolerance floor; <= 1 means converged."""
        return float(np.max(np.abs(self.residual) / self.tol_floor))

    def class_residuals(self) -> dict:
        r = self.residual
        return {
            "poisson": float(np.max(np.abs(r[0::3]))),
            "electron": float(np.max(np.abs(r[1::3]))),
            "hole": float(np.max(np.abs(r[2::3]))),
        }


def _history_arrays(state: DeviceState, ctx: BdfContext):
    if ctx.steady:
        z = np.zeros(state.n_vertices)
        return z, z, z
    hist = state.history
    if ctx.order == 1:
        _, psi1, n1, p1 = hist[0]
        return ctx.alpha1 * psi1, ctx.alpha1 * n1, ctx.alpha1 * p1
    _, psi1, n1, p1 = hist[0]
    _, psi2, n2, p2 = hist[1]
    return (ctx.alpha1 * psi1 + ctx.alpha2 * psi2,
            ctx.alpha1 * n1 + ctx.alpha2 * n2,
            ctx.alpha1 * p1 + ctx.alpha2 * p2)


def assemble(device: Device, state: DeviceState, bias: dict,
             context: BdfContext = STEADY,
             tol: NewtonTolerances = NewtonTolerances(),
             generation=None) -> DeviceSystem:
    """Residual and Jacobian at the given state and electrode bias.

    Interior rows hold the control-volume Poisson balance (C) and carrier
    continuity balances (A) with SG fluxes and BDF time terms; ohmic contact
    rows are Dirichlet conditions pinning charge-neutral equilibrium values
    offset by the applied electrode voltage.
    """
    mesh = device.mesh
    for e in device.electrodes:
        if e not in bias:
            raise KeyError(f"missing bias for electrode {e!r}")

    nv = mesh.n_vertices
    psi, n, p = state.psi, state.n, state.p
    a = mesh.area
    cv = mesh.control_volumes
    el = mesh.edge_lengths
    iL, iR = device._iL, device._iR

    fx = _edge_fluxes(device, psi, n, p)
    lap = device.eps * a / el
    lap_flux = lap * (psi[iR] - psi[iL])

    r_rate, dr_dn, dr_dp = recombination(
        device.models, n, p, tau_n=device.tau_n, tau_p=device.tau_p)
    if generation is not None:
        r_rate = r_rate - generation

    hist_psi, hist_n, hist_p = _history_arrays(state, context)
    a0 = context.alpha0
    dndt = a0 * n + hist_n
    dpdt = a0 * p + hist_p

    qacv = Q * a * cv

    f_psi = qacv * (p - n + device.c_vertex)
    np.add.at(f_psi, iL, lap_flux)
    np.add.at(f_psi, iR, -lap_flux)

    f_n = qacv * (dndt + r_rate)
    np.add.at(f_n, iL, -fx.i_n)
    np.add.at(f_n, iR, fx.i_n)

    f_p = qacv * (dpdt + r_rate)
    np.add.at(f_p, iL, fx.i_p)
    np.add.at(f_p, iR, -fx.i_p)

    # gross per-row magnitudes -> relative-residual floors
    g_psi = qacv * (np.abs(p) + np.abs(n) + np.abs(device.c_vertex))
    np.add.at(g_psi, iL, np.abs(lap_flux))
    np.add.at(g_psi, iR, np.abs(lap_flux))
    g_n = qacv * (np.abs(a0 * n) + np.abs(hist_n) + np.abs(r_rate))
    np.add.at(g_n, iL, fx.gross_n)
    np.add.at(g_n, iR, fx.gross_n)
    g_p = qacv * (np.abs(a0 * p) + np.abs(hist_p) + np.abs(r_rate))
    np.add.at(g_p, iL, fx.gross_p)
    np.add.at(g_p, iR, fx.gross_p)

    residual = np.empty(3 * nv)
    residual[0::3] = f_psi
    residual[1::3] = f_n
    residual[2::3] = f_p

    floor = np.empty(3 * nv)
    floor[0::3] = np.maximum(tol.poisson_abs, tol.relative * g_psi)
    floor[1::3] = np.maximum(tol.continuity_abs, tol.relative * g_n)
    floor[2::3] = np.maximum(tol.continuity_abs, tol.relative * g_p)

    # Jacobian values in the fixed pattern order of Device._build_pattern
    values = np.concatenate([
        lap, -lap, lap, -lap,
        -fx.di_n_dnR, -fx.di_n_dnL, -fx.di_n_dpsiR, fx.di_n_dpsiR,
        fx.di_n_dnR, fx.di_n_dnL, fx.di_n_dpsiR, -fx.di_n_dpsiR,
        fx.di_p_dpL, fx.di_p_dpR, fx.di_p_dpsiR, -fx.di_p_dpsiR,
        -fx.di_p_dpL, -fx.di_p_dpR, -fx.di_p_dpsiR, fx.di_p_dpsiR,
        -qacv, qacv,
        qacv * (a0 + dr_dn), qacv * dr_dp,
        qacv * (a0 + dr_dp), qacv * dr_dn,
    ])
    values = values[device._pattern_keep]

    # Dirichlet rows: residual, unit diagonal, and V_T / density floors
    for v in device.dirichlet_vertices:
        v = int(v)
        electrode = next(e for e, verts in device.contact_vertices.items() if v in verts)
        v_applied = float(bias[electrode])
        residual[3 * v] = psi[v] - (v_applied + device.psi_eq_contact[v])
        residual[3 * v + 1] = n[v] - device.n_eq_contact[v]
        residual[3 * v + 2] = p[v] - device.p_eq_contact[v]
        floor[3 * v] = tol.relative * max(abs(v_applied) + abs(device.psi_eq_contact[v]), device.v_t)
        floor[3 * v + 1] = tol.relative * device.n_eq_contact[v]
        floor[3 * v + 2] = tol.relative * device.p_eq_contact[v]
    dir_vals = np.ones(device.dirichlet_rows.size)

    all_values = np.concatenate([values, dir_vals])
    jac = sparse.assemble(3 * nv, 3 * nv,
                          (device._pattern_rows, device._pattern_cols, all_values))

    return DeviceSystem(device=device, residual=residual, jacobian=jac,
                        tol_floor=floor, bias=dict(bias), context=context,
                        fluxes=fx)


def bias_derivative(device: Device, electrode: str) -> np.ndarray:
    """d f_D / d V_e: -1 on the Dirichlet psi rows of that electrode."""
    d = np.zeros(device.n_unknowns)
    for v in device.contact_vertices[electrode]:
        d[3 * v] = -1.0
    return d


class ScaledFactorization:
    """LU of (R J C); solve_raw maps physical rhs -> physical solution."""

    def __init__(self, jac: sparse.SparseMatrix, row_scale, col_scale):
        self.row_scale = row_scale
        self.col_scale = col_scale
        if row_scale is None:
            self.fact = sparse.factorize(jac)
        else:
            vals = jac.values * row_scale[jac.rows] * col_scale[jac.cols]
            scaled = sparse.SparseMatrix(jac.n_rows, jac.n_cols,
                                         jac.rows, jac.cols, vals)
            self.fact = sparse.factorize(scaled)

    def solve_raw(self, rhs: np.ndarray) -> np.ndarray:
        if self.row_scale is None:
            return self.fact.solve(rhs)
        if rhs.ndim == 1:
            y = self.fact.solve(rhs * self.row_scale)
            return y * self.col_scale
        y = self.fact.solve(rhs * self.row_scale[:, None])
        return y * self.col_scale[:, None]


def _scaled_factorization(device: Device, jac: sparse.SparseMatrix,
                          scaled: bool) -> ScaledFactorization:
    if not scaled:
        return ScaledFactorization(jac, None, None)
    col = device.column_scale()
    row_max = np.zeros(jac.n_rows)
    np.maximum.at(row_max, jac.rows, np.abs(jac.values * col[jac.cols]))
    row_max[row_max == 0.0] = 1.0
    return ScaledFactorization(jac, 1.0 / row_max, col)


@dataclass
class NewtonInfo:
    iterations: int = 0
    converged: bool = False
    halvings: int = 0
    residuals: dict = field(default_factory=dict)
    merit: float = np.inf


def newton_solve(device: Device, state: DeviceState, bias: dict,
                 context: BdfContext = STEADY,
                 tol: NewtonTolerances = NewtonTolerances(),
                 scaled: bool = True):
    """Damped Newton on the device system; returns (state, info, final system).

    Convergence requires every equation class to meet its absolute tolerance
    or the relative tolerance against the gross row magnitude.  Updates are
    limited to 2 V_T in potential and to keep carriers positive; a residual
    line search halves the step at most max_halvings times.  Electrode-bias
    moves beyond BIAS_STEP_MAX are split into a warm-started bias
    continuation.  After the tolerances are met the iteration polishes to
    the rounding floor so electrode-current balances hold far below the
    tolerances.
    """
    # current effective bias of the state, from the contact potentials
    v_now = {}
    for e, verts in device.contact_vertices.items():
        v0 = verts[0]
        v_now[e] = float(state.psi[v0] - device.psi_eq_contact[v0])
    dv_max = max(abs(bias[e] - v_now[e]) for e in device.electrodes)

    if dv_max <= BIAS_STEP_MAX:
        return _newton_core(device, state, bias, context, tol, scaled)

    n_sub = int(np.ceil(dv_max / BIAS_STEP_MAX))
    total = NewtonInfo()
    for k in range(1, n_sub + 1):
        frac = k / n_sub
        sub_bias = {e: v_now[e] + frac * (bias[e] - v_now[e])
                    for e in device.electrodes}
        # only the final bias needs polishing to the rounding floor
        state, info, sys_final = _newton_core(device, state, sub_bias,
                                              context, tol, scaled,
                                              polish=(k == n_sub))
        total.iterations += info.iterations
        total.halvings += info.halvings
    total.converged = info.converged
    total.merit = info.merit
    total.residuals = info.residuals
    return state, total, sys_final


def _newton_core(device: Device, state: DeviceState, bias: dict,
                 context: BdfContext, tol: NewtonTolerances, scaled: bool,
                 polish: bool = True):
    x = state.as_vector()
    work = DeviceState.from_vector(x, history=state.history)
    sys_now = assemble(device, work, bias, context, tol)

    def ssq(s):
        # line-search metric: smooth in the bulk residual, unlike the max
        # norm, which transient density clippings can pin at one row
        r = s.residual / s.tol_floor
        return float(r @ r)

    merit = sys_now.merit()
    q_now = ssq(sys_now)
    info = NewtonInfo()
    converged_at = None
    v_t = device.v_t

    while True:
        if merit <= 1.0 and converged_at is None:
            converged_at = info.iterations
            info.converged = True
        if converged_at is not None:
            max_polish = tol.max_polish if polish else 0
            if merit <= 1e-8 or info.iterations - converged_at >= max_polish:
                break
        if info.iterations >= tol.max_iterations:
            break

        fact = _scaled_factorization(device, sys_now.jacobian, scaled)
        dx = fact.solve_raw(-sys_now.residual)

        lam = 1.0
        dpsi_max = np.max(np.abs(dx[0::3]))
        if dpsi_max > PSI_CLAMP_VT * v_t:
            lam = PSI_CLAMP_VT * v_t / dpsi_max
        # positivity by elementwise projection onto [floor, inf): a uniform
        # feasible-fraction rule deadlocks once a depleting minority density
        # reaches the floor, freezing the whole step

        halved = 0
        while True:
            x_try = x + lam * dx
            x_try[1::3] = np.maximum(x_try[1::3], DENSITY_FLOOR)
            x_try[2::3] = np.maximum(x_try[2::3], DENSITY_FLOOR)
            work = DeviceState.from_vector(x_try, history=state.history)
            sys_try = assemble(device, work, bias, context, tol)
            merit_try = sys_try.merit()
            q_try = ssq(sys_try)
            if q_try <= q_now or merit <= 1.0 or halved >= tol.max_halvings:
                break
            lam /= 2.0
            halved += 1
        info.halvings += halved

        stalled = converged_at is not None and merit_try >= 0.5 * merit
        x, sys_now, merit, q_now = x_try, sys_try, merit_try, q_try
        info.iterations += 1
        if stalled:
            break

    info.merit = merit
    info.residuals = sys_now.class_residuals()
    if converged_at is None:
        raise NewtonError(
            f"device {device.name!r}: Newton did not converge in "
            f"{info.iterations} iterations (merit {merit:.3e})",
            residuals=info.residuals, iterations=info.iterations)

    final = DeviceState.from_vector(x, history=state.history)
    return final, info, sys_now


def equilibrium_solve(device: Device, tol_rel: float = 1e-12,
                      max_iterations: int = 100) -> DeviceState:
    """Zero-bias thermal equilibrium via the nonlinear Poisson-Boltzmann solve.

    Carriers follow n = n_i exp(psi/V_T), p = n_i exp(-psi/V_T); the converged
    potential then seeds the full system, for which it is an exact steady
    solution (SG fluxes and net recombination both vanish there).
    """
    mesh = device.mesh
    nv = mesh.n_vertices
    v_t = device.v_t
    ni = device.n_i
    a = mesh.area
    cv = mesh.control_volumes
    el = mesh.edge_lengths
    iL, iR = device._iL, device._iR
    qacv = Q * a * cv
    lap_c = device.eps * a / el

    psi = equilibrium_potential(device.c_vertex, ni, v_t).astype(np.float64)
    dir_rows = device.dirichlet_vertices
    psi_dir = np.array([device.psi_eq_contact[int(v)] for v in dir_rows])

    interior = np.ones(nv, dtype=bool)
    interior[dir_rows] = False

    for _ in range(max_iterations):
        arg = np.clip(psi / v_t, -60.0, 60.0)
        n = ni * np.exp(arg)
        p = ni * np.exp(-arg)
        f = qacv * (p - n + device.c_vertex)
        lap_flux = lap_c * (psi[iR] - psi[iL])
        np.add.at(f, iL, lap_flux)
        np.add.at(f, iR, -lap_flux)
        f[dir_rows] = psi[dir_rows] - psi_dir

        diag = -qacv * (n + p) / v_t
        rows = np.concatenate([iL, iL, iR, iR, np.arange(nv)])
        cols = np.concatenate([iR, iL, iL, iR, np.arange(nv)])
        vals = np.concatenate([lap_c, -lap_c, lap_c, -lap_c, diag])
        keep = ~np.isin(rows, dir_rows)
        rows = np.concatenate([rows[keep], dir_rows])
        cols = np.concatenate([cols[keep], dir_rows])
        vals = np.concatenate([vals[keep], np.ones(dir_rows.size)])
        jac = sparse.assemble(nv, nv, (rows, cols, vals))

        gross = qacv * (n + p + np.abs(device.c_vertex)) + np.abs(psi) * 0
        np.add.at(gross, iL, np.abs(lap_flux))
        np.add.at(gross, iR, np.abs(lap_flux))
        gross[dir_rows] = np.maximum(np.abs(psi_dir), v_t)
        if np.max(np.abs(f) / np.maximum(gross * tol_rel, 1e-300)) <= 1.0:
            break

        scale = 1.0 / np.maximum(np.abs(diag), qacv * ni / v_t)
        scale[dir_rows] = 1.0
        sm = sparse.SparseMatrix(nv, nv, jac.rows, jac.cols,
                                 jac.values * scale[jac.rows])
        dpsi = sparse.factorize(sm).solve(-f * scale)
        limit = 5.0 * v_t
        mx = np.max(np.abs(dpsi))
        if mx > limit:
            dpsi *= limit / mx
        psi = psi + dpsi

    arg = np.clip(psi / v_t, -60.0, 60.0)
    n = np.maximum(ni * np.exp(arg), DENSITY_FLOOR)
    p = np.maximum(ni * np.exp(-arg), DENSITY_FLOOR)
    return DeviceState(psi, n, p)


def _face_currents(device: Device, state: DeviceState, context: BdfContext,
                   edge_index):
    """Total (conduction + displacement) current through given faces, +x."""
    fx = _edge_fluxes(device, state.psi, state.n, state.p)
    mesh = device.mesh
    k = np.asarray(edge_index)
    cond = fx.i_n[k] + fx.i_p[k]
    if context.steady:
        return cond
    iL, iR = device._iL, device._iR
    e_now = (state.psi[iL] - state.psi[iR]) / mesh.edge_lengths
    hist = state.history
    if context.order == 1:
        _, psi1, _, _ = hist[0]
        e_hist = context.alpha1 * (psi1[iL] - psi1[iR]) / mesh.edge_lengths
    else:
        _, psi1, _, _ = hist[0]
        _, psi2, _, _ = hist[1]
        e_hist = (context.alpha1 * (psi1[iL] - psi1[iR])
                  + context.alpha2 * (psi2[iL] - psi2[iR])) / mesh.edge_lengths
    dedt = context.alpha0 * e_now + e_hist
    disp = device.eps * mesh.area * dedt
    return cond + disp[k]


def electrode_currents_ctx(device: Device, state: DeviceState,
                           context: BdfContext = STEADY) -> dict:
    """Per-electrode current (A, positive into the device).

    Evaluated as the total current through the contact vertex's interior
    face; with the displacement term included the discrete total current is
    uniform across faces up to the interior residuals, so two-terminal
    currents balance to the Newton floor.
    """
    ne = device.mesh.n_vertices - 1
    out = {}
    for e, verts in device.contact_vertices.items():
        total = 0.0
        for v in verts:
            if v == 0:
                total += float(_face_currents(device, state, context, 0))
            else:
                total -= float(_face_currents(device, state, context, ne - 1))
        out[e] = total
    return out


def electrode_current(device: Device, state: DeviceState,
                      previous_state: DeviceState = None,
                      dt: float = None) -> dict:
    """Spec-surface electrode currents.

    Steady conduction currents when no previous state is given; with a
    previous state the displacement term is added via a backward difference,
    which requires dt > 0.
    """
    if previous_state is None:
        return electrode_currents_ctx(device, state, STEADY)
    if dt is None or dt <= 0.0:
        raise ValueError("dt must be positive when displacement is requested")
    ctx = BdfContext(order=1, dt=dt, alpha0=1.0 / dt, alpha1=-1.0 / dt, alpha2=0.0)
    probe = state.copy()
    probe.history = [(0.0, previous_state.psi, previous_state.n, previous_state.p)]
    return electrode_currents_ctx(device, probe, ctx)


def _current_state_derivative(device: Device, state: DeviceState,
                              context: BdfContext, electrode: str) -> np.ndarray:
    """d I_e / d x at fixed history: sparse row over the 3N unknowns."""
    fx = _edge_fluxes(device, state.psi, state.n, state.p)
    mesh = device.mesh
    g = np.zeros(device.n_unknowns)
    ne = mesh.n_vertices - 1
    a0 = 0.0 if context.steady else context.alpha0
    for v in device.contact_vertices[electrode]:
        if v == 0:
            k, sign = 0, 1.0
        else:
            k, sign = ne - 1, -1.0
        iL, iR = k, k + 1
        dpsiR = fx.di_n_dpsiR[k] + fx.di_p_dpsiR[k] - device.eps * mesh.area * a0 / mesh.edge_lengths[k]
        g[3 * iR] += sign * dpsiR
        g[3 * iL] += -sign * dpsiR
        g[3 * iL + 1] += sign * fx.di_n_dnL[k]
        g[3 * iR + 1] += sign * fx.di_n_dnR[k]
        g[3 * iL + 2] += sign * fx.di_p_dpL[k]
        g[3 * iR + 2] += sign * fx.di_p_dpR[k]
    return g


@dataclass(frozen=True)
class NortonEquivalent:
    """Linearized device as seen by the circuit.

    g[i, j] = dI_i/dV_j (S); i_companion makes the model exact at the
    linearization bias: I_i = sum_j g[i,j] V_j + i_companion[i].
    """

    electrodes: tuple
    g: np.ndarray
    i_companion: np.ndarray
    i_actual: np.ndarray

    def as_payload(self) -> np.ndarray:
        ne = len(self.electrodes)
        return np.concatenate([self.g.reshape(ne * ne), self.i_companion, self.i_actual])

    @staticmethod
    def from_payload(electrodes, payload) -> "NortonEquivalent":
        ne = len(electrodes)
        g = np.asarray(payload[: ne * ne]).reshape(ne, ne).copy()
        comp = np.asarray(payload[ne * ne: ne * ne + ne]).copy()
        act = np.asarray(payload[ne * ne + ne: ne * ne + 2 * ne]).copy()
        return NortonEquivalent(tuple(electrodes), g, comp, act)


def norton_reduce(device: Device, system: DeviceSystem, state: DeviceState,
                  scaled: bool = True) -> NortonEquivalent:
    """Reduce a converged device to conductances + companion current sources.

    For each electrode j the sensitivity dx/dV_j solves J_D y = -df_D/dV_j
    (one factorization, one rhs per electrode); dI_i/dx then contracts with
    y_j.  Companion sources are the converged currents minus the first-order
    part, so stamping the result reproduces the operating point exactly.
    """
    fact = _scaled_factorization(device, system.jacobian, scaled)
    electrodes = device.electrodes
    n_e = len(electrodes)
    rhs = np.empty((device.n_unknowns, n_e))
    for j, e in enumerate(electrodes):
        rhs[:, j] = -bias_derivative(device, e)
    y = fact.solve_raw(rhs)

    g = np.empty((n_e, n_e))
    for i, e_i in enumerate(electrodes):
        gi = _current_state_derivative(device, state, system.context, e_i)
        g[i, :] = gi @ y

    currents = electrode_currents_ctx(device, state, system.context)
    i_actual = np.array([currents[e] for e in electrodes])
    v = np.array([system.bias[e] for e in electrodes])
    i_companion = i_actual - g @ v
    return NortonEquivalent(electrodes, g, i_companion, i_actual)

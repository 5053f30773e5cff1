"""Carrier statistics, mobility, recombination, and device state containers.

All quantities use the cm / V / s / A unit system.  Boltzmann statistics
throughout; the intrinsic density follows from (N_c, N_v, E_g) at the
configured temperature.  The driving field entering the mobility saturation
is the potential difference along an edge (E_n = E_p = -grad psi).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .constants import KB, Q, thermal_voltage

# Taylor branch for the Bernoulli function; both branches agree to ~1e-13
# at the crossover.
_B_TAYLOR = 1e-4
# Above this the two-term form is used so exp() cannot overflow.
_B_LARGE = 700.0


def bernoulli(x):
    """B(x) = x / (exp(x) - 1) with the removable singularity at 0.

    Accurate to ~1e-13 relative and overflow-free for |x| <= 700; accepts
    scalars or arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)

    small = np.abs(x) < _B_TAYLOR
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs * xs / 12.0

    mid = (~small) & (x <= _B_LARGE)
    xm = x[mid]
    out[mid] = xm / np.expm1(xm)

    big = x > _B_LARGE
    xb = x[big]
    # x e^{-x} / (1 - e^{-x}); denominator is 1 to machine precision here
    out[big] = xb * np.exp(-xb) / (-np.expm1(-xb))

    return float(out[0]) if scalar else out


def bernoulli_prime(x):
    """dB/dx, consistent with bernoulli() branch for branch."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)

    small = np.abs(x) < _B_TAYLOR
    xs = x[small]
    out[small] = -0.5 + xs / 6.0 - xs ** 3 / 180.0

    rest = ~small
    xr = x[rest]
    b = bernoulli(xr)
    # B'(x) = (B/x) (1 - B - x), using B(-x) = B(x) + x
    out[rest] = (b / xr) * (1.0 - b - xr)

    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class MobilityParams:
    """Doping-dependent low-field mobility (Caughey-Thomas form)."""

    mu_min: float   # cm^2/Vs
    mu_max: float   # cm^2/Vs
    n_ref: float    # cm^-3
    alpha: float


@dataclass(frozen=True)
class PhysicalModels:
    """Material and model parameters for one device (single global T)."""

    temperature: float = 300.0   # K
    n_c: float = 2.86e19         # cm^-3
    n_v: float = 3.10e19         # cm^-3
    e_g: float = 1.124           # eV
    eps_r: float = 11.7
    mobility_n: MobilityParams = field(
        default_factory=lambda: MobilityParams(65.0, 1414.0, 8.5e16, 0.72))
    mobility_p: MobilityParams = field(
        default_factory=lambda: MobilityParams(47.7, 470.5, 6.3e16, 0.76))
    v_sat_n: float = 1.07e7      # cm/s
    v_sat_p: float = 8.37e6      # cm/s
    tau_n: float = 1e-6          # s, default SRH lifetime (regions may override)
    tau_p: float = 1e-6          # s
    auger_n: float = 2.8e-31     # cm^6/s
    auger_p: float = 9.9e-32     # cm^6/s

    def __post_init__(self):
        for name in ("temperature", "n_c", "n_v", "e_g", "eps_r",
                     "v_sat_n", "v_sat_p", "tau_n", "tau_p",
                     "auger_n", "auger_p"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def v_t(self) -> float:
        """Thermal voltage kT/q; derived, never stored."""
        return thermal_voltage(self.temperature)

    @property
    def n_intrinsic(self) -> float:
        """sqrt(Nc Nv) exp(-Eg / 2kT) in cm^-3."""
        kt_ev = KB * self.temperature / Q  # thermal energy in eV
        return float(np.sqrt(self.n_c * self.n_v) * np.exp(-self.e_g / (2.0 * kt_ev)))

    @property
    def permittivity(self) -> float:
        """Absolute permittivity in F/cm."""
        from .constants import EPS0
        return self.eps_r * EPS0

    def with_temperature(self, temperature: float) -> "PhysicalModels":
        return replace(self, temperature=temperature)


def _low_field_mobility(params: MobilityParams, doping):
    n = np.abs(doping)
    return params.mu_min + (params.mu_max - params.mu_min) / (
        1.0 + (n / params.n_ref) ** params.alpha
    )


def mobility(models: PhysicalModels, doping, parallel_field):
    """(mu_n, mu_p) at the given |net doping| and driving field (V/cm).

    Low-field value follows the Caughey-Thomas doping fit; high-field
    saturation uses beta = 2 for both carriers so mu is smooth in the field
    (the Newton Jacobian differentiates through it).  mu*E -> v_sat as the
    field grows.
    """
    e = np.asarray(parallel_field, dtype=np.float64)
    mu_n0 = _low_field_mobility(models.mobility_n, doping)
    mu_p0 = _low_field_mobility(models.mobility_p, doping)
    mu_n = mu_n0 / np.sqrt(1.0 + (mu_n0 * e / models.v_sat_n) ** 2)
    mu_p = mu_p0 / np.sqrt(1.0 + (mu_p0 * e / models.v_sat_p) ** 2)
    return mu_n, mu_p


def mobility_field_derivative(models: PhysicalModels, doping, parallel_field):
    """d(mu_n)/dE, d(mu_p)/dE at fixed doping (field in V/cm, >= 0)."""
    e = np.asarray(parallel_field, dtype=np.float64)
    mu_n0 = _low_field_mobility(models.mobility_n, doping)
    mu_p0 = _low_field_mobility(models.mobility_p, doping)
    dn = -(mu_n0 ** 3) * e / models.v_sat_n ** 2 / (
        1.0 + (mu_n0 * e / models.v_sat_n) ** 2) ** 1.5
    dp = -(mu_p0 ** 3) * e / models.v_sat_p ** 2 / (
        1.0 + (mu_p0 * e / models.v_sat_p) ** 2) ** 1.5
    return dn, dp


def recombination(models: PhysicalModels, n, p, doping=None,
                  tau_n=None, tau_p=None):
    """Net SRH + Auger recombination rate and its partials.

    Returns (r, dr_dn, dr_dp) in cm^-3 s^-1.  Positive when np > n_i^2.
    Midgap traps are assumed (n1 = p1 = n_i).  Lifetimes default to the
    model-wide values; pass per-vertex arrays to apply region overrides.
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    tn = models.tau_n if tau_n is None else np.asarray(tau_n, dtype=np.float64)
    tp = models.tau_p if tau_p is None else np.asarray(tau_p, dtype=np.float64)
    ni = models.n_intrinsic
    ni2 = ni * ni

    excess = n * p - ni2
    den = tp * (n + ni) + tn * (p + ni)
    r_srh = excess / den
    dr_srh_dn = (p * den - excess * tp) / den ** 2
    dr_srh_dp = (n * den - excess * tn) / den ** 2

    ca_n, ca_p = models.auger_n, models.auger_p
    coeff = ca_n * n + ca_p * p
    r_aug = coeff * excess
    dr_aug_dn = ca_n * excess + coeff * p
    dr_aug_dp = ca_p * excess + coeff * n

    return r_srh + r_aug, dr_srh_dn + dr_aug_dn, dr_srh_dp + dr_aug_dp


def equilibrium_density(net_doping, n_intrinsic):
    """Charge-neutral equilibrium (n, p) for a signed net doping value."""
    c = np.asarray(net_doping, dtype=np.float64)
    ni = n_intrinsic
    root = np.sqrt(c * c + 4.0 * ni * ni)
    # branch on sign to avoid cancellation in the minority density; the
    # untaken branch may divide by ~0, hence the errstate guard
    with np.errstate(divide="ignore"):
        n = np.where(c >= 0.0, (c + root) / 2.0, (2.0 * ni * ni) / (root - c))
        p = np.where(c >= 0.0, (2.0 * ni * ni) / (root + c), (root - c) / 2.0)
    return n, p


def equilibrium_potential(net_doping, n_intrinsic, v_t):
    """Potential (vs intrinsic level) of a charge-neutral region: V_T asinh(C/2n_i)."""
    c = np.asarray(net_doping, dtype=np.float64)
    return v_t * np.arcsinh(c / (2.0 * n_intrinsic))


class DeviceState:
    """Per-vertex (psi, n, p) plus the two history snapshots BDF-2 needs."""

    __slots__ = ("psi", "n", "p", "history")

    def __init__(self, psi, n, p, history=None):
        self.psi = np.asarray(psi, dtype=np.float64)
        self.n = np.asarray(n, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        if not (self.psi.shape == self.n.shape == self.p.shape):
            raise ValueError("psi, n, p must have equal lengths")
        if np.any(self.n <= 0.0) or np.any(self.p <= 0.0):
            raise ValueError("carrier densities must stay strictly positive")
        # history: list of (time, psi, n, p), newest first, length <= 3
        self.history = list(history) if history else []

    @property
    def n_vertices(self) -> int:
        return self.psi.size

    def copy(self) -> "DeviceState":
        return DeviceState(self.psi.copy(), self.n.copy(), self.p.copy(),
                           history=list(self.history))

    def push_history(self, time: float, keep: int = 3):
        self.history.insert(0, (time, self.psi.copy(), self.n.copy(), self.p.copy()))
        del self.history[keep:]

    def as_vector(self) -> np.ndarray:
        """Interleaved unknown vector [psi0, n0, p0, psi1, ...]."""
        v = np.empty(3 * self.n_vertices)
        v[0::3] = self.psi
        v[1::3] = self.n
        v[2::3] = self.p
        return v

    @staticmethod
    def from_vector(vec: np.ndarray, history=None) -> "DeviceState":
        return DeviceState(vec[0::3], vec[1::3], vec[2::3], history=history)

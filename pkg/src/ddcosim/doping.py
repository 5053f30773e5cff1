"""Doping profiles: stacked donor/acceptor regions with erf junction blending."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DONOR = "donor"
ACCEPTOR = "acceptor"


@dataclass(frozen=True)
class DopingRegion:
    x_start: float          # cm
    x_end: float            # cm
    kind: str               # donor | acceptor
    peak: float             # cm^-3
    transition: float = 0.0  # cm; 0 means an abrupt step
    tau_n: float | None = None  # optional SRH lifetime overrides [s]
    tau_p: float | None = None

    def __post_init__(self):
        if self.kind not in (DONOR, ACCEPTOR):
            raise ValueError(f"unknown doping type {self.kind!r}")
        if self.x_end <= self.x_start:
            raise ValueError("region span must have positive length")
        if self.peak <= 0.0:
            raise ValueError("peak concentration must be positive")
        if self.transition < 0.0:
            raise ValueError("transition width cannot be negative")

    @property
    def sign(self) -> float:
        return 1.0 if self.kind == DONOR else -1.0


class DopingProfile:
    """Ordered regions tiling [0, L] without gaps."""

    def __init__(self, regions):
        regions = list(regions)
        if not regions:
            raise ValueError("profile needs at least one region")
        x = regions[0].x_start
        for r in regions:
            if abs(r.x_start - x) > 1e-12 * max(abs(r.x_end), 1e-30):
                raise ValueError(
                    f"regions must tile without gaps; found break at x={x:g}")
            x = r.x_end
        self.regions = tuple(regions)

    @property
    def x_min(self) -> float:
        return self.regions[0].x_start

    @property
    def x_max(self) -> float:
        return self.regions[-1].x_end

    @property
    def peak_scale(self) -> float:
        """Largest peak concentration; the density normalization constant."""
        return max(r.peak for r in self.regions)

    def lifetimes_at(self, x, default_tau_n, default_tau_p):
        """Per-position SRH lifetimes honoring region overrides."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        tn = np.full(x.shape, default_tau_n)
        tp = np.full(x.shape, default_tau_p)
        for r in self.regions:
            inside = (x >= r.x_start) & (x < r.x_end)
            if r is self.regions[-1]:
                inside |= x == r.x_end
            if r.tau_n is not None:
                tn[inside] = r.tau_n
            if r.tau_p is not None:
                tp[inside] = r.tau_p
        return tn, tp


def net_doping(profile: DopingProfile, x):
    """Signed net doping N_D - N_A at position(s) x (cm^-3).

    Each region contributes peak/2 * (erf((x-x0)/w) - erf((x-x1)/w)) for
    transition width w > 0, which blends smoothly across junctions and
    vanishes at equal-magnitude donor/acceptor midpoints; w = 0 gives an
    abrupt step.
    """
    return _summed(profile, x, signed=True)


def total_doping(profile: DopingProfile, x):
    """Unsigned total dopant concentration N_D + N_A (impurity scattering)."""
    return _summed(profile, x, signed=False)


def _summed(profile: DopingProfile, x, signed: bool):
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    lo, hi = profile.x_min, profile.x_max
    span = hi - lo
    if np.any(x < lo - 1e-12 * span) or np.any(x > hi + 1e-12 * span):
        raise ValueError("position outside the device")

    total = np.zeros_like(x)
    for r in profile.regions:
        if r.transition > 0.0:
            w = r.transition
            c = 0.5 * (erf((x - r.x_start) / w) - erf((x - r.x_end) / w))
        else:
            c = ((x >= r.x_start) & (x < r.x_end)).astype(np.float64)
            if r is profile.regions[-1]:
                c = np.maximum(c, (x == r.x_end).astype(np.float64))
        total += (r.sign if signed else 1.0) * r.peak * c
    return float(total[0]) if scalar else total

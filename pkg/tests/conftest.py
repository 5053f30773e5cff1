import numpy as np
import pytest

from ddcosim.device import Device
from ddcosim.doping import DopingProfile, DopingRegion
from ddcosim.mesh import Refinement, build_mesh
from ddcosim.physics import PhysicalModels


def make_diode(n_vertices=None, area=1e-6, peak=1e16, half_length=2e-4,
               transition=2e-6, h_min=2e-7, h_max=2e-5, models=None,
               name="diode"):
    """Symmetric PN diode: acceptor side at the anode, donor at the cathode."""
    if models is None:
        models = PhysicalModels()
    L = half_length
    profile = DopingProfile([
        DopingRegion(0.0, L, "acceptor", peak, transition=transition),
        DopingRegion(L, 2 * L, "donor", peak, transition=transition),
    ])
    if n_vertices is not None:
        refinement = Refinement.uniform(n_vertices)
    else:
        refinement = Refinement.graded(h_min, h_max, 1.4)
    mesh = build_mesh([L, L], refinement, area=area,
                      contacts={"anode": "left", "cathode": "right"})
    return Device(name, mesh, profile, models)


def make_bar(area=1e-4, length=1e-3, doping=1e16, n_vertices=51,
             models=None, name="bar"):
    """Uniform n-doped resistive bar."""
    if models is None:
        models = PhysicalModels()
    profile = DopingProfile([DopingRegion(0.0, length, "donor", doping)])
    mesh = build_mesh([length], Refinement.uniform(n_vertices), area=area,
                      contacts={"anode": "left", "cathode": "right"})
    return Device(name, mesh, profile, models)


def make_linear_bar(**kw):
    """Bar with effectively field-independent mobility: an exactly linear device."""
    models = PhysicalModels(v_sat_n=1e12, v_sat_p=1e12)
    return make_bar(models=models, **kw)


@pytest.fixture(scope="session")
def diode20():
    return make_diode(n_vertices=20)


@pytest.fixture(scope="session")
def nbar():
    return make_bar()


def fd_jacobian(assemble_residual, x0, psi_cols, density_scale):
    """Column-wise finite differences with scale-aware steps.

    psi_cols: boolean mask of potential-like unknowns; density columns use a
    relative step with an absolute floor and fall back to one-sided when the
    centered point would go nonpositive.
    """
    n = x0.size
    f0 = assemble_residual(x0)
    jac = np.zeros((f0.size, n))
    for k in range(n):
        if psi_cols[k]:
            step = 3e-6
        else:
            step = max(1e-4 * abs(x0[k]), 1e-7 * density_scale)
        xp = x0.copy()
        xp[k] += step
        if not psi_cols[k] and x0[k] - step <= 0.0:
            jac[:, k] = (assemble_residual(xp) - f0) / step
        else:
            xm = x0.copy()
            xm[k] -= step
            jac[:, k] = (assemble_residual(xp) - assemble_residual(xm)) / (2 * step)
    return jac

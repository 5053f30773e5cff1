"""1D device meshes: vertex chains, control volumes, and electrode contacts.

A mesh is a strictly increasing vertex chain; the control volume of vertex i
spans the midpoints of its incident edges, so the control volumes partition
the device exactly.  Edge interfaces carry a dimensionless area factor of 1
in 1D; the cross-section area converts flux densities to amperes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Refinement:
    """Vertex-spacing spec: uniform count, or geometric grading at junctions."""

    n_vertices: int | None = None
    h_min: float | None = None    # cm, spacing at junction anchors
    h_max: float | None = None    # cm, spacing cap away from junctions
    growth: float = 1.2
    junctions: tuple[float, ...] | None = None  # default: interior region bounds

    @staticmethod
    def uniform(n_vertices: int) -> "Refinement":
        if n_vertices < 2:
            raise ValueError("need at least 2 vertices")
        return Refinement(n_vertices=n_vertices)

    @staticmethod
    def graded(h_min: float, h_max: float, growth: float = 1.2,
               junctions=None) -> "Refinement":
        if h_min <= 0 or h_max < h_min:
            raise ValueError("need 0 < h_min <= h_max")
        if growth <= 1.0:
            raise ValueError("growth ratio must exceed 1")
        return Refinement(h_min=h_min, h_max=h_max, growth=growth,
                          junctions=tuple(junctions) if junctions is not None else None)


class DeviceMesh:
    """Immutable 1D control-volume mesh with named electrode contacts."""

    __slots__ = ("vertices", "edge_lengths", "interface", "control_volumes",
                 "area", "contacts", "region_of_vertex", "region_bounds")

    def __init__(self, vertices, area, contacts, region_bounds=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.size < 2:
            raise ValueError("a mesh needs at least 2 vertices")
        edge = np.diff(vertices)
        if np.any(edge <= 0.0):
            raise ValueError("vertices must be strictly increasing")
        if area <= 0.0:
            raise ValueError("cross-section area must be positive")
        self.vertices = vertices
        self.edge_lengths = edge
        self.interface = np.ones_like(edge)  # dimensionless facet factor in 1D
        cv = np.empty_like(vertices)
        cv[0] = edge[0] / 2.0
        cv[-1] = edge[-1] / 2.0
        cv[1:-1] = (edge[:-1] + edge[1:]) / 2.0
        self.control_volumes = cv
        self.area = float(area)

        boundary = {0, vertices.size - 1}
        self.contacts = {}
        for name, verts in contacts.items():
            verts = tuple(int(v) for v in (verts if np.iterable(verts) else (verts,)))
            for v in verts:
                if v not in boundary:
                    raise ValueError(f"contact {name!r} vertex {v} is not on the boundary")
            self.contacts[str(name)] = verts
        if not self.contacts:
            raise ValueError("a device needs at least one contact")

        if region_bounds is None:
            region_bounds = (vertices[0], vertices[-1])
        self.region_bounds = tuple(float(b) for b in region_bounds)
        # vertex -> region index; boundaries belong to the left region except x=0
        idx = np.searchsorted(np.asarray(self.region_bounds), vertices, side="left") - 1
        self.region_of_vertex = np.clip(idx, 0, len(self.region_bounds) - 2)

    @property
    def n_vertices(self) -> int:
        return self.vertices.size

    @property
    def length(self) -> float:
        return float(self.vertices[-1] - self.vertices[0])

    def contact_vertices(self) -> dict:
        return dict(self.contacts)


def _ladder(h0: float, h_max: float, growth: float, budget: float):
    """Geometric edge lengths from h0 capped at h_max, cumulative <= budget."""
    edges = []
    h = min(h0, h_max)
    cum = 0.0
    while cum + h <= budget:
        edges.append(h)
        cum += h
        h = min(h * growth, h_max)
    return edges


def _grade_interval(length, h_left, h_right, h_max, growth):
    left = _ladder(h_left, h_max, growth, length / 2.0)
    right = _ladder(h_right, h_max, growth, length / 2.0)
    edges = left + right[::-1]
    if not edges:
        return [length]
    scale = length / sum(edges)
    return [e * scale for e in edges]


def build_mesh(region_lengths, refinement: Refinement, area: float,
               contacts=None) -> DeviceMesh:
    """Mesh a stack of regions (lengths in cm) with grading toward junctions.

    Junction anchors get h_min spacing growing geometrically to h_max; with a
    uniform refinement the chain is equidistant.  Region boundaries are always
    mesh vertices.  Default contacts are anode at x=0 and cathode at x=L.
    """
    lengths = [float(L) for L in region_lengths]
    if not lengths or any(L <= 0.0 for L in lengths):
        raise ValueError("region lengths must be positive and non-empty")
    bounds = np.concatenate(([0.0], np.cumsum(lengths)))
    total = bounds[-1]

    if refinement.n_vertices is not None:
        vertices = np.linspace(0.0, total, refinement.n_vertices)
        # snap region boundaries into the chain so doping regions stay aligned
        vertices = np.unique(np.concatenate((vertices, bounds)))
    else:
        h_min, h_max, growth = refinement.h_min, refinement.h_max, refinement.growth
        if h_min is None or h_max is None:
            raise ValueError("graded refinement needs h_min and h_max")
        junctions = refinement.junctions
        if junctions is None:
            junctions = tuple(bounds[1:-1])
        junctions = set(float(j) for j in junctions)
        for j in junctions:
            if not (0.0 <= j <= total):
                raise ValueError(f"junction position {j} outside the device")
        pts = [0.0]
        for a, b in zip(bounds[:-1], bounds[1:]):
            hl = h_min if a in junctions or any(abs(a - j) < 1e-12 * total for j in junctions) else h_max
            hr = h_min if b in junctions or any(abs(b - j) < 1e-12 * total for j in junctions) else h_max
            for e in _grade_interval(b - a, hl, hr, h_max, growth):
                pts.append(pts[-1] + e)
            pts[-1] = float(b)  # pin anchors exactly
        vertices = np.asarray(pts)

    if contacts is None:
        contacts = {"anode": (0,), "cathode": (len(vertices) - 1,)}
    else:
        resolved = {}
        last = len(vertices) - 1
        for name, where in contacts.items():
            if where in ("left", 0):
                resolved[name] = (0,)
            elif where in ("right", last):
                resolved[name] = (last,)
            else:
                resolved[name] = where
        contacts = resolved

    return DeviceMesh(vertices, area, contacts, region_bounds=bounds)

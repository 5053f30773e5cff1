"""Device description files: key-value sections with explicit unit strings.

Example::

    # symmetric PN diode
    temperature = 300 K
    area = 1e-6 cm^2

    [mesh]
    h_min = 0.002 um
    h_max = 0.2 um
    growth = 1.4

    [region p_side]
    length = 2 um
    type = acceptor
    peak = 1e16 cm^-3
    transition = 0.02 um
    tau_n = 1 us
    tau_p = 1 us

    [region n_side]
    length = 2 um
    type = donor
    peak = 1e16 cm^-3
    transition = 0.02 um

    [contacts]
    anode = left
    cathode = right

Lengths accept um/µm/cm/m/nm, concentrations cm^-3 (aliases cm-3, /cm3),
times s/ms/us/ns, areas cm^2/um^2.  Regions stack in file order from x = 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .doping import DopingProfile, DopingRegion
from .mesh import Refinement
from .physics import MobilityParams, PhysicalModels


class DeviceConfigError(Exception):
    def __init__(self, message, line=0, source="<device>"):
        super().__init__(f"{source}:{line}: {message}")
        self.line = line
        self.source = source


_LENGTH = {"cm": 1.0, "um": 1e-4, "µm": 1e-4, "nm": 1e-7, "m": 100.0, "mm": 0.1}
_AREA = {"cm^2": 1.0, "cm2": 1.0, "um^2": 1e-8, "um2": 1e-8, "m^2": 1e4}
_TIME = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9}
_DENSITY = {"cm^-3": 1.0, "cm-3": 1.0, "/cm3": 1.0, "/cm^3": 1.0, "cm^-6": None}
_TEMP = {"k": 1.0, "K": 1.0}


def _unit_value(text, table, what, line, source, unitless_ok=False):
    toks = text.split()
    try:
        val = float(toks[0])
    except (ValueError, IndexError):
        raise DeviceConfigError(f"malformed {what} value {text!r}", line, source)
    if len(toks) == 1:
        if unitless_ok:
            return val
        raise DeviceConfigError(
            f"{what} needs an explicit unit (one of {sorted(table)})", line, source)
    unit = toks[1]
    key = unit if unit in table else unit.lower()
    if key not in table or table[key] is None:
        raise DeviceConfigError(
            f"unknown {what} unit {unit!r} (expected one of {sorted(table)})",
            line, source)
    return val * table[key]


@dataclass
class MeshSpec:
    """Geometry + refinement + contacts, ready for build_mesh."""

    region_lengths: list
    refinement: Refinement
    area: float
    contacts: dict          # electrode name -> "left" | "right"
    region_names: list = field(default_factory=list)


def _parse_sections(text, source):
    """Returns (top-level pairs, [(section name, pairs)]) with line numbers."""
    top = []
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise DeviceConfigError("unterminated section header",
                                        lineno, source)
            current = (body[1:-1].strip(), [], lineno)
            sections.append(current)
            continue
        if "=" not in body:
            raise DeviceConfigError(f"expected key = value, got {body!r}",
                                    lineno, source)
        key, val = (s.strip() for s in body.split("=", 1))
        if current is None:
            top.append((key, val, lineno))
        else:
            current[1].append((key, val, lineno))
    return top, sections


def parse_device_config(text: str, source: str = "<device>"):
    """Parse a device description into (MeshSpec, DopingProfile, PhysicalModels)."""
    top, sections = _parse_sections(text, source)

    temperature = 300.0
    area = None
    model_overrides = {}
    for key, val, line in top:
        k = key.lower()
        if k == "temperature":
            temperature = _unit_value(val, _TEMP, "temperature", line, source,
                                      unitless_ok=True)
        elif k == "area" or k == "cross_section":
            area = _unit_value(val, _AREA, "area", line, source)
        elif k in ("tau_n", "tau_p"):
            model_overrides[k] = _unit_value(val, _TIME, "lifetime", line, source)
        else:
            raise DeviceConfigError(f"unknown top-level key {key!r}", line, source)
    if area is None:
        raise DeviceConfigError("missing cross-section `area`", 0, source)

    regions = []
    region_names = []
    mesh_kv = None
    contacts_kv = None
    x = 0.0
    for name, pairs, line0 in sections:
        parts = name.split(None, 1)
        kind = parts[0].lower()
        if kind == "region":
            rname = parts[1] if len(parts) > 1 else f"region{len(regions)}"
            vals = {}
            for key, val, line in pairs:
                k = key.lower()
                if k == "length":
                    vals["length"] = _unit_value(val, _LENGTH, "length", line, source)
                elif k == "type":
                    vals["type"] = val.strip().lower()
                elif k == "peak":
                    vals["peak"] = _unit_value(val, _DENSITY, "concentration",
                                               line, source)
                elif k == "transition":
                    vals["transition"] = _unit_value(val, _LENGTH, "length",
                                                     line, source)
                elif k in ("tau_n", "tau_p"):
                    vals[k] = _unit_value(val, _TIME, "lifetime", line, source)
                else:
                    raise DeviceConfigError(f"unknown region key {key!r}",
                                            line, source)
            for req in ("length", "type", "peak"):
                if req not in vals:
                    raise DeviceConfigError(
                        f"region {rname!r} missing {req!r}", line0, source)
            try:
                regions.append(DopingRegion(
                    x, x + vals["length"], vals["type"], vals["peak"],
                    transition=vals.get("transition", 0.0),
                    tau_n=vals.get("tau_n"), tau_p=vals.get("tau_p")))
            except ValueError as exc:
                raise DeviceConfigError(str(exc), line0, source) from exc
            region_names.append(rname)
            x += vals["length"]
        elif kind == "mesh":
            mesh_kv = (pairs, line0)
        elif kind == "contacts":
            contacts_kv = (pairs, line0)
        else:
            raise DeviceConfigError(f"unknown section {name!r}", line0, source)

    if not regions:
        raise DeviceConfigError("device needs at least one [region ...]", 0, source)
    profile = DopingProfile(regions)

    if contacts_kv is None:
        raise DeviceConfigError("missing [contacts] section", 0, source)
    contacts = {}
    for key, val, line in contacts_kv[0]:
        side = val.strip().lower()
        if side not in ("left", "right"):
            raise DeviceConfigError(
                f"contact {key!r} must be `left` or `right`", line, source)
        contacts[key] = side
    if len(contacts) < 2 or len(set(contacts.values())) != len(contacts):
        raise DeviceConfigError(
            "need two contacts on distinct boundaries", contacts_kv[1], source)

    if mesh_kv is None:
        refinement = Refinement.uniform(101)
    else:
        h_min = h_max = None
        growth = 1.2
        n_vertices = None
        for key, val, line in mesh_kv[0]:
            k = key.lower()
            if k == "h_min":
                h_min = _unit_value(val, _LENGTH, "length", line, source)
            elif k == "h_max":
                h_max = _unit_value(val, _LENGTH, "length", line, source)
            elif k == "growth":
                growth = float(val.split()[0])
            elif k == "n_vertices":
                n_vertices = int(val.split()[0])
            else:
                raise DeviceConfigError(f"unknown mesh key {key!r}", line, source)
        if n_vertices is not None:
            refinement = Refinement.uniform(n_vertices)
        elif h_min is not None and h_max is not None:
            try:
                refinement = Refinement.graded(h_min, h_max, growth)
            except ValueError as exc:
                raise DeviceConfigError(str(exc), mesh_kv[1], source) from exc
        else:
            raise DeviceConfigError(
                "[mesh] needs n_vertices or h_min + h_max", mesh_kv[1], source)

    models = PhysicalModels(temperature=temperature, **model_overrides)
    spec = MeshSpec(region_lengths=[r.x_end - r.x_start for r in regions],
                    refinement=refinement, area=area, contacts=contacts,
                    region_names=region_names)
    return spec, profile, models


def serialize_device_config(spec: MeshSpec, profile: DopingProfile,
                            models: PhysicalModels) -> str:
    out = [f"temperature = {models.temperature:.17g} K",
           f"area = {spec.area:.17g} cm^2", ""]
    r = spec.refinement
    out.append("[mesh]")
    if r.n_vertices is not None:
        out.append(f"n_vertices = {r.n_vertices}")
    else:
        out.append(f"h_min = {r.h_min:.17g} cm")
        out.append(f"h_max = {r.h_max:.17g} cm")
        out.append(f"growth = {r.growth:.17g}")
    out.append("")
    names = spec.region_names or [f"region{i}" for i in range(len(profile.regions))]
    for name, reg in zip(names, profile.regions):
        out.append(f"[region {name}]")
        out.append(f"length = {reg.x_end - reg.x_start:.17g} cm")
        out.append(f"type = {reg.kind}")
        out.append(f"peak = {reg.peak:.17g} cm^-3")
        if reg.transition:
            out.append(f"transition = {reg.transition:.17g} cm")
        if reg.tau_n is not None:
            out.append(f"tau_n = {reg.tau_n:.17g} s")
        if reg.tau_p is not None:
            out.append(f"tau_p = {reg.tau_p:.17g} s")
        out.append("")
    out.append("[contacts]")
    for name, side in spec.contacts.items():
        out.append(f"{name} = {side}")
    out.append("")
    return "\n".join(out)


def build_device(name: str, spec: MeshSpec, profile: DopingProfile,
                 models: PhysicalModels):
    from .device import Device
    from .mesh import build_mesh
    mesh = build_mesh(spec.region_lengths, spec.refinement, spec.area,
                      contacts=spec.contacts)
    return Device(name, mesh, profile, models)

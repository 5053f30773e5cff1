"""SPICE-like netlist subset: R/C/L, V/I sources, and X device ports.

Grammar (one component per line, `#` comments):

    R<name> n1 n2 <value>
    C<name> n1 n2 <value>
    L<name> n1 n2 <value>
    V<name> n1 n2 <waveform>     waveform: <value> | DC <value> |
    I<name> n1 n2 <waveform>               PULSE(v1 v2 tdelay trise
                                                 [twidth tfall period]) |
                                           SIN(voff vamp freq [tdelay phase])
    X<name> <device-config-ref> <electrode>=<node> ...

Values take SPICE unit suffixes (f p n u m k meg g, case-insensitive).
Node `0` is ground.  Diagnostics carry line and column.
"""

from __future__ import annotations

import re

from .circuit import (Capacitor, Circuit, CurrentSource, Dc, DevicePort,
                      Inductor, Pulse, Resistor, Sine, VoltageSource)


class NetlistError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0,
                 source: str = "<netlist>"):
        super().__init__(f"{source}:{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.source = source


_NUMBER = re.compile(r"^([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)([a-zA-Z]*)$")
_SUFFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3,
           "k": 1e3, "meg": 1e6, "g": 1e9}


def parse_value(token: str, line=0, col=0, source="<netlist>") -> float:
    """Number with optional SPICE suffix; trailing unit letters are ignored."""
    m = _NUMBER.match(token)
    if not m:
        raise NetlistError(f"malformed value {token!r}", line, col, source)
    num = float(m.group(1))
    tail = m.group(2).lower()
    if not tail:
        return num
    if tail.startswith("meg"):
        return num * 1e6
    if tail[0] in _SUFFIX:
        return num * _SUFFIX[tail[0]]
    raise NetlistError(f"unknown unit suffix {m.group(2)!r} in {token!r}",
                       line, col, source)


def _split_tokens(body: str):
    """Tokens with columns; NAME(...) groups stay single tokens."""
    tokens = []
    i = 0
    n = len(body)
    while i < n:
        if body[i].isspace():
            i += 1
            continue
        start = i
        depth = 0
        while i < n and (depth > 0 or not body[i].isspace()):
            if body[i] == "(":
                depth += 1
            elif body[i] == ")":
                depth -= 1
            i += 1
        tokens.append((body[start:i], start))
    return tokens


def _parse_waveform(tokens, line, source):
    if not tokens:
        raise NetlistError("missing source waveform", line, 0, source)
    tok, col = tokens[0]
    upper = tok.upper()
    if upper == "DC":
        if len(tokens) < 2:
            raise NetlistError("DC needs a value", line, col, source)
        return Dc(parse_value(tokens[1][0], line, tokens[1][1], source))
    m = re.match(r"^(PULSE|SIN)\((.*)\)$", upper.replace(" ", " "), re.S)
    if m:
        inner = tok[tok.index("(") + 1:tok.rindex(")")]
        args = [parse_value(a, line, col, source)
                for a in inner.replace(",", " ").split()]
        kind = m.group(1)
        if kind == "PULSE":
            if len(args) < 4:
                raise NetlistError("PULSE needs at least v1 v2 tdelay trise",
                                   line, col, source)
            return Pulse(*args[:7])
        if len(args) < 3:
            raise NetlistError("SIN needs at least voff vamp freq",
                               line, col, source)
        return Sine(*args[:5])
    if len(tokens) == 1:
        return Dc(parse_value(tok, line, col, source))
    raise NetlistError(f"unrecognized waveform {tok!r}", line, col, source)


def parse_netlist(text: str, source: str = "<netlist>") -> Circuit:
    """Parse netlist text into a validated Circuit."""
    components = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        tokens = _split_tokens(body)
        (head, head_col) = tokens[0]
        kind = head[0].upper()
        name = head
        if len(head) < 2:
            raise NetlistError(f"component {head!r} needs a name suffix",
                               lineno, head_col, source)
        if kind in "RCL":
            if len(tokens) != 4:
                raise NetlistError(
                    f"{kind} element takes: {kind}<name> n1 n2 value",
                    lineno, head_col, source)
            n1, n2 = tokens[1][0], tokens[2][0]
            val = parse_value(tokens[3][0], lineno, tokens[3][1], source)
            if val <= 0.0:
                raise NetlistError(f"{name}: value must be positive",
                                   lineno, tokens[3][1], source)
            cls = {"R": Resistor, "C": Capacitor, "L": Inductor}[kind]
            components.append(cls(name, n1, n2, val))
        elif kind in "VI":
            if len(tokens) < 4:
                raise NetlistError(
                    f"{kind} source takes: {kind}<name> n1 n2 waveform",
                    lineno, head_col, source)
            n1, n2 = tokens[1][0], tokens[2][0]
            wf = _parse_waveform(tokens[3:], lineno, source)
            cls = VoltageSource if kind == "V" else CurrentSource
            components.append(cls(name, n1, n2, wf))
        elif kind == "X":
            if len(tokens) < 3:
                raise NetlistError(
                    "X device takes: X<name> <device-config-ref> "
                    "electrode=node ...", lineno, head_col, source)
            ref = tokens[1][0]
            pairs = []
            for tok, col in tokens[2:]:
                if "=" not in tok:
                    raise NetlistError(
                        f"expected electrode=node, got {tok!r}",
                        lineno, col, source)
                e, node = tok.split("=", 1)
                if not e or not node:
                    raise NetlistError(
                        f"malformed electrode=node pair {tok!r}",
                        lineno, col, source)
                pairs.append((e, node))
            components.append(DevicePort(name, ref, tuple(pairs)))
        else:
            raise NetlistError(f"unknown component type {head!r}",
                               lineno, head_col, source)
    try:
        return Circuit(components)
    except Exception as exc:
        raise NetlistError(str(exc), 0, 0, source) from exc


def serialize_netlist(circuit: Circuit) -> str:
    """Inverse of parse_netlist (values in plain scientific notation)."""
    lines = []
    for c in circuit.components:
        if isinstance(c, (Resistor, Capacitor, Inductor)):
            lines.append(f"{c.name} {c.n1} {c.n2} {c.value:.17g}")
        elif isinstance(c, (VoltageSource, CurrentSource)):
            lines.append(f"{c.name} {c.n1} {c.n2} {c.waveform.spec()}")
        elif isinstance(c, DevicePort):
            pairs = " ".join(f"{e}={n}" for e, n in c.electrode_nodes)
            lines.append(f"{c.name} {c.device_ref} {pairs}")
    return "\n".join(lines) + "\n"
